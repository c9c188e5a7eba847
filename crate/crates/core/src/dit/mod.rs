//! Multi-stream motion transformer.
//!
//! Blocks run in three stages. The four-stream stage keeps separate weights
//! for motion, audio, emotion and identity tokens. The two-stream stage
//! keeps motion separate and merges the condition tokens into one shared
//! path. The single-stream stage runs all tokens through one path. Every
//! stage attends jointly over the concatenation of its streams.

mod block;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::conditioning::{ConditionEncoder, ConditionSet};
use crate::error::{config_err, dim_err, invalid, Result};
use crate::motion_space::{motion_dim, DEFAULT_KEYPOINTS};
use crate::params::{xavier, zeros, Matrix, ParamId, ParamStore};
use crate::rng::seeded;

pub use block::{
    adaln_modulation, joint_attention, rope_apply, rope_apply_matrix, CrossWeights, Modality, Modulation, PathWeights,
    Stream,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Coarse-to-fine: four-stream, then two-stream, then single-stream.
    C2f,
    /// Cross-attention baseline: motion queries the concatenated conditions.
    Caba,
    /// Every block four-stream.
    NoC2f,
    /// Two-stream stage pairs motion+emotion+identity against audio.
    Maf,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::C2f => "c2f",
            Variant::Caba => "caba",
            Variant::NoC2f => "no_c2f",
            Variant::Maf => "maf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "c2f" => Ok(Variant::C2f),
            "caba" => Ok(Variant::Caba),
            "no_c2f" | "noc2f" => Ok(Variant::NoC2f),
            "maf" => Ok(Variant::Maf),
            _ => Err(config_err(format!("unknown variant `{s}` (c2f, caba, no_c2f, maf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_four_stream: usize,
    pub n_two_stream: usize,
    pub n_single_stream: usize,
    pub rope_base: f64,
    pub keypoints: usize,
    pub audio_dim: usize,
    pub n_emotions: usize,
    pub time_freq_dim: usize,
    pub ffn_ratio: usize,
    pub variant: Variant,
    pub init_seed: u64,
    /// Initial value of every query and key bias entry. Under interleaved
    /// rotary encoding a shared constant bias adds `2b²·Σ cos(θ_f Δ)` to each
    /// logit, so a fresh model already prefers tokens at nearby positions
    /// across streams; zero gives position-agnostic attention at start.
    pub qk_bias_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_four_stream: 3,
            n_two_stream: 6,
            n_single_stream: 12,
            rope_base: 10000.0,
            keypoints: DEFAULT_KEYPOINTS,
            audio_dim: 64,
            n_emotions: 8,
            time_freq_dim: 64,
            ffn_ratio: 4,
            variant: Variant::C2f,
            init_seed: 0,
            qk_bias_init: 2.0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_four_stream: 1,
            n_two_stream: 1,
            n_single_stream: 1,
            audio_dim: 8,
            time_freq_dim: 16,
            ..Self::default()
        }
    }

    pub fn motion_dim(&self) -> usize {
        motion_dim(self.keypoints)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn total_blocks(&self) -> usize {
        self.n_four_stream + self.n_two_stream + self.n_single_stream
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(config_err(format!("head dim {} must be even for rotary encoding", self.head_dim())));
        }
        if self.keypoints == 0 || self.audio_dim == 0 || self.n_emotions == 0 || self.ffn_ratio == 0 {
            return Err(config_err("keypoints, audio_dim, n_emotions and ffn_ratio must be positive"));
        }
        if self.time_freq_dim == 0 || !self.time_freq_dim.is_multiple_of(2) {
            return Err(config_err("time_freq_dim must be even and positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(config_err("rope_base must exceed 1"));
        }
        if !self.qk_bias_init.is_finite() {
            return Err(config_err("qk_bias_init must be finite"));
        }
        Ok(())
    }
}

/// Learnable scalars per modality path: modulation, attention, feed-forward.
fn path_scalars(d: usize, ratio: usize) -> usize {
    (10 + 2 * ratio) * d * d + (11 + ratio) * d
}

/// Closed-form count of learnable scalars for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let m = cfg.motion_dim();
    let embed = (m * d + d)
        + (cfg.audio_dim * d + d)
        + (3 * cfg.keypoints * d + d + d * d + d)
        + cfg.n_emotions * d
        + 4 * d
        + (cfg.time_freq_dim * d + d + d * d + d);
    let final_layer = 2 * d * d + 2 * d + d * m + m;
    let path = path_scalars(d, cfg.ffn_ratio);
    let blocks = match cfg.variant {
        Variant::C2f | Variant::Maf => path * (4 * cfg.n_four_stream + 2 * cfg.n_two_stream + cfg.n_single_stream),
        Variant::NoC2f => path * 4 * cfg.total_blocks(),
        Variant::Caba => (path + 4 * d * d + 4 * d) * cfg.total_blocks(),
    };
    embed + final_layer + blocks
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Four,
    Two,
    Single,
    Cross,
}

#[derive(Clone, Debug)]
struct Block {
    stage: Stage,
    paths: Vec<PathWeights>,
    cross: Option<CrossWeights>,
}

#[derive(Clone, Copy, Debug)]
struct FinalLayer {
    ada_w: ParamId,
    ada_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// The velocity network.
#[derive(Clone, Debug)]
pub struct MotionDit {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub cond: ConditionEncoder,
    motion_w: ParamId,
    motion_b: ParamId,
    blocks: Vec<Block>,
    final_layer: FinalLayer,
}

impl MotionDit {
    /// Builds a freshly initialised model. Modulation projections and the
    /// output projection start at zero, so the initial prediction is zero.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let r = cfg.ffn_ratio;
        let m = cfg.motion_dim();
        let motion_w = store.add("embed.0.motion.weight", xavier(m, d, &mut rng));
        let motion_b = store.add("embed.0.motion.bias", zeros(1, d));
        let cond = ConditionEncoder::register(&mut store, &cfg, &mut rng);

        let mut blocks = Vec::new();
        let mut add_block = |store: &mut ParamStore, stage: Stage, idx: usize, names: &[&str]| {
            let prefix = match stage {
                Stage::Four => "four",
                Stage::Two => "two",
                Stage::Single => "single",
                Stage::Cross => "caba",
            };
            let paths = names
                .iter()
                .map(|n| PathWeights::register(store, &format!("{prefix}.{idx}.{n}"), d, r, &mut rng))
                .collect();
            let cross = (stage == Stage::Cross)
                .then(|| CrossWeights::register(store, &format!("{prefix}.{idx}.motion"), d, &mut rng));
            blocks.push(Block { stage, paths, cross });
        };
        const FOUR: [&str; 4] = ["motion", "audio", "emotion", "identity"];
        match cfg.variant {
            Variant::C2f | Variant::Maf => {
                let two: [&str; 2] = if cfg.variant == Variant::C2f { ["motion", "cond"] } else { ["motion", "audio"] };
                for i in 0..cfg.n_four_stream {
                    add_block(&mut store, Stage::Four, i, &FOUR);
                }
                for i in 0..cfg.n_two_stream {
                    add_block(&mut store, Stage::Two, i, &two);
                }
                for i in 0..cfg.n_single_stream {
                    add_block(&mut store, Stage::Single, i, &["joint"]);
                }
            }
            Variant::NoC2f => {
                for i in 0..cfg.total_blocks() {
                    add_block(&mut store, Stage::Four, i, &FOUR);
                }
            }
            Variant::Caba => {
                for i in 0..cfg.total_blocks() {
                    add_block(&mut store, Stage::Cross, i, &["motion"]);
                }
            }
        }

        let mut qk: Vec<ParamId> = Vec::new();
        for b in &blocks {
            qk.extend(b.paths.iter().flat_map(|p| [p.q_b, p.k_b]));
            qk.extend(b.cross.iter().flat_map(|c| [c.q_b, c.k_b]));
        }
        for id in qk {
            store.get_mut(id).fill(cfg.qk_bias_init);
        }

        let final_layer = FinalLayer {
            ada_w: store.add("final.0.motion.ada_weight", zeros(d, 2 * d)),
            ada_b: store.add("final.0.motion.ada_bias", zeros(1, 2 * d)),
            proj_w: store.add("final.0.motion.proj_weight", zeros(d, m)),
            proj_b: store.add("final.0.motion.proj_bias", zeros(1, m)),
        };
        Ok(Self { cfg, params: store, cond, motion_w, motion_b, blocks, final_layer })
    }

    /// Rebuilds the layout for `cfg` and installs `params` into it.
    pub fn from_params(cfg: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        model.params.copy_from(params)?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn validate_inputs(&self, frames: usize, cs: &ConditionSet) -> Result<()> {
        if frames == 0 {
            return Err(invalid("motion window is empty"));
        }
        if let Some(a) = &cs.audio {
            if a.frames() != frames {
                return Err(invalid(format!("audio has {} frames but the motion window has {frames}", a.frames())));
            }
            if a.dim() != self.cfg.audio_dim {
                return Err(dim_err(format!("audio dim {} != configured {}", a.dim(), self.cfg.audio_dim)));
            }
        }
        if let Some(kp) = &cs.identity {
            if kp.len() != self.cfg.keypoints {
                return Err(dim_err(format!("identity has {} keypoints, expected {}", kp.len(), self.cfg.keypoints)));
            }
        }
        if let Some(gm) = &cs.guide {
            if gm.frame.len() != self.cfg.motion_dim() {
                return Err(dim_err(format!(
                    "guide has {} values, expected {}",
                    gm.frame.len(),
                    self.cfg.motion_dim()
                )));
            }
        }
        self.cond.check_emotion(cs.emotion)
    }

    /// Velocity prediction for a noisy window `z_t` (`T × motion_dim`).
    pub fn forward_graph(&self, g: &mut Graph<'_>, z_t: Var, cs: &ConditionSet, t: f64) -> Result<Var> {
        let (frames, cols) = g.shape(z_t);
        if cols != self.cfg.motion_dim() {
            return Err(dim_err(format!("z_t has {cols} columns, expected {}", self.cfg.motion_dim())));
        }
        self.validate_inputs(frames, cs)?;
        let heads = self.cfg.n_heads;
        let base = self.cfg.rope_base;

        let f_t = self.cond.timestep_vector(g, t, cs.emotion)?;
        let c = g.silu(f_t);

        // motion stream: guide prefix token followed by the window
        let motion = g.linear(z_t, self.motion_w, self.motion_b);
        let guide = match &cs.guide {
            Some(gm) => {
                let x = g.input(Matrix::from_shape_vec((1, gm.frame.len()), gm.frame.clone()).unwrap());
                g.linear(x, self.motion_w, self.motion_b)
            }
            None => g.param(self.cond.guide_null()),
        };
        let mut motion = g.concat_rows(&[guide, motion]);
        let frame_pos: Vec<usize> = (0..frames).collect();
        let motion_pos: Vec<usize> = std::iter::once(0).chain(0..frames).collect();

        let mut audio = self.cond.audio_tokens(g, cs.audio.as_ref(), frames);
        let emo = self.cond.emotion_vector(g, cs.emotion);
        let mut emotion = g.expand_rows(emo, frames);
        let id = self.cond.identity_vector(g, cs.identity.as_ref());
        let mut identity = g.expand_rows(id, frames);

        let motion_len = frames + 1;
        // tokens of every stage after the last four-stream block
        let mut merged: Option<Var> = None;
        let mut joint: Option<Var> = None;
        let cond_pos: Vec<usize> = frame_pos.iter().chain(&frame_pos).chain(&frame_pos).copied().collect();

        for block in &self.blocks {
            match block.stage {
                Stage::Four => {
                    let streams = [motion, audio, emotion, identity];
                    let positions: [&[usize]; 4] = [&motion_pos, &frame_pos, &frame_pos, &frame_pos];
                    let out = block::joint_block(g, &streams, &positions, &block.paths, c, heads, base)?;
                    [motion, audio, emotion, identity] = [out[0], out[1], out[2], out[3]];
                }
                Stage::Two if self.cfg.variant == Variant::Maf => {
                    // motion ⊕ emotion ⊕ identity against audio
                    let aux = match merged {
                        Some(m) => m,
                        None => g.concat_rows(&[motion, emotion, identity]),
                    };
                    let aux_pos: Vec<usize> = motion_pos.iter().chain(&frame_pos).chain(&frame_pos).copied().collect();
                    let out =
                        block::joint_block(g, &[aux, audio], &[&aux_pos, &frame_pos], &block.paths, c, heads, base)?;
                    merged = Some(out[0]);
                    audio = out[1];
                }
                Stage::Two => {
                    let cond = match merged {
                        Some(m) => m,
                        None => g.concat_rows(&[audio, emotion, identity]),
                    };
                    let out = block::joint_block(
                        g,
                        &[motion, cond],
                        &[&motion_pos, &cond_pos],
                        &block.paths,
                        c,
                        heads,
                        base,
                    )?;
                    motion = out[0];
                    merged = Some(out[1]);
                }
                Stage::Single => {
                    let x = match joint {
                        Some(j) => j,
                        None => self.unify(g, motion, audio, emotion, identity, merged, motion_len, frames),
                    };
                    let pos: Vec<usize> = motion_pos.iter().chain(&cond_pos).copied().collect();
                    let out = block::joint_block(g, &[x], &[&pos], &block.paths, c, heads, base)?;
                    joint = Some(out[0]);
                }
                Stage::Cross => {
                    let cond = match merged {
                        Some(m) => m,
                        None => g.concat_rows(&[audio, emotion, identity]),
                    };
                    merged = Some(cond);
                    let cross = block.cross.as_ref().expect("cross block without cross weights");
                    motion = block::cross_block(
                        g,
                        motion,
                        &motion_pos,
                        cond,
                        &cond_pos,
                        &block.paths[0],
                        cross,
                        c,
                        heads,
                        base,
                    )?;
                }
            }
        }

        let motion_tokens = match joint {
            Some(j) => g.slice_rows(j, 1, frames),
            None if self.cfg.variant == Variant::Maf && merged.is_some() => g.slice_rows(merged.unwrap(), 1, frames),
            None => g.slice_rows(motion, 1, frames),
        };
        Ok(self.final_projection(g, motion_tokens, c))
    }

    /// Concatenates everything into the single-stream order
    /// motion → audio → emotion → identity.
    #[allow(clippy::too_many_arguments)]
    fn unify(
        &self,
        g: &mut Graph<'_>,
        motion: Var,
        audio: Var,
        emotion: Var,
        identity: Var,
        merged: Option<Var>,
        motion_len: usize,
        frames: usize,
    ) -> Var {
        match (self.cfg.variant, merged) {
            (Variant::Maf, Some(aux)) => {
                let m = g.slice_rows(aux, 0, motion_len);
                let rest = g.slice_rows(aux, motion_len, 2 * frames);
                g.concat_rows(&[m, audio, rest])
            }
            (_, Some(cond)) => g.concat_rows(&[motion, cond]),
            (_, None) => g.concat_rows(&[motion, audio, emotion, identity]),
        }
    }

    fn final_projection(&self, g: &mut Graph<'_>, x: Var, c: Var) -> Var {
        let d = self.cfg.d_model;
        let fl = &self.final_layer;
        let mods = g.linear(c, fl.ada_w, fl.ada_b);
        let shift = g.slice_cols(mods, 0, d);
        let scale = g.slice_cols(mods, d, d);
        let h = g.layer_norm(x);
        let h = g.modulate(h, shift, scale);
        g.linear(h, fl.proj_w, fl.proj_b)
    }

    /// Eager forward pass.
    pub fn forward(&self, z_t: &Matrix, cs: &ConditionSet, t: f64) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let z = g.input(z_t.clone());
        let out = self.forward_graph(&mut g, z, cs, t)?;
        Ok(g.value(out).to_owned())
    }

    /// Parameter-group label used for reporting: the name's stage prefix.
    pub fn param_group(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }
}

impl crate::flow::VelocityModel for MotionDit {
    fn velocity(&self, z: &Matrix, t: f64, cs: &ConditionSet) -> Result<Matrix> {
        self.forward(z, cs, t)
    }
}
