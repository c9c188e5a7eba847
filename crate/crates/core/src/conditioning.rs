//! Condition features: audio, identity, emotion and guide motion, the
//! timestep feature, and the learned null embeddings used when a condition
//! is dropped.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::binio::{read_f32s, read_header, read_u32, write_f32s, write_header};
use crate::dit::ModelConfig;
use crate::error::{config_err, dim_err, invalid, Result};
use crate::motion_space::KeypointSet;
use crate::params::{normal, xavier, zeros, Matrix, ParamId, ParamStore};
use crate::rng::seeded;

const AFEA_MAGIC: &[u8; 4] = b"AFEA";
const AFEA_VERSION: u32 = 1;
/// Multiplier applied to `t ∈ [0, 1]` before the sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10000.0;

/// Frame-aligned audio features, one row per video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    pub features: Matrix,
}

impl AudioFeatureSequence {
    pub fn new(features: Matrix) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(invalid("audio features must be non-empty"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("audio features must be finite"));
        }
        Ok(Self { features })
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self { features: self.features.slice(ndarray::s![start..start + len, ..]).to_owned() }
    }

    /// Little-endian: `"AFEA"`, u32 version, u32 T_a, u32 D_a, then
    /// `T_a × D_a` f32 values.
    pub fn write_afea_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, AFEA_MAGIC, AFEA_VERSION)?;
        w.write_all(&(self.frames() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        write_f32s(w, self.features.as_standard_layout().as_slice().unwrap())
    }

    pub fn read_afea_from(r: &mut impl Read) -> Result<Self> {
        read_header(r, AFEA_MAGIC, AFEA_VERSION)?;
        let t = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let values = read_f32s(r, t * d)?;
        Self::new(Matrix::from_shape_vec((t, d), values).map_err(|e| dim_err(e.to_string()))?)
    }

    pub fn write_afea(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_afea_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_afea(path: &Path) -> Result<Self> {
        Self::read_afea_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Source of frame-aligned audio features. Alignment to the video frame
/// rate is the provider's job; the engine only checks frame counts.
pub trait AudioFeatureProvider {
    fn features(&self) -> Result<AudioFeatureSequence>;
}

/// Reads an AFEA1 feature matrix from disk.
pub struct FileAudioProvider {
    pub path: PathBuf,
}

impl AudioFeatureProvider for FileAudioProvider {
    fn features(&self) -> Result<AudioFeatureSequence> {
        AudioFeatureSequence::read_afea(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityFeature {
    pub source_keypoints: KeypointSet,
    pub encoded: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmotionCondition {
    pub label: usize,
}

/// First-frame motion, flattened and normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideMotion {
    pub frame: Vec<f64>,
}

/// Conditions for one window. `None` is the "dropped" condition and maps to
/// the learned null embedding of that modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionSet {
    pub audio: Option<AudioFeatureSequence>,
    pub identity: Option<KeypointSet>,
    pub emotion: Option<EmotionCondition>,
    pub guide: Option<GuideMotion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionKind {
    Audio,
    Identity,
    Emotion,
    Guide,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] =
        [ConditionKind::Audio, ConditionKind::Identity, ConditionKind::Emotion, ConditionKind::Guide];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Audio => "audio",
            ConditionKind::Identity => "identity",
            ConditionKind::Emotion => "emotion",
            ConditionKind::Guide => "guide",
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown condition `{s}`")))
    }
}

impl ConditionSet {
    pub fn without(&self, kind: ConditionKind) -> ConditionSet {
        let mut out = self.clone();
        match kind {
            ConditionKind::Audio => out.audio = None,
            ConditionKind::Identity => out.identity = None,
            ConditionKind::Emotion => out.emotion = None,
            ConditionKind::Guide => out.guide = None,
        }
        out
    }

    pub fn has(&self, kind: ConditionKind) -> bool {
        match kind {
            ConditionKind::Audio => self.audio.is_some(),
            ConditionKind::Identity => self.identity.is_some(),
            ConditionKind::Emotion => self.emotion.is_some(),
            ConditionKind::Guide => self.guide.is_some(),
        }
    }
}

/// Per-condition drop probabilities for classifier-free guidance training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutProbs {
    pub audio: f64,
    pub identity: f64,
    pub emotion: f64,
    pub guide: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        Self { audio: 0.5, identity: 0.1, emotion: 0.1, guide: 0.1 }
    }
}

impl DropoutProbs {
    pub const NONE: DropoutProbs = DropoutProbs { audio: 0.0, identity: 0.0, emotion: 0.0, guide: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for p in [self.audio, self.identity, self.emotion, self.guide] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Independently replaces each condition by `None` with its probability.
/// Four uniforms are always drawn (audio, identity, emotion, guide) so the
/// outcome for one condition never depends on another's probability.
pub fn apply_condition_dropout(cs: &ConditionSet, probs: &DropoutProbs, seed: u64) -> ConditionSet {
    let mut rng = seeded(seed);
    let draws: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
    let mut out = cs.clone();
    if draws[0] < probs.audio {
        out.audio = None;
    }
    if draws[1] < probs.identity {
        out.identity = None;
    }
    if draws[2] < probs.emotion {
        out.emotion = None;
    }
    if draws[3] < probs.guide {
        out.guide = None;
    }
    out
}

/// Interleaved `(sin, cos)` embedding of `t ∈ [0, 1]`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("timestep {t} outside [0, 1]")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(i as f64) / half as f64);
        let arg = t * TIME_SCALE * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Broadcasts a condition vector to `frames` rows and returns the frame
/// positions `0..frames` used for rotary alignment with the motion stream.
pub fn expand_to_sequence(vector: &[f64], frames: usize) -> Result<(Matrix, Vec<usize>)> {
    if frames == 0 {
        return Err(invalid("cannot expand to zero frames"));
    }
    let m = Matrix::from_shape_fn((frames, vector.len()), |(_, j)| vector[j]);
    Ok((m, (0..frames).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Linear,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Silu => g.silu(x),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn register(store: &mut ParamStore, prefix: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add(format!("{prefix}.fc1_weight"), xavier(dims[0], dims[1], rng)),
            b1: store.add(format!("{prefix}.fc1_bias"), zeros(1, dims[1])),
            w2: store.add(format!("{prefix}.fc2_weight"), xavier(dims[1], dims[2], rng)),
            b2: store.add(format!("{prefix}.fc2_bias"), zeros(1, dims[2])),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, act: Activation) -> Var {
        let h = g.linear(x, self.w1, self.b1);
        let h = act.apply(g, h);
        g.linear(h, self.w2, self.b2)
    }
}

/// Parameters of every condition encoder, registered into the model's store.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub d_model: usize,
    pub time_freq_dim: usize,
    pub n_emotions: usize,
    pub identity_activation: Activation,
    audio_w: ParamId,
    audio_b: ParamId,
    identity: Mlp,
    time: Mlp,
    emotion_table: ParamId,
    null_audio: ParamId,
    null_identity: ParamId,
    null_emotion: ParamId,
    null_guide: ParamId,
}

impl ConditionEncoder {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let audio_w = store.add("embed.0.audio.weight", xavier(cfg.audio_dim, d, rng));
        let audio_b = store.add("embed.0.audio.bias", zeros(1, d));
        let identity = Mlp::register(store, "embed.0.identity", [3 * cfg.keypoints, d, d], rng);
        let emotion_table = store.add("embed.0.emotion.table", normal(cfg.n_emotions, d, 0.02, rng));
        let null_audio = store.add("embed.0.null.audio", normal(1, d, 0.02, rng));
        let null_identity = store.add("embed.0.null.identity", normal(1, d, 0.02, rng));
        let null_emotion = store.add("embed.0.null.emotion", normal(1, d, 0.02, rng));
        let null_guide = store.add("embed.0.null.guide", normal(1, d, 0.02, rng));
        let time = Mlp::register(store, "time.0.mlp", [cfg.time_freq_dim, d, d], rng);
        Self {
            d_model: d,
            time_freq_dim: cfg.time_freq_dim,
            n_emotions: cfg.n_emotions,
            identity_activation: Activation::Gelu,
            audio_w,
            audio_b,
            identity,
            time,
            emotion_table,
            null_audio,
            null_identity,
            null_emotion,
            null_guide,
        }
    }

    pub fn audio_weight(&self) -> ParamId {
        self.audio_w
    }

    pub fn identity_weights(&self) -> [ParamId; 4] {
        [self.identity.w1, self.identity.b1, self.identity.w2, self.identity.b2]
    }

    pub fn null_embedding(&self, kind: ConditionKind) -> ParamId {
        match kind {
            ConditionKind::Audio => self.null_audio,
            ConditionKind::Identity => self.null_identity,
            ConditionKind::Emotion => self.null_emotion,
            ConditionKind::Guide => self.null_guide,
        }
    }

    /// `frames × d` audio tokens, or the null embedding repeated.
    pub fn audio_tokens(&self, g: &mut Graph<'_>, audio: Option<&AudioFeatureSequence>, frames: usize) -> Var {
        match audio {
            Some(a) => {
                let x = g.input(a.features.clone());
                g.linear(x, self.audio_w, self.audio_b)
            }
            None => {
                let n = g.param(self.null_audio);
                g.expand_rows(n, frames)
            }
        }
    }

    /// `1 × d` identity feature from canonical keypoints.
    pub fn identity_vector(&self, g: &mut Graph<'_>, kp: Option<&KeypointSet>) -> Var {
        match kp {
            Some(kp) => {
                let flat = kp.flat();
                let x = g.input(Matrix::from_shape_vec((1, flat.len()), flat).unwrap());
                self.identity.forward(g, x, self.identity_activation)
            }
            None => g.param(self.null_identity),
        }
    }

    /// `1 × d` emotion embedding; the same table feeds the timestep feature
    /// and the emotion stream.
    pub fn emotion_vector(&self, g: &mut Graph<'_>, emotion: Option<EmotionCondition>) -> Var {
        match emotion {
            Some(e) => {
                let table = g.param(self.emotion_table);
                g.slice_rows(table, e.label, 1)
            }
            None => g.param(self.null_emotion),
        }
    }

    /// `f_t = MLP(sinusoidal(t)) + emotion embedding`.
    pub fn timestep_vector(&self, g: &mut Graph<'_>, t: f64, emotion: Option<EmotionCondition>) -> Result<Var> {
        let emb = sinusoidal_embed(t, self.time_freq_dim)?;
        let x = g.input(Matrix::from_shape_vec((1, emb.len()), emb).unwrap());
        let h = self.time.forward(g, x, Activation::Silu);
        let e = self.emotion_vector(g, emotion);
        Ok(g.add(h, e))
    }

    pub fn guide_null(&self) -> ParamId {
        self.null_guide
    }

    pub fn check_emotion(&self, emotion: Option<EmotionCondition>) -> Result<()> {
        match emotion {
            Some(e) if e.label >= self.n_emotions => {
                Err(invalid(format!("emotion label {} outside vocabulary of {}", e.label, self.n_emotions)))
            }
            _ => Ok(()),
        }
    }

    pub fn encode_identity(&self, params: &ParamStore, kp: &KeypointSet) -> Result<IdentityFeature> {
        kp.validate()?;
        let expected = self.identity_input_dim(params);
        if kp.len() * 3 != expected {
            return Err(dim_err(format!("identity encoder takes {expected} values, got {}", kp.len() * 3)));
        }
        let mut g = Graph::new(params);
        let v = self.identity_vector(&mut g, Some(kp));
        Ok(IdentityFeature { source_keypoints: kp.clone(), encoded: g.value(v).row(0).to_vec() })
    }

    pub fn timestep_features(
        &self,
        params: &ParamStore,
        t: f64,
        emotion: Option<EmotionCondition>,
    ) -> Result<Vec<f64>> {
        self.check_emotion(emotion)?;
        let mut g = Graph::new(params);
        let v = self.timestep_vector(&mut g, t, emotion)?;
        Ok(g.value(v).row(0).to_vec())
    }

    fn identity_input_dim(&self, params: &ParamStore) -> usize {
        params.get(self.identity.w1).nrows()
    }
}
