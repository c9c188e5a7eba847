//! Deterministic synthetic talking-head dataset with a known generative rule.
//!
//! For clip `c` with identity `i` and emotion `e`:
//!
//! * audio is white Gaussian noise smoothed by a 5-frame moving average and
//!   rescaled to unit variance;
//! * lip dimensions are `a_e · (audio · G_i)` with
//!   `G_i = G_shared + 0.2·P_i`, every gain entry `N(0, 1/D_a)`;
//! * each rotation angle is `amp · sin(2π f τ / fps + φ)` with
//!   identity-specific amplitude, frequency and phase;
//! * translation, scale and the remaining expression dimensions sit at
//!   small identity-specific constant offsets;
//! * the canonical keypoints are a shared template plus an identity
//!   perturbation.
//!
//! Identity and emotion tables depend only on the seed, never on the clip
//! length, so clips of different lengths share identities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::conditioning::AudioFeatureSequence;
use crate::config::{self, KeyValue};
use crate::error::{config_err, invalid, Error, Result};
use crate::motion_space::{motion_dim, KeypointSet, MotionSequence, NormStats, DEFAULT_FPS, DEFAULT_KEYPOINTS};
use crate::parallel::Execution;
use crate::params::Matrix;
use crate::rng::{derive_seed, gaussian_matrix, seeded};

/// Moving-average width used to smooth the raw audio noise.
pub const AUDIO_SMOOTHING: usize = 5;
/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

const TAG_GAIN: u64 = 1;
const TAG_EMOTION_AMP: u64 = 2;
const TAG_TEMPLATE: u64 = 3;
const TAG_IDENTITY: u64 = 4;
const TAG_AUDIO: u64 = 5;
const TAG_LABEL: u64 = 6;
const TAG_SPLIT: u64 = 7;

/// Expression dimensions driven by audio: twelve consecutive values starting
/// two thirds of the way into the expression block (42..54 for 21 keypoints).
pub fn lip_dims(keypoints: usize) -> Vec<usize> {
    let start = 3 * ((2 * keypoints) / 3);
    let len = 12.min(3 * keypoints - start);
    (start..start + len).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub frames: usize,
    pub audio_dim: usize,
    pub n_emotions: usize,
    pub n_identities: usize,
    pub keypoints: usize,
    /// Relative size of the identity-specific part of the lip gain.
    pub gain_spread: f64,
    /// Optional explicit emotion amplitudes; seeded in `[0.5, 1.5]` otherwise.
    pub emotion_amps: Option<Vec<f64>>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clips: 64,
            frames: 200,
            audio_dim: 64,
            n_emotions: 4,
            n_identities: 8,
            keypoints: DEFAULT_KEYPOINTS,
            gain_spread: 0.2,
            emotion_amps: None,
        }
    }
}

impl KeyValue for OracleSpec {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let amps = self
            .emotion_amps
            .as_ref()
            .map(|a| a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        vec![
            ("seed", self.seed.to_string()),
            ("n_clips", self.n_clips.to_string()),
            ("frames", self.frames.to_string()),
            ("audio_dim", self.audio_dim.to_string()),
            ("n_emotions", self.n_emotions.to_string()),
            ("n_identities", self.n_identities.to_string()),
            ("keypoints", self.keypoints.to_string()),
            ("gain_spread", self.gain_spread.to_string()),
            ("emotion_amps", amps),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = config::parse(key, value)?,
            "n_clips" => self.n_clips = config::parse(key, value)?,
            "frames" => self.frames = config::parse(key, value)?,
            "audio_dim" => self.audio_dim = config::parse(key, value)?,
            "n_emotions" => self.n_emotions = config::parse(key, value)?,
            "n_identities" => self.n_identities = config::parse(key, value)?,
            "keypoints" => self.keypoints = config::parse(key, value)?,
            "gain_spread" => self.gain_spread = config::parse(key, value)?,
            "emotion_amps" => {
                let v = value.trim();
                self.emotion_amps = if v.is_empty() {
                    None
                } else {
                    Some(v.split(',').map(|s| config::parse(key, s)).collect::<Result<_>>()?)
                };
            }
            _ => return Err(config::unknown(key)),
        }
        Ok(())
    }
}

impl OracleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.frames == 0 || self.audio_dim == 0 || self.keypoints == 0 {
            return Err(config_err("n_clips, frames, audio_dim and keypoints must be positive"));
        }
        if self.n_emotions == 0 || self.n_identities == 0 {
            return Err(config_err("n_emotions and n_identities must be positive"));
        }
        if !(self.gain_spread >= 0.0 && self.gain_spread.is_finite()) {
            return Err(config_err("gain_spread must be finite and >= 0"));
        }
        if let Some(a) = &self.emotion_amps {
            if a.len() != self.n_emotions || a.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(config_err("emotion_amps needs n_emotions positive finite values"));
            }
        }
        Ok(())
    }

    pub fn motion_dim(&self) -> usize {
        motion_dim(self.keypoints)
    }

    pub fn lip_dims(&self) -> Vec<usize> {
        lip_dims(self.keypoints)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("bad spec line `{line}`")))?;
            spec.set(k.trim(), v)?;
        }
        Ok(spec)
    }
}

/// Per-identity generative parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub canonical: KeypointSet,
    /// `D_a × |lip_dims|`.
    pub gain: Matrix,
    pub rot_amp: [f64; 3],
    /// Hertz.
    pub rot_freq: [f64; 3],
    pub rot_phase: [f64; 3],
    pub translation: [f64; 3],
    pub scale: f64,
    /// Constant offset for every expression value (lip dims excluded).
    pub expression: Vec<f64>,
}

/// Everything the oracle needs besides per-clip audio.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTables {
    pub lip_dims: Vec<usize>,
    pub emotion_amps: Vec<f64>,
    pub identities: Vec<IdentityParams>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl OracleTables {
    pub fn new(spec: &OracleSpec) -> Result<Self> {
        spec.validate()?;
        let lips = spec.lip_dims();
        let da = spec.audio_dim;
        let gstd = 1.0 / (da as f64).sqrt();
        let shared = gaussian_matrix(da, lips.len(), &mut seeded(derive_seed(spec.seed, TAG_GAIN, 0))) * gstd;
        let emotion_amps = match &spec.emotion_amps {
            Some(a) => a.clone(),
            None => {
                let mut rng = seeded(derive_seed(spec.seed, TAG_EMOTION_AMP, 0));
                (0..spec.n_emotions).map(|_| uniform(&mut rng, 0.5, 1.5)).collect()
            }
        };
        let k = spec.keypoints;
        let template = gaussian_matrix(k, 3, &mut seeded(derive_seed(spec.seed, TAG_TEMPLATE, 0))) * 0.5;
        let identities = (0..spec.n_identities)
            .map(|i| {
                let mut rng = seeded(derive_seed(spec.seed, TAG_IDENTITY, i as u64));
                let perturb = gaussian_matrix(k, 3, &mut rng) * 0.05;
                let canon = &template + &perturb;
                let canonical = KeypointSet::from_flat(canon.as_slice().expect("standard layout"))?;
                let gain = &shared + &(gaussian_matrix(da, lips.len(), &mut rng) * (spec.gain_spread * gstd));
                let mut triple = |lo: f64, hi: f64| [0; 3].map(|_| uniform(&mut rng, lo, hi));
                let rot_amp = triple(0.05, 0.15);
                let rot_freq = triple(0.1, 0.4);
                let rot_phase = triple(0.0, std::f64::consts::TAU);
                let translation = triple(-0.05, 0.05);
                let scale = uniform(&mut rng, 0.9, 1.1);
                let mut expression: Vec<f64> = (0..3 * k).map(|_| uniform(&mut rng, -0.03, 0.03)).collect();
                for &d in &lips {
                    expression[d] = 0.0;
                }
                Ok(IdentityParams { canonical, gain, rot_amp, rot_freq, rot_phase, translation, scale, expression })
            })
            .collect::<Result<_>>()?;
        Ok(Self { lip_dims: lips, emotion_amps, identities })
    }

    /// Motion for `audio` (`T × D_a`) whose first row is absolute frame
    /// `start_frame`. Lip dimensions are linear in `audio`.
    pub fn motion(
        &self,
        identity: usize,
        emotion: usize,
        audio: &Matrix,
        start_frame: usize,
        fps: f64,
    ) -> Result<Matrix> {
        let id = self.identities.get(identity).ok_or_else(|| invalid(format!("identity {identity} out of range")))?;
        let amp = *self.emotion_amps.get(emotion).ok_or_else(|| invalid(format!("emotion {emotion} out of range")))?;
        if audio.ncols() != id.gain.nrows() {
            return Err(Error::Dimension(format!("audio dim {} vs gain rows {}", audio.ncols(), id.gain.nrows())));
        }
        let kdim = id.expression.len();
        let mut out = Matrix::zeros((audio.nrows(), kdim + 7));
        let lips = audio.dot(&id.gain) * amp;
        for r in 0..audio.nrows() {
            let tau = (start_frame + r) as f64 / fps;
            let mut row = out.row_mut(r);
            for (c, v) in id.expression.iter().enumerate() {
                row[c] = *v;
            }
            for (j, &d) in self.lip_dims.iter().enumerate() {
                row[d] = lips[[r, j]];
            }
            for a in 0..3 {
                row[kdim + a] = id.rot_amp[a] * (std::f64::consts::TAU * id.rot_freq[a] * tau + id.rot_phase[a]).sin();
                row[kdim + 3 + a] = id.translation[a];
            }
            row[kdim + 6] = id.scale;
        }
        Ok(out)
    }
}

/// Smoothed unit-variance audio features.
pub fn synth_audio(frames: usize, dim: usize, seed: u64) -> Matrix {
    let w = AUDIO_SMOOTHING;
    let raw = gaussian_matrix(frames + w - 1, dim, &mut seeded(seed));
    let gain = 1.0 / (w as f64).sqrt();
    let mut out = Matrix::zeros((frames, dim));
    for r in 0..frames {
        let mut row = out.row_mut(r);
        for k in 0..w {
            row += &raw.row(r + k);
        }
        row *= gain;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: u32,
    pub identity_id: usize,
    pub emotion: usize,
    pub identity: KeypointSet,
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
}

impl ClipRecord {
    pub fn frames(&self) -> usize {
        self.motion.len()
    }
}

/// Generates clip `index` with `frames` frames.
pub fn generate_clip(spec: &OracleSpec, tables: &OracleTables, index: usize, frames: usize) -> Result<ClipRecord> {
    let identity_id = index % spec.n_identities;
    let emotion = seeded(derive_seed(spec.seed, TAG_LABEL, index as u64)).random_range(0..spec.n_emotions);
    let audio = synth_audio(frames, spec.audio_dim, derive_seed(spec.seed, TAG_AUDIO, index as u64));
    let motion = tables.motion(identity_id, emotion, &audio, 0, DEFAULT_FPS as f64)?;
    Ok(ClipRecord {
        id: index as u32,
        identity_id,
        emotion,
        identity: tables.identities[identity_id].canonical.clone(),
        audio: AudioFeatureSequence::new(audio)?,
        motion: MotionSequence::from_matrix(&motion, spec.keypoints, DEFAULT_FPS)?,
    })
}

pub fn generate_dataset(spec: &OracleSpec) -> Result<Vec<ClipRecord>> {
    generate_dataset_with(spec, Execution::default())
}

pub fn generate_dataset_with(spec: &OracleSpec, exec: Execution) -> Result<Vec<ClipRecord>> {
    let tables = OracleTables::new(spec)?;
    exec.try_map(spec.n_clips, |i| generate_clip(spec, &tables, i, spec.frames))
}

/// A training or evaluation window cut from one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub clip_id: u32,
    pub start: usize,
    pub audio: AudioFeatureSequence,
    /// Raw (unnormalised) motion, `window × motion_dim`.
    pub motion: Matrix,
    /// Raw first frame of the window.
    pub guide: Vec<f64>,
    pub identity: KeypointSet,
    pub emotion: usize,
}

pub fn window_at(clip: &ClipRecord, start: usize, len: usize) -> Result<Window> {
    if len == 0 || start + len > clip.frames() {
        return Err(invalid(format!("window {start}+{len} exceeds clip of {} frames", clip.frames())));
    }
    let full = clip.motion.to_matrix();
    let motion = full.slice(ndarray::s![start..start + len, ..]).to_owned();
    Ok(Window {
        clip_id: clip.id,
        start,
        audio: clip.audio.slice(start, len),
        guide: motion.row(0).to_vec(),
        motion,
        identity: clip.identity.clone(),
        emotion: clip.emotion,
    })
}

/// All windows at `stride` spacing. Clips shorter than `window` are skipped;
/// the second value counts them.
pub fn segment_windows(clips: &[ClipRecord], window: usize, stride: usize) -> Result<(Vec<Window>, usize)> {
    if window == 0 || stride == 0 {
        return Err(config_err("window and stride must be positive"));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for clip in clips {
        if clip.frames() < window {
            skipped += 1;
            continue;
        }
        let mut start = 0;
        while start + window <= clip.frames() {
            out.push(window_at(clip, start, window)?);
            start += stride;
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} clips shorter than {window} frames");
    }
    Ok((out, skipped))
}

/// One window at a uniformly random start.
pub fn random_window(clip: &ClipRecord, window: usize, rng: &mut impl Rng) -> Result<Window> {
    if clip.frames() < window {
        return Err(invalid(format!("clip {} has {} frames, fewer than {window}", clip.id, clip.frames())));
    }
    let start = rng.random_range(0..=clip.frames() - window);
    window_at(clip, start, window)
}

/// Per-dimension mean and population standard deviation over every frame,
/// two passes, std floored at [`STD_FLOOR`].
pub fn compute_norm_stats(clips: &[ClipRecord]) -> Result<NormStats> {
    let total: usize = clips.iter().map(|c| c.frames()).sum();
    if clips.is_empty() || total < 2 {
        return Err(invalid("need at least two frames to compute statistics"));
    }
    let dim = clips[0].motion.to_matrix().ncols();
    let mut mean = vec![0.0; dim];
    let mats: Vec<Matrix> = clips.iter().map(|c| c.motion.to_matrix()).collect();
    for m in &mats {
        if m.ncols() != dim {
            return Err(Error::Dimension("clips disagree on motion dimension".into()));
        }
        for row in m.rows() {
            for (acc, v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= total as f64);
    let mut var = vec![0.0; dim];
    for m in &mats {
        for row in m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let std = var.iter().map(|v| (v / total as f64).sqrt().max(STD_FLOOR)).collect();
    NormStats::new(mean, std)
}

/// Deterministic validation split: the `fraction` of clip ids with the
/// smallest hash (at least one clip when there are two or more).
pub fn split_ids(ids: &[u32], fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut ranked: Vec<(u64, u32)> = ids.iter().map(|&id| (derive_seed(seed, TAG_SPLIT, id as u64), id)).collect();
    ranked.sort_unstable();
    let n_val =
        if ids.len() < 2 { 0 } else { ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1) };
    let mut val: Vec<u32> = ranked[..n_val].iter().map(|&(_, id)| id).collect();
    let mut train: Vec<u32> = ranked[n_val..].iter().map(|&(_, id)| id).collect();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Fraction of clips held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

/// A loaded dataset with its normalisation statistics and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: OracleSpec,
    pub clips: Vec<ClipRecord>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn generate(spec: &OracleSpec) -> Result<Self> {
        let clips = generate_dataset(spec)?;
        let stats = compute_norm_stats(&clips)?;
        Ok(Self { spec: spec.clone(), clips, stats })
    }

    /// `(train, validation)` clip indices into [`clips`](Self::clips).
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let ids: Vec<u32> = self.clips.iter().map(|c| c.id).collect();
        let (train, val) = split_ids(&ids, VAL_FRACTION, self.spec.seed);
        let index: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        (train.iter().map(|id| index[id]).collect(), val.iter().map(|id| index[id]).collect())
    }

    pub fn lip_dims(&self) -> Vec<usize> {
        self.spec.lip_dims()
    }

    /// Writes `clips/<id>.{mseq,afea,meta}`, `stats.norm` and `spec.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let clips_dir = dir.join("clips");
        fs::create_dir_all(&clips_dir)?;
        for c in &self.clips {
            let stem = clips_dir.join(format!("{:04}", c.id));
            c.motion.write_mseq(&stem.with_extension("mseq"))?;
            c.audio.write_afea(&stem.with_extension("afea"))?;
            let canonical: Vec<String> = c.identity.flat().iter().map(|v| format!("{v:?}")).collect();
            let meta = format!(
                "id={}\nemotion={}\nidentity={}\nkeypoints={}\ncanonical={}\n",
                c.id,
                c.emotion,
                c.identity_id,
                c.identity.len(),
                canonical.join(" ")
            );
            fs::write(stem.with_extension("meta"), meta)?;
        }
        self.stats.save(&dir.join("stats.norm"))?;
        fs::write(dir.join("spec.txt"), self.spec.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = OracleSpec::from_text(&fs::read_to_string(dir.join("spec.txt"))?)?;
        let stats = NormStats::load(&dir.join("stats.norm"))?;
        let mut metas: Vec<_> = fs::read_dir(dir.join("clips"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "meta"))
            .collect();
        metas.sort();
        let mut clips = Vec::with_capacity(metas.len());
        for meta_path in metas {
            let meta = read_clip_meta(&meta_path)?;
            let clip = ClipRecord {
                id: meta.id,
                identity_id: meta.identity_id,
                emotion: meta.emotion,
                identity: meta.identity,
                audio: AudioFeatureSequence::read_afea(&meta_path.with_extension("afea"))?,
                motion: MotionSequence::read_mseq(&meta_path.with_extension("mseq"))?,
            };
            if clip.audio.frames() != clip.frames() {
                return Err(invalid(format!("clip {}: audio and motion lengths differ", clip.id)));
            }
            clips.push(clip);
        }
        if clips.is_empty() {
            return Err(invalid(format!("no clips found under {}", dir.display())));
        }
        Ok(Self { spec, clips, stats })
    }
}

/// Contents of a clip's `.meta` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub id: u32,
    pub emotion: usize,
    pub identity_id: usize,
    pub identity: KeypointSet,
}

pub fn read_clip_meta(path: &Path) -> Result<ClipMeta> {
    let meta = parse_meta(&fs::read_to_string(path)?)?;
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("{}: missing {k}", path.display())));
    let num = |k: &str| -> Result<usize> {
        field(k)?.parse().map_err(|_| Error::Format(format!("{}: bad {k}", path.display())))
    };
    let canonical: Vec<f64> = field("canonical")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("{}: bad canonical", path.display()))))
        .collect::<Result<_>>()?;
    let identity = KeypointSet::from_flat(&canonical)?;
    if identity.len() != num("keypoints")? {
        return Err(Error::Format(format!("{}: keypoint count mismatch", path.display())));
    }
    Ok(ClipMeta { id: num("id")? as u32, emotion: num("emotion")?, identity_id: num("identity")?, identity })
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("bad meta line `{l}`")))
        })
        .collect()
}
