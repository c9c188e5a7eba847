//! Training, generation, streaming and evaluation on top of the model.

mod evaluate;
mod stream;
mod train;

use std::path::Path;

pub use evaluate::{evaluate, pearson, real_time_factor, score_windows, EvalOptions, EvalReport, WindowScores};
pub use stream::{run_stream_pipeline, ChunkOutput, StreamSession, DEFAULT_CHUNK};
pub use train::{train, validation_loss, LrSchedule, MetricRecord, TrainConfig, TrainSummary};

use crate::checkpoint::Checkpoint;
use crate::conditioning::{AudioFeatureSequence, ConditionSet, EmotionCondition, GuideMotion};
use crate::config::{model_from_pairs, model_pairs};
use crate::data_synth::Window;
use crate::dit::MotionDit;
use crate::error::{config_err, Result};
use crate::flow::{euler_sample, SamplerConfig};
use crate::motion_space::{KeypointSet, MotionSequence, NormStats, DEFAULT_FPS};
use crate::params::Matrix;

/// Lower bound applied to the scale parameter after denormalisation.
pub const MIN_SCALE: f64 = 1e-3;

/// A window in model coordinates together with its full condition set.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedWindow {
    pub z0: Matrix,
    pub conditions: ConditionSet,
}

impl NormalizedWindow {
    pub fn new(w: &Window, stats: &NormStats) -> Result<Self> {
        Ok(Self { z0: stats.normalize(&w.motion)?, conditions: window_conditions(w, stats)? })
    }
}

/// Conditions for a window: its audio, identity, emotion and normalised
/// first frame as guide.
pub fn window_conditions(w: &Window, stats: &NormStats) -> Result<ConditionSet> {
    conditions_for(w.audio.clone(), &w.identity, w.emotion, Some(&w.guide), stats)
}

/// Builds a full condition set; `guide_raw` is normalised with `stats`.
pub fn conditions_for(
    audio: AudioFeatureSequence,
    identity: &KeypointSet,
    emotion: usize,
    guide_raw: Option<&[f64]>,
    stats: &NormStats,
) -> Result<ConditionSet> {
    let guide = match guide_raw {
        Some(g) => Some(GuideMotion { frame: normalize_frame(g, stats)? }),
        None => None,
    };
    Ok(ConditionSet {
        audio: Some(audio),
        identity: Some(identity.clone()),
        emotion: Some(EmotionCondition { label: emotion }),
        guide,
    })
}

pub fn normalize_frame(frame: &[f64], stats: &NormStats) -> Result<Vec<f64>> {
    let m =
        Matrix::from_shape_vec((1, frame.len()), frame.to_vec()).map_err(|e| crate::Error::Dimension(e.to_string()))?;
    Ok(stats.normalize(&m)?.into_raw_vec_and_offset().0)
}

/// Denormalises, clamps the scale column and wraps as a sequence.
pub fn to_motion(z: &Matrix, stats: &NormStats, keypoints: usize) -> Result<MotionSequence> {
    let mut raw = stats.denormalize(z)?;
    let scale_col = raw.ncols() - 1;
    raw.column_mut(scale_col).mapv_inplace(|s| s.max(MIN_SCALE));
    MotionSequence::from_matrix(&raw, keypoints, DEFAULT_FPS)
}

/// Samples a window in model coordinates.
pub fn generate_normalized(
    model: &MotionDit,
    cs: &ConditionSet,
    frames: usize,
    sampler: &SamplerConfig,
) -> Result<Matrix> {
    euler_sample(model, cs, frames, model.cfg.motion_dim(), sampler)
}

/// Samples `frames` frames and maps them back to motion parameters.
pub fn generate(
    model: &MotionDit,
    cs: &ConditionSet,
    frames: usize,
    sampler: &SamplerConfig,
    stats: Option<&NormStats>,
) -> Result<MotionSequence> {
    let stats = stats.ok_or_else(|| config_err("normalisation statistics are required to generate motion"))?;
    let z = generate_normalized(model, cs, frames, sampler)?;
    to_motion(&z, stats, model.cfg.keypoints)
}

pub fn model_checkpoint(model: &MotionDit) -> Checkpoint {
    Checkpoint::from_store("dit", model_pairs(&model.cfg), &model.params)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<MotionDit> {
    ck.expect_kind("dit")?;
    let mut model = MotionDit::new(model_from_pairs(&ck.config)?)?;
    ck.install(&mut model.params)?;
    Ok(model)
}

pub fn save_model(model: &MotionDit, path: &Path) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn load_model(path: &Path) -> Result<MotionDit> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}
