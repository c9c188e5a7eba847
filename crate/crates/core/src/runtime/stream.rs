use std::sync::mpsc;
use std::thread;

use crate::conditioning::{AudioFeatureSequence, ConditionSet, EmotionCondition, GuideMotion};
use crate::dit::MotionDit;
use crate::error::{invalid, Error, Result};
use crate::flow::SamplerConfig;
use crate::motion_space::{KeypointSet, MotionParams, MotionSequence, NormStats};
use crate::params::Matrix;
use crate::rng::derive_seed;

use super::{generate_normalized, normalize_frame, to_motion};

pub const DEFAULT_CHUNK: usize = 100;
const TAG_STREAM: u64 = 0x20;

/// Frames produced for one audio chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkOutput {
    pub index: usize,
    /// Normalised guide frame the chunk was conditioned on.
    pub guide: Vec<f64>,
    /// Emitted frames in model coordinates.
    pub normalized: Matrix,
    pub motion: MotionSequence,
}

/// Chunked generation where each chunk is guided by the last frame emitted
/// before it. Chunks must arrive with consecutive indices starting at 0;
/// only the last one may be shorter than the chunk length.
pub struct StreamSession<'m> {
    model: &'m MotionDit,
    stats: NormStats,
    sampler: SamplerConfig,
    chunk_len: usize,
    identity: KeypointSet,
    emotion: usize,
    guide: Vec<f64>,
    next_index: usize,
    emitted: usize,
    finished: bool,
}

impl<'m> StreamSession<'m> {
    /// `initial_guide` is a raw frame; the neutral pose is used when absent.
    pub fn new(
        model: &'m MotionDit,
        stats: NormStats,
        sampler: SamplerConfig,
        chunk_len: usize,
        identity: KeypointSet,
        emotion: usize,
        initial_guide: Option<&[f64]>,
    ) -> Result<Self> {
        if chunk_len == 0 {
            return Err(crate::error::config_err("chunk length must be positive"));
        }
        let neutral = MotionParams::neutral(model.cfg.keypoints).flatten();
        let guide = normalize_frame(initial_guide.unwrap_or(&neutral), &stats)?;
        Ok(Self {
            model,
            stats,
            sampler,
            chunk_len,
            identity,
            emotion,
            guide,
            next_index: 0,
            emitted: 0,
            finished: false,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    /// Guide the next chunk will use.
    pub fn guide(&self) -> &[f64] {
        &self.guide
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Generates one chunk. A short chunk is padded by repeating its last
    /// audio frame, generated at full length and truncated.
    pub fn push(&mut self, index: usize, audio: &AudioFeatureSequence) -> Result<ChunkOutput> {
        if self.finished {
            return Err(Error::Protocol(format!("chunk {index} arrived after the final partial chunk")));
        }
        if index != self.next_index {
            return Err(Error::Protocol(format!("expected chunk {}, got {index}", self.next_index)));
        }
        let len = audio.frames();
        if len == 0 || len > self.chunk_len {
            return Err(invalid(format!("chunk has {len} frames; expected 1..={}", self.chunk_len)));
        }
        let mut padded = Matrix::zeros((self.chunk_len, audio.dim()));
        padded.slice_mut(ndarray::s![..len, ..]).assign(&audio.features);
        for r in len..self.chunk_len {
            padded.row_mut(r).assign(&audio.features.row(len - 1));
        }
        let cs = ConditionSet {
            audio: Some(AudioFeatureSequence::new(padded)?),
            identity: Some(self.identity.clone()),
            emotion: Some(EmotionCondition { label: self.emotion }),
            guide: Some(GuideMotion { frame: self.guide.clone() }),
        };
        let sampler =
            SamplerConfig { seed: derive_seed(self.sampler.seed, TAG_STREAM, index as u64), ..self.sampler.clone() };
        let z = generate_normalized(self.model, &cs, self.chunk_len, &sampler)?;
        let normalized = z.slice(ndarray::s![..len, ..]).to_owned();
        let motion = to_motion(&normalized, &self.stats, self.model.cfg.keypoints)?;
        let guide = std::mem::replace(&mut self.guide, normalized.row(len - 1).to_vec());
        self.next_index += 1;
        self.emitted += len;
        self.finished = len < self.chunk_len;
        Ok(ChunkOutput { index, guide, normalized, motion })
    }
}

/// Runs a producer thread that feeds `(index, chunk)` items through a
/// bounded queue while the calling thread generates and hands each chunk
/// to `sink`. Generation of chunk `k + 1` starts only after chunk `k` is
/// complete. Returns the number of frames emitted.
pub fn run_stream_pipeline<I, F>(session: &mut StreamSession<'_>, chunks: I, mut sink: F) -> Result<usize>
where
    I: IntoIterator<Item = Result<(usize, AudioFeatureSequence)>>,
    I::IntoIter: Send,
    F: FnMut(ChunkOutput) -> Result<()>,
{
    let iter = chunks.into_iter();
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<Result<(usize, AudioFeatureSequence)>>(2);
        scope.spawn(move || {
            for item in iter {
                let stop = item.is_err();
                if tx.send(item).is_err() || stop {
                    break;
                }
            }
        });
        for item in rx {
            let (index, audio) = item?;
            let out = session.push(index, &audio)?;
            sink(out)?;
        }
        Ok(session.emitted())
    })
}
