use std::time::Instant;

use crate::alse::SyncExpert;
use crate::data_synth::{segment_windows, Dataset};
use crate::dit::MotionDit;
use crate::error::{invalid, Result};
use crate::flow::SamplerConfig;
use crate::motion_space::{smoothness, DEFAULT_FPS};
use crate::parallel::Execution;
use crate::params::Matrix;
use crate::rng::derive_seed;

use super::{generate_normalized, to_motion, window_conditions};

const TAG_EVAL: u64 = 0x30;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub window: usize,
    pub stride: usize,
    pub sampler: SamplerConfig,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { window: 80, stride: 80, sampler: SamplerConfig::default(), exec: Execution::default() }
    }
}

/// Lip accuracy and smoothness of predicted windows against references.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScores {
    pub lip_mse: f64,
    /// Mean per-dimension variance of the reference lip values.
    pub lip_variance: f64,
    pub lip_corr: f64,
    /// Mean smoothness of the predicted windows.
    pub smoothness: f64,
}

impl WindowScores {
    pub fn mse_ratio(&self) -> f64 {
        self.lip_mse / self.lip_variance.max(f64::MIN_POSITIVE)
    }
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Scores raw-space windows on `lip_dims`. The correlation pools every lip
/// value after centring each dimension.
pub fn score_windows(pred: &[Matrix], reference: &[Matrix], lip_dims: &[usize]) -> Result<WindowScores> {
    if pred.is_empty() || pred.len() != reference.len() {
        return Err(invalid("need equally many predicted and reference windows"));
    }
    let mut p_cols: Vec<Vec<f64>> = vec![Vec::new(); lip_dims.len()];
    let mut r_cols: Vec<Vec<f64>> = vec![Vec::new(); lip_dims.len()];
    let mut smooth = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        if p.dim() != r.dim() {
            return Err(crate::Error::Dimension(format!("window shapes {:?} vs {:?}", p.dim(), r.dim())));
        }
        for (j, &d) in lip_dims.iter().enumerate() {
            p_cols[j].extend(p.column(d));
            r_cols[j].extend(r.column(d));
        }
        smooth += smoothness(p)?;
    }
    let n = p_cols[0].len() as f64;
    let mut se = 0.0;
    let mut var = 0.0;
    let (mut pc, mut rc) = (Vec::new(), Vec::new());
    for (p, r) in p_cols.iter().zip(&r_cols) {
        let (mp, mr) = (p.iter().sum::<f64>() / n, r.iter().sum::<f64>() / n);
        se += p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        var += r.iter().map(|b| (b - mr) * (b - mr)).sum::<f64>() / n;
        pc.extend(p.iter().map(|a| a - mp));
        rc.extend(r.iter().map(|b| b - mr));
    }
    Ok(WindowScores {
        lip_mse: se / (n * lip_dims.len() as f64),
        lip_variance: var / lip_dims.len() as f64,
        lip_corr: pearson(&pc, &rc),
        smoothness: smooth / pred.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub windows: usize,
    pub frames: usize,
    pub scores: WindowScores,
    pub alse_mean: Option<f64>,
    pub param_count: usize,
    pub seconds: f64,
    pub fps: f64,
    pub rtf: f64,
}

impl EvalReport {
    /// Plain `key=value` lines.
    pub fn to_text(&self) -> String {
        self.fields().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn csv_header(&self) -> String {
        self.fields().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().into_iter().map(|(_, v)| v).collect::<Vec<_>>().join(",")
    }

    /// Fields that do not depend on wall-clock time.
    pub fn stable_fields(&self) -> Vec<(&'static str, String)> {
        self.fields().into_iter().filter(|(k, _)| !matches!(*k, "seconds" | "fps" | "rtf")).collect()
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.clone()),
            ("windows", self.windows.to_string()),
            ("frames", self.frames.to_string()),
            ("lip_mse", self.scores.lip_mse.to_string()),
            ("lip_variance", self.scores.lip_variance.to_string()),
            ("lip_mse_ratio", self.scores.mse_ratio().to_string()),
            ("lip_corr", self.scores.lip_corr.to_string()),
            ("smoothness", self.scores.smoothness.to_string()),
            ("alse_mean", self.alse_mean.map(|v| v.to_string()).unwrap_or_else(|| "nan".into())),
            ("param_count", self.param_count.to_string()),
            ("seconds", self.seconds.to_string()),
            ("fps", self.fps.to_string()),
            ("rtf", self.rtf.to_string()),
        ]
    }
}

/// Ratio of generation time to the duration of the generated motion.
pub fn real_time_factor(seconds: f64, frames: usize, fps: f64) -> f64 {
    seconds / (frames as f64 / fps)
}

/// Generates every validation window (guide = its own first frame) and
/// scores it against the reference motion.
pub fn evaluate(
    model: &MotionDit,
    data: &Dataset,
    clips: &[usize],
    expert: Option<&SyncExpert>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let selected: Vec<_> = clips.iter().map(|&i| data.clips[i].clone()).collect();
    let (windows, _) = segment_windows(&selected, opts.window, opts.stride)?;
    if windows.is_empty() {
        return Err(invalid(format!("no evaluation clip has {} frames", opts.window)));
    }
    let start = Instant::now();
    let generated = opts.exec.try_map(windows.len(), |i| {
        let w = &windows[i];
        let cs = window_conditions(w, &data.stats)?;
        let seed = derive_seed(opts.sampler.seed, TAG_EVAL, ((w.clip_id as u64) << 32) | w.start as u64);
        let sampler = SamplerConfig { seed, ..opts.sampler.clone() };
        let z = generate_normalized(model, &cs, opts.window, &sampler)?;
        let raw = to_motion(&z, &data.stats, model.cfg.keypoints)?.to_matrix();
        Ok::<_, crate::Error>((z, raw))
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let preds: Vec<Matrix> = generated.iter().map(|(_, raw)| raw.clone()).collect();
    let refs: Vec<Matrix> = windows.iter().map(|w| w.motion.clone()).collect();
    let scores = score_windows(&preds, &refs, &data.lip_dims())?;
    let alse_mean = match expert {
        Some(e) => {
            let losses = windows
                .iter()
                .zip(&generated)
                .map(|(w, (z, _))| e.loss(&w.audio.features, z))
                .collect::<Result<Vec<_>>>()?;
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
        None => None,
    };
    let frames = windows.len() * opts.window;
    Ok(EvalReport {
        variant: model.cfg.variant.to_string(),
        windows: windows.len(),
        frames,
        scores,
        alse_mean,
        param_count: model.param_count(),
        seconds,
        fps: frames as f64 / seconds.max(1e-12),
        rtf: real_time_factor(seconds, frames, DEFAULT_FPS as f64),
    })
}
