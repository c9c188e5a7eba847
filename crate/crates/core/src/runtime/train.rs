use std::path::PathBuf;

use rand::Rng;

use crate::alse::SyncExpert;
use crate::autodiff::Graph;
use crate::conditioning::{apply_condition_dropout, ConditionSet, DropoutProbs};
use crate::config::{self, KeyValue};
use crate::data_synth::{random_window, window_at, Dataset};
use crate::dit::MotionDit;
use crate::error::{config_err, invalid, Error, Result};
use crate::flow::{flow_losses_graph, make_flow_state, rf_loss, sync_gate, FlowState, TimestepSampler, SYNC_GATE_TAU};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::Execution;
use crate::params::Matrix;
use crate::rng::{derive_seed, seeded};

use super::NormalizedWindow;

const TAG_ORDER: u64 = 0x10;
const TAG_SAMPLE: u64 = 0x11;
const TAG_VAL: u64 = 0x12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up then cosine decay to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub window: usize,
    /// Random windows drawn per training clip and epoch.
    pub windows_per_clip: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub weight_rf: f64,
    pub weight_vel: f64,
    pub dropout: DropoutProbs,
    pub t_sampler: TimestepSampler,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub alse: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            window: 80,
            windows_per_clip: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 0.0,
            weight_rf: 1.0,
            weight_vel: 1.0,
            dropout: DropoutProbs::default(),
            t_sampler: TimestepSampler::Uniform,
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
            alse: None,
        }
    }
}

impl KeyValue for TrainConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("window", self.window.to_string()),
            ("windows_per_clip", self.windows_per_clip.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("weight_rf", self.weight_rf.to_string()),
            ("weight_vel", self.weight_vel.to_string()),
            ("drop_audio", self.dropout.audio.to_string()),
            ("drop_identity", self.dropout.identity.to_string()),
            ("drop_emotion", self.dropout.emotion.to_string()),
            ("drop_guide", self.dropout.guide.to_string()),
            ("t_sampler", config::format_t_sampler(&self.t_sampler)),
            (
                "schedule",
                match self.schedule {
                    LrSchedule::Constant => "constant".into(),
                    LrSchedule::Cosine => "cosine".into(),
                },
            ),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("alse", config::format_path(&self.alse)),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = config::parse(key, value)?,
            "batch_size" => self.batch_size = config::parse(key, value)?,
            "epochs" => self.epochs = config::parse(key, value)?,
            "seed" => self.seed = config::parse(key, value)?,
            "window" => self.window = config::parse(key, value)?,
            "windows_per_clip" => self.windows_per_clip = config::parse(key, value)?,
            "beta1" => self.beta1 = config::parse(key, value)?,
            "beta2" => self.beta2 = config::parse(key, value)?,
            "adam_eps" => self.adam_eps = config::parse(key, value)?,
            "clip_norm" => self.clip_norm = config::parse(key, value)?,
            "weight_rf" => self.weight_rf = config::parse(key, value)?,
            "weight_vel" => self.weight_vel = config::parse(key, value)?,
            "drop_audio" => self.dropout.audio = config::parse(key, value)?,
            "drop_identity" => self.dropout.identity = config::parse(key, value)?,
            "drop_emotion" => self.dropout.emotion = config::parse(key, value)?,
            "drop_guide" => self.dropout.guide = config::parse(key, value)?,
            "t_sampler" => self.t_sampler = config::parse_t_sampler(key, value)?,
            "schedule" => {
                self.schedule = match value.trim() {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    other => return Err(config_err(format!("{key}: unknown schedule `{other}`"))),
                }
            }
            "warmup_steps" => self.warmup_steps = config::parse(key, value)?,
            "alse" => self.alse = config::parse_path(value),
            _ => return Err(config::unknown(key)),
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err("train.lr must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.windows_per_clip == 0 {
            return Err(config_err("train.batch_size and train.windows_per_clip must be >= 1"));
        }
        if self.window < 3 {
            return Err(config_err("train.window must be >= 3 for the velocity loss"));
        }
        if self.weight_rf < 0.0 || self.weight_vel < 0.0 || self.clip_norm < 0.0 {
            return Err(config_err("loss weights and clip_norm must be >= 0"));
        }
        self.dropout.validate()?;
        self.adam().validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let p = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        self.lr * warm * decay
    }
}

/// One line of the metrics log. Per-step lines carry `NaN` for `val_mse`;
/// the line closing an epoch carries the validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_rf: f64,
    pub loss_vel: f64,
    pub loss_alse: f64,
    pub lambda_sync: f64,
    pub val_mse: f64,
}

impl MetricRecord {
    pub const HEADER: &'static str = "epoch,step,loss_rf,loss_vel,loss_alse,lambda_sync,val_mse";

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.loss_rf, self.loss_vel, self.loss_alse, self.lambda_sync, self.val_mse
        )
    }

    pub fn total(&self) -> f64 {
        self.loss_rf + self.loss_vel + if self.lambda_sync > 0.0 { self.lambda_sync * self.loss_alse } else { 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean training loss (rf + vel + gated sync) per epoch.
    pub epoch_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Fraction of samples whose sync gate was open.
    pub gate_fraction: f64,
    pub records: Vec<MetricRecord>,
}

struct SampleResult {
    loss_rf: f64,
    loss_vel: f64,
    loss_alse: Option<f64>,
    lambda: f64,
    grads: Vec<Option<Matrix>>,
}

/// Forward, loss and backward for one window.
fn sample_step(
    model: &MotionDit,
    expert: Option<&SyncExpert>,
    state: &FlowState,
    cs: &ConditionSet,
    cfg: &TrainConfig,
) -> Result<SampleResult> {
    let mut g = Graph::new(&model.params);
    let zt = g.input(state.zt.clone());
    let pred = model.forward_graph(&mut g, zt, cs, state.t)?;
    let target = g.input(state.target.clone());
    let (l_rf, l_vel) = flow_losses_graph(&mut g, pred, target);
    let a = g.scale(l_rf, cfg.weight_rf);
    let b = g.scale(l_vel, cfg.weight_vel);
    let mut total = g.add(a, b);
    let mut loss_alse = None;
    let mut lambda = 0.0;
    if let (Some(expert), Some(audio)) = (expert, cs.audio.as_ref()) {
        // estimate of the clean window implied by the prediction
        let step = g.scale(pred, -state.t);
        let z0_hat = g.add(zt, step);
        let bound = expert.bind_frozen(&mut g);
        let audio_in = g.input(audio.features.clone());
        let l_sync = expert.loss_graph(&mut g, &bound, audio_in, z0_hat)?;
        let value = g.scalar(l_sync);
        lambda = sync_gate(Some(value), SYNC_GATE_TAU);
        loss_alse = Some(value);
        if lambda > 0.0 {
            let gated = g.scale(l_sync, lambda);
            total = g.add(total, gated);
        }
    }
    let (loss_rf, loss_vel) = (g.scalar(l_rf), g.scalar(l_vel));
    if !g.scalar(total).is_finite() {
        return Err(Error::Divergence(format!("non-finite loss (rf {loss_rf}, vel {loss_vel}) at t = {}", state.t)));
    }
    let grads = g.backward(total).into_params();
    Ok(SampleResult { loss_rf, loss_vel, loss_alse, lambda, grads })
}

/// Validation flow loss: one window per validation clip, all conditions
/// present, fixed noise and timestep per clip.
pub fn validation_loss(
    model: &MotionDit,
    data: &Dataset,
    val: &[usize],
    window: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = exec.try_map(val.len(), |i| {
        let clip = &data.clips[val[i]];
        let w = window_at(clip, 0, window.min(clip.frames()))?;
        let nw = NormalizedWindow::new(&w, &data.stats)?;
        let state = make_flow_state(&nw.z0, derive_seed(seed, TAG_VAL, clip.id as u64), TimestepSampler::Uniform)?;
        let pred = model.forward(&state.zt, &nw.conditions, state.t)?;
        rf_loss(&pred, &state.target)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains `model` in place on the dataset's training split.
///
/// Each sample's window, dropout, timestep and noise are drawn from a seed
/// derived from `(cfg.seed, step, index)`, and per-sample gradients are
/// summed in index order, so the result does not depend on the execution
/// mode or thread count.
pub fn train(
    model: &mut MotionDit,
    data: &Dataset,
    cfg: &TrainConfig,
    expert: Option<&SyncExpert>,
    exec: Execution,
    sink: &mut dyn FnMut(&MetricRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_idx, val_idx) = data.split();
    let usable: Vec<usize> = train_idx.into_iter().filter(|&i| data.clips[i].frames() >= cfg.window).collect();
    if usable.is_empty() {
        return Err(invalid(format!("no training clip has at least {} frames", cfg.window)));
    }
    if data.stats.dim() != model.cfg.motion_dim() {
        return Err(Error::Dimension("dataset statistics do not match the model's motion dimension".into()));
    }
    let mut opt = Adam::new(cfg.adam(), &model.params)?;
    let per_epoch = (usable.len() * cfg.windows_per_clip).div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut summary = TrainSummary::default();
    let (mut gate_open, mut gate_total) = (0.0, 0usize);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> =
            (0..usable.len() * cfg.windows_per_clip).map(|i| usable[i % usable.len()]).collect();
        let mut rng = seeded(derive_seed(cfg.seed, TAG_ORDER, epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &MotionDit = model;
            let results = exec.try_map(batch.len(), |b| {
                let sample_seed = derive_seed(cfg.seed, TAG_SAMPLE, ((step as u64) << 20) | b as u64);
                let mut rng = seeded(sample_seed);
                let w = random_window(&data.clips[batch[b]], cfg.window, &mut rng)?;
                let nw = NormalizedWindow::new(&w, &data.stats)?;
                let cs = apply_condition_dropout(&nw.conditions, &cfg.dropout, rng.random());
                let state = make_flow_state(&nw.z0, rng.random(), cfg.t_sampler)?;
                sample_step(frozen, expert, &state, &cs, cfg)
            })?;

            let n = results.len() as f64;
            let mut grads: Vec<Option<Matrix>> = vec![None; model.params.len()];
            let (mut rf, mut vel, mut sync, mut sync_n, mut lambda) = (0.0, 0.0, 0.0, 0usize, 0.0);
            for r in results {
                rf += r.loss_rf;
                vel += r.loss_vel;
                if let Some(s) = r.loss_alse {
                    sync += s;
                    sync_n += 1;
                }
                lambda += r.lambda;
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.scaled_add(1.0 / n, &g),
                            None => *acc = Some(g / n),
                        }
                    }
                }
            }
            gate_open += lambda;
            gate_total += batch.len();
            opt.cfg.lr = cfg.lr_at(step, total_steps);
            opt.step(&mut model.params, &grads);
            let record = MetricRecord {
                epoch,
                step,
                loss_rf: rf / n,
                loss_vel: vel / n,
                loss_alse: if sync_n > 0 { sync / sync_n as f64 } else { f64::NAN },
                lambda_sync: lambda / n,
                val_mse: f64::NAN,
            };
            epoch_sum += record.total() * n;
            sink(&record);
            summary.records.push(record);
            step += 1;
        }
        let val = validation_loss(model, data, &val_idx, cfg.window, cfg.seed, exec)?;
        let mean = epoch_sum / order.len() as f64;
        log::info!("epoch {epoch}: train loss {mean:.5}, val mse {val:.5}");
        let last = *summary.records.last().expect("at least one step per epoch");
        let record = MetricRecord { val_mse: val, ..last };
        sink(&record);
        summary.epoch_loss.push(mean);
        summary.val_mse.push(val);
    }
    summary.steps = step;
    summary.gate_fraction = if gate_total > 0 { gate_open / gate_total as f64 } else { 0.0 };
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::OracleSpec;
    use crate::dit::ModelConfig;

    fn tiny_data() -> Dataset {
        Dataset::generate(&OracleSpec { n_clips: 10, frames: 12, audio_dim: 8, ..OracleSpec::default() }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { lr: 1e-3, batch_size: 4, epochs: 1, window: 6, ..TrainConfig::default() }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut c = TrainConfig::default();
        let src = TrainConfig { schedule: LrSchedule::Cosine, alse: Some("x.ck".into()), ..tiny_cfg() };
        for (k, v) in src.pairs() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c.schedule, LrSchedule::Cosine);
        assert_eq!(c.alse, Some(PathBuf::from("x.ck")));
        assert!(TrainConfig { batch_size: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { window: 2, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn lr_schedule_shapes() {
        let c = TrainConfig { lr: 1.0, schedule: LrSchedule::Cosine, warmup_steps: 2, ..tiny_cfg() };
        assert_eq!(c.lr_at(0, 10), 0.5);
        assert_eq!(c.lr_at(2, 10), 1.0);
        assert!(c.lr_at(9, 10) < 0.1);
        assert_eq!(TrainConfig { lr: 0.3, ..tiny_cfg() }.lr_at(5, 10), 0.3);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = tiny_data();
        let mut model = MotionDit::new(ModelConfig::tiny()).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let s = train(&mut model, &data, &cfg, None, Execution::Sequential, &mut |_| {}).unwrap();
        assert!(s.steps > 0);
        for ((_, _, a), (_, _, b)) in model.params.iter().zip(before.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn runs_are_reproducible_and_gate_closed_without_expert() {
        let data = tiny_data();
        let run = |exec| {
            let mut model = MotionDit::new(ModelConfig::tiny()).unwrap();
            let mut lines = Vec::new();
            let s = train(&mut model, &data, &tiny_cfg(), None, exec, &mut |r| lines.push(r.to_line())).unwrap();
            (model.params, lines, s)
        };
        let (p1, l1, s1) = run(Execution::Sequential);
        let (p2, l2, _) = run(Execution::Parallel);
        assert_eq!(l1, l2);
        for ((_, _, a), (_, _, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(a, b);
        }
        assert!(s1.records.iter().all(|r| r.lambda_sync == 0.0 && r.loss_alse.is_nan()));
        assert_eq!(s1.gate_fraction, 0.0);
        assert_eq!(s1.val_mse.len(), 1);
        assert!(s1.val_mse[0].is_finite());
        // training moved the weights
        let fresh = MotionDit::new(ModelConfig::tiny()).unwrap();
        assert!(p1.iter().zip(fresh.params.iter()).any(|(a, b)| a.2 != b.2));
    }

    #[test]
    fn expert_losses_are_logged() {
        use crate::alse::{SyncExpert, SyncExpertConfig};
        let data = tiny_data();
        let expert = SyncExpert::new(SyncExpertConfig { audio_dim: 8, window: 3, ..Default::default() }).unwrap();
        let mut model = MotionDit::new(ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig { dropout: DropoutProbs::NONE, ..tiny_cfg() };
        let s = train(&mut model, &data, &cfg, Some(&expert), Execution::Sequential, &mut |_| {}).unwrap();
        for r in &s.records {
            assert!((0.0..=1.0).contains(&r.loss_alse));
            assert!(r.lambda_sync >= 0.0);
        }
    }

    #[test]
    fn short_clips_are_rejected() {
        let data = tiny_data();
        let mut model = MotionDit::new(ModelConfig::tiny()).unwrap();
        let cfg = TrainConfig { window: 50, ..tiny_cfg() };
        assert!(matches!(
            train(&mut model, &data, &cfg, None, Execution::Sequential, &mut |_| {}),
            Err(Error::Validation(_))
        ));
    }
}
