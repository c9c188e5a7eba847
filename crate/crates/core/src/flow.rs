//! Rectified-flow objective, Euler sampler and multi-condition guidance.
//!
//! The interpolant is `z_t = (1 - t)·z0 + t·ε` and the network regresses
//! `ε - z0`. Sampling starts from `ε` at `t = 1` and takes `N` uniform steps
//! `z ← z - v̂/N` down to `t = 0`; with the exact field this lands on `z0`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::conditioning::{ConditionKind, ConditionSet};
use crate::error::{config_err, dim_err, invalid, Result};
use crate::params::Matrix;
use crate::rng::{gaussian_matrix, seeded, standard_normal};

/// Threshold below which the sync-expert loss is switched on.
pub const SYNC_GATE_TAU: f64 = 0.4;

/// Anything that predicts a velocity for a noisy window.
pub trait VelocityModel {
    fn velocity(&self, z: &Matrix, t: f64, cs: &ConditionSet) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepSampler {
    Uniform,
    /// `sigmoid(N(mean, std²))`.
    LogitNormal {
        mean: f64,
        std: f64,
    },
    Fixed(f64),
}

impl TimestepSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            TimestepSampler::Uniform => rng.random::<f64>(),
            TimestepSampler::LogitNormal { mean, std } => 1.0 / (1.0 + (-(mean + std * standard_normal(rng))).exp()),
            TimestepSampler::Fixed(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub z0: Matrix,
    pub eps: Matrix,
    pub t: f64,
    pub zt: Matrix,
    pub target: Matrix,
}

impl FlowState {
    pub fn from_parts(z0: Matrix, eps: Matrix, t: f64) -> Result<Self> {
        if z0.dim() != eps.dim() {
            return Err(dim_err("noise and data shapes differ"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("t = {t} outside [0, 1]")));
        }
        let zt = &z0 * (1.0 - t) + &eps * t;
        let target = &eps - &z0;
        Ok(Self { z0, eps, t, zt, target })
    }
}

/// Draws `t` first, then `ε`, from one seeded stream.
pub fn make_flow_state(z0: &Matrix, seed: u64, sampler: TimestepSampler) -> Result<FlowState> {
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("z0 must be finite"));
    }
    let mut rng = seeded(seed);
    let t = sampler.sample(&mut rng);
    let eps = gaussian_matrix(z0.nrows(), z0.ncols(), &mut rng);
    FlowState::from_parts(z0.clone(), eps, t)
}

/// Mean squared error over all elements.
pub fn rf_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(dim_err(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

fn diff_rows(m: &Matrix) -> Matrix {
    let n = m.nrows();
    &m.slice(ndarray::s![1.., ..]) - &m.slice(ndarray::s![..n - 1, ..])
}

/// First- plus second-order temporal difference mismatch, each term the
/// mean over its difference tensor.
pub fn velocity_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(dim_err("velocity loss shapes differ"));
    }
    if pred.nrows() < 3 {
        return Err(invalid(format!("velocity loss needs T >= 3, got {}", pred.nrows())));
    }
    let (p1, t1) = (diff_rows(pred), diff_rows(target));
    let (p2, t2) = (diff_rows(&p1), diff_rows(&t1));
    Ok(rf_loss(&p1, &t1)? + rf_loss(&p2, &t2)?)
}

/// Sync gate: 1 strictly below `tau`, else 0; absent loss gives 0.
pub fn sync_gate(alse: Option<f64>, tau: f64) -> f64 {
    match alse {
        Some(l) if l < tau => 1.0,
        _ => 0.0,
    }
}

/// `L_RF + L_vel + λ_sync·L_ALSE`, returning the total and `λ_sync`.
pub fn total_loss(pred: &Matrix, state: &FlowState, alse: Option<f64>) -> Result<(f64, f64)> {
    let lambda = sync_gate(alse, SYNC_GATE_TAU);
    let mut total = rf_loss(pred, &state.target)? + velocity_loss(pred, &state.target)?;
    if lambda > 0.0 {
        total += lambda * alse.unwrap_or(0.0);
    }
    Ok((total, lambda))
}

/// Graph form of the rectified-flow and velocity terms: `(l_rf, l_vel)`.
pub fn flow_losses_graph(g: &mut Graph<'_>, pred: Var, target: Var) -> (Var, Var) {
    let diff = g.sub(pred, target);
    let l_rf = g.mean_square(diff);
    let p1 = g.row_diff(pred);
    let t1 = g.row_diff(target);
    let d1 = g.sub(p1, t1);
    let first = g.mean_square(d1);
    let p2 = g.row_diff(p1);
    let t2 = g.row_diff(t1);
    let d2 = g.sub(p2, t2);
    let second = g.mean_square(d2);
    let l_vel = g.add(first, second);
    (l_rf, l_vel)
}

/// Per-condition guidance scales.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CfgScales(pub BTreeMap<ConditionKind, f64>);

impl CfgScales {
    pub fn none() -> Self {
        Self::default()
    }

    /// Parses `(name, scale)` pairs; unknown names are configuration errors.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, scale) in pairs {
            let kind: ConditionKind = name.parse()?;
            if !(scale >= 0.0) || !scale.is_finite() {
                return Err(config_err(format!("guidance scale for {name} must be >= 0")));
            }
            map.insert(kind, scale);
        }
        Ok(Self(map))
    }

    pub fn with(mut self, kind: ConditionKind, scale: f64) -> Self {
        self.0.insert(kind, scale);
        self
    }

    pub fn get(&self, kind: ConditionKind) -> f64 {
        self.0.get(&kind).copied().unwrap_or(0.0)
    }

    fn active(&self) -> impl Iterator<Item = (ConditionKind, f64)> + '_ {
        self.0.iter().filter(|(_, &s)| s > 0.0).map(|(&k, &s)| (k, s))
    }
}

/// `(1 + Σλ_c)·v(C) - Σ λ_c·v(C | c = ∅)`, one extra evaluation per
/// positive scale. With every scale zero this is exactly `v(C)`.
pub fn cfg_combine(
    model: &dyn VelocityModel,
    cs: &ConditionSet,
    t: f64,
    z: &Matrix,
    scales: &CfgScales,
) -> Result<Matrix> {
    if scales.0.values().any(|&s| !(s >= 0.0)) {
        return Err(config_err("guidance scales must be non-negative"));
    }
    let cond = model.velocity(z, t, cs)?;
    let active: Vec<_> = scales.active().collect();
    if active.is_empty() {
        return Ok(cond);
    }
    let total: f64 = active.iter().map(|(_, s)| s).sum();
    let mut out = cond * (1.0 + total);
    for (kind, scale) in active {
        let dropped = model.velocity(z, t, &cs.without(kind))?;
        out.scaled_add(-scale, &dropped);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub scales: CfgScales,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 10, scales: CfgScales::none(), seed: 0 }
    }
}

/// Euler integration from seeded noise at `t = 1` to `t = 0`.
pub fn euler_sample(
    model: &dyn VelocityModel,
    cs: &ConditionSet,
    frames: usize,
    dim: usize,
    cfg: &SamplerConfig,
) -> Result<Matrix> {
    let eps = gaussian_matrix(frames, dim, &mut seeded(cfg.seed));
    euler_from(model, cs, eps, cfg)
}

/// Euler integration from a caller-supplied starting point.
pub fn euler_from(model: &dyn VelocityModel, cs: &ConditionSet, start: Matrix, cfg: &SamplerConfig) -> Result<Matrix> {
    if cfg.n_steps == 0 {
        return Err(config_err("sampler needs at least one step"));
    }
    let n = cfg.n_steps;
    let dt = 1.0 / n as f64;
    let mut z = start;
    for i in 0..n {
        let t = 1.0 - i as f64 / n as f64;
        let v = cfg_combine(model, cs, t, &z, &cfg.scales)?;
        z.scaled_add(-dt, &v);
    }
    Ok(z)
}
