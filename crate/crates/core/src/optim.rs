//! Adam with bias correction and optional global-norm clipping.

use crate::error::{config_err, Result};
use crate::params::{Matrix, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the full gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err("Adam epsilon must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(config_err("clip norm must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u64,
}

/// L2 norm over every present gradient tensor.
pub fn global_norm(grads: &[Option<Matrix>]) -> f64 {
    grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let m: Vec<Matrix> = params.iter().map(|(_, _, p)| Matrix::zeros(p.dim())).collect();
        Ok(Self { cfg, v: m.clone(), m, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Tensors without a gradient are left untouched and their
    /// moments are not decayed. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Matrix>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.steps += 1;
        let norm = global_norm(grads);
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(m).and(&mut *v).and(grad).for_each(|m, v, &g| {
                let g = g * clip;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
            if lr == 0.0 {
                continue;
            }
            let p = params.get_mut(crate::params::ParamId(i));
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_elem((1, 2), 1.0));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s).unwrap();
        let g = vec![Some(Matrix::from_shape_vec((1, 2), vec![2.0, -0.5]).unwrap())];
        opt.step(&mut s, &g);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((s.get(id)[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((s.get(id)[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bitwise_noop() {
        let (mut s, id) = store();
        let before = s.get(id).clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[Some(Matrix::from_elem((1, 2), 0.3))]);
        }
        assert_eq!(s.get(id), &before);
    }

    #[test]
    fn clipping_bounds_update_direction() {
        let g = vec![Some(Matrix::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap())];
        assert_eq!(global_norm(&g), 5.0);
        let (mut s, _) = store();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: Some(1.0), ..Default::default() }, &s).unwrap();
        assert_eq!(opt.step(&mut s, &g), 5.0);
        assert!(Adam::new(AdamConfig { lr: -1.0, ..Default::default() }, &s).is_err());
    }

    #[test]
    fn minimises_quadratic() {
        let (mut s, id) = store();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &s).unwrap();
        for _ in 0..500 {
            let g = s.get(id).mapv(|w| 2.0 * (w - 3.0));
            opt.step(&mut s, &[Some(g)]);
        }
        assert!(s.get(id).iter().all(|w| (w - 3.0).abs() < 1e-2));
    }
}
