//! Lip-sync expert: twin window encoders scoring audio/motion alignment.
//!
//! Each side slides a `W`-frame window (stride 1) over its input, flattens
//! it and applies a two-layer perceptron; embeddings are L2-normalised so
//! the pair score is a cosine. The expert is pretrained contrastively with
//! binary cross-entropy on `(1 + cos) / 2`, positives being aligned windows
//! and negatives windows shifted by at least `shift_min` frames. The sync
//! loss is the mean of `(1 - cos) / 2`, which lies in `[0, 1]`.
//!
//! Motion inputs are in normalised coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{self, KeyValue};
use crate::data_synth::{lip_dims, ClipRecord};
use crate::error::{config_err, dim_err, invalid, Error, Result};
use crate::motion_space::{motion_dim, NormStats, DEFAULT_KEYPOINTS};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::Execution;
use crate::params::{xavier, zeros, Matrix, ParamId, ParamStore};
use crate::rng::{derive_seed, seeded};

/// Keeps `(1 ± cos) / 2` away from 0 inside the logarithm.
const PROB_MARGIN: f64 = 1e-4;
const TAG_SHIFT: u64 = 0x5a;

#[derive(Clone, Debug, PartialEq)]
pub struct SyncExpertConfig {
    pub window: usize,
    pub lip_dims: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub audio_dim: usize,
    pub motion_dim: usize,
    pub shift_min: usize,
    pub init_seed: u64,
}

impl Default for SyncExpertConfig {
    fn default() -> Self {
        Self {
            window: 5,
            lip_dims: lip_dims(DEFAULT_KEYPOINTS),
            embed_dim: 64,
            hidden: 128,
            audio_dim: 64,
            motion_dim: motion_dim(DEFAULT_KEYPOINTS),
            shift_min: 10,
            init_seed: 0,
        }
    }
}

impl SyncExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed_dim == 0 || self.hidden == 0 || self.audio_dim == 0 {
            return Err(config_err("alse window, embed_dim, hidden and audio_dim must be positive"));
        }
        if self.lip_dims.is_empty() || self.lip_dims.iter().any(|&d| d >= self.motion_dim) {
            return Err(config_err(format!("lip_dims must be non-empty and below motion_dim {}", self.motion_dim)));
        }
        Ok(())
    }
}

impl KeyValue for SyncExpertConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("window", self.window.to_string()),
            ("lip_dims", config::format_indices(&self.lip_dims)),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("audio_dim", self.audio_dim.to_string()),
            ("motion_dim", self.motion_dim.to_string()),
            ("shift_min", self.shift_min.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "window" => self.window = config::parse(key, value)?,
            "lip_dims" => self.lip_dims = config::parse_indices(key, value)?,
            "embed_dim" => self.embed_dim = config::parse(key, value)?,
            "hidden" => self.hidden = config::parse(key, value)?,
            "audio_dim" => self.audio_dim = config::parse(key, value)?,
            "motion_dim" => self.motion_dim = config::parse(key, value)?,
            "shift_min" => self.shift_min = config::parse(key, value)?,
            "init_seed" => self.init_seed = config::parse(key, value)?,
            _ => return Err(config::unknown(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_clips: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-3, batch_clips: 8, seed: 0 }
    }
}

impl KeyValue for PretrainConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_clips", self.batch_clips.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = config::parse(key, value)?,
            "lr" => self.lr = config::parse(key, value)?,
            "batch_clips" => self.batch_clips = config::parse(key, value)?,
            "seed" => self.seed = config::parse(key, value)?,
            _ => return Err(config::unknown(key)),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Tower {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Tower {
    fn register(store: &mut ParamStore, name: &str, input: usize, cfg: &SyncExpertConfig, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add(format!("alse.0.{name}.fc1_weight"), xavier(input, cfg.hidden, rng)),
            b1: store.add(format!("alse.0.{name}.fc1_bias"), zeros(1, cfg.hidden)),
            w2: store.add(format!("alse.0.{name}.fc2_weight"), xavier(cfg.hidden, cfg.embed_dim, rng)),
            b2: store.add(format!("alse.0.{name}.fc2_bias"), zeros(1, cfg.embed_dim)),
        }
    }

    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Expert weights placed on a graph, either as trainable parameters of the
/// expert's own store or as frozen inputs on a foreign graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundExpert {
    audio: [Var; 4],
    motion: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct SyncExpert {
    pub cfg: SyncExpertConfig,
    pub params: ParamStore,
    audio: Tower,
    motion: Tower,
}

fn mlp(g: &mut Graph<'_>, x: Var, w: &[Var; 4]) -> Var {
    let h = g.matmul(x, w[0]);
    let h = g.add_row(h, w[1]);
    let h = g.gelu(h);
    let o = g.matmul(h, w[2]);
    g.add_row(o, w[3])
}

fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Probability that a random positive scores above a random negative.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    rank_auc(pos, neg)
}

impl SyncExpert {
    pub fn new(cfg: SyncExpertConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(cfg.init_seed);
        let mut params = ParamStore::new();
        let audio = Tower::register(&mut params, "audio", cfg.window * cfg.audio_dim, &cfg, &mut rng);
        let motion = Tower::register(&mut params, "motion", cfg.window * cfg.lip_dims.len(), &cfg, &mut rng);
        Ok(Self { cfg, params, audio, motion })
    }

    /// Binds weights as parameters; `g` must be built over `self.params`.
    pub fn bind_params(&self, g: &mut Graph<'_>) -> BoundExpert {
        BoundExpert { audio: self.audio.ids().map(|id| g.param(id)), motion: self.motion.ids().map(|id| g.param(id)) }
    }

    /// Binds weights as constants on any graph.
    pub fn bind_frozen(&self, g: &mut Graph<'_>) -> BoundExpert {
        let mut input = |id: ParamId| g.input(self.params.get(id).clone());
        BoundExpert { audio: self.audio.ids().map(&mut input), motion: self.motion.ids().map(&mut input) }
    }

    fn check(&self, frames_a: usize, dim_a: usize, frames_m: usize, dim_m: usize) -> Result<()> {
        if frames_a != frames_m {
            return Err(invalid(format!("audio has {frames_a} frames, motion {frames_m}")));
        }
        if frames_a < self.cfg.window {
            return Err(invalid(format!("need at least {} frames, got {frames_a}", self.cfg.window)));
        }
        if dim_a != self.cfg.audio_dim {
            return Err(dim_err(format!("audio dim {dim_a} vs expert {}", self.cfg.audio_dim)));
        }
        if dim_m != self.cfg.motion_dim {
            return Err(dim_err(format!("motion dim {dim_m} vs expert {}", self.cfg.motion_dim)));
        }
        Ok(())
    }

    /// Unit-norm window embeddings `(audio, motion)`, each
    /// `(T - W + 1) × embed_dim`.
    pub fn encode_graph(&self, g: &mut Graph<'_>, w: &BoundExpert, audio: Var, motion: Var) -> Result<(Var, Var)> {
        let ((ta, da), (tm, dm)) = (g.shape(audio), g.shape(motion));
        self.check(ta, da, tm, dm)?;
        let ua = g.unfold(audio, self.cfg.window);
        let ea = mlp(g, ua, &w.audio);
        let lips = g.select_cols(motion, &self.cfg.lip_dims);
        let um = g.unfold(lips, self.cfg.window);
        let em = mlp(g, um, &w.motion);
        Ok((g.l2_normalize_rows(ea), g.l2_normalize_rows(em)))
    }

    /// Mean of `(1 - cos) / 2` over aligned windows.
    pub fn loss_graph(&self, g: &mut Graph<'_>, w: &BoundExpert, audio: Var, motion: Var) -> Result<Var> {
        let (ea, em) = self.encode_graph(g, w, audio, motion)?;
        let cos = g.row_dot(ea, em);
        let m = g.mean(cos);
        Ok(g.affine(m, -0.5, 0.5))
    }

    /// Eager embeddings.
    pub fn encode_windows(&self, audio: &Matrix, motion: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new(&self.params);
        let w = self.bind_params(&mut g);
        let (a, m) = (g.input(audio.clone()), g.input(motion.clone()));
        let (ea, em) = self.encode_graph(&mut g, &w, a, m)?;
        Ok((g.value(ea).to_owned(), g.value(em).to_owned()))
    }

    pub fn loss(&self, audio: &Matrix, motion: &Matrix) -> Result<f64> {
        Ok(self.loss_and_grad(audio, motion)?.0)
    }

    /// Sync loss and its gradient with respect to the motion input.
    pub fn loss_and_grad(&self, audio: &Matrix, motion: &Matrix) -> Result<(f64, Matrix)> {
        let mut g = Graph::new(&self.params);
        let w = self.bind_params(&mut g);
        let (a, m) = (g.input(audio.clone()), g.input(motion.clone()));
        let l = self.loss_graph(&mut g, &w, a, m)?;
        let grads = g.backward(l);
        let gm = grads.wrt(m).cloned().unwrap_or_else(|| Matrix::zeros(motion.dim()));
        Ok((g.scalar(l), gm))
    }

    /// Cosine scores for aligned windows and for motion shifted `shift`
    /// windows later.
    pub fn pair_scores(&self, audio: &Matrix, motion: &Matrix, shift: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (ea, em) = self.encode_windows(audio, motion)?;
        let n = ea.nrows();
        let cos = |i: usize, j: usize| ea.row(i).dot(&em.row(j));
        let aligned = (0..n).map(|i| cos(i, i)).collect();
        let shifted = (0..n.saturating_sub(shift)).map(|i| cos(i, i + shift)).collect();
        Ok((aligned, shifted))
    }

    /// Aligned-vs-shifted AUC pooled over clips (motion normalised by
    /// `stats`).
    pub fn discrimination_auc(&self, clips: &[ClipRecord], stats: &NormStats, shift: usize) -> Result<f64> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for c in clips {
            let z = stats.normalize(&c.motion.to_matrix())?;
            let (p, n) = self.pair_scores(&c.audio.features, &z, shift)?;
            pos.extend(p);
            neg.extend(n);
        }
        Ok(rank_auc(&pos, &neg))
    }

    /// Mean sync loss on aligned and on shifted pairs.
    pub fn aligned_vs_shifted_loss(&self, clips: &[ClipRecord], stats: &NormStats, shift: usize) -> Result<(f64, f64)> {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for c in clips {
            let z = stats.normalize(&c.motion.to_matrix())?;
            let (p, n) = self.pair_scores(&c.audio.features, &z, shift)?;
            pos.extend(p);
            neg.extend(n);
        }
        let mean_loss = |v: &[f64]| v.iter().map(|c| (1.0 - c) / 2.0).sum::<f64>() / v.len().max(1) as f64;
        Ok((mean_loss(&pos), mean_loss(&neg)))
    }

    /// Contrastive objective for one clip: BCE on aligned windows (label 1)
    /// and on windows rolled by `shift` (label 0).
    fn contrastive_graph(&self, g: &mut Graph<'_>, audio: &Matrix, motion: &Matrix, shift: usize) -> Result<Var> {
        let w = self.bind_params(g);
        let (a, m) = (g.input(audio.clone()), g.input(motion.clone()));
        let (ea, em) = self.encode_graph(g, &w, a, m)?;
        let n = g.shape(em).0;
        let tail = g.slice_rows(em, shift, n - shift);
        let head = g.slice_rows(em, 0, shift);
        let rolled = g.concat_rows(&[tail, head]);
        let half = 0.5 * (1.0 - 2.0 * PROB_MARGIN);
        let cos_p = g.row_dot(ea, em);
        let p_pos = g.affine(cos_p, half, 0.5);
        let cos_n = g.row_dot(ea, rolled);
        let q_neg = g.affine(cos_n, -half, 0.5);
        let lp = g.ln(p_pos);
        let ln = g.ln(q_neg);
        let lp = g.mean(lp);
        let ln = g.mean(ln);
        let s = g.add(lp, ln);
        Ok(g.scale(s, -0.5))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config: BTreeMap<String, String> =
            self.cfg.pairs().into_iter().map(|(k, v)| (format!("alse.{k}"), v)).collect();
        Checkpoint::from_store("alse", config, &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("alse")?;
        let mut cfg = SyncExpertConfig::default();
        for (k, v) in &ck.config {
            let field = k.strip_prefix("alse.").ok_or_else(|| Error::Format(format!("unexpected config key {k}")))?;
            cfg.set(field, v)?;
        }
        let mut expert = Self::new(cfg)?;
        ck.install(&mut expert.params)?;
        Ok(expert)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-epoch contrastive loss during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains `expert` in place on `clips`; motion is normalised by `stats`.
pub fn pretrain_expert(
    expert: &mut SyncExpert,
    clips: &[ClipRecord],
    stats: &NormStats,
    pcfg: &PretrainConfig,
    exec: Execution,
) -> Result<PretrainLog> {
    let min_frames = expert.cfg.window - 1 + 2 * expert.cfg.shift_min.max(1);
    let usable: Vec<(Matrix, Matrix)> = clips
        .iter()
        .filter(|c| c.frames() >= min_frames)
        .map(|c| Ok((c.audio.features.clone(), stats.normalize(&c.motion.to_matrix())?)))
        .collect::<Result<_>>()?;
    if usable.is_empty() {
        return Err(invalid(format!("no clip has the {min_frames} frames needed for shifted negatives")));
    }
    if pcfg.batch_clips == 0 {
        return Err(config_err("batch_clips must be positive"));
    }
    let mut opt = Adam::new(AdamConfig { lr: pcfg.lr, ..AdamConfig::default() }, &expert.params)?;
    let mut log = PretrainLog { epoch_loss: Vec::with_capacity(pcfg.epochs) };
    let mut step = 0u64;
    for epoch in 0..pcfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut rng = seeded(derive_seed(pcfg.seed, epoch as u64, 0));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(pcfg.batch_clips) {
            let results = exec.try_map(batch.len(), |b| {
                let (audio, motion) = &usable[batch[b]];
                let n = audio.nrows() + 1 - expert.cfg.window;
                let smin = expert.cfg.shift_min.max(1);
                let shift = seeded(derive_seed(pcfg.seed ^ TAG_SHIFT, step, b as u64)).random_range(smin..=n - smin);
                let mut g = Graph::new(&expert.params);
                let l = expert.contrastive_graph(&mut g, audio, motion, shift)?;
                Ok::<_, Error>((g.scalar(l), g.backward(l).into_params()))
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Option<Matrix>> = vec![None; expert.params.len()];
            for (l, gs) in results {
                total += l;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => a.scaled_add(scale, &g),
                            None => *acc = Some(g * scale),
                        }
                    }
                }
            }
            if !total.is_finite() {
                return Err(Error::Divergence(format!("sync expert loss became {total} in epoch {epoch}")));
            }
            opt.step(&mut expert.params, &grads);
            step += 1;
        }
        let mean = total / usable.len() as f64;
        log::debug!("alse epoch {epoch}: loss {mean:.5}");
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_matrix;

    fn cfg() -> SyncExpertConfig {
        SyncExpertConfig {
            window: 3,
            lip_dims: vec![1, 4],
            embed_dim: 6,
            hidden: 8,
            audio_dim: 2,
            motion_dim: 5,
            ..Default::default()
        }
    }

    #[test]
    fn window_counts_and_norms() {
        let e = SyncExpert::new(cfg()).unwrap();
        for t in [3, 9] {
            let a = gaussian_matrix(t, 2, &mut seeded(1));
            let m = gaussian_matrix(t, 5, &mut seeded(2));
            let (ea, em) = e.encode_windows(&a, &m).unwrap();
            assert_eq!(ea.nrows(), t - 2);
            assert_eq!(em.dim(), (t - 2, 6));
            for row in ea.rows().into_iter().chain(em.rows()) {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let short = gaussian_matrix(2, 2, &mut seeded(1));
        assert!(matches!(e.encode_windows(&short, &Matrix::zeros((2, 5))), Err(Error::Validation(_))));
        assert!(e.loss(&gaussian_matrix(4, 2, &mut seeded(1)), &Matrix::zeros((5, 5))).is_err());
    }

    /// Towers with identical weights on identical inputs.
    fn twin() -> (SyncExpert, Matrix, Matrix) {
        let c = SyncExpertConfig { lip_dims: vec![0, 1], motion_dim: 2, ..cfg() };
        let mut e = SyncExpert::new(c).unwrap();
        for (a, m) in e.audio.ids().into_iter().zip(e.motion.ids()) {
            let v = e.params.get(a).clone();
            e.params.get_mut(m).assign(&v);
        }
        let x = gaussian_matrix(7, 2, &mut seeded(4));
        (e, x.clone(), x)
    }

    #[test]
    fn identical_and_antipodal_embeddings() {
        let (mut e, a, m) = twin();
        assert!(e.loss(&a, &m).unwrap().abs() < 1e-12);
        for id in [e.motion.w2, e.motion.b2] {
            e.params.get_mut(id).mapv_inplace(|v| -v);
        }
        assert!((e.loss(&a, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_bounded_and_scale_invariant() {
        let mut e = SyncExpert::new(cfg()).unwrap();
        let a = gaussian_matrix(8, 2, &mut seeded(5));
        let m = gaussian_matrix(8, 5, &mut seeded(6));
        let l = e.loss(&a, &m).unwrap();
        assert!((0.0..=1.0).contains(&l));
        for id in [e.audio.w2, e.audio.b2] {
            e.params.get_mut(id).mapv_inplace(|v| 3.7 * v);
        }
        assert!((e.loss(&a, &m).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn motion_gradient_matches_finite_differences() {
        let e = SyncExpert::new(cfg()).unwrap();
        let a = gaussian_matrix(6, 2, &mut seeded(7));
        let m = gaussian_matrix(6, 5, &mut seeded(8));
        let (_, grad) = e.loss_and_grad(&a, &m).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for r in 0..6 {
            for c in 0..5 {
                let mut p = m.clone();
                p[[r, c]] += h;
                let mut q = m.clone();
                q[[r, c]] -= h;
                let num = (e.loss(&a, &p).unwrap() - e.loss(&a, &q).unwrap()) / (2.0 * h);
                let an = grad[[r, c]];
                if num.abs() < 1e-9 && an.abs() < 1e-9 {
                    continue;
                }
                assert!((an - num).abs() / an.abs().max(num.abs()) <= 1e-3, "({r},{c}) {an} vs {num}");
                checked += 1;
            }
        }
        // only lip columns carry gradient
        assert!(checked >= 10);
        assert!(grad.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn auc_values() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
        assert!((auc(&[1.0, 3.0], &[2.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = SyncExpert::new(cfg()).unwrap();
        let back = SyncExpert::from_checkpoint(&e.checkpoint()).unwrap();
        assert_eq!(back.cfg, e.cfg);
        let a = gaussian_matrix(5, 2, &mut seeded(1));
        let m = gaussian_matrix(5, 5, &mut seeded(2));
        assert!((back.loss(&a, &m).unwrap() - e.loss(&a, &m).unwrap()).abs() < 1e-5);
    }
}
