//! Independent reference computations shared by the integration tests and
//! the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeMap;

use motiondit::autodiff::Graph;
use motiondit::conditioning::{AudioFeatureSequence, ConditionSet, EmotionCondition, GuideMotion};
use motiondit::dit::{
    joint_attention, rope_apply_matrix, Modality, ModelConfig, MotionDit, PathWeights, Stream, Variant,
};
use motiondit::flow::flow_losses_graph;
use motiondit::motion_space::KeypointSet;
use motiondit::params::{Matrix, ParamStore};
use motiondit::rng::{gaussian_matrix, seeded};
use rand::seq::index::sample;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Magnitude below which gradients are compared absolutely: central
/// differences cannot resolve smaller values at this step size.
pub const FD_ABS_FLOOR: f64 = 1e-8;
pub const SAMPLES_PER_GROUP: usize = 64;

pub fn random_conditions(cfg: &ModelConfig, frames: usize, seed: u64) -> ConditionSet {
    let mut rng = seeded(seed);
    let audio = gaussian_matrix(frames, cfg.audio_dim, &mut rng);
    let kp = gaussian_matrix(1, 3 * cfg.keypoints, &mut rng);
    let guide = gaussian_matrix(1, cfg.motion_dim(), &mut rng);
    ConditionSet {
        audio: Some(AudioFeatureSequence::new(audio).unwrap()),
        identity: Some(KeypointSet::from_flat(kp.as_slice().unwrap()).unwrap()),
        emotion: Some(EmotionCondition { label: 1 }),
        guide: Some(GuideMotion { frame: guide.iter().copied().collect() }),
    }
}

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel: f64,
}

/// `L_RF + L_vel` of a fixed noisy window under the weights in `store`.
fn flow_loss(model: &MotionDit, store: &ParamStore, zt: &Matrix, target: &Matrix, cs: &ConditionSet, t: f64) -> f64 {
    let mut g = Graph::new(store);
    let z = g.input(zt.clone());
    let pred = model.forward_graph(&mut g, z, cs, t).unwrap();
    let tgt = g.input(target.clone());
    let (a, b) = flow_losses_graph(&mut g, pred, tgt);
    let total = g.add(a, b);
    g.scalar(total)
}

/// Compares analytic parameter gradients with central differences on
/// randomly chosen scalars of every parameter group.
pub fn gradient_check(variant: Variant, seed: u64) -> Vec<GroupCheck> {
    let cfg = ModelConfig { variant, ..ModelConfig::tiny() };
    let frames = 4;
    let mut model = MotionDit::new(cfg.clone()).unwrap();
    model.params.randomize(seed, 0.3);
    let mut rng = seeded(seed + 1);
    let z0 = gaussian_matrix(frames, cfg.motion_dim(), &mut rng);
    let eps = gaussian_matrix(frames, cfg.motion_dim(), &mut rng);
    let t = 0.37;
    let zt = &z0 * (1.0 - t) + &eps * t;
    let target = &eps - &z0;
    let cs = random_conditions(&cfg, frames, seed + 2);

    let analytic = {
        let mut g = Graph::new(&model.params);
        let z = g.input(zt.clone());
        let pred = model.forward_graph(&mut g, z, &cs, t).unwrap();
        let tgt = g.input(target.clone());
        let (a, b) = flow_losses_graph(&mut g, pred, tgt);
        let total = g.add(a, b);
        g.backward(total).into_params()
    };

    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (id, name, m) in model.params.iter() {
        let entry = groups.entry(MotionDit::param_group(name).to_string()).or_default();
        entry.extend((0..m.len()).map(|k| (id.0, k)));
    }
    let mut store = model.params.clone();
    let mut out = Vec::new();
    for (group, coords) in groups {
        let n = coords.len().min(SAMPLES_PER_GROUP);
        let mut max_rel = 0.0f64;
        for pick in sample(&mut rng, coords.len(), n) {
            let (pi, k) = coords[pick];
            let id = motiondit::params::ParamId(pi);
            let cols = store.get(id).ncols();
            let (r, c) = (k / cols, k % cols);
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + FD_STEP;
            let plus = flow_loss(&model, &store, &zt, &target, &cs, t);
            store.get_mut(id)[[r, c]] = orig - FD_STEP;
            let minus = flow_loss(&model, &store, &zt, &target, &cs, t);
            store.get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi].as_ref().map_or(0.0, |m| m[[r, c]]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
            max_rel = max_rel.max(rel);
        }
        out.push(GroupCheck { group, checked: n, max_rel });
    }
    out
}

/// Interleaved rotary encoding written out directly from its definition.
pub fn reference_rope(x: &Matrix, positions: &[usize], heads: usize, base: f64) -> Matrix {
    let (rows, d) = x.dim();
    let hd = d / heads;
    let mut out = x.clone();
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = positions[r] as f64 / base.powf(2.0 * i as f64 / hd as f64);
                let (a, b) = (x[[r, h * hd + 2 * i]], x[[r, h * hd + 2 * i + 1]]);
                out[[r, h * hd + 2 * i]] = a * theta.cos() - b * theta.sin();
                out[[r, h * hd + 2 * i + 1]] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

/// Plain multi-head softmax attention with scalar loops.
pub fn reference_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Matrix {
    let (lq, d) = q.dim();
    let lk = k.nrows();
    let hd = d / heads;
    let mut out = Matrix::zeros((lq, d));
    for h in 0..heads {
        for i in 0..lq {
            let logits: Vec<f64> = (0..lk)
                .map(|j| (0..hd).map(|c| q[[i, h * hd + c]] * k[[j, h * hd + c]]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = w.iter().sum();
            for c in 0..hd {
                out[[i, h * hd + c]] = (0..lk).map(|j| w[j] / s * v[[j, h * hd + c]]).sum();
            }
        }
    }
    out
}

fn affine(x: &Matrix, store: &ParamStore, w: motiondit::params::ParamId, b: motiondit::params::ParamId) -> Matrix {
    x.dot(store.get(w)) + store.get(b)
}

/// Maximum deviations of joint attention from (single-stream self-attention,
/// two-stream concatenate/attend/split) references on random inputs.
pub fn attention_reduction_errors(seed: u64) -> (f64, f64) {
    let (d, heads, base) = (16, 2, 10_000.0);
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    let pa = PathWeights::register(&mut store, "a", d, 2, &mut rng);
    let pb = PathWeights::register(&mut store, "b", d, 2, &mut rng);
    store.randomize(seed + 1, 0.4);
    let xa = gaussian_matrix(5, d, &mut rng);
    let xb = gaussian_matrix(7, d, &mut rng);
    let pos_a: Vec<usize> = (0..5).collect();
    let pos_b: Vec<usize> = (0..7).map(|p| p + 3).collect();

    let project = |x: &Matrix, p: &PathWeights, pos: &[usize]| {
        let q = reference_rope(&affine(x, &store, p.q_w, p.q_b), pos, heads, base);
        let k = reference_rope(&affine(x, &store, p.k_w, p.k_b), pos, heads, base);
        (q, k, affine(x, &store, p.v_w, p.v_b))
    };
    let max_abs = |a: &Matrix, b: ndarray::ArrayView2<f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };

    // single stream
    let (q, k, v) = project(&xa, &pa, &pos_a);
    let single_ref = affine(&reference_attention(&q, &k, &v, heads), &store, pa.o_w, pa.o_b);
    let mut g = Graph::new(&store);
    let ta = g.input(xa.clone());
    let s = Stream { tokens: ta, positions: pos_a.clone(), modality: Modality::Motion };
    let out = joint_attention(&mut g, &[s], &[pa], heads, base).unwrap();
    let single_err = max_abs(&single_ref, g.value(out[0].tokens));

    // two streams
    let (qb, kb, vb) = project(&xb, &pb, &pos_b);
    let cat = |a: &Matrix, b: &Matrix| ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).unwrap();
    let joint = reference_attention(&cat(&q, &qb), &cat(&k, &kb), &cat(&v, &vb), heads);
    let ref_a = affine(&joint.slice(ndarray::s![..5, ..]).to_owned(), &store, pa.o_w, pa.o_b);
    let ref_b = affine(&joint.slice(ndarray::s![5.., ..]).to_owned(), &store, pb.o_w, pb.o_b);
    let mut g = Graph::new(&store);
    let ta = g.input(xa);
    let tb = g.input(xb);
    let streams = [
        Stream { tokens: ta, positions: pos_a, modality: Modality::Motion },
        Stream { tokens: tb, positions: pos_b, modality: Modality::Audio },
    ];
    let out = joint_attention(&mut g, &streams, &[pa, pb], heads, base).unwrap();
    let two_err = max_abs(&ref_a, g.value(out[0].tokens)).max(max_abs(&ref_b, g.value(out[1].tokens)));
    (single_err, two_err)
}

/// Largest change of per-head attention logits under a uniform position
/// shift, over `trials` seeded random draws.
pub fn rope_shift_deviation(trials: u64) -> f64 {
    let (rows, d, heads, base) = (8, 32, 4, 10_000.0);
    let hd = d / heads;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = seeded(1000 + trial);
        let q = gaussian_matrix(rows, d, &mut rng);
        let k = gaussian_matrix(rows, d, &mut rng);
        let pos: Vec<usize> = (0..rows).map(|_| rand::Rng::random_range(&mut rng, 0..512)).collect();
        let shift: usize = rand::Rng::random_range(&mut rng, 1..4096);
        let shifted: Vec<usize> = pos.iter().map(|p| p + shift).collect();
        let logits = |p: &[usize]| {
            let qr = rope_apply_matrix(&q, p, heads, base).unwrap();
            let kr = rope_apply_matrix(&k, p, heads, base).unwrap();
            let mut l = Vec::new();
            for h in 0..heads {
                let cols = ndarray::s![.., h * hd..(h + 1) * hd];
                l.extend(qr.slice(cols).dot(&kr.slice(cols).t()).iter().copied());
            }
            l
        };
        let (a, b) = (logits(&pos), logits(&shifted));
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    worst
}

/// Scalar count by enumerating a freshly built model's tensors.
pub fn enumerated_params(cfg: &ModelConfig) -> usize {
    let model = MotionDit::new(cfg.clone()).unwrap();
    model.params.iter().map(|(_, _, m)| m.len()).sum()
}
