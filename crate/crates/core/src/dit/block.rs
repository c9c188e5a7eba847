use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, invalid, Result};
use crate::params::{xavier, zeros, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Motion,
    Audio,
    Emotion,
    Identity,
    Merged,
}

/// One stream of a joint-attention bundle.
#[derive(Clone, Debug)]
pub struct Stream {
    pub tokens: Var,
    pub positions: Vec<usize>,
    pub modality: Modality,
}

/// Weights of one modality-specific path inside a block.
#[derive(Clone, Copy, Debug)]
pub struct PathWeights {
    pub ada_w: ParamId,
    pub ada_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl PathWeights {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let mut w =
            |name: &str, rows: usize, cols: usize| store.add(format!("{prefix}.{name}"), xavier(rows, cols, rng));
        let (q_w, k_w, v_w, o_w) = (w("q_weight", d, d), w("k_weight", d, d), w("v_weight", d, d), w("o_weight", d, d));
        let ff1_w = w("ff1_weight", d, ratio * d);
        let ff2_w = w("ff2_weight", ratio * d, d);
        let mut z = |name: &str, rows: usize, cols: usize| store.add(format!("{prefix}.{name}"), zeros(rows, cols));
        Self {
            ada_w: z("ada_weight", d, 6 * d),
            ada_b: z("ada_bias", 1, 6 * d),
            q_w,
            q_b: z("q_bias", 1, d),
            k_w,
            k_b: z("k_bias", 1, d),
            v_w,
            v_b: z("v_bias", 1, d),
            o_w,
            o_b: z("o_bias", 1, d),
            ff1_w,
            ff1_b: z("ff1_bias", 1, ratio * d),
            ff2_w,
            ff2_b: z("ff2_bias", 1, d),
        }
    }
}

/// Cross-attention projections of the cross-attention baseline block.
#[derive(Clone, Copy, Debug)]
pub struct CrossWeights {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

impl CrossWeights {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut pair = |name: &str| {
            (
                store.add(format!("{prefix}.x{name}_weight"), xavier(d, d, rng)),
                store.add(format!("{prefix}.x{name}_bias"), zeros(1, d)),
            )
        };
        let (q_w, q_b) = pair("q");
        let (k_w, k_b) = pair("k");
        let (v_w, v_b) = pair("v");
        let (o_w, o_b) = pair("o");
        Self { q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b }
    }
}

/// Shift/scale/gate rows for the attention and feed-forward sub-layers.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_ffn: Var,
    pub scale_ffn: Var,
    pub gate_ffn: Var,
}

/// Projects the conditioning row `c` (already passed through SiLU) into the
/// six modulation rows of `path`.
pub fn adaln_modulation(g: &mut Graph<'_>, c: Var, path: &PathWeights) -> Modulation {
    let d = g.params().get(path.q_w).nrows();
    let all = g.linear(c, path.ada_w, path.ada_b);
    let mut part = |i: usize| g.slice_cols(all, i * d, d);
    Modulation {
        shift_attn: part(0),
        scale_attn: part(1),
        gate_attn: part(2),
        shift_ffn: part(3),
        scale_ffn: part(4),
        gate_ffn: part(5),
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
        return Err(config_err(format!("width {d} with {heads} heads does not give an even head dim")));
    }
    Ok(())
}

/// Rotary encoding on a graph node (`L × heads·head_dim`).
pub fn rope_apply(g: &mut Graph<'_>, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
    let (rows, d) = g.shape(x);
    check_heads(d, heads)?;
    if rows != positions.len() {
        return Err(invalid(format!("{rows} rows but {} positions", positions.len())));
    }
    Ok(g.rope(x, positions, heads, base))
}

/// Rotary encoding on a plain matrix.
pub fn rope_apply_matrix(x: &Matrix, positions: &[usize], heads: usize, base: f64) -> Result<Matrix> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input(x.clone());
    let out = rope_apply(&mut g, v, positions, heads, base)?;
    Ok(g.value(out).to_owned())
}

/// Joint attention over a bundle: per-stream QKV projections, rotary
/// encoding of queries and keys, attention over the concatenated sequence,
/// split at the original boundaries, per-stream output projection.
/// `streams[i]` uses `weights[i]`; tokens are expected pre-normalised.
pub fn joint_attention(
    g: &mut Graph<'_>,
    streams: &[Stream],
    weights: &[PathWeights],
    heads: usize,
    base: f64,
) -> Result<Vec<Stream>> {
    if streams.is_empty() {
        return Err(invalid("joint attention over an empty bundle"));
    }
    if streams.len() != weights.len() {
        return Err(invalid("one path per stream required"));
    }
    let d = g.shape(streams[0].tokens).1;
    check_heads(d, heads)?;
    let (mut qs, mut ks, mut vs, mut lens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, w) in streams.iter().zip(weights) {
        let (rows, cols) = g.shape(s.tokens);
        if cols != d {
            return Err(invalid("streams disagree on model width"));
        }
        if rows != s.positions.len() {
            return Err(invalid("stream positions do not match its length"));
        }
        let q = g.linear(s.tokens, w.q_w, w.q_b);
        let k = g.linear(s.tokens, w.k_w, w.k_b);
        let v = g.linear(s.tokens, w.v_w, w.v_b);
        qs.push(g.rope(q, &s.positions, heads, base));
        ks.push(g.rope(k, &s.positions, heads, base));
        vs.push(v);
        lens.push(rows);
    }
    let (q, k, v) = if streams.len() == 1 {
        (qs[0], ks[0], vs[0])
    } else {
        (g.concat_rows(&qs), g.concat_rows(&ks), g.concat_rows(&vs))
    };
    let attended = g.attention(q, k, v, heads);
    let mut out = Vec::with_capacity(streams.len());
    let mut start = 0;
    for ((s, w), len) in streams.iter().zip(weights).zip(lens) {
        let part = if streams.len() == 1 { attended } else { g.slice_rows(attended, start, len) };
        start += len;
        let proj = g.linear(part, w.o_w, w.o_b);
        out.push(Stream { tokens: proj, positions: s.positions.clone(), modality: s.modality });
    }
    Ok(out)
}

fn feed_forward(g: &mut Graph<'_>, x: Var, w: &PathWeights) -> Var {
    let h = g.linear(x, w.ff1_w, w.ff1_b);
    let h = g.gelu(h);
    g.linear(h, w.ff2_w, w.ff2_b)
}

/// One multi-stream block with gated residuals around joint attention and
/// per-path feed-forward layers.
pub(crate) fn joint_block(
    g: &mut Graph<'_>,
    streams: &[Var],
    positions: &[&[usize]],
    paths: &[PathWeights],
    c: Var,
    heads: usize,
    base: f64,
) -> Result<Vec<Var>> {
    let mods: Vec<Modulation> = paths.iter().map(|p| adaln_modulation(g, c, p)).collect();
    let bundle: Vec<Stream> = streams
        .iter()
        .zip(positions)
        .zip(&mods)
        .map(|((&x, pos), m)| {
            let h = g.layer_norm(x);
            Stream {
                tokens: g.modulate(h, m.shift_attn, m.scale_attn),
                positions: pos.to_vec(),
                modality: Modality::Merged,
            }
        })
        .collect();
    let attended = joint_attention(g, &bundle, paths, heads, base)?;
    let mut out = Vec::with_capacity(streams.len());
    for (((&x, a), m), w) in streams.iter().zip(attended).zip(&mods).zip(paths) {
        let gated = g.mul_row(a.tokens, m.gate_attn);
        let x = g.add(x, gated);
        let h = g.layer_norm(x);
        let h = g.modulate(h, m.shift_ffn, m.scale_ffn);
        let f = feed_forward(g, h, w);
        let gated = g.mul_row(f, m.gate_ffn);
        out.push(g.add(x, gated));
    }
    Ok(out)
}

/// Cross-attention baseline block: motion self-attention, then motion
/// queries attend to the fixed condition tokens, then feed-forward.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cross_block(
    g: &mut Graph<'_>,
    motion: Var,
    motion_pos: &[usize],
    cond: Var,
    cond_pos: &[usize],
    path: &PathWeights,
    cross: &CrossWeights,
    c: Var,
    heads: usize,
    base: f64,
) -> Result<Var> {
    let m = adaln_modulation(g, c, path);
    let h = g.layer_norm(motion);
    let h = g.modulate(h, m.shift_attn, m.scale_attn);
    let stream = Stream { tokens: h, positions: motion_pos.to_vec(), modality: Modality::Motion };
    let attended = joint_attention(g, &[stream], std::slice::from_ref(path), heads, base)?;
    let gated = g.mul_row(attended[0].tokens, m.gate_attn);
    let x = g.add(motion, gated);

    let hq = g.layer_norm(x);
    let q = g.linear(hq, cross.q_w, cross.q_b);
    let q = g.rope(q, motion_pos, heads, base);
    let k = g.linear(cond, cross.k_w, cross.k_b);
    let k = g.rope(k, cond_pos, heads, base);
    let v = g.linear(cond, cross.v_w, cross.v_b);
    let o = g.attention(q, k, v, heads);
    let o = g.linear(o, cross.o_w, cross.o_b);
    let x = g.add(x, o);

    let h = g.layer_norm(x);
    let h = g.modulate(h, m.shift_ffn, m.scale_ffn);
    let f = feed_forward(g, h, path);
    let gated = g.mul_row(f, m.gate_ffn);
    Ok(g.add(x, gated))
}
