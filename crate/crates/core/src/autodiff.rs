//! Minimal reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and appends a
//! node recording its inputs. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for intermediate nodes and for the
//! [`ParamStore`] tensors the graph read. Vectors are `1 × n` matrices and
//! scalars are `1 × 1`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Modulate { x: Var, shift: Var, scale: Var },
    Gelu(Var),
    Silu(Var),
    Ln(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Rope { x: Var, cos: Matrix, sin: Matrix, heads: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    ExpandRows(Var),
    Unfold(Var, usize),
    RowDiff(Var),
    MeanSquare(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    params: Vec<Option<Matrix>>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].as_ref()
    }

    pub fn wrt(&self, var: Var) -> Option<&Matrix> {
        self.nodes[var.0].as_ref()
    }

    /// Per-parameter gradients, `None` where the graph never touched a tensor.
    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

fn accumulate_view(slot: &mut Option<Matrix>, delta: ArrayView2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta.to_owned()),
    }
}

fn sum_rows(m: &Matrix) -> Matrix {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotary tables for `positions` over a head of width `head_dim`, pairing
/// interleaved channels `(2i, 2i+1)` with frequency `base^(-2i/head_dim)`.
pub fn rope_tables(positions: &[usize], head_dim: usize, base: f64) -> (Matrix, Matrix) {
    let half = head_dim / 2;
    let mut cos = Matrix::zeros((positions.len(), half));
    let mut sin = Matrix::zeros((positions.len(), half));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let theta = p as f64 * base.powf(-(2.0 * i as f64) / head_dim as f64);
            cos[[r, i]] = theta.cos();
            sin[[r, i]] = theta.sin();
        }
    }
    (cos, sin)
}

/// Rotates interleaved channel pairs of every head; `sign = -1` applies the
/// inverse rotation.
fn rotate(x: ArrayView2<f64>, cos: &Matrix, sin: &Matrix, heads: usize, sign: f64) -> Matrix {
    let (rows, cols) = x.dim();
    let head_dim = cols / heads;
    let half = head_dim / 2;
    let mut out = Matrix::zeros((rows, cols));
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..half {
                let c0 = h * head_dim + 2 * i;
                let (a, b) = (x[[r, c0]], x[[r, c0 + 1]]);
                let (c, sn) = (cos[[r, i]], sign * sin[[r, i]]);
                out[[r, c0]] = a * c - b * sn;
                out[[r, c0 + 1]] = a * sn + b * c;
            }
        }
    }
    out
}

fn softmax_rows(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id).view(),
            (_, Some(value)) => value.view(),
            (_, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `x · W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv);
        self.add_row(y, bv)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(Op::Mul(a, b), out)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) + &self.value(row);
        self.push(Op::AddRow(a, row), out)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) * &self.value(row);
        self.push(Op::MulRow(a, row), out)
    }

    /// `factor · a + offset`.
    pub fn affine(&mut self, a: Var, factor: f64, offset: f64) -> Var {
        let out = self.value(a).mapv(|v| factor * v + offset);
        self.push(Op::Affine(a, factor), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `x ⊙ (1 + scale) + shift`, with `shift`/`scale` broadcast rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let mut out = self.value(x).to_owned();
        {
            let sh = self.value(shift);
            let sc = self.value(scale);
            for mut row in out.rows_mut() {
                Zip::from(&mut row).and(sh.row(0)).and(sc.row(0)).for_each(|o, &a, &b| *o = *o * (1.0 + b) + a);
            }
        }
        self.push(Op::Modulate { x, shift, scale }, out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(Op::Silu(a), out)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), out)
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.to_owned();
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNorm { x, inv_std }, out)
    }

    /// Rotary position embedding applied per head. `positions` has one
    /// entry per row; head width must be even.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(rows, positions.len(), "one position per row");
        assert!(cols % heads == 0 && (cols / heads).is_multiple_of(2), "head width must be even");
        let (cos, sin) = rope_tables(positions, cols / heads, base);
        let out = rotate(self.value(x), &cos, &sin, heads, 1.0);
        self.push(Op::Rope { x, cos, sin, heads }, out)
    }

    /// Multi-head scaled dot-product attention. Queries and keys/values may
    /// have different lengths; no masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.dim();
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros((lq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows(&mut p);
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat: column mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(x, start), out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(x, start), out)
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let out = self.value(x).select(Axis(1), cols);
        self.push(Op::SelectCols(x, cols.to_vec()), out)
    }

    /// Broadcasts a `1 × d` row to `rows × d`.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1, "expand_rows needs a single row");
        let out = xv.broadcast((rows, xv.ncols())).unwrap().to_owned();
        self.push(Op::ExpandRows(x), out)
    }

    /// Sliding windows of `window` consecutive rows with stride 1, each
    /// flattened row-major into one output row.
    pub fn unfold(&mut self, x: Var, window: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(rows >= window && window >= 1);
        let n = rows - window + 1;
        let mut out = Matrix::zeros((n, window * cols));
        for i in 0..n {
            for w in 0..window {
                out.slice_mut(s![i, w * cols..(w + 1) * cols]).assign(&xv.row(i + w));
            }
        }
        self.push(Op::Unfold(x, window), out)
    }

    /// Forward difference along rows: `out[i] = x[i+1] - x[i]`.
    pub fn row_diff(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows();
        assert!(n >= 2, "row_diff needs at least two rows");
        let out = &xv.slice(s![1.., ..]) - &xv.slice(s![..n - 1, ..]);
        self.push(Op::RowDiff(x), out)
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let val = xv.iter().map(|v| v * v).sum::<f64>() / xv.len() as f64;
        self.push(Op::MeanSquare(x), Matrix::from_elem((1, 1), val))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let val = xv.sum() / xv.len() as f64;
        self.push(Op::Mean(x), Matrix::from_elem((1, 1), val))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).to_owned();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(Op::L2NormalizeRows { x, norms }, out)
    }

    /// Row-wise inner products, giving an `n × 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = (&av * &bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowDot(a, b), out)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Matrix>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => grads[idx] = Some(g),
                Op::Param(id) => accumulate(&mut params[id.0], g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate_view(&mut grads[a.0], g.view());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[row.0], sum_rows(&g));
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulRow(a, row) => {
                    let grow = sum_rows(&(&g * &self.value(*a)));
                    let ga = &g * &self.value(*row);
                    accumulate(&mut grads[row.0], grow);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Affine(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads[a.0], g.mapv(|v| v * f));
                }
                Op::Modulate { x, shift, scale } => {
                    let xv = self.value(*x);
                    let sc = self.value(*scale);
                    let gscale = sum_rows(&(&g * &xv));
                    let gshift = sum_rows(&g);
                    let mut gx = g;
                    for mut row in gx.rows_mut() {
                        Zip::from(&mut row).and(sc.row(0)).for_each(|o, &b| *o *= 1.0 + b);
                    }
                    accumulate(&mut grads[scale.0], gscale);
                    accumulate(&mut grads[shift.0], gshift);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|o, &x| *o *= gelu_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Silu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|o, &x| {
                        let sg = sigmoid(x);
                        *o *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Ln(a) => {
                    let ga = &g / &self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().unwrap();
                    let cols = y.ncols() as f64;
                    let mut gx = g;
                    for ((mut grow, yrow), &inv) in gx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = grow.sum() / cols;
                        let mean_gy = grow.dot(&yrow) / cols;
                        Zip::from(&mut grow).and(yrow).for_each(|o, &yv| *o = inv * (*o - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Rope { x, cos, sin, heads } => {
                    let gx = rotate(g.view(), cos, sin, *heads, -1.0);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let head_dim = d / heads;
                    let scale = 1.0 / (head_dim as f64).sqrt();
                    let mut gq = Matrix::zeros(qv.dim());
                    let mut gk = Matrix::zeros(kv.dim());
                    let mut gv = Matrix::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * head_dim..(h + 1) * head_dim];
                        let go = g.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let gp = go.dot(&vv.slice(cols).t());
                        // softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P))
                        let mut gs = gp;
                        for (mut grow, prow) in gs.rows_mut().into_iter().zip(p.rows()) {
                            let dotp = grow.dot(&prow);
                            Zip::from(&mut grow).and(prow).for_each(|o, &pv| *o = pv * (*o - dotp) * scale);
                        }
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        accumulate_view(&mut grads[p.0], g.slice(s![start..start + n, ..]));
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Matrix::zeros(self.shape(*x));
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Matrix::zeros(self.shape(*x));
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SelectCols(x, cols) => {
                    let mut gx = Matrix::zeros(self.shape(*x));
                    for (j, &c) in cols.iter().enumerate() {
                        let mut col = gx.column_mut(c);
                        col += &g.column(j);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ExpandRows(x) => accumulate(&mut grads[x.0], sum_rows(&g)),
                Op::Unfold(x, window) => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros((rows, cols));
                    for i in 0..g.nrows() {
                        for w in 0..*window {
                            let mut dst = gx.row_mut(i + w);
                            dst += &g.slice(s![i, w * cols..(w + 1) * cols]);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::RowDiff(x) => {
                    let n = g.nrows();
                    let mut gx = Matrix::zeros((n + 1, g.ncols()));
                    {
                        let mut hi = gx.slice_mut(s![1.., ..]);
                        hi += &g;
                    }
                    {
                        let mut lo = gx.slice_mut(s![..n, ..]);
                        lo -= &g;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::MeanSquare(x) => {
                    let xv = self.value(*x);
                    let f = 2.0 * g[[0, 0]] / xv.len() as f64;
                    accumulate(&mut grads[x.0], xv.mapv(|v| v * f));
                }
                Op::Mean(x) => {
                    let (r, c) = self.shape(*x);
                    let f = g[[0, 0]] / (r * c) as f64;
                    accumulate(&mut grads[x.0], Matrix::from_elem((r, c), f));
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    for ((mut grow, yrow), &n) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dotp = grow.dot(&yrow);
                        Zip::from(&mut grow).and(yrow).for_each(|o, &yv| *o = (*o - yv * dotp) / n);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = &bv * &g;
                    let gb = &av * &g;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
            }
        }
        Gradients { params, nodes: grads }
    }
}

/// Convenience: copies a node's value out of the graph.
pub fn to_matrix(g: &Graph<'_>, v: Var) -> Array2<f64> {
    g.value(v).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(x0: Matrix, build: impl Fn(&mut Graph<'_>, Var) -> Var) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.dim()));
        let h = 1e-5;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(xp);
                let out = build(&mut g, x);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "grad mismatch at ({r},{c}): analytic {a} numeric {numeric}");
        }
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        gaussian_matrix(rows, cols, &mut seeded(seed))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let w = rand(4, 3, 2);
        check_input_grad(rand(5, 4, 1), |g, x| {
            let wv = g.input(w.clone());
            let y = g.matmul(x, wv);
            let y = g.gelu(y);
            let y = g.silu(y);
            g.mean_square(y)
        });
    }

    #[test]
    fn layer_norm_and_modulate_grads() {
        let shift = rand(1, 6, 3);
        let scale = rand(1, 6, 4);
        let target = rand(3, 6, 5);
        check_input_grad(rand(3, 6, 6), |g, x| {
            let sh = g.input(shift.clone());
            let sc = g.input(scale.clone());
            let t = g.input(target.clone());
            let y = g.layer_norm(x);
            let y = g.modulate(y, sh, sc);
            let d = g.sub(y, t);
            g.mean_square(d)
        });
    }

    #[test]
    fn attention_and_rope_grads() {
        let kv = rand(5, 8, 11);
        let target = rand(3, 8, 12);
        let pos_q = [0, 1, 2];
        let pos_k = [3, 0, 1, 2, 7];
        check_input_grad(rand(3, 8, 10), |g, x| {
            let k = g.input(kv.clone());
            let t = g.input(target.clone());
            let q = g.rope(x, &pos_q, 2, 100.0);
            let kr = g.rope(k, &pos_k, 2, 100.0);
            let y = g.attention(q, kr, k, 2);
            let d = g.sub(y, t);
            g.mean_square(d)
        });
        // gradient through keys and values
        let q0 = rand(3, 8, 13);
        check_input_grad(rand(5, 8, 14), |g, x| {
            let q = g.input(q0.clone());
            let y = g.attention(q, x, x, 2);
            let y = g.gelu(y);
            g.mean(y)
        });
    }

    #[test]
    fn structural_ops_grads() {
        let other = rand(2, 4, 21);
        check_input_grad(rand(6, 4, 20), |g, x| {
            let o = g.input(other.clone());
            let a = g.slice_rows(x, 1, 3);
            let b = g.concat_rows(&[a, o, x]);
            let c = g.select_cols(b, &[3, 0, 0]);
            let d = g.row_diff(c);
            let e = g.unfold(d, 3);
            let f = g.slice_cols(e, 2, 5);
            let r = g.slice_rows(x, 0, 1);
            let r = g.expand_rows(r, 4);
            let r = g.slice_cols(r, 0, 2);
            let row = g.slice_rows(x, 2, 1);
            let row = g.slice_cols(row, 1, 2);
            let r = g.mul_row(r, row);
            let m = g.mean_square(f);
            let n = g.mean(r);
            g.add(m, n)
        });
    }

    #[test]
    fn cosine_and_log_grads() {
        let other = rand(4, 5, 31);
        check_input_grad(rand(4, 5, 30), |g, x| {
            let o = g.input(other.clone());
            let a = g.l2_normalize_rows(x);
            let b = g.l2_normalize_rows(o);
            let c = g.row_dot(a, b);
            let p = g.affine(c, 0.5, 0.5);
            let p = g.affine(p, 0.9, 0.05);
            let l = g.ln(p);
            let l2 = g.mul(l, l);
            g.mean(l2)
        });
    }

    #[test]
    fn params_receive_accumulated_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_elem((1, 1), 3.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(w).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn rope_tables_identity_at_origin() {
        let (cos, sin) = rope_tables(&[0], 8, 10000.0);
        assert!(cos.iter().all(|&c| c == 1.0));
        assert!(sin.iter().all(|&s| s == 0.0));
    }
}
