//! Tape-based reverse-mode autodiff over `f64` matrices.
//!
//! Forward values are computed eagerly as the graph is built; calling
//! [`Tape::backward`] on a scalar output walks the tape in reverse and
//! accumulates gradients for every trainable parameter that was touched.
//! Nodes whose inputs are all frozen (`needs_grad == false`) are skipped
//! during the backward pass, so freezing parameters also skips their
//! gradient work.
//!
//! The op set is deliberately small: exactly what the model needs, each with
//! a hand-written backward rule that is unit-tested against central finite
//! differences.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `(m x n) + (1 x n)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    /// `(1 x 1) * (m x n)`.
    ScalarMul(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    /// `(x, gain, bias)`; gain/bias are `1 x n`.
    LayerNorm(Var, Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Tile a `1 x n` row into `k x n`.
    RepeatRows(Var),
    /// Column-wise mean: `m x n -> 1 x n`.
    MeanRows(Var),
    SumAll(Var),
    /// Elementwise sqrt with a guarded backward at zero.
    Sqrt(Var),
    /// `-sum_i p_i ln p_i` over a `1 x n` row of probabilities.
    Entropy(Var),
    /// Row lookup into an embedding table.
    GatherRows(Var, Vec<usize>),
    /// Dilated causal 1-D convolution along rows (time axis).
    /// `x: T x c_in`, `w: (kernel * c_in) x c_out`, `b: 1 x c_out`.
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        dilation: usize,
    },
}

struct Node {
    op: Op,
    /// Owned output value; `None` for parameter leaves (value lives in the store).
    value: Option<Mat>,
    param: Option<ParamId>,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-parameter gradients produced by [`Tape::backward`], indexed by
/// [`ParamId`]. Frozen parameters always read back as `None`.
pub struct Grads {
    by_param: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param[id.index()].as_ref()
    }

    pub fn take(&mut self, id: ParamId) -> Option<Mat> {
        self.by_param[id.index()].take()
    }

    pub fn set(&mut self, id: ParamId, g: Mat) {
        self.by_param[id.index()] = Some(g);
    }

    /// Accumulate another gradient set (e.g. across samples in a batch).
    pub fn accumulate(&mut self, other: Grads) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(other.by_param) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => *d += &s,
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
    }

    pub fn zeros(n_params: usize) -> Grads {
        Grads {
            by_param: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Global L2 norm over all present gradients.
    pub fn l2_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.iter_mut().flatten() {
            *g *= c;
        }
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(m), _) => m,
            (None, Some(id)) => self.store.value(id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.nrows(), m.ncols())
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Op::Leaf, m, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(Mat::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    /// Bring a stored parameter onto the tape; memoized so each parameter
    /// occupies a single node and gradient accumulation covers all uses.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        self.nodes.push(Node {
            op: Op::Leaf,
            value: None,
            param: Some(id),
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.ncols(),
                vb.nrows(),
                "matmul inner dims {}x{} . {}x{}",
                va.nrows(),
                va.ncols(),
                vb.nrows(),
                vb.ncols()
            );
            va.dot(vb)
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "add shape mismatch");
            va + vb
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "sub shape mismatch");
            va - vb
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = {
            let (va, vr) = (self.value(a), self.value(row));
            assert_eq!(vr.nrows(), 1, "add_row expects a 1 x n row");
            assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
            va + &vr.row(0)
        };
        let ng = self.ng(a) || self.ng(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "hadamard shape mismatch");
            va * vb
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Hadamard(a, b), out, ng)
    }

    pub fn scalar_mul(&mut self, scalar: Var, m: Var) -> Var {
        let out = {
            let (vs, vm) = (self.value(scalar), self.value(m));
            assert_eq!(vs.dim(), (1, 1), "scalar_mul expects a 1 x 1 scalar");
            vm * vs[(0, 0)]
        };
        let ng = self.ng(scalar) || self.ng(m);
        self.push(Op::ScalarMul(scalar, m), out, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu_scalar);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), out, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut r in out.rows_mut() {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = r.sum();
            r.mapv_inplace(|x| x / sum);
        }
        let ng = self.ng(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let out = {
            let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
            assert_eq!(vg.nrows(), 1);
            assert_eq!(vb.nrows(), 1);
            assert_eq!(vg.ncols(), vx.ncols());
            assert_eq!(vb.ncols(), vx.ncols());
            let mut out = vx.clone();
            for mut r in out.rows_mut() {
                let n = r.len() as f64;
                let mean = r.sum() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (j, v) in r.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * vg[(0, j)] + vb[(0, j)];
                }
            }
            out
        };
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Op::LayerNorm(x, gain, bias), out, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.ncols(), cols, "concat_rows width mismatch");
            out.slice_mut(s![at..at + vp.nrows(), ..]).assign(vp);
            at += vp.nrows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.nrows(), rows, "concat_cols height mismatch");
            out.slice_mut(s![.., at..at + vp.ncols()]).assign(vp);
            at += vp.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert!(r0 < r1 && r1 <= va.nrows(), "slice_rows out of bounds");
            va.slice(s![r0..r1, ..]).to_owned()
        };
        let ng = self.ng(a);
        self.push(Op::SliceRows(a, r0, r1), out, ng)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert!(c0 < c1 && c1 <= va.ncols(), "slice_cols out of bounds");
            va.slice(s![.., c0..c1]).to_owned()
        };
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, c0, c1), out, ng)
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.nrows(), 1, "repeat_rows expects a 1 x n row");
            let mut out = Mat::zeros((k, va.ncols()));
            for mut r in out.rows_mut() {
                r.assign(&va.row(0));
            }
            out
        };
        let ng = self.ng(a);
        self.push(Op::RepeatRows(a), out, ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = {
            let va = self.value(a);
            let m = va.nrows() as f64;
            va.sum_axis(Axis(0)).insert_axis(Axis(0)) / m
        };
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), out, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::SumAll(a), out, ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(Op::Sqrt(a), out, ng)
    }

    pub fn entropy(&mut self, p: Var) -> Var {
        let out = {
            let vp = self.value(p);
            assert_eq!(vp.nrows(), 1, "entropy expects a 1 x n probability row");
            let h = -vp
                .iter()
                .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
                .sum::<f64>();
            Mat::from_elem((1, 1), h)
        };
        let ng = self.ng(p);
        self.push(Op::Entropy(p), out, ng)
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let out = {
            let vt = self.value(table);
            let mut out = Mat::zeros((indices.len(), vt.ncols()));
            for (i, &idx) in indices.iter().enumerate() {
                assert!(idx < vt.nrows(), "gather_rows index out of bounds");
                out.row_mut(i).assign(&vt.row(idx));
            }
            out
        };
        let ng = self.ng(table);
        self.push(Op::GatherRows(table, indices.to_vec()), out, ng)
    }

    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var, kernel: usize, dilation: usize) -> Var {
        let out = {
            let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
            let (t, c_in) = (vx.nrows(), vx.ncols());
            assert_eq!(vw.nrows(), kernel * c_in, "causal_conv weight rows");
            let c_out = vw.ncols();
            assert_eq!(vb.dim(), (1, c_out), "causal_conv bias shape");
            let mut out = Mat::zeros((t, c_out));
            for mut r in out.rows_mut() {
                r.assign(&vb.row(0));
            }
            for j in 0..kernel {
                let shift = j * dilation;
                if shift >= t {
                    break;
                }
                let wj = vw.slice(s![j * c_in..(j + 1) * c_in, ..]);
                let contrib = vx.slice(s![..t - shift, ..]).dot(&wj);
                out.slice_mut(s![shift.., ..])
                    .zip_mut_with(&contrib, |o, &c| *o += c);
            }
            out
        };
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Op::CausalConv {
                x,
                w,
                b,
                kernel,
                dilation,
            },
            out,
            ng,
        )
    }

    /// Reverse pass from a `1 x 1` scalar. Returns gradients for all
    /// trainable parameters reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        let mut out = Grads::zeros(self.store.len());

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    if let Some(id) = self.nodes[i].param {
                        match &mut out.by_param[id.index()] {
                            Some(acc) => *acc += &g,
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accum(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accum(&mut grads[b.0], db);
                    }
                }
                Op::Transpose(a) => {
                    if self.ng(*a) {
                        accum(&mut grads[a.0], g.t().to_owned());
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*b) {
                        accum(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.ng(*b) {
                        accum(&mut grads[b.0], -&g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads[row.0], dr);
                    }
                    if self.ng(*a) {
                        accum(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    if self.ng(*a) {
                        accum(&mut grads[a.0], &g * *c);
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.ng(*a) {
                        accum(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        accum(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::ScalarMul(sc, m) => {
                    if self.ng(*sc) {
                        let ds = (&g * self.value(*m)).sum();
                        accum(&mut grads[sc.0], Mat::from_elem((1, 1), ds));
                    }
                    if self.ng(*m) {
                        accum(&mut grads[m.0], &g * self.value(*sc)[(0, 0)]);
                    }
                }
                Op::Gelu(a) => {
                    if self.ng(*a) {
                        let da = self.value(*a).mapv(gelu_grad_scalar) * &g;
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.ng(*a) {
                        let y = self.nodes[i].value.as_ref().unwrap();
                        let mut da = Mat::zeros(y.dim());
                        for r in 0..y.nrows() {
                            let dot: f64 = (0..y.ncols()).map(|c| g[(r, c)] * y[(r, c)]).sum();
                            for c in 0..y.ncols() {
                                da[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                            }
                        }
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::LayerNorm(x, gain, bias) => {
                    let vx = self.value(*x);
                    let vg = self.value(*gain);
                    let n = vx.ncols();
                    let nf = n as f64;
                    let mut dx = Mat::zeros(vx.dim());
                    let mut dgain = Mat::zeros((1, n));
                    let mut dbias = Mat::zeros((1, n));
                    for r in 0..vx.nrows() {
                        let row = vx.row(r);
                        let mean = row.sum() / nf;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // xhat_j = (x_j - mean) * inv
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = g[(r, j)] * vg[(0, j)];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgain[(0, j)] += g[(r, j)] * xhat;
                            dbias[(0, j)] += g[(r, j)];
                        }
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = g[(r, j)] * vg[(0, j)];
                            dx[(r, j)] =
                                inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                        }
                    }
                    if self.ng(*x) {
                        accum(&mut grads[x.0], dx);
                    }
                    if self.ng(*gain) {
                        accum(&mut grads[gain.0], dgain);
                    }
                    if self.ng(*bias) {
                        accum(&mut grads[bias.0], dbias);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let nr = self.value(p).nrows();
                        if self.ng(p) {
                            let gp = g.slice(s![at..at + nr, ..]).to_owned();
                            accum(&mut grads[p.0], gp);
                        }
                        at += nr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let nc = self.value(p).ncols();
                        if self.ng(p) {
                            let gp = g.slice(s![.., at..at + nc]).to_owned();
                            accum(&mut grads[p.0], gp);
                        }
                        at += nc;
                    }
                }
                Op::SliceRows(a, r0, r1) => {
                    if self.ng(*a) {
                        let mut da = Mat::zeros(self.value(*a).dim());
                        da.slice_mut(s![*r0..*r1, ..]).assign(&g);
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::SliceCols(a, c0, c1) => {
                    if self.ng(*a) {
                        let mut da = Mat::zeros(self.value(*a).dim());
                        da.slice_mut(s![.., *c0..*c1]).assign(&g);
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::RepeatRows(a) => {
                    if self.ng(*a) {
                        let da = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::MeanRows(a) => {
                    if self.ng(*a) {
                        let va = self.value(*a);
                        let m = va.nrows() as f64;
                        let mut da = Mat::zeros(va.dim());
                        for mut r in da.rows_mut() {
                            r.assign(&(&g.row(0) / m));
                        }
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::SumAll(a) => {
                    if self.ng(*a) {
                        let da = Mat::from_elem(self.value(*a).dim(), g[(0, 0)]);
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::Sqrt(a) => {
                    if self.ng(*a) {
                        let y = self.nodes[i].value.as_ref().unwrap();
                        let mut da = Mat::zeros(y.dim());
                        for (d, (&yv, &gv)) in da.iter_mut().zip(y.iter().zip(g.iter())) {
                            *d = if yv > 1e-12 { gv * 0.5 / yv } else { 0.0 };
                        }
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::Entropy(p) => {
                    if self.ng(*p) {
                        let vp = self.value(*p);
                        let gs = g[(0, 0)];
                        let da = vp.mapv(|x| {
                            let lx = x.max(1e-300).ln();
                            -gs * (lx + 1.0)
                        });
                        accum(&mut grads[p.0], da);
                    }
                }
                Op::GatherRows(table, indices) => {
                    if self.ng(*table) {
                        let mut dt = Mat::zeros(self.value(*table).dim());
                        for (r, &idx) in indices.iter().enumerate() {
                            dt.row_mut(idx).zip_mut_with(&g.row(r), |d, &gv| *d += gv);
                        }
                        accum(&mut grads[table.0], dt);
                    }
                }
                Op::CausalConv {
                    x,
                    w,
                    b,
                    kernel,
                    dilation,
                } => {
                    let vx = self.value(*x);
                    let vw = self.value(*w);
                    let (t, c_in) = (vx.nrows(), vx.ncols());
                    if self.ng(*b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads[b.0], db);
                    }
                    if self.ng(*x) {
                        let mut dx = Mat::zeros(vx.dim());
                        for j in 0..*kernel {
                            let shift = j * dilation;
                            if shift >= t {
                                break;
                            }
                            let wj = vw.slice(s![j * c_in..(j + 1) * c_in, ..]);
                            let contrib = g.slice(s![shift.., ..]).dot(&wj.t());
                            dx.slice_mut(s![..t - shift, ..])
                                .zip_mut_with(&contrib, |d, &c| *d += c);
                        }
                        accum(&mut grads[x.0], dx);
                    }
                    if self.ng(*w) {
                        let mut dw = Mat::zeros(vw.dim());
                        for j in 0..*kernel {
                            let shift = j * dilation;
                            if shift >= t {
                                break;
                            }
                            let dwj = vx.slice(s![..t - shift, ..]).t().dot(&g.slice(s![shift.., ..]));
                            dw.slice_mut(s![j * c_in..(j + 1) * c_in, ..])
                                .zip_mut_with(&dwj, |d, &c| *d += c);
                        }
                        accum(&mut grads[w.0], dw);
                    }
                }
            }
        }
        out
    }
}

fn accum(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Check analytic gradients of `build` against central finite
    /// differences for every trainable parameter in the store.
    fn check_grads(
        store: &mut ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> Var,
        tol: f64,
    ) {
        let grads = {
            let mut tape = Tape::new(store);
            let out = build(&mut tape, store);
            assert_eq!(tape.shape(out), (1, 1), "test graph must end in a scalar");
            tape.backward(out)
        };
        let eps = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                assert!(grads.get(id).is_none(), "frozen param got a gradient");
                continue;
            }
            let dim = store.value(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.value(id)[(r, c)];
                    store.value_mut(id)[(r, c)] = orig + eps;
                    let fp = {
                        let mut tape = Tape::new(store);
                        let out = build(&mut tape, store);
                        tape.value(out)[(0, 0)]
                    };
                    store.value_mut(id)[(r, c)] = orig - eps;
                    let fm = {
                        let mut tape = Tape::new(store);
                        let out = build(&mut tape, store);
                        tape.value(out)[(0, 0)]
                    };
                    store.value_mut(id)[(r, c)] = orig;
                    let fd = (fp - fm) / (2.0 * eps);
                    let an = grads.get(id).map(|g| g[(r, c)]).unwrap_or(0.0);
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                    assert!(
                        rel < tol,
                        "param {:?} ({},{}): analytic {an} vs fd {fd} (rel {rel})",
                        id,
                        r,
                        c
                    );
                }
            }
        }
    }

    /// Weighted sum against a fixed random matrix, to exercise the full
    /// Jacobian rather than just the row-sum direction.
    fn weighted_scalar(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = tape.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_mat(&mut rng, r, c));
        let h = tape.hadamard(v, w);
        tape.sum_all(h)
    }

    #[test]
    fn matmul_add_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add("a", rand_mat(&mut rng, 3, 4), true);
        store.add("b", rand_mat(&mut rng, 4, 2), true);
        store.add("bias", rand_mat(&mut rng, 1, 2), true);
        check_grads(
            &mut store,
            |tape, st| {
                let a = tape.param(st.id("a").unwrap());
                let b = tape.param(st.id("b").unwrap());
                let bias = tape.param(st.id("bias").unwrap());
                let y = tape.matmul(a, b);
                let y = tape.add_row(y, bias);
                weighted_scalar(tape, y, 7)
            },
            1e-6,
        );
    }

    #[test]
    fn gelu_softmax_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.add("x", rand_mat(&mut rng, 3, 5), true);
        store.add("gain", rand_mat(&mut rng, 1, 5), true);
        store.add("bias", rand_mat(&mut rng, 1, 5), true);
        check_grads(
            &mut store,
            |tape, st| {
                let x = tape.param(st.id("x").unwrap());
                let g = tape.param(st.id("gain").unwrap());
                let b = tape.param(st.id("bias").unwrap());
                let ln = tape.layer_norm(x, g, b);
                let ge = tape.gelu(ln);
                let sm = tape.softmax_rows(ge);
                weighted_scalar(tape, sm, 8)
            },
            1e-5,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a", rand_mat(&mut rng, 4, 3), true);
        store.add("b", rand_mat(&mut rng, 2, 3), true);
        store.add("row", rand_mat(&mut rng, 1, 6), true);
        check_grads(
            &mut store,
            |tape, st| {
                let a = tape.param(st.id("a").unwrap());
                let b = tape.param(st.id("b").unwrap());
                let row = tape.param(st.id("row").unwrap());
                let cat = tape.concat_rows(&[a, b]); // 6 x 3
                let t = tape.transpose(cat); // 3 x 6
                let wide = tape.concat_cols(&[t, t]); // 3 x 12
                let sl = tape.slice_cols(wide, 2, 8); // 3 x 6
                let sl = tape.slice_rows(sl, 0, 2); // 2 x 6
                let rep = tape.repeat_rows(row, 2); // 2 x 6
                let sum = tape.add(sl, rep);
                let mean = tape.mean_rows(sum); // 1 x 6
                weighted_scalar(tape, mean, 9)
            },
            1e-6,
        );
    }

    #[test]
    fn scalar_entropy_sqrt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        store.add("logits", rand_mat(&mut rng, 1, 6), true);
        store.add("m", rand_mat(&mut rng, 2, 3), true);
        check_grads(
            &mut store,
            |tape, st| {
                let logits = tape.param(st.id("logits").unwrap());
                let m = tape.param(st.id("m").unwrap());
                let p = tape.softmax_rows(logits);
                let h = tape.entropy(p); // 1 x 1
                let scaled = tape.scalar_mul(h, m);
                let sq = tape.hadamard(scaled, scaled);
                let s = tape.sum_all(sq);
                let d = tape.sqrt(s);
                let neg = tape.scale(h, -0.5);
                let hs = tape.sum_all(neg);
                let tot = tape.add(d, hs);
                let w = tape.sub(tot, hs);
                tape.add(w, hs)
            },
            1e-6,
        );
    }

    #[test]
    fn gather_rows_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("table", rand_mat(&mut rng, 5, 4), true);
        check_grads(
            &mut store,
            |tape, st| {
                let t = tape.param(st.id("table").unwrap());
                let g = tape.gather_rows(t, &[0, 3, 3, 1]);
                weighted_scalar(tape, g, 10)
            },
            1e-6,
        );
    }

    #[test]
    fn causal_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        store.add("x", rand_mat(&mut rng, 7, 3), true);
        store.add("w", rand_mat(&mut rng, 9, 4), true); // kernel 3, c_in 3, c_out 4
        store.add("b", rand_mat(&mut rng, 1, 4), true);
        check_grads(
            &mut store,
            |tape, st| {
                let x = tape.param(st.id("x").unwrap());
                let w = tape.param(st.id("w").unwrap());
                let b = tape.param(st.id("b").unwrap());
                let y = tape.causal_conv(x, w, b, 3, 2);
                weighted_scalar(tape, y, 11)
            },
            1e-6,
        );
    }

    #[test]
    fn causal_conv_respects_causality() {
        // Output at time t must not depend on inputs after t.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store.add("w", rand_mat(&mut rng, 6, 2), true); // kernel 3, c_in 2
        store.add("b", rand_mat(&mut rng, 1, 2), true);
        let x0 = rand_mat(&mut rng, 8, 2);
        let mut x1 = x0.clone();
        for c in 0..2 {
            x1[(5, c)] += 10.0; // perturb the future
        }
        let run = |x: &Mat, store: &ParamStore| {
            let mut tape = Tape::new(store);
            let xv = tape.constant(x.clone());
            let w = tape.param(store.id("w").unwrap());
            let b = tape.param(store.id("b").unwrap());
            let y = tape.causal_conv(xv, w, b, 3, 2);
            tape.value(y).clone()
        };
        let y0 = run(&x0, &store);
        let y1 = run(&x1, &store);
        for t in 0..5 {
            for c in 0..2 {
                assert_eq!(y0[(t, c)], y1[(t, c)], "future leaked into t={t}");
            }
        }
        assert!((y0[(5, 0)] - y1[(5, 0)]).abs() > 1e-9);
    }

    #[test]
    fn frozen_params_receive_no_gradient_and_skip_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        store.add("w_frozen", rand_mat(&mut rng, 3, 3), false);
        store.add("w_train", rand_mat(&mut rng, 3, 3), true);
        let mut tape = Tape::new(&store);
        let a = tape.param(store.id("w_frozen").unwrap());
        let b = tape.param(store.id("w_train").unwrap());
        let y = tape.matmul(a, b);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert!(grads.get(store.id("w_frozen").unwrap()).is_none());
        assert!(grads.get(store.id("w_train").unwrap()).is_some());
    }

    #[test]
    fn param_reuse_accumulates_gradient() {
        // f(w) = sum(w) + sum(w) => df/dw = 2 everywhere.
        let mut store = ParamStore::new();
        store.add("w", Mat::from_elem((2, 2), 0.5), true);
        let mut tape = Tape::new(&store);
        let w1 = tape.param(store.id("w").unwrap());
        let w2 = tape.param(store.id("w").unwrap());
        let sum = tape.add(w1, w2);
        let s = tape.sum_all(sum);
        let grads = tape.backward(s);
        let g = grads.get(store.id("w").unwrap()).unwrap();
        assert!(g.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_are_normalized_and_stable() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(
            Mat::from_shape_vec((2, 3), vec![1000.0, 1001.0, 999.0, -1.0, 0.0, 1.0]).unwrap(),
        );
        let p = tape.softmax_rows(x);
        let vp = tape.value(p);
        for r in 0..2 {
            let s: f64 = vp.row(r).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(vp.row(r).iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }
}
