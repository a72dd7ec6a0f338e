//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every op appends one node to the tape; the tape order is a topological
//! order, so [`Graph::backward`] simply walks it in reverse. Nodes only keep
//! the auxiliary buffers they need for their backward rule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::params::{ParamId, Params};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Silu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    RepeatRows(Var, usize),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Layer-norm epsilon inside the square root.
pub const LN_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// A single-owner computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<Option<Var>>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            track: true,
        }
    }

    /// A graph where nothing requires gradients (evaluation).
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.param_vars.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Leaf holding `t`; `requires_grad` makes its gradient available via [`Graph::grad`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers parameter `id` (once per graph); frozen parameters become constants.
    pub fn param(&mut self, params: &Params<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = params.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Value-identical copy with no graph linkage.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(n, m, out), Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Dimension {
                op,
                lhs: vec![da.0, da.1],
                rhs: vec![db.0, db.1],
            });
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_check(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims(a);
        let (r, rn) = self.dims(row);
        if r != 1 || rn != n {
            return Err(Error::Dimension {
                op,
                lhs: vec![m, n],
                rhs: vec![r, rn],
            });
        }
        Ok((m, n))
    }

    /// `a[i, :] + row` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_check("add_row", a, row)?;
        let r = self.data(row);
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddRow(a, row), rg))
    }

    /// `a[i, :] * row` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_check("mul_row", a, row)?;
        let r = self.data(row);
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x * r[i % n]).collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out), Op::Scale(a, s), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out), Op::Softmax(a), rg)
    }

    /// Row-wise softmax where row `i` only sees columns `j <= i + offset`.
    ///
    /// Masked entries are exactly zero. `offset = n - m` aligns the last query
    /// row with the last key, which is what incremental decoding needs.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let visible = (i + offset + 1).min(n);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = T::zero());
        }
        let rg = self.rg(a);
        // The softmax backward rule is mask-agnostic: masked outputs are zero.
        self.push(Tensor::matrix(m, n, out), Op::Softmax(a), rg)
    }

    /// Per-row normalisation followed by an affine map; `gain` and `bias` are `1×d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_check("layer_norm", x, gain)?;
        self.row_check("layer_norm", x, bias)?;
        let eps: T = c(LN_EPS);
        let nf: T = c(n as f64);
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (xhat, inv_std) = if rg && self.track {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let (m, n) = self.dims(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out), op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm],
                });
            }
            n += pn;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let pn = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * pn..(i + 1) * pn]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: vec![pn],
                });
            }
            m += pm;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(contract(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(len, n, out), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(contract(format!("slice_cols {start}+{len} of {n}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols(a, start), rg))
    }

    /// im2col for a 1-D convolution over rows: `L×C` becomes `L_out×(kernel·C)`
    /// with zero padding `pad` on both ends.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (l, ch) = self.dims(x);
        if kernel == 0 || stride == 0 || l + 2 * pad < kernel {
            return Err(contract(format!(
                "unfold kernel {kernel} stride {stride} pad {pad} on length {l}"
            )));
        }
        let l_out = (l + 2 * pad - kernel) / stride + 1;
        let src = self.data(x);
        let width = kernel * ch;
        let mut out = vec![T::zero(); l_out * width];
        for o in 0..l_out {
            for k in 0..kernel {
                let pos = (o * stride + k) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < l {
                    let p = pos as usize;
                    out[o * width + k * ch..o * width + (k + 1) * ch].copy_from_slice(&src[p * ch..(p + 1) * ch]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(l_out, width, out),
            Op::Unfold { x, kernel, stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling along rows.
    pub fn repeat_rows(&mut self, a: Var, factor: usize) -> Var {
        let (m, n) = self.dims(a);
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * n * factor);
        for i in 0..m {
            for _ in 0..factor {
                out.extend_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(m * factor, n, out), Op::RepeatRows(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, T::one() / c(n as f64))
    }

    /// Mean squared error, a `1×1` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n: T = c(self.nodes[a.0].value.len() as f64);
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(1, 1, vec![s]), Op::Mse(a, b), rg))
    }

    /// `x·W`, optionally `+ b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate across repeated calls into node gradients and into
    /// the `grad` buffers of every trainable parameter registered on this graph.
    pub fn backward(&mut self, loss: Var, params: &mut Params<T>) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract("backward requires a scalar loss"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if self.grads.len() < grads.len() {
            self.grads.resize(grads.len(), None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(id) = self.nodes[i].op {
                params.accumulate_grad(id, &g);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, g, n as isize, 1, self.data(*b), 1, n as isize, ga, true);
                }
                if self.rg(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, self.data(*a), 1, k as isize, g, n as isize, 1, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let ga = grad_buf(grads, *a, m * n);
                for r in 0..m {
                    for col in 0..n {
                        ga[r * n + col] = ga[r * n + col] + g[col * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * db[j];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + g[j] * da[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.dims(*row).1;
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *row, |gr| {
                    for (j, &v) in g.iter().enumerate() {
                        gr[j % n] = gr[j % n] + v;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.dims(*row).1;
                let (da, dr) = (self.data(*a), self.data(*row));
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * dr[j % n];
                    }
                });
                self.acc(grads, *row, |gr| {
                    for (j, &v) in g.iter().enumerate() {
                        gr[j % n] = gr[j % n] + v * da[j];
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * s));
            }
            Op::Softmax(a) => {
                let n = self.dims(*a).1;
                self.acc(grads, *a, |ga| {
                    for (r, (grow, yrow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot = grow.iter().zip(yrow).map(|(&u, &v)| u * v).sum::<T>();
                        for j in 0..n {
                            let idx = r * n + j;
                            ga[idx] = ga[idx] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.data(*gain);
                self.acc(grads, *gain, |gg| {
                    for (j, (&dy, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                        gg[j % n] = gg[j % n] + dy * h;
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for (j, &dy) in g.iter().enumerate() {
                        gb[j % n] = gb[j % n] + dy;
                    }
                });
                let nf: T = c(n as f64);
                self.acc(grads, *x, |gx| {
                    for r in 0..m {
                        let base = r * n;
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..n {
                            let d = g[base + j] * gv[j];
                            sum_d = sum_d + d;
                            sum_dh = sum_dh + d * xhat[base + j];
                        }
                        let is = inv_std[r];
                        for j in 0..n {
                            let d = g[base + j] * gv[j];
                            let v = is / nf * (nf * d - sum_d - xhat[base + j] * sum_dh);
                            gx[base + j] = gx[base + j] + v;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + g[j] * gelu_grad(da[j]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        let y = out[j];
                        ga[j] = ga[j] + g[j] * y * (T::one() - y);
                    }
                });
            }
            Op::Silu(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        let s = sigmoid(da[j]);
                        ga[j] = ga[j] + g[j] * s * (T::one() + da[j] * (T::one() - s));
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    self.acc(grads, p, |gp| {
                        for r in 0..m {
                            for j in 0..pn {
                                gp[r * pn + j] = gp[r * pn + j] + g[r * n + off + j];
                            }
                        }
                    });
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.dims(*a).1;
                let s = *start * n;
                self.acc(grads, *a, |ga| add_into(&mut ga[s..s + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let n = self.dims(*a).1;
                let (m, len) = node.value.dims2();
                self.acc(grads, *a, |ga| {
                    for r in 0..m {
                        for j in 0..len {
                            let idx = r * n + start + j;
                            ga[idx] = ga[idx] + g[r * len + j];
                        }
                    }
                });
            }
            Op::Unfold { x, kernel, stride, pad } => {
                let (l, ch) = self.dims(*x);
                let (l_out, width) = node.value.dims2();
                self.acc(grads, *x, |gx| {
                    for o in 0..l_out {
                        for k in 0..*kernel {
                            let pos = (o * stride + k) as isize - *pad as isize;
                            if pos >= 0 && (pos as usize) < l {
                                let p = pos as usize;
                                add_into(
                                    &mut gx[p * ch..(p + 1) * ch],
                                    &g[o * width + k * ch..o * width + (k + 1) * ch],
                                );
                            }
                        }
                    }
                });
            }
            Op::RepeatRows(a, factor) => {
                let n = self.dims(*a).1;
                self.acc(grads, *a, |ga| {
                    for (r, grow) in g.chunks(n).enumerate() {
                        let src = r / factor;
                        add_into(&mut ga[src * n..(src + 1) * n], grow);
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let k: T = c::<T>(2.0) * g[0] / c(da.len() as f64);
                self.acc(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + k * (da[j] - db[j]);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] - k * (da[j] - db[j]);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        f(grad_buf(grads, v, n));
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let k: T = c(GELU_K);
    let a: T = c(GELU_A);
    let half: T = c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k: T = c(GELU_K);
    let a: T = c(GELU_A);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}
