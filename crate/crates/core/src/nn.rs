//! Parameterised layers built from graph ops.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, Params};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let weight = params.add(
            &format!("{name}.weight"),
            Tensor::randn(&[fan_in, fan_out], std, rng),
            true,
        );
        let bias = bias.then(|| params.add(&format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), true));
        Self { weight, bias }
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Scalar>(params: &mut Params<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = params.add(&format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]), true);
        let bias = Some(params.add(&format!("{name}.bias"), Tensor::zeros(&[1, fan_out]), true));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = self.bias.map(|b| g.param(p, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut Params<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(&format!("{name}.gain"), Tensor::full(&[1, dim], T::one()), true),
            bias: params.add(&format!("{name}.bias"), Tensor::zeros(&[1, dim]), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var) -> Result<Var> {
        let gain = g.param(p, self.gain);
        let bias = g.param(p, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), dims.0, dims.1, true, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), dims.1, dims.2, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Scaled dot-product attention for a single head: `softmax(q·kᵀ/√d)·v`.
///
/// With `causal`, query row `i` sees keys `j <= i + (keys - queries)`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let d = g.value(q).cols();
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / c::<T>(d as f64).sqrt());
    let probs = if causal {
        let offset = g.value(k).rows() - g.value(q).rows();
        g.causal_softmax_rows(scores, offset)
    } else {
        g.softmax_rows(scores)
    };
    g.matmul(probs, v)
}

/// Pre-norm transformer layer with multi-head attention (one head unless
/// set with [`TransformerLayer::with_heads`]) and a GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads: 1,
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            wq: Linear::new(params, &format!("{name}.attn.q"), dim, dim, false, rng),
            wk: Linear::new(params, &format!("{name}.attn.k"), dim, dim, false, rng),
            wv: Linear::new(params, &format!("{name}.attn.v"), dim, dim, false, rng),
            wo: Linear::new(params, &format!("{name}.attn.o"), dim, dim, false, rng),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(params, &format!("{name}.mlp"), (dim, hidden, dim), rng),
        }
    }

    /// Splits attention into `heads` equal column blocks; no parameter changes.
    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    fn attend<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        if self.heads <= 1 {
            return attention(g, q, k, v, causal);
        }
        let d = g.value(q).cols();
        if d % self.heads != 0 {
            return Err(crate::Error::Contract(format!(
                "{d} columns do not split into {} heads",
                self.heads
            )));
        }
        let w = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * w, w)?;
            let kh = g.slice_cols(k, h * w, w)?;
            let vh = g.slice_cols(v, h * w, w)?;
            outs.push(attention(g, qh, kh, vh, causal)?);
        }
        g.concat_cols(&outs)
    }

    /// Full layer over every row of `x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var, causal: bool) -> Result<Var> {
        let n = g.value(x).rows();
        self.forward_rows(g, p, x, 0, n, causal)
    }

    /// Layer outputs for rows `start..start+len` only; keys and values still
    /// cover every row, so this equals slicing the full output.
    pub fn forward_rows<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Params<T>,
        x: Var,
        start: usize,
        len: usize,
        causal: bool,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let h = self.ln1.forward(g, p, x)?;
        let (hq, xq) = if start == 0 && len == n {
            (h, x)
        } else {
            (g.slice_rows(h, start, len)?, g.slice_rows(x, start, len)?)
        };
        let q = self.wq.forward(g, p, hq)?;
        let k = self.wk.forward(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        let a = if causal && start + len < n {
            // Rows beyond the last query are invisible to every query.
            let kk = g.slice_rows(k, 0, start + len)?;
            let vv = g.slice_rows(v, 0, start + len)?;
            self.attend(g, q, kk, vv, true)?
        } else {
            self.attend(g, q, k, v, causal)?
        };
        let a = self.wo.forward(g, p, a)?;
        let y = g.add(xq, a)?;
        let z = self.ln2.forward(g, p, y)?;
        let z = self.mlp.forward(g, p, z)?;
        g.add(y, z)
    }
}

/// 1-D convolution over the rows of an `L×C_in` matrix, kernel 3.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lin: Linear::new(params, name, 3 * c_in, c_out, true, rng),
            kernel: 3,
            stride,
        }
    }

    pub fn zeros<T: Scalar>(params: &mut Params<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            lin: Linear::zeros(params, name, 3 * c_in, c_out),
            kernel: 3,
            stride: 1,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, x: Var) -> Result<Var> {
        let cols = g.unfold(x, self.kernel, self.stride, self.kernel / 2)?;
        self.lin.forward(g, p, cols)
    }
}

/// Feature-wise affine modulation `h ⊙ (1 + scale) + shift`, with
/// `(scale, shift)` projected from a conditioning row.
#[derive(Debug, Clone)]
pub struct Film {
    pub proj: Linear,
    pub channels: usize,
}

impl Film {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut Params<T>,
        name: &str,
        cond_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(params, name, cond_dim, 2 * channels, true, rng),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, h: Var, cond: Var) -> Result<Var> {
        let ss = self.proj.forward(g, p, cond)?;
        let scale = g.slice_cols(ss, 0, self.channels)?;
        let shift = g.slice_cols(ss, self.channels, self.channels)?;
        let ones = g.constant(Tensor::full(&[1, self.channels], T::one()));
        let scale = g.add(scale, ones)?;
        let h = g.mul_row(h, scale)?;
        g.add_row(h, shift)
    }
}
