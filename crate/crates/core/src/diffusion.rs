//! Conditional DDPM action head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::TOKEN_DIM;
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv1d, Film, Linear};
use crate::params::Params;
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

pub const CHUNK_LEN: usize = 8;
pub const ACTION_DIM: usize = 3;
pub const DIFFUSION_STEPS: usize = 25;
/// Linear schedule endpoints as given for a 1000-step process.
pub const BETA_START_1000: f64 = 1e-4;
pub const BETA_END_1000: f64 = 2e-2;
pub const TIME_EMBED_DIM: usize = 32;
const HIDDEN: usize = 64;
const WIDTH_1: usize = 32;
const WIDTH_2: usize = 64;

/// Noise schedule and the reverse-step coefficients derived from it.
///
/// Steps are 1-based: `k ∈ 1..=K`, with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    scale: Vec<f64>,
    eps_coef: Vec<f64>,
    sigma: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::for_steps(DIFFUSION_STEPS)
    }
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(contract("diffusion schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(contract(format!("invalid betas {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut scale = Vec::with_capacity(steps);
        let mut eps_coef = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            scale.push(1.0 / libm::sqrt(alphas[i]));
            eps_coef.push(betas[i] / libm::sqrt(1.0 - alpha_bars[i]));
            sigma.push(libm::sqrt(betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            scale,
            eps_coef,
            sigma,
        })
    }

    /// Linear schedule whose 1000-step endpoints are stretched to `steps`
    /// steps, so the forward process still ends close to pure noise.
    pub fn for_steps(steps: usize) -> Self {
        let stretch = 1000.0 / steps as f64;
        let end = (BETA_END_1000 * stretch).min(0.999);
        Self::linear(steps, BETA_START_1000 * stretch, end).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(contract(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Multiplier of the reverse step, `1/√α_k`.
    pub fn scale(&self, k: usize) -> f64 {
        self.scale[k - 1]
    }

    /// Noise-prediction coefficient, `β_k/√(1−ᾱ_k)`.
    pub fn eps_coef(&self, k: usize) -> f64 {
        self.eps_coef[k - 1]
    }

    /// Posterior standard deviation; zero at `k = 1`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k - 1]
    }

    /// `√ᾱ_k·a0 + √(1−ᾱ_k)·eps`.
    pub fn add_noise<T: Scalar>(&self, a0: &[T], k: usize, eps: &[T]) -> Result<Vec<T>> {
        let i = self.idx(k)?;
        add_noise_with(a0, self.alpha_bars[i], eps)
    }

    /// One reverse step `A_{k-1} = (A_k − γ·ε̂)/√α_k + σ_k·z`.
    pub fn denoise_step<T: Scalar, R: Rng + ?Sized>(
        &self,
        a_k: &[T],
        k: usize,
        eps_hat: &[T],
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let i = self.idx(k)?;
        if a_k.len() != eps_hat.len() {
            return Err(contract("denoise_step: noise prediction has the wrong length"));
        }
        let scale: T = c(self.scale[i]);
        let gamma: T = c(self.eps_coef[i]);
        let sigma = self.sigma[i];
        Ok(a_k
            .iter()
            .zip(eps_hat)
            .map(|(&a, &e)| {
                let mean = scale * (a - gamma * e);
                if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    mean + c(sigma * z)
                } else {
                    mean
                }
            })
            .collect())
    }
}

/// Forward noising with an explicit `ᾱ` (the `ᾱ = 1` limit returns `a0`).
pub fn add_noise_with<T: Scalar>(a0: &[T], alpha_bar: f64, eps: &[T]) -> Result<Vec<T>> {
    if a0.len() != eps.len() {
        return Err(contract("add_noise: noise has the wrong length"));
    }
    let s: T = c(libm::sqrt(alpha_bar));
    let n: T = c(libm::sqrt(1.0 - alpha_bar));
    Ok(a0.iter().zip(eps).map(|(&a, &e)| s * a + n * e).collect())
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            c(z)
        })
        .collect()
}

/// Sinusoidal embedding of the integer diffusion step.
pub fn timestep_embedding<T: Scalar>(k: usize) -> Tensor<T> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMBED_DIM);
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out.push(c(libm::sin(k as f64 * freq)));
    }
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out.push(c(libm::cos(k as f64 * freq)));
    }
    Tensor::row(out)
}

/// FiLM-conditioned 1-D convolutional encoder-decoder over the chunk axis.
///
/// Level 1 runs at full length with 32 channels, level 2 at half length with
/// 64 channels. Level 2 has a residual skip; level 1 a concatenated skip. The
/// output convolution starts at zero, so an untrained head predicts `ε̂ = 0`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub time_proj: Linear,
    pub cond_proj: Linear,
    pub conv_in: Conv1d,
    pub film_in: Film,
    pub down: Conv1d,
    pub conv_mid1: Conv1d,
    pub film_mid1: Film,
    pub conv_mid2: Conv1d,
    pub film_mid2: Film,
    pub conv_up: Conv1d,
    pub film_up: Film,
    pub conv_out: Conv1d,
}

impl Denoiser {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut Params<T>, rng: &mut R) -> Self {
        Self {
            time_proj: Linear::new(params, "decoder.time_proj", TIME_EMBED_DIM, HIDDEN, true, rng),
            cond_proj: Linear::new(params, "decoder.cond_proj", TOKEN_DIM, HIDDEN, true, rng),
            conv_in: Conv1d::new(params, "decoder.conv_in", ACTION_DIM, WIDTH_1, 1, rng),
            film_in: Film::new(params, "decoder.film_in", HIDDEN, WIDTH_1, rng),
            down: Conv1d::new(params, "decoder.down", WIDTH_1, WIDTH_1, 2, rng),
            conv_mid1: Conv1d::new(params, "decoder.conv_mid1", WIDTH_1, WIDTH_2, 1, rng),
            film_mid1: Film::new(params, "decoder.film_mid1", HIDDEN, WIDTH_2, rng),
            conv_mid2: Conv1d::new(params, "decoder.conv_mid2", WIDTH_2, WIDTH_2, 1, rng),
            film_mid2: Film::new(params, "decoder.film_mid2", HIDDEN, WIDTH_2, rng),
            conv_up: Conv1d::new(params, "decoder.conv_up", WIDTH_2 + WIDTH_1, WIDTH_1, 1, rng),
            film_up: Film::new(params, "decoder.film_up", HIDDEN, WIDTH_1, rng),
            conv_out: Conv1d::zeros(params, "decoder.conv_out", WIDTH_1, ACTION_DIM),
        }
    }

    /// Predicted noise `ε_θ(F_C, A_k, k)` with the shape of `a_k`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<T>, a_k: Var, k: usize, f_c: Var) -> Result<Var> {
        let (len, dim) = g.value(a_k).dims2();
        if len % 2 != 0 || dim != ACTION_DIM {
            return Err(contract(format!("denoiser input {len}×{dim} unsupported")));
        }
        let temb = g.constant(timestep_embedding(k));
        let t = self.time_proj.forward(g, p, temb)?;
        let cnd = self.cond_proj.forward(g, p, f_c)?;
        let z = g.add(t, cnd)?;
        let z = g.silu(z);

        let h = self.conv_in.forward(g, p, a_k)?;
        let h = self.film_in.forward(g, p, h, z)?;
        let skip1 = g.silu(h);

        let d = self.down.forward(g, p, skip1)?;
        let d = g.silu(d);
        let h = self.conv_mid1.forward(g, p, d)?;
        let h = self.film_mid1.forward(g, p, h, z)?;
        let skip2 = g.silu(h);
        let h = self.conv_mid2.forward(g, p, skip2)?;
        let h = self.film_mid2.forward(g, p, h, z)?;
        let h = g.silu(h);
        let h = g.add(h, skip2)?;

        let u = g.repeat_rows(h, 2);
        let u = g.concat_cols(&[u, skip1])?;
        let u = self.conv_up.forward(g, p, u)?;
        let u = self.film_up.forward(g, p, u, z)?;
        let u = g.silu(u);
        self.conv_out.forward(g, p, u)
    }

    /// Noise-prediction MSE at a uniformly drawn step with fresh Gaussian noise.
    pub fn loss<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Params<T>,
        schedule: &DiffusionSchedule,
        f_c: Var,
        a0: &Tensor<T>,
        rng: &mut R,
    ) -> Result<Var> {
        let k = rng.random_range(1..=schedule.steps());
        let eps: Vec<T> = gaussian(a0.len(), rng);
        self.loss_at(g, p, schedule, f_c, a0, k, eps)
    }

    /// [`Denoiser::loss`] with the step and noise given explicitly.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_at<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Params<T>,
        schedule: &DiffusionSchedule,
        f_c: Var,
        a0: &Tensor<T>,
        k: usize,
        eps: Vec<T>,
    ) -> Result<Var> {
        let (rows, cols) = a0.dims2();
        let a_k = schedule.add_noise(a0.data(), k, &eps)?;
        let a_k = g.constant(Tensor::matrix(rows, cols, a_k));
        let eps = g.constant(Tensor::matrix(rows, cols, eps));
        let pred = self.forward(g, p, a_k, k, f_c)?;
        g.mse(pred, eps)
    }

    /// Full reverse process from `A_K ~ N(0, I)`, clipped to `[-1, 1]`.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        p: &Params<T>,
        schedule: &DiffusionSchedule,
        f_c: &Tensor<T>,
        len: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let mut a: Vec<T> = gaussian(len * ACTION_DIM, rng);
        let mut g = Graph::inference();
        for k in (1..=schedule.steps()).rev() {
            g.reset();
            let fc = g.constant(f_c.clone());
            let ak = g.constant(Tensor::matrix(len, ACTION_DIM, a.clone()));
            let eps = self.forward(&mut g, p, ak, k, fc)?;
            a = schedule.denoise_step(&a, k, g.value(eps).data(), rng)?;
        }
        let one = T::one();
        a.iter_mut().for_each(|v| *v = v.max(-one).min(one));
        Ok(Tensor::matrix(len, ACTION_DIM, a))
    }
}
