use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::params::Params;
use crate::scalar::{c, Scalar};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter. Gradients are left in place.
    ///
    /// A trainable parameter without a gradient is a contract error: the
    /// caller must run backward first (an untouched parameter still gets a
    /// zero gradient when it was registered on the graph).
    pub fn step(&mut self, params: &mut Params<T>) -> Result<()> {
        self.update(params, false)
    }

    /// Like [`Adam::step`] but skips parameters that received no gradient,
    /// leaving their moments untouched.
    pub fn step_present(&mut self, params: &mut Params<T>) -> Result<()> {
        self.update(params, true)
    }

    fn update(&mut self, params: &mut Params<T>, skip_missing: bool) -> Result<()> {
        if !skip_missing {
            if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
                return Err(contract(format!("parameter {} has no gradient", p.name)));
            }
        }
        if self.first.len() < params.len() {
            for (id, p) in params.iter().skip(self.first.len()) {
                let n = p.value.len();
                debug_assert_eq!(id.index(), self.first.len());
                self.first.push(vec![T::zero(); n]);
                self.second.push(vec![T::zero(); n]);
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2): (T, T) = (c(self.beta1), c(self.beta2));
        let step_size: T = c(self.lr / bc1);
        let bc2_sqrt: T = c(libm::sqrt(bc2));
        let eps: T = c(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                *w = *w - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
