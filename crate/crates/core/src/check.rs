//! Central finite-difference gradient checking in double precision.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::params::Params;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `decoder.conv_out.w[17]`.
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = at();
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(contract(format!("loss must be scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Checks `d loss / d param` for up to `probes` random entries of every
/// trainable parameter (all entries when `probes` is 0).
pub fn check_params<R: Rng + ?Sized>(
    params: &mut Params<f64>,
    loss: &dyn Fn(&mut Graph<f64>, &Params<f64>) -> Result<Var>,
    h: f64,
    probes: usize,
    rng: &mut R,
) -> Result<GradReport> {
    params.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    g.backward(l, params)?;
    let ids: Vec<_> = params.ids().filter(|&id| params.get(id).trainable).collect();
    let mut report = GradReport::new();
    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, p)?;
        scalar(&g, l)
    };
    for id in ids {
        let n = params.value(id).len();
        let analytic: Vec<f64> = match params.grad(id) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let picks: Vec<usize> = if probes == 0 || probes >= n {
            (0..n).collect()
        } else {
            (0..probes).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let name = &params.get(id).name;
            report.record(analytic[i], numeric, || format!("{name}[{i}]"));
        }
    }
    params.zero_grad();
    Ok(report)
}

/// Checks `d loss / d input` for every entry of each input tensor. The
/// closure receives the inputs already registered on the graph.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    loss: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<GradReport> {
    let mut params = Params::new();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l, &mut params)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; t.len()])
        })
        .collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), false)).collect();
        let l = loss(&mut g, &vars)?;
        scalar(&g, l)
    };
    let mut report = GradReport::new();
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for j in 0..xs.len() {
        for i in 0..xs[j].len() {
            let orig = xs[j].data()[i];
            xs[j].data_mut()[i] = orig + h;
            let up = eval(&xs)?;
            xs[j].data_mut()[i] = orig - h;
            let down = eval(&xs)?;
            xs[j].data_mut()[i] = orig;
            report.record(analytic[j][i], (up - down) / (2.0 * h), || format!("input{j}[{i}]"));
        }
    }
    Ok(report)
}
