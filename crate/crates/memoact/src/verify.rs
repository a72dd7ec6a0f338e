//! Property suites behind `memoact verify`: finite-difference gradients,
//! memory-bank oracles, diffusion identities and environment integrity.

use std::collections::VecDeque;
use std::time::Instant;

use memoact_core::check::{check_inputs, check_params, GradReport};
use memoact_core::diffusion::{gaussian, Denoiser, DiffusionSchedule, ACTION_DIM, CHUNK_LEN};
use memoact_core::encoder::{Fusion, Readout, StateEmbed, NUM_PATCHES, PROPRIO_DIM, TOKEN_DIM};
use memoact_core::envs::{self, TaskId};
use memoact_core::memory::{
    cosine, BankConfig, BankMode, Consolidation, Gate, MeanSummary, MemoryBank, MemoryToken, Retrieval, SummaryMode,
};
use memoact_core::nn::{attention, Conv1d, Film, LayerNorm, Linear, Mlp, TransformerLayer};
use memoact_core::{Graph, Params, Result as CoreResult, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::FormatError;

pub const SUITES: [&str; 4] = ["numerics", "memory", "diffusion", "envs"];

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub lines: Vec<CheckLine>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "[{}] {}/{}: {}\n",
                if l.passed { "PASS" } else { "FAIL" },
                self.suite,
                l.name,
                l.detail
            ));
        }
        out.push_str(&format!(
            "{}: {} ({:.1}s)\n",
            self.suite,
            if self.passed() { "ok" } else { "FAILED" },
            self.seconds
        ));
        out
    }
}

pub fn run(suite: &str) -> Result<SuiteReport, FormatError> {
    let started = Instant::now();
    let lines = match suite {
        "numerics" => numerics(GRAD_SEEDS)?,
        "memory" => memory()?,
        "diffusion" => diffusion()?,
        "envs" => envs_suite()?,
        other => {
            return Err(FormatError::Config(format!(
                "unknown suite {other:?}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: suite.into(),
        lines,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn line(name: &str, passed: bool, detail: impl Into<String>) -> CheckLine {
    CheckLine {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- numerics

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry reaches the loss.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> CoreResult<Var> {
    let shape = g.value(v).shape().to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let r = g.constant(r);
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> CoreResult<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            vec![vec![3, 4], vec![4, 5]],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        ("transpose", vec![vec![3, 4]], Box::new(|g, v| Ok(g.transpose(v[0])))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "add_row",
            vec![vec![3, 4], vec![1, 4]],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "mul_row",
            vec![vec![3, 4], vec![1, 4]],
            Box::new(|g, v| g.mul_row(v[0], v[1])),
        ),
        ("scale", vec![vec![3, 4]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| Ok(g.softmax_rows(v[0])))),
        (
            "causal_softmax",
            vec![vec![3, 5]],
            Box::new(|g, v| Ok(g.causal_softmax_rows(v[0], 2))),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![1, 6], vec![1, 6]],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("gelu", vec![vec![3, 4]], Box::new(|g, v| Ok(g.gelu(v[0])))),
        ("sigmoid", vec![vec![3, 4]], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("silu", vec![vec![3, 4]], Box::new(|g, v| Ok(g.silu(v[0])))),
        (
            "concat_cols",
            vec![vec![3, 2], vec![3, 4]],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        ),
        (
            "concat_rows",
            vec![vec![2, 4], vec![3, 4]],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        ),
        (
            "slice_rows",
            vec![vec![5, 3]],
            Box::new(|g, v| g.slice_rows(v[0], 1, 3)),
        ),
        (
            "slice_cols",
            vec![vec![3, 5]],
            Box::new(|g, v| g.slice_cols(v[0], 2, 2)),
        ),
        ("unfold", vec![vec![6, 2]], Box::new(|g, v| g.unfold(v[0], 3, 2, 1))),
        (
            "repeat_rows",
            vec![vec![3, 2]],
            Box::new(|g, v| Ok(g.repeat_rows(v[0], 2))),
        ),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| Ok(g.mean(v[0])))),
        ("mse", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mse(v[0], v[1]))),
        (
            "attention",
            vec![vec![2, 4], vec![5, 4], vec![5, 3]],
            Box::new(|g, v| attention(g, v[0], v[1], v[2], false)),
        ),
        (
            "causal_attention",
            vec![vec![3, 4], vec![5, 4], vec![5, 3]],
            Box::new(|g, v| attention(g, v[0], v[1], v[2], true)),
        ),
    ]
}

type ModuleCase = (&'static str, Box<dyn Fn(u64) -> CoreResult<GradReport>>);

/// Builds fresh parameters for `seed`, then checks `d loss / d θ`.
fn module_check<M>(
    seed: u64,
    probes: usize,
    build: impl Fn(&mut Params<f64>, &mut ChaCha8Rng) -> M,
    loss: impl Fn(&M, &mut Graph<f64>, &Params<f64>, &mut ChaCha8Rng) -> CoreResult<Var>,
) -> CoreResult<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let module = build(&mut params, &mut rng);
    // Give zero-initialised tensors (LayerNorm bias, output heads) generic values.
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.value_mut(id).data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let data_seed = rng.random::<u64>();
    let f = |g: &mut Graph<f64>, p: &Params<f64>| loss(&module, g, p, &mut ChaCha8Rng::seed_from_u64(data_seed));
    check_params(&mut params, &f, FD_STEP, probes, &mut rng)
}

fn bank_with(config: BankConfig, n: usize, rng: &mut ChaCha8Rng) -> CoreResult<MemoryBank<f64>> {
    let mut bank = MemoryBank::new(config);
    for t in 0..n {
        bank.append_sensory(randn(&[1, TOKEN_DIM], rng).data().to_vec(), t as u64, &mut MeanSummary)?;
    }
    Ok(bank)
}

fn module_cases() -> Vec<ModuleCase> {
    const D: usize = 6;
    vec![
        (
            "linear",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| Linear::new(p, "lin", D, 4, true, r),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[3, D], r));
                        let y = m.forward(g, p, x)?;
                        project(g, y, 1)
                    },
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, _| LayerNorm::new(p, "ln", D),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[3, D], r));
                        let y = m.forward(g, p, x)?;
                        project(g, y, 2)
                    },
                )
            }),
        ),
        (
            "mlp",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| Mlp::new(p, "mlp", (D, 8, 4), r),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[2, D], r));
                        let y = m.forward(g, p, x)?;
                        project(g, y, 3)
                    },
                )
            }),
        ),
        (
            "transformer_layer",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| TransformerLayer::new(p, "tf", D, 2 * D, r),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[4, D], r));
                        let y = m.forward(g, p, x, true)?;
                        project(g, y, 4)
                    },
                )
            }),
        ),
        (
            "transformer_layer_multihead",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| TransformerLayer::new(p, "tf", D, 2 * D, r).with_heads(2),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[4, D], r));
                        let y = m.forward_rows(g, p, x, 1, 2, true)?;
                        project(g, y, 4)
                    },
                )
            }),
        ),
        (
            "conv1d",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| Conv1d::new(p, "conv", 3, 4, 2, r),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[8, 3], r));
                        let y = m.forward(g, p, x)?;
                        project(g, y, 5)
                    },
                )
            }),
        ),
        (
            "film",
            Box::new(|s| {
                module_check(
                    s,
                    0,
                    |p, r| Film::new(p, "film", D, 4, r),
                    |m, g, p, r| {
                        let h = g.constant(randn(&[5, 4], r));
                        let z = g.constant(randn(&[1, D], r));
                        let y = m.forward(g, p, h, z)?;
                        project(g, y, 6)
                    },
                )
            }),
        ),
        (
            "readout",
            Box::new(|s| {
                module_check(
                    s,
                    4,
                    |p, r| Readout::new(p, r),
                    |m, g, p, r| {
                        let x = g.constant(randn(&[NUM_PATCHES, TOKEN_DIM], r));
                        let y = m.distill(g, p, x)?;
                        project(g, y, 7)
                    },
                )
            }),
        ),
        (
            "state_embed_and_fusion",
            Box::new(|s| {
                module_check(
                    s,
                    4,
                    |p, r| (StateEmbed::new(p, r), Fusion::new(p, r)),
                    |(st, fu), g, p, r| {
                        let proprio: Vec<f32> = (0..PROPRIO_DIM).map(|_| r.random_range(-1.0..1.0)).collect();
                        let f_r = g.constant(randn(&[1, TOKEN_DIM], r));
                        let f_s = st.embed(g, p, &proprio)?;
                        let y = fu.fuse(g, p, f_r, f_s)?;
                        project(g, y, 8)
                    },
                )
            }),
        ),
        (
            "consolidation",
            Box::new(|s| {
                module_check(
                    s,
                    4,
                    |p, r| Consolidation::new(p, 3, true, SummaryMode::Encoder, r),
                    |m, g, p, r| {
                        let src: Vec<MemoryToken<f64>> = (0..3)
                            .map(|t| MemoryToken::short(randn(&[1, TOKEN_DIM], r).data().to_vec(), t))
                            .collect();
                        let y = m.summarize(g, p, &src)?;
                        project(g, y, 9)
                    },
                )
            }),
        ),
        (
            "retrieval",
            Box::new(|s| {
                module_check(
                    s,
                    4,
                    |p, r| Retrieval::new(p, 14, r),
                    |m, g, p, r| {
                        let bank = bank_with(BankConfig::default(), 11, r)?;
                        let f_o = g.constant(randn(&[1, TOKEN_DIM], r));
                        let y = m.retrieve(g, p, &bank, f_o)?;
                        project(g, y, 10)
                    },
                )
            }),
        ),
        (
            "gate",
            Box::new(|s| {
                module_check(
                    s,
                    4,
                    |p, r| Gate::new(p, r),
                    |m, g, p, r| {
                        let a = g.constant(randn(&[1, TOKEN_DIM], r));
                        let b = g.constant(randn(&[1, TOKEN_DIM], r));
                        let y = m.fuse(g, p, a, b)?;
                        project(g, y, 11)
                    },
                )
            }),
        ),
        (
            "denoiser_loss",
            Box::new(|s| {
                module_check(
                    s,
                    3,
                    |p, r| Denoiser::new(p, r),
                    |m, g, p, r| {
                        let schedule = DiffusionSchedule::default();
                        let f_c = g.constant(randn(&[1, TOKEN_DIM], r));
                        let a0 = Tensor::matrix(
                            CHUNK_LEN,
                            ACTION_DIM,
                            (0..CHUNK_LEN * ACTION_DIM).map(|_| r.random_range(-1.0..1.0)).collect(),
                        );
                        let k = r.random_range(1..=schedule.steps());
                        let eps = gaussian(a0.len(), r);
                        m.loss_at(g, p, &schedule, f_c, &a0, k, eps)
                    },
                )
            }),
        ),
    ]
}

/// Finite-difference checks of every op and every learnable module over `seeds` seeds.
pub fn numerics(seeds: u64) -> Result<Vec<CheckLine>, FormatError> {
    let mut lines = Vec::new();
    for (name, shapes, f) in op_cases() {
        let mut worst = GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            let loss = |g: &mut Graph<f64>, v: &[Var]| -> CoreResult<Var> {
                let y = f(g, v)?;
                project(g, y, seed)
            };
            worst.merge(check_inputs(&inputs, &loss, FD_STEP)?);
        }
        lines.push(grad_line(&format!("op.{name}"), &worst));
    }
    for (name, f) in module_cases() {
        let mut worst = GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        };
        for seed in 0..seeds {
            worst.merge(f(seed)?);
        }
        lines.push(grad_line(&format!("module.{name}"), &worst));
    }
    Ok(lines)
}

fn grad_line(name: &str, r: &GradReport) -> CheckLine {
    line(
        name,
        r.checked > 0 && r.max_rel_err < FD_TOLERANCE,
        format!(
            "{} entries, max rel err {:.2e} at {}",
            r.checked, r.max_rel_err, r.worst
        ),
    )
}

// ------------------------------------------------------------------ memory

fn random_vec(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..TOKEN_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn memory() -> Result<Vec<CheckLine>, FormatError> {
    let mut lines = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d656d);

    // Capacity safety under a long stream, for every bank mode.
    let modes = [
        ("hierarchical", BankConfig::default()),
        (
            "fifo",
            BankConfig {
                mode: BankMode::Fifo { capacity: 14 },
                ..BankConfig::default()
            },
        ),
        (
            "simmerge",
            BankConfig {
                mode: BankMode::SimMerge { capacity: 14 },
                ..BankConfig::default()
            },
        ),
    ];
    for (name, config) in modes {
        let mut bank = MemoryBank::new(config);
        let mut violations = 0;
        for t in 0..10_000u64 {
            bank.append_sensory(random_vec(&mut rng), t, &mut MeanSummary)?;
            let split_ok = match config.mode {
                BankMode::Hierarchical => {
                    bank.stmb().len() <= config.short_capacity && bank.ltmb().len() <= config.long_capacity
                }
                _ => true,
            };
            if !(split_ok && bank.len() <= config.max_tokens()) {
                violations += 1;
            }
        }
        lines.push(line(
            &format!("capacity.{name}"),
            violations == 0,
            format!(
                "10000 appends, {violations} capacity violations, final size {}",
                bank.len()
            ),
        ));
    }

    // One consolidation: 7th arrival moves the oldest 3 into one long-term token.
    let mut bank = MemoryBank::new(BankConfig::default());
    let vectors: Vec<Vec<f64>> = (0..7).map(|_| random_vec(&mut rng)).collect();
    for (t, v) in vectors.iter().take(6).enumerate() {
        bank.append_sensory(v.clone(), t as u64, &mut MeanSummary)?;
    }
    let before = (bank.stmb().len(), bank.ltmb().len());
    bank.append_sensory(vectors[6].clone(), 6, &mut MeanSummary)?;
    let after = (bank.stmb().len(), bank.ltmb().len());
    let expected_mean: Vec<f64> = (0..TOKEN_DIM)
        .map(|j| (vectors[0][j] + vectors[1][j] + vectors[2][j]) / 3.0)
        .collect();
    let summary = &bank.ltmb()[0];
    let mean_ok = summary
        .vector
        .iter()
        .zip(&expected_mean)
        .all(|(a, b)| (a - b).abs() < 1e-12);
    let ok = before == (6, 0)
        && after == (4, 1)
        && mean_ok
        && (summary.birth_step, summary.latest_step) == (0, 2)
        && bank.stmb()[0].birth_step == 3;
    lines.push(line(
        "consolidation.arithmetic",
        ok,
        format!(
            "stmb/ltmb {before:?} -> {after:?}, summary spans steps {}..={}",
            summary.birth_step, summary.latest_step
        ),
    ));

    // merge_ltmb against a brute-force adjacent-cosine argmax.
    let mut mismatches = 0;
    for _ in 0..1000 {
        let cap = rng.random_range(2..=10);
        let config = BankConfig {
            long_capacity: cap,
            ..BankConfig::default()
        };
        let mut bank = MemoryBank::new(config);
        let tokens: Vec<MemoryToken<f64>> = (0..=cap)
            .map(|i| MemoryToken::long(random_vec(&mut rng), i as u64, i as u64, rng.random_range(1..4)))
            .collect();
        for t in &tokens {
            bank.push_long_unchecked(t.clone());
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..tokens.len() - 1 {
            let a = &tokens[i].vector;
            let b = &tokens[i + 1].vector;
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = dot / (na * nb);
            if s > best_sim {
                best_sim = s;
                best = i;
            }
        }
        let (wa, wb) = (tokens[best].merge_count as f64, tokens[best + 1].merge_count as f64);
        let merged: Vec<f64> = tokens[best]
            .vector
            .iter()
            .zip(&tokens[best + 1].vector)
            .map(|(x, y)| (wa * x + wb * y) / (wa + wb))
            .collect();
        bank.merge_ltmb(&mut MeanSummary)?;
        let got = bank.ltmb();
        let ok = got.len() == cap
            && got[best].merge_count as f64 == wa + wb
            && got[best].vector.iter().zip(&merged).all(|(a, b)| (a - b).abs() < 1e-12)
            && (0..cap).filter(|&i| i != best).all(|i| {
                let src = if i < best { &tokens[i] } else { &tokens[i + 1] };
                got[i].vector == src.vector
            });
        if !ok {
            mismatches += 1;
        }
    }
    lines.push(line(
        "merge.brute_force",
        mismatches == 0,
        format!("1000 random banks, {mismatches} mismatches"),
    ));
    // The library cosine must agree with the oracle as well.
    let (a, b) = (random_vec(&mut rng), random_vec(&mut rng));
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let norms = a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt();
    lines.push(line(
        "merge.cosine",
        (cosine(&a, &b) - dot / norms).abs() < 1e-12,
        "library cosine matches direct formula",
    ));

    // FIFO mode against a reference queue.
    let cap = 14;
    let mut bank = MemoryBank::new(BankConfig {
        mode: BankMode::Fifo { capacity: cap },
        ..BankConfig::default()
    });
    let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
    let mut mismatches = 0;
    for t in 0..10_000u64 {
        let v = random_vec(&mut rng);
        bank.append_sensory(v.clone(), t, &mut MeanSummary)?;
        reference.push_back(v);
        if reference.len() > cap {
            reference.pop_front();
        }
        if !bank.tokens().map(|t| &t.vector).eq(reference.iter()) {
            mismatches += 1;
        }
    }
    lines.push(line(
        "fifo.reference_queue",
        mismatches == 0,
        format!("10000 appends, {mismatches} mismatches"),
    ));
    Ok(lines)
}

// --------------------------------------------------------------- diffusion

pub fn diffusion() -> Result<Vec<CheckLine>, FormatError> {
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xd1ff);
    let n = CHUNK_LEN * ACTION_DIM;

    // Reverse process driven by the exact noise recovers A0.
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a: Vec<f64> = gaussian(n, &mut rng);
        for k in (1..=schedule.steps()).rev() {
            let ab = schedule.alpha_bar(k);
            let eps: Vec<f64> = a
                .iter()
                .zip(&a0)
                .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            a = schedule.denoise_step(&a, k, &eps, &mut rng)?;
        }
        worst = a.iter().zip(&a0).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    let mut lines = vec![line(
        "oracle_recovery",
        worst < 1e-3,
        format!("50 chunks, max |A - A0| = {worst:.2e}"),
    )];

    // Untrained zero-initialised head predicts zero noise: loss = E[ε²] = 1.
    let mut params = Params::new();
    let denoiser = Denoiser::new(&mut params, &mut rng);
    let mut total = 0.0;
    let draws = 1000;
    let mut g = Graph::inference();
    for _ in 0..draws {
        g.reset();
        let f_c = g.constant(randn(&[1, TOKEN_DIM], &mut rng));
        let a0 = Tensor::matrix(
            CHUNK_LEN,
            ACTION_DIM,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let l = denoiser.loss(&mut g, &params, &schedule, f_c, &a0, &mut rng)?;
        total += g.value(l).data()[0];
    }
    let mean = total / draws as f64;
    lines.push(line(
        "untrained_loss",
        (mean - 1.0).abs() <= 0.05,
        format!("mean over {draws} draws = {mean:.4}"),
    ));
    Ok(lines)
}

// -------------------------------------------------------------------- envs

pub fn envs_suite() -> Result<Vec<CheckLine>, FormatError> {
    let mut lines = Vec::new();
    for task in TaskId::ALL {
        let detail = match envs::verify_aliasing(task, 200) {
            Ok(r) if r.failures.is_empty() => (true, format!("{} aliased pairs bit-identical", r.pairs_checked)),
            Ok(r) => (
                false,
                format!("{} of {} pairs differ", r.failures.len(), r.pairs_checked),
            ),
            Err(e) => (false, e.to_string()),
        };
        lines.push(line(&format!("aliasing.{}", task.name()), detail.0, detail.1));
    }

    // putback: renders of the 4 slot variants differ early and coincide after the rest point.
    let mut bad = 0;
    for seed in 0..50 {
        let runs: Vec<Vec<Vec<u8>>> = (0..4u8)
            .map(|v| {
                let mut s = envs::reset_variant(TaskId::PutBack, seed, Some(v));
                let mut frames = vec![envs::render(&s).image];
                while s.progress < 4 && !s.done {
                    s = envs::step(&s, envs::expert_action(&s));
                    frames.push(envs::render(&s).image);
                }
                frames
            })
            .collect();
        let differ_at_start = runs.iter().skip(1).all(|r| r[0] != runs[0][0]);
        let end = runs.iter().map(|r| r.len()).min().unwrap_or(0);
        let same_after = runs.iter().all(|r| r.len() == runs[0].len())
            && (envs::PUTBACK_REST_UNTIL..end).all(|t| runs.iter().all(|r| r[t] == runs[0][t]));
        if !(differ_at_start && same_after) {
            bad += 1;
        }
    }
    lines.push(line(
        "putback.slot_invisible",
        bad == 0,
        format!(
            "50 seeds x 4 slots: slot visible at step 0, identical renders from step {} ({bad} failures)",
            envs::PUTBACK_REST_UNTIL
        ),
    ));

    for task in TaskId::ALL {
        let ok = match envs::generate_dataset(task, 200, 7) {
            Ok((eps, stats)) => (eps.iter().all(|e| e.success), stats),
            Err(e) => {
                lines.push(line(&format!("expert.{}", task.name()), false, e.to_string()));
                continue;
            }
        };
        lines.push(line(
            &format!("expert.{}", task.name()),
            ok.0 && ok.1.rejected == 0,
            format!("200 seeds, {} rejected", ok.1.rejected),
        ));
    }

    let mut nondeterministic = 0;
    for task in TaskId::ALL {
        let first = envs::render(&envs::reset(task, 42));
        if (0..100).any(|_| envs::render(&envs::reset(task, 42)) != first) {
            nondeterministic += 1;
        }
    }
    lines.push(line(
        "render.deterministic",
        nondeterministic == 0,
        "100 repeated resets per task render identically",
    ));
    Ok(lines)
}
