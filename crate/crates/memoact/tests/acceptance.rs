//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Property criteria (1-4, 8) fail the process. The desk-scale
//! reproductions (5-7) train a grid of policies whose results are cached
//! in `MEMOACT_ACCEPTANCE_CELLS` (default: cargo's per-target tmp dir), so
//! only the first run pays for training. Their outcome is reported but,
//! being empirical, only fails the process under `MEMOACT_ACCEPTANCE_STRICT=1`.
//! `MEMOACT_ACCEPTANCE_SKIP_GRID=1` skips them entirely.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use memoact::checkpoint::{load_policy, save_policy};
use memoact::experiment::{eval_parallel, train_policy, RunHooks, Runner};
use memoact::metrics::MetricsRecord;
use memoact::verify::{self, CheckLine};
use memoact::ExperimentConfig;
use memoact_core::envs::{generate_dataset, TaskId};
use memoact_core::policy::Capacity;
use memoact_core::trainer::TrainConfig;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(name: &str, o: &Outcome) {
    println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn suite(lines: Vec<CheckLine>, started: Instant, budget: Duration) -> Outcome {
    let failed: Vec<String> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| format!("{} ({})", l.name, l.detail))
        .collect();
    let elapsed = started.elapsed();
    let in_time = elapsed <= budget;
    Outcome {
        passed: failed.is_empty() && in_time,
        detail: format!(
            "{} checks, {} failed{}; {:.1}s (budget {}s)",
            lines.len(),
            failed.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(": {}", failed.join("; "))
            },
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    match verify::numerics(verify::GRAD_SEEDS) {
        Ok(lines) => suite(lines, t, Duration::from_secs(120)),
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn memory_oracles() -> Outcome {
    let t = Instant::now();
    match verify::memory() {
        Ok(lines) => suite(lines, t, Duration::from_secs(60)),
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn diffusion_identities() -> Outcome {
    let t = Instant::now();
    match verify::diffusion() {
        Ok(lines) => suite(lines, t, Duration::from_secs(60)),
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn aliasing() -> Outcome {
    let t = Instant::now();
    match verify::envs_suite() {
        // No runtime bound is stated for this one.
        Ok(lines) => suite(lines, t, Duration::from_secs(3600)),
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Repeated runs match bit for bit, and a reloaded checkpoint evaluates identically.
fn determinism() -> Outcome {
    let run = || -> Result<Outcome, Box<dyn std::error::Error>> {
        let config = TrainConfig {
            epochs: 2,
            eval_every: 1,
            eval_trials: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let task = TaskId::PutBack;
        let (episodes, _) = generate_dataset(task, 3, 17)?;
        let train = || {
            let mut hooks = RunHooks {
                started: Instant::now(),
                seed: config.seed,
                writer: None,
                echo: false,
            };
            train_policy(&config, task, &episodes, None, &mut hooks)
        };
        let (policy, rows_a) = train()?;
        let (_, rows_b) = train()?;
        let records = |rows: &[memoact_core::trainer::MetricsRow]| {
            rows.iter()
                .map(|r| MetricsRecord::from_row(r, config.seed))
                .collect::<Vec<_>>()
        };
        let (a, b) = (records(&rows_a), records(&rows_b));
        let repeat_ok = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_outcome(y));

        let dir = tempfile::tempdir()?;
        let path = dir.path().join("policy.memo");
        save_policy(&path, &policy, &config)?;
        let (loaded, _) = load_policy(&path)?;
        let before = eval_parallel(&policy, task, 8, config.seed)?;
        let after = eval_parallel(&loaded, task, 8, config.seed)?;
        let last = rows_a.last().and_then(|r| r.success_rate);
        let reload = eval_parallel(&loaded, task, config.eval_trials, config.seed)?;
        let reload_ok = before == after && last == Some(reload.success_rate());
        Ok(Outcome {
            passed: repeat_ok && reload_ok,
            detail: format!(
                "{} metrics rows identical across runs: {repeat_ok}; reloaded checkpoint reproduces eval: {reload_ok}",
                a.len()
            ),
        })
    };
    run().unwrap_or_else(|e| Outcome {
        passed: false,
        detail: e.to_string(),
    })
}

// ------------------------------------------------------------ training grid

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pct(v: &[f64]) -> String {
    let each: Vec<String> = v.iter().map(|x| format!("{:.0}", 100.0 * x)).collect();
    format!("{:.1}% [{}]", 100.0 * mean(v), each.join(" "))
}

struct Grid {
    runner: Runner,
}

impl Grid {
    fn rates(
        &self,
        variant: &str,
        task: TaskId,
        cap: Option<Capacity>,
        seeds: &[u64],
    ) -> Result<Vec<f64>, memoact::FormatError> {
        let specs: Vec<_> = seeds.iter().map(|&s| self.runner.cell(variant, task, s, cap)).collect();
        Ok(self.runner.run_cells(&specs)?.iter().map(|r| r.success_rate).collect())
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];
const EXTRA_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// `weak ≤ weak_max` and `strong ≥ strong_min` (percent), re-judged on
/// 5-seed means when the 3-seed comparison misses a threshold.
fn thresholds(
    grid: &Grid,
    task: TaskId,
    weak: &str,
    weak_max: f64,
    strong_min: f64,
) -> Result<Outcome, memoact::FormatError> {
    let judge = |seeds: &[u64]| -> Result<(bool, String), memoact::FormatError> {
        let w = grid.rates(weak, task, None, seeds)?;
        let s = grid.rates("memoact", task, None, seeds)?;
        let ok = 100.0 * mean(&w) <= weak_max && 100.0 * mean(&s) >= strong_min;
        Ok((
            ok,
            format!(
                "{}: {weak} {} (≤ {weak_max}), memoact {} (≥ {strong_min})",
                task.name(),
                pct(&w),
                pct(&s)
            ),
        ))
    };
    let (ok, detail) = judge(&SEEDS)?;
    if ok {
        return Ok(Outcome { passed: true, detail });
    }
    let (ok5, detail5) = judge(&EXTRA_SEEDS)?;
    Ok(Outcome {
        passed: ok5,
        detail: format!("{detail}; 5-seed re-run {detail5}"),
    })
}

fn margin(
    grid: &Grid,
    task: TaskId,
    (strong, strong_cap): (&str, Option<Capacity>),
    (weak, weak_cap): (&str, Option<Capacity>),
    min_points: f64,
    labels: (&str, &str),
) -> Result<Outcome, memoact::FormatError> {
    let s = grid.rates(strong, task, strong_cap, &SEEDS)?;
    let w = grid.rates(weak, task, weak_cap, &SEEDS)?;
    let gap = 100.0 * (mean(&s) - mean(&w));
    Ok(Outcome {
        passed: gap >= min_points,
        detail: format!(
            "{}: {} {} vs {} {}, gap {gap:+.1} (≥ {min_points})",
            task.name(),
            labels.0,
            pct(&s),
            labels.1,
            pct(&w)
        ),
    })
}

fn cap(short: usize, long: usize) -> Option<Capacity> {
    Some(Capacity {
        short,
        long,
        ..Capacity::default()
    })
}

fn combine(parts: Vec<Outcome>) -> Outcome {
    Outcome {
        passed: parts.iter().all(|o| o.passed),
        detail: parts.iter().map(|o| o.detail.as_str()).collect::<Vec<_>>().join(" | "),
    }
}

fn grid_criteria() -> Result<Vec<(&'static str, Outcome)>, memoact::FormatError> {
    let cells = std::env::var_os("MEMOACT_ACCEPTANCE_CELLS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cells"));
    let config = ExperimentConfig::default();
    assert_eq!(
        (config.data.demos, config.train.epochs, config.train.eval_trials),
        (200, 30, 50)
    );
    let mut runner = Runner::new(config, cells.clone());
    runner.echo = true;
    let grid = Grid { runner };
    eprintln!("training grid cells cached in {}", cells.display());
    let started = Instant::now();

    let table1 = combine(vec![
        thresholds(&grid, TaskId::SeqTap, "markovian", 60.0, 85.0)?,
        thresholds(&grid, TaskId::PutBack, "samp", 50.0, 80.0)?,
        {
            let full = grid.rates("memoact", TaskId::SwapTrack, None, &SEEDS)?;
            let merge = grid.rates("mvmp", TaskId::SwapTrack, None, &SEEDS)?;
            let gap = 100.0 * (mean(&full) - mean(&merge));
            Outcome {
                passed: gap >= 10.0,
                detail: format!(
                    "swaptrack: mvmp {} ≤ memoact {} - 10 (gap {gap:+.1})",
                    pct(&merge),
                    pct(&full)
                ),
            }
        },
    ]);

    let default_cap = grid.runner.config.train.to_core().capacity();
    let long_term = combine(vec![
        margin(
            &grid,
            TaskId::PutBack,
            ("memoact", cap(6, 8)),
            ("memoact", cap(6, 0)),
            20.0,
            ("T_k=8", "T_k=0"),
        )?,
        margin(
            &grid,
            TaskId::SeqTap,
            ("memoact", cap(6, default_cap.long)),
            ("memoact", cap(2, default_cap.long)),
            15.0,
            ("T_s=6", "T_s=2"),
        )?,
    ]);

    let ablations = combine(
        ["no-tpe", "consol-add", "gate-add"]
            .into_iter()
            .map(|v| margin(&grid, TaskId::SeqTap, ("memoact", None), (v, None), 0.0, ("memoact", v)))
            .collect::<Result<Vec<_>, _>>()?,
    );

    eprintln!(
        "training grid done in {:.0}s (cached cells cost nothing)",
        started.elapsed().as_secs_f64()
    );
    Ok(vec![
        ("5 variant ordering (table1)", table1),
        ("6 long-/short-term capacity (fig5)", long_term),
        ("7 design ablations (table4)", ablations),
    ])
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut hard_failures = 0;
    for (name, run) in [
        ("1 finite-difference gradients", gradients as fn() -> Outcome),
        ("2 memory-bank oracles", memory_oracles),
        ("3 diffusion identities", diffusion_identities),
        ("4 aliasing integrity", aliasing),
        ("8 determinism and persistence", determinism),
    ] {
        let o = run();
        report(name, &o);
        hard_failures += usize::from(!o.passed);
    }

    let mut soft_failures = 0;
    if flag("MEMOACT_ACCEPTANCE_SKIP_GRID") {
        println!("[SKIP] 5-7 training grid: MEMOACT_ACCEPTANCE_SKIP_GRID=1");
    } else {
        match grid_criteria() {
            Ok(results) => {
                for (name, o) in results {
                    report(name, &o);
                    soft_failures += usize::from(!o.passed);
                }
            }
            Err(e) => {
                println!("[FAIL] 5-7 training grid: {e}");
                hard_failures += 1;
            }
        }
    }
    if flag("MEMOACT_ACCEPTANCE_STRICT") {
        hard_failures += soft_failures;
    }
    println!("acceptance: {hard_failures} blocking failure(s), {soft_failures} empirical criterion failure(s)");
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
