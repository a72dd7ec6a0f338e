use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use memoact::checkpoint::{load_policy, save_policy};
use memoact::dataset::write_dataset;
use memoact::experiment::{eval_parallel, run_suite, train_policy, write_report, RunHooks, Runner, Suite};
use memoact::metrics::{MetricsRecord, MetricsWriter};
use memoact::{verify, ExperimentConfig};
use memoact_core::envs::{generate_dataset, TaskId};

#[derive(Parser)]
#[command(
    name = "memoact",
    version,
    about = "Hierarchical-memory diffusion policy on perceptual-aliasing tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations to episode files plus a manifest.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streaming training on every task of the config; writes checkpoints and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics file for the result row (default: next to the checkpoint).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Variant grid over all tasks and seeds; resumes from finished cells.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle and invariant suites; nonzero exit on any failure.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Print the default configuration.
    Defaults,
}

/// `--out`, else `$MEMOACT_OUT`, else the config's `output_dir`.
fn output_root(out: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    out.or_else(|| std::env::var_os("MEMOACT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| config.output_dir.clone())
}

fn load_config(path: Option<&Path>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    config.output_dir = output_root(out, &config);
    config.validate()?;
    eprintln!("# resolved config\n{}", config.to_toml());
    Ok(config)
}

fn parse_task(name: &str) -> Result<TaskId> {
    TaskId::parse(name).ok_or_else(|| {
        anyhow!(
            "unknown task {name:?}; expected one of {}",
            TaskId::ALL.map(|t| t.name()).join(", ")
        )
    })
}

fn gen_data(task: &str, n: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let task = parse_task(task)?;
    let root = output_root(out, &ExperimentConfig::default());
    eprintln!(
        "# gen-data task={} n={n} seed={seed} out={}",
        task.name(),
        root.display()
    );
    let (episodes, stats) = generate_dataset(task, n, seed)?;
    write_dataset(&root, &episodes)?;
    let mean_len = episodes.iter().map(|e| e.len()).sum::<usize>() as f64 / n as f64;
    println!(
        "{}: {} accepted, {} rejected (expert failure rate {:.2}%), mean length {:.1}",
        task.name(),
        stats.accepted,
        stats.rejected,
        100.0 * stats.failure_rate(),
        mean_len
    );
    Ok(())
}

fn train(config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config.as_deref(), out)?;
    let train = config.train.to_core();
    let seed = config.seeds[0];
    let train = memoact_core::trainer::TrainConfig { seed, ..train };
    for task in config.task_ids()? {
        let dir = config.output_dir.join(task.name());
        std::fs::create_dir_all(&dir)?;
        let (episodes, _) = generate_dataset(task, config.data.demos, config.data.seed)?;
        eprintln!(
            "training {} on {} ({} demos)",
            train.variant,
            task.name(),
            episodes.len()
        );
        let mut hooks = RunHooks {
            started: Instant::now(),
            seed,
            writer: Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?),
            echo: true,
        };
        let (policy, rows) = train_policy(&train, task, &episodes, None, &mut hooks)?;
        let checkpoint = dir.join("policy.memo");
        save_policy(&checkpoint, &policy, &train)?;
        let last = rows.last().ok_or_else(|| anyhow!("no epochs were run"))?;
        println!(
            "{}: final loss {:.5}{} -> {}",
            task.name(),
            last.loss_mean,
            last.success_rate
                .map(|s| format!(", success {:.1}%", 100.0 * s))
                .unwrap_or_default(),
            checkpoint.display()
        );
    }
    Ok(())
}

fn eval(checkpoint: &Path, task: &str, trials: usize, seed: u64, metrics: Option<PathBuf>) -> Result<()> {
    let task = parse_task(task)?;
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let (policy, config) = load_policy(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    eprintln!(
        "# eval checkpoint={} variant={} task={} trials={trials} seed={seed}",
        checkpoint.display(),
        config.variant,
        task.name()
    );
    let started = Instant::now();
    let stats = eval_parallel(&policy, task, trials, seed)?;
    println!(
        "{} / {}: success {}/{} = {:.1}%",
        config.variant,
        task.name(),
        stats.successes(),
        trials,
        100.0 * stats.success_rate()
    );
    let names = task.spec().subtasks;
    for (name, rate) in names.iter().zip(stats.subtask_rates()) {
        println!("  subtask {name:<12} {:.1}%", 100.0 * rate);
    }
    let mut bitmaps: BTreeMap<String, usize> = BTreeMap::new();
    for t in &stats.trials {
        let bits: String = t.completed.iter().map(|&b| if b { '1' } else { '0' }).collect();
        *bitmaps.entry(bits).or_default() += 1;
    }
    println!("  completion bitmaps:");
    for (bits, n) in bitmaps.iter().rev() {
        println!("    {bits}  {n}");
    }
    let path = metrics.unwrap_or_else(|| checkpoint.with_extension("eval.jsonl"));
    MetricsWriter::append(&path)?.write(&MetricsRecord {
        epoch: 0,
        variant: config.variant.clone(),
        task: task.name().into(),
        seed,
        loss_mean: None,
        success_rate: Some(stats.success_rate()),
        subtask_rates: stats.subtask_rates(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })?;
    Ok(())
}

fn ablate(suite: &str, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let suite =
        Suite::parse(suite).ok_or_else(|| anyhow!("unknown suite {suite:?}; expected table1, table4 or fig5"))?;
    let config = load_config(config.as_deref(), out)?;
    let root = config.output_dir.clone();
    let mut runner = Runner::new(config, root.join("cells"));
    runner.echo = true;
    let report = run_suite(&runner, suite)?;
    write_report(&root.join("reports"), &report)?;
    print!("{}", report.text());
    Ok(())
}

fn run_verify(suite: &str) -> Result<bool> {
    let suites: Vec<&str> = if suite == "all" {
        verify::SUITES.to_vec()
    } else {
        vec![suite]
    };
    let mut ok = true;
    for s in suites {
        let report = verify::run(s)?;
        print!("{}", report.text());
        ok &= report.passed();
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { task, n, seed, out } => gen_data(&task, n, seed, out),
        Command::Train { config, out } => train(config, out),
        Command::Eval {
            checkpoint,
            task,
            trials,
            seed,
            metrics,
        } => eval(&checkpoint, &task, trials, seed, metrics),
        Command::Ablate { suite, config, out } => ablate(&suite, config, out),
        Command::Verify { suite } => match run_verify(&suite) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
