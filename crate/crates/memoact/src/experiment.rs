//! Train/evaluate cells, ablation suites with cell-level resume, report tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use memoact_core::envs::{generate_dataset, EpisodeRecord, TaskId};
use memoact_core::policy::{Capacity, Policy};
use memoact_core::trainer::{
    rollout_trial, streaming_train, EvalStats, MetricsRow, PreparedEpisode, TrainConfig, TrainHooks,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrainSection};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::FormatError;

/// Evaluation with trials spread over the rayon pool; results are sorted by trial id.
pub fn eval_parallel(policy: &Policy<f32>, task: TaskId, trials: usize, seed: u64) -> memoact_core::Result<EvalStats> {
    let results = (0..trials)
        .into_par_iter()
        .map(|i| rollout_trial(policy, task, seed, i))
        .collect::<memoact_core::Result<Vec<_>>>()?;
    Ok(EvalStats::from_trials(task, results))
}

/// Hooks that evaluate in parallel and stream metrics rows to a file.
pub struct RunHooks {
    pub started: Instant,
    pub seed: u64,
    pub writer: Option<MetricsWriter>,
    pub echo: bool,
}

impl TrainHooks<f32> for RunHooks {
    fn on_epoch(&mut self, row: &mut MetricsRow) -> memoact_core::Result<()> {
        row.wall_clock_s = self.started.elapsed().as_secs_f64();
        if self.echo {
            eprintln!(
                "  epoch {:>3}  loss {:.5}{}",
                row.epoch,
                row.loss_mean,
                row.success_rate
                    .map(|s| format!("  success {:.1}%", 100.0 * s))
                    .unwrap_or_default()
            );
        }
        if let Some(w) = &mut self.writer {
            w.write(&MetricsRecord::from_row(row, self.seed))
                .map_err(|e| memoact_core::Error::Contract(e.to_string()))?;
        }
        Ok(())
    }

    fn evaluate(
        &mut self,
        policy: &Policy<f32>,
        task: TaskId,
        trials: usize,
        seed: u64,
    ) -> memoact_core::Result<EvalStats> {
        eval_parallel(policy, task, trials, seed)
    }
}

/// Trains one policy on `episodes` and returns it with its metrics.
pub fn train_policy(
    config: &TrainConfig,
    task: TaskId,
    episodes: &[EpisodeRecord],
    features: Option<&[Vec<memoact_core::Tensor<f32>>]>,
    hooks: &mut RunHooks,
) -> Result<(Policy<f32>, Vec<MetricsRow>), FormatError> {
    let mut policy: Policy<f32> = config.build_policy()?;
    let prepared = episodes
        .iter()
        .enumerate()
        .map(|(i, e)| match features {
            Some(f) => {
                let patches = f
                    .get(i)
                    .ok_or_else(|| FormatError::Invalid(format!("no injected features for episode {i}")))?;
                Ok(PreparedEpisode::with_patches(patches.clone(), e, config.chunk)?)
            }
            None => Ok(PreparedEpisode::new(&policy, e, config.chunk)?),
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    let rows = streaming_train(&mut policy, task, &prepared, config, hooks)?;
    Ok((policy, rows))
}

/// One grid cell: a variant, task, training seed and capacity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSpec {
    pub variant: String,
    pub task: String,
    pub seed: u64,
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub consolidate_count: usize,
}

impl CellSpec {
    pub fn key(&self) -> String {
        format!(
            "{}__{}__s{}__ts{}_tk{}_n{}",
            self.variant, self.task, self.seed, self.short_capacity, self.long_capacity, self.consolidate_count
        )
    }

    pub fn capacity(&self) -> Capacity {
        Capacity {
            short: self.short_capacity,
            long: self.long_capacity,
            consolidate: self.consolidate_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    /// Resolved settings the cell was run with; a mismatch invalidates the cache.
    pub fingerprint: String,
    pub success_rate: f64,
    pub successes: usize,
    pub trials: usize,
    pub subtask_rates: Vec<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Runs cells against a cache directory; completed cells are never rerun.
pub struct Runner {
    pub config: ExperimentConfig,
    pub cell_dir: PathBuf,
    pub echo: bool,
    datasets: Mutex<HashMap<TaskId, Arc<Vec<EpisodeRecord>>>>,
}

impl Runner {
    pub fn new(config: ExperimentConfig, cell_dir: PathBuf) -> Self {
        Self {
            config,
            cell_dir,
            echo: false,
            datasets: Mutex::new(HashMap::new()),
        }
    }

    pub fn cell(&self, variant: &str, task: TaskId, seed: u64, capacity: Option<Capacity>) -> CellSpec {
        let cap = capacity.unwrap_or_else(|| self.config.train.to_core().capacity());
        CellSpec {
            variant: variant.into(),
            task: task.name().into(),
            seed,
            short_capacity: cap.short,
            long_capacity: cap.long,
            consolidate_count: cap.consolidate,
        }
    }

    fn train_config(&self, spec: &CellSpec) -> TrainConfig {
        TrainConfig {
            variant: spec.variant.clone(),
            seed: spec.seed,
            short_capacity: Some(spec.short_capacity),
            long_capacity: Some(spec.long_capacity),
            consolidate_count: Some(spec.consolidate_count),
            // Cells are evaluated once, after the last epoch.
            eval_every: 0,
            ..self.config.train.to_core()
        }
    }

    fn fingerprint(&self, spec: &CellSpec) -> String {
        let t = TrainSection::from_core(&self.train_config(spec));
        format!(
            "{}|demos={}|data_seed={}",
            serde_json::to_string(&t).expect("serializable"),
            self.config.data.demos,
            self.config.data.seed
        )
    }

    pub fn dataset(&self, task: TaskId) -> Result<Arc<Vec<EpisodeRecord>>, FormatError> {
        if let Some(d) = self.datasets.lock().expect("dataset cache").get(&task) {
            return Ok(d.clone());
        }
        let (eps, _) = generate_dataset(task, self.config.data.demos, self.config.data.seed)?;
        let eps = Arc::new(eps);
        self.datasets.lock().expect("dataset cache").insert(task, eps.clone());
        Ok(eps)
    }

    fn result_path(&self, spec: &CellSpec) -> PathBuf {
        self.cell_dir.join(format!("{}.json", spec.key()))
    }

    /// A finished result for `spec`, if one is cached with the current settings.
    pub fn cached(&self, spec: &CellSpec) -> Option<CellResult> {
        let text = fs::read_to_string(self.result_path(spec)).ok()?;
        let r: CellResult = serde_json::from_str(&text).ok()?;
        (r.spec == *spec && r.fingerprint == self.fingerprint(spec)).then_some(r)
    }

    pub fn run_cell(&self, spec: &CellSpec) -> Result<CellResult, FormatError> {
        if let Some(r) = self.cached(spec) {
            return Ok(r);
        }
        fs::create_dir_all(&self.cell_dir)?;
        let task =
            TaskId::parse(&spec.task).ok_or_else(|| FormatError::Config(format!("unknown task {}", spec.task)))?;
        let config = self.train_config(spec);
        let episodes = self.dataset(task)?;
        let started = Instant::now();
        if self.echo {
            eprintln!("cell {} ...", spec.key());
        }
        let metrics_path = self.cell_dir.join(format!("{}.metrics.jsonl", spec.key()));
        let mut hooks = RunHooks {
            started,
            seed: spec.seed,
            writer: Some(MetricsWriter::create(&metrics_path)?),
            echo: false,
        };
        let (_, rows) = train_policy(&config, task, &episodes, None, &mut hooks)?;
        let last = rows
            .last()
            .ok_or_else(|| FormatError::Config("epochs must be at least 1".into()))?;
        let rate = last.success_rate.unwrap_or(0.0);
        let result = CellResult {
            spec: spec.clone(),
            fingerprint: self.fingerprint(spec),
            success_rate: rate,
            successes: (rate * config.eval_trials as f64).round() as usize,
            trials: config.eval_trials,
            subtask_rates: last.subtask_rates.clone(),
            final_loss: last.loss_mean,
            seconds: started.elapsed().as_secs_f64(),
        };
        let tmp = self.cell_dir.join(format!("{}.json.tmp", spec.key()));
        fs::write(&tmp, serde_json::to_string_pretty(&result)?)?;
        fs::rename(&tmp, self.result_path(spec))?;
        if self.echo {
            eprintln!(
                "cell {}: success {:.1}% ({:.0}s)",
                spec.key(),
                100.0 * result.success_rate,
                result.seconds
            );
        }
        Ok(result)
    }

    /// Runs all cells (in parallel when the pool has threads), in input order.
    pub fn run_cells(&self, specs: &[CellSpec]) -> Result<Vec<CellResult>, FormatError> {
        specs.par_iter().map(|s| self.run_cell(s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Table1,
    Table4,
    Fig5,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "table1" => Some(Suite::Table1),
            "table4" => Some(Suite::Table4),
            "fig5" => Some(Suite::Fig5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Table4 => "table4",
            Suite::Fig5 => "fig5",
        }
    }

    /// `(row label, variant, capacity override)` in report order.
    pub fn rows(self) -> Vec<(String, &'static str, Option<Capacity>)> {
        let cap = |short, long| {
            Some(Capacity {
                short,
                long,
                ..Capacity::default()
            })
        };
        match self {
            Suite::Table1 => vec![
                ("Markovian".into(), "markovian", None),
                ("SAMP (FIFO)".into(), "samp", None),
                ("MVMP (merge)".into(), "mvmp", None),
                ("MemoAct".into(), "memoact", None),
            ],
            Suite::Table4 => vec![
                ("MemoAct".into(), "memoact", None),
                ("w/o TPE".into(), "no-tpe", None),
                ("Consol. Temp. Enc. -> Add".into(), "consol-add", None),
                ("Gate -> Add".into(), "gate-add", None),
            ],
            Suite::Fig5 => vec![
                ("T_s=6, T_k=0".into(), "memoact", cap(6, 0)),
                ("T_s=6, T_k=8".into(), "memoact", cap(6, 8)),
                ("T_s=6, T_k=12".into(), "memoact", cap(6, 12)),
                ("T_s=2, T_k=8".into(), "memoact", cap(2, 8)),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Per task: success rates of every seed.
    pub per_task: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub tasks: Vec<TaskId>,
    pub rows: Vec<ReportRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl Report {
    pub fn text(&self) -> String {
        let mut header = vec![String::from("Method")];
        header.extend(self.tasks.iter().map(|t| t.name().to_string()));
        header.push("Avg".into());
        let mut lines = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.label.clone()];
            for v in &r.per_task {
                cells.push(format!("{:.1} ± {:.1}", 100.0 * mean(v), 100.0 * std(v)));
            }
            let avg = mean(&r.per_task.iter().map(|v| mean(v)).collect::<Vec<_>>());
            cells.push(format!("{:.1}", 100.0 * avg));
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{} (success %, mean ± std over seeds)\n", self.suite.name());
        for (i, l) in lines.iter().enumerate() {
            let row: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", row.join("  "));
            if i == 0 {
                let _ = writeln!(
                    out,
                    "{}",
                    "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
                );
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("row,task,seeds,mean,std\n");
        for r in &self.rows {
            for (t, v) in self.tasks.iter().zip(&r.per_task) {
                let _ = writeln!(
                    out,
                    "\"{}\",{},{},{:.6},{:.6}",
                    r.label,
                    t.name(),
                    v.len(),
                    mean(v),
                    std(v)
                );
            }
        }
        out
    }
}

/// Runs (or resumes) a suite over the configured tasks and seeds.
pub fn run_suite(runner: &Runner, suite: Suite) -> Result<Report, FormatError> {
    let tasks = runner.config.task_ids()?;
    let rows = suite.rows();
    let mut specs = Vec::new();
    for (_, variant, cap) in &rows {
        for &task in &tasks {
            for &seed in &runner.config.seeds {
                specs.push(runner.cell(variant, task, seed, *cap));
            }
        }
    }
    let results = runner.run_cells(&specs)?;
    let by_key: HashMap<String, &CellResult> = results.iter().map(|r| (r.spec.key(), r)).collect();
    let report_rows = rows
        .iter()
        .map(|(label, variant, cap)| ReportRow {
            label: label.clone(),
            per_task: tasks
                .iter()
                .map(|&task| {
                    runner
                        .config
                        .seeds
                        .iter()
                        .map(|&seed| by_key[&runner.cell(variant, task, seed, *cap).key()].success_rate)
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(Report {
        suite,
        tasks,
        rows: report_rows,
    })
}

/// Writes `<suite>.txt` and `<suite>.csv` into `dir`.
pub fn write_report(dir: &Path, report: &Report) -> Result<(), FormatError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{}.txt", report.suite.name())), report.text())?;
    fs::write(dir.join(format!("{}.csv", report.suite.name())), report.csv())?;
    Ok(())
}
