//! Streaming training over whole episodes and closed-loop evaluation.
//!
//! Batches are consecutive windows of one episode, processed in order:
//! retrieval and fusion, loss, then storing the detached sensory token. One
//! backward pass and one optimizer step per window; the bank is cleared
//! between episodes.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::diffusion::{ACTION_DIM, CHUNK_LEN};
use crate::encoder::{NUM_PATCHES, TOKEN_DIM};
use crate::envs::{self, episode_seed, EpisodeRecord, TaskId};
use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::params::{ParamId, Params};
use crate::policy::{Capacity, Policy, VariantSpec};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Actions executed from each sampled chunk before re-planning.
pub const EXEC_HORIZON: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub chunk: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub variant: String,
    pub short_capacity: Option<usize>,
    pub long_capacity: Option<usize>,
    pub consolidate_count: Option<usize>,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub eval_trials: usize,
    /// Decay of the weight average used for evaluation and the final policy (0: off).
    pub ema_decay: f64,
    /// Anneal the learning rate to zero along a half cosine over all steps.
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            chunk: CHUNK_LEN,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
            variant: "memoact".into(),
            short_capacity: None,
            long_capacity: None,
            consolidate_count: None,
            eval_every: 0,
            eval_trials: 50,
            ema_decay: 0.999,
            cosine_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.chunk == 0 || self.chunk % 2 != 0 {
            return Err(Error::Config(format!(
                "chunk {} must be a positive even number",
                self.chunk
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} must lie in [0, 1)",
                self.ema_decay
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        VariantSpec::parse(&self.variant)?;
        self.capacity()
            .bank_config(VariantSpec::parse(&self.variant)?.mode)
            .validate()
    }

    pub fn capacity(&self) -> Capacity {
        let d = Capacity::default();
        Capacity {
            short: self.short_capacity.unwrap_or(d.short),
            long: self.long_capacity.unwrap_or(d.long),
            consolidate: self.consolidate_count.unwrap_or(d.consolidate),
        }
    }

    pub fn build_policy<T: Scalar>(&self) -> Result<Policy<T>> {
        self.validate()?;
        Policy::new(VariantSpec::parse(&self.variant)?, self.capacity(), self.seed)
    }
}

/// An episode with frozen features and chunk targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedEpisode<T> {
    pub seed: u64,
    pub patches: Vec<Tensor<T>>,
    pub proprio: Vec<[f32; 6]>,
    pub targets: Vec<Tensor<T>>,
}

impl<T: Scalar> PreparedEpisode<T> {
    pub fn new(policy: &Policy<T>, rec: &EpisodeRecord, chunk: usize) -> Result<Self> {
        let mut patches = Vec::with_capacity(rec.len());
        let mut targets = Vec::with_capacity(rec.len());
        for (t, f) in rec.frames.iter().enumerate() {
            patches.push(policy.patches(f)?);
            let rows = rec.target(t, chunk);
            targets.push(Tensor::matrix(
                chunk,
                ACTION_DIM,
                rows.iter().flatten().map(|&v| c(v as f64)).collect(),
            ));
        }
        Ok(Self {
            seed: rec.seed,
            patches,
            proprio: rec.frames.iter().map(|f| f.proprio).collect(),
            targets,
        })
    }

    /// Uses externally supplied `P² × C` patch features instead of the frozen encoder.
    pub fn with_patches(patches: Vec<Tensor<T>>, rec: &EpisodeRecord, chunk: usize) -> Result<Self> {
        if patches.len() != rec.len() {
            return Err(contract(format!(
                "{} feature frames for {} steps",
                patches.len(),
                rec.len()
            )));
        }
        if let Some(p) = patches.iter().find(|p| p.dims2() != (NUM_PATCHES, TOKEN_DIM)) {
            return Err(contract(format!(
                "patch features {:?}, expected [{NUM_PATCHES}, {TOKEN_DIM}]",
                p.shape()
            )));
        }
        let targets = (0..rec.len())
            .map(|t| {
                let rows = rec.target(t, chunk);
                Tensor::matrix(chunk, ACTION_DIM, rows.iter().flatten().map(|&v| c(v as f64)).collect())
            })
            .collect();
        Ok(Self {
            seed: rec.seed,
            patches,
            proprio: rec.frames.iter().map(|f| f.proprio).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// `[start, end)` windows of length `batch` covering `0..len`.
pub fn batch_windows(len: usize, batch: usize) -> Vec<(usize, usize)> {
    (0..len)
        .step_by(batch.max(1))
        .map(|s| (s, (s + batch).min(len)))
        .collect()
}

/// What happened in one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInfo {
    pub epoch: usize,
    pub episode: usize,
    pub steps: Vec<usize>,
    pub loss: f64,
    /// Bank size when the window started.
    pub bank_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub variant: String,
    pub task: String,
    pub loss_mean: f64,
    pub success_rate: Option<f64>,
    pub subtask_rates: Vec<f64>,
    /// Filled by the caller; excluded from determinism comparisons.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub env_seed: u64,
    pub success: bool,
    pub completed: Vec<bool>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub task: TaskId,
    pub trials: Vec<TrialResult>,
}

impl EvalStats {
    /// Aggregates trials in trial order regardless of completion order.
    pub fn from_trials(task: TaskId, mut trials: Vec<TrialResult>) -> Self {
        trials.sort_by_key(|t| t.trial);
        Self { task, trials }
    }

    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.trials.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.trials.len() as f64
        }
    }

    pub fn subtask_rates(&self) -> Vec<f64> {
        let n = self.task.spec().subtasks.len();
        let mut rates = vec![0.0; n];
        for t in &self.trials {
            for (r, &done) in rates.iter_mut().zip(&t.completed) {
                if done {
                    *r += 1.0;
                }
            }
        }
        let total = self.trials.len().max(1) as f64;
        rates.iter().map(|r| r / total).collect()
    }
}

/// Callbacks for instrumentation, logging and parallel evaluation.
pub trait TrainHooks<T: Scalar> {
    fn on_batch(&mut self, _info: &BatchInfo) {}

    fn on_epoch(&mut self, _row: &mut MetricsRow) -> Result<()> {
        Ok(())
    }

    fn evaluate(&mut self, policy: &Policy<T>, task: TaskId, trials: usize, seed: u64) -> Result<EvalStats> {
        eval_rollout(policy, task, trials, seed)
    }
}

/// Hooks that do nothing beyond the defaults.
pub struct NoHooks;

impl<T: Scalar> TrainHooks<T> for NoHooks {}

/// Trains `policy` on the episodes of one task; returns one row per epoch.
pub fn streaming_train<T: Scalar>(
    policy: &mut Policy<T>,
    task: TaskId,
    episodes: &[PreparedEpisode<T>],
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(contract("training needs at least one episode"));
    }
    let mut adam = Adam::new(config.lr);
    let total_steps = config.epochs
        * episodes
            .iter()
            .map(|e| batch_windows(e.len(), config.batch_size).len())
            .sum::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut g = Graph::new();
    let mut bank = policy.new_bank();
    let mut average = (config.ema_decay > 0.0).then(|| WeightAverage::new(&policy.params, config.ema_decay));
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for &ei in &order {
            let ep = &episodes[ei];
            if ep.is_empty() {
                continue;
            }
            bank.clear();
            for (start, end) in batch_windows(ep.len(), config.batch_size) {
                let bank_len = bank.len();
                g.reset();
                let mut losses = Vec::with_capacity(end - start);
                for t in start..end {
                    let f_o = policy.sense(&mut g, &ep.patches[t], &ep.proprio[t])?;
                    let f_c = policy.condition(&mut g, f_o, &bank)?;
                    let l = policy.denoiser.loss(
                        &mut g,
                        &policy.params,
                        &policy.schedule,
                        f_c,
                        &ep.targets[t],
                        &mut rng,
                    )?;
                    losses.push(l);
                    policy.remember(&mut g, f_o, t as u64, &mut bank)?;
                }
                let stacked = g.concat_rows(&losses)?;
                let loss = g.mean(stacked);
                let value = g.value(loss).data()[0].to_f64();
                if !value.is_finite() {
                    return Err(contract(format!(
                        "non-finite loss at epoch {epoch}, episode {}",
                        ep.seed
                    )));
                }
                g.backward(loss, &mut policy.params)?;
                if config.cosine_lr {
                    let progress = adam.steps() as f64 / total_steps.max(1) as f64;
                    adam.lr = config.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
                }
                adam.step_present(&mut policy.params)?;
                policy.params.zero_grad();
                if let Some(avg) = &mut average {
                    avg.update(&policy.params);
                }
                bank.unbind();
                loss_sum += value * (end - start) as f64;
                loss_count += end - start;
                hooks.on_batch(&BatchInfo {
                    epoch,
                    episode: ei,
                    steps: (start..end).collect(),
                    loss: value,
                    bank_len,
                });
            }
        }
        let last = epoch + 1 == config.epochs;
        let due = if config.eval_every == 0 {
            last
        } else {
            (epoch + 1) % config.eval_every == 0 || last
        };
        if last {
            if let Some(avg) = &mut average {
                avg.swap(&mut policy.params);
            }
        }
        let stats = if due && config.eval_trials > 0 {
            match (&mut average, last) {
                (Some(avg), false) => {
                    avg.swap(&mut policy.params);
                    let stats = hooks.evaluate(policy, task, config.eval_trials, config.seed);
                    avg.swap(&mut policy.params);
                    Some(stats?)
                }
                _ => Some(hooks.evaluate(policy, task, config.eval_trials, config.seed)?),
            }
        } else {
            None
        };
        let mut row = MetricsRow {
            epoch,
            variant: policy.spec.id.clone(),
            task: task.name().into(),
            loss_mean: loss_sum / loss_count.max(1) as f64,
            success_rate: stats.as_ref().map(EvalStats::success_rate),
            subtask_rates: stats.as_ref().map(EvalStats::subtask_rates).unwrap_or_default(),
            wall_clock_s: 0.0,
        };
        hooks.on_epoch(&mut row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Exponential moving average of the trainable weights, with the usual
/// `(1 + n) / (10 + n)` warmup so early updates are not dominated by the init.
struct WeightAverage<T> {
    decay: f64,
    updates: u64,
    shadow: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> WeightAverage<T> {
    fn new(params: &Params<T>, decay: f64) -> Self {
        let shadow = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.value.data().to_vec()))
            .collect();
        Self {
            decay,
            updates: 0,
            shadow,
        }
    }

    fn update(&mut self, params: &Params<T>) {
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        let (keep, take) = (c::<T>(d), c::<T>(1.0 - d));
        for (id, s) in &mut self.shadow {
            for (a, &v) in s.iter_mut().zip(params.value(*id).data()) {
                *a = keep * *a + take * v;
            }
        }
        self.updates += 1;
    }

    /// Exchanges the averaged and the live weights.
    fn swap(&mut self, params: &mut Params<T>) {
        for (id, s) in &mut self.shadow {
            params.value_mut(*id).data_mut().swap_with_slice(s);
        }
    }
}

const EVAL_SALT: u64 = 0x6576_616c_7365_6564;

/// Environment seed of evaluation trial `trial`; disjoint stream from training seeds.
pub fn eval_env_seed(seed: u64, trial: usize) -> u64 {
    episode_seed(seed ^ EVAL_SALT, trial as u64)
}

/// One closed-loop episode with a fresh bank.
pub fn rollout_trial<T: Scalar>(policy: &Policy<T>, task: TaskId, seed: u64, trial: usize) -> Result<TrialResult> {
    let env_seed = eval_env_seed(seed, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed ^ 0x726f_6c6c);
    let mut state = envs::reset(task, env_seed);
    let mut bank = policy.new_bank();
    let mut g = Graph::inference();
    let mut queue: VecDeque<[f32; ACTION_DIM]> = VecDeque::new();
    let mut t = 0u64;
    while !state.done {
        let frame = envs::render(&state);
        let patches = policy.patches(&frame)?;
        g.reset();
        let f_o = policy.sense(&mut g, &patches, &frame.proprio)?;
        if queue.is_empty() {
            let f_c = policy.condition(&mut g, f_o, &bank)?;
            let f_c = g.value(f_c).clone();
            let chunk = policy.act(&f_c, CHUNK_LEN, &mut rng)?;
            queue.extend(chunk.into_iter().take(EXEC_HORIZON));
        }
        policy.remember(&mut g, f_o, t, &mut bank)?;
        let action = queue.pop_front().unwrap_or([0.0, 0.0, -1.0]);
        state = envs::step(&state, action);
        t += 1;
    }
    let report = envs::check_success(&state.trace, task);
    Ok(TrialResult {
        trial,
        env_seed,
        success: report.success,
        completed: report.completed,
        steps: state.step,
    })
}

/// Sequential evaluation over `n_trials` trials; the seed list is shared by all variants.
pub fn eval_rollout<T: Scalar>(policy: &Policy<T>, task: TaskId, n_trials: usize, seed: u64) -> Result<EvalStats> {
    let trials = (0..n_trials)
        .map(|i| rollout_trial(policy, task, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalStats::from_trials(task, trials))
}
