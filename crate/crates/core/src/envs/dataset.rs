use alloc::format;
use alloc::vec::Vec;

use super::scene::{check_success, render, reset, step, TaskId};
use super::{expert_action, MAX_EPISODE_LEN};
use crate::diffusion::ACTION_DIM;
use crate::encoder::ObservationFrame;
use crate::error::{contract, Error, Result};

/// One expert demonstration: `frames[t]` is observed, then `actions[t]` is taken.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task: TaskId,
    pub seed: u64,
    pub frames: Vec<ObservationFrame>,
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Supervision for step `t`; see [`chunk_target`].
    pub fn target(&self, t: usize, m: usize) -> Vec<[f32; ACTION_DIM]> {
        chunk_target(&self.actions, t, m)
    }
}

/// `actions[t..t+m]`, repeating the final action past the end and clipping to `[-1, 1]`.
pub fn chunk_target(actions: &[[f32; ACTION_DIM]], t: usize, m: usize) -> Vec<[f32; ACTION_DIM]> {
    let Some(last) = actions.len().checked_sub(1) else {
        return Vec::new();
    };
    (0..m)
        .map(|i| actions[(t + i).min(last)].map(|v| v.clamp(-1.0, 1.0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerationStats {
    pub accepted: usize,
    pub rejected: usize,
}

impl GenerationStats {
    pub fn failure_rate(&self) -> f64 {
        let total = self.accepted + self.rejected;
        if total == 0 {
            0.0
        } else {
            self.rejected as f64 / total as f64
        }
    }
}

/// Seed of the `i`-th candidate episode under a base seed.
pub fn episode_seed(base: u64, i: u64) -> u64 {
    // splitmix64 finaliser keeps neighbouring bases from sharing episodes
    let mut z = base.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rolls out the privileged expert once.
pub fn record_expert(task: TaskId, seed: u64) -> EpisodeRecord {
    let mut s = reset(task, seed);
    let mut frames = Vec::new();
    let mut actions = Vec::new();
    while !s.done && frames.len() < MAX_EPISODE_LEN {
        frames.push(render(&s));
        let a = expert_action(&s);
        actions.push(a);
        s = step(&s, a);
    }
    EpisodeRecord {
        task,
        seed,
        frames,
        actions,
        success: check_success(&s.trace, task).success,
    }
}

/// `n` successful expert episodes. Failed rollouts are replaced by the next
/// candidate seed; more than 5% failures means the task is broken.
pub fn generate_dataset(task: TaskId, n: usize, seed: u64) -> Result<(Vec<EpisodeRecord>, GenerationStats)> {
    if n == 0 {
        return Err(contract("generate_dataset needs n >= 1"));
    }
    let mut stats = GenerationStats::default();
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let rec = record_expert(task, episode_seed(seed, i));
        i += 1;
        if rec.success {
            stats.accepted += 1;
            out.push(rec);
        } else {
            stats.rejected += 1;
            if stats.rejected * 20 > n {
                return Err(Error::Generation(format!(
                    "{}: expert failed {} of {} rollouts",
                    task.name(),
                    stats.rejected,
                    stats.accepted + stats.rejected
                )));
            }
        }
    }
    Ok((out, stats))
}
