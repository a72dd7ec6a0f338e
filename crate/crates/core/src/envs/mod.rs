//! "aliasworld": small grid tasks whose observations repeat across distinct
//! task states, so that the correct action depends on history.
//!
//! The world is a 16×16 grid of 2×2-pixel cells rendered into a 32×32 RGB
//! image. Cell row 0 is reserved for a progress bar. Actions are
//! `(dx, dy, tap)` in `[-1, 1]`; moves are quantised to at most
//! [`MAX_MOVE`] cells per axis and a tap (`tap > 0.5`) acts on the nearest
//! object within [`REACH`] cells without moving.

mod dataset;
mod expert;
mod scene;

pub use dataset::{chunk_target, episode_seed, generate_dataset, record_expert, EpisodeRecord, GenerationStats};
pub use expert::expert_action;
pub use scene::{
    check_success, render, reset, reset_variant, step, verify_aliasing, AliasReport, Cell, SceneObject, SceneState,
    SuccessReport, TaskId, TaskSpec, TraceEvent, ViolationKind,
};

/// Grid side in cells.
pub const GRID: i32 = 16;
/// Largest move per axis per step, in cells.
pub const MAX_MOVE: i32 = 1;
/// Taps, placements and pad holds act within this Chebyshev distance.
pub const REACH: i32 = 2;
/// Step budget per episode.
pub const MAX_EPISODE_LEN: usize = 120;
/// Consecutive still steps that complete the seqtap stop subtask.
pub const STOP_HOLD: u32 = 4;
/// seqtap: the expert stays still this many steps after every tap, so the
/// frames following a red tap are aliased for longer than one executed chunk.
pub const TAP_DWELL: u32 = 4;
/// Idle steps on the pad that complete a hold subtask.
pub const PAD_HOLD: u32 = 16;
/// putback: the expert rests at the staging cell until this step.
pub const PUTBACK_REST_UNTIL: usize = 20;
