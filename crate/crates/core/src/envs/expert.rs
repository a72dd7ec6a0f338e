use super::scene::{Cell, SceneState, TaskId, PUTBACK_SLOTS, PUTBACK_STAGING, SWAP_DESTS};
use super::{MAX_MOVE, PUTBACK_REST_UNTIL, TAP_DWELL};

const TAP: [f32; 3] = [0.0, 0.0, 1.0];
const IDLE: [f32; 3] = [0.0, 0.0, -1.0];

fn toward(from: Cell, to: Cell) -> [f32; 3] {
    let d = |a: i32, b: i32| (b - a).clamp(-MAX_MOVE, MAX_MOVE) as f32 / MAX_MOVE as f32;
    [d(from.x, to.x), d(from.y, to.y), -1.0]
}

/// Go to `target`, then tap it.
fn reach_and_tap(agent: Cell, target: Cell) -> [f32; 3] {
    if agent == target {
        TAP
    } else {
        toward(agent, target)
    }
}

/// Go to `target`, then stay there.
fn reach_and_idle(agent: Cell, target: Cell) -> [f32; 3] {
    if agent == target {
        IDLE
    } else {
        toward(agent, target)
    }
}

/// Scripted privileged controller; reads hidden state that the policy never sees.
pub fn expert_action(s: &SceneState) -> [f32; 3] {
    if s.done {
        return IDLE;
    }
    let a = s.agent;
    match s.task {
        TaskId::SeqTap => match s.progress {
            _ if s.dwell < TAP_DWELL => IDLE,
            0 | 2 => reach_and_tap(a, s.anchors[0]),
            1 => reach_and_tap(a, s.anchors[1]),
            _ => IDLE,
        },
        TaskId::PutBack => {
            let pad = s.pad.unwrap_or_default();
            match s.progress {
                0 => reach_and_tap(a, PUTBACK_SLOTS[s.variant as usize]),
                1 => reach_and_tap(a, PUTBACK_STAGING),
                2 if s.step < PUTBACK_REST_UNTIL => IDLE,
                2 => reach_and_idle(a, pad),
                3 => reach_and_tap(a, PUTBACK_STAGING),
                _ => reach_and_tap(a, PUTBACK_SLOTS[s.variant as usize]),
            }
        }
        TaskId::SwapTrack => {
            let first = s.variant as usize;
            let second = 1 - first;
            match s.progress {
                0 => reach_and_tap(a, s.anchors[first]),
                1 => reach_and_tap(a, SWAP_DESTS[first]),
                2 => reach_and_tap(a, s.anchors[second]),
                3 => reach_and_tap(a, SWAP_DESTS[second]),
                4 => reach_and_idle(a, s.pad.unwrap_or_default()),
                _ => reach_and_tap(a, SWAP_DESTS[first]),
            }
        }
    }
}
