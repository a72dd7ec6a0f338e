use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    expert_action, GRID, MAX_EPISODE_LEN, MAX_MOVE, PAD_HOLD, PUTBACK_REST_UNTIL, REACH, STOP_HOLD, TAP_DWELL,
};
use crate::encoder::{ObservationFrame, IMAGE_SIZE, PROPRIO_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    /// Tap red, tap blue, tap red again, then stay still.
    SeqTap,
    /// Move an item from one of four slots to staging, wait out a hold, then return it.
    PutBack,
    /// Displace both containers, wait on the pad, then tap the one moved first.
    SwapTrack,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::SeqTap, TaskId::PutBack, TaskId::SwapTrack];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::SeqTap => "seqtap",
            TaskId::PutBack => "putback",
            TaskId::SwapTrack => "swaptrack",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            TaskId::SeqTap => 0,
            TaskId::PutBack => 1,
            TaskId::SwapTrack => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.code() == code)
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Number of hidden variants (`None` means the seed alone decides).
    pub fn variants(self) -> Option<u8> {
        match self {
            TaskId::SeqTap => None,
            TaskId::PutBack => Some(4),
            TaskId::SwapTrack => Some(2),
        }
    }

    pub fn spec(self) -> TaskSpec {
        let (subtasks, aliased): (&[&str], &[&str]) = match self {
            TaskId::SeqTap => (
                &["tap red", "tap blue", "tap red again", "stop"],
                &["frame after the first red tap == frame after the second red tap"],
            ),
            TaskId::PutBack => (
                &[
                    "pick item",
                    "place at staging",
                    "hold on pad",
                    "pick from staging",
                    "return to original slot",
                ],
                &["every frame from step 20 to the return decision is identical across the 4 slots"],
            ),
            TaskId::SwapTrack => (
                &[
                    "pick first container",
                    "place first container",
                    "pick second container",
                    "place second container",
                    "hold on pad",
                    "tap container moved first",
                ],
                &["the final decision frame is identical for both displacement orders"],
            ),
        };
        TaskSpec {
            id: self,
            subtasks: subtasks.to_vec(),
            aliased_pairs: aliased.to_vec(),
            max_len: MAX_EPISODE_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub subtasks: Vec<&'static str>,
    pub aliased_pairs: Vec<&'static str>,
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn chebyshev(self, o: Cell) -> i32 {
        (self.x - o.x).abs().max((self.y - o.y).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub id: u8,
    pub cell: Cell,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// A subtask target was acted on out of sequence.
    WrongOrder,
    /// A held object was released somewhere other than its target.
    WrongPlace,
    /// The agent kept acting after it should have stopped.
    ErroneousLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Subtask { index: usize, step: usize },
    Violation { kind: ViolationKind, step: usize },
}

/// Full simulator state. Only the agent, objects, markers and bar are drawn;
/// everything else is privileged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneState {
    pub task: TaskId,
    pub seed: u64,
    pub agent: Cell,
    pub velocity: Cell,
    pub tapped: bool,
    pub holding: Option<usize>,
    pub objects: Vec<SceneObject>,
    /// Static floor decorations.
    pub markers: Vec<(Cell, [u8; 3])>,
    /// Rendered progress bar length in cells.
    pub bar: u32,
    /// Hidden: number of completed subtasks.
    pub progress: usize,
    /// Hidden: putback slot index or swaptrack first container.
    pub variant: u8,
    pub pad: Option<Cell>,
    /// Key cells of the layout (targets the expert navigates to).
    pub anchors: Vec<Cell>,
    pub still: u32,
    /// Hidden: still steps since the last tap, saturating at [`TAP_DWELL`].
    pub dwell: u32,
    pub step: usize,
    pub trace: Vec<TraceEvent>,
    pub done: bool,
}

const RED: [u8; 3] = [220, 40, 40];
const BLUE: [u8; 3] = [40, 80, 230];
const YELLOW: [u8; 3] = [230, 200, 30];
const GREEN: [u8; 3] = [40, 200, 70];
const MAGENTA: [u8; 3] = [200, 50, 200];
const SLOT: [u8; 3] = [70, 70, 70];
const STAGING: [u8; 3] = [140, 140, 140];
const PAD: [u8; 3] = [0, 110, 120];
const DEST_GREEN: [u8; 3] = [0, 70, 20];
const DEST_MAGENTA: [u8; 3] = [70, 0, 70];
const BAR: [u8; 3] = [0, 200, 0];
const AGENT: [u8; 3] = [255, 255, 255];

pub(crate) const PUTBACK_STAGING: Cell = Cell::new(7, 9);
pub(crate) const PUTBACK_SLOTS: [Cell; 4] = [Cell::new(4, 6), Cell::new(10, 6), Cell::new(4, 12), Cell::new(10, 12)];
pub(crate) const SWAP_DESTS: [Cell; 2] = [Cell::new(2, 14), Cell::new(13, 14)];
const SEQTAP_RED: Cell = Cell::new(4, 11);
const SEQTAP_BLUE: Cell = Cell::new(11, 4);
const PUTBACK_PAD: Cell = Cell::new(13, 2);
const SWAP_CONTAINERS: [Cell; 2] = [Cell::new(5, 8), Cell::new(10, 8)];
const SWAP_PAD: Cell = Cell::new(8, 2);

fn random_cell(rng: &mut ChaCha8Rng, xs: (i32, i32), ys: (i32, i32), avoid: &[Cell], min_dist: i32) -> Cell {
    loop {
        let c = Cell::new(rng.random_range(xs.0..=xs.1), rng.random_range(ys.0..=ys.1));
        if avoid.iter().all(|a| a.chebyshev(c) >= min_dist) {
            return c;
        }
    }
}

/// Initial state; the seed fixes the layout and the hidden variant.
pub fn reset(task: TaskId, seed: u64) -> SceneState {
    reset_variant(task, seed, None)
}

/// [`reset`] with the hidden variant overridden; the visible layout is unchanged.
pub fn reset_variant(task: TaskId, seed: u64, variant: Option<u8>) -> SceneState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((task.code() as u64 + 1) << 56));
    let drawn = match task.variants() {
        Some(n) => rng.random_range(0..n),
        None => 0,
    };
    let variant = variant.unwrap_or(drawn);
    let mut s = SceneState {
        task,
        seed,
        agent: Cell::default(),
        velocity: Cell::default(),
        tapped: false,
        holding: None,
        objects: Vec::new(),
        markers: Vec::new(),
        bar: 0,
        progress: 0,
        variant,
        pad: None,
        anchors: Vec::new(),
        still: 0,
        dwell: TAP_DWELL,
        step: 0,
        trace: Vec::new(),
        done: false,
    };
    match task {
        TaskId::SeqTap => {
            let (red, blue) = (SEQTAP_RED, SEQTAP_BLUE);
            s.agent = random_cell(&mut rng, (0, 15), (1, 15), &[red, blue], 2);
            s.objects = vec![
                SceneObject {
                    id: 0,
                    cell: red,
                    color: RED,
                },
                SceneObject {
                    id: 1,
                    cell: blue,
                    color: BLUE,
                },
            ];
            s.anchors = vec![red, blue];
        }
        TaskId::PutBack => {
            let pad = PUTBACK_PAD;
            let mut avoid: Vec<Cell> = PUTBACK_SLOTS.to_vec();
            avoid.push(PUTBACK_STAGING);
            avoid.push(pad);
            s.agent = random_cell(&mut rng, (0, 15), (3, 15), &avoid, 1);
            for slot in PUTBACK_SLOTS {
                s.markers.push((slot, SLOT));
            }
            s.markers.push((PUTBACK_STAGING, STAGING));
            s.markers.push((pad, PAD));
            s.objects = vec![SceneObject {
                id: 0,
                cell: PUTBACK_SLOTS[variant as usize],
                color: YELLOW,
            }];
            s.pad = Some(pad);
            s.anchors = vec![PUTBACK_SLOTS[variant as usize], PUTBACK_STAGING];
        }
        TaskId::SwapTrack => {
            let pad = SWAP_PAD;
            let [a, b] = SWAP_CONTAINERS;
            s.agent = random_cell(&mut rng, (0, 15), (3, 12), &[a, b, pad], 1);
            s.markers.push((SWAP_DESTS[0], DEST_GREEN));
            s.markers.push((SWAP_DESTS[1], DEST_MAGENTA));
            s.markers.push((pad, PAD));
            s.objects = vec![
                SceneObject {
                    id: 0,
                    cell: a,
                    color: GREEN,
                },
                SceneObject {
                    id: 1,
                    cell: b,
                    color: MAGENTA,
                },
            ];
            s.pad = Some(pad);
            s.anchors = vec![a, b];
        }
    }
    s
}

/// Nearest free object within [`REACH`] of `cell` (lowest id on ties).
fn object_at(s: &SceneState, cell: Cell) -> Option<usize> {
    s.objects
        .iter()
        .enumerate()
        .filter(|(i, o)| s.holding != Some(*i) && o.cell.chebyshev(cell) <= REACH)
        .min_by_key(|(i, o)| (o.cell.chebyshev(cell), *i))
        .map(|(i, _)| i)
}

fn quantise(v: f32) -> i32 {
    libm::roundf(v.clamp(-1.0, 1.0) * MAX_MOVE as f32) as i32
}

/// Advances one step. Non-finite actions act as "stay still".
pub fn step(state: &SceneState, action: [f32; 3]) -> SceneState {
    let mut s = state.clone();
    if s.done {
        return s;
    }
    let finite = action.iter().all(|v| v.is_finite());
    let tap = finite && action[2] > 0.5;
    if tap {
        s.velocity = Cell::default();
        s.tapped = true;
        s.dwell = 0;
        on_tap(&mut s);
    } else {
        let (dx, dy) = if finite {
            (quantise(action[0]), quantise(action[1]))
        } else {
            (0, 0)
        };
        let to = Cell::new((s.agent.x + dx).clamp(0, GRID - 1), (s.agent.y + dy).clamp(1, GRID - 1));
        s.velocity = Cell::new(to.x - s.agent.x, to.y - s.agent.y);
        s.agent = to;
        s.tapped = false;
        s.dwell = if s.velocity == Cell::default() {
            (s.dwell + 1).min(TAP_DWELL)
        } else {
            TAP_DWELL
        };
        if let Some(h) = s.holding {
            s.objects[h].cell = to;
        }
        on_move(&mut s);
    }
    s.step += 1;
    if !s.done && s.step >= MAX_EPISODE_LEN {
        s.done = true;
    }
    s
}

fn complete(s: &mut SceneState) {
    s.trace.push(TraceEvent::Subtask {
        index: s.progress,
        step: s.step,
    });
    s.progress += 1;
    if s.progress == s.task.spec().subtasks.len() {
        s.done = true;
    }
}

fn violate(s: &mut SceneState, kind: ViolationKind) {
    s.trace.push(TraceEvent::Violation { kind, step: s.step });
    s.done = true;
}

fn pick(s: &mut SceneState, i: usize) {
    s.holding = Some(i);
    complete(s);
}

fn place(s: &mut SceneState, target: Cell) {
    if s.agent.chebyshev(target) <= REACH {
        if let Some(h) = s.holding {
            s.objects[h].cell = target;
        }
        s.holding = None;
        complete(s);
    } else {
        violate(s, ViolationKind::WrongPlace);
    }
}

fn on_tap(s: &mut SceneState) {
    let here = object_at(s, s.agent);
    match s.task {
        TaskId::SeqTap => {
            if s.progress == 3 {
                violate(s, ViolationKind::ErroneousLoop);
                return;
            }
            let expected = [0usize, 1, 0][s.progress];
            match here {
                Some(o) if o == expected => complete(s),
                Some(_) => violate(s, ViolationKind::WrongOrder),
                None => {}
            }
        }
        TaskId::PutBack => match (s.progress, here) {
            (0, Some(0)) | (3, Some(0)) => pick(s, 0),
            (1, _) => place(s, PUTBACK_STAGING),
            (4, _) => place(s, PUTBACK_SLOTS[s.variant as usize]),
            (2, Some(_)) => violate(s, ViolationKind::WrongOrder),
            _ => {}
        },
        TaskId::SwapTrack => {
            // Whichever container is picked first fixes the order.
            if let (0, Some(o)) = (s.progress, here) {
                s.variant = o as u8;
                pick(s, o);
                return;
            }
            let first = s.variant as usize;
            let second = 1 - first;
            match (s.progress, here) {
                (2, Some(o)) if o == second => pick(s, o),
                (1, _) => place(s, SWAP_DESTS[first]),
                (3, _) => place(s, SWAP_DESTS[second]),
                (5, Some(o)) if o == first => complete(s),
                (_, Some(_)) => violate(s, ViolationKind::WrongOrder),
                _ => {}
            }
        }
    }
}

fn on_move(s: &mut SceneState) {
    let still = s.velocity == Cell::default();
    match s.task {
        TaskId::SeqTap if s.progress == 3 => {
            if still {
                s.still += 1;
                if s.still >= STOP_HOLD {
                    complete(s);
                }
            } else {
                violate(s, ViolationKind::ErroneousLoop);
            }
        }
        TaskId::PutBack | TaskId::SwapTrack => {
            let hold_stage = if s.task == TaskId::PutBack { 2 } else { 4 };
            if s.progress == hold_stage && still && s.pad.is_some_and(|p| p.chebyshev(s.agent) <= REACH) {
                s.bar += 1;
                if s.bar >= PAD_HOLD {
                    complete(s);
                }
            }
        }
        _ => {}
    }
}

fn fill_cell(img: &mut [u8], cell: Cell, color: [u8; 3]) {
    for dy in 0..2 {
        for dx in 0..2 {
            put(img, cell, dx, dy, color);
        }
    }
}

fn put(img: &mut [u8], cell: Cell, dx: usize, dy: usize, color: [u8; 3]) {
    let px = cell.x as usize * 2 + dx;
    let py = cell.y as usize * 2 + dy;
    let i = (py * IMAGE_SIZE + px) * 3;
    img[i..i + 3].copy_from_slice(&color);
}

/// Deterministic rasterisation plus proprioception.
pub fn render(s: &SceneState) -> ObservationFrame {
    let mut img = vec![0u8; IMAGE_SIZE * IMAGE_SIZE * 3];
    for x in 0..s.bar.min(GRID as u32) {
        fill_cell(&mut img, Cell::new(x as i32, 0), BAR);
    }
    for &(cell, color) in &s.markers {
        fill_cell(&mut img, cell, color);
    }
    for (i, o) in s.objects.iter().enumerate() {
        if s.holding != Some(i) {
            fill_cell(&mut img, o.cell, o.color);
        }
    }
    if let Some(h) = s.holding {
        fill_cell(&mut img, s.agent, s.objects[h].color);
    }
    put(&mut img, s.agent, 0, 0, AGENT);
    put(&mut img, s.agent, 1, 1, AGENT);
    let norm = |v: i32| v as f32 / (GRID - 1) as f32 * 2.0 - 1.0;
    let flag = |b: bool| if b { 1.0 } else { -1.0 };
    let proprio: [f32; PROPRIO_DIM] = [
        norm(s.agent.x),
        norm(s.agent.y),
        s.velocity.x as f32 / MAX_MOVE as f32,
        s.velocity.y as f32 / MAX_MOVE as f32,
        flag(s.tapped),
        flag(s.holding.is_some()),
    ];
    ObservationFrame {
        image: img,
        proprio,
        step_index: s.step,
    }
}

/// Outcome of an episode trace under the in-order rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccessReport {
    pub success: bool,
    pub completed: Vec<bool>,
    pub violation: Option<ViolationKind>,
}

/// Success iff every subtask fired in order and nothing was violated.
pub fn check_success(trace: &[TraceEvent], task: TaskId) -> SuccessReport {
    let n = task.spec().subtasks.len();
    let mut completed = vec![false; n];
    let mut next = 0;
    let mut in_order = true;
    let mut violation = None;
    for ev in trace {
        match *ev {
            TraceEvent::Subtask { index, .. } => {
                if index < n {
                    completed[index] = true;
                }
                if index == next {
                    next += 1;
                } else {
                    in_order = false;
                }
            }
            TraceEvent::Violation { kind, .. } => {
                violation.get_or_insert(kind);
            }
        }
    }
    SuccessReport {
        success: in_order && violation.is_none() && next == n,
        completed,
        violation,
    }
}

/// Result of instantiating every declared aliased pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasReport {
    pub task: TaskId,
    pub pairs_checked: usize,
    pub failures: Vec<String>,
}

fn expert_frames(task: TaskId, seed: u64, variant: Option<u8>) -> (Vec<ObservationFrame>, Vec<SceneState>) {
    let mut s = reset_variant(task, seed, variant);
    let mut frames = Vec::new();
    let mut states = Vec::new();
    while !s.done {
        frames.push(render(&s));
        states.push(s.clone());
        let a = expert_action(&s);
        s = step(&s, a);
    }
    frames.push(render(&s));
    states.push(s);
    (frames, states)
}

fn same_obs(a: &ObservationFrame, b: &ObservationFrame) -> bool {
    a.image == b.image
        && a.proprio
            .iter()
            .zip(&b.proprio)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Checks the declared aliased pairs over `seeds` seeds.
pub fn verify_aliasing(task: TaskId, seeds: u64) -> Result<AliasReport> {
    let mut report = AliasReport {
        task,
        pairs_checked: 0,
        failures: Vec::new(),
    };
    for seed in 0..seeds {
        match task {
            TaskId::SeqTap => {
                let (frames, states) = expert_frames(task, seed, None);
                // Frame index i is the observation after i actions.
                let after_tap: Vec<usize> = states
                    .windows(2)
                    .enumerate()
                    .filter(|(_, w)| w[1].progress != w[0].progress && (w[0].progress == 0 || w[0].progress == 2))
                    .map(|(i, _)| i + 1)
                    .collect();
                report.pairs_checked += 1;
                let aliased = after_tap.len() == 2
                    && (0..TAP_DWELL as usize).all(|j| {
                        let (a, b) = (after_tap[0] + j, after_tap[1] + j);
                        b < frames.len() && same_obs(&frames[a], &frames[b])
                    });
                if !aliased {
                    report
                        .failures
                        .push(format!("seqtap seed {seed}: red-tap frames differ ({after_tap:?})"));
                }
            }
            TaskId::PutBack | TaskId::SwapTrack => {
                let n = task.variants().unwrap_or(1);
                let decision_stage = if task == TaskId::PutBack { 4 } else { 5 };
                let runs: Vec<_> = (0..n).map(|v| expert_frames(task, seed, Some(v))).collect();
                let decision: Vec<Option<usize>> = runs
                    .iter()
                    .map(|(_, st)| st.iter().position(|s| s.progress == decision_stage))
                    .collect();
                let Some(d0) = decision[0] else {
                    report
                        .failures
                        .push(format!("{} seed {seed}: no decision frame", task.name()));
                    continue;
                };
                let from = PUTBACK_REST_UNTIL;
                for v in 1..n as usize {
                    report.pairs_checked += 1;
                    if task == TaskId::SwapTrack {
                        // Travel times differ between orders; only the frames must match.
                        match decision[v] {
                            Some(dv) if same_obs(&runs[0].0[d0], &runs[v].0[dv]) => {}
                            other => report.failures.push(format!(
                                "swaptrack seed {seed}: decision frames differ ({other:?} vs {d0})"
                            )),
                        }
                        continue;
                    }
                    if decision[v] != Some(d0) {
                        report.failures.push(format!(
                            "{} seed {seed}: decision step {:?} vs {d0}",
                            task.name(),
                            decision[v]
                        ));
                        continue;
                    }
                    for t in from..=d0 {
                        if !same_obs(&runs[0].0[t], &runs[v].0[t]) {
                            report
                                .failures
                                .push(format!("{} seed {seed}: variant {v} differs at step {t}", task.name()));
                            break;
                        }
                    }
                }
            }
        }
    }
    if report.failures.is_empty() {
        Ok(report)
    } else {
        Err(Error::Integrity(report.failures.join("; ")))
    }
}
