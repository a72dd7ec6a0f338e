use memoact_core::envs::*;

fn run_expert(task: TaskId, seed: u64, variant: Option<u8>) -> Vec<SceneState> {
    let mut s = reset_variant(task, seed, variant);
    let mut states = vec![s.clone()];
    while !s.done {
        s = step(&s, expert_action(&s));
        states.push(s.clone());
    }
    states
}

/// Walks the agent onto `target` with unit moves.
fn walk_to(mut s: SceneState, target: Cell) -> SceneState {
    while s.agent != target {
        let d = |a: i32, b: i32| (b - a).signum() as f32;
        s = step(&s, [d(s.agent.x, target.x), d(s.agent.y, target.y), -1.0]);
    }
    s
}

const TAP: [f32; 3] = [0.0, 0.0, 1.0];

#[test]
fn aliased_pairs_render_identically() {
    for task in TaskId::ALL {
        let report = verify_aliasing(task, 200).unwrap_or_else(|e| panic!("{}: {e}", task.name()));
        assert!(report.pairs_checked >= 200);
    }
}

#[test]
fn putback_slot_is_invisible_once_resting() {
    for seed in 0..20 {
        let runs: Vec<_> = (0..4).map(|v| run_expert(TaskId::PutBack, seed, Some(v))).collect();
        let a = render(&runs[0][PUTBACK_REST_UNTIL]);
        for run in &runs[1..] {
            let b = render(&run[PUTBACK_REST_UNTIL]);
            assert_eq!(a.image, b.image, "seed {seed}");
            assert_eq!(a.proprio, b.proprio);
        }
        // Before pickup the slots are distinguishable.
        assert_ne!(render(&runs[0][0]).image, render(&runs[1][0]).image);
    }
}

#[test]
fn expert_solves_every_seed() {
    for task in TaskId::ALL {
        for seed in 0..200 {
            let rec = record_expert(task, episode_seed(7, seed));
            assert!(rec.success, "{} seed {seed}", task.name());
            assert!(rec.len() <= MAX_EPISODE_LEN);
        }
    }
}

#[test]
fn rendering_is_deterministic_and_colour_sensitive() {
    for task in TaskId::ALL {
        let s = reset(task, 11);
        assert_eq!(render(&s), render(&reset(task, 11)));
        let mut recoloured = s.clone();
        recoloured.objects[0].color = [1, 2, 3];
        let (a, b) = (render(&s), render(&recoloured));
        let differing = a.image.iter().zip(&b.image).filter(|(x, y)| x != y).count();
        // One 2×2 cell, three channels.
        assert_eq!(differing, 12, "{}", task.name());
    }
}

#[test]
fn moves_are_quantised_and_clamped() {
    let mut s = reset(TaskId::SeqTap, 3);
    s.agent = Cell::new(0, 1);
    let t = step(&s, [-1.0, -1.0, -1.0]);
    assert_eq!(t.agent, Cell::new(0, 1), "row 0 is the progress bar");
    let t = step(&s, [0.9, 0.2, -1.0]);
    assert_eq!(t.agent, Cell::new(1, 1));
    assert_eq!(t.velocity, Cell::new(1, 0));
    let t = step(&s, [f32::NAN, 1.0, 1.0]);
    assert_eq!(t.agent, s.agent);
    assert_eq!(t.progress, 0);
    assert_eq!(t.step, 1);
}

#[test]
fn seqtap_order_is_enforced() {
    let s = reset(TaskId::SeqTap, 5);
    let (red, blue) = (s.objects[0].cell, s.objects[1].cell);

    // Tapping empty floor changes nothing but the tap flag.
    let mut empty = s.clone();
    empty.agent = Cell::new(15, 15);
    let t = step(&empty, TAP);
    assert!(t.tapped && !t.done && t.progress == 0 && t.trace.is_empty());

    let wrong = step(&walk_to(s.clone(), blue), TAP);
    assert!(wrong.done);
    assert_eq!(
        check_success(&wrong.trace, TaskId::SeqTap).violation,
        Some(ViolationKind::WrongOrder)
    );

    let mut t = step(&walk_to(s.clone(), red), TAP);
    assert_eq!(t.progress, 1);
    // Red again before blue is the aliasing mistake.
    let again = step(&t, TAP);
    assert_eq!(
        check_success(&again.trace, TaskId::SeqTap).violation,
        Some(ViolationKind::WrongOrder)
    );

    t = step(&walk_to(t, blue), TAP);
    t = step(&walk_to(t, red), TAP);
    assert_eq!(t.progress, 3);
    let looped = step(&t, TAP);
    assert_eq!(
        check_success(&looped.trace, TaskId::SeqTap).violation,
        Some(ViolationKind::ErroneousLoop)
    );

    for _ in 0..STOP_HOLD {
        t = step(&t, [0.0, 0.0, -1.0]);
    }
    assert!(t.done);
    let report = check_success(&t.trace, TaskId::SeqTap);
    assert!(report.success);
    assert_eq!(report.completed, vec![true; 4]);
}

#[test]
fn episodes_stop_at_the_step_budget() {
    let mut s = reset(TaskId::SwapTrack, 1);
    while !s.done {
        s = step(&s, [0.0, 0.0, -1.0]);
    }
    assert_eq!(s.step, MAX_EPISODE_LEN);
    assert!(!check_success(&s.trace, TaskId::SwapTrack).success);
}

#[test]
fn success_requires_order_and_no_violation() {
    let task = TaskId::SeqTap;
    let sub = |index, step| TraceEvent::Subtask { index, step };
    let full: Vec<_> = (0..4).map(|i| sub(i, i * 5)).collect();
    assert!(check_success(&full, task).success);

    let swapped = vec![sub(1, 0), sub(0, 1), sub(2, 2), sub(3, 3)];
    let r = check_success(&swapped, task);
    assert!(!r.success);
    assert_eq!(r.completed, vec![true; 4]);

    let mut violated = full.clone();
    violated.push(TraceEvent::Violation {
        kind: ViolationKind::ErroneousLoop,
        step: 30,
    });
    assert!(!check_success(&violated, task).success);

    let partial = check_success(&full[..2], task);
    assert_eq!(partial.completed, vec![true, true, false, false]);
    assert!(!partial.success);
}

#[test]
fn chunk_targets_pad_with_the_final_action() {
    let actions: Vec<[f32; 3]> = (0..10).map(|i| [i as f32 / 10.0, 0.0, -1.0]).collect();
    let t = actions.len() - 2;
    let chunk = chunk_target(&actions, t, 8);
    assert_eq!(chunk.len(), 8);
    assert_eq!(chunk[0], actions[t]);
    for row in &chunk[1..] {
        assert_eq!(*row, actions[actions.len() - 1]);
    }
    assert_eq!(chunk_target(&[[2.0, -3.0, 0.5]], 0, 2), vec![[1.0, -1.0, 0.5]; 2]);
    assert!(chunk_target(&[], 0, 8).is_empty());
}

#[test]
fn datasets_are_reproducible() {
    let (a, stats) = generate_dataset(TaskId::PutBack, 5, 42).unwrap();
    let (b, _) = generate_dataset(TaskId::PutBack, 5, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(stats.accepted, 5);
    let (c, _) = generate_dataset(TaskId::PutBack, 5, 43).unwrap();
    assert_ne!(a[0].seed, c[0].seed);
    assert!(generate_dataset(TaskId::PutBack, 0, 42).is_err());
    for rec in &a {
        assert_eq!(rec.frames.len(), rec.actions.len());
        assert_eq!(rec.frames[0].step_index, 0);
    }
}
