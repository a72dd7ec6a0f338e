use memoact_core::envs::{generate_dataset, TaskId};
use memoact_core::graph::Graph;
use memoact_core::policy::{Policy, VariantSpec};
use memoact_core::trainer::*;
use memoact_core::Result;

fn tiny(variant: &str) -> TrainConfig {
    TrainConfig {
        variant: variant.into(),
        epochs: 1,
        eval_trials: 0,
        ..TrainConfig::default()
    }
}

fn episodes(policy: &Policy<f32>, task: TaskId, n: usize) -> Vec<PreparedEpisode<f32>> {
    let (recs, _) = generate_dataset(task, n, 99).unwrap();
    recs.iter()
        .map(|r| PreparedEpisode::new(policy, r, 8).unwrap())
        .collect()
}

#[derive(Default)]
struct Recorder {
    batches: Vec<BatchInfo>,
}

impl TrainHooks<f32> for Recorder {
    fn on_batch(&mut self, info: &BatchInfo) {
        self.batches.push(info.clone());
    }
}

#[test]
fn windows_follow_the_batch_arithmetic() {
    assert_eq!(batch_windows(33, 16), vec![(0, 16), (16, 32), (32, 33)]);
    assert_eq!(batch_windows(16, 16), vec![(0, 16)]);
    assert_eq!(batch_windows(3, 16), vec![(0, 3)]);
    assert!(batch_windows(0, 16).is_empty());
}

#[test]
fn batches_are_chronological_and_never_span_episodes() {
    let config = tiny("memoact");
    let mut policy: Policy<f32> = config.build_policy().unwrap();
    let eps = episodes(&policy, TaskId::SeqTap, 3);
    let mut rec = Recorder::default();
    streaming_train(&mut policy, TaskId::SeqTap, &eps, &config, &mut rec).unwrap();

    let total: usize = eps.iter().map(|e| batch_windows(e.len(), 16).len()).sum();
    assert_eq!(rec.batches.len(), total);
    let mut i = 0;
    while i < rec.batches.len() {
        let ep = rec.batches[i].episode;
        let windows = batch_windows(eps[ep].len(), 16);
        for (k, &(start, end)) in windows.iter().enumerate() {
            let b = &rec.batches[i + k];
            assert_eq!(b.episode, ep, "a batch strayed into another episode");
            assert_eq!(b.steps, (start..end).collect::<Vec<_>>());
            // Cleared only at episode boundaries.
            if k == 0 {
                assert_eq!(b.bank_len, 0);
            } else {
                assert!(b.bank_len > 0, "bank cleared mid-episode");
            }
        }
        i += windows.len();
    }
}

#[test]
fn first_step_gradients_ignore_consolidation() {
    // Step 0 sees an empty bank whether or not consolidation runs.
    let policy: Policy<f32> = tiny("memoact").build_policy().unwrap();
    let ep = &episodes(&policy, TaskId::SeqTap, 1)[0];
    let grads = |enabled: bool| -> Vec<Option<Vec<f32>>> {
        let mut p = policy.clone();
        let mut bank = p.new_bank();
        bank.set_consolidation_enabled(enabled);
        let mut g = Graph::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let f_o = p.sense(&mut g, &ep.patches[0], &ep.proprio[0]).unwrap();
        let f_c = p.condition(&mut g, f_o, &bank).unwrap();
        let loss = p
            .denoiser
            .loss(&mut g, &p.params, &p.schedule, f_c, &ep.targets[0], &mut rng)
            .unwrap();
        p.remember(&mut g, f_o, 0, &mut bank).unwrap();
        g.backward(loss, &mut p.params).unwrap();
        p.params
            .iter()
            .filter(|(_, q)| q.name.starts_with("encoder."))
            .map(|(id, _)| p.params.grad(id).map(<[f32]>::to_vec))
            .collect()
    };
    let (on, off) = (grads(true), grads(false));
    assert!(on.iter().any(Option::is_some));
    assert_eq!(on, off);
}

/// One training window, optionally storing constants equal to `F_O` instead of `F_O` itself.
fn window_grads(
    policy: &Policy<f32>,
    ep: &PreparedEpisode<f32>,
    constant_inputs: bool,
) -> Result<Vec<Option<Vec<f32>>>> {
    let mut p = policy.clone();
    let mut bank = p.new_bank();
    let mut g = Graph::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
    let mut losses = Vec::new();
    for t in 0..16 {
        let f_o = p.sense(&mut g, &ep.patches[t], &ep.proprio[t])?;
        let f_c = p.condition(&mut g, f_o, &bank)?;
        losses.push(
            p.denoiser
                .loss(&mut g, &p.params, &p.schedule, f_c, &ep.targets[t], &mut rng)?,
        );
        let stored = if constant_inputs {
            g.constant(g.value(f_o).clone())
        } else {
            f_o
        };
        p.remember(&mut g, stored, t as u64, &mut bank)?;
    }
    let stacked = g.concat_rows(&losses)?;
    let loss = g.mean(stacked);
    g.backward(loss, &mut p.params)?;
    Ok(p.params
        .ids()
        .map(|id| p.params.grad(id).map(<[f32]>::to_vec))
        .collect())
}

#[test]
fn consolidation_never_feeds_gradients_back_into_its_inputs() {
    let policy: Policy<f32> = tiny("memoact").build_policy().unwrap();
    let ep = &episodes(&policy, TaskId::PutBack, 1)[0];
    assert!(ep.len() >= 16);
    let live = window_grads(&policy, ep, false).unwrap();
    let constant = window_grads(&policy, ep, true).unwrap();
    assert_eq!(live, constant);
    // The consolidation module itself still learns within the window.
    let ids: Vec<_> = policy
        .params
        .iter()
        .filter(|(_, q)| q.name.starts_with("memory.consolidation."))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    assert!(ids.iter().any(|id| live[id.index()].is_some()));
}

#[test]
fn variants_share_encoder_and_decoder_sizes() {
    let reference: Policy<f32> = tiny("memoact").build_policy().unwrap();
    for id in VariantSpec::IDS {
        let p: Policy<f32> = tiny(id).build_policy().unwrap();
        assert_eq!(p.count("encoder."), reference.count("encoder."), "{id}");
        assert_eq!(p.count("decoder."), reference.count("decoder."), "{id}");
        // Same seed, same module streams: identical initial weights.
        for (_, q) in p
            .params
            .iter()
            .filter(|(_, q)| q.name.starts_with("encoder.") || q.name.starts_with("decoder."))
        {
            let r = reference.params.find(&q.name).unwrap();
            assert_eq!(q.value, *reference.params.value(r), "{id} {}", q.name);
        }
        assert_eq!(p.uses_memory(), id != "markovian");
    }
    assert!(tiny("lstm").build_policy::<f32>().is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..tiny("memoact")
    }
    .validate()
    .is_err());
}

#[test]
fn training_is_bit_reproducible_and_keeps_the_patch_encoder_frozen() {
    let config = TrainConfig {
        epochs: 2,
        eval_trials: 2,
        eval_every: 1,
        ..tiny("samp")
    };
    let run = || {
        let mut policy: Policy<f32> = config.build_policy().unwrap();
        let checksum = policy.patch.checksum();
        let eps = episodes(&policy, TaskId::SeqTap, 2);
        let rows = streaming_train(&mut policy, TaskId::SeqTap, &eps, &config, &mut NoHooks).unwrap();
        assert_eq!(policy.patch.checksum(), checksum);
        (rows, policy.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.loss_mean.to_bits(), y.loss_mean.to_bits());
        assert_eq!(x.success_rate, y.success_rate);
        assert_eq!(x.subtask_rates, y.subtask_rates);
        assert!(x.success_rate.is_some_and(|s| (0.0..=1.0).contains(&s)));
    }
    for ((_, x), (_, y)) in pa.iter().zip(pb.iter()) {
        assert!(x
            .value
            .data()
            .iter()
            .zip(y.value.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn weight_averaging_does_not_change_the_training_trajectory() {
    let with = tiny("markovian");
    let without = TrainConfig {
        ema_decay: 0.0,
        ..with.clone()
    };
    let train = |config: &TrainConfig| {
        let mut policy: Policy<f32> = config.build_policy().unwrap();
        let eps = episodes(&policy, TaskId::SeqTap, 2);
        let rows = streaming_train(&mut policy, TaskId::SeqTap, &eps, config, &mut NoHooks).unwrap();
        (rows[0].loss_mean, policy.params)
    };
    let (la, pa) = train(&with);
    let (lb, pb) = train(&without);
    assert_eq!(la.to_bits(), lb.to_bits());
    let id = pa.find("decoder.conv_in.weight").unwrap();
    assert_ne!(pa.value(id), pb.value(id));
    assert!(TrainConfig { ema_decay: 1.0, ..with }.validate().is_err());
}

#[test]
fn evaluation_uses_the_same_environments_for_every_variant() {
    let a: Policy<f32> = tiny("markovian").build_policy().unwrap();
    let b: Policy<f32> = tiny("memoact").build_policy().unwrap();
    let sa = eval_rollout(&a, TaskId::SeqTap, 3, 5).unwrap();
    let sb = eval_rollout(&b, TaskId::SeqTap, 3, 5).unwrap();
    let seeds = |s: &EvalStats| s.trials.iter().map(|t| t.env_seed).collect::<Vec<_>>();
    assert_eq!(seeds(&sa), seeds(&sb));
    assert_eq!(sa, eval_rollout(&a, TaskId::SeqTap, 3, 5).unwrap());
    assert_eq!(sa.subtask_rates().len(), 4);
}
