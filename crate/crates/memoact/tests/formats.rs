use std::io::Cursor;

use memoact::checkpoint::*;
use memoact::config::TrainSection;
use memoact::dataset::{read_dataset, read_episode, read_manifest, write_dataset, write_episode};
use memoact::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use memoact::{ExperimentConfig, FormatError};
use memoact_core::envs::{generate_dataset, TaskId};
use memoact_core::graph::Graph;
use memoact_core::memory::{BankSnapshot, MemoryBank};
use memoact_core::policy::Policy;
use memoact_core::tensor::Tensor;
use memoact_core::trainer::{eval_rollout, TrainConfig};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn named_arrays_round_trip_bit_exactly() {
    let arrays = vec![
        NamedArray::f32("a", &[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, f32::MAX, 1e-30, -7.25]),
        NamedArray::bytes("b", b"{\"x\":1}".to_vec()),
        NamedArray::u64("c", vec![0, u64::MAX, 42]),
        NamedArray::f32("empty", &[0, 64], vec![]),
    ];
    let mut buf = Vec::new();
    write_arrays(&mut buf, &arrays).unwrap();
    assert_eq!(&buf[..4], MAGIC);
    let back = read_arrays(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.len(), arrays.len());
    assert_eq!(bits(back[0].as_f32().unwrap()), bits(arrays[0].as_f32().unwrap()));
    assert_eq!(back[1..], arrays[1..]);
}

#[test]
fn corrupt_array_files_are_rejected() {
    let mut buf = Vec::new();
    write_arrays(&mut buf, &[NamedArray::f32("a", &[2], vec![1.0, 2.0])]).unwrap();

    let mut bad = buf.clone();
    bad[..4].copy_from_slice(b"NOPE");
    assert!(matches!(
        read_arrays(&mut Cursor::new(&bad)),
        Err(FormatError::BadMagic { .. })
    ));

    let mut version = buf.clone();
    version[4] = 99;
    assert!(matches!(
        read_arrays(&mut Cursor::new(&version)),
        Err(FormatError::Version(99))
    ));

    let truncated = &buf[..buf.len() - 2];
    assert!(read_arrays(&mut Cursor::new(truncated)).is_err());

    let mismatched = NamedArray::f32("a", &[3], vec![1.0]);
    assert!(write_arrays(&mut Vec::new(), &[mismatched]).is_err());
}

#[test]
fn policy_checkpoints_reproduce_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        variant: "mvmp".into(),
        seed: 5,
        ..TrainConfig::default()
    };
    let mut policy: Policy<f32> = config.build_policy().unwrap();
    // Move every weight off its init so zero-initialised layers are exercised too.
    for id in policy.params.ids().collect::<Vec<_>>() {
        for (i, v) in policy.params.value_mut(id).data_mut().iter_mut().enumerate() {
            *v += 1e-3 * ((i % 7) as f32 - 3.0);
        }
    }
    let path = dir.path().join("p.memo");
    save_policy(&path, &policy, &config).unwrap();
    let (loaded, loaded_config) = load_policy(&path).unwrap();
    assert_eq!(loaded_config, config);
    assert_eq!(loaded.patch.checksum(), policy.patch.checksum());
    for ((_, a), (_, b)) in policy.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(a.value.data()), bits(b.value.data()), "{}", a.name);
    }
    assert_eq!(
        eval_rollout(&policy, TaskId::SwapTrack, 2, 3).unwrap(),
        eval_rollout(&loaded, TaskId::SwapTrack, 2, 3).unwrap()
    );
}

#[test]
fn checkpoints_from_other_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.memo");
    save_arrays(&path, &[NamedArray::f32("w", &[1], vec![0.0])]).unwrap();
    assert!(load_policy(&path).is_err());
    std::fs::write(&path, b"MRTB\x01\0\0\0").unwrap();
    assert!(matches!(load_policy(&path), Err(FormatError::BadMagic { .. })));
}

#[test]
fn bank_snapshots_round_trip() {
    let policy: Policy<f32> = TrainConfig::default().build_policy().unwrap();
    let (eps, _) = generate_dataset(TaskId::PutBack, 1, 2).unwrap();
    let mut bank = policy.new_bank();
    let mut g = Graph::inference();
    for (t, frame) in eps[0].frames.iter().take(40).enumerate() {
        g.reset();
        let f_o = policy
            .sense(&mut g, &policy.patches(frame).unwrap(), &frame.proprio)
            .unwrap();
        policy.remember(&mut g, f_o, t as u64, &mut bank).unwrap();
    }
    bank.unbind();
    assert!(!bank.ltmb().is_empty());
    let snap = bank.snapshot();
    let mut buf = Vec::new();
    write_arrays(&mut buf, &bank_arrays(&snap)).unwrap();
    let back: BankSnapshot<f32> = bank_from_arrays(&read_arrays(&mut Cursor::new(&buf)).unwrap()).unwrap();
    assert_eq!(back, snap);
    let restored = MemoryBank::restore(back);
    assert_eq!(restored.len(), bank.len());
    assert_eq!(restored.consolidations(), bank.consolidations());
}

#[test]
fn patch_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.memo");
    let ep: Vec<Tensor<f32>> = (0..3).map(|i| Tensor::full(&[16, 64], i as f32 * 0.5)).collect();
    save_features(&path, &[ep.clone(), ep[..1].to_vec()]).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], ep);
    assert_eq!(back[1].len(), 1);
    save_arrays(&path, &[NamedArray::f32("patches.0", &[1, 16, 8], vec![0.0; 128])]).unwrap();
    assert!(load_features(&path).is_err());
}

#[test]
fn episodes_round_trip_through_files() {
    let (eps, _) = generate_dataset(TaskId::SeqTap, 3, 8).unwrap();
    let mut buf = Vec::new();
    write_episode(&mut buf, &eps[0]).unwrap();
    assert_eq!(read_episode(&mut Cursor::new(&buf)).unwrap(), eps[0]);

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &eps).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.len(), 3);
    assert!(manifest.iter().all(|m| m.success && m.task == "seqtap"));
    assert_eq!(read_dataset(dir.path()).unwrap(), eps);

    buf[0] = b'X';
    assert!(matches!(
        read_episode(&mut Cursor::new(&buf)),
        Err(FormatError::BadMagic { .. })
    ));
}

#[test]
fn metrics_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let rec = MetricsRecord {
        epoch: 3,
        variant: "memoact".into(),
        task: "putback".into(),
        seed: 2,
        loss_mean: Some(0.123456789012345),
        success_rate: Some(0.82),
        subtask_rates: vec![1.0, 0.9, 0.86, 0.84, 0.82],
        wall_clock_s: 12.5,
    };
    MetricsWriter::create(&path).unwrap().write(&rec).unwrap();
    let later = MetricsRecord {
        epoch: 4,
        loss_mean: None,
        success_rate: None,
        subtask_rates: vec![],
        ..rec.clone()
    };
    MetricsWriter::append(&path).unwrap().write(&later).unwrap();
    let back = read_metrics(&path).unwrap();
    assert_eq!(back, vec![rec.clone(), later]);
    assert!(back[0].same_outcome(&MetricsRecord {
        wall_clock_s: 99.0,
        ..rec.clone()
    }));
    assert!(!back[0].same_outcome(&MetricsRecord {
        loss_mean: Some(0.12345678901234),
        ..rec
    }));
}

#[test]
fn config_rejects_unknown_and_invalid_keys() {
    let default = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::parse(&default.to_toml()).unwrap(), default);
    let partial = ExperimentConfig::parse("tasks = [\"putback\"]\n[train]\nepochs = 2\n").unwrap();
    assert_eq!(partial.train.epochs, 2);
    assert_eq!(partial.train.batch_size, 16);
    for bad in [
        "bogus = 1",
        "[train]\nlearning_rate = 0.1",
        "[train]\nvariant = \"lstm\"",
        "[train]\nbatch_size = 0",
        "tasks = [\"pong\"]",
        "seeds = []",
        "[data]\ndemos = 0",
    ] {
        assert!(
            matches!(
                ExperimentConfig::parse(bad),
                Err(FormatError::Config(_)) | Err(FormatError::Core(_))
            ),
            "{bad}"
        );
    }
    let core = TrainConfig {
        long_capacity: Some(0),
        ..TrainConfig::default()
    };
    assert_eq!(TrainSection::from_core(&core).to_core(), core);
}
