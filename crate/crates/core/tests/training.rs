use finsep::mixgen::{EpochMixer, MixConfig};
use finsep::tasnet::{TasNet, TasNetConfig};
use finsep::train::{
    FixedSamples, TrainConfig, TrainOutputs, Trainer, LATEST_CHECKPOINT, LOG_HEADER,
};
use finsep::Model;

fn tiny_model(seed: u64) -> Model {
    let config = TasNetConfig {
        frame_len: 8,
        basis: 12,
        bottleneck: 6,
        hidden: 8,
        blocks: 2,
        repeats: 1,
        ..TasNetConfig::default()
    };
    TasNet::new(config, seed).unwrap().into()
}

fn mixer(seed: u64) -> EpochMixer {
    let fish = (0..5)
        .map(|i| {
            (0..96)
                .map(|t| (0.2 * (i + 1) as f64 * t as f64).sin())
                .collect()
        })
        .collect();
    let bg = (0..3)
        .map(|i| {
            (0..96)
                .map(|t| (((t * 13 + i * 7) % 19) as f64 / 19.0) - 0.5)
                .collect()
        })
        .collect();
    EpochMixer::new(fish, bg, MixConfig::default(), seed).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        batch_size: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let run = || {
        let mut t = Trainer::new(tiny_model(1), config(3)).unwrap();
        t.run(&mixer(5), &TrainOutputs::default()).unwrap();
        (t.state.losses(), t.model.params().tensors().to_vec())
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la.len(), 9);
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn data_seed_changes_the_run() {
    let mut a = Trainer::new(tiny_model(1), config(1)).unwrap();
    a.run(&mixer(5), &TrainOutputs::default()).unwrap();
    let mut b = Trainer::new(tiny_model(1), config(1)).unwrap();
    b.run(&mixer(6), &TrainOutputs::default()).unwrap();
    assert_ne!(a.state.losses(), b.state.losses());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        checkpoint_dir: Some(dir.path().join("ckpt")),
        log: Some(dir.path().join("train.csv")),
    };
    let mut straight = Trainer::new(tiny_model(2), config(4)).unwrap();
    straight.run(&mixer(3), &TrainOutputs::default()).unwrap();

    let mut first = Trainer::new(tiny_model(2), config(2)).unwrap();
    first.run(&mixer(3), &out).unwrap();
    let latest = dir.path().join("ckpt").join(LATEST_CHECKPOINT);
    let mut resumed = Trainer::resume(&latest, config(4)).unwrap();
    assert_eq!(resumed.state.epoch, 2);
    resumed.run(&mixer(3), &out).unwrap();

    assert_eq!(resumed.state.losses(), straight.state.losses());
    assert_eq!(
        resumed.model.params().tensors(),
        straight.model.params().tensors()
    );
    assert_eq!(resumed.state.adam, straight.state.adam);

    for e in 0..=4 {
        assert!(dir
            .path()
            .join("ckpt")
            .join(format!("epoch{e:04}.ckpt"))
            .exists());
    }
    let log = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + 12);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[0].parse::<u64>().unwrap(), i as u64 + 1);
        assert_eq!(cols[2].parse::<f64>().unwrap(), straight.state.losses()[i]);
    }
}

#[test]
fn checkpoint_cadence_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log: None,
    };
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..config(3)
    };
    let mut t = Trainer::new(tiny_model(2), cfg).unwrap();
    t.run(
        &FixedSamples((0..3).map(|i| mixer(1).sample(0, i).unwrap()).collect()),
        &out,
    )
    .unwrap();
    let exists = |e: u32| dir.path().join(format!("epoch{e:04}.ckpt")).exists();
    assert!(exists(0) && !exists(1) && exists(2) && exists(3));
    assert_eq!(
        Trainer::resume(&dir.path().join(LATEST_CHECKPOINT), config(3))
            .unwrap()
            .state
            .epoch,
        3
    );
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let samples: Vec<_> = (0..2).map(|i| mixer(9).sample(0, i).unwrap()).collect();
    let mut t = Trainer::new(tiny_model(4), config(1)).unwrap();
    let before = t.evaluate_loss(&samples).unwrap().0;
    for _ in 0..60 {
        t.step(&samples, &[]).unwrap();
    }
    let after = t.evaluate_loss(&samples).unwrap().0;
    assert!(after < before - 1.0, "{before} -> {after}");
}
