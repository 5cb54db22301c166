use std::path::PathBuf;

use vspsr::imaging::synth::natural_image;
use vspsr::imaging::{Dataset, DatasetSpec, NamedImage};
use vspsr::trainer::{fine_tune, train, LogRecord, Phase, TrainConfig, TrainLog, TrainOutputs, TrainState};
use vspsr::vspm::checkpoint::Checkpoint;
use vspsr::vspm::{VSpMConfig, VSpMModel};

fn toy_model() -> VSpMConfig {
    VSpMConfig {
        scale: 2,
        num_basis: 8,
        blocks: 1,
        width: 8,
        coeff_depth: 1,
        ..VSpMConfig::default()
    }
}

fn toy_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        lr: 3e-3,
        lr_decay_every: 100,
        batch_size: 2,
        lr_patch: 8,
        crops_per_image: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn toy_dataset(cfg: &TrainConfig, model: &VSpMConfig) -> Dataset {
    let images = (0..4)
        .map(|i| NamedImage {
            id: format!("toy{i}"),
            image: natural_image(32, 32, 40 + i),
        })
        .collect();
    let spec = DatasetSpec {
        dir: PathBuf::from("toy"),
        scale: model.scale,
        lr_patch: cfg.lr_patch,
        augment: cfg.augment,
        seed: cfg.seed,
    };
    Dataset::from_images(spec, images).unwrap()
}

fn fresh(cfg: &TrainConfig) -> TrainState {
    let model = VSpMModel::init(toy_model(), cfg.prior.scale(), cfg.seed).unwrap();
    TrainState::new(model, cfg)
}

fn step_losses(log: &TrainLog) -> Vec<(Phase, u64, f64, f64)> {
    log.step_records()
        .filter_map(|r| match r {
            LogRecord::Step {
                phase, step, l_x, l_total, ..
            } => Some((*phase, *step, *l_x, *l_total)),
            _ => None,
        })
        .collect()
}

#[test]
fn one_epoch_decreases_total_loss() {
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let cfg = toy_train(seed);
        let ds = toy_dataset(&cfg, &toy_model());
        let mut state = fresh(&cfg);
        let mut log = TrainLog::new();
        train(&mut state, &ds, &cfg, &mut log, &TrainOutputs::default()).unwrap();
        let losses = step_losses(&log);
        let first = losses[0].3;
        let tail: Vec<f64> = losses.iter().rev().take(2).map(|l| l.3).collect();
        deltas.push(tail.iter().sum::<f64>() / tail.len() as f64 - first);
    }
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[2] < 0.0, "median change {:.4}: {deltas:?}", deltas[2]);
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let cfg = toy_train(9);
    let ds = toy_dataset(&cfg, &toy_model());
    let run = || {
        let mut state = fresh(&cfg);
        train(&mut state, &ds, &cfg, &mut TrainLog::new(), &TrainOutputs::default()).unwrap();
        state.to_checkpoint().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_uninterrupted_trajectory() {
    let full = TrainConfig {
        epochs: 4,
        ..toy_train(3)
    };
    let ds = toy_dataset(&full, &toy_model());

    let mut straight = fresh(&full);
    let mut log_straight = TrainLog::new();
    train(&mut straight, &ds, &full, &mut log_straight, &TrainOutputs::default()).unwrap();

    let half = TrainConfig { epochs: 2, ..full.clone() };
    let mut first = fresh(&half);
    let mut log_resumed = TrainLog::new();
    train(&mut first, &ds, &half, &mut log_resumed, &TrainOutputs::default()).unwrap();
    let bytes = first.to_checkpoint().to_bytes().unwrap();
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 2);
    train(&mut resumed, &ds, &full, &mut log_resumed, &TrainOutputs::default()).unwrap();

    let a = step_losses(&log_straight);
    let b = step_losses(&log_resumed);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.1, y.1);
        assert_eq!(x.3.to_bits(), y.3.to_bits(), "step {}", x.1);
    }
    assert_eq!(
        straight.to_checkpoint().to_bytes().unwrap(),
        resumed.to_checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn fine_tune_switches_prior_and_continues() {
    let mut cfg = toy_train(5);
    cfg.epochs = 2;
    cfg.finetune.epochs = 1;
    let ds = toy_dataset(&cfg, &toy_model());
    let mut state = fresh(&cfg);
    let mut log = TrainLog::new();
    train(&mut state, &ds, &cfg, &mut log, &TrainOutputs::default()).unwrap();
    let before = state.to_checkpoint();
    assert_eq!(before.meta["prior_beta"].parse::<f64>().unwrap(), 0.5);
    let baseline_steps = state.global_step;

    fine_tune(&mut state, &ds, &cfg, &mut log, &TrainOutputs::default()).unwrap();
    let after = state.to_checkpoint();
    assert_eq!(after.meta["prior_beta"].parse::<f64>().unwrap(), 1.0);
    assert_eq!(after.meta["phase"], "finetune");
    assert_eq!(state.weights.lambda_adv, cfg.finetune.lambda_adv);

    let losses = step_losses(&log);
    assert!(losses.windows(2).all(|w| w[1].1 == w[0].1 + 1), "step counter must continue");
    let last_base = losses.iter().filter(|l| l.0 == Phase::Baseline).last().unwrap();
    let first_ft = losses.iter().find(|l| l.0 == Phase::Finetune).unwrap();
    assert_eq!(first_ft.1, baseline_steps);
    assert!(first_ft.2 <= 2.0 * last_base.2, "L_x {} after {} ", first_ft.2, last_base.2);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        checkpoint_every: 1,
        ..toy_train(2)
    };
    let ds = toy_dataset(&cfg, &toy_model());
    let mut state = fresh(&cfg);
    train(&mut state, &ds, &cfg, &mut TrainLog::new(), &TrainOutputs::in_dir(dir.path())).unwrap();
    for e in 1..=2 {
        let p = dir.path().join(format!("checkpoints/baseline-epoch{e:04}.ckpt"));
        let ck = Checkpoint::load_expecting(&p, &toy_model()).unwrap();
        assert_eq!(ck.meta["epoch"], e.to_string());
    }
}
