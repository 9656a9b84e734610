//! Training loop: determinism, reduction order and the zero-correction path.

use cft_core::autodiff::checkpoint;
use cft_core::data::{synthesize, SynthParams};
use cft_core::detector::{DecodeParams, DetectorConfig, ForwardOptions, Mode};
use cft_core::loss::LossWeights;
use cft_core::metrics::Interpolation;
use cft_core::train::{evaluate, prepare_all, train, Model, Prepared, TrainConfig};

fn data(n: u64) -> Vec<Prepared> {
    let params = SynthParams::default();
    let samples: Vec<_> = (0..n).map(|i| synthesize(17, i, &params).unwrap().sample).collect();
    prepare_all(&samples).unwrap()
}

fn model(mode: Mode, seed: u64) -> Model {
    Model::new(DetectorConfig { mode, ..DetectorConfig::default() }, seed).unwrap()
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let d = data(6);
    let batch: Vec<&Prepared> = d.iter().collect();
    let m = model(Mode::Cft, 1);
    let w = LossWeights::default();
    let (lp, gp) = m.batch_gradients(&batch, &w, ForwardOptions::default(), true).unwrap();
    let (ls, gs) = m.batch_gradients(&batch, &w, ForwardOptions::default(), false).unwrap();
    assert_eq!(lp, ls);
    let a: Vec<_> = gp.params().collect();
    let b: Vec<_> = gs.params().collect();
    assert_eq!(a, b);
}

#[test]
fn short_run_is_finite_and_deterministic() {
    let d = data(10);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let run = || {
        let mut m = model(Mode::Cft, 2);
        let logs = train(&mut m, &d, &cfg, |_, _| Ok(())).unwrap();
        (logs, checkpoint::encode(&m.store))
    };
    let (logs, bytes) = run();
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.loss.total.is_finite()));
    let (logs2, bytes2) = run();
    assert_eq!(logs, logs2);
    assert_eq!(bytes, bytes2);
}

#[test]
fn zero_correction_training_follows_the_baseline() {
    let d = data(8);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let mut base = model(Mode::TwoStream, 3);
    let base_logs = train(&mut base, &d, &cfg, |_, _| Ok(())).unwrap();
    let mut fused = model(Mode::Cft, 3);
    let zero = TrainConfig { zero_deltas: true, ..cfg.clone() };
    let fused_logs = train(&mut fused, &d, &zero, |_, _| Ok(())).unwrap();
    assert_eq!(base_logs, fused_logs);
    for (_, p) in base.store.iter() {
        let pid = fused.store.find(p.id()).unwrap();
        assert_eq!(fused.store.value(pid), p.value());
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let d = data(4);
    let mut m = model(Mode::RgbOnly, 4);
    train(&mut m, &d, &TrainConfig { epochs: 1, ..TrainConfig::default() }, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(m.config().clone(), &path).unwrap();
    let params = DecodeParams { score_threshold: 0.01, ..DecodeParams::new(64) };
    assert_eq!(
        evaluate(&m, &d, &params, Interpolation::AllPoints).unwrap(),
        evaluate(&back, &d, &params, Interpolation::AllPoints).unwrap()
    );
}
