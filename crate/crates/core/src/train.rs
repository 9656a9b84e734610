//! Model bundle, batch gradients, the SGD training loop and evaluation.

use std::path::Path;

use crate::autodiff::{checkpoint, Gradients, Graph, ParamStore};
use crate::data::{to_model_input, PairSample};
use crate::detector::{decode_boxes, nms, DecodeParams, Detector, DetectorConfig, ForwardOptions, STRIDES};
use crate::error::{CftError, Result};
use crate::geometry::{Detection, GroundTruth};
use crate::loss::{assign_targets, total_loss, LossValues, LossWeights, TargetAssignment};
use crate::metrics::{map_suite, Interpolation, MapReport};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Multiply the learning rate by `factor` every `every` epochs.
    pub lr_step: Option<(usize, f64)>,
    /// Fan per-sample gradients out over threads (only effective with the
    /// `parallel` feature). Results do not depend on it.
    pub parallel: bool,
    /// Train with every fusion correction forced to zero.
    pub zero_deltas: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 1e-2,
            momentum: 0.937,
            weight_decay: 5e-4,
            seed: 0,
            loss_weights: LossWeights::default(),
            lr_step: None,
            parallel: true,
            zero_deltas: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CftError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CftError::Config(
                "need lr > 0, momentum in [0, 1) and weight_decay >= 0".into(),
            ));
        }
        if let Some((every, factor)) = self.lr_step {
            if every == 0 || !(factor > 0.0) {
                return Err(CftError::Config("lr step needs a positive period and factor".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            Some((every, factor)) => self.lr * factor.powi((epoch / every) as i32),
            None => self.lr,
        }
    }
}

/// A sample converted to model tensors with its targets assigned.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
    pub assignment: TargetAssignment,
}

pub fn prepare(sample: &PairSample) -> Result<Prepared> {
    let (rgb, thermal) = to_model_input(sample);
    let (w, h) = (sample.width(), sample.height());
    let grids = STRIDES.map(|s| w / s);
    let assignment = assign_targets(&sample.annotations, &grids, w as f64, h as f64)?;
    Ok(Prepared {
        rgb,
        thermal,
        gts: sample.annotations.clone(),
        assignment,
    })
}

pub fn prepare_all(samples: &[PairSample]) -> Result<Vec<Prepared>> {
    parallel::map_indexed(samples.len(), |i| prepare(&samples[i]))
        .into_iter()
        .collect()
}

/// Detector plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub detector: Detector,
    pub store: ParamStore<f32>,
}

impl Model {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let detector = Detector::new(cfg, &mut store, seed)?;
        Ok(Model { detector, store })
    }

    pub fn config(&self) -> &DetectorConfig {
        self.detector.config()
    }

    /// Raw head maps for one input pair.
    pub fn heads(&self, rgb: &Tensor<f32>, thermal: &Tensor<f32>, opts: ForwardOptions) -> Result<[Tensor<f32>; 3]> {
        let g = Graph::new();
        let out = self
            .detector
            .forward(&g, &self.store, g.constant(rgb.clone()), g.constant(thermal.clone()), opts)?;
        Ok(out.heads.map(|h| (*h.value()).clone()))
    }

    /// Decoded, suppressed detections for one input pair.
    pub fn detect(&self, rgb: &Tensor<f32>, thermal: &Tensor<f32>, params: &DecodeParams) -> Result<Vec<Detection>> {
        let heads = self.heads(rgb, thermal, ForwardOptions::default())?;
        let mut all = Vec::new();
        for (map, stride) in heads.iter().zip(STRIDES) {
            all.extend(decode_boxes(map, stride, params)?);
        }
        Ok(nms(&all, params.iou_threshold))
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(
        &self,
        sample: &Prepared,
        weights: &LossWeights,
        opts: ForwardOptions,
    ) -> Result<(LossValues, Gradients<f32>)> {
        let g = Graph::new();
        let out = self.detector.forward(
            &g,
            &self.store,
            g.constant(sample.rgb.clone()),
            g.constant(sample.thermal.clone()),
            opts,
        )?;
        let loss = total_loss(&out.heads, &sample.assignment, weights)?;
        let grads = g.backward(loss.total)?;
        Ok((loss.values(), grads))
    }

    /// Mean loss and mean gradient over `batch`. Per-sample results are
    /// summed in batch order whichever way they were computed.
    pub fn batch_gradients(
        &self,
        batch: &[&Prepared],
        weights: &LossWeights,
        opts: ForwardOptions,
        parallel_run: bool,
    ) -> Result<(LossValues, Gradients<f32>)> {
        if batch.is_empty() {
            return Err(CftError::contract("empty batch"));
        }
        let work = |i: usize| self.sample_gradients(batch[i], weights, opts);
        let results = if parallel_run {
            parallel::map_indexed(batch.len(), work)
        } else {
            parallel::map_indexed_sequential(batch.len(), work)
        };
        let mut loss = LossValues::default();
        let mut grads = Gradients::default();
        for r in results {
            let (l, g) = r?;
            loss.add(&l);
            grads.add_assign(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv as f32);
        Ok((loss.scaled(inv), grads))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn load(cfg: DetectorConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Model::new(cfg, 0)?;
        checkpoint::load_into(&mut model.store, path)?;
        Ok(model)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossValues,
}

pub const LOG_HEADER: &str = "epoch,box,cls,obj,noobj,total";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, l.box_loss, l.cls, l.obj, l.noobj, l.total
        )
    }
}

/// Visiting order of epoch `epoch`: a seeded Fisher-Yates shuffle.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = Rng::derive(seed ^ 0x7368_7566_666c_6521, epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    order
}

/// Train in place. `on_epoch` sees each epoch's mean losses and the model
/// after that epoch's updates.
pub fn train(
    model: &mut Model,
    data: &[Prepared],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CftError::contract("no training samples"));
    }
    let opts = ForwardOptions {
        zero_deltas: cfg.zero_deltas,
        ..ForwardOptions::default()
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let lr = cfg.lr_at(epoch - 1);
        let mut sum = LossValues::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model.batch_gradients(&batch, &cfg.loss_weights, opts, cfg.parallel)?;
            sum.add(&loss.scaled(batch.len() as f64));
            model.store.zero_grad();
            model.store.accumulate(&grads);
            model.store.sgd_step(lr, cfg.momentum, cfg.weight_decay)?;
        }
        let log = EpochLog {
            epoch,
            loss: sum.scaled(1.0 / data.len() as f64),
        };
        if !log.loss.total.is_finite() {
            return Err(CftError::NonFinite("epoch loss"));
        }
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Detections for every sample, in sample order.
pub fn predict_all(model: &Model, data: &[Prepared], params: &DecodeParams) -> Result<Vec<Vec<Detection>>> {
    parallel::map_indexed(data.len(), |i| model.detect(&data[i].rgb, &data[i].thermal, params))
        .into_iter()
        .collect()
}

pub fn evaluate(model: &Model, data: &[Prepared], params: &DecodeParams, interp: Interpolation) -> Result<MapReport> {
    let dets = predict_all(model, data, params)?;
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(|d| d.gts.clone()).collect();
    Ok(map_suite(&dets, &gts, model.config().num_classes, interp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_permutation() {
        let mut o = epoch_order(50, 3, 2);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
        assert_eq!(epoch_order(50, 3, 2), epoch_order(50, 3, 2));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr_step: Some((10, 0.1)),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 1e-2);
        assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-15);
    }
}
