//! Mini-batch training and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, ImageDataset};
use crate::error::{AibError, Result};
use crate::model::{argmax_rows, AibModel, ForwardNoise, ForwardOutput, ParamStore};
use crate::noise::{NoiseSource, StreamId};
use crate::objective::{compute_loss, LossBreakdown, Objective};
use crate::optim::{sgd_step, LrSchedule, OptimState};
use crate::tape::{softmax_rows, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step_epochs: usize,
    pub lr_factor: f64,
    pub augment: bool,
    pub objective: Objective,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step_epochs: 25,
            lr_factor: 0.5,
            augment: true,
            objective: Objective::Full,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            step_epochs: self.lr_step_epochs,
            factor: self.lr_factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the metrics log.
///
/// Step records carry the loss of one mini-batch; epoch records carry the
/// means over the epoch's steps and, when a test split is given, `test_acc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    pub nll: f64,
    pub kl: f64,
    pub quant: f64,
    pub commit: f64,
    pub total: f64,
    pub lr: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_acc: Option<f64>,
}

impl MetricRecord {
    fn new(kind: RecordKind, epoch: usize, step: usize, loss: LossBreakdown, lr: f64, train_acc: f64) -> Self {
        MetricRecord {
            kind,
            epoch,
            step,
            nll: loss.nll,
            kl: loss.kl,
            quant: loss.quant,
            commit: loss.commit,
            total: loss.total,
            lr,
            train_acc,
            test_acc: None,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            nll: self.nll,
            kl: self.kl,
            quant: self.quant,
            commit: self.commit,
            total: self.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(out, "{}", r.to_json_line()).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| AibError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| AibError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| AibError::format(path, i as u64, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricRecord>,
    /// Parameters at the epoch with the best test (or, without a test split, train) accuracy.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub steps: usize,
}

impl TrainReport {
    pub fn epoch_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Epoch)
    }
}

/// Predicted classes from every logit matrix of a forward pass, by averaging
/// probabilities (or log-probabilities) across draws.
pub fn predict_from_output(tape: &Tape, output: &ForwardOutput, averaging: Averaging) -> Vec<usize> {
    let mut acc: Option<Vec<f64>> = None;
    let mut classes = 0;
    for branch in &output.branches {
        for &logits in &branch.logits {
            let t = tape.value(logits);
            classes = t.shape()[1];
            let probs = softmax_rows(t.data(), classes);
            let term: Vec<f64> = match averaging {
                Averaging::Probabilities => probs,
                Averaging::LogProbabilities => probs.into_iter().map(f64::ln).collect(),
            };
            match &mut acc {
                Some(a) => a.iter_mut().zip(term).for_each(|(x, y)| *x += y),
                None => acc = Some(term),
            }
        }
    }
    argmax_rows(&acc.expect("at least one logit matrix"), classes)
}

/// Trains `model` in place, calling `on_record` for every metric record as it
/// is produced.
pub fn train(
    model: &mut AibModel,
    train_set: &ImageDataset,
    test_set: Option<&ImageDataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(AibError::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(AibError::Config("batch_size must be at least 1".into()));
    }
    let source = NoiseSource::new(seed);
    let mut att = source.stream(StreamId::Attention);
    let mut lat = source.stream(StreamId::Latent);
    let mut shuffle = source.stream(StreamId::Shuffle);
    let mut aug = source.stream(StreamId::Augment);
    let schedule = cfg.schedule();
    let mut state = OptimState::new(model.params(), schedule.base_lr, cfg.momentum, cfg.weight_decay);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        state.lr = schedule.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(shuffle.rng());

        let mut sums = LossBreakdown::default();
        let mut steps_in_epoch = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut raw, labels) = train_set.batch(chunk)?;
            if cfg.augment {
                raw = augment(&raw, aug.rng());
            }
            let images = train_set.standardize(&raw);
            let noise = ForwardNoise::draw(model.config(), chunk.len(), &mut att, &mut lat);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = match compute_loss(&mut tape, model, &bound, &images, &labels, Some(&noise), cfg.objective, None) {
                // After an update, overflowing activations surface as invalid distribution scales.
                Err(AibError::Domain(_)) if step > 0 => {
                    return Err(AibError::Divergence { term: "sigma", epoch, step });
                }
                other => other?,
            };
            if let Some(term) = loss.breakdown.first_non_finite() {
                return Err(AibError::Divergence { term, epoch, step });
            }
            let preds = predict_from_output(&tape, &loss.output, Averaging::Probabilities);
            let batch_correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            correct += batch_correct;

            let grads = tape.backward(loss.total)?;
            let grads: Vec<_> = bound
                .vars()
                .iter()
                .zip(model.params().iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
                .collect();
            sgd_step(model.params_mut(), &grads, &mut state)?;
            if model.params().iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(AibError::Divergence { term: "parameters", epoch, step });
            }

            let b = loss.breakdown;
            sums.nll += b.nll;
            sums.kl += b.kl;
            sums.quant += b.quant;
            sums.commit += b.commit;
            sums.total += b.total;
            steps_in_epoch += 1;

            let record = MetricRecord::new(
                RecordKind::Step,
                epoch,
                step,
                b,
                state.lr,
                batch_correct as f64 / chunk.len() as f64,
            );
            on_record(&record);
            records.push(record);
            step += 1;
        }

        let k = steps_in_epoch as f64;
        let means = LossBreakdown {
            nll: sums.nll / k,
            kl: sums.kl / k,
            quant: sums.quant / k,
            commit: sums.commit / k,
            total: sums.total / k,
        };
        let train_acc = correct as f64 / train_set.len() as f64;
        let mut record = MetricRecord::new(RecordKind::Epoch, epoch, step - 1, means, state.lr, train_acc);
        let score = match test_set {
            Some(test) => {
                let report = evaluate(model, test, EvalMode::Mean, cfg.eval_batch_size)?;
                record.test_acc = Some(report.accuracy);
                report.accuracy
            }
            None => train_acc,
        };
        if best.as_ref().is_none_or(|(acc, _, _)| score > *acc) {
            best = Some((score, epoch, model.params().clone()));
        }
        on_record(&record);
        records.push(record);
    }

    let (best_accuracy, best_epoch, best_params) = best.unwrap_or_else(|| (0.0, 0, model.params().clone()));
    Ok(TrainReport {
        records,
        best_params,
        best_epoch,
        best_accuracy,
        steps: step,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    #[default]
    Probabilities,
    LogProbabilities,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum EvalMode {
    /// Means replace every sample; deterministic.
    Mean,
    /// Sampled attention and latents from the given seed.
    Stochastic { seed: u64, averaging: Averaging },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub samples: usize,
    pub loss: LossBreakdown,
}

/// Top-1 accuracy and the sample-weighted mean loss breakdown.
pub fn evaluate(model: &AibModel, ds: &ImageDataset, mode: EvalMode, batch_size: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(AibError::Config("evaluation set is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut att, mut lat, averaging) = match mode {
        EvalMode::Mean => (None, None, Averaging::Probabilities),
        EvalMode::Stochastic { seed, averaging } => {
            let source = NoiseSource::new(seed);
            (
                Some(source.stream(StreamId::Attention)),
                Some(source.stream(StreamId::Latent)),
                averaging,
            )
        }
    };
    let mut correct = 0usize;
    let mut sums = LossBreakdown::default();
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (raw, labels) = ds.batch(chunk)?;
        let images = ds.standardize(&raw);
        let noise = match (&mut att, &mut lat) {
            (Some(a), Some(l)) => Some(ForwardNoise::draw(model.config(), chunk.len(), a, l)),
            _ => None,
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let loss = compute_loss(&mut tape, model, &bound, &images, &labels, noise.as_ref(), Objective::Full, None)?;
        let preds = predict_from_output(&tape, &loss.output, averaging);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let w = chunk.len() as f64;
        let b = loss.breakdown;
        sums.nll += w * b.nll;
        sums.kl += w * b.kl;
        sums.quant += w * b.quant;
        sums.commit += w * b.commit;
        sums.total += w * b.total;
    }
    let n = ds.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        samples: ds.len(),
        loss: LossBreakdown {
            nll: sums.nll / n,
            kl: sums.kl / n,
            quant: sums.quant / n,
            commit: sums.commit / n,
            total: sums.total / n,
        },
    })
}

/// Trailing-window means of `values` (window clipped at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{ConvBlock, ModelConfig};
    use crate::tensor::Tensor;

    fn toy_sets(n: usize) -> ImageDataset {
        // Class 1 images are bright on the left half, class 0 on the right.
        let images = Tensor::from_fn([n, 1, 6, 6], |i| {
            let img = i / 36;
            let col = i % 6;
            let bright = if img % 2 == 1 { col < 3 } else { col >= 3 };
            if bright {
                0.9
            } else {
                0.1
            }
        });
        let labels = (0..n).map(|i| i % 2).collect();
        ImageDataset::new(images, labels, 2, Split::Train).unwrap()
    }

    fn toy_model() -> AibModel {
        let mut c = ModelConfig::new(2, [1, 6, 6]);
        c.backbone = vec![ConvBlock { channels: 4, pool: true }];
        c.latent_dim = 4;
        c.anchors = 5;
        c.att_samples = 2;
        c.z_samples = 2;
        AibModel::new(c, 1).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            base_lr: 0.05,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_of_256_is_two_steps() {
        let ds = toy_sets(256);
        let mut model = toy_model();
        let report = train(&mut model, &ds, None, &toy_cfg(), 3, |_| {}).unwrap();
        assert_eq!(report.steps, 2);
        assert_eq!(report.records.iter().filter(|r| r.kind == RecordKind::Step).count(), 2);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let ds = toy_sets(40);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            augment: true,
            ..toy_cfg()
        };
        let mut m1 = toy_model();
        let mut m2 = toy_model();
        let r1 = train(&mut m1, &ds, Some(&ds), &cfg, 9, |_| {}).unwrap();
        let r2 = train(&mut m2, &ds, Some(&ds), &cfg, 9, |_| {}).unwrap();
        let l1: Vec<String> = r1.records.iter().map(|r| r.to_json_line()).collect();
        let l2: Vec<String> = r2.records.iter().map(|r| r.to_json_line()).collect();
        assert_eq!(l1, l2);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn empty_dataset_rejected() {
        let ds = toy_sets(4);
        let mut model = toy_model();
        let cfg = TrainConfig {
            batch_size: 0,
            ..toy_cfg()
        };
        assert!(matches!(train(&mut model, &ds, None, &cfg, 0, |_| {}), Err(AibError::Config(_))));
    }

    #[test]
    fn divergence_names_term() {
        let ds = toy_sets(8);
        let mut model = toy_model();
        for p in model.params_mut().iter_mut().filter(|p| p.name == "decoder.fc2.bias") {
            p.value = Tensor::full(p.value.shape(), f64::NAN);
        }
        let err = train(&mut model, &ds, None, &toy_cfg(), 0, |_| {}).unwrap_err();
        assert!(matches!(err, AibError::Divergence { term: "nll", .. }));
    }

    #[test]
    fn mean_evaluation_is_repeatable() {
        let ds = toy_sets(20);
        let model = toy_model();
        let a = evaluate(&model, &ds, EvalMode::Mean, 7).unwrap();
        let b = evaluate(&model, &ds, EvalMode::Mean, 7).unwrap();
        assert_eq!(a, b);
        let s = EvalMode::Stochastic {
            seed: 4,
            averaging: Averaging::LogProbabilities,
        };
        assert_eq!(evaluate(&model, &ds, s, 7).unwrap(), evaluate(&model, &ds, s, 7).unwrap());
    }

    #[test]
    fn memorizes_tiny_separable_set() {
        let ds = toy_sets(32);
        let mut model = toy_model();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            ..toy_cfg()
        };
        train(&mut model, &ds, None, &cfg, 5, |_| {}).unwrap();
        let report = evaluate(&model, &ds, EvalMode::Mean, 32).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[4.0, 2.0, 0.0], 2), vec![4.0, 3.0, 1.0]);
    }
}
