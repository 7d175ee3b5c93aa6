//! Desk-scale supervised training: SGD with momentum, weight decay, and a
//! step learning-rate schedule. Masked dense entries receive zero gradient
//! and zero momentum, so they stay bit-exactly zero through any run.

use std::time::Instant;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `lr_step_factor` every `lr_step_every`
    /// epochs (0 disables the schedule).
    pub lr_step_every: usize,
    pub lr_step_factor: f64,
    pub seed: u64,
    /// Random horizontal flip per sample per epoch.
    pub augment_hflip: bool,
    /// Stop after the first epoch whose running train accuracy reaches this.
    pub stop_at_train_acc: Option<f64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step_every: 10,
            lr_step_factor: 0.1,
            seed: 0,
            augment_hflip: false,
            stop_at_train_acc: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr_step_factor <= 0.0 {
            return Err(Error::Config("lr step factor must be positive".into()));
        }
        Ok(())
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_step_every == 0 {
            return self.lr;
        }
        self.lr * self.lr_step_factor.powi((epoch / self.lr_step_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub wall_secs: f64,
}

impl TrainLog {
    /// CSV rows `epoch,loss,acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,acc\n");
        for (e, (loss, acc)) in self.epoch_loss.iter().zip(&self.val_accuracy).enumerate() {
            out.push_str(&format!("{e},{loss:.6},{acc:.6}\n"));
        }
        out
    }
}

/// Numerically stabilized softmax cross-entropy. Returns the loss and its
/// gradient with respect to the logits (`softmax - one_hot`).
pub fn cross_entropy_with_softmax(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - m);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Top-1 accuracy, first index on argmax ties.
pub fn evaluate(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    evaluate_threaded(model, ds, 1)
}

pub fn evaluate_threaded(model: &Model, ds: &LabeledDataset, threads: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let hits = parallel::map_indexed(ds.len(), threads, |i| {
        nn::forward(model, &ds.images[i]).map(|t| (t.predicted_class() == ds.labels[i]) as usize)
    });
    let correct: usize = hits.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
    Ok(correct as f64 / ds.len() as f64)
}

fn hflip(image: &Tensor) -> Tensor {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.set3(ch, i, j, image.at3(ch, i, w - 1 - j));
            }
        }
    }
    out
}

struct Momentum {
    convs: Vec<Vec<f64>>,
    denses: Vec<Vec<f64>>,
}

struct BatchGrads {
    convs: Vec<Vec<f64>>,
    denses: Vec<Vec<f64>>,
    loss: f64,
}

/// Per-sample forward/backward over one batch, accumulated in fixed chunks
/// so the result is identical for any thread count.
fn batch_gradients(
    model: &Model,
    ds: &LabeledDataset,
    batch: &[usize],
    flips: &[bool],
    threads: usize,
) -> Result<BatchGrads> {
    const CHUNK: usize = 8;
    let n_chunks = batch.len().div_ceil(CHUNK);
    let partials: Vec<Result<BatchGrads>> = parallel::map_indexed(n_chunks, threads, |ci| {
        let lo = ci * CHUNK;
        let hi = ((ci + 1) * CHUNK).min(batch.len());
        let mut acc = BatchGrads {
            convs: model.convs.iter().map(|b| vec![0.0; b.weights.len()]).collect(),
            denses: model.denses.iter().map(|d| vec![0.0; d.weights.len()]).collect(),
            loss: 0.0,
        };
        for &sample in &batch[lo..hi] {
            let image = if flips[sample] { hflip(&ds.images[sample]) } else { ds.images[sample].clone() };
            let trace = nn::forward(model, &image)?;
            let (loss, out_grad) = cross_entropy_with_softmax(&trace.output, ds.labels[sample])?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("batch loss".into()));
            }
            acc.loss += loss;
            let grads = nn::grad_params(model, &trace, &out_grad)?;
            for (a, g) in acc.convs.iter_mut().zip(&grads.conv_weights) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            for (a, g) in acc.denses.iter_mut().zip(&grads.dense_weights) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        Ok(acc)
    });

    let mut total = BatchGrads {
        convs: model.convs.iter().map(|b| vec![0.0; b.weights.len()]).collect(),
        denses: model.denses.iter().map(|d| vec![0.0; d.weights.len()]).collect(),
        loss: 0.0,
    };
    for part in partials {
        let part = part?;
        for (a, g) in total.convs.iter_mut().zip(&part.convs) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        for (a, g) in total.denses.iter_mut().zip(&part.denses) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
        total.loss += part.loss;
    }
    Ok(total)
}

fn sgd_update(weights: &mut [f64], grads: &[f64], velocity: &mut [f64], mask: Option<&[bool]>, lr: f64, momentum: f64, weight_decay: f64) {
    for i in 0..weights.len() {
        if let Some(mask) = mask {
            if !mask[i] {
                weights[i] = 0.0;
                velocity[i] = 0.0;
                continue;
            }
        }
        let g = grads[i] + weight_decay * weights[i];
        velocity[i] = momentum * velocity[i] + g;
        weights[i] -= lr * velocity[i];
    }
}

/// Train in place. Deterministic given the seed; masked weights and their
/// momentum buffers stay exactly zero.
pub fn train(
    model: &mut Model,
    train_ds: &LabeledDataset,
    val_ds: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    train_ds.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let started = Instant::now();
    let mut velocity = Momentum {
        convs: model.convs.iter().map(|b| vec![0.0; b.weights.len()]).collect(),
        denses: model.denses.iter().map(|d| vec![0.0; d.weights.len()]).collect(),
    };
    let mut epoch_loss = Vec::new();
    let mut val_accuracy = Vec::new();
    let n = train_ds.len();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng = Rng::from_seed_stream(cfg.seed, epoch as u64);
        epoch_rng.shuffle(&mut order);
        let flips: Vec<bool> = (0..n)
            .map(|_| cfg.augment_hflip && epoch_rng.next_f64() < 0.5)
            .collect();

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let grads = match batch_gradients(model, train_ds, batch, &flips, cfg.threads) {
                Ok(grads) => grads,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                Err(other) => return Err(other),
            };
            loss_sum += grads.loss;
            let scale = 1.0 / batch.len() as f64;
            for ((bank, g), v) in model.convs.iter_mut().zip(&grads.convs).zip(&mut velocity.convs) {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                sgd_update(&mut bank.weights, &scaled, v, None, lr, cfg.momentum, cfg.weight_decay);
            }
            for ((dense, g), v) in model.denses.iter_mut().zip(&grads.denses).zip(&mut velocity.denses) {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                sgd_update(
                    &mut dense.weights,
                    &scaled,
                    v,
                    dense.mask.as_deref(),
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                );
            }
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_loss.push(mean_loss);
        let acc = match val_ds {
            Some(val) => evaluate_threaded(model, val, cfg.threads)?,
            None => evaluate_threaded(model, train_ds, cfg.threads)?,
        };
        val_accuracy.push(acc);

        if let Some(target) = cfg.stop_at_train_acc {
            // Post-epoch evaluation, so the returned model meets the target.
            let train_acc = if val_ds.is_none() {
                acc
            } else {
                evaluate_threaded(model, train_ds, cfg.threads)?
            };
            if train_acc >= target {
                break;
            }
        }
    }
    Ok(TrainLog { epoch_loss, val_accuracy, wall_secs: started.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_digits;
    use crate::model::{build_model_m, ModelMConfig};
    use crate::testkit::{fd_safe_instance, rel_err};

    fn tiny_model(seed: u64) -> Model {
        build_model_m(&ModelMConfig {
            height: 28,
            width: 28,
            kernel: 5,
            filters: 4,
            pool: 2,
            dense_widths: vec![16, 10],
            mask_band_rows: Some(4),
            seed,
            tau: 0.1,
        })
        .unwrap()
    }

    fn all_params(model: &Model) -> Vec<u64> {
        model
            .convs
            .iter()
            .flat_map(|b| b.weights.iter())
            .chain(model.denses.iter().flat_map(|d| d.weights.iter()))
            .map(|w| w.to_bits())
            .collect()
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = tiny_model(1);
        let before = all_params(&model);
        let ds = synthetic_digits(2, 7);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 0.0, ..Default::default() };
        train(&mut model, &ds, None, &cfg).unwrap();
        assert_eq!(before, all_params(&model));
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let mut model = tiny_model(2);
        let ds = synthetic_digits(7, 11); // 70 samples
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            lr: 0.02,
            lr_step_every: 0,
            seed: 3,
            ..Default::default()
        };
        let log = train(&mut model, &ds, None, &cfg).unwrap();
        assert!(log.epoch_loss.len() == 4);
        assert!(
            log.epoch_loss.last().unwrap() < log.epoch_loss.first().unwrap(),
            "loss {:?}",
            log.epoch_loss
        );
    }

    #[test]
    fn masked_entries_stay_zero_through_training() {
        let mut model = tiny_model(3);
        let ds = synthetic_digits(3, 13);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, lr: 0.05, ..Default::default() };
        train(&mut model, &ds, None, &cfg).unwrap();
        assert!(model.masked_entries_are_zero());
        // And some unmasked weights did move.
        let fresh = tiny_model(3);
        assert_ne!(all_params(&fresh), all_params(&model));
    }

    #[test]
    fn weight_decay_shrinks_weights_without_data_gradient() {
        // All-zero images produce exactly zero data gradients everywhere, so
        // one step is pure decay: w <- w * (1 - lr * wd).
        let mut model = tiny_model(4);
        let before: Vec<f64> = model.convs[0].weights.clone();
        let zero_ds = crate::data::LabeledDataset {
            images: vec![Tensor::zeros(&[1, 28, 28]); 4],
            labels: vec![0, 1, 2, 3],
            class_names: (0..10).map(|c| c.to_string()).collect(),
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.01,
            lr_step_every: 0,
            ..Default::default()
        };
        train(&mut model, &zero_ds, None, &cfg).unwrap();
        let factor = 1.0 - 0.1 * 0.01;
        for (w0, w1) in before.iter().zip(&model.convs[0].weights) {
            assert!(rel_err(*w1, w0 * factor) <= 1e-12, "{w0} -> {w1}");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = synthetic_digits(3, 17);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.03,
            seed: 5,
            augment_hflip: true,
            threads: 2,
            ..Default::default()
        };
        let mut a = tiny_model(6);
        let log_a = train(&mut a, &ds, None, &cfg).unwrap();
        let mut b = tiny_model(6);
        let log_b = train(&mut b, &ds, None, &cfg).unwrap();
        assert_eq!(all_params(&a), all_params(&b));
        for (x, y) in log_a.epoch_loss.iter().zip(&log_b.epoch_loss) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in log_a.val_accuracy.iter().zip(&log_b.val_accuracy) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = tiny_model(7);
        let ds = synthetic_digits(2, 19);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e12,
            lr_step_every: 0,
            ..Default::default()
        };
        match train(&mut model, &ds, None, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let logits = vec![0.3; 5];
        let (loss, _) = cross_entropy_with_softmax(&logits, 2).unwrap();
        assert!((loss - (5.0f64).ln()).abs() <= 1e-12);

        let logits = vec![0.4, -1.2, 2.0, 0.0];
        let (l0, grad) = cross_entropy_with_softmax(&logits, 1).unwrap();
        assert!(l0 >= 0.0);
        for i in 0..4 {
            let h = 1e-6;
            let mut plus = logits.clone();
            plus[i] += h;
            let mut minus = logits.clone();
            minus[i] -= h;
            let (lp, _) = cross_entropy_with_softmax(&plus, 1).unwrap();
            let (lm, _) = cross_entropy_with_softmax(&minus, 1).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(grad[i], fd) <= 1e-6, "logit {i}: {} vs {fd}", grad[i]);
        }
        assert!(cross_entropy_with_softmax(&logits, 9).is_err());
    }

    #[test]
    fn evaluate_tie_break_and_range() {
        // Constant logits predict class 0; a balanced 2-class set scores 0.5.
        let mut model = tiny_model(8);
        for dense in model.denses.iter_mut() {
            dense.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let digits = synthetic_digits(2, 23);
        let two_class = crate::data::LabeledDataset {
            images: digits.images[..4].to_vec(),
            labels: vec![0, 0, 1, 1],
            class_names: vec!["0".into(), "1".into()],
        };
        let acc = evaluate(&model, &two_class).unwrap();
        assert!((acc - 0.5).abs() <= 1e-12);

        let ds = synthetic_digits(1, 29);
        let acc = evaluate(&tiny_model(8), &ds).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(evaluate(&tiny_model(8), &crate::data::LabeledDataset {
            images: vec![],
            labels: vec![],
            class_names: vec![],
        })
        .is_err());
    }

    #[test]
    fn overfits_ten_samples() {
        let mut model = build_model_m(&ModelMConfig {
            height: 28,
            width: 28,
            kernel: 5,
            filters: 6,
            pool: 2,
            dense_widths: vec![24, 10],
            mask_band_rows: None,
            seed: 9,
            tau: 0.1,
        })
        .unwrap();
        let digits = synthetic_digits(1, 31); // one image per class
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 5,
            lr: 0.05,
            lr_step_every: 0,
            weight_decay: 0.0,
            seed: 7,
            stop_at_train_acc: Some(1.0),
            ..Default::default()
        };
        train(&mut model, &digits, None, &cfg).unwrap();
        let acc = evaluate(&model, &digits).unwrap();
        assert_eq!(acc, 1.0, "memorization of 10 samples");
    }

    #[test]
    fn train_log_csv_shape() {
        let log = TrainLog {
            epoch_loss: vec![2.0, 1.0],
            val_accuracy: vec![0.25, 0.75],
            wall_secs: 1.0,
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,loss,acc"));
        assert_eq!(lines.next(), Some("0,2.000000,0.250000"));
        assert_eq!(lines.next(), Some("1,1.000000,0.750000"));
    }

    #[test]
    fn loss_gradient_consistency_through_params() {
        // End-to-end: d loss / d w matches finite differences when chained
        // through the cross-entropy gradient.
        let (model, image, trace) = fd_safe_instance(120, vec![5, 3], 2, None);
        let label = 1;
        let (_, out_grad) = cross_entropy_with_softmax(&trace.output, label).unwrap();
        let grads = crate::nn::grad_params(&model, &trace, &out_grad).unwrap();
        let mut rng = crate::rng::Rng::new(121);
        for _ in 0..20 {
            let idx = rng.next_below(model.denses[0].weights.len());
            let h = 1e-4 * model.denses[0].weights[idx].abs().max(1.0);
            let mut plus = model.clone();
            plus.denses[0].weights[idx] += h;
            let mut minus = model.clone();
            minus.denses[0].weights[idx] -= h;
            let lp = cross_entropy_with_softmax(&crate::nn::forward(&plus, &image).unwrap().output, label)
                .unwrap()
                .0;
            let lm = cross_entropy_with_softmax(&crate::nn::forward(&minus, &image).unwrap().output, label)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                rel_err(grads.dense_weights[0][idx], fd) <= 1e-5,
                "weight {idx}: {} vs {fd}",
                grads.dense_weights[0][idx]
            );
        }
    }
}
