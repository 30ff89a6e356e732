//! Minibatch SGD with momentum, weight decay and per-epoch cosine decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{ActivationKind, AnnModel, Architecture, Layer, LinearOp, ParamKind};
use crate::qcfs::{QcfsParams, DEFAULT_LAMBDA, LAMBDA_FLOOR};
use crate::tape::{self, GradTape, Var};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Quantization steps `L` of the QCFS layers.
    pub levels: u32,
    pub shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            levels: 4,
            shift: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and ≥ 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.levels == 0 {
            return bad("quantization steps L must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.shift) {
            return bad(format!("shift must lie in [0, 1), got {}", self.shift));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// `lr0 · ½(1 + cos(π·progress))`.
pub fn cosine_lr(lr0: f64, progress: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Mean softmax cross-entropy of `logits[B×C]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    tape::softmax_cross_entropy(logits, labels).map(|(loss, _)| loss)
}

/// Momentum buffers, one per parameter slice.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update at learning rate `lr`:
    /// `v ← μv + g + wd·p`, `p ← p − lr·v`. Thresholds get no decay and are
    /// projected onto `[LAMBDA_FLOOR, ∞)`.
    pub fn step(
        &mut self,
        params: Vec<(ParamKind, &mut [f64])>,
        grads: &[Vec<f64>],
        momentum: f64,
        weight_decay: f64,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameter slices but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        for (((kind, p), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::dim("sgd", &[p.len()], &[g.len()]));
            }
            let wd = if kind == ParamKind::Threshold {
                0.0
            } else {
                weight_decay
            };
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
            if kind == ParamKind::Threshold {
                for pi in p.iter_mut() {
                    *pi = pi.max(LAMBDA_FLOOR);
                }
            }
        }
        Ok(())
    }
}

/// SGD update at the cosine-scheduled rate for `epoch_progress ∈ [0, 1]`;
/// returns the rate used.
pub fn sgd_step(
    params: Vec<(ParamKind, &mut [f64])>,
    grads: &[Vec<f64>],
    state: &mut Sgd,
    cfg: &TrainConfig,
    epoch_progress: f64,
) -> Result<f64> {
    let lr = cosine_lr(cfg.lr0, epoch_progress);
    state.step(params, grads, cfg.momentum, cfg.weight_decay, lr)?;
    Ok(lr)
}

/// Freshly initialized QCFS network for `cfg`: a zero shift selects the
/// no-shift activation. Weights are drawn from a generator seeded with
/// `cfg.seed`.
pub fn build_model(arch: Architecture, sample_shape: &[usize], classes: usize, cfg: &TrainConfig) -> Result<AnnModel> {
    cfg.validate()?;
    let kind = if cfg.shift == 0.0 {
        ActivationKind::QcfNoShift
    } else {
        ActivationKind::Qcfs
    };
    let params = QcfsParams::new(cfg.levels, DEFAULT_LAMBDA, cfg.shift)?;
    arch.build(
        sample_shape,
        classes,
        kind,
        params,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )
}

/// Records the forward pass of `model` on `x` and returns the logits
/// together with the parameter handles, ordered as
/// [`AnnModel::params_mut`].
pub fn record(model: &AnnModel, tape: &mut GradTape, x: &Tensor) -> Result<(Var, Vec<Var>)> {
    let mut shape = vec![x.batch_len()];
    shape.extend_from_slice(model.input_shape());
    if x.shape() != shape.as_slice() {
        return Err(Error::dim("record", x.shape(), &shape));
    }
    let mut h = tape.constant(x.clone());
    let mut params = Vec::new();
    for layer in model.layers() {
        h = match layer {
            Layer::Linear(op) => match op {
                LinearOp::Dense { weight, bias } => {
                    let w = tape.param(weight.clone());
                    let b = tape.param(bias.clone());
                    params.extend([w, b]);
                    tape.linear(h, w, b)?
                }
                LinearOp::Conv2d {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let w = tape.param(weight.clone());
                    let b = tape.param(bias.clone());
                    params.extend([w, b]);
                    tape.conv2d(h, w, b, *stride, *pad)?
                }
                LinearOp::AvgPool2d { size } => tape.avgpool2d(h, *size)?,
                LinearOp::MaxPool2d { size } => tape.maxpool2d(h, *size)?,
                LinearOp::Flatten => {
                    let v = tape.value(h);
                    let flat = [v.batch_len(), v.sample_len()];
                    tape.reshape(h, &flat)?
                }
            },
            Layer::Activation { kind, params: p } => match kind {
                ActivationKind::Relu => tape.relu(h)?,
                ActivationKind::Qcfs | ActivationKind::QcfNoShift => {
                    let lambda = tape.param(Tensor::scalar(p.lambda));
                    params.push(lambda);
                    let shift = if *kind == ActivationKind::Qcfs { p.shift } else { 0.0 };
                    tape.qcfs(h, lambda, p.levels, shift)?
                }
                ActivationKind::ClipOnly => {
                    let lambda = tape.param(Tensor::scalar(p.lambda));
                    params.push(lambda);
                    tape.clip(h, lambda)?
                }
                ActivationKind::IfNeuron => return Err(Error::Usage("cannot train an if_neuron layer".into())),
            },
        };
    }
    Ok((h, params))
}

/// Mean loss and gradients (in [`AnnModel::params_mut`] order) on one batch;
/// also returns the number of correct predictions.
pub fn loss_and_grads(model: &AnnModel, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    let mut tape = GradTape::new();
    let (logits, params) = record(model, &mut tape, x)?;
    let correct = tape
        .value(logits)
        .argmax_rows()?
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let loss = tape.cross_entropy(logits, labels)?;
    let mut grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).item()?;
    let grads = params
        .iter()
        .map(|&p| match grads.take(p) {
            Some(g) => g.into_data(),
            None => vec![0.0; tape.value(p).len()],
        })
        .collect();
    Ok((loss_value, grads, correct))
}

/// Predicted class of every sample.
pub fn predict(model: &AnnModel, inputs: &Tensor) -> Result<Vec<usize>> {
    let n = inputs.batch_len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        out.extend(model.logits(&inputs.slice_batch(start, end)?)?.argmax_rows()?);
        start = end;
    }
    Ok(out)
}

/// Fraction of samples classified correctly.
pub fn accuracy(model: &AnnModel, data: &Dataset) -> Result<f64> {
    let pred = predict(model, &data.inputs)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,test_acc,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the highest test accuracy (earliest on ties).
    pub best: AnnModel,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    /// Weights after the last epoch.
    pub last: AnnModel,
    pub history: Vec<EpochStats>,
}

/// Runs `cfg.epochs` epochs of minibatch SGD. Each epoch visits the
/// training set in a Fisher-Yates order seeded by `cfg.seed + epoch + 1`
/// and uses the rate `cosine_lr(lr0, epoch / epochs)` (epoch 0-based).
pub fn train(
    model: AnnModel,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.sample_shape() != model.input_shape() {
        return Err(Error::dim("train", train_set.sample_shape(), model.input_shape()));
    }
    let mut model = model;
    let mut sgd = Sgd::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(AnnModel, usize, f64)> = None;
    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1)));
        let progress = epoch as f64 / cfg.epochs as f64;
        let lr = cosine_lr(cfg.lr0, progress);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.inputs.gather_batch(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads, hits) = match loss_and_grads(&model, &x, &labels) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        batch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;
            correct += hits;
            sgd.step(model.params_mut(), &grads, cfg.momentum, cfg.weight_decay, lr)?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc: accuracy(&model, test_set)?,
            lr,
        };
        on_epoch(&stats);
        if best.as_ref().map_or(true, |b| stats.test_acc > b.2) {
            best = Some((model.clone(), stats.epoch, stats.test_acc));
        }
        history.push(stats);
    }
    let (best, best_epoch, best_test_acc) = best.expect("epochs ≥ 1");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_test_acc,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0.0), 0.1);
        assert!(cosine_lr(0.1, 1.0).abs() < 1e-18);
        assert!((cosine_lr(0.1, 0.5) - 0.05).abs() < 1e-15);
    }

    fn one_param(kind: ParamKind, p: &mut [f64], g: f64, sgd: &mut Sgd, mom: f64, wd: f64, lr: f64) {
        let grads = vec![vec![g; p.len()]];
        sgd.step(vec![(kind, p)], &grads, mom, wd, lr).unwrap();
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = [1.0, 2.0];
        let mut sgd = Sgd::new();
        one_param(ParamKind::Weight, &mut p, 0.5, &mut sgd, 0.0, 0.0, 0.1);
        assert_eq!(p, [0.95, 1.95]);
    }

    #[test]
    fn momentum_second_step_is_one_point_nine() {
        let mut p = [0.0];
        let mut sgd = Sgd::new();
        one_param(ParamKind::Weight, &mut p, 1.0, &mut sgd, 0.9, 0.0, 0.1);
        let after_first = p[0];
        one_param(ParamKind::Weight, &mut p, 1.0, &mut sgd, 0.9, 0.0, 0.1);
        assert!(((after_first - p[0]) - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let cfg = TrainConfig::default();
        let mut p = [0.3];
        let grads = vec![vec![5.0]];
        let lr = sgd_step(vec![(ParamKind::Weight, &mut p)], &grads, &mut Sgd::new(), &cfg, 1.0).unwrap();
        assert!(lr.abs() < 1e-17);
        assert!((p[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn thresholds_skip_decay_and_stay_positive() {
        let mut sgd = Sgd::new();
        let mut w = [2.0];
        let mut lam = [2.0];
        let grads = vec![vec![0.0], vec![0.0]];
        sgd.step(
            vec![(ParamKind::Weight, &mut w), (ParamKind::Threshold, &mut lam)],
            &grads,
            0.0,
            0.1,
            1.0,
        )
        .unwrap();
        assert!((w[0] - 1.8).abs() < 1e-15);
        assert_eq!(lam[0], 2.0);
        let mut lam = [0.01];
        Sgd::new()
            .step(vec![(ParamKind::Threshold, &mut lam)], &[vec![1.0]], 0.0, 0.0, 1.0)
            .unwrap();
        assert_eq!(lam[0], LAMBDA_FLOOR);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
            TrainConfig {
                levels: 0,
                ..Default::default()
            },
            TrainConfig {
                lr0: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
