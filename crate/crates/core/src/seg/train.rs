use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::seg::data::{stack, LabeledGrid};
use crate::seg::metrics::{evaluate, EvalReport};
use crate::seg::model::SegModel;
use crate::seg::optim::{poly_lr, Adam};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    /// Weight each class by `median(freq) / freq_c` over the training labels.
    pub median_balancing: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Horizontal flip with probability 0.5.
    pub flip: bool,
    /// Random `[height, width]` crop applied to every training sample.
    pub crop: Option<[usize; 2]>,
    /// Stddev of additive Gaussian input noise; 0 disables it.
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            base_lr: 0.001,
            poly_power: 0.9,
            batch_size: 10,
            median_balancing: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            flip: false,
            crop: None,
            jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return err("train.epochs must be >= 1");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return err("train.base_lr must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return err("train.batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return err("train.beta1/beta2 must lie in [0, 1) and train.eps must be positive");
        }
        if !(self.jitter >= 0.0) || !(self.poly_power >= 0.0) {
            return err("train.jitter and train.poly_power must be non-negative");
        }
        if matches!(self.crop, Some([h, w]) if h == 0 || w == 0) {
            return err("train.crop extents must be positive");
        }
        Ok(())
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        poly_lr(self.base_lr, epoch, self.epochs, self.poly_power)
    }
}

/// Per-class weights `median(freq) / freq_c`, with frequencies taken over
/// classes that occur; absent classes get weight 0. For an even number of
/// present classes the median is the mean of the two middle frequencies.
pub fn median_frequency_weights(histogram: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::contract("median frequency weights need at least one labeled pixel"));
    }
    let freq = |c: u64| c as f64 / total as f64;
    let mut present: Vec<f64> = histogram.iter().filter(|&&c| c > 0).map(|&c| freq(c)).collect();
    present.sort_by(f64::total_cmp);
    let k = present.len();
    let median = if k % 2 == 1 {
        present[k / 2]
    } else {
        0.5 * (present[k / 2 - 1] + present[k / 2])
    };
    Ok(histogram
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { median / freq(c) })
        .collect())
}

/// Label counts per class, ignoring unlabeled pixels.
pub fn label_histogram(data: &[LabeledGrid], num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes];
    for t in data.iter().flat_map(|g| g.targets()).flatten() {
        if t < num_classes {
            hist[t] += 1;
        }
    }
    hist
}

/// Mean over labeled pixels of `w[label] * -log softmax(logits)[label]`;
/// `logits` may be `[.., n]` of any rank.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    weights: &[f64],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let n = *shape.last().expect("tensors have rank >= 1");
    let flat = if shape.len() == 2 {
        logits
    } else {
        tape.reshape(logits, &[shape.iter().product::<usize>() / n, n])?
    };
    tape.cross_entropy(flat, targets, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
    /// Held-out evaluation, when a held-out split is given.
    pub report: Option<EvalReport>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,global,class_avg,lr";

    pub fn csv_row(&self) -> String {
        let (g, c) = match &self.report {
            Some(r) => (r.global.to_string(), r.class_average.to_string()),
            None => (String::new(), String::new()),
        };
        format!("{},{},{},{},{}", self.epoch, self.loss, g, c, self.lr)
    }
}

fn class_weights(model: &SegModel, data: &[LabeledGrid], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let n = model.config().num_classes;
    if cfg.median_balancing {
        median_frequency_weights(&label_histogram(data, n))
    } else {
        Ok(vec![1.0; n])
    }
}

fn batch_loss(model: &SegModel, batch: &[&LabeledGrid], weights: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let (images, targets) = stack(batch)?;
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let x = tape.constant(images);
    let logits = model.forward(&mut tape, &vars, x)?;
    let loss = weighted_cross_entropy(&mut tape, logits, &targets, weights)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Mean loss of `model` over `data` in batches, without updating anything.
pub fn dataset_loss(model: &SegModel, data: &[LabeledGrid], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot compute a loss on an empty dataset"));
    }
    let weights = class_weights(model, data, cfg)?;
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in data.chunks(cfg.batch_size) {
        let refs: Vec<&LabeledGrid> = chunk.iter().collect();
        let (images, targets) = stack(&refs)?;
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let x = tape.constant(images);
        let logits = model.forward(&mut tape, &vars, x)?;
        let loss = weighted_cross_entropy(&mut tape, logits, &targets, &weights)?;
        total += tape.value(loss).data()[0];
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn augment(sample: &LabeledGrid, cfg: &TrainConfig, rng: &mut Rng) -> Result<LabeledGrid> {
    let mut s = if cfg.flip && rng.bernoulli(0.5) {
        sample.flipped()
    } else {
        sample.clone()
    };
    if let Some([h, w]) = cfg.crop {
        if h > s.height() || w > s.width() {
            return Err(Error::Config(format!(
                "crop {h}x{w} exceeds sample extents {}x{}",
                s.height(),
                s.width()
            )));
        }
        let top = rng.below(s.height() - h + 1);
        let left = rng.below(s.width() - w + 1);
        s = s.cropped(top, left, h, w)?;
    }
    if cfg.jitter > 0.0 {
        s = s.jittered(rng, cfg.jitter);
    }
    Ok(s)
}

/// [`train_with`] without a progress callback.
pub fn train(
    model: &mut SegModel,
    train_set: &[LabeledGrid],
    held_out: &[LabeledGrid],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    train_with(model, train_set, held_out, cfg, |_, _| Ok(()))
}

/// Minibatch Adam on weighted cross entropy with a per-epoch poly learning
/// rate. Sample order and augmentation are drawn from `cfg.seed`, so a run
/// is a pure function of its inputs. `on_epoch` sees each epoch's metrics and
/// the weights at the end of that epoch; an error from it stops training.
pub fn train_with(
    model: &mut SegModel,
    train_set: &[LabeledGrid],
    held_out: &[LabeledGrid],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &SegModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let weights = class_weights(model, train_set, cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let samples = idx
                .iter()
                .map(|&i| augment(&train_set[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&LabeledGrid> = samples.iter().collect();
            let (loss, grads) = batch_loss(model, &refs, &weights)?;
            if !loss.is_finite() {
                return Err(Error::contract(format!("loss diverged to {loss} in epoch {}", epoch + 1)));
            }
            adam.step(model.params_mut(), &grads, lr)?;
            total += loss;
            batches += 1;
        }
        let report = if held_out.is_empty() {
            None
        } else {
            Some(evaluate(model, held_out)?)
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: total / batches as f64,
            lr,
            report,
        };
        on_epoch(&m, model)?;
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seg::model::{ConvStage, HeadStage, SegModelConfig};

    #[test]
    fn median_weights() {
        assert_eq!(median_frequency_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = median_frequency_weights(&[50, 30, 20]).unwrap();
        for (a, b) in w.iter().zip([0.6, 1.0, 1.5]) {
            assert!((a - b).abs() < 1e-12, "{w:?}");
        }
        assert_eq!(median_frequency_weights(&[0, 9]).unwrap(), vec![0.0, 1.0]);
        assert!(median_frequency_weights(&[0, 0]).is_err());
        assert!(median_frequency_weights(&[]).is_err());
    }

    #[test]
    fn weighted_ce_hand_case() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap());
        let loss = weighted_cross_entropy(&mut tape, logits, &[Some(0), Some(1)], &[1.0, 2.0]).unwrap();
        let l0 = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let l1 = -(2f64.exp() / (0.5f64.exp() + 2f64.exp())).ln();
        let expected = (l0 + 2.0 * l1) / 2.0;
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let mut rng = Rng::new(3);
        let t = Tensor::uniform(&mut rng, &[2, 3, 3, 4], -2.0, 2.0).unwrap();
        let targets: Vec<Option<usize>> = (0..18).map(|i| (i % 5 != 0).then_some(i % 4)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let a = weighted_cross_entropy(&mut tape, x, &targets, &[1.0; 4]).unwrap();
        let mut manual = 0.0;
        let mut count = 0.0;
        for (i, tg) in targets.iter().enumerate() {
            let Some(l) = tg else { continue };
            let row = t.row(i);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            manual += lse - row[*l];
            count += 1.0;
        }
        assert!((tape.value(a).data()[0] - manual / count).abs() < 1e-12);
    }

    fn tiny_model(seed: u64) -> SegModel {
        let cfg = SegModelConfig {
            in_channels: 2,
            encoder: vec![ConvStage {
                out_channels: 3,
                pool: true,
            }],
            hidden_width: 3,
            scales: 1,
            head: vec![HeadStage::Upsample, HeadStage::Logits],
            num_classes: 2,
            ..Default::default()
        };
        SegModel::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn tiny_data(n: usize, seed: u64) -> Vec<LabeledGrid> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let img = Tensor::uniform(&mut rng, &[4, 4, 2], -1.0, 1.0).unwrap();
                let labels = img.data().chunks(2).map(|p| u8::from(p[0] > p[1])).collect();
                LabeledGrid::new(img, labels, 2).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut model = tiny_model(0);
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 1,
            base_lr: 0.0,
            batch_size: 2,
            flip: true,
            jitter: 0.1,
            ..Default::default()
        };
        train(&mut model, &tiny_data(4, 1), &[], &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn overfits_one_batch() {
        let mut model = tiny_model(2);
        let data = tiny_data(2, 5);
        let cfg = TrainConfig {
            epochs: 20,
            base_lr: 0.02,
            batch_size: 2,
            ..Default::default()
        };
        let start = dataset_loss(&model, &data, &cfg).unwrap();
        let hist = train(&mut model, &data, &data, &cfg).unwrap();
        let end = dataset_loss(&model, &data, &cfg).unwrap();
        assert!(end < start, "{start} -> {end}");
        assert_eq!(hist.len(), 20);
        assert!(hist[19].report.is_some());
    }

    #[test]
    fn deterministic_under_seed() {
        let data = tiny_data(5, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            flip: true,
            crop: Some([2, 2]),
            jitter: 0.05,
            seed: 11,
            ..Default::default()
        };
        let run = || {
            let mut m = tiny_model(4);
            let h = train(&mut m, &data, &data, &cfg).unwrap();
            (m, h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn balancing_leaves_forward_unchanged() {
        let model = tiny_model(6);
        let data = tiny_data(3, 2);
        let x = stack(&data.iter().collect::<Vec<_>>()).unwrap().0;
        let a = model.predict(&x).unwrap();
        let cfg = TrainConfig {
            median_balancing: true,
            ..Default::default()
        };
        let _ = dataset_loss(&model, &data, &cfg).unwrap();
        assert_eq!(a.data(), model.predict(&x).unwrap().data());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = tiny_model(0);
        assert!(train(&mut model, &[], &[], &TrainConfig::default()).is_err());
        assert!(evaluate(&model, &[]).is_err());
    }
}
