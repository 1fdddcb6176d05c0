//! Two-step training (head, then everything), SVM fitting, flip
//! augmentation and evaluation.

use std::fmt;

use crate::autograd::Graph;
use crate::error::{config_err, Result};
use crate::heads::{fit_bound, svm_calibrate, svm_train_ova, SoftmaxHead, SvmOptions};
use crate::io::hflip;
use crate::model::{Input, Model, Trainable};
use crate::optim::sgd_step;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

pub type Sample<T> = (Tensor<T>, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Fine-tuning learning rate.
    pub lr: f64,
    /// Weight decay of the head-only phase.
    pub head_l2: f64,
    pub momentum: f64,
    pub epochs_head: usize,
    pub epochs_finetune: usize,
    pub batch: usize,
    pub c_svm: f64,
    pub flip: bool,
    /// Fine-tuning stops after this many epochs without a better
    /// validation accuracy.
    pub patience: usize,
    /// Fine-tuning rescales a gradient whose norm exceeds
    /// `max(clip, ‖param‖)` down to that bound; 0 disables.
    pub clip: f64,
    /// Keep the backbone fixed while fine-tuning encoder and head.
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            head_l2: 1e-6,
            momentum: 0.9,
            epochs_head: 30,
            epochs_finetune: 20,
            batch: 16,
            c_svm: 1.0,
            flip: true,
            patience: 5,
            clip: 1.0,
            freeze_backbone: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("head_l2", self.head_l2), ("c_svm", self.c_svm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.batch == 0 {
            return Err(config_err!("batch must be positive"));
        }
        if self.patience == 0 {
            return Err(config_err!("patience must be positive"));
        }
        if !(self.clip >= 0.0 && self.clip.is_finite()) {
            return Err(config_err!("clip must be finite and non-negative, got {}", self.clip));
        }
        Ok(())
    }
}

/// Every image followed by its mirror, labels kept.
pub fn augment_flip<T: Scalar>(data: &[Sample<T>]) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::with_capacity(2 * data.len());
    for (img, label) in data {
        out.push((img.clone(), *label));
        out.push((hflip(img)?, *label));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.val_acc {
            Some(a) => write!(f, "{}\t{}\t{:.6}\t{:.4}", self.epoch, self.phase, self.train_loss, a),
            None => write!(f, "{}\t{}\t{:.6}\tnan", self.epoch, self.phase, self.train_loss),
        }
    }
}

/// Per-sample input kept across epochs: raw images, or tap maps when the
/// backbone is frozen.
enum Cached<T> {
    Image(Tensor<T>),
    Taps(Vec<Tensor<T>>),
}

impl<T: Scalar> Cached<T> {
    fn input(&self) -> Input<'_, T> {
        match self {
            Cached::Image(t) => Input::Image(t),
            Cached::Taps(t) => Input::Taps(t),
        }
    }
}

fn cache<T: Scalar>(model: &Model<T>, data: &[Sample<T>], taps: bool) -> Result<Vec<Cached<T>>> {
    data.iter()
        .map(|(img, _)| Ok(if taps { Cached::Taps(model.tap_maps(img)?) } else { Cached::Image(img.clone()) }))
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// One epoch of minibatch momentum SGD over `tr`'s parameters; returns the
/// mean training loss seen during the epoch.
fn sgd_epoch<T: Scalar>(
    model: &mut Model<T>,
    inputs: &[Input<'_, T>],
    labels: &[usize],
    tr: Trainable,
    cfg: &TrainConfig,
    velocity: &mut Vec<Tensor<T>>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch) {
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for &i in batch {
            let mut g = Graph::new();
            let nodes = model.nodes(&mut g, tr)?;
            let (_, z) = model.forward_graph(&mut g, &nodes, inputs[i])?;
            let loss = g.softmax_nll(z, labels[i])?;
            total += g.value(loss).data()[0].as_f64();
            g.backward(loss)?;
            let gs: Vec<Tensor<T>> = nodes.params.iter().map(|&p| g.take_grad(p)).collect();
            match grads.as_mut() {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&gs) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let grads = grads.expect("nonempty batch");
        if velocity.is_empty() {
            *velocity = grads.iter().map(|t| Tensor::zeros(t.dims())).collect::<Result<_>>()?;
        }
        let inv = T::c(1.0 / batch.len() as f64);
        for ((p, gr), v) in model.params_mut(tr).into_iter().zip(&grads).zip(velocity.iter_mut()) {
            let mut gr = gr.scale(inv);
            let (gn, pn) = (gr.norm2().as_f64(), p.norm2().as_f64().max(cfg.clip));
            if cfg.clip > 0.0 && gn > pn {
                gr = gr.scale(T::c(pn / gn));
            }
            sgd_step(p, &gr, T::c(cfg.lr), T::c(cfg.momentum), v)?;
        }
        model.refresh();
    }
    Ok(total / inputs.len() as f64)
}

/// Softmax-head accuracy over cached inputs.
fn accuracy<T: Scalar>(model: &Model<T>, inputs: &[Input<'_, T>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (inp, &l) in inputs.iter().zip(labels) {
        let z = model.logits(*inp)?;
        let z: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
        correct += (argmax(&z) == l) as usize;
    }
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

/// Mean softmax loss over cached inputs.
fn mean_loss<T: Scalar>(model: &Model<T>, inputs: &[Input<'_, T>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (inp, &l) in inputs.iter().zip(labels) {
        let mut g = Graph::new();
        let nodes = model.nodes(&mut g, Trainable::NONE)?;
        let (_, z) = model.forward_graph(&mut g, &nodes, *inp)?;
        let loss = g.softmax_nll(z, l)?;
        total += g.value(loss).data()[0].as_f64();
    }
    Ok(total / inputs.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Mean training loss at the end of each phase (after any rollback).
    pub loss_after_head: f64,
    pub loss_after_finetune: f64,
}

/// Phase 1 fits the head alone on fixed descriptors (`epochs_head`
/// bound-optimization steps); phase 2 trains
/// every parameter group (the backbone only when not frozen) and keeps the
/// parameters of the best validation epoch.
pub fn train_two_step<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if let Some((_, l)) = train.iter().chain(val).find(|(_, l)| *l >= model.cfg.classes) {
        return Err(config_err!("label {l} out of range for {} classes", model.cfg.classes));
    }
    let train = if cfg.flip { augment_flip(train)? } else { train.to_vec() };
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    let val_labels: Vec<usize> = val.iter().map(|(_, l)| *l).collect();
    if model.needs_encoder_init() {
        let imgs: Vec<&Tensor<T>> = train.iter().map(|(t, _)| t).collect();
        model.init_encoder(&imgs, cfg.seed)?;
    }
    let mut rng = Rng::stream(cfg.seed, 0x7A);
    let mut epochs = Vec::new();

    // phase 1: descriptors are fixed, so cache them
    let descs: Vec<Vec<Tensor<T>>> =
        train.iter().map(|(img, _)| Ok(vec![model.descriptor(Input::Image(img))?])).collect::<Result<_>>()?;
    let val_descs: Vec<Vec<Tensor<T>>> =
        val.iter().map(|(img, _)| Ok(vec![model.descriptor(Input::Image(img))?])).collect::<Result<_>>()?;
    let xs: Vec<Vec<f64>> = descs.iter().map(|d| d[0].data().iter().map(|v| v.as_f64()).collect()).collect();
    let mut head = SoftmaxHead { w: model.head.w.cast::<f64>(), bias: model.head.bias.cast::<f64>() };
    fit_bound(&mut head, &xs, &labels, cfg.head_l2, cfg.epochs_head, |t, loss, h| {
        model.head.w = h.w.cast();
        model.head.bias = h.bias.cast();
        let val_acc = if val.is_empty() { None } else { Some(head_accuracy(model, &val_descs, &val_labels)?) };
        let entry = EpochLog { epoch: t, phase: 1, train_loss: loss, val_acc };
        log(&entry);
        epochs.push(entry);
        Ok(())
    })?;
    let loss_after_head = head_loss(model, &descs, &labels)?;

    // phase 2
    let tr = Trainable { backbone: !cfg.freeze_backbone, encoder: true, head: true };
    let cached = cache(model, &train, cfg.freeze_backbone)?;
    let val_cached = cache(model, val, cfg.freeze_backbone)?;
    let inputs: Vec<Input<'_, T>> = cached.iter().map(Cached::input).collect();
    let val_inputs: Vec<Input<'_, T>> = val_cached.iter().map(Cached::input).collect();
    let mut best =
        if val.is_empty() { None } else { Some((accuracy(model, &val_inputs, &val_labels)?, model.clone())) };
    let mut stale = 0;
    let mut velocity = Vec::new();
    for e in 0..cfg.epochs_finetune {
        let loss = sgd_epoch(model, &inputs, &labels, tr, cfg, &mut velocity, &mut rng)?;
        let val_acc = if val.is_empty() { None } else { Some(accuracy(model, &val_inputs, &val_labels)?) };
        let entry = EpochLog { epoch: cfg.epochs_head + e + 1, phase: 2, train_loss: loss, val_acc };
        log(&entry);
        epochs.push(entry);
        if let (Some(acc), Some((best_acc, snapshot))) = (val_acc, best.as_mut()) {
            if acc > *best_acc {
                *best_acc = acc;
                *snapshot = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *model = snapshot;
    }
    let loss_after_finetune =
        if cfg.epochs_finetune == 0 { loss_after_head } else { mean_loss(model, &inputs, &labels)? };
    Ok(TrainReport { epochs, loss_after_head, loss_after_finetune })
}

fn head_accuracy<T: Scalar>(model: &Model<T>, descs: &[Vec<Tensor<T>>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (d, &l) in descs.iter().zip(labels) {
        let z: Vec<f64> = model.head.logits(&d[0])?.data().iter().map(|v| v.as_f64()).collect();
        correct += (argmax(&z) == l) as usize;
    }
    Ok(correct as f64 / descs.len().max(1) as f64)
}

fn head_loss<T: Scalar>(model: &Model<T>, descs: &[Vec<Tensor<T>>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (d, &l) in descs.iter().zip(labels) {
        let z: Vec<f64> = model.head.logits(&d[0])?.data().iter().map(|v| v.as_f64()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[l];
    }
    Ok(total / descs.len().max(1) as f64)
}

/// Fit calibrated one-vs-all SVMs on the model's descriptors of `train`
/// (with mirrors when `flip`). Returns the calibrated training scores per
/// class as (positive, negative) lists.
pub fn fit_svms<T: Scalar>(
    model: &mut Model<T>,
    train: &[Sample<T>],
    c_svm: f64,
    flip: bool,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let train = if flip { augment_flip(train)? } else { train.to_vec() };
    let xs: Vec<Vec<f64>> = train
        .iter()
        .map(|(img, _)| Ok(model.descriptor(Input::Image(img))?.data().iter().map(|v| v.as_f64()).collect()))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    fit_svms_on(model, &xs, &labels, c_svm)
}

/// [`fit_svms`] on precomputed descriptors.
pub fn fit_svms_on<T: Scalar>(
    model: &mut Model<T>,
    xs: &[Vec<f64>],
    labels: &[usize],
    c_svm: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let opts = SvmOptions { c: c_svm, ..Default::default() };
    let mut svms = Vec::new();
    let mut scores = Vec::new();
    for (k, svm) in svm_train_ova(xs, labels, model.cfg.classes, &opts).into_iter().enumerate() {
        let svm = svm?;
        let split = |s: &crate::heads::LinearSvm, pos: bool| -> Vec<f64> {
            xs.iter().zip(labels).filter(|(_, &l)| (l == k) == pos).map(|(x, _)| s.score(x)).collect()
        };
        let cal = svm_calibrate(&svm, &split(&svm, true), &split(&svm, false))?;
        scores.push((split(&cal, true), split(&cal, false)));
        svms.push(cal);
    }
    model.svms = svms;
    Ok(scores)
}

/// Mean of the score vectors of an image and its mirror, with the argmax.
pub fn predict_flip_average(
    mut scores: impl FnMut(&Tensor<f64>) -> Result<Vec<f64>>,
    image: &Tensor<f64>,
) -> Result<(Vec<f64>, usize)> {
    let a = scores(image)?;
    let b = scores(&hflip(image)?)?;
    let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
    let best = argmax(&avg);
    Ok((avg, best))
}

/// Class scores of one image under the model: calibrated SVM scores when
/// `svm`, softmax-head logits otherwise.
pub fn class_scores<T: Scalar>(model: &Model<T>, image: &Tensor<T>, svm: bool) -> Result<Vec<f64>> {
    let d = model.descriptor(Input::Image(image))?;
    if svm {
        model.svm_scores(&d)
    } else {
        Ok(model.head.logits(&d)?.data().iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Sample<T>], svm: bool, flip_avg: bool) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.len());
    for (img, _) in data {
        let s = class_scores(model, img, svm)?;
        let s = if flip_avg {
            let m = class_scores(model, &hflip(img)?, svm)?;
            s.iter().zip(&m).map(|(a, b)| 0.5 * (a + b)).collect()
        } else {
            s
        };
        predictions.push(argmax(&s));
    }
    let correct = predictions.iter().zip(data).filter(|(p, (_, l))| *p == l).count();
    Ok(Evaluation { accuracy: correct as f64 / data.len().max(1) as f64, predictions })
}

/// Class pairs ranked by symmetric confusion count (errors i→j plus j→i),
/// descending, ties broken by the pair; pairs with no errors omitted.
pub fn confusion_top_pairs(predictions: &[usize], labels: &[usize], top: usize) -> Vec<((usize, usize), usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        if p != l {
            *counts.entry((p.min(l), p.max(l))).or_insert(0) += 1;
        }
    }
    let mut pairs: Vec<_> = counts.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(top);
    pairs
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.epochs {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::encoders::EncoderKind;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::from_channels(&[4, 6], 1, &["t2"]),
            tap: "t2".into(),
            encoder: EncoderKind::Bilinear,
            classes: 2,
            ..Default::default()
        }
    }

    /// Class 0 leans red, class 1 leans blue.
    fn toy(n: usize, seed: u64) -> Vec<Sample<f64>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let data = (0..12 * 12 * 3)
                    .map(|j| {
                        let boost = if (j % 3 == 0) == (label == 0) && j % 3 != 1 { 0.5 } else { 0.0 };
                        rng.uniform_in(0.0, 0.5) + boost
                    })
                    .collect();
                (Tensor::new(vec![12, 12, 3], data).unwrap(), label)
            })
            .collect()
    }

    fn tcfg() -> TrainConfig {
        TrainConfig { epochs_head: 40, epochs_finetune: 0, batch: 4, flip: false, ..Default::default() }
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.c_svm), (0.001, 0.9, 1.0));
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let mut m = Model::new(cfg(), 0).unwrap();
        assert!(train_two_step(&mut m, &[], &[], &tcfg(), |_| {}).is_err());
        let mut bad = toy(2, 0);
        bad[0].1 = 5;
        assert!(train_two_step(&mut m, &bad, &[], &tcfg(), |_| {}).is_err());
    }

    #[test]
    fn head_phase_separates_and_freezes_the_rest() {
        let data = toy(16, 1);
        let mut m = Model::new(cfg(), 0).unwrap();
        let before = m.backbone.checksum();
        train_two_step(&mut m, &data, &[], &tcfg(), |_| {}).unwrap();
        assert_eq!(m.backbone.checksum(), before);
        assert_eq!(evaluate(&m, &data, false, false).unwrap().accuracy, 1.0);
    }

    #[test]
    fn finetuning_does_not_raise_training_loss() {
        let data = toy(8, 2);
        let mut m = Model::new(cfg(), 0).unwrap();
        let c = TrainConfig { epochs_head: 10, epochs_finetune: 5, lr: 1e-3, ..tcfg() };
        let mut lines = Vec::new();
        let r = train_two_step(&mut m, &data, &[], &c, |e| lines.push(e.to_string())).unwrap();
        assert!(r.loss_after_finetune <= r.loss_after_head + 1e-6, "{r:?}");
        assert_eq!(lines.len(), 15);
        assert!(lines[0].starts_with("1\t1\t"));
        assert!(lines[14].starts_with("15\t2\t"));
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy(8, 3);
        let val = toy(4, 4);
        let c = TrainConfig { epochs_head: 3, epochs_finetune: 2, flip: true, ..tcfg() };
        let run = || {
            let mut m = Model::new(cfg(), 7).unwrap();
            let r = train_two_step(&mut m, &data, &val, &c, |_| {}).unwrap();
            (m, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_phase_loss_non_increasing() {
        let data = toy(8, 5);
        let mut m = Model::new(cfg(), 0).unwrap();
        let c = TrainConfig { epochs_head: 20, ..tcfg() };
        let r = train_two_step(&mut m, &data, &[], &c, |_| {}).unwrap();
        for w in r.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-12, "{:?}", r.epochs);
        }
    }

    #[test]
    fn early_stopping_restores_best() {
        let data = toy(8, 6);
        let val = toy(4, 7);
        let mut m = Model::new(cfg(), 0).unwrap();
        let c = TrainConfig { epochs_head: 2, epochs_finetune: 30, patience: 1, lr: 1e-6, ..tcfg() };
        let r = train_two_step(&mut m, &data, &val, &c, |_| {}).unwrap();
        assert!(r.epochs.len() < 32);
    }

    #[test]
    fn flip_augmentation() {
        let data = toy(3, 8);
        let out = augment_flip(&data).unwrap();
        assert_eq!(out.len(), 6);
        for (i, (img, l)) in data.iter().enumerate() {
            assert_eq!(&out[2 * i].0, img);
            assert_eq!(out[2 * i + 1].1, *l);
            assert_eq!(&hflip(&out[2 * i + 1].0).unwrap(), img);
        }
    }

    #[test]
    fn flip_average_definition_and_symmetry() {
        let img = Tensor::from_fn(&[2, 2, 1], |i| i as f64).unwrap();
        let (avg, best) = predict_flip_average(|x| Ok(x.data().to_vec()), &img).unwrap();
        let m = hflip(&img).unwrap();
        let expect: Vec<f64> = img.data().iter().zip(m.data()).map(|(a, b)| 0.5 * (a + b)).collect();
        assert_eq!(avg, expect);
        assert_eq!(best, 2);
        let (avg2, best2) = predict_flip_average(|x| Ok(x.data().to_vec()), &m).unwrap();
        assert_eq!((avg2, best2), (avg.clone(), best));

        let sym = Tensor::new(vec![1, 2, 1], vec![0.3, 0.3]).unwrap();
        let (a, _) = predict_flip_average(|x| Ok(x.data().to_vec()), &sym).unwrap();
        assert_eq!(a, vec![0.3, 0.3]);
    }

    #[test]
    fn flip_average_on_model_matches_mirror_order() {
        let m = Model::new(cfg(), 0).unwrap();
        let img = toy(1, 9).remove(0).0;
        let f = |x: &Tensor<f64>| class_scores(&m, x, false);
        let a = predict_flip_average(f, &img).unwrap();
        let b = predict_flip_average(f, &hflip(&img).unwrap()).unwrap();
        assert_eq!(a.1, b.1);
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_ranking() {
        assert!(confusion_top_pairs(&[0, 1, 2], &[0, 1, 2], 5).is_empty());
        let labels = [0, 0, 0, 1, 1, 1];
        let preds = [1, 1, 1, 0, 0, 0];
        assert_eq!(confusion_top_pairs(&preds, &labels, 1), vec![((0, 1), 6)]);
        let labels = [0, 1, 0, 2, 0, 1];
        let preds = [1, 0, 1, 1, 0, 1];
        assert_eq!(confusion_top_pairs(&preds, &labels, 3), vec![((0, 1), 3), ((1, 2), 1)]);
        let labels = [2, 0];
        let preds = [3, 1];
        assert_eq!(confusion_top_pairs(&preds, &labels, 3), vec![((0, 1), 1), ((2, 3), 1)]);
    }

    #[test]
    fn svm_fit_is_calibrated() {
        let data = toy(12, 10);
        let mut m = Model::new(cfg(), 0).unwrap();
        let scores = fit_svms(&mut m, &data, 1.0, true).unwrap();
        assert_eq!(m.svms.len(), 2);
        for (pos, neg) in scores {
            assert!((crate::heads::median(&pos).unwrap() - 1.0).abs() < 1e-9);
            assert!((crate::heads::median(&neg).unwrap() + 1.0).abs() < 1e-9);
        }
        assert!(evaluate(&m, &data, true, true).unwrap().accuracy > 0.5);
    }
}
