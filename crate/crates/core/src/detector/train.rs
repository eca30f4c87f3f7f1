//! Joint two-stage training: anchor and RoI sampling, the four losses and a
//! momentum SGD step with global gradient-norm clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::anchors::Anchor;
use super::bbox::{BBox, BoxCoder};
use super::head::HEAD_CODER;
use super::model::SmrNet;
use super::rpn::{delta_offset, objectness_offset, select_proposals, RpnOutputs};
use crate::error::{Error, Result};
use crate::layers::{Gradients, Graph, Mode, ParamStore};
use crate::ops::roi::Roi;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// One ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    /// 1 or 2; 0 is reserved for background.
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub roi_batch: usize,
    pub roi_foreground_fraction: f64,
    pub roi_foreground_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            clip_norm: 10.0,
            rpn_batch: 256,
            rpn_positive_fraction: 0.5,
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            roi_batch: 128,
            roi_foreground_fraction: 0.25,
            roi_foreground_iou: 0.5,
        }
    }
}

pub const POSITIVE: i8 = 1;
pub const NEGATIVE: i8 = 0;
pub const IGNORED: i8 = -1;

/// Anchor labels and, for each anchor, the index of its best-matching GT.
///
/// Positive when IoU >= `pos` with some GT, or when the anchor attains the
/// highest IoU any anchor has with a GT; negative when its best IoU <= `neg`;
/// ignored otherwise.
pub fn label_anchors(anchors: &[Anchor], gts: &[BBox], pos: f64, neg: f64) -> (Vec<i8>, Vec<usize>) {
    let mut labels = vec![IGNORED; anchors.len()];
    let mut matched = vec![0usize; anchors.len()];
    if gts.is_empty() {
        labels.fill(NEGATIVE);
        return (labels, matched);
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.bbox.iou(g)).collect())
        .collect();
    for (i, row) in ious.iter().enumerate() {
        let (best_g, best) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        matched[i] = best_g;
        if best >= pos {
            labels[i] = POSITIVE;
        } else if best <= neg {
            labels[i] = NEGATIVE;
        }
    }
    for gj in 0..gts.len() {
        let top = ious.iter().map(|r| r[gj]).fold(0.0f64, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (i, row) in ious.iter().enumerate() {
            if row[gj] == top {
                labels[i] = POSITIVE;
                matched[i] = gj;
            }
        }
    }
    (labels, matched)
}

/// Random subset of `positives` and `negatives` with at most
/// `fraction * batch` positives, negatives filling the rest. Returned
/// positives first, each group in sampled order.
pub fn sample_balanced<R: Rng + ?Sized>(
    mut positives: Vec<usize>,
    mut negatives: Vec<usize>,
    batch: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let max_pos = (batch as f64 * fraction) as usize;
    positives.shuffle(rng);
    positives.truncate(max_pos);
    negatives.shuffle(rng);
    negatives.truncate(batch - positives.len());
    (positives, negatives)
}

/// Per-term losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.head_cls + self.head_reg
    }
}

/// Builds the joint loss for a batch on `g`. Every image must carry at least
/// one target.
pub fn detection_loss<T: Scalar, R: Rng + ?Sized>(
    model: &SmrNet,
    g: &mut Graph<'_, T>,
    images: Var,
    targets: &[Vec<Target>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossParts)> {
    let n = g.shape(images)[0];
    if targets.len() != n || targets.iter().any(Vec::is_empty) {
        return Err(Error::invalid("training_step", "every image needs at least one target"));
    }
    let mc = &model.config;
    let (gh, gw) = mc.grid();
    let n_ratios = mc.anchors.ratios.len();
    let anchors = model.anchors();
    let per_image = anchors.len();
    let image = (mc.image_size.1 as f64, mc.image_size.0 as f64);
    let fwd = model.forward_rpn(g, images)?;

    // proposal network targets
    let rpn_coder = BoxCoder::default();
    let mut cls_idx = Vec::new();
    let mut cls_target = Vec::new();
    let mut reg_idx = Vec::new();
    let mut reg_target = Vec::new();
    for (b, tgts) in targets.iter().enumerate() {
        let gts: Vec<BBox> = tgts.iter().map(|t| t.bbox).collect();
        let (labels, matched) = label_anchors(&anchors, &gts, cfg.rpn_positive_iou, cfg.rpn_negative_iou);
        let pos = (0..per_image).filter(|&i| labels[i] == POSITIVE).collect();
        let neg = (0..per_image).filter(|&i| labels[i] == NEGATIVE).collect();
        let (pos, neg) = sample_balanced(pos, neg, cfg.rpn_batch, cfg.rpn_positive_fraction, rng);
        for &i in &pos {
            let a = &anchors[i];
            cls_idx.push(b * per_image + objectness_offset(a, n_ratios, gh, gw));
            cls_target.push(T::one());
            let t = rpn_coder.encode(&gts[matched[i]], &a.bbox)?;
            for (k, &v) in t.iter().enumerate() {
                reg_idx.push(4 * b * per_image + delta_offset(a, n_ratios, gh, gw, k));
                reg_target.push(T::from_f64(v));
            }
        }
        for &i in &neg {
            cls_idx.push(b * per_image + objectness_offset(&anchors[i], n_ratios, gh, gw));
            cls_target.push(T::zero());
        }
    }
    let sampled = g.gather(fwd.logits, &cls_idx)?;
    let rpn_cls = g.bce_with_logits(sampled, &cls_target)?;
    let rpn_norm = T::one() / T::from_f64(cls_idx.len() as f64);
    let rpn_reg = if reg_idx.is_empty() {
        None
    } else {
        let d = g.gather(fwd.deltas, &reg_idx)?;
        let l = g.smooth_l1_loss(d, &reg_target)?;
        Some(g.scale(l, rpn_norm)?)
    };

    // second stage targets from detached proposals plus the GT boxes
    let logits: Vec<f64> = g.value(fwd.logits).data().iter().map(|v| v.as_f64()).collect();
    let deltas: Vec<f64> = g.value(fwd.deltas).data().iter().map(|v| v.as_f64()).collect();
    let mut rois = Vec::new();
    let mut labels = Vec::new();
    let mut head_reg_idx = Vec::new();
    let mut head_reg_target = Vec::new();
    for (b, tgts) in targets.iter().enumerate() {
        let out = RpnOutputs {
            logits: &logits[b * per_image..][..per_image],
            deltas: &deltas[4 * b * per_image..][..4 * per_image],
            grid: (gh, gw),
            n_ratios,
        };
        let mut boxes: Vec<BBox> = select_proposals(&out, &anchors, image, &mc.train_proposals)?
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        boxes.extend(tgts.iter().map(|t| t.bbox));
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        let mut best = Vec::with_capacity(boxes.len());
        for (i, p) in boxes.iter().enumerate() {
            let (j, iou) = tgts
                .iter()
                .map(|t| p.iou(&t.bbox))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            best.push(j);
            if iou >= cfg.roi_foreground_iou {
                fg.push(i);
            } else {
                bg.push(i);
            }
        }
        let (fg, bg) = sample_balanced(fg, bg, cfg.roi_batch, cfg.roi_foreground_fraction, rng);
        for &i in &fg {
            let t = &tgts[best[i]];
            let r = rois.len();
            rois.push(Roi { batch: b, bbox: boxes[i] });
            labels.push(t.class_id);
            let d = HEAD_CODER.encode(&t.bbox, &boxes[i])?;
            for (k, &v) in d.iter().enumerate() {
                head_reg_idx.push(r * 12 + 4 * t.class_id + k);
                head_reg_target.push(T::from_f64(v));
            }
        }
        for &i in &bg {
            rois.push(Roi { batch: b, bbox: boxes[i] });
            labels.push(0);
        }
    }
    let pooled = g.roi_pool(fwd.fused.map, &rois, fwd.fused.stride as f64, mc.roi_size)?;
    let (cls, reg) = model.head.forward(g, pooled)?;
    let head_cls = g.softmax_cross_entropy(cls, &labels)?;
    let head_norm = T::one() / T::from_f64(rois.len() as f64);
    let head_reg = if head_reg_idx.is_empty() {
        None
    } else {
        let d = g.gather(reg, &head_reg_idx)?;
        let l = g.smooth_l1_loss(d, &head_reg_target)?;
        Some(g.scale(l, head_norm)?)
    };

    let value = |g: &Graph<'_, T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let parts = LossParts {
        rpn_cls: value(g, Some(rpn_cls)),
        rpn_reg: value(g, rpn_reg),
        head_cls: value(g, Some(head_cls)),
        head_reg: value(g, head_reg),
    };
    let mut total = g.add(rpn_cls, head_cls)?;
    for v in [rpn_reg, head_reg].into_iter().flatten() {
        total = g.add(total, v)?;
    }
    Ok((total, parts))
}

/// Momentum SGD, `v = m v + g; p -= lr v`, after scaling the whole gradient
/// so its global norm is at most `clip_norm`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            momentum,
            clip_norm,
            velocity: Vec::new(),
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        if self.velocity.len() != store.len() {
            self.velocity = store.ids().map(|_| Vec::new()).collect();
        }
        let norm = grads.global_norm();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let (scale, m, lr) = (T::from_f64(scale), T::from_f64(self.momentum), T::from_f64(self.lr));
        for (id, g) in &grads.0 {
            let v = &mut self.velocity[id.index()];
            if v.is_empty() {
                v.resize(g.len(), T::zero());
            }
            let p = store.get_mut(*id).data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = m * *v + scale * g;
                *p -= lr * *v;
            }
        }
        norm
    }

    /// Velocity buffers by parameter index, for checkpointing.
    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: LossParts,
    pub grad_norm: f64,
    /// Images dropped for lacking ground truth.
    pub skipped: usize,
    /// False when too few images remained to take a step.
    pub applied: bool,
}

/// Forward, backward and update on one batch `[N,C,H,W]`. Images without
/// targets are dropped; the step is skipped if fewer than two remain, as
/// batch normalisation needs a batch of at least two.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    model: &SmrNet,
    store: &mut ParamStore<T>,
    opt: &mut Sgd<T>,
    images: &Tensor<T>,
    targets: &[Vec<Target>],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[0] != targets.len() {
        return Err(Error::shape(
            "training_step",
            format!("images {shape:?} with {} target lists", targets.len()),
        ));
    }
    let keep: Vec<usize> = (0..shape[0]).filter(|&i| !targets[i].is_empty()).collect();
    let skipped = shape[0] - keep.len();
    if keep.len() < 2 {
        return Ok(StepStats {
            loss: LossParts::default(),
            grad_norm: 0.0,
            skipped,
            applied: false,
        });
    }
    let (images, targets) = if skipped == 0 {
        (images.clone(), targets.to_vec())
    } else {
        let per: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(keep.len() * per);
        for &i in &keep {
            data.extend_from_slice(&images.data()[i * per..][..per]);
        }
        let mut s = shape.clone();
        s[0] = keep.len();
        (Tensor::from_vec(&s, data)?, keep.iter().map(|&i| targets[i].clone()).collect())
    };

    let (grads, parts, bn) = {
        let mut g = Graph::new(store, Mode::Train);
        let x = g.constant(images);
        let (loss, parts) = detection_loss(model, &mut g, x, &targets, cfg, rng)?;
        let grads = g.backward(loss)?;
        (grads, parts, g.take_bn_updates())
    };
    if !parts.total().is_finite() || !grads.global_norm().is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let grad_norm = opt.step(store, &grads);
    store.apply_bn_updates(&bn);
    Ok(StepStats {
        loss: parts,
        grad_norm,
        skipped,
        applied: true,
    })
}

/// Replaces every running mean and variance by the equal-weight average of
/// the batch statistics seen over `batches`, overriding the exponential
/// estimate accumulated during training. Parameters are left untouched.
pub fn recalibrate_batch_norm<'a, T: Scalar + 'a>(
    model: &SmrNet,
    store: &mut ParamStore<T>,
    batches: impl IntoIterator<Item = &'a Tensor<T>>,
) -> Result<usize> {
    let mut seen = 0usize;
    for images in batches {
        if images.shape().first().copied().unwrap_or(0) < 2 {
            continue;
        }
        let mut updates = {
            let mut g = Graph::new(store, Mode::Train);
            let x = g.constant(images.clone());
            model.fused(&mut g, x)?;
            g.take_bn_updates()
        };
        let m = 1.0 / (seen + 1) as f64;
        updates.iter_mut().for_each(|u| u.momentum = m);
        store.apply_bn_updates(&updates);
        seen += 1;
    }
    Ok(seen)
}
