//! Detection on a batch of images with frozen parameters.

use alloc::vec::Vec;

use super::bbox::BBox;
use super::head::HEAD_CODER;
use super::model::SmrNet;
use super::nms::{nms, Detection, NUM_CLASSES};
use super::rpn::{select_proposals, Proposal, RpnOutputs};
use crate::error::{Error, Result};
use crate::layers::{Graph, ParamStore};
use crate::ops::loss::softmax_slice;
use crate::ops::roi::Roi;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferConfig {
    pub nms_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_threshold: 0.3,
            score_threshold: 0.05,
            max_detections: 20,
        }
    }
}

/// Detections per image, each list sorted by score descending.
pub fn infer<T: Scalar>(
    model: &SmrNet,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    cfg: &InferConfig,
) -> Result<Vec<Vec<Detection>>> {
    let n = images.shape()[0];
    let mc = &model.config;
    let (gh, gw) = mc.grid();
    let n_ratios = mc.anchors.ratios.len();
    let anchors = model.anchors();
    let per_image = anchors.len();
    let image = (mc.image_size.1 as f64, mc.image_size.0 as f64);

    let mut g = Graph::inference(store);
    let x = g.constant(images.clone());
    let fwd = model.forward_rpn(&mut g, x)?;
    let logits: Vec<f64> = g.value(fwd.logits).data().iter().map(|v| v.as_f64()).collect();
    let deltas: Vec<f64> = g.value(fwd.deltas).data().iter().map(|v| v.as_f64()).collect();
    if logits.len() != n * per_image {
        return Err(Error::shape("infer", "objectness map does not match the anchor grid"));
    }

    let mut proposals: Vec<Vec<Proposal>> = Vec::with_capacity(n);
    let mut rois = Vec::new();
    for b in 0..n {
        let out = RpnOutputs {
            logits: &logits[b * per_image..][..per_image],
            deltas: &deltas[4 * b * per_image..][..4 * per_image],
            grid: (gh, gw),
            n_ratios,
        };
        let p = select_proposals(&out, &anchors, image, &mc.eval_proposals)?;
        rois.extend(p.iter().map(|p| Roi { batch: b, bbox: p.bbox }));
        proposals.push(p);
    }
    if rois.is_empty() {
        return Ok(alloc::vec![Vec::new(); n]);
    }
    let pooled = g.roi_pool(fwd.fused.map, &rois, fwd.fused.stride as f64, mc.roi_size)?;
    let (cls, reg) = model.head.forward(&mut g, pooled)?;
    let cls: Vec<f64> = g.value(cls).data().iter().map(|v| v.as_f64()).collect();
    let reg: Vec<f64> = g.value(reg).data().iter().map(|v| v.as_f64()).collect();

    let mut out = Vec::with_capacity(n);
    let mut r = 0;
    let mut probs = [0.0; NUM_CLASSES];
    for props in &proposals {
        let mut per_class: [Vec<Detection>; NUM_CLASSES] = Default::default();
        for p in props {
            softmax_slice(&cls[r * NUM_CLASSES..][..NUM_CLASSES], &mut probs);
            for c in 1..NUM_CLASSES {
                let d = core::array::from_fn(|k| reg[r * 4 * NUM_CLASSES + 4 * c + k]);
                let bbox: BBox = HEAD_CODER.decode(d, &p.bbox)?.clip(image.0, image.1);
                if bbox.is_valid() && probs[c] >= cfg.score_threshold {
                    per_class[c].push(Detection {
                        bbox,
                        class_id: c,
                        score: probs[c],
                    });
                }
            }
            r += 1;
        }
        let mut dets: Vec<Detection> = per_class[1..].iter().flat_map(|d| nms(d, cfg.nms_threshold)).collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(cfg.max_detections);
        out.push(dets);
    }
    Ok(out)
}
