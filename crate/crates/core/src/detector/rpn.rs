//! Proposal network: parallel 5x5 / 3x3 / 1x1 convolutions over the fused
//! map, then objectness and box-delta predictions per anchor.

use alloc::format;
use alloc::vec::Vec;

use super::anchors::Anchor;
use super::bbox::{BBox, BoxCoder};
use super::nms::{nms_indices, score_order};
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ConvOptions, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelCombine {
    Sum,
    /// Concatenate the three maps and project back with a 1x1 convolution.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnHead {
    pub conv5: Conv2dLayer,
    pub conv3: Conv2dLayer,
    pub conv1: Conv2dLayer,
    pub merge: Option<Conv2dLayer>,
    pub objectness: Conv2dLayer,
    pub deltas: Conv2dLayer,
    pub anchors_per_cell: usize,
}

impl RpnHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        anchors_per_cell: usize,
        combine: KernelCombine,
    ) -> Self {
        let conv = |store: &mut ParamStore<T>, k: usize| {
            Conv2dLayer::new(store, &format!("{name}.conv{k}x{k}"), width, width, k, ConvOptions::same(k, 1))
        };
        let conv5 = conv(store, 5);
        let conv3 = conv(store, 3);
        let conv1 = conv(store, 1);
        let merge = (combine == KernelCombine::Concat).then(|| {
            Conv2dLayer::new(store, &format!("{name}.merge"), 3 * width, width, 1, ConvOptions::default())
        });
        let objectness = Conv2dLayer::new(
            store,
            &format!("{name}.objectness"),
            width,
            anchors_per_cell,
            1,
            ConvOptions::default(),
        );
        let deltas = Conv2dLayer::new(
            store,
            &format!("{name}.deltas"),
            width,
            4 * anchors_per_cell,
            1,
            ConvOptions::default(),
        );
        Self {
            conv5,
            conv3,
            conv1,
            merge,
            objectness,
            deltas,
            anchors_per_cell,
        }
    }

    /// Objectness logits `[N,A,h,w]` and deltas `[N,4A,h,w]`; delta channel
    /// `4a + k` holds component `k` of anchor channel `a`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<(Var, Var)> {
        let a = self.conv5.forward(g, fused)?;
        let b = self.conv3.forward(g, fused)?;
        let c = self.conv1.forward(g, fused)?;
        let merged = match &self.merge {
            Some(m) => {
                let cat = g.concat(&[a, b, c])?;
                m.forward(g, cat)?
            }
            None => {
                let ab = g.add(a, b)?;
                g.add(ab, c)?
            }
        };
        let h = g.relu(merged)?;
        let logits = self.objectness.forward(g, h)?;
        let deltas = self.deltas.forward(g, h)?;
        Ok((logits, deltas))
    }

    pub fn param_count(&self) -> usize {
        [&self.conv5, &self.conv3, &self.conv1, &self.objectness, &self.deltas]
            .iter()
            .map(|c| c.param_count())
            .sum::<usize>()
            + self.merge.as_ref().map_or(0, Conv2dLayer::param_count)
    }
}

/// Flat position of anchor `index` (cell-major, then channel) inside one
/// image's `[A,h,w]` objectness block.
pub fn objectness_offset(anchor: &Anchor, n_ratios: usize, grid_h: usize, grid_w: usize) -> usize {
    let (i, j) = anchor.cell;
    anchor.channel(n_ratios) * grid_h * grid_w + i * grid_w + j
}

/// Flat position of delta component `k` of `anchor` inside one image's
/// `[4A,h,w]` block.
pub fn delta_offset(anchor: &Anchor, n_ratios: usize, grid_h: usize, grid_w: usize, k: usize) -> usize {
    let (i, j) = anchor.cell;
    (4 * anchor.channel(n_ratios) + k) * grid_h * grid_w + i * grid_w + j
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_k: usize,
    pub nms_threshold: f64,
    pub post_nms: usize,
    pub min_size: f64,
}

impl ProposalConfig {
    pub fn train() -> Self {
        Self {
            pre_nms_top_k: 1000,
            nms_threshold: 0.7,
            post_nms: 256,
            min_size: 4.0,
        }
    }

    pub fn eval() -> Self {
        Self {
            post_nms: 100,
            ..Self::train()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor: usize,
}

/// Per-image predictions laid out as the proposal network emits them.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutputs<'a> {
    /// `[A,h,w]` objectness logits.
    pub logits: &'a [f64],
    /// `[4A,h,w]` deltas.
    pub deltas: &'a [f64],
    pub grid: (usize, usize),
    pub n_ratios: usize,
}

/// Decode, clip, drop small boxes, keep the `pre_nms_top_k` best by
/// objectness, suppress at `nms_threshold` and return the first `post_nms`.
/// Equal logits are resolved by anchor index.
pub fn select_proposals(
    out: &RpnOutputs<'_>,
    anchors: &[Anchor],
    image: (f64, f64),
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let (gh, gw) = out.grid;
    if out.logits.len() != anchors.len() || out.deltas.len() != 4 * anchors.len() {
        return Err(Error::shape(
            "select_proposals",
            format!(
                "{} anchors, {} logits, {} deltas",
                anchors.len(),
                out.logits.len(),
                out.deltas.len()
            ),
        ));
    }
    let coder = BoxCoder::default();
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    let mut ids = Vec::with_capacity(anchors.len());
    for (idx, a) in anchors.iter().enumerate() {
        let d = core::array::from_fn(|k| out.deltas[delta_offset(a, out.n_ratios, gh, gw, k)]);
        let b = coder.decode(d, &a.bbox)?.clip(image.0, image.1);
        if b.width() < cfg.min_size || b.height() < cfg.min_size {
            continue;
        }
        boxes.push(b);
        scores.push(out.logits[objectness_offset(a, out.n_ratios, gh, gw)]);
        ids.push(idx);
    }
    let mut order = score_order(&scores);
    order.truncate(cfg.pre_nms_top_k);
    let top_boxes: Vec<BBox> = order.iter().map(|&i| boxes[i]).collect();
    let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let mut keep = nms_indices(&top_boxes, &top_scores, cfg.nms_threshold);
    keep.truncate(cfg.post_nms);
    Ok(keep
        .into_iter()
        .map(|k| Proposal {
            bbox: top_boxes[k],
            score: top_scores[k],
            anchor: ids[order[k]],
        })
        .collect())
}
