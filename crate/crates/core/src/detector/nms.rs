//! Greedy non-maximum suppression.

use alloc::vec::Vec;

use super::bbox::BBox;

/// Class ids: 0 is background, 1 and 2 are the two object types.
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Indices sorted by score descending, ties by index ascending.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Indices of the kept boxes in keep order. A box is dropped when its IoU
/// with an already kept box exceeds `threshold`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, threshold).into_iter().map(|i| dets[i]).collect()
}
