//! Mean best-candidate IoU and VOC-style average precision.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::detector::nms::Detection;
use crate::detector::train::Target;
use crate::error::{Error, Result};

/// Ground truth and predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub gt: Vec<Target>,
    pub predictions: Vec<Detection>,
}

impl EvalRecord {
    /// Sorts predictions by score descending, keeping input order on ties.
    pub fn sorted(mut self) -> Self {
        self.predictions.sort_by(|a, b| b.score.total_cmp(&a.score));
        self
    }
}

/// Index of the highest-scoring prediction, first on ties.
fn best_prediction(dets: &[Detection]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, d) in dets.iter().enumerate() {
        if best.is_none_or(|b| d.score > dets[b].score) {
            best = Some(i);
        }
    }
    best
}

/// Mean over images of the IoU between the top-scoring detection and the
/// single ground-truth box; an image without detections scores 0.
pub fn mean_best_iou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("mean_best_iou", "no records"));
    }
    let mut total = 0.0;
    for (i, r) in records.iter().enumerate() {
        if r.gt.len() != 1 {
            return Err(Error::invalid(
                "mean_best_iou",
                format!("record {i} has {} ground-truth boxes, expected 1", r.gt.len()),
            ));
        }
        if let Some(b) = best_prediction(&r.predictions) {
            total += r.predictions[b].bbox.iou(&r.gt[0].bbox);
        }
    }
    Ok(total / records.len() as f64)
}

/// All-points interpolated average precision of `class_id`. `None` when the
/// class has no ground-truth instance.
///
/// Predictions are ranked by score (ties by image, then position in the
/// image's list). Each one is matched to the unmatched GT of its class with
/// the highest IoU, provided that IoU reaches `iou_threshold`.
pub fn average_precision(records: &[EvalRecord], class_id: usize, iou_threshold: f64) -> Result<Option<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("average_precision", "no records"));
    }
    let n_gt: usize = records
        .iter()
        .map(|r| r.gt.iter().filter(|t| t.class_id == class_id).count())
        .sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for (pi, d) in r.predictions.iter().enumerate() {
            if d.class_id == class_id {
                preds.push((d.score, ri, pi));
            }
        }
    }
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.len()]).collect();
    let mut tp = Vec::with_capacity(preds.len());
    for &(_, ri, pi) in &preds {
        let b = &records[ri].predictions[pi].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, t) in records[ri].gt.iter().enumerate() {
            if t.class_id != class_id || used[ri][gi] {
                continue;
            }
            let iou = b.iou(&t.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, v)| iou > v) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                used[ri][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // precision/recall curve with sentinels, then the monotone envelope
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        rec.push(hits as f64 / n_gt as f64);
        prec.push(hits as f64 / (k + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let ap = (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum();
    Ok(Some(ap))
}

/// AP per class id, `None` where the class has no ground truth.
pub type ClassAps = Vec<(usize, Option<f64>)>;

/// Per-class AP and their mean over the classes where AP is defined.
pub fn mean_average_precision(
    records: &[EvalRecord],
    classes: &[usize],
    iou_threshold: f64,
) -> Result<(f64, ClassAps)> {
    let mut per_class = Vec::with_capacity(classes.len());
    for &c in classes {
        per_class.push((c, average_precision(records, c, iou_threshold)?));
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|(_, ap)| *ap).collect();
    if defined.is_empty() {
        return Err(Error::invalid("map", "no class has ground truth"));
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_class))
}

/// Mean of the given per-class APs, ignoring undefined entries.
pub fn map(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("map", "no class has ground truth"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// IoU threshold of the reported mAP.
pub const MAP_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub dataset: alloc::string::String,
    pub mean_iou: f64,
    pub map: f64,
    /// `(class_id, AP)`; `None` when the class has no ground truth.
    pub ap: Vec<(usize, Option<f64>)>,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(dataset: &str, records: &[EvalRecord], classes: &[usize]) -> Result<Self> {
        let (map, ap) = mean_average_precision(records, classes, MAP_IOU_THRESHOLD)?;
        Ok(Self {
            dataset: dataset.into(),
            mean_iou: mean_best_iou(records)?,
            map,
            ap,
            n: records.len(),
        })
    }
}
