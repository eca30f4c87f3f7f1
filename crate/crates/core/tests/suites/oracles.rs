//! Library routines against independently written reference versions.

use crate::common::{rng, uniform};
use rand::Rng;
use smrnet_core::detector::anchors::{generate_anchors, Anchor, AnchorConfig};
use smrnet_core::detector::nms::{nms, Detection};
use smrnet_core::detector::rpn::{select_proposals, ProposalConfig, RpnOutputs};
use smrnet_core::detector::train::Target;
use smrnet_core::detector::BBox;
use smrnet_core::metrics::{average_precision, EvalRecord};
use smrnet_core::ops::roi::Roi;
use smrnet_core::{Tape, Tensor};

fn close(a: &[f64], b: &[f64], tol: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "max diff {worst:e} > {tol:e}");
    worst
}

fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (m, k, n) = (r.random_range(1..12), r.random_range(1..12), r.random_range(1..12));
        let a = uniform(&[m, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k, n], -1.0, 1.0, &mut r);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a), t.constant(b));
        let c = t.matmul(av, bv).unwrap();
        close(t.value(c).data(), &want, 1e-12);
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize, d: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * p - d * (kh - 1) - 1) / s + 1;
    let wo = (wd + 2 * p - d * (kw - 1) - 1) / s + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                let ix = (ox * s + kx * d) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (vec![n, cout, ho, wo], out)
}

fn conv2d_matches_nested_loops() {
    let mut r = rng(2);
    let dilations = [1, 2, 4, 1, 2, 4, 1, 2, 4, 1, 2, 4, 1, 2, 4, 1, 2, 4, 2, 4];
    for (case, &d) in dilations.iter().enumerate() {
        let k = [1, 3, 5, 7][case % 4];
        let s = 1 + case % 3 / 2;
        let p = r.random_range(0..=d * (k - 1) / 2 + 1);
        let need = d * (k - 1) + 1;
        let (h, w) = (r.random_range(need..need + 8), r.random_range(need..need + 8));
        let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..5));
        let x = uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let b: Vec<f64> = (0..cout).map(|_| r.random_range(-1.0..1.0)).collect();
        let (shape, want) = naive_conv(&x, &wt, &b, s, p, d);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x), t.constant(wt));
        let bv = t.constant(Tensor::from_vec(&[cout], b).unwrap());
        let y = t.conv2d(xv, wv, Some(bv), s, p, d).unwrap();
        assert_eq!(t.shape(y), shape.as_slice(), "case {case}");
        close(t.value(y).data(), &want, 1e-6);
    }
}

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

fn random_box(r: &mut impl Rng, extent: f64) -> BBox {
    let x1 = r.random_range(0.0..extent * 0.8);
    let y1 = r.random_range(0.0..extent * 0.8);
    BBox::new(x1, y1, x1 + r.random_range(1.0..extent * 0.4), y1 + r.random_range(1.0..extent * 0.4))
}

/// Repeatedly keeps the best remaining box (first index on ties) and removes
/// everything overlapping it by more than `thr`.
fn brute_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i] && (i == b || ref_iou(&dets[i].bbox, &dets[b].bbox) > thr) {
                alive[i] = false;
            }
        }
    }
    out
}

fn nms_matches_brute_force() {
    let mut r = rng(3);
    for inst in 0..1000 {
        let n = r.random_range(1..=50);
        let thr = [0.3, 0.5, 0.7][inst % 3];
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut r, 64.0),
                class_id: 1,
                // coarse scores so ties occur
                score: (r.random_range(0..20) as f64) / 20.0,
            })
            .collect();
        assert_eq!(nms(&dets, thr), brute_nms(&dets, thr), "instance {inst}");
    }
}

fn iou_matches_rasterised_count() {
    // corners on a 1/8 px lattice, rasterised at that resolution
    let mut r = rng(4);
    let q = 8.0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut b = || {
            let x1 = r.random_range(0..64) as f64;
            let y1 = r.random_range(0..64) as f64;
            BBox::new(x1 / q, y1 / q, (x1 + r.random_range(1..40) as f64) / q, (y1 + r.random_range(1..40) as f64) / q)
        };
        let (a, c) = (b(), b());
        let (mut inter, mut union) = (0usize, 0usize);
        for iy in 0..110 {
            for ix in 0..110 {
                let (px, py) = ((ix as f64 + 0.5) / q, (iy as f64 + 0.5) / q);
                let ina = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
                let inc = px > c.x1 && px < c.x2 && py > c.y1 && py < c.y2;
                inter += (ina && inc) as usize;
                union += (ina || inc) as usize;
            }
        }
        let raster = inter as f64 / union as f64;
        worst = worst.max((a.iou(&c) - raster).abs());
    }
    assert!(worst <= 1e-3, "{worst:e}");
}

/// AP from a threshold sweep: every distinct score is a cut, each cut gives
/// one (recall, precision) point; AP integrates the best precision reachable
/// at or beyond each recall level.
fn sweep_ap(records: &[EvalRecord], class: usize, thr: f64) -> Option<f64> {
    let n_gt: usize = records.iter().map(|r| r.gt.iter().filter(|t| t.class_id == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for (pi, d) in r.predictions.iter().enumerate() {
            if d.class_id == class {
                preds.push((d.score, ri, pi));
            }
        }
    }
    preds.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    // greedy matching in rank order
    let mut taken: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.len()]).collect();
    let mut is_tp = Vec::new();
    for &(_, ri, pi) in &preds {
        let pb = records[ri].predictions[pi].bbox;
        let cand = records[ri]
            .gt
            .iter()
            .enumerate()
            .filter(|(gi, t)| t.class_id == class && !taken[ri][*gi])
            .map(|(gi, t)| (gi, ref_iou(&pb, &t.bbox)))
            .filter(|&(_, v)| v >= thr)
            .fold(None::<(usize, f64)>, |acc, (gi, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((gi, v)),
            });
        if let Some((gi, _)) = cand {
            taken[ri][gi] = true;
        }
        is_tp.push(cand.is_some());
    }
    // one point per rank prefix
    let points: Vec<(f64, f64)> = (1..=is_tp.len())
        .map(|k| {
            let tp = is_tp[..k].iter().filter(|&&t| t).count() as f64;
            (tp / n_gt as f64, tp / k as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(rec, _)) in points.iter().enumerate() {
        if rec > prev_recall {
            let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (rec - prev_recall) * best;
            prev_recall = rec;
        }
    }
    Some(ap)
}

fn ap_matches_threshold_sweep() {
    let mut r = rng(5);
    for inst in 0..100 {
        let n_img = r.random_range(1..5);
        let records: Vec<EvalRecord> = (0..n_img)
            .map(|_| {
                let gt: Vec<Target> = (0..r.random_range(0..4))
                    .map(|_| Target {
                        bbox: random_box(&mut r, 40.0),
                        class_id: r.random_range(1..3),
                    })
                    .collect();
                let mut predictions = Vec::new();
                for _ in 0..r.random_range(0..6) {
                    let bbox = if !gt.is_empty() && r.random_bool(0.6) {
                        let g = gt[r.random_range(0..gt.len())].bbox;
                        let j = r.random_range(-3.0..3.0);
                        BBox::new(g.x1 + j, g.y1, g.x2 + j, g.y2 + r.random_range(0.0..3.0))
                    } else {
                        random_box(&mut r, 40.0)
                    };
                    predictions.push(Detection {
                        bbox,
                        class_id: r.random_range(1..3),
                        score: r.random_range(0..10) as f64 / 10.0,
                    });
                }
                EvalRecord { gt, predictions }
            })
            .collect();
        for class in [1, 2] {
            let got = average_precision(&records, class, 0.5).unwrap();
            let want = sweep_ap(&records, class, 0.5);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => assert_eq!(a.to_bits(), b.to_bits(), "instance {inst}: {a} vs {b}"),
                other => panic!("instance {inst}: {other:?}"),
            }
        }
    }
}

fn anchors_match_second_generator() {
    let cfg = AnchorConfig::default();
    let got = generate_anchors(12, 12, 8.0, &cfg.scales, &cfg.ratios);
    let mut want = Vec::new();
    for cell in 0..144 {
        let (i, j) = (cell / 12, cell % 12);
        for k in 0..9 {
            let (s, rt) = (cfg.scales[k / 3], cfg.ratios[k % 3]);
            let (w, h) = (s * rt.sqrt(), s / rt.sqrt());
            let (cx, cy) = (8.0 * j as f64 + 4.0, 8.0 * i as f64 + 4.0);
            want.push((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, i, j, k / 3, k % 3));
        }
    }
    assert_eq!(got.len(), want.len());
    for (a, w) in got.iter().zip(&want) {
        let b = a.bbox;
        assert_eq!(
            (b.x1.to_bits(), b.y1.to_bits(), b.x2.to_bits(), b.y2.to_bits()),
            (w.0.to_bits(), w.1.to_bits(), w.2.to_bits(), w.3.to_bits())
        );
        assert_eq!((a.cell, a.scale, a.ratio), ((w.4, w.5), w.6, w.7));
    }
}

fn reference_proposals(
    logits: &[f64],
    deltas: &[f64],
    anchors: &[Anchor],
    grid: (usize, usize),
    img: f64,
    cfg: &ProposalConfig,
) -> Vec<(usize, BBox, f64)> {
    let (gh, gw) = grid;
    let hw = gh * gw;
    let mut cands = Vec::new();
    for (idx, a) in anchors.iter().enumerate() {
        let ch = a.scale * 3 + a.ratio;
        let pos = a.cell.0 * gw + a.cell.1;
        let t: Vec<f64> = (0..4).map(|k| deltas[(4 * ch + k) * hw + pos]).collect();
        let (aw, ah) = (a.bbox.x2 - a.bbox.x1, a.bbox.y2 - a.bbox.y1);
        let (ax, ay) = ((a.bbox.x1 + a.bbox.x2) / 2.0, (a.bbox.y1 + a.bbox.y2) / 2.0);
        let lim = (1000.0f64 / 16.0).ln();
        let (cx, cy) = (t[0] * aw + ax, t[1] * ah + ay);
        let (w, h) = (aw * t[2].min(lim).exp(), ah * t[3].min(lim).exp());
        let c = |v: f64| v.max(0.0).min(img);
        let b = BBox::new(c(cx - w / 2.0), c(cy - h / 2.0), c(cx + w / 2.0), c(cy + h / 2.0));
        if b.x2 - b.x1 >= cfg.min_size && b.y2 - b.y1 >= cfg.min_size {
            cands.push((idx, b, logits[ch * hw + pos]));
        }
    }
    cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    cands.truncate(cfg.pre_nms_top_k);
    let mut kept: Vec<(usize, BBox, f64)> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| ref_iou(&k.1, &c.1) <= cfg.nms_threshold) {
            kept.push(c);
        }
    }
    kept.truncate(cfg.post_nms);
    kept
}

fn proposals_match_reference_pipeline() {
    let cfg_anchor = AnchorConfig::default();
    let mut r = rng(6);
    for case in 0..10 {
        let g = [4, 6, 12][case % 3];
        let anchors = generate_anchors(g, g, 8.0, &cfg_anchor.scales, &cfg_anchor.ratios);
        let n = anchors.len();
        let logits: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let deltas: Vec<f64> = (0..4 * n).map(|_| r.random_range(-0.6..0.6)).collect();
        let cfg = if case % 2 == 0 { ProposalConfig::train() } else { ProposalConfig::eval() };
        let img = 8.0 * g as f64;
        let out = RpnOutputs {
            logits: &logits,
            deltas: &deltas,
            grid: (g, g),
            n_ratios: 3,
        };
        let got = select_proposals(&out, &anchors, (img, img), &cfg).unwrap();
        let want = reference_proposals(&logits, &deltas, &anchors, (g, g), img, &cfg);
        assert_eq!(got.len(), want.len(), "case {case}");
        for (p, w) in got.iter().zip(&want) {
            assert_eq!(p.anchor, w.0);
            assert_eq!(p.score, w.2);
            close(&[p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2], &[w.1.x1, w.1.y1, w.1.x2, w.1.y2], 1e-9);
        }
    }
}

/// Max over each bin of a quantised 7x7 partition of the feature rectangle.
fn loop_roi_pool(x: &Tensor<f64>, roi: &Roi, stride: f64, out: usize) -> Vec<f64> {
    let [_, c, h, w] = x.shape().try_into().unwrap();
    let fx0 = (roi.bbox.x1 / stride).floor() as i64;
    let fy0 = (roi.bbox.y1 / stride).floor() as i64;
    let fx1 = ((roi.bbox.x2 / stride).ceil() as i64).max(fx0 + 1);
    let fy1 = ((roi.bbox.y2 / stride).ceil() as i64).max(fy0 + 1);
    let (rw, rh) = ((fx1 - fx0) as f64, (fy1 - fy0) as f64);
    let mut res = vec![0.0; c * out * out];
    for ci in 0..c {
        for by in 0..out {
            for bx in 0..out {
                let ys = fy0 + (by as f64 * rh / out as f64).floor() as i64;
                let ye = fy0 + ((by + 1) as f64 * rh / out as f64).ceil() as i64;
                let xs = fx0 + (bx as f64 * rw / out as f64).floor() as i64;
                let xe = fx0 + ((bx + 1) as f64 * rw / out as f64).ceil() as i64;
                let mut best: Option<f64> = None;
                for yy in ys.max(0)..ye.min(h as i64) {
                    for xx in xs.max(0)..xe.min(w as i64) {
                        let v = x.data()[((roi.batch * c + ci) * h + yy as usize) * w + xx as usize];
                        best = Some(best.map_or(v, |b: f64| b.max(v)));
                    }
                }
                res[(ci * out + by) * out + bx] = best.unwrap_or(0.0);
            }
        }
    }
    res
}

fn roi_pool_matches_loops() {
    let mut r = rng(7);
    for _ in 0..50 {
        let (n, c, h, w) = (2, r.random_range(1..4), r.random_range(3..13), r.random_range(3..13));
        let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
        let rois: Vec<Roi> = (0..4)
            .map(|_| {
                let x1 = r.random_range(-8.0..8.0 * w as f64 - 4.0);
                let y1 = r.random_range(-8.0..8.0 * h as f64 - 4.0);
                Roi {
                    batch: r.random_range(0..n),
                    bbox: BBox::new(x1, y1, x1 + r.random_range(2.0..70.0), y1 + r.random_range(2.0..70.0)),
                }
            })
            .filter(|roi| roi.bbox.x2 > 0.0 && roi.bbox.y2 > 0.0)
            .collect();
        if rois.is_empty() {
            continue;
        }
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.roi_pool(xv, &rois, 8.0, 7).unwrap();
        let want: Vec<f64> = rois.iter().flat_map(|roi| loop_roi_pool(&x, roi, 8.0, 7)).collect();
        close(t.value(y).data(), &want, 0.0);
    }
}

suite! {
    matmul_matches_triple_loop,
    conv2d_matches_nested_loops,
    nms_matches_brute_force,
    iou_matches_rasterised_count,
    ap_matches_threshold_sweep,
    anchors_match_second_generator,
    proposals_match_reference_pipeline,
    roi_pool_matches_loops,
}
