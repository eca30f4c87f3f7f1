//! Property tests for the algebraic invariants.

use crate::common::{cases, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use smrnet_core::attention::CbamBlock;
use smrnet_core::detector::anchors::{generate_anchors, AnchorConfig};
use smrnet_core::detector::nms::{nms, Detection};
use smrnet_core::detector::rpn::{select_proposals, ProposalConfig, RpnOutputs};
use smrnet_core::detector::train::Target;
use smrnet_core::detector::bbox::MAX_LOG_SCALE;
use smrnet_core::detector::{BBox, BoxCoder};
use smrnet_core::fusion::RwNet;
use smrnet_core::layers::fill_param;
use smrnet_core::metrics::{average_precision, mean_average_precision, mean_best_iou, EvalRecord};
use smrnet_core::synthgel::{edge_band, render_indexed, GelRenderParams, SnapType};
use smrnet_core::{Graph, Mode, ParamStore, Tape, Tensor};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..80.0f64, 0.0..80.0f64, 0.5..60.0f64, 0.5..60.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn store_with<F, R>(f: F, seed: u64) -> (ParamStore<f64>, R)
where
    F: FnOnce(&mut ParamStore<f64>) -> R,
{
    let mut store = ParamStore::new();
    let block = f(&mut store);
    store.initialize(&mut rng(seed));
    (store, block)
}

proptest! {
    #![proptest_config(cases(64))]

    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, scale in 0.1..50.0f64, seed: u64) {
        let x = uniform(&[rows, cols], -scale, scale, &mut rng(seed));
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            if cols > 1 && scale < 20.0 {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(a.iou(&a), 1.0);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    fn nms_survivors_are_a_sparse_subset(boxes in prop::collection::vec((bbox(), 0u8..10), 1..40), thr in 0.1..0.9f64) {
        let dets: Vec<Detection> = boxes.iter().map(|&(b, s)| Detection { bbox: b, class_id: 1, score: s as f64 / 10.0 }).collect();
        let kept = nms(&dets, thr);
        prop_assert!(!kept.is_empty());
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) <= thr);
                prop_assert!(a.score >= b.score);
            }
        }
    }

    fn decode_inverts_encode(gt in bbox(), anchor in bbox(), head in any::<bool>()) {
        // Growth beyond the decoder's scale clamp is deliberately not invertible.
        let limit = MAX_LOG_SCALE.exp();
        prop_assume!(gt.width() <= limit * anchor.width() && gt.height() <= limit * anchor.height());
        let coder = if head { BoxCoder::new([10.0, 10.0, 5.0, 5.0]) } else { BoxCoder::default() };
        let d = coder.encode(&gt, &anchor).unwrap();
        let back = coder.decode(d, &anchor).unwrap();
        for (x, y) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            prop_assert!((x - y).abs() <= 1e-4, "{:?} vs {:?}", back, gt);
        }
    }

    fn proposals_stay_inside_the_image(seed: u64, g in 2usize..8) {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(g, g, 8.0, &cfg.scales, &cfg.ratios);
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..anchors.len()).map(|_| r.random_range(-5.0..5.0)).collect();
        let deltas: Vec<f64> = (0..4 * anchors.len()).map(|_| r.random_range(-3.0..3.0)).collect();
        let img = 8.0 * g as f64;
        let out = RpnOutputs { logits: &logits, deltas: &deltas, grid: (g, g), n_ratios: 3 };
        for p in select_proposals(&out, &anchors, (img, img), &ProposalConfig::train()).unwrap() {
            prop_assert!(p.bbox.x1 >= 0.0 && p.bbox.y1 >= 0.0 && p.bbox.x2 <= img && p.bbox.y2 <= img);
            prop_assert!(p.bbox.width() >= 4.0 && p.bbox.height() >= 4.0);
        }
    }
}

proptest! {
    #![proptest_config(cases(24))]

    fn rw_weights_normalised_convex_and_equivariant(n in 1usize..3, hw in 1usize..5, seed: u64) {
        let width = 8;
        let (store, rw) = store_with(|s| RwNet::new(s, "rw", width).unwrap(), seed);
        let mut r = rng(seed ^ 1);
        let maps: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[n, width, hw, hw], -2.0, 2.0, &mut r)).collect();
        let mut g = Graph::new(&store, Mode::Eval);
        let v: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let (fused, w) = rw.fuse(&mut g, [v[0], v[1], v[2]]).unwrap();
        let wd = g.value(w).data().to_vec();
        for row in wd.chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        }
        for (k, &o) in g.value(fused).data().iter().enumerate() {
            let vals = [maps[0].data()[k], maps[1].data()[k], maps[2].data()[k]];
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
        // (G2, G3, G1) permutes the weights the same way
        let wp = rw.weights(&mut g, [v[1], v[2], v[0]]).unwrap();
        let wp = g.value(wp).data().to_vec();
        for (a, b) in wd.chunks(3).zip(wp.chunks(3)) {
            for (x, y) in [(a[1], b[0]), (a[2], b[1]), (a[0], b[2])] {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    fn cbam_attenuates_and_masks_broadcast(n in 1usize..3, c in prop::sample::select(vec![4usize, 8, 12]), h in 1usize..7, w in 1usize..7, seed: u64) {
        let (store, cbam) = store_with(|s| CbamBlock::new(s, "cbam", c, 4).unwrap(), seed);
        let x = uniform(&[n, c, h, w], -3.0, 3.0, &mut rng(seed ^ 2));
        let mut g = Graph::new(&store, Mode::Eval);
        let xv = g.constant(x.clone());
        let y = cbam.forward(&mut g, xv).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());
        for (o, i) in g.value(y).data().iter().zip(x.data()) {
            prop_assert!(o.abs() <= i.abs());
        }
        let cm = cbam.channel.mask(&mut g, xv).unwrap();
        prop_assert_eq!(g.shape(cm), &[n, c, 1, 1][..]);
        let sm = cbam.spatial.mask(&mut g, xv).unwrap();
        prop_assert_eq!(g.shape(sm), &[n, 1, h, w][..]);
        // channel mask then spatial mask, written out per element
        let cx = g.mul(xv, cm).unwrap();
        let sm2 = cbam.spatial.mask(&mut g, cx).unwrap();
        let (cmd, smd, yd) = (g.value(cm).data().to_vec(), g.value(sm2).data().to_vec(), g.value(y).data().to_vec());
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..h * w {
                    let i = (ni * c + ci) * h * w + p;
                    let want = x.data()[i] * cmd[ni * c + ci] * smd[ni * h * w + p];
                    prop_assert!((yd[i] - want).abs() <= 1e-12);
                }
            }
        }
    }
}

fn swapping_cbam_order_changes_output() {
    let (store, cbam) = store_with(|s| CbamBlock::new(s, "cbam", 8, 4).unwrap(), 3);
    let x = uniform(&[2, 8, 5, 5], -2.0, 2.0, &mut rng(4));
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.constant(x);
    let serial = cbam.forward(&mut g, xv).unwrap();
    let s = cbam.spatial.forward(&mut g, xv).unwrap();
    let swapped = cbam.channel.forward(&mut g, s).unwrap();
    let diff = g.value(serial).data().iter().zip(g.value(swapped).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "{diff}");
}

fn zeroed_attention_scales_by_a_quarter() {
    let mut store = ParamStore::<f64>::new();
    let cbam = CbamBlock::new(&mut store, "cbam", 8, 4).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        fill_param(&mut store, id, 0.0);
    }
    let x = uniform(&[2, 8, 4, 4], -2.0, 2.0, &mut rng(5));
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.constant(x.clone());
    let y = cbam.forward(&mut g, xv).unwrap();
    for (o, i) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(*o, 0.25 * i);
    }
}

proptest! {
    #![proptest_config(cases(32))]

    fn dilated_conv_equals_zero_stuffed_kernel(d in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]), cin in 1usize..3, cout in 1usize..3, extra in 0usize..6, seed: u64) {
        let mut r = rng(seed);
        let ke = d * (k - 1) + 1;
        let (h, w) = (ke + extra, ke + extra + 1);
        let x = uniform(&[1, cin, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let mut big = vec![0.0; cout * cin * ke * ke];
        for o in 0..cout * cin {
            for i in 0..k {
                for j in 0..k {
                    big[(o * ke + i * d) * ke + j * d] = wt.data()[(o * k + i) * k + j];
                }
            }
        }
        let pad = d * (k - 1) / 2;
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(wt);
        let bv = t.constant(Tensor::from_vec(&[cout, cin, ke, ke], big).unwrap());
        let a = t.conv2d(xv, wv, None, 1, pad, d).unwrap();
        let b = t.conv2d(xv, bv, None, 1, pad, 1).unwrap();
        prop_assert_eq!(t.shape(a), t.shape(b));
        for (p, q) in t.value(a).data().iter().zip(t.value(b).data()) {
            prop_assert!((p - q).abs() <= 1e-6);
        }
    }

    fn unit_batchnorm_eval_is_idempotent(c in 1usize..5, seed: u64) {
        let x = uniform(&[2, c, 3, 3], -10.0, 10.0, &mut rng(seed));
        let (ones, zeros) = (vec![1.0; c], vec![0.0; c]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let ga = t.constant(Tensor::from_vec(&[c], ones.clone()).unwrap());
        let be = t.constant(Tensor::from_vec(&[c], zeros.clone()).unwrap());
        let once = t.batch_norm_eval(xv, ga, be, &zeros, &ones, 1e-5).unwrap();
        let twice = t.batch_norm_eval(once, ga, be, &zeros, &ones, 1e-5).unwrap();
        for ((a, b), xi) in t.value(once).data().iter().zip(t.value(twice).data()).zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * xi.abs() + 1e-12);
        }
    }
}

fn random_records(seed: u64) -> Vec<EvalRecord> {
    let mut r = rng(seed);
    (0..r.random_range(1..6))
        .map(|_| {
            let gt = vec![Target {
                bbox: {
                    let (x, y) = (r.random_range(0.0..50.0), r.random_range(0.0..50.0));
                    BBox::new(x, y, x + r.random_range(5.0..30.0), y + r.random_range(5.0..30.0))
                },
                class_id: r.random_range(1..3),
            }];
            let predictions = (0..r.random_range(0..5))
                .map(|_| {
                    let g = gt[0].bbox;
                    let j = r.random_range(-6.0..6.0);
                    Detection {
                        bbox: BBox::new(g.x1 + j, g.y1 + j, g.x2 + j, g.y2),
                        class_id: r.random_range(1..3),
                        score: r.random_range(0.0..1.0),
                    }
                })
                .collect();
            EvalRecord { gt, predictions }
        })
        .collect()
}

proptest! {
    #![proptest_config(cases(128))]

    fn ap_depends_only_on_ranking(seed: u64) {
        let recs = random_records(seed);
        let rescaled: Vec<EvalRecord> = recs
            .iter()
            .map(|r| EvalRecord {
                gt: r.gt.clone(),
                predictions: r.predictions.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect(),
            })
            .collect();
        for class in [1, 2] {
            prop_assert_eq!(average_precision(&recs, class, 0.5).unwrap(), average_precision(&rescaled, class, 0.5).unwrap());
        }
    }

    fn trailing_miss_never_raises_ap(seed: u64, at in 0usize..5) {
        let recs = random_records(seed);
        let mut more = recs.clone();
        let i = at % more.len();
        for class in [1, 2] {
            more[i].predictions.push(Detection { bbox: BBox::new(500.0, 500.0, 510.0, 510.0), class_id: class, score: -1.0 });
        }
        for class in [1, 2] {
            let (a, b) = (average_precision(&recs, class, 0.5).unwrap(), average_precision(&more, class, 0.5).unwrap());
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(b <= a);
            }
        }
    }

    fn metrics_lie_in_unit_interval(seed: u64) {
        let recs = random_records(seed);
        let m = mean_best_iou(&recs).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        let (map, _) = mean_average_precision(&recs, &[1, 2], 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&map));
    }
}

proptest! {
    #![proptest_config(cases(48))]

    fn rendered_samples_keep_contrast_and_margin(seed: u64, index in 0u64..10_000, b in any::<bool>()) {
        let p = GelRenderParams::default();
        let kind = if b { SnapType::B } else { SnapType::A };
        let s = render_indexed(kind, seed, index, &p);
        let mask = s.shape.rasterize(p.width, p.height);
        let band = edge_band(&mask, p.width, p.height, p.edge_band);
        let mean = |sel: &[bool]| {
            let v: Vec<f64> = s.image.data().iter().zip(sel).filter(|(_, &m)| m).map(|(&x, _)| x as f64).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        prop_assert!(mean(&mask) - mean(&band) >= 25.0 * p.noise_sigma);
        let g = s.gt_box;
        prop_assert!(g.x1 > 0.0 && g.y1 > 0.0 && g.x2 < p.width as f64 && g.y2 < p.height as f64);
        prop_assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

/// perimeter^2 / area of the bright region, from the image alone.
fn compactness(img: &[f32], w: usize, h: usize) -> f64 {
    let on = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize && img[y as usize * w + x as usize] > 0.65;
    let (mut area, mut perim) = (0usize, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(x, y) {
                area += 1;
                perim += [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().filter(|(dx, dy)| !on(x + dx, y + dy)).count();
            }
        }
    }
    (perim * perim) as f64 / area.max(1) as f64
}

fn snap_types_separate_by_compactness() {
    let p = GelRenderParams::default();
    let score = |seed: u64, i: u64| -> Vec<(f64, bool)> {
        SnapType::ALL
            .iter()
            .map(|&k| {
                let s = render_indexed(k, seed, i, &p);
                (compactness(s.image.data(), p.width, p.height), k == SnapType::B)
            })
            .collect()
    };
    // fit one threshold on 200 samples, score 1000 fresh ones
    let fit: Vec<(f64, bool)> = (0..100).flat_map(|i| score(1, i)).collect();
    let accuracy = |thr: f64, data: &[(f64, bool)]| data.iter().filter(|&&(v, b)| (v > thr) == b).count() as f64 / data.len() as f64;
    let thr = fit.iter().map(|f| f.0).max_by(|&a, &b| accuracy(a, &fit).total_cmp(&accuracy(b, &fit))).unwrap();
    let test: Vec<(f64, bool)> = (0..500).flat_map(|i| score(2, i)).collect();
    let acc = accuracy(thr, &test);
    assert!(acc > 0.95, "accuracy {acc} at threshold {thr}");
}

suite! {
    softmax_rows_are_distributions,
    iou_symmetric_and_bounded,
    nms_survivors_are_a_sparse_subset,
    decode_inverts_encode,
    proposals_stay_inside_the_image,
    rw_weights_normalised_convex_and_equivariant,
    cbam_attenuates_and_masks_broadcast,
    swapping_cbam_order_changes_output,
    zeroed_attention_scales_by_a_quarter,
    dilated_conv_equals_zero_stuffed_kernel,
    unit_batchnorm_eval_is_idempotent,
    ap_depends_only_on_ranking,
    trailing_miss_never_raises_ap,
    metrics_lie_in_unit_interval,
    rendered_samples_keep_contrast_and_margin,
    snap_types_separate_by_compactness,
}
