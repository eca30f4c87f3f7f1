//! Central finite differences against the tape, in f64.

use crate::common::{input, randomize, rng, uniform};
use smrnet_core::attention::{CbamBlock, ChannelAttention, SpatialAttention};
use smrnet_core::backbone::{Backbone, BackboneConfig, ResidualBlock, Stage};
use smrnet_core::detector::head::DetectionHead;
use smrnet_core::detector::rpn::{KernelCombine, RpnHead};
use smrnet_core::detector::BBox;
use smrnet_core::fusion::{ConcatFuse, MsffBranch, RwNet};
use smrnet_core::gradcheck::{grad_check_params, grad_check_with, nudge_from_kinks, GradCheckOptions};
use smrnet_core::ops::pool::PoolKind;
use smrnet_core::ops::roi::Roi;
use smrnet_core::{Mode, ParamStore, Result, Tape, Var};

const OP_TOL: f64 = 1e-4;
const BACKBONE_TOL: f64 = 1e-3;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
}

fn sampled(seed: u64, k: usize) -> GradCheckOptions {
    GradCheckOptions {
        max_coords: Some(k),
        ..opts(seed)
    }
}

/// Checks `f` on three input shapes.
fn check_unary(name: &str, shapes: [&[usize]; 3], f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    for (k, shape) in shapes.iter().enumerate() {
        let mut x = uniform(shape, -2.0, 2.0, &mut rng(k as u64 + 1));
        nudge_from_kinks(&mut x);
        let err = grad_check_with(&x, opts(k as u64), &f).unwrap();
        assert!(err < OP_TOL, "{name} {shape:?}: {err:e}");
    }
}

fn elementwise_ops() {
    let shapes: [&[usize]; 3] = [&[5], &[2, 3, 4], &[2, 2, 3, 3]];
    check_unary("relu", shapes, |t, x| t.relu(x));
    check_unary("sigmoid", shapes, |t, x| t.sigmoid(x));
    check_unary("scale", shapes, |t, x| t.scale(x, -1.7));
    check_unary("add", shapes, |t, x| {
        let c = t.constant(uniform(t.shape(x), -1.0, 1.0, &mut rng(9)));
        t.add(x, c)
    });
    check_unary("sub", shapes, |t, x| {
        let c = t.constant(uniform(t.shape(x), -1.0, 1.0, &mut rng(9)));
        let a = t.sub(c, x)?;
        t.sub(a, x)
    });
    check_unary("mul self", shapes, |t, x| t.mul(x, x));
    check_unary("sum", shapes, |t, x| t.sum(x));
    check_unary("mean", shapes, |t, x| t.mean(x));
}

fn broadcast_mul() {
    // [N,C,1,1] and [N,1,H,W] masks against [N,C,H,W] maps
    for (k, &(n, c, h, w)) in [(1, 2, 3, 3), (2, 3, 2, 4), (2, 4, 5, 5)].iter().enumerate() {
        let map = uniform(&[n, c, h, w], -1.0, 1.0, &mut rng(k as u64));
        let m = map.clone();
        let e = grad_check_with(&uniform(&[n, c, 1, 1], -1.0, 1.0, &mut rng(50 + k as u64)), opts(1), |t, x| {
            let a = t.constant(m.clone());
            t.mul(a, x)
        })
        .unwrap();
        assert!(e < OP_TOL, "channel mask {e:e}");
        let m = map.clone();
        let e = grad_check_with(&uniform(&[n, 1, h, w], -1.0, 1.0, &mut rng(60 + k as u64)), opts(2), |t, x| {
            let a = t.constant(m.clone());
            t.mul(a, x)
        })
        .unwrap();
        assert!(e < OP_TOL, "spatial mask {e:e}");
        let e = grad_check_with(&map, opts(3), |t, x| {
            let s = t.constant(uniform(&[n, c, 1, 1], -1.0, 1.0, &mut rng(7)));
            t.mul(x, s)
        })
        .unwrap();
        assert!(e < OP_TOL, "map side {e:e}");
    }
}

fn shape_ops() {
    check_unary("reshape", [&[6], &[2, 3, 4], &[2, 2, 3, 3]], |t, x| {
        let n = t.shape(x).iter().product::<usize>();
        let r = t.reshape(x, &[n])?;
        t.mul(r, r)
    });
    check_unary("gather", [&[6], &[2, 3, 4], &[2, 2, 3, 3]], |t, x| {
        let n = t.value(x).numel();
        let idx: Vec<usize> = (0..n).rev().step_by(2).chain([0, 0, 1]).collect();
        let g = t.gather(x, &idx)?;
        t.mul(g, g)
    });
    check_unary("concat", [&[1, 2, 2, 2], &[2, 3, 1, 4], &[3, 1, 2, 2]], |t, x| {
        let other = t.constant(uniform(&{
            let mut s = t.shape(x).to_vec();
            s[1] = 2;
            s
        }, -1.0, 1.0, &mut rng(3)));
        let c = t.concat(&[x, other, x])?;
        t.mul(c, c)
    });
    check_unary("upsample", [&[1, 1, 2, 2], &[2, 3, 2, 3], &[1, 2, 3, 3]], |t, x| t.upsample_nearest(x, 2));
    check_unary("upsample x4", [&[1, 1, 1, 1], &[2, 1, 2, 2], &[1, 2, 2, 3]], |t, x| t.upsample_nearest(x, 4));
}

fn matmul_and_linear() {
    for (k, &(m, kk, n)) in [(1, 1, 1), (3, 4, 2), (5, 2, 6)].iter().enumerate() {
        let b = uniform(&[kk, n], -1.0, 1.0, &mut rng(10 + k as u64));
        let e = grad_check_with(&uniform(&[m, kk], -1.0, 1.0, &mut rng(k as u64)), opts(1), |t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv)
        })
        .unwrap();
        assert!(e < OP_TOL, "matmul lhs {e:e}");
        let a = uniform(&[m, kk], -1.0, 1.0, &mut rng(20 + k as u64));
        let e = grad_check_with(&b, opts(2), |t, x| {
            let av = t.constant(a.clone());
            t.matmul(av, x)
        })
        .unwrap();
        assert!(e < OP_TOL, "matmul rhs {e:e}");
    }
    for (k, &(n, i, o)) in [(1, 3, 2), (4, 5, 3), (2, 8, 8)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let x = input(&mut store, "x", uniform(&[n, i], -1.0, 1.0, &mut rng(k as u64)));
        let w = input(&mut store, "w", uniform(&[o, i], -1.0, 1.0, &mut rng(30 + k as u64)));
        let b = input(&mut store, "b", uniform(&[o], -1.0, 1.0, &mut rng(40 + k as u64)));
        let e = grad_check_params(&store, Mode::Eval, opts(k as u64), |g| {
            let (x, w, b) = (g.param(x), g.param(w), g.param(b));
            g.linear(x, w, Some(b))
        })
        .unwrap();
        assert!(e < OP_TOL, "linear {e:e}");
    }
}

fn conv2d_all_geometries() {
    // (N, Cin, H, W, Cout, K, stride, padding, dilation, bias)
    let cases = [
        (1, 1, 5, 5, 1, 3, 1, 1, 1, true),
        (2, 3, 6, 7, 2, 3, 2, 1, 1, false),
        (1, 2, 9, 9, 3, 3, 1, 2, 2, true),
        (2, 2, 11, 10, 2, 3, 1, 4, 4, true),
        (1, 3, 4, 4, 4, 1, 1, 0, 1, true),
        (2, 2, 8, 8, 2, 1, 2, 0, 1, false),
        (1, 2, 7, 7, 2, 5, 1, 2, 1, true),
        (1, 1, 12, 12, 1, 7, 2, 3, 1, false),
    ];
    for (k, &(n, cin, h, w, cout, ks, s, p, d, bias)) in cases.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let x = input(&mut store, "x", uniform(&[n, cin, h, w], -1.0, 1.0, &mut rng(k as u64)));
        let wt = input(&mut store, "w", uniform(&[cout, cin, ks, ks], -1.0, 1.0, &mut rng(100 + k as u64)));
        let b = bias.then(|| input(&mut store, "b", uniform(&[cout], -1.0, 1.0, &mut rng(200 + k as u64))));
        let e = grad_check_params(&store, Mode::Eval, opts(k as u64), |g| {
            let (xv, wv) = (g.param(x), g.param(wt));
            let bv = b.map(|b| g.param(b));
            g.conv2d(xv, wv, bv, s, p, d)
        })
        .unwrap();
        assert!(e < OP_TOL, "conv case {k}: {e:e}");
    }
}

fn pooling() {
    check_unary("max_pool", [&[1, 1, 4, 4], &[2, 2, 5, 5], &[1, 3, 6, 7]], |t, x| t.max_pool2d(x, 2, 2, 0));
    check_unary("max_pool padded", [&[1, 1, 5, 5], &[2, 2, 6, 6], &[1, 2, 7, 8]], |t, x| t.max_pool2d(x, 3, 2, 1));
    check_unary("avg_pool", [&[1, 1, 4, 4], &[2, 2, 6, 6], &[1, 3, 6, 4]], |t, x| t.avg_pool2d(x, 2, 2));
    for kind in [PoolKind::Avg, PoolKind::Max] {
        check_unary("global_pool", [&[1, 1, 3, 3], &[2, 3, 4, 4], &[3, 2, 2, 5]], |t, x| t.global_pool(kind, x));
        check_unary("channel_pool", [&[1, 2, 3, 3], &[2, 3, 4, 4], &[3, 5, 2, 2]], |t, x| t.channel_pool(kind, x));
    }
}

fn roi_pool() {
    let rois = [
        Roi { batch: 0, bbox: BBox::new(0.0, 0.0, 24.0, 24.0) },
        Roi { batch: 1, bbox: BBox::new(5.0, 9.0, 40.0, 30.0) },
        Roi { batch: 0, bbox: BBox::new(30.0, 30.0, 34.0, 36.0) },
    ];
    check_unary("roi_pool", [&[2, 1, 6, 6], &[2, 2, 5, 7], &[3, 3, 8, 8]], |t, x| t.roi_pool(x, &rois, 8.0, 3));
    check_unary("roi_pool 7x7", [&[2, 1, 4, 4], &[2, 2, 6, 6], &[2, 1, 12, 12]], |t, x| t.roi_pool(x, &rois[..2], 8.0, 7));
}

fn softmax_and_losses() {
    check_unary("softmax", [&[4], &[3, 3], &[2, 5]], |t, x| t.softmax(x));
    for (k, shape) in [[6usize], [10], [31]].iter().enumerate() {
        let n = shape[0];
        let x = uniform(shape, -3.0, 3.0, &mut rng(k as u64));
        let targets: Vec<f64> = (0..n).map(|i| ((i * 7 + k) % 3 == 0) as u8 as f64).collect();
        let e = grad_check_with(&x, opts(1), |t, v| t.bce_with_logits(v, &targets)).unwrap();
        assert!(e < OP_TOL, "bce {e:e}");
        let reg = uniform(shape, -1.0, 1.0, &mut rng(70 + k as u64));
        let mut y = uniform(shape, -3.0, 3.0, &mut rng(80 + k as u64));
        // keep |x - target| away from the quadratic/linear junction
        for (v, r) in y.data_mut().iter_mut().zip(reg.data()) {
            if ((*v - r).abs() - 1.0).abs() < 0.05 {
                *v += 0.2;
            }
        }
        let e = grad_check_with(&y, opts(2), |t, v| t.smooth_l1_loss(v, reg.data())).unwrap();
        assert!(e < OP_TOL, "smooth_l1 {e:e}");
    }
    for (k, &(r, c)) in [(1, 3), (4, 3), (6, 5)].iter().enumerate() {
        let labels: Vec<usize> = (0..r).map(|i| (i + k) % c).collect();
        let x = uniform(&[r, c], -3.0, 3.0, &mut rng(k as u64));
        let e = grad_check_with(&x, opts(3), |t, v| t.softmax_cross_entropy(v, &labels)).unwrap();
        assert!(e < OP_TOL, "cross entropy {e:e}");
    }
}

fn batch_norm_both_modes() {
    for (k, shape) in [[2usize, 1, 3, 3], [3, 2, 2, 2], [2, 4, 4, 5]].iter().enumerate() {
        let c = shape[1];
        let mut store = ParamStore::<f64>::new();
        let x = input(&mut store, "x", uniform(shape, -2.0, 2.0, &mut rng(k as u64)));
        let gamma = input(&mut store, "gamma", uniform(&[c], 0.5, 1.5, &mut rng(10 + k as u64)));
        let beta = input(&mut store, "beta", uniform(&[c], -0.5, 0.5, &mut rng(20 + k as u64)));
        let e = grad_check_params(&store, Mode::Train, opts(k as u64), |g| {
            let (x, ga, be) = (g.param(x), g.param(gamma), g.param(beta));
            Ok(g.batch_norm_train(x, ga, be, 1e-5)?.0)
        })
        .unwrap();
        assert!(e < OP_TOL, "bn train {e:e}");
        let rm = uniform(&[c], -0.5, 0.5, &mut rng(30 + k as u64));
        let rv = uniform(&[c], 0.5, 2.0, &mut rng(40 + k as u64));
        let e = grad_check_params(&store, Mode::Eval, opts(k as u64), |g| {
            let (x, ga, be) = (g.param(x), g.param(gamma), g.param(beta));
            g.batch_norm_eval(x, ga, be, rm.data(), rv.data(), 1e-5)
        })
        .unwrap();
        assert!(e < OP_TOL, "bn eval {e:e}");
    }
}

fn check_block(name: &str, store: &ParamStore<f64>, mode: Mode, tol: f64, coords: usize, f: impl Fn(&mut smrnet_core::Graph<'_, f64>) -> Result<Var>) {
    let e = grad_check_params(store, mode, sampled(7, coords), f).unwrap();
    assert!(e < tol, "{name}: {e:e}");
}

fn attention_blocks() {
    for (k, &(n, c, h, w, r)) in [(1, 4, 3, 3, 2), (2, 8, 4, 5, 4), (2, 6, 6, 6, 3)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let ca = ChannelAttention::new(&mut store, "ca", c, r).unwrap();
        let sa = SpatialAttention::new(&mut store, "sa");
        let cbam = CbamBlock::new(&mut store, "cbam", c, r).unwrap();
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[n, c, h, w], -1.0, 1.0, &mut rng(k as u64)));
        check_block("channel attention", &store, Mode::Eval, OP_TOL, 300, |g| {
            let x = g.param(x);
            ca.forward(g, x)
        });
        check_block("spatial attention", &store, Mode::Eval, OP_TOL, 300, |g| {
            let x = g.param(x);
            sa.forward(g, x)
        });
        check_block("cbam", &store, Mode::Eval, OP_TOL, 300, |g| {
            let x = g.param(x);
            cbam.forward(g, x)
        });
    }
}

fn residual_stage() {
    // (N, Cin, Cout, H, stride, attention)
    for (k, &(n, cin, cout, hw, s, att)) in [(2, 2, 2, 6, 1, None), (2, 2, 4, 8, 2, Some(2)), (3, 4, 4, 5, 1, Some(4))].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let stage = Stage {
            blocks: vec![
                ResidualBlock::new(&mut store, "b0", cin, cout, s, att).unwrap(),
                ResidualBlock::new(&mut store, "b1", cout, cout, 1, att).unwrap(),
            ],
            attention: None,
        };
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[n, cin, hw, hw], -1.0, 1.0, &mut rng(k as u64)));
        for mode in [Mode::Train, Mode::Eval] {
            check_block("residual stage", &store, mode, OP_TOL, 200, |g| {
                let x = g.param(x);
                stage.forward(g, x)
            });
        }
    }
}

fn msff_branch_and_fusion() {
    // (N, C, width, H, dilation, upsample, attention)
    for (k, &(n, c, width, hw, d, up, att)) in [(1, 4, 4, 4, 1, 1, Some(2)), (2, 4, 8, 3, 2, 2, Some(4)), (2, 6, 4, 2, 4, 4, None)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let branch = MsffBranch::new(&mut store, "br", c, width, d, up, att).unwrap();
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[n, c, hw, hw], -1.0, 1.0, &mut rng(k as u64)));
        check_block("msff branch", &store, Mode::Eval, OP_TOL, 250, |g| {
            let x = g.param(x);
            branch.forward(g, x)
        });
    }
    for (k, &(n, width, hw)) in [(1, 4, 2), (2, 8, 3), (3, 4, 4)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let rw = RwNet::new(&mut store, "rw", width).unwrap();
        let cf = ConcatFuse::new(&mut store, "cat", width);
        randomize(&mut store, k as u64);
        let maps: Vec<_> = (0..3)
            .map(|i| input(&mut store, &format!("g{i}"), uniform(&[n, width, hw, hw], -1.0, 1.0, &mut rng(10 * k as u64 + i))))
            .collect();
        check_block("rw fuse", &store, Mode::Eval, OP_TOL, 250, |g| {
            let m = [g.param(maps[0]), g.param(maps[1]), g.param(maps[2])];
            Ok(rw.fuse(g, m)?.0)
        });
        check_block("rw weights", &store, Mode::Eval, OP_TOL, 250, |g| {
            let m = [g.param(maps[0]), g.param(maps[1]), g.param(maps[2])];
            rw.weights(g, m)
        });
        check_block("concat fuse", &store, Mode::Eval, OP_TOL, 250, |g| {
            let m = [g.param(maps[0]), g.param(maps[1]), g.param(maps[2])];
            cf.forward(g, m)
        });
    }
}

fn rpn_head() {
    for (k, &(n, width, hw, a, combine)) in
        [(1, 4, 3, 3, KernelCombine::Sum), (2, 4, 4, 9, KernelCombine::Concat), (1, 8, 5, 2, KernelCombine::Sum)].iter().enumerate()
    {
        let mut store = ParamStore::<f64>::new();
        let head = RpnHead::new(&mut store, "rpn", width, a, combine);
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[n, width, hw, hw], -1.0, 1.0, &mut rng(k as u64)));
        check_block("rpn head", &store, Mode::Eval, OP_TOL, 300, |g| {
            let x = g.param(x);
            let (l, d) = head.forward(g, x)?;
            g.concat(&[l, d])
        });
    }
}

fn detection_head() {
    for (k, &(r, c, pool, hidden)) in [(1, 2, 2, 4), (3, 2, 3, 8), (5, 1, 7, 6)].iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let head = DetectionHead::new(&mut store, "head", c, pool, hidden);
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[r, c, pool, pool], -1.0, 1.0, &mut rng(k as u64)));
        check_block("detection head", &store, Mode::Eval, OP_TOL, 300, |g| {
            let x = g.param(x);
            let (cls, reg) = head.forward(g, x)?;
            g.concat(&[cls, reg])
        });
    }
}

fn tiny_backbone() {
    for (k, (n, mode)) in [(2, Mode::Train), (1, Mode::Eval), (2, Mode::Eval)].into_iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::new(&mut store, "bb", &cfg).unwrap();
        randomize(&mut store, k as u64);
        let x = input(&mut store, "x", uniform(&[n, 1, 64, 64], 0.0, 1.0, &mut rng(k as u64)));
        check_block("tiny backbone", &store, mode, BACKBONE_TOL, 40, |g| {
            let x = g.param(x);
            let p = bb.forward(g, x)?;
            let n = g.shape(p.f3)[0];
            let flat: Vec<Var> = [p.f1, p.f2, p.f3]
                .into_iter()
                .map(|f| {
                    let len = g.value(f).numel() / n;
                    g.reshape(f, &[n, len])
                })
                .collect::<Result<_>>()?;
            g.concat(&flat)
        });
    }
}

suite! {
    elementwise_ops,
    broadcast_mul,
    shape_ops,
    matmul_and_linear,
    conv2d_all_geometries,
    pooling,
    roi_pool,
    softmax_and_losses,
    batch_norm_both_modes,
    attention_blocks,
    residual_stage,
    msff_branch_and_fusion,
    rpn_head,
    detection_head,
    tiny_backbone,
}
