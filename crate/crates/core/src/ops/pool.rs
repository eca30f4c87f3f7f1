use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

fn pooled_len(op: &'static str, len: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be >= 1"));
    }
    if window > len + 2 * padding {
        return Err(Error::shape(
            op,
            format!("window {window} exceeds extent {len} (padding {padding})"),
        ));
    }
    Ok((len + 2 * padding - window) / stride + 1)
}

impl<T: Scalar> Tape<T> {
    pub fn pool2d(&mut self, kind: PoolKind, x: Var, window: usize, stride: usize) -> Result<Var> {
        match kind {
            PoolKind::Max => self.max_pool2d(x, window, stride, 0),
            PoolKind::Avg => self.avg_pool2d(x, window, stride),
        }
    }

    /// Max pooling; padded cells never win. Ties go to the first index in
    /// row-major scan order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("max_pool2d", self.shape(x))?;
        let ho = pooled_len("max_pool2d", h, window, stride, padding)?;
        let wo = pooled_len("max_pool2d", w, window, stride, padding)?;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = usize::MAX;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if arg == usize::MAX || xd[i] > best {
                                best = xd[i];
                                arg = i;
                            }
                        }
                    }
                    if arg == usize::MAX {
                        return Err(Error::shape("max_pool2d", "window covers only padding"));
                    }
                    out.push(best);
                    argmax.push(arg);
                }
            }
        }
        self.push("max_pool2d", &[n, c, ho, wo], out, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("avg_pool2d", self.shape(x))?;
        let ho = pooled_len("avg_pool2d", h, window, stride, 0)?;
        let wo = pooled_len("avg_pool2d", w, window, stride, 0)?;
        let xd = self.data(x);
        let norm = T::from_f64((window * window) as f64);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..window {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        acc += xd[row..row + window].iter().copied().sum();
                    }
                    out.push(acc / norm);
                }
            }
        }
        self.push("avg_pool2d", &[n, c, ho, wo], out, Op::AvgPool { x, window, stride }, &[x])
    }

    /// Spatial reduction `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("global_pool", self.shape(x))?;
        let hw = h * w;
        let xd = self.data(x);
        match kind {
            PoolKind::Avg => {
                let norm = T::from_f64(hw as f64);
                let out = xd.chunks(hw).map(|p| p.iter().copied().sum::<T>() / norm).collect();
                self.push("global_avg_pool", &[n, c, 1, 1], out, Op::GlobalAvg(x), &[x])
            }
            PoolKind::Max => {
                let (out, argmax) = xd
                    .chunks(hw)
                    .enumerate()
                    .map(|(pi, p)| {
                        let (i, v) = first_max(p.iter().copied());
                        (v, pi * hw + i)
                    })
                    .unzip();
                self.push("global_max_pool", &[n, c, 1, 1], out, Op::ArgmaxRoute { x, argmax }, &[x])
            }
        }
    }

    /// Channel reduction `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("channel_pool", self.shape(x))?;
        let hw = h * w;
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * hw];
        match kind {
            PoolKind::Avg => {
                let norm = T::from_f64(c as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let src = &xd[(ni * c + ci) * hw..][..hw];
                        out[ni * hw..][..hw].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                    }
                }
                out.iter_mut().for_each(|o| *o = *o / norm);
                self.push("channel_mean", &[n, 1, h, w], out, Op::ChannelMean(x), &[x])
            }
            PoolKind::Max => {
                let mut argmax = vec![0usize; n * hw];
                for ni in 0..n {
                    for p in 0..hw {
                        let (ci, v) = first_max((0..c).map(|ci| xd[(ni * c + ci) * hw + p]));
                        out[ni * hw + p] = v;
                        argmax[ni * hw + p] = (ni * c + ci) * hw + p;
                    }
                }
                self.push("channel_max", &[n, 1, h, w], out, Op::ArgmaxRoute { x, argmax }, &[x])
            }
        }
    }
}

/// Index and value of the first maximum.
fn first_max<T: Scalar>(it: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in it.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    x: Var,
    window: usize,
    stride: usize,
    g: &[T],
) {
    let shape = s.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let norm = T::from_f64((window * window) as f64);
    let Some(gx) = s.buf(x) else { return };
    for (plane, gp) in g.chunks(ho * wo).enumerate() {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let v = gp[oy * wo + ox] / norm;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    gx[row..row + window].iter_mut().for_each(|a| *a += v);
                }
            }
        }
    }
}

pub(crate) fn global_avg_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, g: &[T]) {
    let shape = s.shape(x);
    let hw = shape[2] * shape[3];
    let norm = T::from_f64(hw as f64);
    let Some(gx) = s.buf(x) else { return };
    for (plane, &gv) in gx.chunks_mut(hw).zip(g) {
        let v = gv / norm;
        plane.iter_mut().for_each(|a| *a += v);
    }
}

pub(crate) fn channel_mean_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, g: &[T]) {
    let shape = s.shape(x).to_vec();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let norm = T::from_f64(c as f64);
    let Some(gx) = s.buf(x) else { return };
    for ni in 0..n {
        let src = &g[ni * hw..][..hw];
        for ci in 0..c {
            gx[(ni * c + ci) * hw..][..hw]
                .iter_mut()
                .zip(src)
                .for_each(|(a, &v)| *a += v / norm);
        }
    }
}
