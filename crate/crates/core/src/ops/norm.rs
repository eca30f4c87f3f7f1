use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Scalar;

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the estimate fed to the running average.
    pub var: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expected [N,C,H,W], got {sx:?}")));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine parameters must be [{c}]"),
            ));
        }
        Ok((sx[0], c, sx[2] * sx[3]))
    }

    /// Normalises with the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.check_bn(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::invalid(
                "batch_norm",
                "training mode needs a batch of at least 2",
            ));
        }
        let m = n * hw;
        let mf = T::from_f64(m as f64);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += xd[(ni * c + ci) * hw..][..hw].iter().copied().sum();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                var[ci] += xd[(ni * c + ci) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum();
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / mf + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = gd[ci] * xhat[i] + bd[ci];
                }
            }
        }
        let unbiased = T::from_f64((m as f64 - 1.0).max(1.0));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v / unbiased).collect(),
        };
        let shape = self.shape(x).to_vec();
        let y = self.push(
            "batch_norm",
            &shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((y, stats))
    }

    /// Normalises with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, hw) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - running_mean[ci]) * inv_std[ci];
                    out[i] = gd[ci] * xhat[i] + bd[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm_eval",
            &shape,
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }
}

fn affine_param_grads<T: Scalar>(
    s: &mut GradSink<'_, T>,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    g: &[T],
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (plane, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
        let ci = plane % c;
        for (&gv, &xv) in gp.iter().zip(xp) {
            sum_g[ci] += gv;
            sum_gx[ci] += gv * xv;
        }
    }
    if let Some(gg) = s.buf(gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, &v)| *a += v);
    }
    if let Some(gb) = s.buf(beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, &v)| *a += v);
    }
    (sum_g, sum_gx)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) {
    let shape = s.shape(x).to_vec();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let (sum_g, sum_gx) = affine_param_grads(s, gamma, beta, xhat, g, c, hw);
    let mf = T::from_f64((n * hw) as f64);
    if let Some((gx, gd)) = s.buf_and_data(x, gamma) {
        for (plane, ((gxp, gp), xp)) in gx
            .chunks_mut(hw)
            .zip(g.chunks(hw))
            .zip(xhat.chunks(hw))
            .enumerate()
        {
            let ci = plane % c;
            let k = gd[ci] * inv_std[ci] / mf;
            for ((a, &gv), &xv) in gxp.iter_mut().zip(gp).zip(xp) {
                *a += k * (mf * gv - sum_g[ci] - xv * sum_gx[ci]);
            }
        }
    }
}

pub(crate) fn affine_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) {
    let shape = s.shape(x).to_vec();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    affine_param_grads(s, gamma, beta, xhat, g, c, hw);
    if let Some((gx, gd)) = s.buf_and_data(x, gamma) {
        for (plane, (gxp, gp)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
            let ci = plane % c;
            let k = gd[ci] * inv_std[ci];
            gxp.iter_mut().zip(gp).for_each(|(a, &gv)| *a += k * gv);
        }
    }
}
