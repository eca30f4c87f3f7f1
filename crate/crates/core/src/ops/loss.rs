//! Softmax and the fused loss functions used for detector training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{sigmoid, GradSink, Op, Tape, Var};
use crate::tensor::Scalar;

/// Max-subtracted softmax of one row.
pub fn softmax_slice<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

/// Piecewise smooth-L1 with unit transition point.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    let half = T::from_f64(0.5);
    if a < T::one() {
        half * a * a
    } else {
        a - half
    }
}

impl<T: Scalar> Tape<T> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensor rank >= 1");
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for (row, o) in xd.chunks(d).zip(out.chunks_mut(d)) {
            softmax_slice(row, o);
        }
        self.push("softmax", &shape, out, Op::Softmax(x), &[x])
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xd = self.data(x);
        if xd.len() != target.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", xd.len(), target.len()),
            ));
        }
        let mut total = T::zero();
        for (&v, &t) in xd.iter().zip(target) {
            total += v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln();
        }
        let loss = total / T::from_f64(xd.len() as f64);
        self.push(
            "bce_with_logits",
            &[1],
            vec![loss],
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
        )
    }

    /// Mean cross-entropy of `x[M,K]` row logits against class labels.
    pub fn softmax_cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?}, {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", "label out of range"));
        }
        let xd = self.data(x);
        let mut total = T::zero();
        for (row, &l) in xd.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            total += lse - row[l];
        }
        let loss = total / T::from_f64(labels.len() as f64);
        self.push(
            "softmax_cross_entropy",
            &[1],
            vec![loss],
            Op::SoftmaxCe {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        )
    }

    /// Summed smooth-L1 of `x - target`.
    pub fn smooth_l1_loss(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xd = self.data(x);
        if xd.len() != target.len() {
            return Err(Error::shape(
                "smooth_l1",
                format!("{} predictions, {} targets", xd.len(), target.len()),
            ));
        }
        let loss = xd.iter().zip(target).map(|(&p, &t)| smooth_l1(p - t)).sum();
        self.push(
            "smooth_l1",
            &[1],
            vec![loss],
            Op::SmoothL1 {
                x,
                target: target.to_vec(),
            },
            &[x],
        )
    }
}

pub(crate) fn softmax_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, out: Var, g: &[T]) {
    let d = *s.shape(x).last().expect("rank");
    if let Some((gx, y)) = s.buf_and_data(x, out) {
        for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((a, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                *a += yv * (gv - dot);
            }
        }
    }
}

pub(crate) fn bce_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, target: &[T], g: &[T]) {
    if let Some((gx, xd)) = s.buf_and_data(x, x) {
        let k = g[0] / T::from_f64(target.len() as f64);
        for ((a, &v), &t) in gx.iter_mut().zip(xd).zip(target) {
            *a += k * (sigmoid(v) - t);
        }
    }
}

pub(crate) fn softmax_ce_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, labels: &[usize], g: &[T]) {
    let k = s.shape(x)[1];
    if let Some((gx, xd)) = s.buf_and_data(x, x) {
        let scale = g[0] / T::from_f64(labels.len() as f64);
        let mut p: Vec<T> = vec![T::zero(); k];
        for ((gr, row), &l) in gx.chunks_mut(k).zip(xd.chunks(k)).zip(labels) {
            softmax_slice(row, &mut p);
            p[l] -= T::one();
            gr.iter_mut().zip(&p).for_each(|(a, &v)| *a += scale * v);
        }
    }
}

pub(crate) fn smooth_l1_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, target: &[T], g: &[T]) {
    if let Some((gx, xd)) = s.buf_and_data(x, x) {
        for ((a, &p), &t) in gx.iter_mut().zip(xd).zip(target) {
            let d = p - t;
            let slope = d.max(-T::one()).min(T::one());
            *a += g[0] * slope;
        }
    }
}
