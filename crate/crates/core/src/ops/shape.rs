use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Scalar;

impl<T: Scalar> Tape<T> {
    /// Concatenates along axis 1. All inputs share rank and every other extent.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", "inputs need rank >= 2"));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let n = s0[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[ni * c * inner..][..c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        self.push("concat", &shape, out, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Nearest-neighbour upsampling by an integer factor on both spatial axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("upsample_nearest", format!("{s:?}"))),
        };
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..][..w];
                for (ox, o) in dst[oy * wo..][..wo].iter_mut().enumerate() {
                    *o = row[ox / factor];
                }
            }
        }
        self.push(
            "upsample_nearest",
            &[n, c, ho, wo],
            out,
            Op::Upsample { x, factor },
            &[x],
        )
    }
}

pub(crate) fn concat_backward<T: Scalar>(s: &mut GradSink<'_, T>, inputs: &[Var], g: &[T]) {
    let s0 = s.shape(inputs[0]).to_vec();
    let inner: usize = s0[2..].iter().product();
    let n = s0[0];
    let total: usize = inputs.iter().map(|&v| s.shape(v)[1]).sum();
    let mut offset = 0;
    for &v in inputs {
        let c = s.shape(v)[1];
        if let Some(gv) = s.buf(v) {
            for ni in 0..n {
                let src = &g[(ni * total + offset) * inner..][..c * inner];
                gv[ni * c * inner..][..c * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
        }
        offset += c;
    }
}

pub(crate) fn upsample_backward<T: Scalar>(s: &mut GradSink<'_, T>, x: Var, factor: usize, g: &[T]) {
    let shape = s.shape(x).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let Some(gx) = s.buf(x) else { return };
    for (plane, gp) in g.chunks(ho * wo).enumerate() {
        let dst = &mut gx[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
            }
        }
    }
}
