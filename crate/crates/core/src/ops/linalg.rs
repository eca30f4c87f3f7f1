use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{gemm, Scalar};

impl<T: Scalar> Tape<T> {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.push("matmul", &[m, n], out, Op::Matmul(a, b), &[a, b])
    }

    /// Fully connected layer: `x[N,In] * w[Out,In]^T + b[Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("x {sx:?}, weight {sw:?}")));
        }
        let (n, inp, outp) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [outp] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{outp}]", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * outp];
        gemm(n, inp, outp, self.data(x), false, self.data(w), true, &mut out, false);
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(outp) {
                row.iter_mut().zip(bd).for_each(|(o, &v)| *o += v);
            }
        }
        let inputs = [Some(x), Some(w), b];
        let inputs: alloc::vec::Vec<Var> = inputs.iter().flatten().copied().collect();
        self.push("linear", &[n, outp], out, Op::Linear { x, w, b }, &inputs)
    }
}

pub(crate) fn matmul_backward<T: Scalar>(s: &mut GradSink<'_, T>, a: Var, b: Var, g: &[T]) {
    let (m, k) = (s.shape(a)[0], s.shape(a)[1]);
    let n = s.shape(b)[1];
    // dA = dC * B^T
    if let Some((ga, db)) = s.buf_and_data(a, b) {
        gemm(m, n, k, g, false, db, true, ga, true);
    }
    // dB = A^T * dC
    if let Some((gb, da)) = s.buf_and_data(b, a) {
        gemm(k, m, n, da, true, g, false, gb, true);
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
) {
    let (n, inp) = (s.shape(x)[0], s.shape(x)[1]);
    let outp = s.shape(w)[0];
    // dx = g[N,Out] * w[Out,In]
    if let Some((gx, dw)) = s.buf_and_data(x, w) {
        gemm(n, outp, inp, g, false, dw, false, gx, true);
    }
    // dw = g^T[Out,N] * x[N,In]
    if let Some((gw, dx)) = s.buf_and_data(w, x) {
        gemm(outp, n, inp, g, true, dx, false, gw, true);
    }
    if let Some(gb) = b.and_then(|b| s.buf(b)) {
        for row in g.chunks(outp) {
            gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
    }
}
