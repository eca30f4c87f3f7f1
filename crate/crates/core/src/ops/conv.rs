//! 2-D cross-correlation with zero padding, stride and dilation.
//!
//! The taped path lowers the whole batch to one `[Cin*Kh*Kw, N*Ho*Wo]`
//! column matrix and runs a single GEMM; [`conv2d_direct`] is the plain
//! nested-loop definition the lowered path must agree with.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub ho: usize,
    pub wo: usize,
}

/// `floor((len + 2*padding - dilation*(k-1) - 1) / stride) + 1`, or `None`
/// when the window does not fit.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {x_shape:?} and weight {w_shape:?} must be 4-D"),
            ));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", x_shape[1], w_shape[1]),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        let ho = conv_out_len(h, kh, stride, padding, dilation);
        let wo = conv_out_len(w, kw, stride, padding, dilation);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(
                "conv2d",
                format!("degenerate output for {h}x{w} input, {kh}x{kw} kernel, padding {padding}, dilation {dilation}"),
            ));
        };
        Ok(Self {
            n: x_shape[0],
            cin: x_shape[1],
            h,
            w,
            cout: w_shape[0],
            kh,
            kw,
            stride,
            padding,
            dilation,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input coordinate for output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize) -> isize {
        (o * self.stride + k * self.dilation) as isize - self.padding as isize
    }
}

/// Lowers `x[N,Cin,H,W]` to `cols[Cin*Kh*Kw, N*Ho*Wo]`.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let (np, p) = (g.n * g.p(), g.p());
    let mut cols = vec![T::zero(); g.k() * np];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = g.src(oy, ki);
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let out_row = &mut dst[n * p + oy * g.wo..][..g.wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = g.src(ox, kj);
                            if ix >= 0 && ix < g.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto `dx[N,Cin,H,W]`.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (np, p) = (g.n * g.p(), g.p());
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = g.src(oy, ki);
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let in_row = &src[n * p + oy * g.wo..][..g.wo];
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = g.src(ox, kj);
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[N,C,P]` <-> `[C,N*P]` layout shuffles around the batched GEMM.
fn nchw_to_cnp<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

fn cnp_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&x[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// `x[N,Cin,H,W]`, `w[Cout,Cin,Kh,Kw]`, optional `b[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding, dilation)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?}, expected [{}]", self.shape(b), geom.cout),
                ));
            }
        }
        let (np, p) = (geom.n * geom.p(), geom.p());
        let mut tmp = vec![T::zero(); geom.cout * np];
        if geom.is_pointwise() {
            let cols = nchw_to_cnp(self.data(x), geom.n, geom.cin, p);
            gemm(geom.cout, geom.k(), np, self.data(w), false, &cols, false, &mut tmp, false);
        } else {
            let cols = im2col(&geom, self.data(x));
            gemm(geom.cout, geom.k(), np, self.data(w), false, &cols, false, &mut tmp, false);
        }
        let mut out = cnp_to_nchw(&tmp, geom.n, geom.cout, p);
        if let Some(b) = b {
            let bd = self.data(b);
            for (i, plane) in out.chunks_mut(p).enumerate() {
                let v = bd[i % geom.cout];
                plane.iter_mut().for_each(|o| *o += v);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(
            "conv2d",
            &[geom.n, geom.cout, geom.ho, geom.wo],
            out,
            Op::Conv2d { x, w, b, geom },
            &inputs,
        )
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    s: &mut GradSink<'_, T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeometry,
    g: &[T],
) {
    let (np, p, k) = (geom.n * geom.p(), geom.p(), geom.k());
    let gy = nchw_to_cnp(g, geom.n, geom.cout, p);
    if let Some(gb) = b.and_then(|b| s.buf(b)) {
        for (co, row) in gy.chunks(np).enumerate() {
            gb[co] += row.iter().copied().sum();
        }
    }
    if s.wants(w) {
        let cols = if geom.is_pointwise() {
            nchw_to_cnp(s.data(x), geom.n, geom.cin, p)
        } else {
            im2col(geom, s.data(x))
        };
        let gw = s.buf(w).expect("weight gradient");
        // dW[Cout,K] += gY[Cout,NP] * cols^T
        gemm(geom.cout, np, k, &gy, false, &cols, true, gw, true);
    }
    if s.wants(x) {
        // dcols[K,NP] = W^T * gY
        let mut dcols = vec![T::zero(); k * np];
        gemm(k, geom.cout, np, s.data(w), true, &gy, false, &mut dcols, false);
        let gx = s.buf(x).expect("input gradient");
        if geom.is_pointwise() {
            let d = cnp_to_nchw(&dcols, geom.n, geom.cin, p);
            gx.iter_mut().zip(&d).for_each(|(a, &v)| *a += v);
        } else {
            col2im(geom, &dcols, gx);
        }
    }
}

/// Nested-loop cross-correlation, untaped.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding, dilation)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    for n in 0..g.n {
        for co in 0..g.cout {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias;
                    for ci in 0..g.cin {
                        for ki in 0..g.kh {
                            let iy = g.src(oy, ki);
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = g.src(ox, kj);
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = xd[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wd[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
}
