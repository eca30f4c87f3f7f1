//! Max RoI pooling over a strided feature map.

use alloc::format;
use alloc::vec;


use crate::detector::bbox::BBox;
use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Scalar;

/// A region of interest on image `batch` of a feature batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Integer feature-space rectangle `[x0,x1) x [y0,y1)` covered by `b`, before
/// clipping: `floor(x1/stride)` .. `ceil(x2/stride)`.
pub fn roi_feature_rect(b: &BBox, stride: f64) -> (i64, i64, i64, i64) {
    let x0 = (b.x1 / stride).floor() as i64;
    let y0 = (b.y1 / stride).floor() as i64;
    let x1 = ((b.x2 / stride).ceil() as i64).max(x0 + 1);
    let y1 = ((b.y2 / stride).ceil() as i64).max(y0 + 1);
    (x0, y0, x1, y1)
}

/// `out` bin edges `[start, end)` over a span of `len` cells beginning at `origin`.
fn bin_edges(origin: i64, len: i64, out: usize, bin: usize) -> (i64, i64) {
    let (b, o) = (bin as i64, out as i64);
    let start = origin + (b * len) / o;
    let end = origin + ((b + 1) * len + o - 1) / o;
    (start, end)
}

impl<T: Scalar> Tape<T> {
    /// Pools every RoI to `[out, out]` bins per channel, returning `[R,C,out,out]`.
    pub fn roi_pool(&mut self, x: Var, rois: &[Roi], stride: f64, out: usize) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::shape("roi_pool", format!("{s:?}"))),
        };
        if rois.is_empty() || out == 0 {
            return Err(Error::invalid("roi_pool", "need at least one roi and bin"));
        }
        let xd = self.data(x);
        let per_roi = c * out * out;
        let mut values = vec![T::zero(); rois.len() * per_roi];
        let mut argmax = vec![usize::MAX; rois.len() * per_roi];
        for (r, roi) in rois.iter().enumerate() {
            if roi.batch >= n {
                return Err(Error::invalid("roi_pool", format!("batch index {}", roi.batch)));
            }
            let (x0, y0, x1, y1) = roi_feature_rect(&roi.bbox, stride);
            if x1 <= 0 || y1 <= 0 || x0 >= w as i64 || y0 >= h as i64 {
                return Err(Error::invalid(
                    "roi_pool",
                    format!("roi {:?} lies outside the {h}x{w} feature map", roi.bbox),
                ));
            }
            let (rw, rh) = (x1 - x0, y1 - y0);
            for py in 0..out {
                let (ys, ye) = bin_edges(y0, rh, out, py);
                let (ys, ye) = (ys.clamp(0, h as i64) as usize, ye.clamp(0, h as i64) as usize);
                for px in 0..out {
                    let (xs, xe) = bin_edges(x0, rw, out, px);
                    let (xs, xe) = (xs.clamp(0, w as i64) as usize, xe.clamp(0, w as i64) as usize);
                    if ys >= ye || xs >= xe {
                        continue;
                    }
                    for ci in 0..c {
                        let base = (roi.batch * c + ci) * h * w;
                        let mut best = T::neg_infinity();
                        let mut arg = usize::MAX;
                        for yy in ys..ye {
                            for xx in xs..xe {
                                let i = base + yy * w + xx;
                                if arg == usize::MAX || xd[i] > best {
                                    best = xd[i];
                                    arg = i;
                                }
                            }
                        }
                        let o = r * per_roi + (ci * out + py) * out + px;
                        values[o] = best;
                        argmax[o] = arg;
                    }
                }
            }
        }
        self.push(
            "roi_pool",
            &[rois.len(), c, out, out],
            values,
            Op::ArgmaxRoute { x, argmax },
            &[x],
        )
    }
}
