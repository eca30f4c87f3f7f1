//! Axis-aligned boxes, overlap and the anchor-relative box parameterisation.

use alloc::format;


use crate::error::{Error, Result};

/// Box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.area().is_finite()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; zero when either box is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips to `[0,width] x [0,height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Checked IoU that rejects zero-area operands.
pub fn iou(p: &BBox, q: &BBox) -> Result<f64> {
    for b in [p, q] {
        if !b.is_valid() {
            return Err(Error::invalid("iou", format!("degenerate box {b:?}")));
        }
    }
    Ok(p.iou(q))
}

/// Largest log-scale delta accepted by [`BoxCoder::decode`], so widths never
/// exceed 1000/16 of the reference.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Anchor-relative parameterisation
/// `(tx, ty, tw, th) = (wx*(x-xa)/wa, wy*(y-ya)/ha, ww*ln(w/wa), wh*ln(h/ha))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self { weights: [1.0; 4] }
    }
}

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
        if !anchor.is_valid() {
            return Err(Error::invalid("encode_box", format!("degenerate anchor {anchor:?}")));
        }
        if !gt.is_valid() {
            return Err(Error::invalid("encode_box", format!("degenerate box {gt:?}")));
        }
        let (ax, ay) = anchor.center();
        let (gx, gy) = gt.center();
        let [wx, wy, ww, wh] = self.weights;
        Ok([
            wx * (gx - ax) / anchor.width(),
            wy * (gy - ay) / anchor.height(),
            ww * (gt.width() / anchor.width()).ln(),
            wh * (gt.height() / anchor.height()).ln(),
        ])
    }

    pub fn decode(&self, delta: [f64; 4], anchor: &BBox) -> Result<BBox> {
        if !anchor.is_valid() {
            return Err(Error::invalid("decode_box", format!("degenerate anchor {anchor:?}")));
        }
        let (ax, ay) = anchor.center();
        let [wx, wy, ww, wh] = self.weights;
        let cx = delta[0] / wx * anchor.width() + ax;
        let cy = delta[1] / wy * anchor.height() + ay;
        let w = anchor.width() * (delta[2] / ww).min(MAX_LOG_SCALE).exp();
        let h = anchor.height() * (delta[3] / wh).min(MAX_LOG_SCALE).exp();
        Ok(BBox::from_center(cx, cy, w, h))
    }
}
