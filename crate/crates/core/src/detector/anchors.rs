//! Dense anchor grid over a strided feature map.

use alloc::vec::Vec;

use super::bbox::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    /// Side of the square anchor in pixels before the aspect ratio is applied.
    pub scales: Vec<f64>,
    /// Width-to-height ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: alloc::vec![16.0, 32.0, 64.0],
            ratios: alloc::vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    /// Anchors per cell.
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Grid row and column.
    pub cell: (usize, usize),
    pub scale: usize,
    pub ratio: usize,
}

impl Anchor {
    /// Channel of this anchor in `[N,A,h,w]` objectness maps.
    pub fn channel(&self, n_ratios: usize) -> usize {
        self.scale * n_ratios + self.ratio
    }
}

/// Anchors in row-major cell order, then scale, then ratio. The anchor for
/// cell `(i, j)` is centred on `((j + 0.5) * stride, (i + 0.5) * stride)` with
/// width `s * sqrt(r)` and height `s / sqrt(r)`.
pub fn generate_anchors(grid_h: usize, grid_w: usize, stride: f64, scales: &[f64], ratios: &[f64]) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(grid_h * grid_w * scales.len() * ratios.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for (si, &s) in scales.iter().enumerate() {
                for (ri, &r) in ratios.iter().enumerate() {
                    let root = r.sqrt();
                    out.push(Anchor {
                        bbox: BBox::from_center(cx, cy, s * root, s / root),
                        cell: (i, j),
                        scale: si,
                        ratio: ri,
                    });
                }
            }
        }
    }
    out
}
