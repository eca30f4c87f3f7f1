//! Deterministic synthetic gel-sensor images of two snap types.
//!
//! A silhouette is rasterised at a random pose; pixels inside it take the
//! contact brightness, a dilated band just outside takes the darker edge
//! brightness and the rest stays at background level, followed by Gaussian
//! noise and clamping to `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detector::bbox::BBox;
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SnapType {
    /// Rectangular body with a notch and a cantilever hook.
    A,
    /// Annular ring around a central boss.
    B,
}

impl SnapType {
    pub const ALL: [SnapType; 2] = [SnapType::A, SnapType::B];

    pub fn class_id(self) -> usize {
        match self {
            SnapType::A => 1,
            SnapType::B => 2,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        match id {
            1 => Some(SnapType::A),
            2 => Some(SnapType::B),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            SnapType::A => 'A',
            SnapType::B => 'B',
        }
    }

    pub fn from_letter(c: &str) -> Option<Self> {
        match c {
            "A" | "a" => Some(SnapType::A),
            "B" | "b" => Some(SnapType::B),
            _ => None,
        }
    }

    /// Point membership in shape-local units.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            SnapType::A => {
                let body = (-1.0..=0.55).contains(&u) && v.abs() <= 0.45;
                let notch = u.abs() <= 0.15 && v <= -0.2;
                let arm = (0.55..=1.0).contains(&u) && (0.1..=0.3).contains(&v);
                let hook = (0.8..=1.0).contains(&u) && (-0.15..=0.3).contains(&v);
                (body && !notch) || arm || hook
            }
            SnapType::B => {
                let r2 = u * u + v * v;
                r2 <= 0.3 * 0.3 || (0.6 * 0.6..=1.0).contains(&r2)
            }
        }
    }

    /// Radius of a circle around the local origin containing the shape.
    fn bounding_radius(self) -> f64 {
        match self {
            SnapType::A => 1.1,
            SnapType::B => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GelRenderParams {
    pub width: usize,
    pub height: usize,
    pub contact: f64,
    pub edge: f64,
    pub background: f64,
    pub edge_band: usize,
    pub noise_sigma: f64,
    /// Silhouette extent as a fraction of the image width.
    pub min_span: f64,
    pub max_span: f64,
    /// Free pixels between the silhouette and the image border.
    pub margin: usize,
}

impl Default for GelRenderParams {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            contact: 0.80,
            edge: 0.20,
            background: 0.50,
            edge_band: 2,
            noise_sigma: 0.02,
            min_span: 0.2,
            max_span: 0.6,
            margin: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapShape {
    pub kind: SnapType,
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub scale: f64,
}

impl SnapShape {
    /// Silhouette mask, row-major `height x width`, sampled at pixel centres.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        let (s, c) = self.theta.sin_cos();
        let inv = 1.0 / self.scale;
        let mut mask = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - self.cx;
                let dy = y as f64 + 0.5 - self.cy;
                let u = (c * dx + s * dy) * inv;
                let v = (-s * dx + c * dy) * inv;
                mask[y * width + x] = self.kind.contains(u, v);
            }
        }
        mask
    }
}

/// Pixel-edge bounds `[x1, x2) x [y1, y2)` of the set pixels.
pub fn mask_bounds(mask: &[bool], width: usize) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b.map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

/// Background pixels within Euclidean distance `radius` of the silhouette.
pub fn edge_band(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let mut band = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if mask[y as usize * width + x as usize] {
                continue;
            }
            'search: for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if dx * dx + dy * dy > r * r || nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    if mask[ny as usize * width + nx as usize] {
                        band[y as usize * width + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    band
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gt_box: BBox,
    pub kind: SnapType,
    pub seed: u64,
    pub shape: SnapShape,
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

fn placement_ok(mask: &[bool], p: &GelRenderParams) -> Option<BBox> {
    let b = mask_bounds(mask, p.width)?;
    let m = p.margin as f64;
    let inside = b.x1 >= m && b.y1 >= m && b.x2 <= p.width as f64 - m && b.y2 <= p.height as f64 - m;
    let span = b.width().max(b.height()) / p.width as f64;
    (inside && span >= p.min_span && span <= p.max_span).then_some(b)
}

fn sample_pose<R: Rng + ?Sized>(kind: SnapType, rng: &mut R, p: &GelRenderParams) -> SnapShape {
    let (w, h) = (p.width as f64, p.height as f64);
    let span = rng.random_range(p.min_span..=p.max_span) * w;
    let scale = 0.5 * span;
    let reach = kind.bounding_radius() * scale + p.margin as f64;
    let pick = |rng: &mut R, extent: f64| {
        if reach < extent - reach {
            rng.random_range(reach..extent - reach)
        } else {
            0.5 * extent
        }
    };
    let cx = pick(rng, w);
    let cy = pick(rng, h);
    let theta = rng.random_range(0.0..core::f64::consts::TAU);
    SnapShape {
        kind,
        cx,
        cy,
        theta,
        scale,
    }
}

/// Renders one sample. Poses are resampled (at most 100 times) until the
/// silhouette fits with the required margin and span; a centred, unrotated
/// pose at the middle of the span range is the last resort.
pub fn render_sample<R: Rng + ?Sized>(kind: SnapType, rng: &mut R, p: &GelRenderParams, seed: u64) -> Sample {
    let mut chosen = None;
    for _ in 0..100 {
        let shape = sample_pose(kind, rng, p);
        let mask = shape.rasterize(p.width, p.height);
        if let Some(b) = placement_ok(&mask, p) {
            chosen = Some((shape, mask, b));
            break;
        }
    }
    let (shape, mask, gt_box) = chosen.unwrap_or_else(|| {
        let shape = SnapShape {
            kind,
            cx: 0.5 * p.width as f64,
            cy: 0.5 * p.height as f64,
            theta: 0.0,
            scale: 0.25 * (p.min_span + p.max_span) * p.width as f64,
        };
        let mask = shape.rasterize(p.width, p.height);
        let b = mask_bounds(&mask, p.width).expect("centred silhouette is non-empty");
        (shape, mask, b)
    });
    let band = edge_band(&mask, p.width, p.height, p.edge_band);
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("finite sigma"));
    let data = mask
        .iter()
        .zip(&band)
        .map(|(&inside, &edge)| {
            let base = if inside {
                p.contact
            } else if edge {
                p.edge
            } else {
                p.background
            };
            let v = base + noise.as_ref().map_or(0.0, |n| n.sample(rng));
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample {
        image: Tensor::from_vec(&[1, p.height, p.width], data).expect("image shape"),
        gt_box,
        kind,
        seed,
        shape,
    }
}

/// Sample `index` of the dataset generated from `seed`.
pub fn render_indexed(kind: SnapType, seed: u64, index: u64, p: &GelRenderParams) -> Sample {
    let s = sample_seed(seed, index);
    render_sample(kind, &mut ChaCha8Rng::seed_from_u64(s), p, s)
}

/// Number of training samples of an `n`-sample dataset; the first 80 % of
/// indices train, the rest evaluate.
pub fn train_count(n: usize) -> usize {
    n * 4 / 5
}
