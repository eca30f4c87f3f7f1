//! Dataset directories: 8-bit grayscale PNGs named `{type}_{index:05}.png` and
//! a JSON-lines `manifest.jsonl` whose first line is a header.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smrnet_core::detector::bbox::BBox;
use smrnet_core::detector::Target;
use smrnet_core::synthgel::{render_indexed, train_count, GelRenderParams, SnapType, GENERATOR_VERSION};
use smrnet_core::Tensor;

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParamsRecord {
    pub width: usize,
    pub height: usize,
    pub contact: f64,
    pub edge: f64,
    pub background: f64,
    pub edge_band: usize,
    pub noise_sigma: f64,
    pub min_span: f64,
    pub max_span: f64,
    pub margin: usize,
}

impl From<GelRenderParams> for RenderParamsRecord {
    fn from(p: GelRenderParams) -> Self {
        Self {
            width: p.width,
            height: p.height,
            contact: p.contact,
            edge: p.edge,
            background: p.background,
            edge_band: p.edge_band,
            noise_sigma: p.noise_sigma,
            min_span: p.min_span,
            max_span: p.max_span,
            margin: p.margin,
        }
    }
}

/// Documented membrane constants. Nothing is simulated from them; they are
/// carried along so that the data records what it stands in for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substrate {
    pub model: String,
    pub shear_modulus_mpa: f64,
    pub size_mm: [f64; 3],
    pub resolution_um: f64,
}

impl Default for Substrate {
    fn default() -> Self {
        Self {
            model: "neo-hookean".into(),
            shear_modulus_mpa: 0.145,
            size_mm: [40.0, 40.0, 4.0],
            resolution_um: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub generator_version: u32,
    #[serde(rename = "type")]
    pub kind: String,
    pub count: usize,
    pub seed: u64,
    pub params: RenderParamsRecord,
    pub substrate: Substrate,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub file: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub seed: u64,
}

pub fn image_name(kind: SnapType, index: usize) -> String {
    format!("{}_{index:05}.png", kind.letter())
}

fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(pixels).map_err(io)?;
    w.finish().map_err(io)
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::corrupt(path, msg);
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad("expected an 8-bit grayscale image".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders `count` samples into `out` and writes the manifest; returns its path.
pub fn generate(kind: SnapType, count: usize, seed: u64, out: &Path) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let params = GelRenderParams::default();
    let train = train_count(count);
    let header = Header {
        generator_version: GENERATOR_VERSION,
        kind: kind.letter().to_string(),
        count,
        seed,
        params: params.into(),
        substrate: Substrate::default(),
        split: Split {
            train,
            eval: count - train,
        },
    };
    let mut manifest = serde_json::to_string(&header).expect("header serializes");
    manifest.push('\n');
    for index in 0..count {
        let s = render_indexed(kind, seed, index as u64, &params);
        let file = image_name(kind, index);
        let pixels: Vec<u8> = s.image.data().iter().map(|&v| quantize(v)).collect();
        write_png(&out.join(&file), params.width, params.height, &pixels)?;
        let rec = Record {
            file,
            kind: header.kind.clone(),
            x1: s.gt_box.x1,
            y1: s.gt_box.y1,
            x2: s.gt_box.x2,
            y2: s.gt_box.y2,
            seed: s.seed,
        };
        manifest += &serde_json::to_string(&rec).expect("record serializes");
        manifest.push('\n');
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct Item {
    pub file: PathBuf,
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub target: Target,
    pub train: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub header: Header,
    pub items: Vec<Item>,
    /// Hex SHA-256 over the manifest followed by every image file in order.
    pub digest: String,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let file = File::open(&path).map_err(|e| Error::Usage(format!("missing manifest {}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let bad = |msg: String| Error::corrupt(&path, msg);
        let (first, rest) = lines.split_first().ok_or_else(|| bad("empty manifest".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| bad(format!("header: {e}")))?;
        if rest.len() != header.count {
            return Err(bad(format!("header announces {} records, found {}", header.count, rest.len())));
        }
        let (w, h) = (header.params.width, header.params.height);
        let mut items = Vec::with_capacity(rest.len());
        for (index, line) in rest.iter().enumerate() {
            let rec: Record = serde_json::from_str(line).map_err(|e| bad(format!("record {index}: {e}")))?;
            let kind = SnapType::from_letter(&rec.kind).ok_or_else(|| bad(format!("record {index}: unknown type {:?}", rec.kind)))?;
            let bbox = BBox::new(rec.x1, rec.y1, rec.x2, rec.y2);
            if !bbox.is_valid() {
                return Err(bad(format!("record {index}: degenerate box")));
            }
            let file = dir.join(&rec.file);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            hasher.update(&bytes);
            let (iw, ih, pixels) = read_png(&file)?;
            if (iw, ih) != (w, h) {
                return Err(Error::corrupt(&file, format!("image is {iw}x{ih}, manifest says {w}x{h}")));
            }
            let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
            items.push(Item {
                file,
                image: Tensor::from_vec(&[1, h, w], data)?,
                target: Target {
                    bbox,
                    class_id: kind.class_id(),
                },
                train: index < header.split.train,
            });
        }
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            name,
            header,
            items,
            digest: hex::encode(hasher.finalize()),
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.header.params.height, self.header.params.width)
    }

    pub fn train(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.train)
    }

    pub fn eval(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| !i.train)
    }
}

/// Several dataset directories sharing one image size.
pub fn load_all(dirs: &[PathBuf]) -> Result<Vec<Dataset>> {
    if dirs.is_empty() {
        return Err(Error::Usage("no dataset directory given".into()));
    }
    let sets = dirs.iter().map(|d| Dataset::load(d)).collect::<Result<Vec<_>>>()?;
    if sets.iter().any(|s| s.image_size() != sets[0].image_size()) {
        return Err(Error::Usage("dataset directories differ in image size".into()));
    }
    Ok(sets)
}

/// Stacks `[1, H, W]` images into a `[N, 1, H, W]` batch.
pub fn stack<'a>(items: impl IntoIterator<Item = &'a Item>) -> Result<(Tensor<f32>, Vec<Vec<Target>>)> {
    stack_pairs(items.into_iter().map(|it| (&it.image, it.target)))
}

pub fn stack_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Tensor<f32>, Target)>) -> Result<(Tensor<f32>, Vec<Vec<Target>>)> {
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut shape = None;
    for (image, target) in pairs {
        let s = shape.get_or_insert_with(|| image.shape().to_vec());
        if image.shape() != s.as_slice() {
            return Err(Error::Runtime("images in a batch differ in size".into()));
        }
        data.extend_from_slice(image.data());
        targets.push(vec![target]);
    }
    let s = shape.ok_or_else(|| Error::Runtime("empty batch".into()))?;
    Ok((Tensor::from_vec(&[targets.len(), s[0], s[1], s[2]], data)?, targets))
}

/// Rotates a `[1, H, W]` image and its box by `k` quarter turns
/// counter-clockwise (as displayed, y pointing down).
pub fn rotate_quarter(image: &Tensor<f32>, target: Target, k: usize) -> Result<(Tensor<f32>, Target)> {
    let (mut img, mut t) = (image.clone(), target);
    for _ in 0..k % 4 {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let src = img.data();
        // A pixel at (row r, col c) moves to (w - 1 - c, r).
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                out[(w - 1 - c) * h + r] = src[r * w + c];
            }
        }
        img = Tensor::from_vec(&[1, w, h], out)?;
        let b = t.bbox;
        t.bbox = BBox::new(b.y1, w as f64 - b.x2, b.y2, w as f64 - b.x1);
    }
    Ok((img, t))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
