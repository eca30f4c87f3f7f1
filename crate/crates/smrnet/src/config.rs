//! Run configuration as flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use smrnet_core::backbone::Preset;
use smrnet_core::detector::ModelConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Attention blocks in the backbone.
    pub attention: bool,
    /// Multi-scale fusion branches; off means the single-scale F3 path.
    pub msff: bool,
    /// Softmax reweighting; off means concatenation fusion.
    pub rw: bool,
    /// Dilations of the F2 and F3 branches (F1 is undilated).
    pub dilations: [usize; 2],
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch from which the learning rate is divided by ten; 0 disables.
    pub lr_drop_epoch: usize,
    /// Random quarter-turn rotations of training images and boxes.
    pub augment: bool,
    /// Average the weights reached at the end of this many final epochs (at
    /// most `epochs`); 0 or 1 keeps the last weights.
    pub average_last: usize,
    /// Re-estimate batch-norm statistics over the training split at the end.
    pub bn_recalibrate: bool,
    pub seed: u64,
    /// Dataset directories; `--data` on the command line takes precedence.
    pub data: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            attention: true,
            msff: true,
            rw: true,
            dilations: [2, 4],
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            lr: 0.005,
            momentum: 0.9,
            epochs: 15,
            batch_size: 4,
            lr_drop_epoch: 0,
            augment: true,
            average_last: 5,
            bn_recalibrate: true,
            seed: 1,
            data: Vec::new(),
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("preset", "tiny | full"),
    ("attention", "attention blocks in the backbone (true | false)"),
    ("msff", "multi-scale fusion branches; false uses F3 alone"),
    ("rw", "softmax reweighting of the branches; false concatenates them"),
    ("dilations", "dilation of the F2 and F3 branch convolutions, e.g. 2,4"),
    ("anchor_scales", "anchor sides in pixels, comma separated"),
    ("anchor_ratios", "anchor width/height ratios, comma separated"),
    ("lr", "learning rate"),
    ("momentum", "SGD momentum"),
    ("epochs", "passes over the training split"),
    ("batch_size", "images per step (at least 2)"),
    ("lr_drop_epoch", "epoch from which the learning rate is divided by 10 (0 = never)"),
    ("augment", "rotate training images by random quarter turns"),
    ("average_last", "average the weights of this many final epochs (0 = off)"),
    ("bn_recalibrate", "re-estimate batch-norm statistics after training"),
    ("seed", "initialisation, shuffling and sampling seed"),
    ("data", "dataset directories, comma separated"),
];

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("invalid value {v:?} for {key}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(line, key, p.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got {body:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            seen.push(key.to_string());
            match key {
                "preset" => {
                    c.preset = match v {
                        "tiny" => Preset::Tiny,
                        "full" => Preset::Full,
                        _ => return Err(Error::Config { line, msg: format!("unknown preset {v:?}") }),
                    }
                }
                "attention" => c.attention = parse(line, key, v)?,
                "msff" => c.msff = parse(line, key, v)?,
                "rw" => c.rw = parse(line, key, v)?,
                "dilations" => {
                    let d: Vec<usize> = parse_list(line, key, v)?;
                    c.dilations = d.try_into().map_err(|_| Error::Config {
                        line,
                        msg: "dilations takes exactly two values".into(),
                    })?;
                }
                "anchor_scales" => c.anchor_scales = parse_list(line, key, v)?,
                "anchor_ratios" => c.anchor_ratios = parse_list(line, key, v)?,
                "lr" => c.lr = parse(line, key, v)?,
                "momentum" => c.momentum = parse(line, key, v)?,
                "epochs" => c.epochs = parse(line, key, v)?,
                "batch_size" => c.batch_size = parse(line, key, v)?,
                "lr_drop_epoch" => c.lr_drop_epoch = parse(line, key, v)?,
                "augment" => c.augment = parse(line, key, v)?,
                "average_last" => c.average_last = parse(line, key, v)?,
                "bn_recalibrate" => c.bn_recalibrate = parse(line, key, v)?,
                "seed" => c.seed = parse(line, key, v)?,
                "data" => c.data = v.split(',').map(|p| PathBuf::from(p.trim())).filter(|p| !p.as_os_str().is_empty()).collect(),
                _ => return Err(Error::Config { line, msg: format!("unknown key {key:?}") }),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { line: 0, msg: msg.into() });
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalisation)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive and momentum in [0, 1)");
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("anchor scales and ratios must be non-empty");
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("anchor scales and ratios must be positive");
        }
        Ok(())
    }

    /// Canonical text listing every key; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let preset = match self.preset {
            Preset::Tiny => "tiny",
            Preset::Full => "full",
        };
        let values = [
            preset.to_string(),
            self.attention.to_string(),
            self.msff.to_string(),
            self.rw.to_string(),
            join(&self.dilations),
            join(&self.anchor_scales),
            join(&self.anchor_ratios),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr_drop_epoch.to_string(),
            self.augment.to_string(),
            self.average_last.to_string(),
            self.bn_recalibrate.to_string(),
            self.seed.to_string(),
            self.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
        ];
        for ((key, _), v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    /// Commented listing of the keys and their defaults.
    pub fn documented_defaults() -> String {
        let d = RunConfig::default().to_text();
        let mut s = String::new();
        for ((_, doc), line) in KEYS.iter().zip(d.lines()) {
            let _ = writeln!(s, "# {doc}\n{line}");
        }
        s
    }

    pub fn model_config(&self, image_size: (usize, usize)) -> ModelConfig {
        let mut m = ModelConfig::preset(self.preset);
        m.backbone.attention = self.attention;
        m.fusion.msff = self.msff;
        m.fusion.reweight = self.rw;
        m.fusion.dilations = [1, self.dilations[0], self.dilations[1]];
        m.anchors.scales = self.anchor_scales.clone();
        m.anchors.ratios = self.anchor_ratios.clone();
        m.image_size = image_size;
        m
    }
}
