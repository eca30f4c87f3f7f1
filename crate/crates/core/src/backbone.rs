//! Residual backbone in the 34-layer stage layout with attention after each
//! stage, emitting feature maps at strides 8, 16 and 32.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::CbamBlock;
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2dLayer, ConvOptions, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Widths of conv1, conv2_x .. conv5_x.
    pub channels: [usize; 5],
    /// Residual blocks in conv2_x .. conv5_x.
    pub blocks: [usize; 4],
    pub attention: bool,
    /// Put a CBAM after every residual block instead of once per stage.
    pub attention_per_block: bool,
    pub reduction: usize,
    pub in_channels: usize,
}

impl BackboneConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self {
                channels: [16, 16, 32, 64, 128],
                blocks: [1, 1, 1, 1],
                attention: true,
                attention_per_block: false,
                reduction: CbamBlock::DEFAULT_REDUCTION,
                in_channels: 1,
            },
            Preset::Full => Self {
                channels: [64, 64, 128, 256, 512],
                blocks: [3, 4, 6, 3],
                attention: true,
                attention_per_block: false,
                reduction: CbamBlock::DEFAULT_REDUCTION,
                in_channels: 1,
            },
        }
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn full() -> Self {
        Self::preset(Preset::Full)
    }

    /// Widths of F1, F2, F3.
    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.channels[2], self.channels[3], self.channels[4]]
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Closed-form trainable-scalar count, independent of layer construction.
    pub fn analytic_param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k;
        let bn = |c: usize| 2 * c;
        let cbam = |c: usize| CbamBlock::analytic_param_count(c, self.reduction);
        let c = self.channels;
        let mut total = conv(self.in_channels, c[0], 7) + bn(c[0]);
        if self.attention {
            total += cbam(c[0]);
        }
        for s in 0..4 {
            let (cin, cout) = (c[s], c[s + 1]);
            for b in 0..self.blocks[s] {
                let bin = if b == 0 { cin } else { cout };
                total += conv(bin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
                let stride = if b == 0 { Self::stage_stride(s) } else { 1 };
                if stride != 1 || bin != cout {
                    total += conv(bin, cout, 1) + bn(cout);
                }
                if self.attention && self.attention_per_block {
                    total += cbam(cout);
                }
            }
            if self.attention && !self.attention_per_block {
                total += cbam(cout);
            }
        }
        total
    }
}

/// `relu(bn(conv(relu(bn(conv x)))) + shortcut x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv2dLayer,
    pub bn2: BatchNormLayer,
    pub projection: Option<(Conv2dLayer, BatchNormLayer)>,
    pub attention: Option<CbamBlock>,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        attention: Option<usize>,
    ) -> Result<Self> {
        let conv3 = ConvOptions::same(3, 1).bias(false);
        let conv1 = Conv2dLayer::new(store, &format!("{name}.conv1"), cin, cout, 3, conv3.stride(stride));
        let bn1 = BatchNormLayer::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv2dLayer::new(store, &format!("{name}.conv2"), cout, cout, 3, conv3);
        let bn2 = BatchNormLayer::new(store, &format!("{name}.bn2"), cout);
        let projection = (stride != 1 || cin != cout).then(|| {
            let opts = ConvOptions::default().stride(stride).bias(false);
            (
                Conv2dLayer::new(store, &format!("{name}.proj"), cin, cout, 1, opts),
                BatchNormLayer::new(store, &format!("{name}.proj_bn"), cout),
            )
        });
        let attention = match attention {
            Some(r) => Some(CbamBlock::new(store, &format!("{name}.cbam"), cout, r)?),
            None => None,
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
            attention,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.relu(y)?;
        let y = self.conv2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let y = g.add(y, shortcut)?;
        let y = g.relu(y)?;
        match &self.attention {
            Some(a) => a.forward(g, y),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
            + self.projection.as_ref().map_or(0, |(c, b)| c.param_count() + b.param_count())
            + self.attention.as_ref().map_or(0, CbamBlock::param_count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub blocks: Vec<ResidualBlock>,
    pub attention: Option<CbamBlock>,
}

impl Stage {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        match &self.attention {
            Some(a) => a.forward(g, x),
            None => Ok(x),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::param_count).sum::<usize>()
            + self.attention.as_ref().map_or(0, CbamBlock::param_count)
    }
}

/// Feature maps at strides 8, 16 and 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem_conv: Conv2dLayer,
    pub stem_bn: BatchNormLayer,
    pub stem_attention: Option<CbamBlock>,
    /// conv2_x .. conv5_x.
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: &BackboneConfig) -> Result<Self> {
        let c = config.channels;
        let stem_opts = ConvOptions::default().stride(2).padding(3).bias(false);
        let stem_conv = Conv2dLayer::new(store, &format!("{name}.conv1"), config.in_channels, c[0], 7, stem_opts);
        let stem_bn = BatchNormLayer::new(store, &format!("{name}.bn1"), c[0]);
        let stem_attention = match config.attention {
            true => Some(CbamBlock::new(store, &format!("{name}.conv1_cbam"), c[0], config.reduction)?),
            false => None,
        };
        let per_block = (config.attention && config.attention_per_block).then_some(config.reduction);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (cin, cout) = (c[s], c[s + 1]);
            let stage_name = format!("{name}.conv{}_x", s + 2);
            let mut blocks = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let (bin, stride) = match b {
                    0 => (cin, BackboneConfig::stage_stride(s)),
                    _ => (cout, 1),
                };
                blocks.push(ResidualBlock::new(
                    store,
                    &format!("{stage_name}.{b}"),
                    bin,
                    cout,
                    stride,
                    per_block,
                )?);
            }
            let attention = match config.attention && !config.attention_per_block {
                true => Some(CbamBlock::new(store, &format!("{stage_name}.cbam"), cout, config.reduction)?),
                false => None,
            };
            stages.push(Stage { blocks, attention });
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stem_attention,
            stages,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(image).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.config.in_channels && h % 32 == 0 && w % 32 == 0 && h >= 64 && w >= 64 => {}
            _ => {
                return Err(Error::shape(
                    "backbone_forward",
                    format!(
                        "image {shape:?}: need [N,{},H,W] with H, W >= 64 and divisible by 32",
                        self.config.in_channels
                    ),
                ))
            }
        }
        let x = self.stem_conv.forward(g, image)?;
        let x = self.stem_bn.forward(g, x)?;
        let x = g.relu(x)?;
        let mut x = g.max_pool2d(x, 3, 2, 1)?;
        if let Some(a) = &self.stem_attention {
            x = a.forward(g, x)?;
        }
        let mut taps = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(g, x)?;
            taps[i] = x;
        }
        Ok(FeaturePyramid {
            f1: taps[1],
            f2: taps[2],
            f3: taps[3],
        })
    }

    pub fn param_count(&self) -> usize {
        self.stem_conv.param_count()
            + self.stem_bn.param_count()
            + self.stem_attention.as_ref().map_or(0, CbamBlock::param_count)
            + self.stages.iter().map(Stage::param_count).sum::<usize>()
    }
}

/// Exact trainable-scalar count of the backbone built from `cfg`.
pub fn param_count(cfg: &BackboneConfig) -> usize {
    cfg.analytic_param_count()
}
