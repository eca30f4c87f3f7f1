//! Multi-scale fusion: per-scale (dilated) 3x3 branches with attention,
//! brought to a common width and the stride-8 grid, then combined by a
//! softmax reweighting head or, for ablations, by concatenation.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::CbamBlock;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ConvOptions, Graph, LinearLayer, ParamStore};
use crate::ops::pool::PoolKind;
use crate::tape::Var;
use crate::tensor::Scalar;

/// Stride of each pyramid level.
pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    /// Common fused width.
    pub width: usize,
    /// Dilation of the F1, F2, F3 branch convolutions.
    pub dilations: [usize; 3],
    /// Multi-scale branches; when off only F3 is projected to `width`.
    pub msff: bool,
    /// Softmax reweighting; when off the branches are concatenated.
    pub reweight: bool,
    pub attention: bool,
    pub reduction: usize,
}

impl FusionConfig {
    pub fn tiny() -> Self {
        Self {
            width: 64,
            dilations: [1, 2, 4],
            msff: true,
            reweight: true,
            attention: true,
            reduction: CbamBlock::DEFAULT_REDUCTION,
        }
    }

    pub fn full() -> Self {
        Self {
            width: 256,
            ..Self::tiny()
        }
    }

    /// Stride of the fused map handed to the proposal network.
    pub fn output_stride(&self) -> usize {
        if self.msff {
            PYRAMID_STRIDES[0]
        } else {
            PYRAMID_STRIDES[2]
        }
    }
}

/// `upsample(project(cbam(conv3x3_d(F))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MsffBranch {
    pub conv: Conv2dLayer,
    pub attention: Option<CbamBlock>,
    pub projection: Conv2dLayer,
    pub upsample: usize,
}

impl MsffBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        width: usize,
        dilation: usize,
        upsample: usize,
        attention: Option<usize>,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(
            store,
            &format!("{name}.conv"),
            channels,
            channels,
            3,
            ConvOptions::same(3, dilation),
        );
        let attention = match attention {
            Some(r) => Some(CbamBlock::new(store, &format!("{name}.cbam"), channels, r)?),
            None => None,
        };
        let projection = Conv2dLayer::new(store, &format!("{name}.proj"), channels, width, 1, ConvOptions::default());
        Ok(Self {
            conv,
            attention,
            projection,
            upsample,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let y = self.conv.forward(g, f)?;
        let y = match &self.attention {
            Some(a) => a.forward(g, y)?,
            None => y,
        };
        let y = self.projection.forward(g, y)?;
        g.upsample_nearest(y, self.upsample)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
            + self.attention.as_ref().map_or(0, CbamBlock::param_count)
            + self.projection.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Msff {
    pub branches: [MsffBranch; 3],
}

impl Msff {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &FusionConfig,
        pyramid_channels: [usize; 3],
    ) -> Result<Self> {
        let attention = cfg.attention.then_some(cfg.reduction);
        let mut branches = Vec::with_capacity(3);
        for i in 0..3 {
            branches.push(MsffBranch::new(
                store,
                &format!("{name}.branch{}", i + 1),
                pyramid_channels[i],
                cfg.width,
                cfg.dilations[i],
                PYRAMID_STRIDES[i] / PYRAMID_STRIDES[0],
                attention,
            )?);
        }
        let branches: [MsffBranch; 3] = branches.try_into().expect("three branches");
        Ok(Self { branches })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pyr: &FeaturePyramid) -> Result<[Var; 3]> {
        let inputs = [pyr.f1, pyr.f2, pyr.f3];
        let mut out = [pyr.f1; 3];
        for (i, (branch, &f)) in self.branches.iter().zip(&inputs).enumerate() {
            out[i] = branch.forward(g, f)?;
        }
        if g.shape(out[1]) != g.shape(out[0]) || g.shape(out[2]) != g.shape(out[0]) {
            return Err(Error::shape(
                "msff_forward",
                format!(
                    "branch outputs {:?}, {:?}, {:?} disagree",
                    g.shape(out[0]),
                    g.shape(out[1]),
                    g.shape(out[2])
                ),
            ));
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.branches.iter().map(MsffBranch::param_count).sum()
    }
}

/// Per-image scalar weight for each scale: a shared 1x1 compressor, global
/// average pooling and a shared MLP score each map, softmax across scales.
#[derive(Clone, Debug, PartialEq)]
pub struct RwNet {
    pub compressor: Conv2dLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub width: usize,
}

impl RwNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let squeezed = width / 4;
        if squeezed == 0 {
            return Err(Error::invalid("rw_net", format!("width {width} too small to compress")));
        }
        Ok(Self {
            compressor: Conv2dLayer::new(
                store,
                &format!("{name}.compress"),
                width,
                squeezed,
                1,
                ConvOptions::default(),
            ),
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), squeezed, squeezed),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), squeezed, 1),
            width,
        })
    }

    fn score<T: Scalar>(&self, g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
        let n = g.shape(m)[0];
        let c = self.compressor.forward(g, m)?;
        let c = g.global_pool(PoolKind::Avg, c)?;
        let c = g.reshape(c, &[n, self.width / 4])?;
        let h = self.fc1.forward(g, c)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    /// `[N,3]` softmax weights, one row per image.
    pub fn weights<T: Scalar>(&self, g: &mut Graph<'_, T>, maps: [Var; 3]) -> Result<Var> {
        let s0 = g.shape(maps[0]).to_vec();
        for &m in &maps[1..] {
            if g.shape(m) != s0.as_slice() {
                return Err(Error::shape("rw_weights", format!("{:?} vs {s0:?}", g.shape(m))));
            }
        }
        let scores = [self.score(g, maps[0])?, self.score(g, maps[1])?, self.score(g, maps[2])?];
        let scores = g.concat(&scores)?;
        g.softmax(scores)
    }

    /// `w1 G1 + w2 G2 + w3 G3` with weights from [`RwNet::weights`].
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, maps: [Var; 3]) -> Result<(Var, Var)> {
        let w = self.weights(g, maps)?;
        let n = g.shape(maps[0])[0];
        let mut acc: Option<Var> = None;
        for (i, &m) in maps.iter().enumerate() {
            let idx: Vec<usize> = (0..n).map(|b| b * 3 + i).collect();
            let wi = g.gather(w, &idx)?;
            let wi = g.reshape(wi, &[n, 1, 1, 1])?;
            let term = g.mul(m, wi)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok((acc.expect("three maps"), w))
    }

    pub fn param_count(&self) -> usize {
        self.compressor.param_count() + self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Channel concatenation followed by a 1x1 convolution back to the common
/// width.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatFuse {
    pub conv: Conv2dLayer,
}

impl ConcatFuse {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), 3 * width, width, 1, ConvOptions::default()),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, maps: [Var; 3]) -> Result<Var> {
        let cat = g.concat(&maps)?;
        self.conv.forward(g, cat)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Fusion {
    Reweighted { msff: Msff, rw: RwNet },
    Concat { msff: Msff, fuse: ConcatFuse },
    /// F3 alone, projected to the common width at stride 32.
    SingleScale { projection: Conv2dLayer },
}

/// The map handed to the proposal network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedMap {
    pub map: Var,
    pub stride: usize,
    /// `[N,3]` scale weights when reweighting is active.
    pub weights: Option<Var>,
}

impl Fusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &FusionConfig,
        pyramid_channels: [usize; 3],
    ) -> Result<Self> {
        if !cfg.msff {
            let projection = Conv2dLayer::new(
                store,
                &format!("{name}.f3_proj"),
                pyramid_channels[2],
                cfg.width,
                1,
                ConvOptions::default(),
            );
            return Ok(Fusion::SingleScale { projection });
        }
        let msff = Msff::new(store, &format!("{name}.msff"), cfg, pyramid_channels)?;
        Ok(if cfg.reweight {
            Fusion::Reweighted {
                msff,
                rw: RwNet::new(store, &format!("{name}.rw"), cfg.width)?,
            }
        } else {
            Fusion::Concat {
                msff,
                fuse: ConcatFuse::new(store, &format!("{name}.concat"), cfg.width),
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pyr: &FeaturePyramid) -> Result<FusedMap> {
        match self {
            Fusion::Reweighted { msff, rw } => {
                let maps = msff.forward(g, pyr)?;
                let (map, w) = rw.fuse(g, maps)?;
                Ok(FusedMap {
                    map,
                    stride: PYRAMID_STRIDES[0],
                    weights: Some(w),
                })
            }
            Fusion::Concat { msff, fuse } => {
                let maps = msff.forward(g, pyr)?;
                Ok(FusedMap {
                    map: fuse.forward(g, maps)?,
                    stride: PYRAMID_STRIDES[0],
                    weights: None,
                })
            }
            Fusion::SingleScale { projection } => Ok(FusedMap {
                map: projection.forward(g, pyr.f3)?,
                stride: PYRAMID_STRIDES[2],
                weights: None,
            }),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Fusion::Reweighted { msff, rw } => msff.param_count() + rw.param_count(),
            Fusion::Concat { msff, fuse } => msff.param_count() + fuse.param_count(),
            Fusion::SingleScale { projection } => projection.param_count(),
        }
    }
}

/// Standalone concatenation fusion with a caller-supplied 1x1 layer.
pub fn concat_fuse<T: Scalar>(g: &mut Graph<'_, T>, fuse: &ConcatFuse, maps: [Var; 3]) -> Result<Var> {
    fuse.forward(g, maps)
}
