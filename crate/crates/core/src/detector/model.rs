//! The assembled detector: backbone, fusion, proposal network and head.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::{generate_anchors, Anchor, AnchorConfig};
use super::head::DetectionHead;
use super::rpn::{KernelCombine, ProposalConfig, RpnHead};
use crate::backbone::{Backbone, BackboneConfig, Preset};
use crate::error::{Error, Result};
use crate::fusion::{FusedMap, Fusion, FusionConfig};
use crate::layers::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub anchors: AnchorConfig,
    pub rpn_combine: KernelCombine,
    pub head_hidden: usize,
    pub roi_size: usize,
    /// `(height, width)` of input images.
    pub image_size: (usize, usize),
    pub train_proposals: ProposalConfig,
    pub eval_proposals: ProposalConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (fusion, hidden) = match p {
            Preset::Tiny => (FusionConfig::tiny(), 256),
            Preset::Full => (FusionConfig::full(), 1024),
        };
        Self {
            backbone: BackboneConfig::preset(p),
            fusion,
            anchors: AnchorConfig::default(),
            rpn_combine: KernelCombine::Sum,
            head_hidden: hidden,
            roi_size: 7,
            image_size: (96, 96),
            train_proposals: ProposalConfig::train(),
            eval_proposals: ProposalConfig::eval(),
        }
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn full() -> Self {
        Self::preset(Preset::Full)
    }

    pub fn stride(&self) -> usize {
        self.fusion.output_stride()
    }

    /// `(rows, cols)` of the fused map.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.stride(), self.image_size.1 / self.stride())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmrNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub rpn: RpnHead,
    pub head: DetectionHead,
}

/// Tape handles of a forward pass up to the proposal network.
#[derive(Clone, Copy, Debug)]
pub struct RpnForward {
    pub fused: FusedMap,
    pub logits: Var,
    pub deltas: Var,
}

impl SmrNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        let (h, w) = config.image_size;
        if h % 32 != 0 || w % 32 != 0 || h < 64 || w < 64 {
            return Err(Error::invalid(
                "model",
                alloc::format!("image size {h}x{w} must be >= 64 and divisible by 32"),
            ));
        }
        let backbone = Backbone::new(store, "backbone", &config.backbone)?;
        let fusion = Fusion::new(store, "fusion", &config.fusion, config.backbone.pyramid_channels())?;
        let width = config.fusion.width;
        let rpn = RpnHead::new(store, "rpn", width, config.anchors.per_cell(), config.rpn_combine);
        let head = DetectionHead::new(store, "head", width, config.roi_size, config.head_hidden);
        Ok(Self {
            config: config.clone(),
            backbone,
            fusion,
            rpn,
            head,
        })
    }

    /// Builds the network and initialises its parameters from `seed`.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config)?;
        store.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((model, store))
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        let (gh, gw) = self.config.grid();
        let a = &self.config.anchors;
        generate_anchors(gh, gw, self.config.stride() as f64, &a.scales, &a.ratios)
    }

    pub fn fused<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<FusedMap> {
        let pyr = self.backbone.forward(g, images)?;
        self.fusion.forward(g, &pyr)
    }

    pub fn forward_rpn<T: Scalar>(&self, g: &mut Graph<'_, T>, images: Var) -> Result<RpnForward> {
        let fused = self.fused(g, images)?;
        let (logits, deltas) = self.rpn.forward(g, fused.map)?;
        Ok(RpnForward { fused, logits, deltas })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.fusion.param_count() + self.rpn.param_count() + self.head.param_count()
    }
}
