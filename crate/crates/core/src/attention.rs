//! Convolutional block attention: a channel mask followed by a spatial mask.

use alloc::format;

use crate::error::{Error, Result};
use crate::layers::{Conv2dLayer, ConvOptions, Graph, LinearLayer, ParamStore};
use crate::ops::pool::PoolKind;
use crate::tape::Var;
use crate::tensor::Scalar;

/// Channel mask `sigmoid(MLP(avgpool x) + MLP(maxpool x))` with one MLP
/// shared by both pooled descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
            return Err(Error::invalid(
                "channel_attention",
                format!("reduction {reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), channels, hidden),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), hidden, channels),
            channels,
            reduction,
        })
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        let h = self.fc1.forward(g, v)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    /// The `[N,C,1,1]` mask.
    pub fn mask<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("input {shape:?}, block expects {} channels", self.channels),
            ));
        }
        let n = shape[0];
        let avg = g.global_pool(PoolKind::Avg, x)?;
        let avg = g.reshape(avg, &[n, self.channels])?;
        let max = g.global_pool(PoolKind::Max, x)?;
        let max = g.reshape(max, &[n, self.channels])?;
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let s = g.add(a, m)?;
        let s = g.sigmoid(s)?;
        g.reshape(s, &[n, self.channels, 1, 1])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mask = self.mask(g, x)?;
        g.mul(x, mask)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Spatial mask `sigmoid(conv7x7([mean_c x, max_c x]))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention {
    pub conv: Conv2dLayer,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        Self {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), 2, 1, 7, ConvOptions::same(7, 1)),
        }
    }

    /// The `[N,1,H,W]` mask.
    pub fn mask<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mean = g.channel_pool(PoolKind::Avg, x)?;
        let max = g.channel_pool(PoolKind::Max, x)?;
        let stacked = g.concat(&[mean, max])?;
        let s = self.conv.forward(g, stacked)?;
        g.sigmoid(s)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mask = self.mask(g, x)?;
        g.mul(x, mask)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamBlock {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl CbamBlock {
    pub const DEFAULT_REDUCTION: usize = 4;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, &format!("{name}.channel"), channels, reduction)?,
            spatial: SpatialAttention::new(store, &format!("{name}.spatial")),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.channel.forward(g, x)?;
        self.spatial.forward(g, y)
    }

    pub fn param_count(&self) -> usize {
        self.channel.param_count() + self.spatial.param_count()
    }

    /// Closed-form parameter count for `channels` and `reduction`.
    pub fn analytic_param_count(channels: usize, reduction: usize) -> usize {
        let h = channels / reduction;
        2 * channels * h + h + channels + 2 * 7 * 7 + 1
    }
}
