//! Second-stage classifier and per-class box regressor over pooled RoIs.

use alloc::format;

use super::bbox::BoxCoder;
use super::nms::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::layers::{Graph, LinearLayer, ParamStore};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Delta parameterisation of the second stage.
pub const HEAD_CODER: BoxCoder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub classifier: LinearLayer,
    pub regressor: LinearLayer,
    pub in_features: usize,
}

impl DetectionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, pool: usize, hidden: usize) -> Self {
        let in_features = channels * pool * pool;
        Self {
            fc1: LinearLayer::new(store, &format!("{name}.fc1"), in_features, hidden),
            fc2: LinearLayer::new(store, &format!("{name}.fc2"), hidden, hidden),
            classifier: LinearLayer::new(store, &format!("{name}.cls"), hidden, NUM_CLASSES),
            regressor: LinearLayer::new(store, &format!("{name}.reg"), hidden, 4 * NUM_CLASSES),
            in_features,
        }
    }

    /// Class logits `[R,3]` and deltas `[R,12]` (class `c` in columns `4c..4c+4`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<(Var, Var)> {
        let shape = g.shape(pooled).to_vec();
        let r = shape[0];
        if shape.iter().skip(1).product::<usize>() != self.in_features {
            return Err(Error::shape(
                "detection_head",
                format!("pooled {shape:?}, head expects {} features", self.in_features),
            ));
        }
        let x = g.reshape(pooled, &[r, self.in_features])?;
        let x = self.fc1.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.fc2.forward(g, x)?;
        let x = g.relu(x)?;
        let cls = self.classifier.forward(g, x)?;
        let reg = self.regressor.forward(g, x)?;
        Ok((cls, reg))
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.classifier.param_count() + self.regressor.param_count()
    }
}
