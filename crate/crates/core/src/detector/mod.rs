//! Two-stage detection on the fused feature map.

pub mod anchors;
pub mod bbox;
pub mod head;
pub mod infer;
pub mod model;
pub mod nms;
pub mod rpn;
pub mod train;

pub use anchors::{generate_anchors, Anchor, AnchorConfig};
pub use bbox::{iou, BBox, BoxCoder};
pub use infer::{infer, InferConfig};
pub use model::{ModelConfig, SmrNet};
pub use nms::{nms, Detection, NUM_CLASSES};
pub use train::{detection_loss, recalibrate_batch_norm, training_step, LossParts, Sgd, StepStats, Target, TrainConfig};
