//! Differentiable operations recorded on the [`Tape`](crate::tape::Tape).

pub mod conv;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod roi;
pub mod shape;
