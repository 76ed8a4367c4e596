//! Quantile-loss training: the pinball loss, deterministic mini-batch loops
//! for both model families, and finite-difference gradient verification.

pub mod gradcheck;
pub mod loss;
pub mod trainer;

pub use gradcheck::{verify_gradients, GradCheckReport};
pub use loss::quantile_loss;
pub use trainer::{train_6h, train_interp, TrainConfig, TrainReport};
