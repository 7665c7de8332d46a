//! Dense matrices, a reverse-mode tape, and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, Tape};
