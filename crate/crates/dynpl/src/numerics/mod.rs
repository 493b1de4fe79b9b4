//! Minimal dense numerical core: matrix storage, 1-D convolutions, masked
//! softmax, binary cross-entropy, inverted dropout, Adam, and a
//! finite-difference gradient verifier. Everything runs in f64.

pub mod adam;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{
    apply_dropout, bce, conv1d_same, dropout_mask, sigmoid, softmax_masked, Activation, BCE_EPS,
};
pub use tensor::{axpy, dot, Tensor2};
