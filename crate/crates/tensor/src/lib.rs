//! Minimal reverse-mode autodiff over `ndarray`, sized for small vision
//! pipelines that need exact control over determinism and precision.
//!
//! The heavy kernels (convolution, matmul, pooling) are data-parallel via
//! rayon under the default `parallel` feature and fall back to sequential
//! loops without it; both paths produce bitwise-identical results.

pub mod element;
pub mod fdcheck;
pub mod kernels;
pub mod tape;

pub use element::Element;
pub use tape::{Gradients, Tape, Var};
