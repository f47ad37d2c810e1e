//! Compression of small transformer models by CUR decomposition.
//!
//! A weight matrix `W` is replaced by three thin factors `C * U * R` where
//! `C` and `R` are actual columns and rows of `W`, picked by greedy
//! interpolation over singular vectors (optionally importance-weighted by
//! calibration activations), and `U` is the Frobenius-optimal core. The crate
//! covers the whole loop: dense linear algebra, index selection, factor
//! construction with spectral error bounds, a toy decoder-style transformer
//! to compress, layer ranking from calibration data, post-compression healing
//! of the core by knowledge distillation, and bit-exact persistence.

pub mod cur;
pub mod error;
pub mod matrix;
pub mod ablate;
pub mod healing;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod selection;
pub mod store;
pub mod svd;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
pub use model::{ModelConfig, ToyTransformer};
