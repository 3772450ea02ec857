//! Dense NCHW tensors, a reverse-mode tape, and the handful of layer
//! primitives a heatmap-regression ConvNet needs: convolution, 2×2 max
//! pooling, ReLU, batch normalization and channel concatenation.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod norm;
pub mod optim;
pub mod real;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use norm::{BatchMoments, BatchNormStats};
pub use optim::Sgd;
pub use real::Real;
pub use tensor::Tensor;
