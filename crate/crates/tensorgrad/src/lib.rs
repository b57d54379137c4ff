//! Reverse-mode automatic differentiation over dense tensors, restricted to
//! the layers a convolutional recurrent enhancement network needs:
//! frequency-strided (de)convolution, batch/layer normalization, PReLU,
//! LSTM, linear maps, and a handful of elementwise, shape and complex ops.
//!
//! ```
//! use tensorgrad::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.square(x);
//! let s = g.sum(sq);
//! let loss = g.scale(s, 0.5);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

pub mod error;
pub mod graph;
pub mod layer;
pub mod ops;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use layer::{init_uniform, LayerKind, LayerSpec, BN_MOMENTUM, NORM_EPS, PRELU_INIT};
pub use ops::norm::{BatchNormMode, BatchStats};
pub use ops::recurrent::LstmVars;
pub use params::{ParamStore, Slot};
pub use tensor::{Real, Tensor};
