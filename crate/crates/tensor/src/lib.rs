//! Dense tensors generic over the scalar type, with reverse-mode autodiff.
//!
//! ```
//! use flowlens_tensor::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]));
//! let loss = x.square().sum();
//! let grads = g.backward(loss);
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::attention::{attention_weights, Neighborhoods};
pub use ops::conv::ConvGeom;
pub use ops::fold::PatchGeom;
pub use ops::sample::Bilinear;
pub use optim::{Adam, AdamConfig};
pub use params::{Ctx, Init, ParamStore};
pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
