//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with just the layers a SegFormer-style segmentation network
//! needs: linear maps, grouped/dilated convolutions, layer norm, softmax
//! attention, bilinear resampling and a masked cross-entropy.
//!
//! ```
//! use sharecmp_nn::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2], vec![1.0, -2.0]));
//! let y = x.square().sum();
//! let grads = g.backward(y);
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod check;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use kernels::Conv2dSpec;
pub use layers::{nchw_to_tokens, tokens_to_nchw, Conv2d, Ctx, LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
