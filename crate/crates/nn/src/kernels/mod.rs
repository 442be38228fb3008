//! Forward and backward kernels used by the graph ops.

pub mod broadcast;
pub mod conv;
pub mod gemm;
pub mod resize;

pub use conv::Conv2dSpec;
