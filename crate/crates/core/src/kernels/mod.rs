//! Raw numeric kernels (no taping). The autodiff graph dispatches into these.

pub mod conv;
pub mod gemm;
pub mod softmax;
