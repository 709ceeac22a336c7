//! Dense-array math with reverse-mode gradients.
//!
//! [`Tensor`] is a shape plus contiguous float storage. Operations build a
//! dynamic graph: each result remembers its parents and a closure that
//! propagates the output gradient back to them. Calling [`Tensor::backward`]
//! on a scalar walks the graph in reverse topological order and accumulates
//! gradients into every tensor created with `requires_grad`.
//!
//! Graph recording is skipped entirely when no input requires gradients, so
//! inference pays only for the forward kernels. A single graph is
//! single-threaded; the heavy kernels (matmul, conv) parallelize internally
//! over fixed-size row blocks, which keeps results bit-identical regardless
//! of thread count.
//!
//! Training runs in `f32`; gradient checking instantiates the same ops with
//! `f64` where central finite differences are stable.

mod conv;
mod gradcheck;
mod matmul;
mod ops;
mod optim;
mod resize;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, CheckOp, GradReport, ALL_CHECK_OPS};
pub use ops::{
    abs, add, aggregate_corners, broadcast_hw, clamp, concat, conv2d, gather_cells,
    global_avg_pool, linear, ln, matmul, mean_all, mul, pad_replicate, relu, reshape,
    resize_bilinear, scale, sigmoid, square, sub, sum_all,
};
pub use optim::{adam_step, adam_step_from_params, AdamHyper, OptimizerState};
pub use tensor::{Element, Tensor};
