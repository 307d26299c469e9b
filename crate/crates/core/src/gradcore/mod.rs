//! Differentiable-computation substrate.
//!
//! [`Tensor`] is a dense row-major `f64` array; [`Graph`] records the forward
//! pass of a model built from a fixed set of primitives (affine maps, batched
//! products, masked softmax, layer and batch normalisation, ELU, dropout,
//! reshapes and losses) and computes exact reverse-mode gradients.
//! [`grad_check`] compares those gradients with central finite differences.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, GradCheckReport, GradCoordinate, VANISHING_ANALYTIC, VANISHING_NUMERIC};
pub use graph::{
    bce_logit, elu, log_sum_exp, sigmoid, Gradients, Graph, Mode, Var, BN_MOMENTUM,
    softmax_in_place, MASK_SENTINEL, NORM_EPS,
};
pub use params::{ParamEntry, ParameterSet};
pub use tensor::Tensor;
