//! Minimal reverse-mode differentiation over rank-4 tensors.
//!
//! Only the operations the sampling networks need are provided. Every one
//! of them is covered by the finite-difference checker in [`gradcheck`].

mod graph;
pub mod gradcheck;
pub mod kernels;

pub use gradcheck::{grad_check, relative_error, Coordinate, GradCheckOptions, GradCheckReport};
pub use graph::{Elementwise, Graph, LeakyRelu, NodeId};
