//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a topological order; [`Graph::backward`] walks the nodes in exact reverse.
//! Parameters live outside the graph in a [`ParamSet`] and are copied in on
//! first use, so a graph is a throwaway object built once per step.

mod adam;
mod backward;
mod gradcheck;
mod graph;
mod ops;
mod params;

pub use adam::{AdamConfig, OptimizerState};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamSet};
