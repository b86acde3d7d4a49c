//! Minimal reverse-mode differentiation, the policy networks built on it,
//! an RMSprop optimizer and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{
    analytic_gradients, check_graph_loss, finite_difference_check, relative_error, GradCheckReport, DEFAULT_STEP,
    DEFAULT_TOLERANCE, RELATIVE_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use model::{Architecture, ModelKind, PolicyModel};
pub use optim::{RmsProp, RmsPropConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
