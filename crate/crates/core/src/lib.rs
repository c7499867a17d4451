pub mod attention;
pub mod attribution;
pub mod autodiff;
pub mod atlas;
pub mod enrichment;
pub mod error;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use autodiff::{finite_difference_gradient, Tape, Var};
pub use error::{CdtError, Result};
pub use tensor::{Scalar, Tensor};
