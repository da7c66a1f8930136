//! Progressive vision graph backbone.
//!
//! Image patches become graph nodes. Each block splits its channels three
//! ways: a local stencil branch, a first-order k-NN graph and a second-order
//! graph whose channels have already passed through the local branch. Graph
//! neighbourhoods are summarised by MaxE and the nonlinearity is GraphLU.

pub mod aggregate;
pub mod autograd;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod graphlu;
pub mod io;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
