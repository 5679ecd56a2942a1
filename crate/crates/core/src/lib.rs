//! White-box transformer layers derived from sparse rate reduction, with
//! the supporting linear algebra, denoising, training and diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod denoise;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod linalg;
pub mod optim;
pub mod rate;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::Rng;
