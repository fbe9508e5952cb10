//! Change detection on bi-temporal image pairs with a hard sample-aware
//! contrastive objective, built on a small reverse-mode tensor library.

pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod synthdata;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
