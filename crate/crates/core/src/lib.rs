pub mod aggregators;
pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod cli;
pub mod error;
pub mod frequency;
pub mod fsutil;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod model;
pub mod nominator;
pub mod ops;
pub mod params;
pub mod suite;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{NomError, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
