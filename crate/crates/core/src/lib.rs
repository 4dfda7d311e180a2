pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod ldr;
pub mod network;
pub mod objective;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Conv2dSpec, Primitive, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
