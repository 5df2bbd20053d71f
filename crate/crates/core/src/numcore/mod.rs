//! Dense tensors, a gradient tape and the small amount of optimisation
//! machinery the forecasting networks need.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{elementwise, matmul, mse_loss, sigmoid, softmax, Elementwise, Tensor};
