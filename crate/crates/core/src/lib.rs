//! Tensor-Train factorized layers and recurrent cells for classifying long
//! sequences of high-dimensional frames.
//!
//! The input-to-hidden weight matrix of an SRNN, GRU or LSTM cell is stored as
//! a chain of small TT cores instead of a dense matrix, which shrinks the
//! parameter count by several orders of magnitude for video-sized inputs.

mod codec;
pub mod data;
pub mod error;
pub mod model;
pub mod rnn;
pub mod tensor;
pub mod train;
pub mod tt;

pub use error::{Error, Result};
pub use tensor::{DenseTensor, Shape};
pub use tt::{TtCores, TtLayer, TtShape};
