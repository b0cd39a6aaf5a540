//! RAP-Net: a ConvRNN radar-echo nowcasting model with a Region Attention
//! Block and a Recall Attention Mechanism, together with the data pipeline,
//! forecast-verification metrics and training loop needed to run it
//! end to end on the CPU.

pub mod error;
pub mod tensor;

pub use error::{RapError, Result};
pub use tensor::{Dtype, Gradients, Scalar, Tape, TensorId};
