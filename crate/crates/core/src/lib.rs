//! Buffered asynchronous federated learning with bidirectional quantization.
//!
//! Clients train from a shared *hidden state* `x̂` that the server advances only
//! through quantized corrections `q^t = Q_s(x^{t+1} − x̂^t)`, so server-side
//! quantization error does not accumulate in the clients' starting points.
//! With identity quantizers the protocol reduces to plain FedBuff.

pub mod analysis;
pub mod config;
pub mod emit;
pub mod experiment;
pub mod protocol;
pub mod quantizers;
pub mod seed;
pub mod simulator;
pub mod tasks;
pub mod vector;

pub use quantizers::{
    compression_parameter, dequantize, quantize, QuantizedMessage, QuantizerError, QuantizerSpec,
};
pub use tasks::{Task, TaskError, TaskKind};
pub use vector::ParameterVector;
