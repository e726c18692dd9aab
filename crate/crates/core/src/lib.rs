//! Decoder-decoder language model inference: gated retention and
//! sliding-window self-decoders, a single shared key/value cache read by every
//! cross-decoder layer, an early-exit inference engine, and a chunk-parallel
//! simulator.

pub mod engine;
pub mod error;
pub mod gret;
pub mod model;
pub mod parsim;
pub mod swa;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, Params, SelfAttnKind};
pub use tensor::{Paradigm, Real, Tensor};
