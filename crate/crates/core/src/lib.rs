//! Recurrent character-level language models (vanilla RNN, LSTM, GRU)
//! trained with hand-derived backpropagation through time, plus the Urdu
//! corpus pipeline, checkpointing and sampling built around them.

pub mod backprop;
pub mod cells;
pub mod corpus;
pub mod error;
pub mod linalg;
pub mod optimizer;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
