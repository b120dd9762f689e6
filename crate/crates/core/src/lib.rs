//! Spatial-temporal attention network for open-set fine-grained recognition.
//!
//! The network runs a windowed self-attention backbone, reorganizes its four
//! stage outputs into same-size maps ([`sfso`]), unrolls an LSTM over them
//! ([`stfl`]) whose forget gate is driven by a pixel-scanning inner LSTM
//! ([`ca`]), and scores open-set samples by their maximum logit ([`head`]).

pub mod ablation;
pub mod backbone;
pub mod ca;
pub mod config;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod head;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod probe;
pub mod run;
pub mod sfso;
pub mod stfl;
pub mod train;

pub use error::{ErrorKind, Result, StanError};
pub use stan_tensor as tensor;
