//! Convolutional spiking neural networks that regress the angular velocity of
//! a rotating event camera continuously in time.
//!
//! The crate covers the whole pipeline: synthetic event generation
//! ([`datagen`]), event containers and file formats ([`event`]), the Spike
//! Response Model neuron ([`srm`]), the convolutional network with global
//! average spike pooling ([`network`]), surrogate-gradient training
//! ([`training`]) and the evaluation metrics ([`metrics`]).
//!
//! Numerical code is generic over [`Scalar`]; training runs in `f32`, gradient
//! verification in `f64`.

pub mod conv;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod event;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod seed;
pub mod srm;
pub mod training;

pub use error::{Error, Result};
pub use event::{AngularVelocitySignal, Event, EventStream, Polarity, SpikeTensor};
pub use network::{Network, NetworkConfig, PredictionSignal};
pub use scalar::Scalar;
pub use srm::{KernelParams, KernelTable};

/// Single-precision network used for training and inference.
pub type Network32 = Network<f32>;
/// Double-precision network used for gradient verification.
pub type Network64 = Network<f64>;
/// Single-precision prediction trace.
pub type Prediction32 = PredictionSignal<f32>;
/// Double-precision prediction trace.
pub type Prediction64 = PredictionSignal<f64>;

/// Crate version, echoed into provenance files.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
