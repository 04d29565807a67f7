//! Discrete-event simulation of speculative, preemptive scheduling for LLM
//! inference serving.

pub mod config;
pub mod costmodel;
pub mod error;
pub mod kvmanager;
pub mod predictor;
pub mod rng;
pub mod scalar;
pub mod scheduler;
pub mod simcore;
pub mod workload;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use simcore::{MetricsReport, PolicyKind};
pub use scalar::Scalar;

/// `f64` instantiations of the generic types.
pub type Coefficients = costmodel::CostCoefficients<f64>;
pub type Predictor = predictor::LengthPredictor<f64>;
pub type Embedding = predictor::EmbeddingVector<f64>;
pub type QuantTensor = kvmanager::QuantizedTensor<f64>;
pub type Queues = scheduler::PriorityQueueSet<f64>;
