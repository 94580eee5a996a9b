//! Retrieval-augmented MOS score prediction.
//!
//! The engine combines two prediction paths over fixed utterance embeddings:
//! a parametric decoder (regression head plus a score-bin classification head)
//! and a non-parametric nearest-neighbor path over an embedding datastore.
//! A small fusing network weighs the two paths per instance based on neighbor
//! distances and the decoder's confidence distribution.
//!
//! Training is two-staged: the decoder is trained first, then frozen while the
//! fusing network is trained on top. At inference the datastore can be swapped
//! for target-domain data without retraining anything.

pub mod dataio;
pub mod datastore;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod rng;

pub use dataio::{DomainShift, LabeledSample, SampleSet, SyntheticConfig};
pub use datastore::{Datastore, NeighborHit};
pub use decoder::{BinScheme, Decoder, DecoderOutput, Stage1Config};
pub use error::{Error, Result};
pub use fusion::{FusingNets, FusionOutput, Prediction, Stage2Config};
pub use metrics::{EvalReport, MetricBlock, PredictedScore};
pub use nn::{Activation, DenseLayer, GradientSet, MlpModel, OptimizerConfig};
pub use rng::Rng;
