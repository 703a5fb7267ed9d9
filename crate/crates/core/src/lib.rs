//! Rank-N-Contrast pretraining, linear probing and concept-based explanation
//! (CAV, TCAV, integrated gradients) over synthetic land-cover scenes.

pub mod cav;
pub mod data;
pub mod error;
pub mod explain;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pca;
pub mod rnc;
pub mod tcav;
pub mod tensor;
pub mod train;

pub use cav::{Cav, CavConfig, ConceptActivations};
pub use data::{Concept, Dataset, GroundTruthModel, Scene, Split};
pub use error::{Error, Result};
pub use explain::{explain, ExplainConfig, ExplainReport};
pub use nn::{ActivationTrace, LinearHead, MlpEncoder};
pub use pca::{EmbeddingProjection, Pca2};
pub use rnc::{RncBatch, RncConfig};
pub use tcav::{AlignmentNormalization, IgConfig, SensitivityMethod, SensitivityRecord, TcavScore};
pub use tensor::Matrix;
pub use train::{EncoderVariant, TrainConfig, TrainedPipeline};
