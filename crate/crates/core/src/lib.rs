//! Adaptive global/local GAN training with a patch-scoring discriminator,
//! built on a small reverse-mode autodiff engine.

pub mod ablation;
pub mod adaop;
pub mod data;
pub mod error;
pub mod models;
pub mod nn;
pub mod patchmetrics;
pub mod tensor;
pub mod trainer;

pub use adaop::{AdaOpConfig, LocalLevel, MaskMatrix, OptimizationDecision, OptimizationMode};
pub use data::{BatchStream, Dataset, SynthKind};
pub use error::{Error, Result};
pub use models::{Discriminator, DiscriminatorConfig, FeatureMap, Generator, GeneratorConfig};
pub use nn::{Mode, SpectralNormScope};
pub use patchmetrics::DispersionReport;
pub use tensor::Tensor;
pub use trainer::{EvalReport, TrainConfig, Trainer};
