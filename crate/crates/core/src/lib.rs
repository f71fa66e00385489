//! Hallucination detection from per-token uncertainty features.
//!
//! The [`model::HaluNet`] network encodes log-likelihood, entropy and
//! embedding sequences per branch, fuses them and emits a hallucination
//! probability. Baselines, metrics, a trainer and a synthetic data generator
//! share the HFJ record types in [`features`].

pub mod baselines;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{Dataset, FeatureRecord};
pub use metrics::{EvalReport, ScoredRecord, ScoredSet};
pub use model::{EncoderKind, EncoderPreset, Feature, FusionKind, HaluNet, ModelConfig, Network, Prediction};
pub use rng::Rng;
pub use synth::{generate, SynthConfig};
pub use trainer::{train, TrainConfig, TrainReport};
