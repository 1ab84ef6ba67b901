//! Tiny causal transformer with policy, reward and difference heads.

mod params;
mod sample;
mod transformer;
pub mod vocab;

pub use params::{BackboneConfig, ModelKind, ModelMeta, ParameterStore, FORMAT_VERSION};
pub use sample::{sample, sample_with, DecodeStrategy};
pub use transformer::{difference_value, logprob_value, reward_value, BoundModel, Evaluator, ParamGrads};
pub use vocab::{ModelInput, Role, TokenId, TokenSequence, Vocab};
