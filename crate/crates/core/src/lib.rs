//! Conditional generative modelling of 24-hour activity schedules.
//!
//! The crate covers the whole workflow: schedule encoding and datasets
//! ([`schedule`]), a synthetic ground-truth population ([`synthpop`]), a small
//! reverse-mode differentiation substrate ([`nn`]), the model blocks and the
//! three model assemblies ([`blocks`], [`models`]), training ([`trainer`]),
//! evaluation ([`eval`]), mutual information estimation ([`mine`]) and the
//! scenario transforms used by the command line tool ([`scenario`]).

pub mod blocks;
pub mod error;
pub mod eval;
pub mod mine;
pub mod models;
pub mod nn;
pub mod scenario;
pub mod schedule;
pub mod synthpop;
pub mod trainer;

pub use error::{Error, Result};
pub use models::{LossBreakdown, Model, ModelConfig, ModelKind};
pub use schedule::{
    decode_schedule, encode_schedule, ActivityVocab, Dataset, EncodedSchedule, LabelSchema,
    LabelVector, RawSchedule,
};
pub use trainer::{train, TrainConfig};
