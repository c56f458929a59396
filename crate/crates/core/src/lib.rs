//! Dual-mode multimodal ranking for open-vocabulary fetch-and-carry.

pub mod config;
pub mod data;
pub mod encoders;
pub mod features;
pub mod lang;
pub mod model;
pub mod retrieval;
pub mod training;
pub mod types;

pub use config::{validate_config, Config, ProviderConfig, ProviderSpec, ValidationReport};
pub use types::{
    deserialize_sample, serialize_sample, FetchCarrySample, ImageRecord, InstructionRecord,
    MetricsReport, ModeToken, RankedEntry, RankedList, RecordError,
};
