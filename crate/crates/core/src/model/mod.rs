//! The ranking network: a mode-switching text tower, an image tower over raw
//! and overlay features, and cosine similarity between their outputs.

mod bundle;
mod checkpoint;
pub mod graph;
mod layers;
pub mod tensor;
mod towers;

use rayon::prelude::*;
use thiserror::Error;

pub use bundle::{
    build_image_features, build_text_bundle, bundle_texts, BundleTexts, ImageFeatures,
    TextFeatureBundle,
};
pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{EncoderLayer, LayerNorm, Linear, Mlp, Params};
pub use tensor::Matrix;
pub use towers::{sare_forward, similarity, spe_forward, SareWeights, SpeWeights};

use crate::config::{validate_config, Config};
use crate::encoders::EncoderError;
use graph::Graph;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Rows encoded per graph during inference.
const INFERENCE_CHUNK: usize = 64;

/// Both towers plus the configuration they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub config: Config,
    pub spe: SpeWeights,
    pub sare: SareWeights,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl RankerModel {
    /// Seeded initialization from a validated configuration.
    pub fn new(config: &Config) -> Result<Self, ModelError> {
        let report = validate_config(config);
        if !report.is_valid() {
            return Err(ModelError::Config(report.to_string()));
        }
        Ok(Self {
            config: config.clone(),
            spe: SpeWeights::new(config),
            sare: SareWeights::new(config),
            step: 0,
        })
    }

    pub fn joint_dim(&self) -> usize {
        self.spe.joint_dim()
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Matrix)) {
        self.spe.visit("spe", f);
        self.sare.visit("sare", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Matrix)) {
        self.spe.visit_mut("spe", f);
        self.sare.visit_mut("sare", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.data().len());
        n
    }

    /// `h_txt` for every bundle, without dropout.
    pub fn encode_texts(&self, bundles: &[TextFeatureBundle]) -> Result<Vec<Vec<f64>>, ModelError> {
        let chunks: Vec<Vec<Vec<f64>>> = bundles
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&TextFeatureBundle> = chunk.iter().collect();
                let mut g = Graph::new();
                let out = self.spe.forward_graph(&mut g, &refs, None)?;
                let m = g.value(out);
                Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// `h_img` for every feature pair, without dropout.
    pub fn encode_images(&self, features: &[ImageFeatures]) -> Result<Vec<Vec<f64>>, ModelError> {
        let chunks: Vec<Vec<Vec<f64>>> = features
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&ImageFeatures> = chunk.iter().collect();
                let mut g = Graph::new();
                let out = self.sare.forward_graph(&mut g, &refs, None)?;
                let m = g.value(out);
                Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}
