//! Frozen feature providers behind small traits, plus overlay rendering and
//! the embedding cache.

mod cache;
mod image;
mod overlay;
mod synthetic;

use std::sync::Arc;

use thiserror::Error;

pub use cache::{
    image_key, text_key, CacheError, CachedImageEncoder, CachedTextEncoder, EmbeddingCache,
    CACHE_MAGIC, CACHE_VERSION,
};
pub use image::{Mask, RgbImage};
pub use overlay::{render_overlay, OverlayStyle, PALETTE};
pub(crate) use synthetic::seeded_rng;
pub use synthetic::{
    normalize_text, SyntheticImageEncoder, SyntheticSegmenter, SyntheticTextEncoder, DIGEST_SIDE,
};

use crate::config::{Config, ProviderSpec};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("input error: {0}")]
    Input(String),
    /// The backend cannot answer right now; the message says how to fix it.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider returned a malformed vector: {0}")]
    Malformed(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait TextEncoder: Send + Sync {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EncoderError>;
}

pub trait ImageEncoder: Send + Sync {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, EncoderError>;
}

pub trait SegmentationProvider: Send + Sync {
    fn tag(&self) -> &str;
    fn max_masks(&self) -> usize;
    fn segment(&self, image: &RgbImage) -> Result<Vec<Mask>, EncoderError>;
}

fn check_vector(v: Vec<f32>, dim: usize, tag: &str) -> Result<Vec<f32>, EncoderError> {
    if v.len() != dim {
        return Err(EncoderError::Malformed(format!(
            "{tag} returned {} entries, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EncoderError::Malformed(format!(
            "{tag} returned non-finite entries"
        )));
    }
    Ok(v)
}

/// Embeds non-empty text and checks the provider's output contract.
pub fn embed_text(provider: &dyn TextEncoder, text: &str) -> Result<Vec<f32>, EncoderError> {
    if text.trim().is_empty() {
        return Err(EncoderError::InvalidArgument(
            "cannot embed empty text".into(),
        ));
    }
    check_vector(provider.embed(text)?, provider.dim(), provider.tag())
}

/// Embeds an image and checks the provider's output contract.
pub fn embed_image(
    provider: &dyn ImageEncoder,
    image: &RgbImage,
) -> Result<Vec<f32>, EncoderError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(EncoderError::Input("zero-sized image".into()));
    }
    check_vector(provider.embed(image)?, provider.dim(), provider.tag())
}

/// Keeps the `max` largest masks, largest first.
pub fn cap_masks(mut masks: Vec<Mask>, max: usize) -> Vec<Mask> {
    masks.sort_by_key(|m| std::cmp::Reverse(m.area()));
    masks.truncate(max);
    masks
}

/// Segments `image` and renders the overlay with the default style.
pub fn overlay_for(
    seg: &dyn SegmentationProvider,
    image: &RgbImage,
) -> Result<RgbImage, EncoderError> {
    let masks = cap_masks(seg.segment(image)?, seg.max_masks());
    render_overlay(image, &masks, &OverlayStyle::default())
}

/// The three frozen backbones a model needs.
#[derive(Clone)]
pub struct Providers {
    pub text: Arc<dyn TextEncoder>,
    pub image: Arc<dyn ImageEncoder>,
    pub segmentation: Arc<dyn SegmentationProvider>,
}

impl Providers {
    pub fn synthetic(config: &Config) -> Self {
        let p = &config.providers;
        Self {
            text: Arc::new(SyntheticTextEncoder::new(
                config.text_feat_dim,
                p.seed,
                config.vocab_size,
                config.max_token_len,
            )),
            image: Arc::new(SyntheticImageEncoder::new(config.image_feat_dim, p.seed)),
            segmentation: Arc::new(SyntheticSegmenter::new(p.max_masks)),
        }
    }

    /// Builds the providers named in the configuration.
    pub fn from_config(config: &Config) -> Result<Self, EncoderError> {
        let mut providers = Self::synthetic(config);
        if let ProviderSpec::File { path, tag } = &config.providers.text {
            let cache = Arc::new(EmbeddingCache::open(path, config.text_feat_dim)?);
            providers.text = Arc::new(CachedTextEncoder::new(cache, tag.clone()));
        }
        if let ProviderSpec::File { path, tag } = &config.providers.image {
            let cache = Arc::new(EmbeddingCache::open(path, config.image_feat_dim)?);
            providers.image = Arc::new(CachedImageEncoder::new(cache, tag.clone()));
        }
        Ok(providers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;

    impl TextEncoder for Broken {
        fn tag(&self) -> &str {
            "broken"
        }
        fn dim(&self) -> usize {
            4
        }
        fn embed(&self, _: &str) -> Result<Vec<f32>, EncoderError> {
            Ok(vec![0.0, f32::NAN, 0.0, 0.0])
        }
    }

    #[test]
    fn empty_text_is_invalid() {
        let p = SyntheticTextEncoder::new(8, 0, 100, 77);
        assert!(matches!(
            embed_text(&p, ""),
            Err(EncoderError::InvalidArgument(_))
        ));
    }

    #[test]
    fn non_finite_output_is_caught() {
        assert!(matches!(
            embed_text(&Broken, "x"),
            Err(EncoderError::Malformed(_))
        ));
    }

    #[test]
    fn from_config_uses_file_providers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.dmrc");
        let cache = EmbeddingCache::open(&path, 16).unwrap();
        cache.put(&text_key("clip-l14", "cup"), &[0.5; 16]).unwrap();
        cache.save().unwrap();
        let mut config = Config::tiny();
        config.providers.text = ProviderSpec::File {
            path,
            tag: "clip-l14".into(),
        };
        let p = Providers::from_config(&config).unwrap();
        assert_eq!(p.text.tag(), "clip-l14");
        assert_eq!(embed_text(p.text.as_ref(), "cup").unwrap(), vec![0.5; 16]);
    }

    #[test]
    fn overlay_keeps_dimensions() {
        let img = RgbImage::filled(7, 5, [100, 20, 200]).unwrap();
        let out = overlay_for(&SyntheticSegmenter::new(32), &img).unwrap();
        assert_eq!((out.width(), out.height()), (7, 5));
    }
}
