//! Precomputed frozen features for a set of samples: processed instructions,
//! per-mode text bundles and per-image raw/overlay embeddings.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::Config;
use crate::data::{DataError, DatasetBundle};
use crate::encoders::{
    embed_image, embed_text, image_key, overlay_for, text_key, CacheError, EmbeddingCache,
    EncoderError, Providers,
};
use crate::lang::{LangError, LangPipeline};
use crate::model::{build_text_bundle, bundle_texts, ImageFeatures, ModelError, TextFeatureBundle};
use crate::types::{FetchCarrySample, InstructionRecord, ModeToken};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("instruction {id}: {source}")]
    Lang { id: String, source: LangError },
    #[error("instruction {id}: {source}")]
    Text { id: String, source: ModelError },
    #[error("image {id}: {source}")]
    Image { id: String, source: ModelError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no features for {0}")]
    Missing(String),
    #[error("{key}: {source}")]
    Encoder { key: String, source: EncoderError },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Raw and overlay embeddings of one dataset image. A precomputed overlay
/// from the manifest wins over running the segmenter.
pub fn dataset_image_features(
    dataset: &DatasetBundle,
    id: &str,
    providers: &Providers,
) -> Result<ImageFeatures, FeatureError> {
    let wrap = |source: ModelError| FeatureError::Image {
        id: id.to_string(),
        source,
    };
    let image = dataset.load_image(id)?;
    let overlay = match dataset.load_overlay(id)? {
        Some(o) => o,
        None => overlay_for(providers.segmentation.as_ref(), &image).map_err(|e| wrap(e.into()))?,
    };
    let to_f64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
    Ok(ImageFeatures {
        v_img: to_f64(embed_image(providers.image.as_ref(), &image).map_err(|e| wrap(e.into()))?),
        v_sar: to_f64(embed_image(providers.image.as_ref(), &overlay).map_err(|e| wrap(e.into()))?),
    })
}

#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    pub instructions: BTreeMap<String, InstructionRecord>,
    pub text: BTreeMap<(String, ModeToken), TextFeatureBundle>,
    pub images: BTreeMap<String, ImageFeatures>,
}

impl FeatureStore {
    /// Features for `samples` and for every image in their environments.
    pub fn build(
        dataset: &DatasetBundle,
        samples: &[&FetchCarrySample],
        lang: &LangPipeline,
        providers: &Providers,
        config: &Config,
    ) -> Result<Self, FeatureError> {
        let mut store = Self::default();
        store.extend(dataset, samples, lang, providers, config)?;
        Ok(store)
    }

    pub fn extend(
        &mut self,
        dataset: &DatasetBundle,
        samples: &[&FetchCarrySample],
        lang: &LangPipeline,
        providers: &Providers,
        config: &Config,
    ) -> Result<(), FeatureError> {
        let fresh: Vec<&FetchCarrySample> = samples
            .iter()
            .copied()
            .filter(|s| !self.instructions.contains_key(&s.instruction_id))
            .collect();
        let processed: Vec<(InstructionRecord, [TextFeatureBundle; 2])> = fresh
            .par_iter()
            .map(|s| {
                let id = s.instruction_id.clone();
                let record = lang
                    .process(&id, &s.raw_text, config.max_noun_phrases)
                    .map_err(|source| FeatureError::Lang {
                        id: id.clone(),
                        source,
                    })?;
                let bundle = |mode| {
                    build_text_bundle(mode, &record, providers.text.as_ref(), config).map_err(
                        |source| FeatureError::Text {
                            id: id.clone(),
                            source,
                        },
                    )
                };
                let bundles = [bundle(ModeToken::Target)?, bundle(ModeToken::Receptacle)?];
                Ok((record, bundles))
            })
            .collect::<Result<_, FeatureError>>()?;
        for (record, [t, r]) in processed {
            self.text.insert((record.id.clone(), ModeToken::Target), t);
            self.text
                .insert((record.id.clone(), ModeToken::Receptacle), r);
            self.instructions.insert(record.id.clone(), record);
        }

        let envs: BTreeSet<&str> = samples.iter().map(|s| s.environment_id.as_str()).collect();
        let ids: Vec<&str> = dataset
            .images
            .iter()
            .filter(|i| {
                envs.contains(i.environment_id.as_str()) && !self.images.contains_key(&i.id)
            })
            .map(|i| i.id.as_str())
            .collect();
        let computed: Vec<(String, ImageFeatures)> = ids
            .par_iter()
            .map(|id| {
                Ok((
                    id.to_string(),
                    dataset_image_features(dataset, id, providers)?,
                ))
            })
            .collect::<Result<_, FeatureError>>()?;
        self.images.extend(computed);
        Ok(())
    }

    pub fn bundle(
        &self,
        instruction_id: &str,
        mode: ModeToken,
    ) -> Result<&TextFeatureBundle, FeatureError> {
        self.text
            .get(&(instruction_id.to_string(), mode))
            .ok_or_else(|| FeatureError::Missing(format!("instruction {instruction_id} ({mode})")))
    }

    pub fn image(&self, image_id: &str) -> Result<&ImageFeatures, FeatureError> {
        self.images
            .get(image_id)
            .ok_or_else(|| FeatureError::Missing(format!("image {image_id}")))
    }
}

/// Embeds every text a model could request for `dataset`, under both the
/// mode-switching and the ablated bundle layouts, and stores the vectors in
/// `cache` keyed by `providers.text`'s tag. Returns the number of new entries.
pub fn precompute_text(
    dataset: &DatasetBundle,
    lang: &LangPipeline,
    providers: &Providers,
    config: &Config,
    cache: &EmbeddingCache,
) -> Result<usize, FeatureError> {
    let mut texts = BTreeSet::new();
    for s in &dataset.samples {
        let id = &s.instruction_id;
        let record = lang
            .process(id, &s.raw_text, config.max_noun_phrases)
            .map_err(|source| FeatureError::Lang {
                id: id.clone(),
                source,
            })?;
        for mode_switching in [true, false] {
            let config = Config {
                mode_switching,
                ..config.clone()
            };
            for mode in ModeToken::ALL {
                let t =
                    bundle_texts(mode, &record, &config).map_err(|source| FeatureError::Text {
                        id: id.clone(),
                        source,
                    })?;
                texts.extend([t.instruction, t.paraphrase, t.phrase]);
                texts.extend(t.noun_phrases);
            }
        }
    }
    let tag = providers.text.tag();
    let todo: Vec<(String, String)> = texts
        .into_iter()
        .map(|t| (text_key(tag, &t), t))
        .filter(|(k, _)| cache.get(k).is_none())
        .collect();
    let vectors: Vec<(String, Vec<f32>)> = todo
        .into_par_iter()
        .map(
            |(key, text)| match embed_text(providers.text.as_ref(), &text) {
                Ok(v) => Ok((key, v)),
                Err(source) => Err(FeatureError::Encoder { key: text, source }),
            },
        )
        .collect::<Result<_, _>>()?;
    for (key, v) in &vectors {
        cache.put(key, v)?;
    }
    Ok(vectors.len())
}

/// Embeds every dataset image and its overlay with `providers.image`.
/// Returns the number of new entries.
pub fn precompute_images(
    dataset: &DatasetBundle,
    providers: &Providers,
    cache: &EmbeddingCache,
) -> Result<usize, FeatureError> {
    let tag = providers.image.tag();
    let vectors: Vec<Vec<(String, Vec<f32>)>> = dataset
        .images
        .par_iter()
        .map(|record| {
            let image = dataset.load_image(&record.id)?;
            let overlay = match dataset.load_overlay(&record.id)? {
                Some(o) => o,
                None => overlay_for(providers.segmentation.as_ref(), &image).map_err(|source| {
                    FeatureError::Encoder {
                        key: record.id.clone(),
                        source,
                    }
                })?,
            };
            let mut out = Vec::with_capacity(2);
            for img in [image, overlay] {
                let key = image_key(tag, &img);
                if cache.get(&key).is_none() {
                    let v = embed_image(providers.image.as_ref(), &img).map_err(|source| {
                        FeatureError::Encoder {
                            key: record.id.clone(),
                            source,
                        }
                    })?;
                    out.push((key, v));
                }
            }
            Ok(out)
        })
        .collect::<Result<_, FeatureError>>()?;
    let mut added = BTreeSet::new();
    for (key, v) in vectors.iter().flatten() {
        if added.insert(key) {
            cache.put(key, v)?;
        }
    }
    Ok(added.len())
}
