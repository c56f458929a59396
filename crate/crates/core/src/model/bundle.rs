//! Frozen text and image features consumed by the two towers.

use super::tensor::Matrix;
use super::ModelError;
use crate::config::Config;
use crate::encoders::{
    embed_image, embed_text, overlay_for, ImageEncoder, RgbImage, SegmentationProvider, TextEncoder,
};
use crate::types::{InstructionRecord, ModeToken};

/// Text-side features for one instruction in one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureBundle {
    /// Mode-prefixed instruction embedding.
    pub l_txt: Vec<f64>,
    /// Paraphrase embedding.
    pub l_prime_txt: Vec<f64>,
    /// Selected-phrase embedding.
    pub l_p: Vec<f64>,
    /// Noun-phrase embeddings, zero rows where `np_mask` is false.
    pub l_np: Matrix,
    pub np_mask: Vec<bool>,
}

impl TextFeatureBundle {
    pub fn dim(&self) -> usize {
        self.l_p.len()
    }

    pub fn noun_phrase_count(&self) -> usize {
        self.np_mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let d = self.dim();
        if self.l_txt.len() != d || self.l_prime_txt.len() != d || self.l_np.cols() != d {
            return Err(ModelError::Config(format!(
                "bundle widths disagree: l_p {d}, l_txt {}, l_prime_txt {}, l_np {}",
                self.l_txt.len(),
                self.l_prime_txt.len(),
                self.l_np.cols()
            )));
        }
        if self.np_mask.len() != self.l_np.rows() {
            return Err(ModelError::Config(format!(
                "mask has {} entries for {} noun-phrase rows",
                self.np_mask.len(),
                self.l_np.rows()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.l_txt)
            || !finite(&self.l_prime_txt)
            || !finite(&self.l_p)
            || !self.l_np.is_finite()
        {
            return Err(ModelError::Degenerate(
                "bundle has non-finite entries".into(),
            ));
        }
        for (r, valid) in self.np_mask.iter().enumerate() {
            if !valid && self.l_np.row(r).iter().any(|x| *x != 0.0) {
                return Err(ModelError::Config(format!(
                    "masked noun-phrase row {r} is not zero"
                )));
            }
        }
        Ok(())
    }
}

fn to_f64(v: Vec<f32>) -> Vec<f64> {
    v.into_iter().map(f64::from).collect()
}

/// The text each field of a bundle is embedded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleTexts {
    pub instruction: String,
    pub paraphrase: String,
    pub phrase: String,
    pub noun_phrases: Vec<String>,
}

/// Chooses the strings behind each bundle field.
///
/// With mode switching on, the instruction gets the mode literal as a prefix
/// and the phrase is the mode's phrase. With it off, both modes share the
/// unprefixed instruction and the two phrases joined together.
pub fn bundle_texts(
    mode: ModeToken,
    instruction: &InstructionRecord,
    config: &Config,
) -> Result<BundleTexts, ModelError> {
    let missing = |field: &str| {
        ModelError::Precondition(format!("instruction {} has no {field}", instruction.id))
    };
    let paraphrase = instruction
        .paraphrase
        .clone()
        .ok_or_else(|| missing("paraphrase"))?;
    let target = instruction
        .target_phrase
        .as_deref()
        .ok_or_else(|| missing("target_phrase"))?;
    let receptacle = instruction
        .receptacle_phrase
        .as_deref()
        .ok_or_else(|| missing("receptacle_phrase"))?;
    let (text, phrase) = if config.mode_switching {
        let phrase = match mode {
            ModeToken::Target => target,
            ModeToken::Receptacle => receptacle,
        };
        (
            format!("{} {}", mode.literal(), instruction.raw_text),
            phrase.to_string(),
        )
    } else {
        (
            instruction.raw_text.clone(),
            format!("{target} {receptacle}"),
        )
    };
    Ok(BundleTexts {
        instruction: text,
        paraphrase,
        phrase,
        noun_phrases: instruction
            .noun_phrases
            .iter()
            .take(config.max_noun_phrases)
            .cloned()
            .collect(),
    })
}

pub fn build_text_bundle(
    mode: ModeToken,
    instruction: &InstructionRecord,
    provider: &dyn TextEncoder,
    config: &Config,
) -> Result<TextFeatureBundle, ModelError> {
    let texts = bundle_texts(mode, instruction, config)?;
    let d = provider.dim();
    let mut l_np = Matrix::zeros(config.max_noun_phrases, d);
    let mut np_mask = vec![false; config.max_noun_phrases];
    for (r, np) in texts.noun_phrases.iter().enumerate() {
        let v = to_f64(embed_text(provider, np)?);
        l_np.row_mut(r).copy_from_slice(&v);
        np_mask[r] = true;
    }
    let bundle = TextFeatureBundle {
        l_txt: to_f64(embed_text(provider, &texts.instruction)?),
        l_prime_txt: to_f64(embed_text(provider, &texts.paraphrase)?),
        l_p: to_f64(embed_text(provider, &texts.phrase)?),
        l_np,
        np_mask,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Image-side features: the raw image and its segmentation overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub v_img: Vec<f64>,
    pub v_sar: Vec<f64>,
}

pub fn build_image_features(
    image: &RgbImage,
    encoder: &dyn ImageEncoder,
    segmenter: &dyn SegmentationProvider,
) -> Result<ImageFeatures, ModelError> {
    let overlay = overlay_for(segmenter, image)?;
    Ok(ImageFeatures {
        v_img: to_f64(embed_image(encoder, image)?),
        v_sar: to_f64(embed_image(encoder, &overlay)?),
    })
}
