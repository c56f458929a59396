//! Deterministic stand-ins for the pretrained text, image and segmentation
//! backbones.
//!
//! The text provider is a bag of hash-seeded token vectors plus a smaller
//! whole-string component, so related phrases share direction and distinct
//! strings never collide. The image provider is a fixed seeded random
//! projection of a 16×16 box-downsampled image. Both are linear enough that
//! a small model can learn to align them.

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::image::{Mask, RgbImage};
use super::{EncoderError, ImageEncoder, SegmentationProvider, TextEncoder};

/// Side of the downsampled grid the image provider projects from.
pub const DIGEST_SIDE: u32 = 16;
const DIGEST_LEN: usize = (DIGEST_SIDE * DIGEST_SIDE * 3) as usize;
/// Weight of the whole-string component relative to one token.
const STRING_WEIGHT: f64 = 0.25;

pub(crate) fn seeded_rng(seed: u64, domain: &str, key: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(key);
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

static TEXT_TOKEN_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"<[a-z]+>|[a-z0-9]+(?:'[a-z0-9]+)*").unwrap());

/// Lowercases and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder {
    dim: usize,
    seed: u64,
    vocab_size: usize,
    max_tokens: usize,
}

impl SyntheticTextEncoder {
    pub const TAG: &'static str = "synthetic-text";

    pub fn new(dim: usize, seed: u64, vocab_size: usize, max_tokens: usize) -> Self {
        Self {
            dim,
            seed,
            vocab_size: vocab_size.max(1),
            max_tokens: max_tokens.max(1),
        }
    }

    fn bucket(&self, token: &str) -> u64 {
        let d = Sha256::digest([&self.seed.to_le_bytes()[..], token.as_bytes()].concat());
        u64::from_le_bytes(d[..8].try_into().unwrap()) % self.vocab_size as u64
    }
}

impl TextEncoder for SyntheticTextEncoder {
    fn tag(&self) -> &str {
        Self::TAG
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EncoderError> {
        let normalized = normalize_text(text);
        let mut acc = vec![0f64; self.dim];
        for m in TEXT_TOKEN_RE.find_iter(&normalized).take(self.max_tokens) {
            let bucket = self.bucket(m.as_str());
            let v = gaussian(
                &mut seeded_rng(self.seed, "token", &bucket.to_le_bytes()),
                self.dim,
            );
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        let whole = gaussian(
            &mut seeded_rng(self.seed, "string", normalized.as_bytes()),
            self.dim,
        );
        acc.iter_mut()
            .zip(whole)
            .for_each(|(a, x)| *a += STRING_WEIGHT * x);
        let norm = acc
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        Ok(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticImageEncoder {
    dim: usize,
    projection: Vec<f64>,
}

impl SyntheticImageEncoder {
    pub const TAG: &'static str = "synthetic-image";

    pub fn new(dim: usize, seed: u64) -> Self {
        let scale = 1.0 / (DIGEST_LEN as f64).sqrt();
        let mut rng = seeded_rng(seed, "image-projection", &(dim as u64).to_le_bytes());
        let projection = gaussian(&mut rng, dim * DIGEST_LEN)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Self { dim, projection }
    }
}

impl ImageEncoder for SyntheticImageEncoder {
    fn tag(&self) -> &str {
        Self::TAG
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &RgbImage) -> Result<Vec<f32>, EncoderError> {
        let digest = image.downsample(DIGEST_SIDE);
        Ok(self
            .projection
            .chunks_exact(DIGEST_LEN)
            .map(|row| row.iter().zip(&digest).map(|(p, x)| p * x).sum::<f64>() as f32)
            .collect())
    }
}

/// Splits an image into brightness bands, one mask per non-empty band.
#[derive(Debug, Clone)]
pub struct SyntheticSegmenter {
    max_masks: usize,
}

impl SyntheticSegmenter {
    pub const TAG: &'static str = "synthetic-seg";
    const BANDS: usize = 4;

    pub fn new(max_masks: usize) -> Self {
        Self { max_masks }
    }
}

impl SegmentationProvider for SyntheticSegmenter {
    fn tag(&self) -> &str {
        Self::TAG
    }

    fn max_masks(&self) -> usize {
        self.max_masks
    }

    fn segment(&self, image: &RgbImage) -> Result<Vec<Mask>, EncoderError> {
        let band = |x: u32, y: u32| {
            let p = image.pixel(x, y);
            let mean = (p[0] as usize + p[1] as usize + p[2] as usize) / 3;
            mean * Self::BANDS / 256
        };
        let masks = (0..Self::BANDS)
            .map(|b| Mask::from_fn(image.width(), image.height(), |x, y| band(x, y) == b))
            .filter(|m| m.area() > 0)
            .collect();
        Ok(super::cap_masks(masks, self.max_masks))
    }
}
