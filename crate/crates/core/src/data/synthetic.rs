use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{split_dataset, DataError, DatasetBundle, SplitRatios, Splits};
use crate::encoders::{seeded_rng, RgbImage};
use crate::types::{FetchCarrySample, ImageRecord};

pub const OBJECT_WORDS: [&str; 16] = [
    "mug", "sponge", "bottle", "towel", "apple", "book", "remote", "cup", "bowl", "vase", "candle",
    "phone", "toy", "pillow", "hat", "clock",
];

pub const FURNITURE_WORDS: [&str; 16] = [
    "table",
    "shelf",
    "sofa",
    "bed",
    "desk",
    "chair",
    "cabinet",
    "counter",
    "dresser",
    "stool",
    "bench",
    "sink",
    "armchair",
    "nightstand",
    "bookcase",
    "ottoman",
];

/// Side of one signature cell in pixels.
const CELL: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub environments: usize,
    pub images_per_environment: usize,
    pub samples_per_environment: usize,
    pub object_lexicon: Vec<String>,
    pub furniture_lexicon: Vec<String>,
    /// Fraction of each environment's images that no sample refers to.
    pub distractor_rate: f64,
    /// Images are square with this side; a multiple of 8.
    pub image_side: u32,
    /// Per-pixel uniform noise amplitude.
    pub noise: u8,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            environments: 24,
            images_per_environment: 8,
            samples_per_environment: 8,
            object_lexicon: OBJECT_WORDS.iter().map(|s| s.to_string()).collect(),
            furniture_lexicon: FURNITURE_WORDS.iter().map(|s| s.to_string()).collect(),
            distractor_rate: 0.25,
            image_side: 32,
            noise: 8,
            split: SplitRatios {
                train: 0.7,
                val: 0.1,
                test_hm3d: 0.1,
                test_mp3d: 0.1,
            },
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn distractors_per_environment(&self) -> usize {
        (self.distractor_rate * self.images_per_environment as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Spec(m));
        if self.environments == 0 {
            return fail("environments must be positive".into());
        }
        if self.images_per_environment < 2 {
            return fail(format!(
                "images_per_environment {} < 2",
                self.images_per_environment
            ));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return fail(format!(
                "distractor_rate {} outside [0, 1)",
                self.distractor_rate
            ));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(2 * CELL) {
            return fail(format!(
                "image_side {} must be a positive multiple of {}",
                self.image_side,
                2 * CELL
            ));
        }
        for (name, lex) in [
            ("object_lexicon", &self.object_lexicon),
            ("furniture_lexicon", &self.furniture_lexicon),
        ] {
            if lex.len() < self.images_per_environment {
                return fail(format!(
                    "{name} has {} words, {} images per environment need that many",
                    lex.len(),
                    self.images_per_environment
                ));
            }
            let unique: BTreeSet<&String> = lex.iter().collect();
            if unique.len() != lex.len() {
                return fail(format!("{name} has duplicate words"));
            }
            if let Some(w) = lex
                .iter()
                .find(|w| w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()))
            {
                return fail(format!(
                    "{name} word {w:?} must be one lowercase ASCII word"
                ));
            }
        }
        let objects: BTreeSet<&String> = self.object_lexicon.iter().collect();
        if let Some(w) = self.furniture_lexicon.iter().find(|w| objects.contains(w)) {
            return fail(format!("word {w:?} is in both lexicons"));
        }
        let referenced = self.images_per_environment - self.distractors_per_environment();
        if referenced < 2 {
            return fail(format!(
                "only {referenced} non-distractor images per environment; need 2"
            ));
        }
        let pairs = referenced * (referenced - 1);
        if self.samples_per_environment == 0 || self.samples_per_environment > pairs {
            return fail(format!(
                "samples_per_environment {} must lie in 1..={pairs}",
                self.samples_per_environment
            ));
        }
        Ok(())
    }
}

/// The colour cells that represent `word` in one image half.
pub fn word_signature(word: &str, seed: u64, cells: usize) -> Vec<[u8; 3]> {
    let mut rng = seeded_rng(seed, "synthetic-word", word.as_bytes());
    (0..cells)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect()
}

fn render(spec: &SyntheticSpec, id: &str, object: &str, furniture: &str) -> RgbImage {
    let side = spec.image_side;
    let cols = side / CELL;
    let half_rows = side / 2 / CELL;
    let cells = (cols * half_rows) as usize;
    let top = word_signature(object, spec.seed, cells);
    let bottom = word_signature(furniture, spec.seed, cells);
    let mut noise = seeded_rng(spec.seed, "synthetic-noise", id.as_bytes());
    let amp = spec.noise as i16;
    let mut img = RgbImage::filled(side, side, [0, 0, 0]).expect("side is positive");
    for y in 0..side {
        for x in 0..side {
            let cy = y / CELL;
            let (sig, row) = if cy < half_rows {
                (&top, cy)
            } else {
                (&bottom, cy - half_rows)
            };
            let base = sig[(row * cols + x / CELL) as usize];
            let px = std::array::from_fn(|c| {
                let n = if amp > 0 {
                    noise.random_range(-amp..=amp)
                } else {
                    0
                };
                (base[c] as i16 + n).clamp(0, 255) as u8
            });
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// A seeded dataset whose images encode an (object, furniture) word pair:
/// the object's signature on the top half, the furniture's on the bottom.
///
/// Within an environment every word appears on exactly one image, so the
/// instruction "Pick up the X and put it on the Y." has one target image (the
/// one showing X) and a different receptacle image (the one showing Y).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle, DataError> {
    spec.validate()?;
    let n = spec.images_per_environment;
    let referenced = n - spec.distractors_per_environment();
    let mut samples = Vec::new();
    let mut images = Vec::new();
    let mut pixels = BTreeMap::new();
    let width = spec.environments.to_string().len().max(3);

    for e in 0..spec.environments {
        let env = format!("env{e:0width$}");
        let mut rng = seeded_rng(spec.seed, "synthetic-env", env.as_bytes());
        let mut objects: Vec<&String> = spec.object_lexicon.iter().collect();
        let mut furniture: Vec<&String> = spec.furniture_lexicon.iter().collect();
        objects.shuffle(&mut rng);
        furniture.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let live = &order[..referenced];

        let ids: Vec<String> = (0..n).map(|k| format!("{env}-img{k:02}")).collect();
        for k in 0..n {
            let img = render(spec, &ids[k], objects[k], furniture[k]);
            images.push(ImageRecord {
                id: ids[k].clone(),
                environment_id: env.clone(),
                width: img.width(),
                height: img.height(),
                path: format!("images/{}.ppm", ids[k]),
                overlay_path: None,
            });
            pixels.insert(ids[k].clone(), img);
        }

        let mut pairs: Vec<(usize, usize)> = live
            .iter()
            .flat_map(|&i| live.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
            .collect();
        pairs.sort_unstable();
        pairs.shuffle(&mut rng);
        for (s, &(t, r)) in pairs.iter().take(spec.samples_per_environment).enumerate() {
            samples.push(FetchCarrySample {
                instruction_id: format!("{env}-s{s:02}"),
                raw_text: format!(
                    "Pick up the {} and put it on the {}.",
                    objects[t], furniture[r]
                ),
                target_image_id: ids[t].clone(),
                receptacle_image_id: ids[r].clone(),
                environment_id: env.clone(),
            });
        }
    }

    let mut bundle = DatasetBundle::new(samples, images, Splits::default())?;
    bundle.inline_images = pixels;
    bundle.splits = split_dataset(&bundle, spec.split, spec.seed)?;
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::LangPipeline;

    #[test]
    fn every_lexicon_pair_parses_into_its_phrases() {
        let lang = LangPipeline::offline();
        for o in OBJECT_WORDS {
            for f in FURNITURE_WORDS {
                let r = lang
                    .process("i", &format!("Pick up the {o} and put it on the {f}."), 6)
                    .unwrap();
                assert_eq!(
                    r.target_phrase.as_deref(),
                    Some(format!("the {o}").as_str())
                );
                assert_eq!(
                    r.receptacle_phrase.as_deref(),
                    Some(format!("the {f}").as_str())
                );
            }
        }
    }

    #[test]
    fn spec_errors() {
        let small = SyntheticSpec {
            object_lexicon: vec!["a".into()],
            ..SyntheticSpec::default()
        };
        assert!(matches!(small.validate(), Err(DataError::Spec(_))));
        let overlap = SyntheticSpec {
            furniture_lexicon: OBJECT_WORDS.iter().map(|s| s.to_string()).collect(),
            ..SyntheticSpec::default()
        };
        assert!(overlap.validate().is_err());
        assert!(SyntheticSpec::default().validate().is_ok());
    }

    #[test]
    fn images_show_their_words() {
        let spec = SyntheticSpec {
            environments: 4,
            noise: 0,
            ..SyntheticSpec::default()
        };
        let bundle = generate_synthetic(&spec).unwrap();
        let s = &bundle.samples[0];
        let object = s.raw_text.split_whitespace().nth(3).unwrap();
        let img = &bundle.inline_images[&s.target_image_id];
        let sig = word_signature(object, spec.seed, 32);
        assert_eq!(img.pixel(0, 0), sig[0]);
        assert_eq!(img.pixel(31, 15), sig[31]);
    }
}
