//! Dataset bundles on disk, their validation, environment-level splitting and
//! a synthetic generator with known ground truth.

mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use split::{split_dataset, SplitRatios};
pub use synthetic::{
    generate_synthetic, word_signature, SyntheticSpec, FURNITURE_WORDS, OBJECT_WORDS,
};

use crate::encoders::{EncoderError, RgbImage};
use crate::types::{parse_error, FetchCarrySample, ImageRecord, RecordError};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}:{line}: {source}")]
    Parse {
        file: String,
        line: usize,
        source: RecordError,
    },
    #[error("environment {environment} appears in splits {first} and {second}")]
    Leakage {
        environment: String,
        first: String,
        second: String,
    },
    #[error("dangling ids: {0:?}")]
    Dangling(Vec<String>),
    #[error("duplicate id {0}")]
    Duplicate(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("image {id}: {source}")]
    Image { id: String, source: EncoderError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sample ids per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test_hm3d: Vec<String>,
    #[serde(default)]
    pub test_mp3d: Vec<String>,
}

impl Splits {
    pub const NAMES: [&'static str; 4] = ["train", "val", "test_hm3d", "test_mp3d"];

    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test_hm3d" => Some(&self.test_hm3d),
            "test_mp3d" => Some(&self.test_mp3d),
            _ => None,
        }
    }

    pub fn named(&self) -> [(&'static str, &[String]); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test_hm3d", &self.test_hm3d),
            ("test_mp3d", &self.test_mp3d),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub images: usize,
    pub environments: usize,
    /// Distinct lowercase words over all instructions.
    pub vocab_size: usize,
    /// Mean whitespace-separated word count of the instructions.
    pub mean_sentence_length: f64,
}

impl DatasetStats {
    pub fn compute(samples: &[FetchCarrySample], images: &[ImageRecord]) -> Self {
        let environments: BTreeSet<&str> = images
            .iter()
            .map(|i| i.environment_id.as_str())
            .chain(samples.iter().map(|s| s.environment_id.as_str()))
            .collect();
        let mut vocab = BTreeSet::new();
        let mut words = 0usize;
        for s in samples {
            words += s.raw_text.split_whitespace().count();
            for w in s
                .raw_text
                .split(|c: char| !c.is_alphanumeric() && c != '\'')
            {
                if !w.is_empty() {
                    vocab.insert(w.to_lowercase());
                }
            }
        }
        Self {
            samples: samples.len(),
            images: images.len(),
            environments: environments.len(),
            vocab_size: vocab.len(),
            mean_sentence_length: if samples.is_empty() {
                0.0
            } else {
                words as f64 / samples.len() as f64
            },
        }
    }
}

/// Samples, image manifest and splits, validated together.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub samples: Vec<FetchCarrySample>,
    pub images: Vec<ImageRecord>,
    pub splits: Splits,
    pub stats: DatasetStats,
    /// Directory image paths resolve against.
    pub root: Option<PathBuf>,
    /// Pixels held in memory, keyed by image id; consulted before `root`.
    pub inline_images: BTreeMap<String, RgbImage>,
}

impl PartialEq for DatasetBundle {
    /// Compares records, splits and stats; where pixels live is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.images == other.images
            && self.splits == other.splits
            && self.stats == other.stats
    }
}

impl DatasetBundle {
    /// Validates the records and computes stats.
    pub fn new(
        samples: Vec<FetchCarrySample>,
        images: Vec<ImageRecord>,
        splits: Splits,
    ) -> Result<Self, DataError> {
        let stats = DatasetStats::compute(&samples, &images);
        let bundle = Self {
            samples,
            images,
            splits,
            stats,
            root: None,
            inline_images: BTreeMap::new(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut image_env = BTreeMap::new();
        for img in &self.images {
            img.validate()
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            if image_env
                .insert(img.id.as_str(), img.environment_id.as_str())
                .is_some()
            {
                return Err(DataError::Duplicate(img.id.clone()));
            }
        }
        let mut sample_env = BTreeMap::new();
        let mut dangling = Vec::new();
        for s in &self.samples {
            s.validate()
                .map_err(|e| DataError::Invalid(e.to_string()))?;
            if sample_env
                .insert(s.instruction_id.as_str(), s.environment_id.as_str())
                .is_some()
            {
                return Err(DataError::Duplicate(s.instruction_id.clone()));
            }
            for id in [&s.target_image_id, &s.receptacle_image_id] {
                match image_env.get(id.as_str()) {
                    None => dangling.push(id.clone()),
                    Some(env) if *env != s.environment_id => {
                        return Err(DataError::Invalid(format!(
                            "sample {} in {} refers to image {id} of {env}",
                            s.instruction_id, s.environment_id
                        )))
                    }
                    Some(_) => {}
                }
            }
        }

        let mut env_split: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (name, ids) in self.splits.named() {
            for id in ids {
                let Some(env) = sample_env.get(id.as_str()) else {
                    dangling.push(id.clone());
                    continue;
                };
                if !seen.insert(id.as_str()) {
                    return Err(DataError::Invalid(format!(
                        "sample {id} listed in more than one split slot"
                    )));
                }
                match env_split.get(env) {
                    Some(first) if *first != name => {
                        return Err(DataError::Leakage {
                            environment: env.to_string(),
                            first: first.to_string(),
                            second: name.to_string(),
                        })
                    }
                    _ => {
                        env_split.insert(env, name);
                    }
                }
            }
        }
        if !dangling.is_empty() {
            dangling.sort();
            dangling.dedup();
            return Err(DataError::Dangling(dangling));
        }
        Ok(())
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Images of one environment, in manifest order.
    pub fn environment_images(&self, environment_id: &str) -> Vec<&ImageRecord> {
        self.images
            .iter()
            .filter(|i| i.environment_id == environment_id)
            .collect()
    }

    pub fn environments(&self) -> BTreeSet<&str> {
        self.images
            .iter()
            .map(|i| i.environment_id.as_str())
            .collect()
    }

    /// Samples of a named split, in split-file order.
    pub fn split_samples(&self, name: &str) -> Result<Vec<&FetchCarrySample>, DataError> {
        let ids = self.splits.get(name).ok_or_else(|| {
            DataError::Invalid(format!(
                "unknown split {name:?}; expected one of {:?}",
                Splits::NAMES
            ))
        })?;
        let by_id: BTreeMap<&str, &FetchCarrySample> = self
            .samples
            .iter()
            .map(|s| (s.instruction_id.as_str(), s))
            .collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::Dangling(vec![id.clone()]))
            })
            .collect()
    }

    fn read_pixels(
        &self,
        id: &str,
        rel: &str,
        record: &ImageRecord,
    ) -> Result<RgbImage, DataError> {
        let root = self.root.as_ref().ok_or_else(|| {
            DataError::Invalid(format!(
                "image {id} has no pixels in memory and the bundle has no root"
            ))
        })?;
        let img = RgbImage::read_ppm(&root.join(rel)).map_err(|source| DataError::Image {
            id: id.to_string(),
            source,
        })?;
        if (img.width(), img.height()) != (record.width, record.height) {
            return Err(DataError::Invalid(format!(
                "image {id} is {}x{} on disk, manifest says {}x{}",
                img.width(),
                img.height(),
                record.width,
                record.height
            )));
        }
        Ok(img)
    }

    pub fn load_image(&self, id: &str) -> Result<RgbImage, DataError> {
        if let Some(img) = self.inline_images.get(id) {
            return Ok(img.clone());
        }
        let record = self
            .image(id)
            .ok_or_else(|| DataError::Dangling(vec![id.to_string()]))?;
        self.read_pixels(id, &record.path, record)
    }

    /// The precomputed overlay, when the manifest names one.
    pub fn load_overlay(&self, id: &str) -> Result<Option<RgbImage>, DataError> {
        let record = self
            .image(id)
            .ok_or_else(|| DataError::Dangling(vec![id.to_string()]))?;
        match &record.overlay_path {
            Some(rel) => self.read_pixels(id, rel, record).map(Some),
            None => Ok(None),
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    check: impl Fn(&T) -> Result<(), RecordError>,
) -> Result<Vec<T>, DataError> {
    let file = fs::File::open(path).map_err(io_error(path))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |source| DataError::Parse {
            file: name.clone(),
            line: i + 1,
            source,
        };
        let record: T = serde_json::from_str(&line).map_err(|e| parse(parse_error(&e)))?;
        check(&record).map_err(parse)?;
        out.push(record);
    }
    Ok(out)
}

/// Reads and validates `samples.jsonl`, `images.jsonl` and `splits.json`.
pub fn load_dataset(path: &Path) -> Result<DatasetBundle, DataError> {
    let samples = read_jsonl(&path.join(SAMPLES_FILE), FetchCarrySample::validate)?;
    let images = read_jsonl(&path.join(IMAGES_FILE), ImageRecord::validate)?;
    let splits_path = path.join(SPLITS_FILE);
    let text = fs::read_to_string(&splits_path).map_err(io_error(&splits_path))?;
    let splits: Splits = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        file: SPLITS_FILE.into(),
        line: e.line(),
        source: parse_error(&e),
    })?;
    let mut bundle = DatasetBundle::new(samples, images, splits)?;
    bundle.root = Some(path.to_path_buf());
    Ok(bundle)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_error(path))?;
    f.write_all(bytes).map_err(io_error(path))
}

/// Writes the three metadata files and every in-memory image.
pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<(), DataError> {
    fs::create_dir_all(path).map_err(io_error(path))?;
    let mut samples = String::new();
    for s in &bundle.samples {
        samples.push_str(&serde_json::to_string(s).expect("sample serializes"));
        samples.push('\n');
    }
    write_file(&path.join(SAMPLES_FILE), samples.as_bytes())?;
    let mut images = String::new();
    for i in &bundle.images {
        images.push_str(&serde_json::to_string(i).expect("image record serializes"));
        images.push('\n');
    }
    write_file(&path.join(IMAGES_FILE), images.as_bytes())?;
    let mut splits = serde_json::to_string_pretty(&bundle.splits).expect("splits serialize");
    splits.push('\n');
    write_file(&path.join(SPLITS_FILE), splits.as_bytes())?;

    for record in &bundle.images {
        let img = bundle.load_image(&record.id)?;
        let target = path.join(&record.path);
        if let Some(dir) = target.parent() {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
        write_file(&target, &img.to_ppm())?;
        if let (Some(rel), Some(overlay)) = (&record.overlay_path, bundle.load_overlay(&record.id)?)
        {
            write_file(&path.join(rel), &overlay.to_ppm())?;
        }
    }
    Ok(())
}
