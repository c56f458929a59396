//! Shared data model: mode tokens, records, ranked lists and metric reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Switches the text embedding space between the object to fetch and the
/// furniture to place it on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeToken {
    #[serde(alias = "<target>")]
    Target,
    #[serde(alias = "<receptacle>")]
    Receptacle,
}

impl ModeToken {
    pub const ALL: [ModeToken; 2] = [ModeToken::Target, ModeToken::Receptacle];

    /// The literal prefixed to the instruction text.
    pub fn literal(self) -> &'static str {
        match self {
            ModeToken::Target => "<target>",
            ModeToken::Receptacle => "<receptacle>",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeToken::Target => "target",
            ModeToken::Receptacle => "receptacle",
        }
    }
}

impl fmt::Display for ModeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.literal())
    }
}

impl std::str::FromStr for ModeToken {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target" | "<target>" => Ok(ModeToken::Target),
            "receptacle" | "<receptacle>" => Ok(ModeToken::Receptacle),
            other => Err(RecordError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// An instruction after language processing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receptacle_phrase: Option<String>,
    #[serde(default)]
    pub noun_phrases: Vec<String>,
}

impl InstructionRecord {
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            raw_text: raw_text.into(),
            paraphrase: None,
            target_phrase: None,
            receptacle_phrase: None,
            noun_phrases: Vec::new(),
        }
    }

    pub fn validate(&self, max_noun_phrases: usize) -> Result<(), RecordError> {
        if self.raw_text.trim().is_empty() {
            return Err(RecordError::Invalid(format!(
                "instruction {} has empty raw_text",
                self.id
            )));
        }
        for (name, phrase) in [
            ("target_phrase", &self.target_phrase),
            ("receptacle_phrase", &self.receptacle_phrase),
        ] {
            if matches!(phrase, Some(p) if p.trim().is_empty()) {
                return Err(RecordError::Invalid(format!(
                    "instruction {}: empty {name}",
                    self.id
                )));
            }
        }
        if self.noun_phrases.len() > max_noun_phrases {
            return Err(RecordError::Invalid(format!(
                "instruction {}: {} noun phrases exceed limit {max_noun_phrases}",
                self.id,
                self.noun_phrases.len()
            )));
        }
        Ok(())
    }
}

/// One row of the image manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(rename = "image_id")]
    pub id: String,
    pub environment_id: String,
    pub width: u32,
    pub height: u32,
    /// RGB pixel file, relative to the dataset root.
    pub path: String,
    /// Segmentation overlay with the same dimensions, when precomputed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay_path: Option<String>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.width == 0 || self.height == 0 {
            return Err(RecordError::Invalid(format!(
                "image {} has zero dimension {}x{}",
                self.id, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// The dataset unit: an instruction with the images it refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FetchCarrySample {
    pub instruction_id: String,
    pub raw_text: String,
    pub target_image_id: String,
    pub receptacle_image_id: String,
    pub environment_id: String,
}

impl FetchCarrySample {
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.raw_text.trim().is_empty() {
            return Err(RecordError::Invalid(format!(
                "sample {}: empty raw_text",
                self.instruction_id
            )));
        }
        if self.target_image_id == self.receptacle_image_id {
            return Err(RecordError::Invalid(format!(
                "sample {}: target_image_id equals receptacle_image_id ({})",
                self.instruction_id, self.target_image_id
            )));
        }
        Ok(())
    }

    pub fn positive_for(&self, mode: ModeToken) -> &str {
        match mode {
            ModeToken::Target => &self.target_image_id,
            ModeToken::Receptacle => &self.receptacle_image_id,
        }
    }
}

/// Encodes a sample as one JSONL line.
pub fn serialize_sample(sample: &FetchCarrySample) -> Result<String, RecordError> {
    sample.validate()?;
    Ok(serde_json::to_string(sample).expect("sample serializes"))
}

/// Decodes one JSONL line; the error names the offending field.
pub fn deserialize_sample(line: &str) -> Result<FetchCarrySample, RecordError> {
    let sample: FetchCarrySample = serde_json::from_str(line).map_err(|e| parse_error(&e))?;
    sample.validate()?;
    Ok(sample)
}

pub(crate) fn parse_error(e: &serde_json::Error) -> RecordError {
    let message = e.to_string();
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<line>".to_string());
    RecordError::Parse { field, message }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub image_id: String,
    pub score: f64,
}

/// A per-mode ordering of candidate images, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub mode: ModeToken,
    pub entries: Vec<RankedEntry>,
    pub candidate_count: usize,
}

impl RankedList {
    /// Sorts by descending score, breaking ties by ascending image id.
    pub fn from_scores(mode: ModeToken, scores: Vec<(String, f64)>) -> Self {
        let mut entries: Vec<RankedEntry> = scores
            .into_iter()
            .map(|(image_id, score)| RankedEntry { image_id, score })
            .collect();
        entries.sort_by(compare_entries);
        let candidate_count = entries.len();
        Self {
            mode,
            entries,
            candidate_count,
        }
    }

    /// One-based rank of `image_id`.
    pub fn rank_of(&self, image_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.image_id == image_id)
            .map(|p| p + 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.image_id.as_str())
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            mode: self.mode,
            entries: self.entries.iter().take(k).cloned().collect(),
            candidate_count: self.candidate_count,
        }
    }
}

fn compare_entries(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Aggregate retrieval metrics for one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub query_count: usize,
    pub mrr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub per_query_best_rank: Vec<usize>,
}
