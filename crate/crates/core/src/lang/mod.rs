//! Language side of the pipeline: paraphrasing into "Carry X to Y.",
//! target/receptacle phrase identification and noun-phrase extraction.
//!
//! Every operation accepts an optional [`LlmClient`]. When it is absent, fails,
//! or answers in the wrong shape, a rule-based fallback produces the result, so
//! the pipeline runs fully offline.

mod chunker;
mod llm;
mod rules;
mod words;

use std::sync::Arc;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunker::{extract_noun_phrases, extract_noun_phrases_with, Chunker, NounPhraseParser};
pub use llm::{HttpLlmClient, LlmClient, LlmConfig, LlmError, PromptTemplates};

use crate::types::{InstructionRecord, ModeToken};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LangError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot identify target and receptacle phrases in {text:?}")]
    Extraction { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseSource {
    Llm,
    RuleBased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhrasePair {
    pub target_phrase: String,
    pub receptacle_phrase: String,
    pub source: PhraseSource,
}

impl PhrasePair {
    /// The phrase the given mode attends to.
    pub fn select(&self, mode: ModeToken) -> &str {
        match mode {
            ModeToken::Target => &self.target_phrase,
            ModeToken::Receptacle => &self.receptacle_phrase,
        }
    }
}

pub fn select_phrase(pair: &PhrasePair, mode: ModeToken) -> &str {
    pair.select(mode)
}

static CANONICAL_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^Carry\s+\S.*\s+to\s+\S.*\.$").unwrap());

/// True for sentences of the form "Carry … to ….".
pub fn is_canonical(sentence: &str) -> bool {
    CANONICAL_RE.is_match(sentence)
}

fn comparable(text: &str) -> String {
    text.trim()
        .trim_end_matches(['.', '?', '!'])
        .trim()
        .to_lowercase()
}

fn pair_is_valid(target: &str, receptacle: &str, instruction: &str) -> bool {
    let whole = comparable(instruction);
    !target.trim().is_empty()
        && !receptacle.trim().is_empty()
        && comparable(target) != whole
        && comparable(receptacle) != whole
}

/// Pulls `{"target": …, "receptacle": …}` out of an LLM answer, tolerating
/// surrounding prose or code fences.
fn parse_phrase_answer(answer: &str) -> Option<(String, String)> {
    let start = answer.find('{')?;
    let end = answer.rfind('}')?;
    let value: serde_json::Value = serde_json::from_str(answer.get(start..=end)?).ok()?;
    let target = value.get("target")?.as_str()?.trim().to_string();
    let receptacle = value.get("receptacle")?.as_str()?.trim().to_string();
    Some((target, receptacle))
}

/// Language processing with an optional LLM and configurable noun-phrase parser.
#[derive(Clone)]
pub struct LangPipeline {
    client: Option<Arc<dyn LlmClient>>,
    templates: PromptTemplates,
    parser: Arc<dyn NounPhraseParser>,
}

impl Default for LangPipeline {
    fn default() -> Self {
        Self::offline()
    }
}

impl LangPipeline {
    pub fn offline() -> Self {
        Self {
            client: None,
            templates: PromptTemplates::default(),
            parser: Arc::new(Chunker),
        }
    }

    pub fn with_client(client: Arc<dyn LlmClient>) -> Self {
        Self {
            client: Some(client),
            ..Self::offline()
        }
    }

    pub fn templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn parser(mut self, parser: Arc<dyn NounPhraseParser>) -> Self {
        self.parser = parser;
        self
    }

    fn ask(&self, template: &str, text: &str) -> Option<String> {
        let client = self.client.as_ref()?;
        match client.complete(&PromptTemplates::render(template, text)) {
            Ok(answer) => Some(answer),
            Err(e) => {
                log::debug!("llm unavailable, using rules: {e}");
                None
            }
        }
    }

    /// Rewrites an instruction as "Carry <target> to <receptacle>.".
    ///
    /// Falls back to the rewrite rules when the LLM is absent, fails, or
    /// answers off-pattern. Inputs the rules cannot parse are returned cleaned
    /// of filler but otherwise unchanged.
    pub fn paraphrase(&self, raw_text: &str) -> Result<String, LangError> {
        if raw_text.trim().is_empty() {
            return Err(LangError::InvalidArgument("empty instruction".into()));
        }
        if let Some(answer) = self.ask(&self.templates.paraphrase, raw_text) {
            let answer = answer.trim().trim_matches('"').to_string();
            if is_canonical(&answer) {
                return Ok(answer);
            }
            log::debug!("discarding off-pattern paraphrase {answer:?}");
        }
        Ok(match rules::rule_split(raw_text) {
            Some((target, receptacle)) => rules::canonical_form(&target, &receptacle),
            None => rules::cleaned(raw_text),
        })
    }

    /// Identifies the target and receptacle phrases of `text`.
    pub fn identify_phrases(&self, text: &str) -> Result<PhrasePair, LangError> {
        if text.trim().is_empty() {
            return Err(LangError::InvalidArgument("empty instruction".into()));
        }
        if let Some(answer) = self.ask(&self.templates.phrases, text) {
            match parse_phrase_answer(&answer) {
                Some((t, r)) if pair_is_valid(&t, &r, text) => {
                    return Ok(PhrasePair {
                        target_phrase: t,
                        receptacle_phrase: r,
                        source: PhraseSource::Llm,
                    })
                }
                _ => log::debug!("discarding malformed phrase answer {answer:?}"),
            }
        }
        let paraphrase = self.paraphrase(text)?;
        match rules::rule_split(&paraphrase) {
            Some((t, r)) if pair_is_valid(&t, &r, text) => Ok(PhrasePair {
                target_phrase: t,
                receptacle_phrase: r,
                source: PhraseSource::RuleBased,
            }),
            _ => Err(LangError::Extraction {
                text: text.to_string(),
            }),
        }
    }

    pub fn noun_phrases(&self, raw_text: &str, limit: usize) -> Vec<String> {
        extract_noun_phrases_with(self.parser.as_ref(), raw_text, limit)
    }

    /// Runs the full language pipeline on one instruction. Phrases are taken
    /// from the paraphrase, noun phrases from the raw text.
    pub fn process(
        &self,
        id: &str,
        raw_text: &str,
        max_noun_phrases: usize,
    ) -> Result<InstructionRecord, LangError> {
        let paraphrase = self.paraphrase(raw_text)?;
        let pair = self.identify_phrases(&paraphrase)?;
        Ok(InstructionRecord {
            id: id.to_string(),
            raw_text: raw_text.to_string(),
            paraphrase: Some(paraphrase),
            target_phrase: Some(pair.target_phrase),
            receptacle_phrase: Some(pair.receptacle_phrase),
            noun_phrases: self.noun_phrases(raw_text, max_noun_phrases),
        })
    }
}

/// [`LangPipeline::paraphrase`] with an optional client.
pub fn paraphrase(raw_text: &str, client: Option<Arc<dyn LlmClient>>) -> Result<String, LangError> {
    pipeline_for(client).paraphrase(raw_text)
}

/// [`LangPipeline::identify_phrases`] with an optional client.
pub fn identify_phrases(
    text: &str,
    client: Option<Arc<dyn LlmClient>>,
) -> Result<PhrasePair, LangError> {
    pipeline_for(client).identify_phrases(text)
}

fn pipeline_for(client: Option<Arc<dyn LlmClient>>) -> LangPipeline {
    match client {
        Some(c) => LangPipeline::with_client(c),
        None => LangPipeline::offline(),
    }
}
