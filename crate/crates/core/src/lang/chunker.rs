//! Finite-state noun-phrase chunker: `(determiner)? (adjective | noun)* noun`.

use super::words::{is_noun_like, tokenize, Token, ADJECTIVES, DETERMINERS};

/// Anything that can pull noun phrases out of an instruction.
pub trait NounPhraseParser: Send + Sync {
    /// All noun phrases in left-to-right order, duplicates included.
    fn noun_phrases(&self, text: &str) -> Vec<String>;
}

/// Default parser over closed-class word lists.
#[derive(Debug, Default, Clone, Copy)]
pub struct Chunker;

impl NounPhraseParser for Chunker {
    fn noun_phrases(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        let mut phrases = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match chunk_at(&tokens, i) {
                Some((phrase, next)) => {
                    phrases.push(phrase);
                    i = next;
                }
                None => i += 1,
            }
        }
        phrases
    }
}

fn is_content(t: &Token) -> bool {
    ADJECTIVES.contains(t.lower.as_str()) || is_noun_like(&t.lower)
}

fn chunk_at(tokens: &[Token], start: usize) -> Option<(String, usize)> {
    let mut i = start;
    if DETERMINERS.contains(tokens[i].lower.as_str()) {
        i += 1;
    }
    let run_start = i;
    while i < tokens.len() && is_content(&tokens[i]) {
        i += 1;
    }
    // The phrase ends at its last noun; trailing adjectives are predicative.
    let last_noun = (run_start..i)
        .rev()
        .find(|&k| is_noun_like(&tokens[k].lower))?;
    let words: Vec<&str> = tokens[start..=last_noun]
        .iter()
        .map(|t| t.text.as_str())
        .collect();
    Some((words.join(" "), i.max(start + 1)))
}

/// Noun phrases in order of first occurrence, at most `limit` of them.
pub fn extract_noun_phrases_with(
    parser: &dyn NounPhraseParser,
    raw_text: &str,
    limit: usize,
) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    parser
        .noun_phrases(raw_text)
        .into_iter()
        .filter(|p| seen.insert(p.to_lowercase()))
        .take(limit)
        .collect()
}

/// [`extract_noun_phrases_with`] using the default [`Chunker`].
pub fn extract_noun_phrases(raw_text: &str, limit: usize) -> Vec<String> {
    extract_noun_phrases_with(&Chunker, raw_text, limit)
}
