//! Offline rewrite of fetch-and-carry instructions into the canonical
//! "Carry X to Y." frame.

use super::words::{
    detokenize, tokenize, Token, DIRECTIONAL, FETCH_VERBS, FILLER_PHRASES, LOCATIVE, TO_MODIFIERS,
    VERBS,
};

const CLAUSE_JOINERS: &[&str] = &[",", "and", "then", ";"];
const CLAUSE_SKIP: &[&str] = &[
    ",",
    "and",
    "then",
    "it",
    "them",
    "this",
    "that",
    "over",
    "back",
    "up",
    "down",
    "away",
    "carefully",
    "gently",
    "there",
    "also",
];
const SENTENCE_END: &[&str] = &[".", "?", "!", ";"];

fn lower_is(t: &Token, words: &[&str]) -> bool {
    words.contains(&t.lower.as_str())
}

pub(crate) fn strip_fillers(tokens: Vec<Token>) -> Vec<Token> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    'outer: while i < tokens.len() {
        for phrase in FILLER_PHRASES {
            let end = i + phrase.len();
            if end <= tokens.len()
                && tokens[i..end]
                    .iter()
                    .zip(phrase.iter())
                    .all(|(t, w)| t.lower == *w)
            {
                i = end;
                continue 'outer;
            }
        }
        out.push(tokens[i].clone());
        i += 1;
    }
    out
}

/// Strips punctuation and dangling conjunctions from both ends of a span.
fn trim_span(span: &[Token]) -> &[Token] {
    let mut start = 0;
    let mut end = span.len();
    while start < end && (span[start].is_punct() || lower_is(&span[start], &["and", "then"])) {
        start += 1;
    }
    while end > start && (span[end - 1].is_punct() || lower_is(&span[end - 1], &["and", "then"])) {
        end -= 1;
    }
    &span[start..end]
}

fn cut_at_sentence_end(span: &[Token]) -> &[Token] {
    let end = span
        .iter()
        .position(|t| lower_is(t, SENTENCE_END))
        .unwrap_or(span.len());
    &span[..end]
}

/// Index of a joiner that starts a new verb clause ("…, then move it …").
fn clause_boundary(body: &[Token]) -> Option<usize> {
    for (j, tok) in body.iter().enumerate() {
        if !lower_is(tok, CLAUSE_JOINERS) {
            continue;
        }
        let next = body[j + 1..].iter().find(|t| !lower_is(t, CLAUSE_JOINERS));
        if matches!(next, Some(t) if VERBS.contains(t.lower.as_str())) {
            return Some(j);
        }
    }
    None
}

/// Length of a destination preposition starting at `i`, if any.
fn preposition_len(tokens: &[Token], i: usize, allow_locative: bool) -> Option<usize> {
    let word = |k: usize| tokens.get(k).map(|t| t.lower.as_str());
    let w = word(i)?;
    match (w, word(i + 1), word(i + 2)) {
        ("on", Some("top"), Some("of")) | ("in", Some("front"), Some("of")) => return Some(3),
        ("next" | "close", Some("to"), _) if allow_locative => return Some(2),
        ("inside", Some("of"), _) if allow_locative => return Some(2),
        _ => {}
    }
    if DIRECTIONAL.contains(w) {
        let modified = i > 0 && TO_MODIFIERS.contains(tokens[i - 1].lower.as_str());
        return (!modified).then_some(1);
    }
    (allow_locative && LOCATIVE.contains(w)).then_some(1)
}

fn receptacle_from_clause(clause: &[Token]) -> Option<&[Token]> {
    let mut i = 0;
    while i < clause.len()
        && (lower_is(&clause[i], CLAUSE_SKIP) || VERBS.contains(clause[i].lower.as_str()))
    {
        i += 1;
    }
    if let Some(len) = preposition_len(clause, i, true) {
        i += len;
    }
    let span = trim_span(cut_at_sentence_end(&clause[i..]));
    (!span.is_empty()).then_some(span)
}

fn destination_split(body: &[Token]) -> Option<(usize, usize)> {
    let body = cut_at_sentence_end(body);
    for allow_locative in [false, true] {
        for i in 1..body.len() {
            if let Some(len) = preposition_len(body, i, allow_locative) {
                if allow_locative || DIRECTIONAL.contains(body[i].lower.as_str()) || len > 1 {
                    return Some((i, len));
                }
            }
        }
    }
    None
}

fn is_pronoun_only(span: &[Token]) -> bool {
    span.len() == 1 && lower_is(&span[0], &["it", "them", "this", "that"])
}

/// Splits an instruction into (target, receptacle) phrases by rule.
pub(crate) fn rule_split(text: &str) -> Option<(String, String)> {
    let tokens = strip_fillers(tokenize(text));
    let verb = tokens
        .iter()
        .position(|t| FETCH_VERBS.contains(t.lower.as_str()))?;
    let mut start = verb + 1;
    if tokens[verb].lower == "pick" && tokens.get(start).is_some_and(|t| t.lower == "up") {
        start += 1;
    }
    let body = &tokens[start..];

    let (target, receptacle) = match clause_boundary(body) {
        Some(boundary) => (
            trim_span(&body[..boundary]),
            receptacle_from_clause(&body[boundary..])?,
        ),
        None => {
            let (at, len) = destination_split(body)?;
            (
                trim_span(&body[..at]),
                trim_span(cut_at_sentence_end(&body[at + len..])),
            )
        }
    };
    if target.is_empty() || receptacle.is_empty() || is_pronoun_only(target) {
        return None;
    }
    Some((detokenize(target), detokenize(receptacle)))
}

pub(crate) fn canonical_form(target: &str, receptacle: &str) -> String {
    format!("Carry {target} to {receptacle}.")
}

/// Normalized copy of the input used when no rule applies.
pub(crate) fn cleaned(text: &str) -> String {
    let tokens = strip_fillers(tokenize(text));
    let trimmed = trim_span(&tokens);
    let mut s = detokenize(trimmed);
    if s.is_empty() {
        s = text.trim().to_string();
    }
    s
}
