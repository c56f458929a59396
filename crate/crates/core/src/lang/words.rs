//! Closed-class word lists and a small tokenizer shared by the rule-based
//! paraphraser and the noun-phrase chunker.

use once_cell::sync::Lazy;
use regex::Regex;
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Token {
    pub text: String,
    pub lower: String,
}

impl Token {
    pub fn is_punct(&self) -> bool {
        !self.lower.chars().any(|c| c.is_alphanumeric())
    }
}

static TOKEN_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"[A-Za-z0-9]+(?:['’\-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]").unwrap());

pub(crate) fn tokenize(text: &str) -> Vec<Token> {
    TOKEN_RE
        .find_iter(text)
        .map(|m| Token {
            text: m.as_str().to_string(),
            lower: m.as_str().to_lowercase().replace('’', "'"),
        })
        .collect()
}

/// Joins tokens back into text, attaching punctuation to the preceding word.
pub(crate) fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && !(t.is_punct() && t.lower != "(" && t.lower != "\"") {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

fn set(words: &[&'static str]) -> HashSet<&'static str> {
    words.iter().copied().collect()
}

pub(crate) static DETERMINERS: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        "the", "a", "an", "this", "that", "these", "those", "my", "your", "his", "her", "its",
        "our", "their", "some", "any", "each", "every", "another",
    ])
});

pub(crate) static ADJECTIVES: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        "white", "black", "red", "blue", "green", "yellow", "brown", "gray", "grey", "pink",
        "purple", "orange", "beige", "silver", "golden", "gold", "dark", "light", "big", "small",
        "large", "little", "tiny", "tall", "short", "long", "round", "square", "wide", "narrow",
        "wooden", "metal", "plastic", "empty", "full", "new", "old", "left", "right", "upper",
        "lower", "middle", "striped", "soft", "blank",
    ])
});

pub(crate) static VERBS: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        "pick",
        "take",
        "grab",
        "get",
        "bring",
        "move",
        "carry",
        "put",
        "place",
        "set",
        "fetch",
        "go",
        "drop",
        "leave",
        "deliver",
        "transfer",
        "give",
        "find",
        "open",
        "close",
        "look",
        "see",
        "want",
        "like",
        "need",
        "make",
        "help",
        "relocate",
        "transport",
        "lay",
        "store",
        "throw",
        "return",
        "bring",
        "shift",
        "position",
        "stack",
        "hang",
        "collect",
        "locate",
        "keep",
    ])
});

/// Verbs that open the fetch clause of an instruction.
pub(crate) static FETCH_VERBS: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        "pick",
        "take",
        "grab",
        "get",
        "bring",
        "move",
        "carry",
        "fetch",
        "put",
        "place",
        "set",
        "deliver",
        "transfer",
        "relocate",
        "transport",
        "collect",
    ])
});

pub(crate) static STOPWORDS: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        // prepositions and particles
        "on",
        "in",
        "at",
        "to",
        "into",
        "onto",
        "towards",
        "toward",
        "near",
        "next",
        "by",
        "with",
        "from",
        "of",
        "under",
        "above",
        "below",
        "behind",
        "beside",
        "besides",
        "between",
        "over",
        "inside",
        "outside",
        "up",
        "down",
        "off",
        "out",
        "around",
        "across",
        "along",
        "through",
        "for",
        "against",
        "close",
        "adjacent",
        "beneath",
        "underneath",
        "atop",
        "top",
        "front",
        "away",
        "back",
        // conjunctions
        "and",
        "or",
        "but",
        "then",
        "so",
        "while",
        "after",
        "before",
        "once",
        "than",
        // pronouns
        "it",
        "them",
        "me",
        "you",
        "i",
        "we",
        "they",
        "he",
        "she",
        "him",
        "us",
        "there",
        "here",
        "one",
        "ones",
        "itself",
        "yourself",
        "what",
        "which",
        "where",
        "who",
        "whom",
        "whose",
        // auxiliaries and modals
        "could",
        "would",
        "can",
        "will",
        "shall",
        "should",
        "may",
        "might",
        "must",
        "do",
        "does",
        "did",
        "don't",
        "doesn't",
        "is",
        "are",
        "was",
        "were",
        "be",
        "been",
        "being",
        "am",
        "has",
        "have",
        "had",
        "if",
        "not",
        "no",
        "mind",
        "i'd",
        "let's",
        "let",
        "it's",
        "that's",
        // courtesy, interjections, adverbs
        "please",
        "kindly",
        "hello",
        "hi",
        "hey",
        "thanks",
        "thank",
        "okay",
        "ok",
        "yes",
        "sorry",
        "carefully",
        "gently",
        "also",
        "just",
        "now",
        "again",
        "quickly",
        "slowly",
        "very",
        "really",
        "all",
        "both",
        "too",
    ])
});

/// Directional prepositions that introduce the destination.
pub(crate) static DIRECTIONAL: Lazy<HashSet<&'static str>> =
    Lazy::new(|| set(&["to", "onto", "into", "towards", "toward"]));

/// Locative prepositions that may also introduce a destination.
pub(crate) static LOCATIVE: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    set(&[
        "on", "in", "inside", "atop", "at", "over", "under", "beside", "near",
    ])
});

/// Words that turn a following "to" into part of a noun phrase ("next to").
pub(crate) static TO_MODIFIERS: Lazy<HashSet<&'static str>> =
    Lazy::new(|| set(&["next", "close", "adjacent", "closest", "nearest", "due"]));

/// Filler phrases removed before rewriting.
pub(crate) const FILLER_PHRASES: &[&[&str]] = &[
    &["if", "you", "do", "not", "mind"],
    &["if", "you", "does", "not", "mind"],
    &["if", "you", "don't", "mind"],
    &["if", "you", "dont", "mind"],
    &["if", "it", "is", "not", "too", "much", "trouble"],
    &["i", "would", "like", "you", "to"],
    &["i'd", "like", "you", "to"],
    &["i", "want", "you", "to"],
    &["i", "need", "you", "to"],
    &["could", "you"],
    &["can", "you"],
    &["would", "you"],
    &["will", "you"],
    &["please"],
    &["kindly"],
];

pub(crate) fn is_noun_like(lower: &str) -> bool {
    lower.chars().any(|c| c.is_alphabetic())
        && !STOPWORDS.contains(lower)
        && !DETERMINERS.contains(lower)
        && !VERBS.contains(lower)
        && !ADJECTIVES.contains(lower)
}
