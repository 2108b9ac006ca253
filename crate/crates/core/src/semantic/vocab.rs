use alloc::string::ToString;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const SHAPES: [&str; 4] = ["cube", "sphere", "cylinder", "cone"];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "cyan", "gray", "brown",
];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const COUNTS: [&str; 6] = ["1", "2", "3", "4", "5", "6"];
pub const LABELS: [&str; 2] = ["positive", "negative"];
pub const POSITIVE_WORDS: [&str; 6] = [
    "great", "good", "wonderful", "excellent", "brilliant", "enjoyable",
];
pub const NEGATIVE_WORDS: [&str; 6] = ["bad", "terrible", "awful", "boring", "dull", "poor"];
pub const NOUNS: [&str; 5] = ["movie", "film", "plot", "acting", "story"];
pub const ADVERBS: [&str; 3] = ["really", "very", "quite"];

/// The closed 64-token vocabulary. Token ids are indices into this table.
pub const VOCAB: [&str; 64] = [
    // shapes 0..4
    "cube", "sphere", "cylinder", "cone",
    // colors 4..12
    "red", "blue", "green", "yellow", "purple", "cyan", "gray", "brown",
    // sizes 12..14
    "small", "large",
    // counts 14..20
    "1", "2", "3", "4", "5", "6",
    // labels 20..22
    "positive", "negative",
    // question and instruction words 22..36
    "what", "how", "many", "color", "shape", "size", "is", "the", "object", "objects",
    "describe", "image", "caption", "scene",
    // sentiment words 36..48
    "great", "good", "wonderful", "excellent", "brilliant", "enjoyable",
    "bad", "terrible", "awful", "boring", "dull", "poor",
    // review fillers 48..64
    "movie", "film", "plot", "acting", "story", "was", "really", "very", "quite", "this",
    "a", "and", "with", "in", "classify", "sentiment",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

pub fn token_id(word: &str) -> Result<usize> {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .ok_or_else(|| Error::Vocabulary(word.to_string()))
}

pub fn token_str(id: usize) -> Result<&'static str> {
    VOCAB
        .get(id)
        .copied()
        .ok_or_else(|| Error::Vocabulary(alloc::format!("#{id}")))
}

/// Whitespace tokenizer over the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(token_id).collect()
}
