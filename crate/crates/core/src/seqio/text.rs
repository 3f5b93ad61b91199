//! Tiny closed vocabulary for templated emotion descriptions.

use rand::Rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const FILLERS: &[&str] = &[
    "a", "the", "person", "speaker", "face", "speaks", "talks", "looks", "with", "in", "feeling",
    "emotion", "mood", "very", "quite",
];

const CLASS_WORDS: &[(&str, &str)] = &[
    ("neutral", "calm"),
    ("happy", "joyful"),
    ("sad", "sorrowful"),
    ("angry", "furious"),
    ("fearful", "scared"),
    ("disgusted", "repulsed"),
    ("surprised", "astonished"),
    ("contemptuous", "scornful"),
];

const TEMPLATES: &[&str] = &[
    "a person speaks with {} emotion",
    "the speaker looks {}",
    "a very {} face",
    "the face talks in a quite {} mood",
    "a speaker feeling {}",
];

/// Vocabulary for `classes` emotion classes: specials, fillers, then two
/// class-identifying words per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: usize,
}

impl Vocabulary {
    pub fn new(classes: usize) -> Self {
        let mut words: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
            .iter()
            .chain(FILLERS)
            .map(|s| s.to_string())
            .collect();
        for k in 0..classes {
            let (a, b) = class_words(k);
            words.push(a);
            words.push(b);
        }
        Self { words, classes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|p| p as u32)
            .unwrap_or(UNK)
    }

    /// Lower-cases, splits on non-alphanumerics and wraps in BOS/EOS.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(
            text.split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| self.id(&w.to_lowercase())),
        );
        out.push(EOS);
        out
    }

    pub fn class_of_token(&self, token: u32) -> Option<usize> {
        let first = 4 + FILLERS.len() as u32;
        (token >= first && token < first + 2 * self.classes as u32)
            .then(|| ((token - first) / 2) as usize)
    }

    /// A random templated description of `class`.
    pub fn describe<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> String {
        let (a, b) = class_words(class);
        let word = if rng.random_bool(0.5) { a } else { b };
        TEMPLATES[rng.random_range(0..TEMPLATES.len())].replace("{}", &word)
    }
}

fn class_words(k: usize) -> (String, String) {
    match CLASS_WORDS.get(k) {
        Some((a, b)) => (a.to_string(), b.to_string()),
        None => (format!("emotion{k}"), format!("style{k}")),
    }
}
