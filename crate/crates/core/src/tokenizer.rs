//! Word-level vocabulary with fixed special ids.
//!
//! Text is split on whitespace, then punctuation is peeled off as single
//! tokens. `<=`, `>=`, `!=` and `<>` stay atomic. A `.` between two word
//! characters stays inside the word so `T1.name` and `3.5` survive.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::IGNORE_INDEX;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIALS: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

pub const DEFAULT_MAX_LEN: usize = 256;

const PUNCTUATION: &[char] = &[
    '(', ')', ',', ';', '=', '<', '>', '!', '*', '?', ':', '\'', '"', '`', '+', '-', '/', '%', '[', ']',
    '{', '}', '.', '|', '&',
];
const MULTI_CHAR_OPS: &[&str] = &["<=", ">=", "!=", "<>"];

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !PUNCTUATION.contains(&c)
}

/// Splits text into word and punctuation tokens.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            i += 1;
            continue;
        }
        if c == '.' && !word.is_empty() && chars.get(i + 1).is_some_and(|&n| is_word_char(n)) {
            word.push(c);
            i += 1;
            continue;
        }
        if PUNCTUATION.contains(&c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if let Some(&next) = chars.get(i + 1) {
                let pair: String = [c, next].iter().collect();
                if MULTI_CHAR_OPS.contains(&pair.as_str()) {
                    tokens.push(pair);
                    i += 2;
                    continue;
                }
            }
            tokens.push(c.to_string());
            i += 1;
            continue;
        }
        word.push(c);
        i += 1;
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Tokens joined by single spaces; the text `decode(encode(s))` reproduces.
pub fn normalize_text(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_context: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Invalid(
                "vocabulary must start with <pad>, <s>, </s>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Self {
            tokens,
            index,
            max_context: DEFAULT_MAX_LEN,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn to_text(&self) -> String {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// Keeps the `max_size - 4` most frequent tokens, ties broken
/// lexicographically, after the four specials.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size < 5 {
        return Err(Error::Invalid(format!("vocabulary max_size {max_size} < 5")));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in pre_tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    if ranked.is_empty() {
        return Err(Error::Invalid("corpus contains no tokens".into()));
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - SPECIALS.len()).map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Token ids for `text`, truncated to `max_len` and optionally right-padded.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize, pad_to_max: bool) -> Vec<u32> {
    let mut ids: Vec<u32> = pre_tokenize(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .take(max_len)
        .collect();
    if pad_to_max {
        ids.resize(max_len, PAD_ID);
    }
    ids
}

/// Space-joined tokens, skipping padding. Out-of-range ids render as `<unk>`.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id != PAD_ID)
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps padding to `ignore_index` and, when `prompt_len > 0`, masks the
/// first `prompt_len` positions as well.
pub fn labels_for_training(target_ids: &[u32], ignore_index: i64, prompt_len: usize) -> Result<Vec<i64>> {
    if ignore_index >= 0 {
        return Err(Error::Invalid(format!(
            "ignore_index {ignore_index} collides with vocabulary ids"
        )));
    }
    if prompt_len > target_ids.len() {
        return Err(Error::Invalid(format!(
            "prompt length {prompt_len} exceeds sequence length {}",
            target_ids.len()
        )));
    }
    Ok(target_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if i < prompt_len || id == PAD_ID {
                ignore_index
            } else {
                id as i64
            }
        })
        .collect())
}

/// [`labels_for_training`] with the conventional ignore index.
pub fn default_labels(target_ids: &[u32], prompt_len: usize) -> Result<Vec<i64>> {
    labels_for_training(target_ids, IGNORE_INDEX, prompt_len)
}
