//! Token vocabulary. One token per line in `vocab.txt`; the id is the line
//! number.
//!
//! The default vocabulary starts with four specials, a block of reserved
//! label tokens (the seven MELD emotions, then spare slots), the score
//! characters used to spell sentiment values, a handful of prompt words and
//! finally generic content words `w0`, `w1`, ...

use std::collections::HashMap;
use std::path::Path;

use crate::error::{EgmfError, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Number of reserved label tokens.
pub const LABEL_SLOTS: usize = 16;

pub const EMOTIONS: [&str; 7] = ["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"];

/// Characters a sentiment score may be spelled with.
pub const SCORE_CHARS: [&str; 13] = ["+", "-", ".", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

pub const PROMPT_WORDS: [&str; 10] = [
    "features",
    "end",
    ":",
    "emotion",
    "sentiment",
    "utterance",
    "is",
    "the",
    "label",
    "score",
];

/// Smallest vocabulary that still leaves room for content words.
pub const MIN_VOCAB: usize = 64;

pub fn label_token(slot: usize) -> String {
    match EMOTIONS.get(slot) {
        Some(name) => format!("<{name}>"),
        None => format!("<label{slot}>"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    labels: Vec<usize>,
    score_chars: Vec<usize>,
    content: Vec<usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(EgmfError::Config(format!("vocabulary line {} is not a single token: {t:?}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(EgmfError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |t: &str| index.get(t).copied().ok_or_else(|| EgmfError::UnknownToken(t.to_string()));
        for t in [PAD, BOS, EOS, UNK] {
            find(t)?;
        }
        let labels = (0..LABEL_SLOTS).map(|s| find(&label_token(s))).collect::<Result<Vec<_>>>()?;
        let score_chars = SCORE_CHARS.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        let reserved: Vec<&str> = [PAD, BOS, EOS, UNK]
            .into_iter()
            .chain(SCORE_CHARS)
            .chain(PROMPT_WORDS)
            .collect();
        let content = tokens
            .iter()
            .enumerate()
            .filter(|(i, t)| !reserved.contains(&t.as_str()) && !labels.contains(i))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            tokens,
            index,
            labels,
            score_chars,
            content,
        })
    }

    /// The standard layout padded with content words up to `size` entries.
    pub fn standard(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(EgmfError::Config(format!("vocab_size {size} is below the minimum {MIN_VOCAB}")));
        }
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend((0..LABEL_SLOTS).map(label_token));
        tokens.extend(SCORE_CHARS.iter().map(|s| s.to_string()));
        tokens.extend(PROMPT_WORDS.iter().map(|s| s.to_string()));
        let n_content = size - tokens.len();
        tokens.extend((0..n_content).map(|i| format!("w{i}")));
        Self::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EgmfError::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| EgmfError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| EgmfError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(EgmfError::OutOfVocabulary {
            id,
            size: self.tokens.len(),
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    /// Reserved token for label slot `class`.
    pub fn label(&self, class: usize) -> usize {
        self.labels[class]
    }

    /// Label token ids for the first `n_classes` slots.
    pub fn labels(&self, n_classes: usize) -> &[usize] {
        &self.labels[..n_classes]
    }

    pub fn score_chars(&self) -> &[usize] {
        &self.score_chars
    }

    /// Ids of ordinary content words, in id order.
    pub fn content(&self) -> &[usize] {
        &self.content
    }

    /// Block `b` of `n_blocks` equal contiguous slices of the content words.
    pub fn content_block(&self, b: usize, n_blocks: usize) -> &[usize] {
        let size = self.content.len() / n_blocks;
        &self.content[b * size..(b + 1) * size]
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(EgmfError::OutOfVocabulary { id, size: self.len() }),
            None => Ok(()),
        }
    }
}
