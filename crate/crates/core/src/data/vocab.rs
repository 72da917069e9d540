use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::DataError;
use crate::decoder::{BOS, EOS, UNK};

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense token indices; the three special tokens come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Special tokens followed by `words` in order, skipping repeats.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(words.iter().map(AsRef::as_ref))
        {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        debug_assert_eq!(
            (v.index[BOS_TOKEN], v.index[EOS_TOKEN], v.index[UNK_TOKEN]),
            (BOS, EOS, UNK)
        );
        v
    }

    /// Parses one token per line; the first three lines must be the special tokens.
    pub fn from_lines(text: &str) -> Result<Self, DataError> {
        let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if lines.len() < 3 || lines[..3] != [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] {
            return Err(DataError::Vocabulary("must start with <bos>, <eos>, <unk>".into()));
        }
        let v = Self::new(&lines[3..]);
        if v.len() != lines.len() {
            return Err(DataError::Vocabulary("duplicate token".into()));
        }
        Ok(v)
    }

    pub fn to_lines(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::from_lines(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_lines())?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word indices followed by the end token; unknown words become `UNK`.
pub fn encode_caption<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Vec<usize> {
    words
        .iter()
        .map(|w| vocab.index(w.as_ref()).unwrap_or(UNK))
        .chain(std::iter::once(EOS))
        .collect()
}

/// Words up to (not including) the first end token. Indices outside the
/// vocabulary decode as `<unk>`.
pub fn decode_caption(indices: &[usize], vocab: &Vocabulary) -> Vec<String> {
    indices
        .iter()
        .take_while(|&&i| i != EOS)
        .map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN).to_string())
        .collect()
}
