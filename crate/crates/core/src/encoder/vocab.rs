use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::table::write_atomic;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "eos";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace. Every punctuation or symbol
/// character and every decimal digit becomes its own token; runs of other
/// alphanumeric characters form one token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars().flat_map(char::to_lowercase) {
            if ch.is_alphanumeric() && !ch.is_ascii_digit() {
                current.push(ch);
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Token ↔ id bijection with reserved ids `PAD = 0`, `EOS = 1`, `UNK = 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(vec![PAD_TOKEN.into(), EOS_TOKEN.into(), UNK_TOKEN.into()])
            .expect("reserved tokens")
    }
}

impl Vocab {
    /// Builds a vocabulary from texts; tokens get ids in first-appearance order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut vocab = Vocab::default();
        for text in texts {
            vocab.extend(text);
        }
        vocab
    }

    pub fn extend(&mut self, text: &str) {
        for tok in split_tokens(text) {
            if !self.index.contains_key(&tok) {
                self.index.insert(tok.clone(), self.tokens.len());
                self.tokens.push(tok);
            }
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[PAD] != PAD_TOKEN
            || tokens[EOS] != EOS_TOKEN
            || tokens[UNK] != UNK_TOKEN
        {
            return Err(Error::Codec("vocabulary must start with <pad>, eos, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Codec(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    /// Token ids of `text`; unknown tokens map to UNK. `""` gives `[]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens; PAD is skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }
}
