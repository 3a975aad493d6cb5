use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_PAD: u32 = 258;
/// 256 byte values plus BOS, EOS and PAD.
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Byte,
    WordFile,
}

/// Byte-level or whitespace word-level tokenizer.
///
/// Word files hold one token per line; the line number is the id. The lines
/// `<unk>` (or `unk`), `<bos>`/`<s>`, `<eos>`/`</s>` and `<pad>` are taken as
/// special tokens when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    kind: TokenizerKind,
    words: Vec<String>,
    index: HashMap<String, u32>,
    pub bos: Option<u32>,
    pub eos: Option<u32>,
    pub pad: Option<u32>,
    pub unk: Option<u32>,
}

impl Tokenizer {
    pub fn byte() -> Self {
        Tokenizer {
            kind: TokenizerKind::Byte,
            words: Vec::new(),
            index: HashMap::new(),
            bos: Some(BYTE_BOS),
            eos: Some(BYTE_EOS),
            pad: Some(BYTE_PAD),
            unk: None,
        }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "word file line {} is not a single token: {w:?}",
                    i + 1
                )));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {w:?} in word file")));
            }
        }
        let find = |names: &[&str]| names.iter().find_map(|n| index.get(*n).copied());
        Ok(Tokenizer {
            kind: TokenizerKind::WordFile,
            bos: find(&["<bos>", "<s>"]),
            eos: find(&["<eos>", "</s>"]),
            pad: find(&["<pad>"]),
            unk: find(&["<unk>", "unk"]),
            words,
            index,
        })
    }

    pub fn load_wordfile(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TokenizerKind::Byte => BYTE_VOCAB,
            TokenizerKind::WordFile => self.words.len(),
        }
    }

    fn is_special(&self, id: u32) -> bool {
        [self.bos, self.eos, self.pad].contains(&Some(id))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.kind {
            TokenizerKind::Byte => Ok(text.bytes().map(u32::from).collect()),
            TokenizerKind::WordFile => text
                .split_whitespace()
                .map(|w| {
                    self.index.get(w).copied().or(self.unk).ok_or_else(|| {
                        Error::Vocab(format!("unknown word {w:?} and no <unk> token"))
                    })
                })
                .collect(),
        }
    }

    /// Decodes ids to text, dropping BOS/EOS/PAD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
            return Err(Error::Vocab(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let kept = ids.iter().copied().filter(|&id| !self.is_special(id));
        match self.kind {
            TokenizerKind::Byte => {
                let bytes: Vec<u8> = kept.map(|id| id as u8).collect();
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
            TokenizerKind::WordFile => Ok(kept
                .map(|id| self.words[id as usize].as_str())
                .collect::<Vec<_>>()
                .join(" ")),
        }
    }

    /// BOS (when defined) followed by `encode(text)`.
    pub fn prompt_ids(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids: Vec<u32> = self.bos.into_iter().collect();
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    pub fn stop_ids(&self) -> Vec<u32> {
        self.eos.into_iter().collect()
    }
}

pub fn encode(tokenizer: &Tokenizer, text: &str) -> Result<Vec<u32>> {
    tokenizer.encode(text)
}

pub fn decode(tokenizer: &Tokenizer, ids: &[u32]) -> Result<String> {
    tokenizer.decode(ids)
}
