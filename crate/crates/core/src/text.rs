//! Vocabulary and tokenized caption types.
//!
//! Tokenization is lowercase whitespace splitting over a closed lexicon; there
//! is no subword model.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Longest caption accepted at dataset load.
pub const MAX_CAPTION_LEN: usize = 24;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// Reserved symbols, in id order. They always occupy ids `0..5`.
pub const RESERVED: [&str; 5] = [PAD, MASK, UNK, BOS, EOS];

pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
pub const BOS_ID: TokenId = 3;
pub const EOS_ID: TokenId = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw captions. Content tokens receive ids in
    /// order of first appearance after the reserved block.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Self::reserved_only();
        for line in corpus {
            for word in split_words(line.as_ref()) {
                vocab.insert(word);
            }
        }
        Ok(vocab)
    }

    fn reserved_only() -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            lookup: HashMap::new(),
        };
        for token in RESERVED {
            vocab.insert(token.to_string());
        }
        vocab
    }

    fn insert(&mut self, word: String) {
        if !self.lookup.contains_key(&word) {
            self.lookup.insert(word.clone(), self.tokens.len());
            self.tokens.push(word);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn mask_id(&self) -> TokenId {
        MASK_ID
    }

    pub fn unk_id(&self) -> TokenId {
        UNK_ID
    }

    pub fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    pub fn eos_id(&self) -> TokenId {
        EOS_ID
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < RESERVED.len()
    }

    /// Lowercases and whitespace-splits `raw`; unknown words map to `[UNK]`
    /// while keeping their surface form.
    pub fn tokenize(&self, raw: &str) -> TokenSeq {
        let surfaces: Vec<String> = split_words(raw).collect();
        let ids = surfaces
            .iter()
            .map(|s| self.id(s).unwrap_or(self.unk_id()))
            .collect();
        TokenSeq { ids, surfaces }
    }

    /// Builds a sequence from ids, using the vocabulary surfaces.
    pub fn seq_from_ids(&self, ids: &[TokenId]) -> TokenSeq {
        let surfaces = ids
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect();
        TokenSeq {
            ids: ids.to_vec(),
            surfaces,
        }
    }
}

fn split_words(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.split_whitespace().map(str::to_lowercase)
}

/// A tokenized caption: vocabulary ids with their surface strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    surfaces: Vec<String>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, surfaces: Vec<String>) -> Result<Self> {
        if ids.len() != surfaces.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids but {} surfaces",
                ids.len(),
                surfaces.len()
            )));
        }
        Ok(Self { ids, surfaces })
    }

    pub fn empty() -> Self {
        Self {
            ids: Vec::new(),
            surfaces: Vec::new(),
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Space-joined surfaces.
    pub fn text(&self) -> String {
        self.surfaces.join(" ")
    }

    pub(crate) fn set(&mut self, pos: usize, id: TokenId, surface: String) {
        self.ids[pos] = id;
        self.surfaces[pos] = surface;
    }
}
