//! Word-level vocabulary shared by every stage.
//!
//! Tokenization is deliberately blunt: lowercase, strip ASCII punctuation,
//! split on whitespace, map unknown words to [`UNK`]. Four reserved ids sit
//! below the word ids so that structural actions (sequence start, end, title
//! separator) can be scored by the same output head as ordinary words.

use std::collections::HashMap;

/// Index into the vocabulary. Doubles as the action id during decoding.
pub type TokenId = u32;

/// Padding / sequence-start token. Never appears in decode masks.
pub const BOS: TokenId = 0;
/// End of the whole title list.
pub const EOS: TokenId = 1;
/// Separator between consecutive titles in one decoded list.
pub const SEP: TokenId = 2;
/// Out-of-vocabulary word.
pub const UNK: TokenId = 3;

/// Number of reserved ids below the first word id.
pub const RESERVED: usize = 4;

const RESERVED_SURFACES: [&str; RESERVED] = ["<s>", "</s>", "<sep>", "<unk>"];

/// Lowercases a raw word and strips ASCII punctuation.
///
/// Returns `None` when nothing is left, in which case the word contributes
/// no token at all.
pub fn normalize_word(raw: &str) -> Option<String> {
    let word: String = raw
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    if word.is_empty() {
        None
    } else {
        Some(word)
    }
}

/// Splits text into normalized words: lowercase, ASCII punctuation removed,
/// whitespace-delimited. This is the single tokenization rule shared by the
/// vocabulary, the BM25 index, and input-length accounting.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_word).collect()
}

/// Immutable token table. Word ids start at [`RESERVED`] and follow
/// first-seen order of the builder, so a vocabulary built from the same
/// inputs in the same order is always identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn builder() -> VocabularyBuilder {
        VocabularyBuilder::default()
    }

    /// Total id count, reserved ids included.
    pub fn size(&self) -> usize {
        self.surfaces.len() + RESERVED
    }

    pub fn word_count(&self) -> usize {
        self.surfaces.len()
    }

    /// Id of an already-normalized word.
    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    /// Surface form of an id. Reserved ids render as markers like `<sep>`.
    pub fn surface(&self, id: TokenId) -> &str {
        let idx = id as usize;
        if idx < RESERVED {
            RESERVED_SURFACES[idx]
        } else {
            &self.surfaces[idx - RESERVED]
        }
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.size()
    }

    /// Normalizes `text` and maps each word to its id, unknown words to
    /// [`UNK`]. Reserved ids are never produced from text.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        words(text)
            .into_iter()
            .map(|w| self.id_of(&w).unwrap_or(UNK))
            .collect()
    }

    /// Joins surfaces with single spaces. Inverse of [`Self::tokenize`] for
    /// sequences of word ids.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.surface(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Word surfaces in id order, starting at id [`RESERVED`].
    pub fn word_surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Rebuilds a vocabulary from surfaces stored in id order.
    pub fn from_word_surfaces(surfaces: Vec<String>) -> Self {
        let ids = surfaces
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (i + RESERVED) as TokenId))
            .collect();
        Vocabulary { surfaces, ids }
    }
}

/// Accumulates text and assigns word ids in first-seen order.
#[derive(Debug, Default)]
pub struct VocabularyBuilder {
    surfaces: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl VocabularyBuilder {
    pub fn add_text(&mut self, text: &str) {
        for word in words(text) {
            self.add_word(word);
        }
    }

    pub fn add_word(&mut self, word: String) {
        if !self.ids.contains_key(&word) {
            let id = (self.surfaces.len() + RESERVED) as TokenId;
            self.ids.insert(word.clone(), id);
            self.surfaces.push(word);
        }
    }

    pub fn finish(self) -> Vocabulary {
        Vocabulary {
            surfaces: self.surfaces,
            ids: self.ids,
        }
    }
}
