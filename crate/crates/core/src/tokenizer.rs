//! Tokenizer interface plus the word-level reference vocabulary.
//!
//! The trie and the decoder only talk to [`Tokenizer`]; a deployment plugs the
//! serving model's tokenizer in behind it. [`Vocabulary`] is the reference
//! implementation: lowercase, whitespace-split, one id per distinct word in
//! sorted order, with the three special tokens appended at the end.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{END_OF_SEQUENCE, REASONING_CLOSE, REASONING_OPEN};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("instruction library is empty")]
    EmptyLibrary,
    #[error("empty text")]
    EmptyText,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub reasoning_open: TokenId,
    pub reasoning_close: TokenId,
    pub end_of_sequence: TokenId,
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError>;
    fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError>;
    /// Surface string of a single id.
    fn token(&self, id: TokenId) -> Option<&str>;
    fn vocab_size(&self) -> usize;
    fn special_ids(&self) -> SpecialIds;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    specials: SpecialIds,
}

/// On-disk form: `{"tokens": [...in id order...], "specials": {...}}`.
#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    specials: SpecialIds,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Builds the reference vocabulary from instruction surfaces.
pub fn build_vocabulary<S: AsRef<str>>(surfaces: &[S]) -> Result<Vocabulary, TokenizerError> {
    if surfaces.is_empty() {
        return Err(TokenizerError::EmptyLibrary);
    }
    let mut sorted = BTreeSet::new();
    for s in surfaces {
        let s = s.as_ref();
        if s.trim().is_empty() {
            return Err(TokenizerError::EmptyText);
        }
        sorted.extend(words(s));
    }
    let mut tokens: Vec<String> = sorted.into_iter().collect();
    let base = tokens.len() as TokenId;
    tokens.extend([REASONING_OPEN, REASONING_CLOSE, END_OF_SEQUENCE].map(String::from));
    Vocabulary::from_tokens(
        tokens,
        SpecialIds {
            reasoning_open: base,
            reasoning_close: base + 1,
            end_of_sequence: base + 2,
        },
    )
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, specials: SpecialIds) -> Result<Self, TokenizerError> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        let expect = [
            (specials.reasoning_open, REASONING_OPEN),
            (specials.reasoning_close, REASONING_CLOSE),
            (specials.end_of_sequence, END_OF_SEQUENCE),
        ];
        for (id, lit) in expect {
            if tokens.get(id as usize).map(String::as_str) != Some(lit) {
                return Err(TokenizerError::InvalidVocabulary(format!(
                    "special id {id} must map to {lit}"
                )));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
            specials,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let repr: VocabularyRepr = serde_json::from_str(json)
            .map_err(|e| TokenizerError::InvalidVocabulary(e.to_string()))?;
        Self::from_tokens(repr.tokens, repr.specials)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyRepr {
            tokens: self.id_to_token.clone(),
            specials: self.specials,
        })
        .expect("vocabulary serializes")
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

impl Tokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        if text.trim().is_empty() {
            return Err(TokenizerError::EmptyText);
        }
        words(text)
            .map(|w| self.token_to_id.get(&w).copied().ok_or(TokenizerError::UnknownToken(w)))
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let parts = ids
            .iter()
            .map(|&id| self.token(id).ok_or(TokenizerError::UnknownId(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(" "))
    }

    fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    fn special_ids(&self) -> SpecialIds {
        self.specials
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Vocabulary {
        build_vocabulary(&["save phone number", "save address", "navigate to station"]).unwrap()
    }

    #[test]
    fn ids_follow_sorted_words_then_specials() {
        let v = fixture();
        let expected = ["address", "navigate", "number", "phone", "save", "station", "to"];
        for (i, w) in expected.iter().enumerate() {
            assert_eq!(v.id(w), Some(i as TokenId), "{w}");
        }
        assert_eq!(
            v.special_ids(),
            SpecialIds {
                reasoning_open: 7,
                reasoning_close: 8,
                end_of_sequence: 9
            }
        );
        assert_eq!(v.vocab_size(), 10);
        assert_eq!(v.token(9), Some("<EOS>"));
    }

    #[test]
    fn singleton_and_case_folding() {
        let v = build_vocabulary(&["a"]).unwrap();
        assert_eq!(v.id("a"), Some(0));
        assert_eq!(v.special_ids().reasoning_open, 1);
        assert_eq!(v.special_ids().end_of_sequence, 3);

        let v = build_vocabulary(&["Save PHONE"]).unwrap();
        assert_eq!(v.id("phone"), Some(0));
        assert_eq!(v.id("save"), Some(1));
    }

    #[test]
    fn empty_library_and_text() {
        let empty: [&str; 0] = [];
        assert_eq!(build_vocabulary(&empty), Err(TokenizerError::EmptyLibrary));
        assert_eq!(build_vocabulary(&["  "]), Err(TokenizerError::EmptyText));
        assert_eq!(fixture().encode(" "), Err(TokenizerError::EmptyText));
    }

    #[test]
    fn tokenize_fixture() {
        let v = fixture();
        assert_eq!(v.encode("save phone number").unwrap(), vec![4, 3, 2]);
        assert_eq!(v.encode("navigate to station").unwrap(), vec![1, 6, 5]);
        assert_eq!(
            v.encode("book hotel"),
            Err(TokenizerError::UnknownToken("book".into()))
        );
        assert_eq!(v.decode(&[4, 0]).unwrap(), "save address");
        assert_eq!(v.decode(&[42]), Err(TokenizerError::UnknownId(42)));
    }

    #[test]
    fn json_export_round_trips() {
        let v = fixture();
        let json = v.to_json();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["tokens"][0], "address");
        assert_eq!(value["specials"]["end_of_sequence"], 9);
        assert_eq!(Vocabulary::from_json(&json).unwrap(), v);
    }

    #[test]
    fn json_import_rejects_bad_specials() {
        let bad = r#"{"tokens":["a","<REASONING>","</REASONING>","<EOS>"],"specials":{"reasoning_open":1,"reasoning_close":1,"end_of_sequence":3}}"#;
        assert!(matches!(Vocabulary::from_json(bad), Err(TokenizerError::InvalidVocabulary(_))));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(lib in proptest::collection::vec("[A-Za-z]{1,6}( [A-Za-z]{1,6}){0,3}", 1..6), pick in any::<proptest::sample::Index>()) {
            let v = build_vocabulary(&lib).unwrap();
            let text = pick.get(&lib);
            let ids = v.encode(text).unwrap();
            prop_assert_eq!(v.encode(text).unwrap(), ids.clone());
            let normalized = text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&ids).unwrap(), normalized);
        }
    }
}
