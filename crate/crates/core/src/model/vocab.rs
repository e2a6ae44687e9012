//! Shared token vocabulary with reserved regions.
//!
//! Layout: `<|pad|>`, `<|bos|>`, `<|eos|>`, then task tags in canonical task
//! order, then special label tokens (speaker labels, slot-boundary markers),
//! then word tokens in sorted order. Indices are dense; the layout is a pure
//! function of the token lists, so any permutation of the training order
//! yields the same vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

pub const PAD: &str = "<|pad|>";
pub const BOS: &str = "<|bos|>";
pub const EOS: &str = "<|eos|>";

/// True for `<|…|>`-style reserved tokens.
pub fn is_bracket_token(token: &str) -> bool {
    token.starts_with("<|") && token.ends_with("|>") && token.len() > 4
}

/// True for slot-boundary markers like `B-city` / `E-city`.
pub fn is_slot_marker(token: &str) -> bool {
    (token.starts_with("B-") || token.starts_with("E-")) && token.len() > 2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    tag_count: usize,
    special_count: usize,
}

impl Vocabulary {
    /// Assemble the vocabulary from task tags, special label tokens, and
    /// plain word tokens. Tags keep their given order; specials and words
    /// are sorted and de-duplicated.
    pub fn build(tags: &[String], specials: &[String], words: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into()];

        let mut seen_tags = BTreeSet::new();
        for tag in tags {
            if !is_bracket_token(tag) {
                return Err(ModelError::MalformedToken {
                    token: tag.clone(),
                    expected: "task tag of the form <|NAME|>",
                });
            }
            if !seen_tags.insert(tag.clone()) {
                return Err(ModelError::DuplicateToken(tag.clone()));
            }
            tokens.push(tag.clone());
        }

        let special_set: BTreeSet<&String> = specials.iter().collect();
        for special in &special_set {
            if !is_bracket_token(special) && !is_slot_marker(special) {
                return Err(ModelError::MalformedToken {
                    token: (*special).clone(),
                    expected: "special token (<|…|> or B-/E- marker)",
                });
            }
            if seen_tags.contains(*special) || tokens.iter().any(|t| &t == special) {
                return Err(ModelError::DuplicateToken((*special).clone()));
            }
            tokens.push((*special).clone());
        }

        let word_set: BTreeSet<&String> = words.iter().collect();
        for word in &word_set {
            if is_bracket_token(word) || is_slot_marker(word) {
                return Err(ModelError::MalformedToken {
                    token: (*word).clone(),
                    expected: "plain word token",
                });
            }
            tokens.push((*word).clone());
        }

        let mut index = BTreeMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(ModelError::DuplicateToken(token.clone()));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            tag_count: tags.len(),
            special_count: special_set.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn bos_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| ModelError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(ModelError::TokenIdOutOfRange {
                id,
                vocab: self.tokens.len(),
            })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Task-tag ids, in canonical task order.
    pub fn tag_ids(&self) -> impl Iterator<Item = usize> + '_ {
        3..3 + self.tag_count
    }

    pub fn is_tag(&self, id: usize) -> bool {
        (3..3 + self.tag_count).contains(&id)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(String::from)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn layout_is_dense_and_reserved_regions_ordered() {
        let v = Vocabulary::build(
            &strings(&["<|KS|>", "<|SID|>"]),
            &strings(&["<|speaker1|>", "B-city", "E-city"]),
            &strings(&["yes", "no"]),
        )
        .unwrap();
        assert_eq!(v.token(0).unwrap(), PAD);
        assert_eq!(v.token(1).unwrap(), BOS);
        assert_eq!(v.token(2).unwrap(), EOS);
        assert_eq!(v.token(3).unwrap(), "<|KS|>");
        assert_eq!(v.token(4).unwrap(), "<|SID|>");
        assert!(v.is_tag(3) && v.is_tag(4) && !v.is_tag(5));
        // Dense, unique ids covering the whole range.
        let ids: std::collections::BTreeSet<usize> = (0..v.len())
            .map(|i| v.id(v.token(i).unwrap()).unwrap())
            .collect();
        assert_eq!(ids.len(), v.len());
        assert_eq!(v.len(), 3 + 2 + 3 + 2);
    }

    #[test]
    fn word_order_is_independent_of_input_order() {
        let a = Vocabulary::build(&strings(&["<|KS|>"]), &[], &strings(&["b", "a", "c"])).unwrap();
        let b = Vocabulary::build(&strings(&["<|KS|>"]), &[], &strings(&["c", "b", "a"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tags_never_collide_with_words() {
        let err = Vocabulary::build(&strings(&["<|KS|>"]), &[], &strings(&["<|KS|>"]));
        assert!(err.is_err());
        let err = Vocabulary::build(&strings(&["<|KS|>"]), &strings(&["B-city"]), &strings(&["B-city"]));
        assert!(err.is_err());
    }

    #[test]
    fn duplicate_tags_rejected() {
        let err = Vocabulary::build(&strings(&["<|KS|>", "<|KS|>"]), &[], &[]);
        assert!(matches!(err, Err(ModelError::DuplicateToken(_))));
    }

    #[test]
    fn malformed_tag_rejected() {
        assert!(Vocabulary::build(&strings(&["KS"]), &[], &[]).is_err());
        assert!(Vocabulary::build(&[], &strings(&["plainword"]), &[]).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(
            &strings(&["<|ER|>"]),
            &[],
            &strings(&["happy", "is", "Emotion", "."]),
        )
        .unwrap();
        let toks = strings(&["<|ER|>", "Emotion", "is", "happy", "."]);
        let ids = v.encode(&toks).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), toks);
        assert!(v.id("sad").is_err());
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let v = Vocabulary::build(&strings(&["<|IC|>"]), &[], &strings(&["go"])).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("go").unwrap(), v.id("go").unwrap());
    }
}
