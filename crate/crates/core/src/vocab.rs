//! Token ↔ id mapping with reserved special tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{structural, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times; ordinary tokens get ids
    /// from 4 upward in lexicographic order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for tok in tokenize(c) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let tokens = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .map(|(t, _)| t);
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let id_to_token: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens with single spaces; stops at the first EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[BOS, w1 .. wn]` decoder input and `[w1 .. wn, EOS]` targets.
    pub fn teacher_forcing_pair(&self, caption: &str) -> (Vec<usize>, Vec<usize>) {
        let words = self.encode(caption);
        let mut input = Vec::with_capacity(words.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&words);
        let mut target = words;
        target.push(EOS);
        (input, target)
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.token_to_id
            .iter()
            .map(|(t, &i)| (t.clone(), i))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_map()).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut id_to_token = vec![None; map.len()];
        for (tok, &id) in &map {
            let slot = id_to_token
                .get_mut(id)
                .ok_or_else(|| structural(format!("vocabulary id {id} out of range")))?;
            if slot.is_some() {
                return Err(structural(format!("vocabulary id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token
            .into_iter()
            .map(|t| t.ok_or_else(|| structural("vocabulary ids are not contiguous")))
            .collect::<Result<_>>()?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(structural(format!("reserved id {i} must be {s}")));
            }
        }
        Ok(Self::from_tokens(id_to_token.into_iter().skip(SPECIALS.len())))
    }

    /// SHA-256 of the canonical JSON map, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_map()).expect("vocabulary serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        let text = serde_json::to_string(&map).map_err(serde::de::Error::custom)?;
        Vocabulary::from_json(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_ordering() {
        let v = Vocabulary::build(["a disc pushes a box", "a box leaves a Ring"], 1);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("box"), 5);
        assert_eq!(v.id("ring"), 9);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.len(), 10);
    }

    #[test]
    fn frequency_threshold() {
        let v = Vocabulary::build(["a a b"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(["a disc jumps over a bar"], 1);
        let ids = v.encode("a disc jumps over a bar");
        assert_eq!(v.decode(&ids), "a disc jumps over a bar");
        let mut with_eos = ids.clone();
        with_eos.push(EOS);
        with_eos.push(v.id("disc"));
        assert_eq!(v.decode(&with_eos), "a disc jumps over a bar");
        let (input, target) = v.teacher_forcing_pair("a disc");
        assert_eq!(input, vec![BOS, v.id("a"), v.id("disc")]);
        assert_eq!(target, vec![v.id("a"), v.id("disc"), EOS]);
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let v = Vocabulary::build(["a wedge pushes a blob"], 1);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let other = Vocabulary::build(["a wedge pushes a disc"], 1);
        assert_ne!(other.hash(), v.hash());
        assert!(Vocabulary::from_json(r#"{"<pad>":0,"x":2}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"x":0,"<bos>":1,"<eos>":2,"<unk>":3}"#).is_err());
    }
}
