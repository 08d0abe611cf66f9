//! Closed vocabulary and the lowercase whitespace tokenizer shared by every
//! text-facing component.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const CLS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;
pub const BOS: TokenId = 4;
pub const EOS: TokenId = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]", "[BOS]", "[EOS]"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

/// Lowercases, splits `,` and `.` into their own tokens, then splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if ch == ',' || ch == '.' {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Specials occupy ids 0..6; `words` follow in order, duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = list.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if seen.insert(w.clone()) {
                list.push(w);
            }
        }
        Self::from(list)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !is_special(id))
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::new(["hello"]);
        assert_eq!(v.word(CLS), "[CLS]");
        assert_eq!(v.word(EOS), "[EOS]");
        assert_eq!(v.id("hello"), 6);
    }

    #[test]
    fn tokenizer_lowercases_and_splits_commas() {
        assert_eq!(tokenize("The scene is Continuous, while"), ["the", "scene", "is", "continuous", ",", "while"]);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocab::new(["a"]);
        assert_eq!(v.encode("a zebra"), vec![6, UNK]);
    }

    #[test]
    fn decode_skips_specials() {
        let v = Vocab::new(["a", "b"]);
        assert_eq!(v.decode(&[BOS, 6, 7, EOS]), "a b");
    }
}
