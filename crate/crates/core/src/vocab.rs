//! Lower-case word tokenizer and vocabulary for the synthetic reports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[pad]";
pub const UNK: &str = "[unk]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Splits on anything that is not an ASCII letter or digit, lower-cased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Sorted, de-duplicated words of `texts`, after the pad and unknown
    /// tokens.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(words);
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Token ids of `text`, truncated to `max_length`.
    pub fn encode(&self, text: &str, max_length: usize) -> Vec<u32> {
        tokenize(text).iter().take(max_length).map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("Findings consistent with Edema."), vec!["findings", "consistent", "with", "edema"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn vocabulary_lookup() {
        let v = Vocabulary::build(["b a.", "a c"]);
        assert_eq!(v.tokens(), &[PAD, UNK, "a", "b", "c"]);
        assert_eq!(v.encode("c a zzz", 8), vec![4, 2, UNK_ID]);
        assert_eq!(v.encode("c a zzz", 2), vec![4, 2]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
