//! Word-level vocabulary with fixed special ids.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIAL: usize = 4;

const SPECIAL_WORDS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
}

impl Vocab {
    /// Ids are assigned by descending frequency, then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::Parameter("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !SPECIAL_WORDS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Vocab::from_words(
            SPECIAL_WORDS
                .iter()
                .map(|s| s.to_string())
                .chain(words.into_iter().map(|(w, _)| w))
                .collect(),
        ))
    }

    fn from_words(id_to_word: Vec<String>) -> Vocab {
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab {
            word_to_id,
            id_to_word,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }

    /// `BOS tokens… EOS PAD…`, exactly `len` ids. Over-long text is cut so
    /// that EOS always survives.
    pub fn encode(&self, text: &str, len: usize) -> TokenSequence {
        assert!(len >= 3, "sequence length must be at least 3");
        let mut ids = Vec::with_capacity(len);
        ids.push(BOS);
        ids.extend(normalize(text).iter().take(len - 2).map(|w| self.id(w)));
        ids.push(EOS);
        ids.resize(len, PAD);
        TokenSequence { ids }
    }

    /// Joins the words up to the first EOS, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.content_words(ids).join(" ")
    }

    pub fn content_words<'a>(&'a self, ids: &[usize]) -> Vec<&'a str> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= NUM_SPECIAL)
            .filter_map(|&i| self.word(i))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            words: self.id_to_word.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(text)?;
        Vocab::from_word_list(file.words)
    }

    /// Rebuilds a vocabulary from its id-ordered word list.
    pub fn from_word_list(words: Vec<String>) -> Result<Vocab> {
        if words.len() < NUM_SPECIAL
            || words[..NUM_SPECIAL]
                .iter()
                .zip(SPECIAL_WORDS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Validation("vocab.json must start with the four special tokens".into()));
        }
        let vocab = Vocab::from_words(words);
        if vocab.word_to_id.len() != vocab.id_to_word.len() {
            return Err(Error::Validation("vocab.json contains duplicate words".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&text)
    }
}

/// Fixed-length token ids: BOS first, EOS before any PAD suffix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids strictly between BOS and EOS.
    pub fn content(&self) -> &[usize] {
        let start = usize::from(self.ids.first() == Some(&BOS));
        let end = self.ids.iter().position(|&i| i == EOS).unwrap_or(self.ids.len());
        &self.ids[start..end.max(start)]
    }

    pub fn is_well_formed(&self, vocab_size: usize) -> bool {
        if self.ids.first() != Some(&BOS) || self.ids.iter().any(|&i| i >= vocab_size) {
            return false;
        }
        let Some(eos) = self.ids.iter().position(|&i| i == EOS) else {
            return false;
        };
        self.ids[..eos].iter().all(|&i| i != PAD) && self.ids[eos + 1..].iter().all(|&i| i == PAD)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_counts_words_and_keeps_specials() {
        // five distinct words: road, closure, on, elm, oak
        let v = Vocab::build(&["road closure on elm", "closure on oak"], 1).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(&v.words()[..4], &["<pad>", "<bos>", "<eos>", "<unk>"]);
        // frequency 2 first, then lexicographic
        assert_eq!(v.word(4), Some("closure"));
        assert_eq!(v.word(5), Some("on"));

        let v2 = Vocab::build(&["road closure on elm", "closure on oak"], 2).unwrap();
        assert_eq!(v2.len(), 6);
        assert_eq!(&v2.words()[4..], &["closure", "on"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(Vocab::build(&empty, 1).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_and_unk() {
        let v = Vocab::build(&["Road closure on Elm, near oak"], 1).unwrap();
        let seq = v.encode("road CLOSURE on elm", 8);
        assert_eq!(seq.len(), 8);
        assert!(seq.is_well_formed(v.len()));
        assert_eq!(v.decode(&seq.ids), "road closure on elm");
        let seq = v.encode("pine closure", 5);
        assert_eq!(seq.ids[1], UNK);
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = Vocab::build(&["a b c"], 1).unwrap();
        let seq = v.encode("a b c", 4);
        assert_eq!(seq.ids, vec![BOS, v.id("a"), v.id("b"), EOS]);
        assert!(seq.is_well_formed(v.len()));
    }

    #[test]
    fn json_roundtrip() {
        let v = Vocab::build(&["closure on elm"], 1).unwrap();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::from_json(r#"{"words":["a","b"]}"#).is_err());
    }
}
