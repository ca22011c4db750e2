use crate::error::{contract, Error, Result};

/// Reserved word for the unconditional prompt (index 0).
pub const NULL_WORD: &str = "<null>";
/// Reserved word whose embedding row is learned during personalisation.
pub const SUBJECT_WORD: &str = "<S*>";

/// Closed prompt vocabulary. Index 0 is the null word; the subject word,
/// when present, is the last index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptVocab {
    words: Vec<String>,
    subject: Option<usize>,
}

impl PromptVocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(NULL_WORD) {
            return Err(contract("prompt vocabulary must start with the null word"));
        }
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(contract(format!("invalid prompt word `{w}`")));
            }
            if words[..i].contains(w) {
                return Err(contract(format!("duplicate prompt word `{w}`")));
            }
        }
        let subject = words.iter().position(|w| w == SUBJECT_WORD);
        if let Some(s) = subject {
            if s + 1 != words.len() {
                return Err(contract(
                    "the subject word must be the last vocabulary entry",
                ));
            }
        }
        Ok(Self { words, subject })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn subject_index(&self) -> Option<usize> {
        self.subject
    }

    pub fn index(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocab(word.to_string()))
    }

    /// Whitespace-separated words; the empty prompt encodes as the null word.
    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| self.index(w))
            .collect::<Result<_>>()?;
        Ok(if ids.is_empty() { vec![0] } else { ids })
    }

    pub fn null_prompt() -> Vec<usize> {
        vec![0]
    }

    /// Newline-joined words, as stored in checkpoints.
    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        self.words.join("\n").into_bytes()
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Corrupt("vocabulary is not UTF-8".into()))?;
        Self::new(text.split('\n').map(String::from).collect())
            .map_err(|e| Error::Corrupt(e.to_string()))
    }
}
