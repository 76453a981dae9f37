use std::collections::{BTreeSet, HashMap};

/// Reserved id for out-of-vocabulary words.
pub const UNK: usize = 0;

/// Word-level vocabulary; id 0 is UNK, known words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| normalize_words(w.as_ref()))
            .collect();
        let words: Vec<String> = set.into_iter().collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i + 1)).collect();
        Self { words, index }
    }

    /// Vocabulary over every word appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(texts)
    }

    /// Number of ids, including UNK.
    pub fn len(&self) -> usize {
        self.words.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Token ids for `text`, truncated to `max_tokens`. Empty input yields `[UNK]`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = normalize_words(text)
            .iter()
            .take(max_tokens)
            .map(|w| self.id(w))
            .collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_punctuation() {
        let v = Vocab::from_words(["how", "to", "squat"]);
        let ids = v.tokenize("How to SQUAT?", 64);
        assert_eq!(ids, vec![v.id("how"), v.id("to"), v.id("squat")]);
        assert!(ids.iter().all(|&i| i != UNK));
    }

    #[test]
    fn empty_text_is_single_unk() {
        let v = Vocab::from_words(["a"]);
        assert_eq!(v.tokenize("", 64), vec![UNK]);
        assert_eq!(v.tokenize("  ?! ", 64), vec![UNK]);
    }

    #[test]
    fn truncates_and_maps_oov() {
        let v = Vocab::from_words(["word"]);
        let text = vec!["word"; 100].join(" ");
        assert_eq!(v.tokenize(&text, 64).len(), 64);
        assert_eq!(v.tokenize("unknown word", 64), vec![UNK, v.id("word")]);
    }
}
