use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use super::DataError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;

/// Literal that separates fields in a built input sequence.
pub const SEP_MARKER: &str = "[SEP]";

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[SEP]", "[MASK]"];

/// A lowercased token and the byte range it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub range: Range<usize>,
}

/// Lowercased whitespace-and-punctuation split. Alphanumeric runs form one
/// token, every other non-space character is a token on its own, and the
/// literal `[SEP]` is kept whole.
pub fn split_tokens(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.push(Token {
                text: text[s..end].to_lowercase(),
                range: s..end,
            });
        }
    };
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        flush(&mut out, &mut word_start, i);
        if c.is_whitespace() {
            continue;
        }
        if text[i..].starts_with(SEP_MARKER) {
            out.push(Token {
                text: SEP_MARKER.to_string(),
                range: i..i + SEP_MARKER.len(),
            });
            for _ in 1..SEP_MARKER.len() {
                iter.next();
            }
            continue;
        }
        out.push(Token {
            text: c.to_lowercase().collect(),
            range: i..i + c.len_utf8(),
        });
    }
    flush(&mut out, &mut word_start, text.len());
    out
}

/// Token ↔ id mapping with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved entries followed by `words` in the given order (duplicates dropped).
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED
            .iter()
            .copied()
            .map(str::to_string)
            .chain(words.into_iter().map(|w| w.as_ref().to_string()))
        {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len());
                v.tokens.push(w);
            }
        }
        v
    }

    /// Frequency-ranked vocabulary over `texts`, at most `cap` entries
    /// including the reserved ones. Ties break lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for tok in split_tokens(t) {
                if tok.text != SEP_MARKER {
                    *counts.entry(tok.text).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = cap.saturating_sub(RESERVED.len());
        Vocabulary::from_words(ranked.into_iter().take(room).map(|(w, _)| w))
    }

    /// Restores a vocabulary saved by [`Vocabulary::tokens`]; the reserved
    /// entries must come first.
    pub fn from_tokens(tokens: &[String]) -> Result<Self, DataError> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(DataError::Vocabulary(
                "reserved tokens missing or out of order".into(),
            ));
        }
        let v = Vocabulary::from_words(&tokens[RESERVED.len()..]);
        if v.len() != tokens.len() {
            return Err(DataError::Vocabulary("duplicate tokens".into()));
        }
        Ok(v)
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

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Ids for the words of `text`.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        split_tokens(text)
            .iter()
            .map(|t| self.id(&t.text))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| crate::Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Ok(Vocabulary::from_tokens(&tokens)?)
    }
}
