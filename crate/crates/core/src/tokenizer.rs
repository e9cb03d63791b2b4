//! Word-level tokenizer shared by prompts and item titles.
//!
//! Pieces are: the four slot markers, `\n`, single ASCII digits, runs of
//! letters, and any other non-space character on its own. Case is kept so
//! option letters stay distinct from ordinary words.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::LETTERS;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const ITEM_OPEN: &str = "[ITEM]";
pub const ITEM_CLOSE: &str = "[/ITEM]";
pub const INTERVAL_OPEN: &str = "[INTERVAL]";
pub const INTERVAL_CLOSE: &str = "[/INTERVAL]";
pub const NEWLINE: &str = "\n";
pub const MARKERS: [&str; 4] = [ITEM_OPEN, ITEM_CLOSE, INTERVAL_OPEN, INTERVAL_CLOSE];
const SPECIALS: [&str; 7] = [PAD, UNK, ITEM_OPEN, ITEM_CLOSE, INTERVAL_OPEN, INTERVAL_CLOSE, NEWLINE];

/// Splits text into pieces. Whitespace other than `\n` only separates.
pub fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while let Some(c) = rest.chars().next() {
        if c == '[' || c == '<' {
            for special in SPECIALS {
                if rest.starts_with(special) {
                    out.push(&rest[..special.len()]);
                    rest = &rest[special.len()..];
                    continue 'outer;
                }
            }
        }
        let len = c.len_utf8();
        if c == '\n' {
            out.push(&rest[..1]);
            rest = &rest[1..];
        } else if c.is_whitespace() {
            rest = &rest[len..];
        } else if is_word_char(c) {
            let end = rest.char_indices().find(|&(_, ch)| !is_word_char(ch)).map_or(rest.len(), |(i, _)| i);
            out.push(&rest[..end]);
            rest = &rest[end..];
        } else {
            out.push(&rest[..len]);
            rest = &rest[len..];
        }
    }
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !c.is_ascii_digit()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary over the pieces of `texts`: specials, digits and option
    /// letters first, then every other piece in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut fixed: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        fixed.extend((0..10).map(|d| d.to_string()));
        fixed.extend(LETTERS.iter().map(|l| l.to_string()));
        let mut rest = BTreeSet::new();
        for text in texts {
            for p in pieces(text) {
                if !fixed.iter().any(|f| f == p) {
                    rest.insert(p.to_string());
                }
            }
        }
        fixed.extend(rest);
        Self::from_tokens(fixed).expect("built vocabulary has no duplicates")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        for s in SPECIALS {
            if !index.contains_key(s) {
                return Err(Error::Vocabulary(format!("vocabulary lacks {s:?}")));
            }
        }
        Ok(Self { tokens, index })
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<usize> {
        self.id(token).ok_or_else(|| Error::Vocabulary(format!("token {token:?} is not in the vocabulary")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn letter_id(&self, letter: char) -> Result<usize> {
        self.require(&letter.to_string())
    }

    /// Ids of the 20 option letters, in order.
    pub fn letter_ids(&self) -> Vec<usize> {
        LETTERS.iter().map(|l| self.index[&l.to_string()]).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        pieces(text).into_iter().map(|p| self.id(p).unwrap_or_else(|| self.unk())).collect()
    }

    /// Pieces joined by single spaces; `\n` is emitted bare.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id).unwrap_or(UNK);
            if !out.is_empty() && !out.ends_with('\n') && t != NEWLINE {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }

    /// Restores the lookup index after deserialisation.
    pub fn reindex(self) -> Result<Self> {
        Self::from_tokens(self.tokens)
    }
}
