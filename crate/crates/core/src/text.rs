//! Word-level tokenizer and closed vocabulary.
//!
//! Words are runs of `[a-z0-9_]` after lowercasing; each of `? . , ; |` is
//! a token of its own; everything else separates tokens.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const TASK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<task>"];

const PUNCT: &[char] = &['?', '.', ',', ';', '|'];

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if PUNCT.contains(&ch) {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Joins tokens with spaces, attaching `? . , ;` to the preceding word and
/// `|` to both neighbours.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        match t {
            "|" => {
                out.push('|');
                glue_next = true;
            }
            "?" | "." | "," | ";" => {
                out.push_str(t);
                glue_next = false;
            }
            _ => {
                if !glue_next {
                    out.push(' ');
                }
                out.push_str(t);
                glue_next = false;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved block followed by the sorted distinct tokens of `texts`.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = texts.into_iter().flat_map(|t| tokenize(t.as_ref())).collect();
        words.sort();
        words.dedup();
        Self::from_tokens(words).expect("tokenizer output is never reserved")
    }

    pub fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Domain(format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Domain(format!("duplicate token `{t}`")));
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

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Domain(format!("token `{w}` not in vocabulary")))
            })
            .collect()
    }

    /// Text for `ids`, skipping reserved tokens and unknown ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect();
        detokenize(&words)
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, want) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(want) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token `{want}`"),
                });
            }
        }
        Self::from_tokens(lines[RESERVED.len()..].iter().map(|s| s.to_string()).collect()).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// FNV-1a of the file form, hex. Checkpoints record it so evaluation
    /// can refuse a dataset with a different vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_file_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(
            tokenize("The Patient is on top of the operating table."),
            vec!["the", "patient", "is", "on", "top", "of", "the", "operating", "table", "."]
        );
        assert_eq!(
            tokenize("patient|on_top_of|operating_table; nurse|next_to|monitor"),
            vec![
                "patient", "|", "on_top_of", "|", "operating_table", ";", "nurse", "|", "next_to", "|", "monitor"
            ]
        );
        assert!(tokenize("  ").is_empty());
    }

    #[test]
    fn detokenize_reattaches() {
        let s = "Is there a surgeon in the room?";
        assert_eq!(detokenize(&tokenize(s)), s.to_lowercase());
        let t = "patient|on_top_of|operating_table; nurse|next_to|monitor";
        assert_eq!(detokenize(&tokenize(t)), t);
    }

    #[test]
    fn vocabulary_reserved_and_round_trip() {
        let v = Vocabulary::from_texts(["the nurse is here.", "is there a nurse?"]);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<bos>"));
        assert_eq!(v.token(EOS), Some("<eos>"));
        assert_eq!(v.token(TASK), Some("<task>"));
        let ids = v.encode("Is there a nurse?").unwrap();
        assert_eq!(v.decode(&ids), "is there a nurse?");
        assert!(matches!(v.encode("surgeon"), Err(Error::Domain(_))));
        let back = Vocabulary::parse(&v.to_file_string(), Path::new("vocab")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn parse_rejects_missing_reserved_block() {
        match Vocabulary::parse("<pad>\n<bos>\nfoo\n", Path::new("v")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "[a-zA-Z ?.,;|_]{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&detokenize(&once)), once);
        }
    }
}
