//! Word-level tokenizer with fixed reserved ids.
//!
//! The first six ids are structural and never produced by vocabulary
//! induction: PAD 0, UNK 1, EOS 2, MASK1 3, MASK2 4, END 5. MASK1/MASK2 are
//! the infilling sentinels rendered as `<X>`/`<Y>`, END is the target
//! terminator rendered as `<Z>`. Tokenization splits on whitespace and then
//! peels leading and trailing ASCII punctuation off each piece; interior
//! punctuation stays put, so `7.1.1` is one token while `California.` is two.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ZettError;
use crate::Result;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK1: u32 = 3;
pub const MASK2: u32 = 4;
pub const END: u32 = 5;

/// Number of reserved ids; induced tokens start here.
pub const RESERVED: u32 = 6;

const SENTINELS: [(&str, u32); 3] = [("<X>", MASK1), ("<Y>", MASK2), ("<Z>", END)];
const RESERVED_RENDER: [&str; 6] = ["<pad>", "<unk>", "</s>", "<X>", "<Y>", "<Z>"];

pub fn sentinel_id(token: &str) -> Option<u32> {
    SENTINELS.iter().find(|(s, _)| *s == token).map(|&(_, id)| id)
}

/// Splits `text` into tokens: whitespace first, then leading/trailing ASCII
/// punctuation peeled one character at a time. The literal sentinels `<X>`,
/// `<Y>`, `<Z>` are kept whole even though `<` and `>` are punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split_whitespace() {
        split_piece(piece, &mut out);
    }
    out
}

fn split_piece<'a>(piece: &'a str, out: &mut Vec<String>) {
    let mut s: &'a str = piece;
    let mut tail: Vec<&'a str> = Vec::new();
    'outer: while !s.is_empty() {
        if sentinel_id(s).is_some() {
            out.push(s.to_string());
            break;
        }
        for (sent, _) in SENTINELS {
            if s.starts_with(sent) {
                out.push(sent.to_string());
                s = &s[sent.len()..];
                continue 'outer;
            }
            if s.ends_with(sent) {
                let cut = s.len() - sent.len();
                tail.push(&s[cut..]);
                s = &s[..cut];
                continue 'outer;
            }
        }
        let first = s.chars().next().unwrap();
        if first.is_ascii_punctuation() {
            let w = first.len_utf8();
            out.push(s[..w].to_string());
            s = &s[w..];
            continue;
        }
        let last = s.chars().next_back().unwrap();
        if last.is_ascii_punctuation() {
            let cut = s.len() - last.len_utf8();
            tail.push(&s[cut..]);
            s = &s[..cut];
            continue;
        }
        out.push(s.to_string());
        break;
    }
    out.extend(tail.drain(..).rev().map(str::to_string));
}

/// Induced vocabulary. Ids `0..6` are reserved; induced tokens are assigned
/// ids from 6 in order of descending corpus frequency, ties broken by
/// lexicographic order, so identical corpora produce identical id maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_count: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_count: u32,
}

impl Vocabulary {
    /// Counts tokens over `corpus` lines and keeps those with frequency at
    /// least `min_count`. Sentinel literals never enter the count.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: u32) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                if sentinel_id(&tok).is_none() {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count as u64).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect(), min_count)
            .expect("induced token list cannot collide with reserved ids")
    }

    /// Builds a vocabulary from an explicit non-reserved token list in id
    /// order. Rejects duplicates and sentinel literals.
    pub fn from_tokens(tokens: Vec<String>, min_count: u32) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if sentinel_id(tok).is_some() {
                return Err(ZettError::validation(format!("reserved token {tok:?} in vocabulary list")));
            }
            if index.insert(tok.clone(), RESERVED + i as u32).is_some() {
                return Err(ZettError::validation(format!("duplicate token {tok:?} in vocabulary list")));
            }
        }
        Ok(Vocabulary { tokens, index, min_count })
    }

    /// Total id count including the six reserved ids.
    pub fn size(&self) -> usize {
        RESERVED as usize + self.tokens.len()
    }

    pub fn min_count(&self) -> u32 {
        self.min_count
    }

    /// Id for a single already-split token: sentinels map to their reserved
    /// ids, unknown tokens to UNK.
    pub fn token_id(&self, token: &str) -> u32 {
        sentinel_id(token).or_else(|| self.index.get(token).copied()).unwrap_or(UNK)
    }

    /// Id only if the token is induced (not reserved, not UNK).
    pub fn content_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.token_id(t)).collect()
    }

    /// Renders ids back to text, reserved ids literally, tokens joined with
    /// single spaces. Out-of-range ids are an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{}", self.render(id)?).unwrap();
        }
        Ok(out)
    }

    /// Single-id rendering used by `decode` and span detokenization.
    pub fn render(&self, id: u32) -> Result<&str> {
        if id < RESERVED {
            Ok(RESERVED_RENDER[id as usize])
        } else {
            self.tokens
                .get((id - RESERVED) as usize)
                .map(String::as_str)
                .ok_or_else(|| ZettError::validation(format!("token id {id} out of range for vocabulary of size {}", self.size())))
        }
    }

    /// All induced ids, in id order.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tokens.len() as u32).map(|i| RESERVED + i)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { tokens: self.tokens.clone(), min_count: self.min_count };
        let body = serde_json::to_string_pretty(&file)
            .map_err(|e| ZettError::validation(format!("vocabulary serialization failed: {e}")))?;
        std::fs::write(path, body + "\n").map_err(|e| ZettError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let body =
            std::fs::read_to_string(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
        let file: VocabFile = serde_json::from_str(&body)
            .map_err(|e| ZettError::Parse { path: path.display().to_string(), line: e.line(), message: e.to_string() })?;
        Vocabulary::from_tokens(file.tokens, file.min_count)
    }

    /// Content hash binding checkpoints to the vocabulary they were trained
    /// with; hex SHA-256 over the canonical token list serialization.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let file = VocabFile { tokens: self.tokens.clone(), min_count: self.min_count };
        let body = serde_json::to_string(&file).expect("vocabulary is serializable");
        let mut h = Sha256::new();
        h.update(body.as_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}
