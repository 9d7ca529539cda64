use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

const SPECIAL_NAMES: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

/// Private-use code points that stand in for the specials in decoded text,
/// so `encode(decode(ids)) == ids` holds for every UNK-free sequence.
const SPECIAL_CHARS: [char; 4] = ['\u{E000}', '\u{E001}', '\u{E002}', '\u{E003}'];

const FILE_HEADER: &str = "charvocab v1";

/// NFC, whitespace runs collapsed to one space, ends trimmed.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Character vocabulary shared by every model in an experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharTokenizer {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharTokenizer {
    /// Builds from characters in id order; duplicates and reserved code
    /// points are rejected.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if SPECIAL_CHARS.contains(&c) {
                return Err(Error::Config(format!("reserved character U+{:04X} in vocabulary", c as u32)));
            }
            if index.insert(c, NUM_SPECIALS + i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Distinct characters of `texts` in first-appearance order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for text in texts {
            for c in text.chars() {
                if c == '\n' || SPECIAL_CHARS.contains(&c) {
                    continue;
                }
                if seen.insert(c) {
                    chars.push(c);
                }
            }
        }
        if chars.is_empty() {
            return Err(Error::EmptyVocab);
        }
        Self::from_chars(chars)
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS as usize + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        if let Some(pos) = SPECIAL_CHARS.iter().position(|&s| s == c) {
            return Some(pos as u32);
        }
        self.index.get(&c).copied()
    }

    /// Characters outside the vocabulary map to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect()
    }

    /// BOS + text + EOS.
    pub fn encode_document(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id {
                0..=3 => SPECIAL_CHARS[id as usize],
                _ => self
                    .chars
                    .get((id - NUM_SPECIALS) as usize)
                    .copied()
                    .unwrap_or(SPECIAL_CHARS[UNK as usize]),
            })
            .collect()
    }

    /// Decodes, dropping special tokens.
    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIALS)
            .filter_map(|&id| self.chars.get((id - NUM_SPECIALS) as usize))
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(FILE_HEADER);
        out.push('\n');
        for name in SPECIAL_NAMES {
            out.push_str(name);
            out.push('\n');
        }
        for &c in &self.chars {
            out.push_str(&format_vocab_entry(c));
            out.push('\n');
        }
        out
    }

    pub fn parse_file_string(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        if lines.next() != Some(FILE_HEADER) {
            return Err(Error::Config(format!("tokenizer file must start with {FILE_HEADER:?}")));
        }
        for name in SPECIAL_NAMES {
            if lines.next() != Some(name) {
                return Err(Error::Config(format!("tokenizer file: expected special {name}")));
            }
        }
        let mut chars = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            chars.push(parse_vocab_entry(line).ok_or_else(|| {
                Error::Config(format!("tokenizer file: bad entry {line:?} at id {}", i + 4))
            })?);
        }
        Self::from_chars(chars)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_file_string(&text)
    }
}

/// A single literal character or a `U+XXXX` escape.
pub(crate) fn parse_vocab_entry(entry: &str) -> Option<char> {
    let mut it = entry.chars();
    let first = it.next()?;
    if it.next().is_none() {
        return Some(first);
    }
    let hex = entry.strip_prefix("U+")?;
    char::from_u32(u32::from_str_radix(hex, 16).ok()?)
}

pub(crate) fn format_vocab_entry(c: char) -> String {
    if c.is_whitespace() || c.is_control() {
        format!("U+{:04X}", c as u32)
    } else {
        c.to_string()
    }
}

/// Builds the shared vocabulary from normalized lines of every file.
pub fn build_tokenizer(corpus_files: &[&Path]) -> Result<CharTokenizer> {
    if corpus_files.is_empty() {
        return Err(Error::EmptyVocab);
    }
    let mut texts = Vec::new();
    for path in corpus_files {
        let bytes = fs::read(path).map_err(|e| Error::io(*path, e))?;
        for (lineno, line) in bytes.split(|&b| b == b'\n').enumerate() {
            let line = std::str::from_utf8(line).map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: format!("invalid UTF-8: {e}"),
            })?;
            texts.push(normalize_text(line));
        }
    }
    CharTokenizer::from_texts(texts.iter().map(String::as_str))
}
