use std::fs;
use std::path::Path;

use serde::Serialize;

use super::tokenizer::{normalize_text, CharTokenizer};
use crate::error::{Error, Result};

/// Tokenized documents of one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Corpus {
    pub documents: Vec<Vec<u32>>,
    pub language_tag: String,
    pub source_manifest: Vec<(String, usize)>,
}

impl Corpus {
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        tokenizer: &CharTokenizer,
        language_tag: &str,
        source: &str,
    ) -> Self {
        let documents: Vec<Vec<u32>> = texts
            .into_iter()
            .map(normalize_text)
            .filter(|t| !t.is_empty())
            .map(|t| tokenizer.encode_document(&t))
            .collect();
        let count = documents.len();
        Self {
            documents,
            language_tag: language_tag.to_string(),
            source_manifest: vec![(source.to_string(), count)],
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// First `n` documents, for cheap evaluation subsets.
    pub fn truncated(&self, n: usize) -> Corpus {
        let documents: Vec<_> = self.documents.iter().take(n).cloned().collect();
        Corpus {
            source_manifest: vec![(format!("{}[..{}]", self.language_tag, documents.len()), documents.len())],
            documents,
            language_tag: self.language_tag.clone(),
        }
    }

    /// Canonical byte encoding, for equality checks across loads.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("corpus serializes")
    }
}

/// One document per line: normalized, wrapped in BOS/EOS, empty lines skipped.
pub fn load_corpus(path: &Path, tokenizer: &CharTokenizer, language_tag: &str) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut documents = Vec::new();
    for (lineno, line) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(line).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason: format!("invalid UTF-8: {e}"),
        })?;
        let text = normalize_text(line);
        if !text.is_empty() {
            documents.push(tokenizer.encode_document(&text));
        }
    }
    let count = documents.len();
    Ok(Corpus {
        documents,
        language_tag: language_tag.to_string(),
        source_manifest: vec![(path.display().to_string(), count)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textdata::tokenizer::{BOS, EOS, UNK};
    use std::io::Write;

    fn write_tmp(contents: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents).unwrap();
        f
    }

    #[test]
    fn lines_become_bos_text_eos() {
        let tok = CharTokenizer::from_chars(vec!['a', 'b']).unwrap();
        let f = write_tmp(b"ab\n\nba\n");
        let c = load_corpus(f.path(), &tok, "L1").unwrap();
        assert_eq!(c.documents, vec![vec![BOS, 4, 5, EOS], vec![BOS, 5, 4, EOS]]);
        assert_eq!(c.source_manifest[0].1, 2);
    }

    #[test]
    fn out_of_vocab_becomes_unk() {
        let tok = CharTokenizer::from_chars(vec!['a', 'b']).unwrap();
        let f = write_tmp(b"aqb\n");
        let c = load_corpus(f.path(), &tok, "L1").unwrap();
        assert_eq!(c.documents[0], vec![BOS, 4, UNK, 5, EOS]);
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let tok = CharTokenizer::from_chars(vec!['a']).unwrap();
        let f = write_tmp(b"a\na\n\xff\xfe\n");
        match load_corpus(f.path(), &tok, "L1") {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_error() {
        let tok = CharTokenizer::from_chars(vec!['a']).unwrap();
        assert!(load_corpus(Path::new("/nonexistent/corpus.txt"), &tok, "L1").is_err());
    }
}
