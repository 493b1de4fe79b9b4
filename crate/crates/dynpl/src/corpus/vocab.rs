use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::corpus::text::{RESERVED_TOKENS, UNK_ID};
use crate::error::{DynplError, Result};

/// Token-to-id map with reserved ids 0..=3 for pad/unk/num/deid and
/// per-token document-frequency counts. Non-reserved tokens are admitted
/// only when they appear in at least `min_docs` notes and are ordered
/// lexicographically so the mapping is a pure function of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    doc_freq: Vec<u32>,
    index: HashMap<String, u32>,
}

pub const DEFAULT_MIN_DOCS: u32 = 5;

impl Vocabulary {
    pub fn build(notes: &[Vec<String>], min_docs: u32) -> Result<Self> {
        if min_docs == 0 {
            return Err(DynplError::InvalidInput("min_docs must be >= 1".into()));
        }
        let mut df: HashMap<&str, u32> = HashMap::new();
        for note in notes {
            let mut seen: Vec<&str> = note.iter().map(|s| s.as_str()).collect();
            seen.sort_unstable();
            seen.dedup();
            for tok in seen {
                *df.entry(tok).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut doc_freq: Vec<u32> = RESERVED_TOKENS
            .iter()
            .map(|t| df.get(*t).copied().unwrap_or(0))
            .collect();
        let mut admitted: Vec<(&str, u32)> = df
            .iter()
            .filter(|(tok, &count)| count >= min_docs && !RESERVED_TOKENS.contains(tok))
            .map(|(&tok, &count)| (tok, count))
            .collect();
        admitted.sort_unstable_by_key(|&(tok, _)| tok);
        for (tok, count) in admitted {
            tokens.push(tok.to_string());
            doc_freq.push(count);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            tokens,
            doc_freq,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Id for a token, falling back to the unknown-token id.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn doc_freq(&self, id: u32) -> u32 {
        self.doc_freq[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Digest over the token list and document frequencies, used to tie
    /// checkpoints to the vocabulary they were trained with.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (tok, df) in self.tokens.iter().zip(&self.doc_freq) {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
            hasher.update(df.to_le_bytes());
        }
        crate::labels::hex_string(&hasher.finalize())
    }

    /// `token<TAB>id<TAB>doc_freq`, one line per token, id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{i}\t{}", self.doc_freq[i])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut doc_freq = Vec::new();
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let tok = parts
                .next()
                .ok_or_else(|| DynplError::Data(format!("vocab line {}: no token", lineno + 1)))?;
            let id: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DynplError::Data(format!("vocab line {}: bad id", lineno + 1)))?;
            let df: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DynplError::Data(format!("vocab line {}: bad freq", lineno + 1)))?;
            if id != tokens.len() {
                return Err(DynplError::Data(format!(
                    "vocab line {}: ids must be contiguous from 0",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
            doc_freq.push(df);
        }
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(DynplError::Data("vocab missing reserved tokens".into()));
        }
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *t {
                return Err(DynplError::Data(format!(
                    "vocab id {i} must be the reserved token {t:?}"
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            tokens,
            doc_freq,
            index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::{NUM_TOKEN, PAD_TOKEN};

    fn note(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn document_frequency_boundary() {
        // "kept" appears in 5 notes, "dropped" in 4
        let mut notes: Vec<Vec<String>> = (0..5).map(|_| note("kept filler")).collect();
        for n in notes.iter_mut().take(4) {
            n.push("dropped".to_string());
        }
        let vocab = Vocabulary::build(&notes, 5).unwrap();
        assert!(vocab.contains("kept"));
        assert!(!vocab.contains("dropped"));
        assert!(vocab.contains("filler"));
    }

    #[test]
    fn reserved_tokens_present_even_when_unseen() {
        let vocab = Vocabulary::build(&[], 5).unwrap();
        assert_eq!(vocab.len(), 4);
        assert_eq!(vocab.id(PAD_TOKEN), 0);
        assert_eq!(vocab.id(NUM_TOKEN), 2);
        assert_eq!(vocab.id("anything"), UNK_ID);
    }

    #[test]
    fn exact_membership_against_count_oracle() {
        let notes: Vec<Vec<String>> = vec![
            note("alpha beta gamma"),
            note("alpha beta"),
            note("alpha beta alpha"), // duplicates within a note count once
            note("alpha gamma"),
            note("beta gamma delta"),
        ];
        // brute-force document-frequency oracle
        let mut counts: HashMap<&str, u32> = HashMap::new();
        for n in &notes {
            let mut uniq: Vec<&str> = n.iter().map(|s| s.as_str()).collect();
            uniq.sort_unstable();
            uniq.dedup();
            for t in uniq {
                *counts.entry(t).or_default() += 1;
            }
        }
        let vocab = Vocabulary::build(&notes, 3).unwrap();
        for (tok, &c) in &counts {
            assert_eq!(vocab.contains(tok), c >= 3, "token {tok}");
            if c >= 3 {
                assert_eq!(vocab.doc_freq(vocab.id(tok)), c);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let notes = vec![note("a b"), note("a b"), note("a")];
        let vocab = Vocabulary::build(&notes, 2).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        vocab.save(f.path()).unwrap();
        let loaded = Vocabulary::load(f.path()).unwrap();
        assert_eq!(vocab, loaded);
    }
}
