use serde::{Deserialize, Serialize};

use crate::corpus::text::PAD_ID;
use crate::corpus::vocab::Vocabulary;
use crate::error::{DynplError, Result};

/// Fixed narrative length in tokens.
pub const NARRATIVE_LEN: usize = 8000;

/// Fixed-length token-id sequence for one stay. Positions at or beyond
/// `true_length` hold the pad id and are masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Narrative {
    pub token_ids: Vec<u32>,
    pub pad_mask: Vec<bool>,
    pub true_length: usize,
}

impl Narrative {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_length == 0
    }

    /// The non-pad prefix of the narrative.
    pub fn active_ids(&self) -> &[u32] {
        &self.token_ids[..self.true_length]
    }
}

/// Concatenate the per-note token sequences of one stay (already ordered by
/// chart time) into a fixed-length narrative. Sequences longer than the
/// limit keep the most recent tokens.
pub fn assemble_narrative(note_tokens: &[Vec<String>], vocab: &Vocabulary) -> Result<Narrative> {
    assemble_narrative_with_len(note_tokens, vocab, NARRATIVE_LEN)
}

pub fn assemble_narrative_with_len(
    note_tokens: &[Vec<String>],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Narrative> {
    let mut ids: Vec<u32> = Vec::new();
    for note in note_tokens {
        for tok in note {
            ids.push(vocab.id(tok));
        }
    }
    if ids.is_empty() {
        return Err(DynplError::Data(
            "no usable note tokens for narrative".into(),
        ));
    }
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    let true_length = ids.len();
    ids.resize(max_len, PAD_ID);
    let pad_mask: Vec<bool> = (0..max_len).map(|i| i >= true_length).collect();
    Ok(Narrative {
        token_ids: ids,
        pad_mask,
        true_length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::UNK_ID;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        // min_docs 1 with one note per word
        let notes: Vec<Vec<String>> = words.iter().map(|w| vec![w.to_string()]).collect();
        Vocabulary::build(&notes, 1).unwrap()
    }

    #[test]
    fn short_sequence_right_padded_and_masked() {
        let vocab = vocab_of(&["a", "b"]);
        let notes = vec![vec!["a".to_string(); 300], vec!["b".to_string(); 200]];
        let n = assemble_narrative(&notes, &vocab).unwrap();
        assert_eq!(n.len(), NARRATIVE_LEN);
        assert_eq!(n.true_length, 500);
        assert_eq!(n.pad_mask.iter().filter(|&&m| m).count(), 7500);
        for i in 0..NARRATIVE_LEN {
            assert_eq!(n.pad_mask[i], i >= 500);
            if i >= 500 {
                assert_eq!(n.token_ids[i], PAD_ID);
            }
        }
    }

    #[test]
    fn long_sequence_keeps_most_recent_tokens() {
        let vocab = vocab_of(&["x", "y"]);
        let notes = vec![vec!["x".to_string(); 1000], vec!["y".to_string(); 8000]];
        let n = assemble_narrative(&notes, &vocab).unwrap();
        assert_eq!(n.true_length, NARRATIVE_LEN);
        // the leading 1000 "x" tokens were truncated
        let y = vocab.id("y");
        assert!(n.token_ids.iter().all(|&id| id == y));
    }

    #[test]
    fn concatenation_preserves_note_order() {
        let vocab = vocab_of(&["first", "second", "third"]);
        let notes = vec![
            vec!["first".to_string()],
            vec!["second".to_string()],
            vec!["third".to_string()],
        ];
        let n = assemble_narrative(&notes, &vocab).unwrap();
        let expected: Vec<u32> = ["first", "second", "third"]
            .iter()
            .map(|w| vocab.id(w))
            .collect();
        assert_eq!(&n.token_ids[..3], &expected[..]);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let vocab = vocab_of(&["known"]);
        let notes = vec![vec!["known".to_string(), "mystery".to_string()]];
        let n = assemble_narrative(&notes, &vocab).unwrap();
        assert_eq!(n.token_ids[1], UNK_ID);
    }

    #[test]
    fn zero_tokens_is_an_error() {
        let vocab = vocab_of(&["a"]);
        assert!(assemble_narrative(&[], &vocab).is_err());
    }
}
