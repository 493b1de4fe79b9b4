//! CBOW word embeddings trained with negative sampling, plus the word2vec
//! text interchange format. Training is single-threaded and deterministic
//! under a fixed seed.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::text::PAD_ID;
use crate::corpus::vocab::Vocabulary;
use crate::error::{DynplError, Result};
use crate::numerics::{sigmoid, Tensor2};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_rate: f64,
    /// frequency subsampling threshold; 0 disables subsampling
    pub subsample: f64,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 100,
            window: 5,
            negatives: 5,
            epochs: 5,
            initial_rate: 0.025,
            subsample: 1e-3,
            seed: 1,
        }
    }
}

/// Vocabulary-aligned embedding matrix. The pad row is all-zero and is never
/// trained; every other row (including the unknown token) starts from a
/// random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor2,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    /// Embedding row for a token id. Out-of-range ids are an error; unknown
    /// tokens should already be mapped to the unknown id upstream.
    pub fn lookup(&self, token_id: u32) -> Result<&[f64]> {
        if (token_id as usize) >= self.matrix.rows() {
            return Err(DynplError::InvalidInput(format!(
                "token id {token_id} out of range for vocabulary of {}",
                self.matrix.rows()
            )));
        }
        Ok(self.matrix.row(token_id as usize))
    }

    fn random_init(vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let mut m = Tensor2::zeros(vocab_size, dim);
        let scale = 0.5 / dim as f64;
        for r in 0..vocab_size {
            if r as u32 == PAD_ID {
                continue;
            }
            for v in m.row_mut(r) {
                *v = rng.gen_range(-scale..scale);
            }
        }
        m
    }
}

/// Train CBOW embeddings over vocab-mapped token-id sequences. Notes must
/// come from non-test subjects only; that provenance is the caller's
/// responsibility and is enforced by the training pipeline.
pub fn train_cbow(
    notes: &[Vec<u32>],
    vocab_size: usize,
    config: &CbowConfig,
) -> Result<EmbeddingMatrix> {
    if config.dim == 0 {
        return Err(DynplError::InvalidInput("embedding dim must be > 0".into()));
    }
    if notes.iter().all(|n| n.is_empty()) {
        return Err(DynplError::InvalidInput("empty embedding corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let mut input = EmbeddingMatrix {
        matrix: EmbeddingMatrix::random_init(vocab_size, dim, &mut rng),
    };
    let mut output = Tensor2::zeros(vocab_size, dim);

    // unigram counts for subsampling and the negative-sampling table
    let mut counts = vec![0u64; vocab_size];
    let mut total_tokens = 0u64;
    for note in notes {
        for &id in note {
            if id != PAD_ID {
                counts[id as usize] += 1;
                total_tokens += 1;
            }
        }
    }
    if total_tokens == 0 {
        return Err(DynplError::InvalidInput("empty embedding corpus".into()));
    }

    // cumulative counts^0.75 for negative sampling
    let mut cum = Vec::with_capacity(vocab_size);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cum.push(acc);
    }
    let cum_total = acc;
    let sample_negative = |rng: &mut ChaCha8Rng| -> u32 {
        let x = rng.gen_range(0.0..cum_total);
        cum.partition_point(|&v| v <= x) as u32
    };

    let total_work = total_tokens * config.epochs as u64;
    let mut processed = 0u64;
    let mut h = vec![0.0; dim];
    let mut err = vec![0.0; dim];

    for _epoch in 0..config.epochs {
        for note in notes {
            // frequency subsampling of the note's tokens
            let kept: Vec<u32> = note
                .iter()
                .copied()
                .filter(|&id| {
                    if id == PAD_ID {
                        return false;
                    }
                    if config.subsample <= 0.0 {
                        return true;
                    }
                    let f = counts[id as usize] as f64 / total_tokens as f64;
                    let keep = ((f / config.subsample).sqrt() + 1.0) * (config.subsample / f);
                    rng.gen::<f64>() < keep.min(1.0)
                })
                .collect();
            processed += note.iter().filter(|&&id| id != PAD_ID).count() as u64;
            if kept.len() < 2 {
                continue;
            }
            let progress = processed as f64 / total_work as f64;
            let rate = config.initial_rate * (1.0 - progress).max(1e-4);

            for center_pos in 0..kept.len() {
                let b = rng.gen_range(1..=config.window);
                let lo = center_pos.saturating_sub(b);
                let hi = (center_pos + b + 1).min(kept.len());
                h.iter_mut().for_each(|v| *v = 0.0);
                let mut ctx_count = 0usize;
                for pos in lo..hi {
                    if pos == center_pos {
                        continue;
                    }
                    let row = input.matrix.row(kept[pos] as usize);
                    for (hv, &rv) in h.iter_mut().zip(row) {
                        *hv += rv;
                    }
                    ctx_count += 1;
                }
                if ctx_count == 0 {
                    continue;
                }
                let inv = 1.0 / ctx_count as f64;
                h.iter_mut().for_each(|v| *v *= inv);

                err.iter_mut().for_each(|v| *v = 0.0);
                let center = kept[center_pos];
                for neg in 0..=config.negatives {
                    let (target, label) = if neg == 0 {
                        (center, 1.0)
                    } else {
                        let mut t = sample_negative(&mut rng);
                        if t == PAD_ID {
                            t = center.max(1);
                        }
                        if t == center {
                            continue;
                        }
                        (t, 0.0)
                    };
                    let out_row = output.row_mut(target as usize);
                    let score = sigmoid(h.iter().zip(out_row.iter()).map(|(a, b)| a * b).sum());
                    let g = (label - score) * rate;
                    for i in 0..dim {
                        err[i] += g * out_row[i];
                        out_row[i] += g * h[i];
                    }
                }
                for pos in lo..hi {
                    if pos == center_pos {
                        continue;
                    }
                    let row = input.matrix.row_mut(kept[pos] as usize);
                    for (rv, &ev) in row.iter_mut().zip(&err) {
                        *rv += ev;
                    }
                }
            }
        }
    }

    if !input.matrix.is_finite() {
        return Err(DynplError::Numerics(
            "non-finite value in trained embeddings".into(),
        ));
    }
    Ok(input)
}

/// word2vec text format: first line `vocab_size dim`, then
/// `token v1 ... v_dim` per line.
pub fn save_word2vec_text(path: &Path, vocab: &Vocabulary, emb: &EmbeddingMatrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{} {}", emb.vocab_size(), emb.dim())?;
    for id in 0..emb.vocab_size() {
        write!(out, "{}", vocab.token(id as u32))?;
        for v in emb.matrix.row(id) {
            write!(out, " {v:?}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Load word2vec text embeddings aligned onto `vocab`. Vocabulary tokens not
/// present in the file keep a seeded random initialization; the pad row is
/// forced to zero.
pub fn load_word2vec_text(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<EmbeddingMatrix> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| DynplError::Data("empty embedding file".into()))??;
    let mut parts = header.split_whitespace();
    let _count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DynplError::Data("bad embedding header".into()))?;
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DynplError::Data("bad embedding header".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = EmbeddingMatrix {
        matrix: EmbeddingMatrix::random_init(vocab.len(), dim, &mut rng),
    };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| DynplError::Data("bad embedding line".into()))?;
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if id == PAD_ID {
            continue;
        }
        let row = emb.matrix.row_mut(id as usize);
        for (i, p) in parts.enumerate() {
            if i >= dim {
                return Err(DynplError::Data(format!(
                    "embedding row for {token:?} longer than dim {dim}"
                )));
            }
            row[i] = p
                .parse()
                .map_err(|e| DynplError::Data(format!("bad embedding value: {e}")))?;
        }
    }
    Ok(emb)
}
