//! Byte-level BPE: trainer, encoder/decoder, and the Bytes/Tokens
//! compression-rate measurement.
//!
//! The base alphabet is all 256 bytes, so decode(encode(x)) == x for any
//! input. Training greedily merges the highest-frequency adjacent pair until
//! the vocab budget is reached or no pair occurs twice; ties break toward
//! the lexicographically smallest (left bytes, right bytes) pair. There is
//! no pre-tokenization split — merges may cross whitespace.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("max_vocab {0} is below the 256 byte tokens")]
    VocabTooSmall(usize),
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
}

/// Trained tokenizer: 256 byte tokens plus an ordered merge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    /// Byte string of every token; tokens[0..256] are the single bytes.
    vocab: Vec<Vec<u8>>,
}

impl TokenizerModel {
    /// Identity tokenizer (no merges).
    pub fn byte_identity() -> Self {
        Self {
            merges: Vec::new(),
            vocab: (0..=255u8).map(|b| vec![b]).collect(),
        }
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Apply merges in training order.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        for (rank, &(a, b)) in self.merges.iter().enumerate() {
            let new_id = 256 + rank as u32;
            seq = merge_pass(&seq, a, b, new_id);
        }
        seq
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self
                .token_bytes(id)
                .ok_or(BpeError::UnknownId(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Bytes per token over a corpus; >= 1 for any byte-level model.
    pub fn compression_rate(&self, corpus: &[u8]) -> Result<f64, BpeError> {
        if corpus.is_empty() {
            return Err(BpeError::EmptyCorpus);
        }
        let tokens = self.encode(corpus);
        Ok(corpus.len() as f64 / tokens.len() as f64)
    }

    /// Serialize as text: one merge per line, hex of each side's bytes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &(a, b) in &self.merges {
            let hex = |id: u32| -> String {
                self.vocab[id as usize]
                    .iter()
                    .map(|byte| format!("{byte:02x}"))
                    .collect()
            };
            s.push_str(&format!("{} {}\n", hex(a), hex(b)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let mut model = Self::byte_identity();
        let mut index: HashMap<Vec<u8>, u32> = model
            .vocab
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i as u32))
            .collect();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(lh), Some(rh), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(BpeError::Malformed(format!("line {}", lineno + 1)));
            };
            let parse = |h: &str| -> Result<Vec<u8>, BpeError> {
                if h.len() % 2 != 0 {
                    return Err(BpeError::Malformed(format!("odd hex on line {}", lineno + 1)));
                }
                (0..h.len() / 2)
                    .map(|i| {
                        u8::from_str_radix(&h[2 * i..2 * i + 2], 16)
                            .map_err(|e| BpeError::Malformed(format!("line {}: {e}", lineno + 1)))
                    })
                    .collect()
            };
            let (lb, rb) = (parse(lh)?, parse(rh)?);
            let a = *index.get(&lb).ok_or_else(|| {
                BpeError::Malformed(format!("line {}: left side not a known token", lineno + 1))
            })?;
            let b = *index.get(&rb).ok_or_else(|| {
                BpeError::Malformed(format!("line {}: right side not a known token", lineno + 1))
            })?;
            let mut joined = lb;
            joined.extend_from_slice(&rb);
            let id = model.vocab.len() as u32;
            model.merges.push((a, b));
            model.vocab.push(joined.clone());
            index.insert(joined, id);
        }
        Ok(model)
    }
}

/// Replace every non-overlapping (a, b) pair with new_id, left to right.
fn merge_pass(seq: &[u32], a: u32, b: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Greedy pair-merge training. Stops at `max_vocab` tokens or when no pair
/// occurs at least twice. An empty corpus yields the identity model.
pub fn train_bpe(corpus: &[u8], max_vocab: usize) -> Result<TokenizerModel, BpeError> {
    if max_vocab < 256 {
        return Err(BpeError::VocabTooSmall(max_vocab));
    }
    let mut model = TokenizerModel::byte_identity();
    let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();

    while model.vocab.len() < max_vocab {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
        // Highest count; ties -> lexicographically smallest byte strings.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &counts {
            if count < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc && {
                            let key = (&model.vocab[pair.0 as usize], &model.vocab[pair.1 as usize]);
                            let bkey = (&model.vocab[bp.0 as usize], &model.vocab[bp.1 as usize]);
                            key < bkey
                        })
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let new_id = model.vocab.len() as u32;
        let mut joined = model.vocab[a as usize].clone();
        joined.extend_from_slice(&model.vocab[b as usize]);
        model.vocab.push(joined);
        model.merges.push((a, b));
        seq = merge_pass(&seq, a, b, new_id);
    }
    Ok(model)
}
