//! Corpora: tokenization, on-disk ingestion, deterministic synthetic text,
//! and the seeded mixture sampler that feeds training batches.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tinylab_core::bpe::TokenizerModel;

use crate::config::{MarkovSpec, SourceSpec};
use crate::{mix_seed, HarnessError};

pub enum Tokenizer {
    Byte,
    Bpe(TokenizerModel),
}

impl Tokenizer {
    /// "byte" or a path to a trained tokenizer text file.
    pub fn load(name: &str) -> Result<Self, HarnessError> {
        if name == "byte" {
            return Ok(Tokenizer::Byte);
        }
        let text = fs::read_to_string(name)
            .map_err(|e| HarnessError::Config(format!("cannot read tokenizer {name}: {e}")))?;
        Ok(Tokenizer::Bpe(TokenizerModel::from_text(&text)?))
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Bpe(m) => m.vocab_size(),
        }
    }

    /// Token ids plus the byte length of each token.
    pub fn encode_with_lengths(&self, data: &[u8]) -> (Vec<u32>, Vec<u32>) {
        match self {
            Tokenizer::Byte => (
                data.iter().map(|&b| b as u32).collect(),
                vec![1u32; data.len()],
            ),
            Tokenizer::Bpe(m) => {
                let ids = m.encode(data);
                let lens = ids
                    .iter()
                    .map(|&id| m.token_bytes(id).map(|b| b.len() as u32).unwrap_or(1))
                    .collect();
                (ids, lens)
            }
        }
    }
}

/// A tokenized corpus held in memory for a run.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub tokens: Vec<u32>,
    pub byte_lens: Vec<u32>,
    /// sha256 of the raw source bytes.
    pub digest: String,
    pub source_bytes: u64,
}

pub fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    format!("{:x}", h.finalize())
}

/// Order-2 Markov text over `alphabet - 1` lowercase letters plus space,
/// with per-context transition weights drawn once from the seed. Fourth
/// powers of uniforms skew the rows so there is real structure to learn.
/// The sample path is keyed by (seed, part), so different parts are
/// independent draws from the same distribution.
pub fn markov_bytes(spec: &MarkovSpec) -> Vec<u8> {
    let k = spec.alphabet.clamp(2, 27);
    let symbols: Vec<u8> = (0..k)
        .map(|i| if i == k - 1 { b' ' } else { b'a' + i as u8 })
        .collect();
    let mut table_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut table = vec![0.0f64; k * k * k];
    for ctx in 0..k * k {
        let mut total = 0.0;
        for s in 0..k {
            let u: f64 = table_rng.gen();
            let w = u * u * u * u + 1e-4;
            table[ctx * k + s] = w;
            total += w;
        }
        for s in 0..k {
            table[ctx * k + s] /= total;
        }
    }
    let mut path_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1000 + spec.part));
    let mut out = Vec::with_capacity(spec.bytes);
    let (mut p2, mut p1) = (0usize, 0usize);
    for _ in 0..spec.bytes {
        let ctx = p2 * k + p1;
        let u: f64 = path_rng.gen();
        let mut acc = 0.0;
        let mut pick = k - 1;
        for s in 0..k {
            acc += table[ctx * k + s];
            if u < acc {
                pick = s;
                break;
            }
        }
        out.push(symbols[pick]);
        p2 = p1;
        p1 = pick;
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestMeta {
    format_version: u32,
    digest: String,
    n_tokens: u64,
    n_bytes: u64,
    tokenizer: String,
}

/// Tokenize a raw file to disk: tokens.u32 + byte_lens.u32 + meta.json.
pub fn ingest_file(input: &Path, tok: &Tokenizer, tok_name: &str, out: &Path) -> Result<TokenizedCorpus, HarnessError> {
    let raw = fs::read(input)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", input.display())))?;
    let corpus = tokenize_raw(&raw, tok);
    fs::create_dir_all(out)?;
    write_u32s(&out.join("tokens.u32"), &corpus.tokens)?;
    write_u32s(&out.join("byte_lens.u32"), &corpus.byte_lens)?;
    let meta = IngestMeta {
        format_version: 1,
        digest: corpus.digest.clone(),
        n_tokens: corpus.tokens.len() as u64,
        n_bytes: corpus.source_bytes,
        tokenizer: tok_name.to_string(),
    };
    let mut f = fs::File::create(out.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut f, &meta)
        .map_err(|e| HarnessError::Report(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(corpus)
}

fn tokenize_raw(raw: &[u8], tok: &Tokenizer) -> TokenizedCorpus {
    let digest = sha256_hex(raw);
    let (tokens, byte_lens) = tok.encode_with_lengths(raw);
    TokenizedCorpus {
        tokens,
        byte_lens,
        digest,
        source_bytes: raw.len() as u64,
    }
}

fn write_u32s(path: &Path, values: &[u32]) -> Result<(), HarnessError> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_u32s(path: &Path) -> Result<Vec<u32>, HarnessError> {
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(HarnessError::Config(format!(
            "{} is not a u32 array",
            path.display()
        )));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn load_ingested(dir: &Path) -> Result<TokenizedCorpus, HarnessError> {
    let meta: IngestMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?,
    )
    .map_err(|e| HarnessError::Config(format!("{}: bad meta.json: {e}", dir.display())))?;
    let tokens = read_u32s(&dir.join("tokens.u32"))?;
    let byte_lens = read_u32s(&dir.join("byte_lens.u32"))?;
    if tokens.len() != byte_lens.len() || tokens.len() as u64 != meta.n_tokens {
        return Err(HarnessError::Config(format!(
            "{}: token/byte-length arrays disagree with meta",
            dir.display()
        )));
    }
    Ok(TokenizedCorpus {
        tokens,
        byte_lens,
        digest: meta.digest,
        source_bytes: meta.n_bytes,
    })
}

/// Resolve a source spec: synthetic generator, ingested directory, or raw
/// file tokenized on the fly.
pub fn load_source(src: &SourceSpec, tok: &Tokenizer) -> Result<TokenizedCorpus, HarnessError> {
    if let Some(m) = &src.synth_markov {
        let raw = markov_bytes(m);
        return Ok(tokenize_raw(&raw, tok));
    }
    let path = src
        .path
        .as_ref()
        .ok_or_else(|| HarnessError::Config("source has no path".into()))?;
    if path.is_dir() {
        load_ingested(path)
    } else {
        let raw = fs::read(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(tokenize_raw(&raw, tok))
    }
}

/// Serializable sampler position (everything needed to resume mid-epoch).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerState {
    pub chooser_word_pos: String,
    pub sources: Vec<(u64, usize)>, // (epoch, cursor)
}

struct SourceState {
    corpus: TokenizedCorpus,
    n_slots: usize,
    perm_seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<u32>,
}

impl SourceState {
    fn regen_perm(&mut self) {
        self.perm = permutation(self.perm_seed, self.epoch, self.n_slots);
    }
}

fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch.wrapping_add(1)));
    let mut v: Vec<u32> = (0..n as u32).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Weighted mixture over shuffled fixed-length chunks. Each source walks a
/// seeded permutation of its chunk slots; exhaustion reshuffles with a fresh
/// epoch-keyed permutation.
pub struct MixtureSampler {
    chunk: usize,
    weights_cum: Vec<f64>,
    chooser: ChaCha8Rng,
    chooser_seed: u64,
    sources: Vec<SourceState>,
    /// Draw counts per source, for mixture accounting.
    pub draws: Vec<u64>,
}

pub struct SampledBatch {
    /// rows x chunk token ids.
    pub tokens: Vec<usize>,
    pub rows: usize,
    pub chunk: usize,
}

impl MixtureSampler {
    pub fn new(
        run_seed: u64,
        stage_idx: usize,
        specs: &[SourceSpec],
        corpora: Vec<TokenizedCorpus>,
        seq_len: usize,
    ) -> Result<Self, HarnessError> {
        assert_eq!(specs.len(), corpora.len());
        let chunk = seq_len + 1;
        let mut sources = Vec::new();
        for (i, corpus) in corpora.into_iter().enumerate() {
            let n_slots = corpus.tokens.len() / chunk;
            if n_slots == 0 {
                return Err(HarnessError::Config(format!(
                    "source {i} too small: {} tokens < chunk {chunk}",
                    corpus.tokens.len()
                )));
            }
            let mut st = SourceState {
                corpus,
                n_slots,
                perm_seed: mix_seed(run_seed, (stage_idx as u64) * 1000 + i as u64 + 1),
                epoch: 0,
                cursor: 0,
                perm: Vec::new(),
            };
            st.regen_perm();
            sources.push(st);
        }
        let mut cum = Vec::with_capacity(specs.len());
        let mut acc = 0.0;
        for s in specs {
            acc += s.weight;
            cum.push(acc);
        }
        let chooser_seed = mix_seed(run_seed, 7_700 + stage_idx as u64);
        let n = sources.len();
        Ok(Self {
            chunk,
            weights_cum: cum,
            chooser: ChaCha8Rng::seed_from_u64(chooser_seed),
            chooser_seed,
            sources,
            draws: vec![0; n],
        })
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            chooser_word_pos: self.chooser.get_word_pos().to_string(),
            sources: self.sources.iter().map(|s| (s.epoch, s.cursor)).collect(),
        }
    }

    pub fn restore(&mut self, state: &SamplerState) -> Result<(), HarnessError> {
        if state.sources.len() != self.sources.len() {
            return Err(HarnessError::Config(
                "sampler state does not match source count".into(),
            ));
        }
        let pos: u128 = state
            .chooser_word_pos
            .parse()
            .map_err(|e| HarnessError::Config(format!("bad chooser_word_pos: {e}")))?;
        self.chooser = ChaCha8Rng::seed_from_u64(self.chooser_seed);
        self.chooser.set_word_pos(pos);
        for (src, &(epoch, cursor)) in self.sources.iter_mut().zip(&state.sources) {
            src.epoch = epoch;
            src.cursor = cursor.min(src.n_slots);
            src.regen_perm();
        }
        Ok(())
    }

    fn pick_source(&mut self) -> usize {
        if self.sources.len() == 1 {
            return 0;
        }
        let u: f64 = self.chooser.gen();
        let total = *self.weights_cum.last().unwrap();
        let x = u * total;
        self.weights_cum
            .iter()
            .position(|&c| x < c)
            .unwrap_or(self.sources.len() - 1)
    }

    pub fn next_batch(&mut self, rows: usize) -> SampledBatch {
        let mut tokens = Vec::with_capacity(rows * self.chunk);
        for _ in 0..rows {
            let si = self.pick_source();
            self.draws[si] += 1;
            let src = &mut self.sources[si];
            if src.cursor >= src.n_slots {
                src.epoch += 1;
                src.cursor = 0;
                src.regen_perm();
            }
            let slot = src.perm[src.cursor] as usize;
            src.cursor += 1;
            let start = slot * self.chunk;
            tokens.extend(
                src.corpus.tokens[start..start + self.chunk]
                    .iter()
                    .map(|&t| t as usize),
            );
        }
        SampledBatch {
            tokens,
            rows,
            chunk: self.chunk,
        }
    }
}

/// Fixed evaluation set: the leading chunks of a corpus, in order.
pub struct EvalSet {
    pub chunk: usize,
    pub rows: usize,
    pub tokens: Vec<usize>,
    /// Byte length of every token in `tokens` (row-major, same layout).
    pub byte_lens: Vec<u32>,
}

impl EvalSet {
    pub fn from_corpus(corpus: &TokenizedCorpus, seq_len: usize, max_tokens: usize) -> Result<Self, HarnessError> {
        let chunk = seq_len + 1;
        let rows = (max_tokens / chunk).min(corpus.tokens.len() / chunk);
        if rows == 0 {
            return Err(HarnessError::Config(format!(
                "eval corpus too small: {} tokens < chunk {chunk}",
                corpus.tokens.len()
            )));
        }
        let n = rows * chunk;
        Ok(Self {
            chunk,
            rows,
            tokens: corpus.tokens[..n].iter().map(|&t| t as usize).collect(),
            byte_lens: corpus.byte_lens[..n].to_vec(),
        })
    }
}
