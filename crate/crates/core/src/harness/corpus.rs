use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SeededRng;
use crate::model::Batch;

pub const TOKEN_MAGIC: [u8; 4] = *b"SLTK";
pub const TOKEN_VERSION: u32 = 1;
const TOKEN_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Token binary when the file starts with the token magic, bytes otherwise.
    #[default]
    Auto,
    Bytes,
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub vocab: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Format("corpus is empty".into()));
        }
        Ok(Self {
            tokens: bytes.iter().map(|&b| b as u32).collect(),
            vocab: 256,
        })
    }
}

pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::Bytes => Corpus::from_bytes(&bytes),
        CorpusFormat::Tokens => decode_token_binary(&bytes),
        CorpusFormat::Auto if bytes.starts_with(&TOKEN_MAGIC) => decode_token_binary(&bytes),
        CorpusFormat::Auto => Corpus::from_bytes(&bytes),
    }
}

/// Header `magic, version, vocab, count` (little-endian u32s) followed by u16 ids.
pub fn encode_token_binary(tokens: &[u32], vocab: usize) -> Result<Vec<u8>> {
    if vocab == 0 || vocab > 1 << 16 {
        return Err(Error::InvalidArgument(format!("token binary vocab must be in 1..=65536, got {vocab}")));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::IndexOutOfRange {
            index: t as usize,
            bound: vocab,
        });
    }
    let count = u32::try_from(tokens.len()).map_err(|_| Error::InvalidArgument("too many tokens".into()))?;
    let mut out = Vec::with_capacity(TOKEN_HEADER + 2 * tokens.len());
    out.extend_from_slice(&TOKEN_MAGIC);
    out.extend_from_slice(&TOKEN_VERSION.to_le_bytes());
    out.extend_from_slice(&(vocab as u32).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for &t in tokens {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_token_binary(bytes: &[u8]) -> Result<Corpus> {
    if bytes.len() < TOKEN_HEADER || bytes[..4] != TOKEN_MAGIC {
        return Err(Error::Format("not a token binary (bad magic or short header)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (version, vocab, count) = (word(4), word(8) as usize, word(12) as usize);
    if version != TOKEN_VERSION {
        return Err(Error::Format(format!("unsupported token binary version {version}")));
    }
    let body = &bytes[TOKEN_HEADER..];
    if body.len() != 2 * count {
        return Err(Error::Format(format!(
            "token binary declares {count} ids but carries {} bytes",
            body.len()
        )));
    }
    if count == 0 || vocab == 0 {
        return Err(Error::Format("token binary is empty".into()));
    }
    let tokens: Vec<u32> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
        .collect();
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Format(format!("token id {t} outside vocab {vocab}")));
    }
    Ok(Corpus { tokens, vocab })
}

/// Splits off the last `val_fraction` of the stream as validation.
pub fn split_tail(tokens: &[u32], val_fraction: f64) -> Result<(&[u32], &[u32])> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = ((tokens.len() as f64) * val_fraction).round() as usize;
    if n_val < 2 || tokens.len() - n_val < 2 {
        return Err(Error::InvalidArgument(format!(
            "stream of {} tokens too short to split at {val_fraction}",
            tokens.len()
        )));
    }
    Ok(tokens.split_at(tokens.len() - n_val))
}

/// Deterministic batches over non-overlapping windows of `seq_len + 1` tokens.
/// Windows are visited in a fresh seeded permutation each pass (cyclic).
#[derive(Clone, Debug)]
pub struct Batcher {
    seq_len: usize,
    batch: usize,
    seed: u64,
    windows: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl Batcher {
    pub fn new(stream_len: usize, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || batch == 0 {
            return Err(Error::InvalidArgument("seq_len and batch size must be positive".into()));
        }
        let windows = stream_len.saturating_sub(1) / seq_len;
        if windows == 0 {
            return Err(Error::InvalidArgument(format!(
                "training stream of {stream_len} tokens is shorter than one window of {}",
                seq_len + 1
            )));
        }
        Ok(Self {
            seq_len,
            batch,
            seed,
            windows,
            cached: None,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    fn window_at(&mut self, position: u64) -> usize {
        let epoch = position / self.windows as u64;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.windows).collect();
            SeededRng::with_stream(self.seed, epoch).shuffle(&mut perm);
            self.cached = Some((epoch, perm));
        }
        self.cached.as_ref().expect("cached").1[(position % self.windows as u64) as usize]
    }

    /// Batch for zero-based optimizer step `step`; a pure function of
    /// `(stream, seed, step)`.
    pub fn batch_at(&mut self, stream: &[u32], step: u64) -> Result<Batch> {
        let first = step * self.batch as u64;
        let seqs = (0..self.batch as u64)
            .map(|i| {
                let w = self.window_at(first + i);
                stream[w * self.seq_len..(w + 1) * self.seq_len + 1].to_vec()
            })
            .collect();
        Batch::new(seqs)
    }
}

/// Seeded English-like text: pseudo-words from a syllable inventory, a sparse
/// successor graph and Zipf frequencies, grouped into sentences and lines.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> Vec<u8> {
    const ONSETS: [&str; 18] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "th", "ch"];
    const NUCLEI: [&str; 7] = ["a", "e", "i", "o", "u", "ea", "ou"];
    const CODAS: [&str; 6] = ["", "", "n", "r", "s", "t"];
    let mut rng = SeededRng::new(seed);
    let n_words = 800;
    let words: Vec<String> = (0..n_words)
        .map(|_| {
            let syl = 1 + rng.below(3) as usize;
            (0..syl)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS[rng.below(ONSETS.len() as u64) as usize],
                        NUCLEI[rng.below(NUCLEI.len() as u64) as usize],
                        CODAS[rng.below(CODAS.len() as u64) as usize]
                    )
                })
                .collect()
        })
        .collect();
    // Zipf cumulative weights.
    let cum: Vec<f64> = (0..n_words)
        .scan(0.0, |acc, i| {
            *acc += 1.0 / (i as f64 + 1.0);
            Some(*acc)
        })
        .collect();
    let total = *cum.last().expect("words");
    let successors: Vec<Vec<usize>> = (0..n_words)
        .map(|_| (0..6).map(|_| rng.below(n_words as u64) as usize).collect())
        .collect();
    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = 0usize;
    let mut sentences = 0;
    while out.len() < n_bytes {
        let len = 4 + rng.below(10);
        for i in 0..len {
            let w = if i > 0 && rng.unit() < 0.75 {
                let s = &successors[prev];
                // Earlier successors are likelier.
                s[(rng.unit() * rng.unit() * s.len() as f64) as usize]
            } else {
                let u = rng.unit() * total;
                cum.partition_point(|&c| c < u).min(n_words - 1)
            };
            let word = words[w].as_bytes();
            if i == 0 {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
            } else {
                out.push(b' ');
                out.extend_from_slice(word);
            }
            if i + 1 < len && rng.unit() < 0.08 {
                out.push(b',');
            }
            prev = w;
        }
        out.push(b'.');
        sentences += 1;
        out.push(if sentences % 5 == 0 { b'\n' } else { b' ' });
    }
    out.truncate(n_bytes);
    out
}
