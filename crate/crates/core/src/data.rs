//! Dataset ingestion: character corpora, binary and continuous frame files,
//! deterministic synthetic corpora for tests, and batch containers.
//!
//! File formats (also documented in the README):
//! - frames: ASCII header `frames n_seq T d\n`, then n_seq*T*d little-endian
//!   f64 values in sequence-major, step-major order.
//! - bits: ASCII header `bits n_seq T d\n`, then n_seq*T*d bytes, each 0x00
//!   or 0x01.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What the per-step output distribution is over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Discrete,
    Binary,
    Continuous,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Discrete => "discrete",
            Modality::Binary => "binary",
            Modality::Continuous => "continuous",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Modality::Discrete),
            "binary" => Ok(Modality::Binary),
            "continuous" => Ok(Modality::Continuous),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Symbol table for discrete data. Index 0 is the reserved start token,
/// which also absorbs symbols unseen at vocabulary-build time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<String>,
}

pub const START: usize = 0;

impl Vocab {
    pub fn new() -> Self {
        Vocab {
            symbols: vec!["<s>".to_string()],
        }
    }

    /// Build from training text: symbols indexed in order of first
    /// appearance, after the reserved start token.
    pub fn from_chars<'a>(chars: impl Iterator<Item = &'a str>) -> Self {
        let mut v = Vocab::new();
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for ch in chars {
            if seen.insert(ch, ()).is_none() && ch != "<s>" {
                v.symbols.push(ch.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of a symbol; unknown symbols map to the start index.
    pub fn id_of(&self, symbol: &str) -> usize {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .unwrap_or(START)
    }

    pub fn symbol_of(&self, id: usize) -> &str {
        &self.symbols[id]
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// A right-padded batch of sequences. `data` is [n_seq x T x d]; for
/// discrete data d = 1 and the single value is the token index.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub data: Tensor,
    pub lengths: Vec<usize>,
    pub modality: Modality,
    pub vocab: Option<Vocab>,
}

impl SequenceBatch {
    pub fn new(
        data: Tensor,
        lengths: Vec<usize>,
        modality: Modality,
        vocab: Option<Vocab>,
    ) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::shape(
                "sequence_batch",
                format!("expected [n x T x d], got {:?}", data.shape()),
            ));
        }
        let (n, t) = (data.shape()[0], data.shape()[1]);
        if lengths.len() != n {
            return Err(Error::Mismatch(format!(
                "{} sequences but {} lengths",
                n,
                lengths.len()
            )));
        }
        if lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Mismatch("sequence length outside 1..=T".into()));
        }
        let batch = SequenceBatch {
            data,
            lengths,
            modality,
            vocab,
        };
        if batch.modality == Modality::Discrete {
            let v = batch
                .vocab
                .as_ref()
                .ok_or_else(|| Error::Mismatch("discrete batch without vocabulary".into()))?;
            for s in 0..batch.n_seq() {
                for t in 0..batch.lengths[s] {
                    if batch.token(s, t) >= v.len() {
                        return Err(Error::Mismatch(format!(
                            "token id {} outside vocabulary of {}",
                            batch.token(s, t),
                            v.len()
                        )));
                    }
                }
            }
        }
        Ok(batch)
    }

    pub fn n_seq(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn t_max(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    /// Total unpadded steps.
    pub fn n_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn token(&self, seq: usize, t: usize) -> usize {
        debug_assert_eq!(self.modality, Modality::Discrete);
        self.frame(seq, t)[0] as usize
    }

    pub fn frame(&self, seq: usize, t: usize) -> &[f64] {
        let d = self.dim();
        let base = (seq * self.t_max() + t) * d;
        &self.data.data()[base..base + d]
    }

    /// New batch containing the chosen sequences, in the given order.
    pub fn select(&self, indices: &[usize]) -> SequenceBatch {
        let (t, d) = (self.t_max(), self.dim());
        let mut data = Vec::with_capacity(indices.len() * t * d);
        let mut lengths = Vec::with_capacity(indices.len());
        for &s in indices {
            let base = s * t * d;
            data.extend_from_slice(&self.data.data()[base..base + t * d]);
            lengths.push(self.lengths[s]);
        }
        SequenceBatch {
            data: Tensor::from_vec(data, &[indices.len(), t, d]).expect("select shape"),
            lengths,
            modality: self.modality,
            vocab: self.vocab.clone(),
        }
    }

    pub fn from_token_rows(rows: &[Vec<usize>], vocab: Vocab) -> Result<Self> {
        let n = rows.len();
        let t = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        if n == 0 || t == 0 {
            return Err(Error::Mismatch("empty token batch".into()));
        }
        let mut data = vec![0.0; n * t];
        let mut lengths = Vec::with_capacity(n);
        for (s, row) in rows.iter().enumerate() {
            lengths.push(row.len());
            for (j, &tok) in row.iter().enumerate() {
                data[s * t + j] = tok as f64;
            }
        }
        SequenceBatch::new(
            Tensor::from_vec(data, &[n, t, 1])?,
            lengths,
            Modality::Discrete,
            Some(vocab),
        )
    }
}

/// Split text into fixed-length character chunks, build the vocabulary from
/// the training fraction only, and return train/valid/test batches.
pub fn load_char_corpus(
    path: &Path,
    chunk_len: usize,
    fractions: (f64, f64, f64),
) -> Result<(SequenceBatch, SequenceBatch, SequenceBatch)> {
    let text = std::fs::read_to_string(path)?;
    char_corpus_from_text(&text, chunk_len, fractions)
}

pub fn char_corpus_from_text(
    text: &str,
    chunk_len: usize,
    fractions: (f64, f64, f64),
) -> Result<(SequenceBatch, SequenceBatch, SequenceBatch)> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    let chars: Vec<String> = text.chars().map(|c| c.to_string()).collect();
    if chars.is_empty() {
        return Err(Error::Mismatch("empty corpus".into()));
    }
    let chunks: Vec<&[String]> = chars
        .chunks(chunk_len)
        .filter(|c| c.len() == chunk_len || chars.len() < chunk_len)
        .collect();
    if chunks.is_empty() {
        return Err(Error::Mismatch("corpus shorter than one chunk".into()));
    }
    let (f_train, f_valid, _) = fractions;
    if !(0.0..=1.0).contains(&f_train) || !(0.0..=1.0).contains(&f_valid) {
        return Err(Error::Config("split fractions outside [0,1]".into()));
    }
    let n = chunks.len();
    let n_train = ((n as f64) * f_train).round() as usize;
    let n_valid = ((n as f64) * f_valid).round() as usize;
    let n_train = n_train.max(1).min(n);
    let vocab = Vocab::from_chars(
        chunks[..n_train]
            .iter()
            .flat_map(|c| c.iter().map(|s| s.as_str())),
    );
    let to_batch = |cs: &[&[String]]| -> Result<SequenceBatch> {
        let rows: Vec<Vec<usize>> = cs
            .iter()
            .map(|chunk| chunk.iter().map(|ch| vocab.id_of(ch)).collect())
            .collect();
        SequenceBatch::from_token_rows(&rows, vocab.clone())
    };
    let train = to_batch(&chunks[..n_train])?;
    let valid_end = (n_train + n_valid).min(n);
    // degenerate fractions reuse the previous split rather than erroring
    let valid = if valid_end > n_train {
        to_batch(&chunks[n_train..valid_end])?
    } else {
        train.clone()
    };
    let test = if valid_end < n {
        to_batch(&chunks[valid_end..])?
    } else {
        valid.clone()
    };
    Ok((train, valid, test))
}

/// Chunk text into sequences encoded with an existing vocabulary; symbols
/// the vocabulary lacks map to the start index. Used when scoring new text
/// against a trained model, whose vocabulary is fixed.
pub fn encode_chars_with_vocab(
    text: &str,
    vocab: &Vocab,
    chunk_len: usize,
) -> Result<SequenceBatch> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    let ids: Vec<usize> = text.chars().map(|c| vocab.id_of(&c.to_string())).collect();
    if ids.is_empty() {
        return Err(Error::Mismatch("empty corpus".into()));
    }
    let rows: Vec<Vec<usize>> = ids.chunks(chunk_len).map(|c| c.to_vec()).collect();
    SequenceBatch::from_token_rows(&rows, vocab.clone())
}

fn read_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Mismatch("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Mismatch("header is not UTF-8".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != magic {
        return Err(Error::Mismatch(format!(
            "expected header '{magic} n_seq T d', got '{header}'"
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Mismatch(format!("bad header field '{s}'")))
    };
    Ok((parse(fields[1])?, parse(fields[2])?, parse(fields[3])?, nl + 1))
}

/// Continuous frames: header + little-endian f64 body.
pub fn load_frame_sequences(path: &Path) -> Result<SequenceBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (n, t, d, body) = read_header(&bytes, "frames")?;
    let want = n * t * d * 8;
    if bytes.len() - body != want {
        return Err(Error::Mismatch(format!(
            "frame body holds {} bytes, header implies {}",
            bytes.len() - body,
            want
        )));
    }
    let data: Vec<f64> = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    SequenceBatch::new(
        Tensor::from_vec(data, &[n, t, d])?,
        vec![t; n],
        Modality::Continuous,
        None,
    )
}

pub fn write_frame_sequences(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "frames {} {} {}",
        batch.n_seq(),
        batch.t_max(),
        batch.dim()
    )?;
    for v in batch.data.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Binary frames: header + one 0x00/0x01 byte per value.
pub fn load_binary_sequences(path: &Path) -> Result<SequenceBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (n, t, d, body) = read_header(&bytes, "bits")?;
    if bytes.len() - body != n * t * d {
        return Err(Error::Mismatch(format!(
            "bit body holds {} bytes, header implies {}",
            bytes.len() - body,
            n * t * d
        )));
    }
    let mut data = Vec::with_capacity(n * t * d);
    for &b in &bytes[body..] {
        match b {
            0 => data.push(0.0),
            1 => data.push(1.0),
            other => return Err(Error::Mismatch(format!("bit byte 0x{other:02x}"))),
        }
    }
    SequenceBatch::new(
        Tensor::from_vec(data, &[n, t, d])?,
        vec![t; n],
        Modality::Binary,
        None,
    )
}

pub fn write_binary_sequences(path: &Path, batch: &SequenceBatch) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "bits {} {} {}", batch.n_seq(), batch.t_max(), batch.dim())?;
    let bytes: Vec<u8> = batch.data.data().iter().map(|&v| v as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Per-dimension mean and standard deviation over unpadded frames.
pub fn frame_stats(batch: &SequenceBatch) -> (Vec<f64>, Vec<f64>) {
    let d = batch.dim();
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    for s in 0..batch.n_seq() {
        for t in 0..batch.lengths[s] {
            for (k, v) in batch.frame(s, t).iter().enumerate() {
                mean[k] += v;
            }
            count += 1;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d];
    for s in 0..batch.n_seq() {
        for t in 0..batch.lengths[s] {
            for (k, v) in batch.frame(s, t).iter().enumerate() {
                var[k] += (v - mean[k]) * (v - mean[k]);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count as f64).sqrt().max(1e-12))
        .collect();
    (mean, std)
}

/// Shift and scale every frame by the given per-dimension statistics.
pub fn standardize(batch: &SequenceBatch, mean: &[f64], std: &[f64]) -> SequenceBatch {
    let d = batch.dim();
    let data: Vec<f64> = batch
        .data
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / std[i % d])
        .collect();
    SequenceBatch {
        data: Tensor::from_vec(data, batch.data.shape()).expect("same shape"),
        lengths: batch.lengths.clone(),
        modality: batch.modality,
        vocab: batch.vocab.clone(),
    }
}

/// Deterministic toy corpus: one random pattern of `period` letters drawn
/// from the first `vocab_size` lowercase letters, repeated to `n_chars`.
pub fn synth_repetition_text(vocab_size: usize, period: usize, n_chars: usize, seed: u64) -> String {
    assert!(vocab_size <= 26 && vocab_size >= 1);
    let mut rng = Rng::seeded(seed);
    let letters: Vec<char> = (b'a'..b'a' + vocab_size as u8).map(|b| b as char).collect();
    let pattern: Vec<char> = (0..period)
        .map(|_| letters[(rng.uniform() * vocab_size as f64) as usize % vocab_size])
        .collect();
    (0..n_chars).map(|i| pattern[i % period]).collect()
}

/// Smooth random-walk frames for continuous-modality tests.
pub fn synth_random_walk_frames(
    n_seq: usize,
    t: usize,
    d: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    let mut rng = Rng::seeded(seed);
    let mut data = Vec::with_capacity(n_seq * t * d);
    for _ in 0..n_seq {
        let mut frame = vec![0.0; d];
        for _ in 0..t {
            for v in frame.iter_mut() {
                *v = 0.9 * *v + 0.3 * rng.normal();
            }
            data.extend_from_slice(&frame);
        }
    }
    SequenceBatch::new(
        Tensor::from_vec(data, &[n_seq, t, d])?,
        vec![t; n_seq],
        Modality::Continuous,
        None,
    )
}
