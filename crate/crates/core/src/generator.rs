//! Code-conditioned token model: exact per-sample gradients, ancestral
//! sampling with temperature, and profile-guided synthetic generation.
//!
//! The model is a logit table over `(code, previous token, next token)`,
//! so log-likelihoods, gradients, and sampling are all exact and cheap.
//! The distribution factorizes as a code-conditioned bigram chain:
//! `log p(x | c) = sum_l log softmax(theta[c][x_{l-1}])[x_l]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CodeSet, CorpusSpec, Document};
use crate::error::{Error, Result};
use crate::profiling::Allocation;
use crate::rng::sample_categorical;
use crate::tokenizer::{self, BOS, EOS};

/// Flat logit table, laid out as `theta[code][prev][next]`.
///
/// The flat index of `(code, prev, next)` is `(code * V + prev) * V + next`
/// with `V = vocab`; the checkpoint format serializes entries in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    n_codes: usize,
    vocab: usize,
    logits: Vec<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSYN";
const CHECKPOINT_VERSION: u32 = 1;

/// Floor applied when converting probabilities to logits, keeping entries
/// finite while preserving distributions to ~1e-12.
const LOGIT_FLOOR_PROB: f64 = 1e-12;

impl ModelParams {
    /// Uniform model: all logits zero.
    pub fn uniform(n_codes: usize, vocab: usize) -> Self {
        assert!(n_codes > 0 && vocab > 1);
        Self {
            n_codes,
            vocab,
            logits: vec![0.0; n_codes * vocab * vocab],
        }
    }

    /// Maximum-likelihood fit to a corpus spec: logits are the log
    /// transition probabilities. Used to build "pretrained" checkpoints.
    pub fn from_corpus_spec(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = spec.vocab_size;
        let mut params = Self::uniform(spec.n_codes(), vocab);
        for (code, table) in spec.transitions.iter().enumerate() {
            for (prev, row) in table.iter().enumerate() {
                let start = params.row_start(code, prev);
                for (next, &p) in row.iter().enumerate() {
                    params.logits[start + next] = p.max(LOGIT_FLOOR_PROB).ln();
                }
            }
        }
        Ok(params)
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row_start(&self, code: usize, prev: usize) -> usize {
        debug_assert!(code < self.n_codes && prev < self.vocab);
        (code * self.vocab + prev) * self.vocab
    }

    pub fn row(&self, code: usize, prev: usize) -> &[f64] {
        let start = self.row_start(code, prev);
        &self.logits[start..start + self.vocab]
    }

    /// Adds `scale * delta` coordinate-wise.
    pub fn apply_delta(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.logits.len());
        for (p, d) in self.logits.iter_mut().zip(delta) {
            *p += scale * d;
        }
    }

    /// Writes the checkpoint: magic, version, |C|, V, then little-endian
    /// f64 logits in layout order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_codes as u32).to_le_bytes())?;
        w.write_all(&(self.vocab as u32).to_le_bytes())?;
        for v in &self.logits {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?} in {}",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)?;
        let n_codes = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let vocab = u32::from_le_bytes(word) as usize;
        if n_codes == 0 || vocab < 2 {
            return Err(Error::Checkpoint(format!(
                "invalid dimensions |C|={n_codes}, V={vocab}"
            )));
        }
        let len = n_codes * vocab * vocab;
        let mut logits = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(|_| {
                Error::Checkpoint(format!("truncated parameter array in {}", path.display()))
            })?;
            logits.push(f64::from_le_bytes(buf));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self {
            n_codes,
            vocab,
            logits,
        })
    }
}

fn log_softmax_at(row: &[f64], next: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row[next] - lse
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|&x| x / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Log-likelihood of a document under the model.
pub fn log_prob(params: &ModelParams, doc: &Document) -> f64 {
    let mut total = 0.0;
    for window in doc.tokens.windows(2) {
        let row = params.row(doc.code, window[0] as usize);
        total += log_softmax_at(row, window[1] as usize);
    }
    total
}

/// Per-row components of a sparse per-sample gradient. `start` is the flat
/// offset of the `(code, prev)` row.
pub(crate) struct SparseGrad {
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl SparseGrad {
    pub fn squared_norm(&self) -> f64 {
        self.rows
            .iter()
            .map(|(_, row)| row.iter().map(|g| g * g).sum::<f64>())
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, row) in &mut self.rows {
            for g in row.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn add_into(&self, dense: &mut [f64]) {
        for (start, row) in &self.rows {
            for (d, g) in dense[*start..*start + row.len()].iter_mut().zip(row) {
                *d += g;
            }
        }
    }
}

/// Gradient of `-log p(doc)`; rows not visited by the document are zero.
pub(crate) fn sparse_grad_neg_log_prob(params: &ModelParams, doc: &Document) -> SparseGrad {
    // Group transitions by row so each visited row's softmax is computed once.
    let mut visits: Vec<(usize, Vec<u16>)> = Vec::new();
    for window in doc.tokens.windows(2) {
        let start = params.row_start(doc.code, window[0] as usize);
        match visits.iter_mut().find(|(s, _)| *s == start) {
            Some((_, nexts)) => nexts.push(window[1]),
            None => visits.push((start, vec![window[1]])),
        }
    }
    let mut rows = Vec::with_capacity(visits.len());
    for (start, nexts) in visits {
        let row = &params.as_slice()[start..start + params.vocab()];
        let probs = softmax(row, 1.0);
        let mut grad: Vec<f64> = probs.iter().map(|p| p * nexts.len() as f64).collect();
        for next in nexts {
            grad[next as usize] -= 1.0;
        }
        rows.push((start, grad));
    }
    SparseGrad { rows }
}

/// Dense gradient of `-log p(doc)` in the flat parameter layout.
pub fn grad_neg_log_prob(params: &ModelParams, doc: &Document) -> Vec<f64> {
    let mut dense = vec![0.0; params.len()];
    sparse_grad_neg_log_prob(params, doc).add_into(&mut dense);
    dense
}

/// One generated sequence with its model score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSample {
    pub tokens: Vec<u16>,
    pub code: usize,
    /// Model log-likelihood of the sequence (at temperature 1).
    pub log_prob: f64,
}

/// Ancestral sampling from `softmax(theta[code][prev] / temperature)`,
/// starting at BOS and stopping at EOS or `max_length` tokens.
pub fn sample<R: Rng + ?Sized>(
    params: &ModelParams,
    code: usize,
    max_length: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<GenSample> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(sample_impl(params, code, max_length, |row| {
        let probs = softmax(row, temperature);
        sample_categorical(&probs, rng)
    }))
}

/// Greedy argmax decoding, the temperature-zero limit. Ties resolve to the
/// lowest token id.
pub fn sample_greedy(params: &ModelParams, code: usize, max_length: usize) -> GenSample {
    sample_impl(params, code, max_length, |row| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    })
}

fn sample_impl(
    params: &ModelParams,
    code: usize,
    max_length: usize,
    mut pick: impl FnMut(&[f64]) -> usize,
) -> GenSample {
    assert!(code < params.n_codes(), "code out of range");
    let mut tokens = vec![BOS];
    let mut score = 0.0;
    while tokens.len() < max_length {
        let prev = *tokens.last().unwrap() as usize;
        let row = params.row(code, prev);
        let next = pick(row);
        score += log_softmax_at(row, next);
        tokens.push(next as u16);
        if next == EOS as usize {
            break;
        }
    }
    GenSample {
        tokens,
        code,
        log_prob: score,
    }
}

/// Generated documents with per-code index sets and, after refinement, the
/// noisy votes attached to each surviving sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<GenSample>,
    /// For each code `j`, the indices of `samples` generated under `j`.
    pub index_sets: Vec<Vec<usize>>,
    pub votes: Option<Vec<f64>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_codes(&self) -> usize {
        self.index_sets.len()
    }

    /// View of one sample as a corpus document.
    pub fn document(&self, i: usize) -> Document {
        Document {
            tokens: self.samples[i].tokens.clone(),
            code: self.samples[i].code,
        }
    }

    pub fn documents(&self) -> Vec<Document> {
        (0..self.len()).map(|i| self.document(i)).collect()
    }

    /// Writes samples as JSONL. With `audit` votes are included; audit
    /// output is not differentially private.
    pub fn write_jsonl(&self, path: &Path, code_set: &CodeSet, audit: bool) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            text: String,
            code: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            vote: Option<f64>,
        }
        let mut w = BufWriter::new(File::create(path)?);
        for (i, s) in self.samples.iter().enumerate() {
            let row = Row {
                text: tokenizer::decode(&s.tokens),
                code: code_set.label(s.code),
                vote: if audit {
                    self.votes.as_ref().map(|v| v[i])
                } else {
                    None
                },
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a JSONL synthetic set back; index sets are rebuilt by grouping
    /// rows by code in file order and scores are recomputed lazily as zero.
    pub fn read_jsonl(
        path: &Path,
        code_set: &CodeSet,
        max_length: usize,
        params: Option<&ModelParams>,
    ) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            text: String,
            code: String,
        }
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut samples = Vec::new();
        let mut index_sets = vec![Vec::new(); code_set.len()];
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            let code = code_set
                .index_of(&row.code)
                .ok_or_else(|| Error::UnknownCode(row.code.clone()))?;
            let tokens = tokenizer::encode(&row.text, max_length);
            let log_prob = params
                .map(|p| {
                    log_prob(
                        p,
                        &Document {
                            tokens: tokens.clone(),
                            code,
                        },
                    )
                })
                .unwrap_or(0.0);
            index_sets[code].push(samples.len());
            samples.push(GenSample {
                tokens,
                code,
                log_prob,
            });
        }
        Ok(Self {
            samples,
            index_sets,
            votes: None,
        })
    }
}

/// Generates exactly `allocation.counts[j]` samples for each code `j`.
pub fn generate_synthetic<R: Rng + ?Sized>(
    params: &ModelParams,
    allocation: &Allocation,
    max_length: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SyntheticDataset> {
    if allocation.counts.len() != params.n_codes() {
        return Err(Error::ShapeMismatch(format!(
            "allocation covers {} codes, model has {}",
            allocation.counts.len(),
            params.n_codes()
        )));
    }
    let mut samples = Vec::with_capacity(allocation.total);
    let mut index_sets = vec![Vec::new(); params.n_codes()];
    for (code, &count) in allocation.counts.iter().enumerate() {
        for _ in 0..count {
            index_sets[code].push(samples.len());
            samples.push(sample(params, code, max_length, temperature, rng)?);
        }
    }
    Ok(SyntheticDataset {
        samples,
        index_sets,
        votes: None,
    })
}
