//! Data model, JSONL ingestion, ground-truth corpus synthesis, and client
//! partitioning.
//!
//! The ground-truth generator ([`CorpusSpec`]) produces corpora with a known
//! per-code token distribution, which the rest of the pipeline treats as the
//! "real" federated data. Partitioning supports an IID mode and a non-IID
//! mode where strong clients only see a subset of control codes.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiling::ProfileVector;
use crate::rng::sample_categorical;
use crate::tokenizer::{self, BOS, EOS};

/// The shared, non-private vocabulary of conditioning labels.
///
/// Indices are contiguous and identical on every client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSet {
    labels: Vec<String>,
}

impl CodeSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidParameter("code set must be nonempty".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(Error::InvalidParameter("code labels must be nonempty".into()));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::InvalidParameter(format!("duplicate code label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    /// A code set with generated labels `c0..c{n-1}`.
    pub fn generic(n: usize) -> Self {
        Self {
            labels: (0..n).map(|i| format!("c{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// One text sample: a BOS-prefixed token sequence and its control code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<u16>,
    pub code: usize,
}

/// Whether a client can afford local finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Strong,
    Weak,
}

/// One silo's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub documents: Vec<Document>,
    pub capacity: Capacity,
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    code: String,
}

#[derive(Serialize)]
struct JsonlRecordRef<'a> {
    text: &'a str,
    code: &'a str,
}

/// Loads a JSON-Lines corpus (`{"text": .., "code": ..}` per line).
///
/// Lines are tokenized with the fixed tokenizer and order is preserved.
pub fn load_corpus(path: &Path, code_set: &CodeSet, max_length: usize) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::MalformedRecord {
        path: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        let code = code_set
            .index_of(&record.code)
            .ok_or_else(|| Error::UnknownCode(record.code.clone()))?;
        documents.push(Document {
            tokens: tokenizer::encode(&record.text, max_length),
            code,
        });
    }
    Ok(documents)
}

/// Writes documents as JSONL, detokenizing back to text.
pub fn write_corpus(path: &Path, documents: &[Document], code_set: &CodeSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in documents {
        let text = tokenizer::decode(&doc.tokens);
        let record = JsonlRecordRef {
            text: &text,
            code: code_set.label(doc.code),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth generator: per-code token-transition tables plus a code
/// mixture, used both to synthesize corpora with a known distribution and
/// to fit "pretrained" model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    /// Per-code mixture weights; sums to 1.
    pub mixture: Vec<f64>,
    /// Row-stochastic transition tables, indexed `[code][prev][next]`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub max_length: usize,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl CorpusSpec {
    pub fn n_codes(&self) -> usize {
        self.mixture.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::InvalidCorpusSpec("vocab must include sentinels".into()));
        }
        if self.max_length < 2 {
            return Err(Error::InvalidCorpusSpec("max_length must be at least 2".into()));
        }
        if self.mixture.is_empty() || self.transitions.len() != self.mixture.len() {
            return Err(Error::InvalidCorpusSpec(
                "mixture and transition tables must cover the same codes".into(),
            ));
        }
        let mix_sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|&w| w < 0.0) || (mix_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidCorpusSpec(format!(
                "mixture weights must be nonnegative and sum to 1, got sum {mix_sum}"
            )));
        }
        for (code, table) in self.transitions.iter().enumerate() {
            if table.len() != self.vocab_size {
                return Err(Error::InvalidCorpusSpec(format!(
                    "code {code}: table has {} rows, expected {}",
                    table.len(),
                    self.vocab_size
                )));
            }
            for (prev, row) in table.iter().enumerate() {
                if row.len() != self.vocab_size {
                    return Err(Error::InvalidCorpusSpec(format!(
                        "code {code} row {prev}: {} entries, expected {}",
                        row.len(),
                        self.vocab_size
                    )));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidCorpusSpec(format!(
                        "code {code} row {prev} is not stochastic (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Benchmark spec: each code writes from its own small letter cluster,
    /// giving codes separable token statistics while sharing spaces and
    /// sentence lengths. Deterministic in `seed`.
    pub fn benchmark(n_codes: usize, seed: u64) -> Self {
        let vocab = tokenizer::VOCAB_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = tokenizer::token_of(' ') as usize;
        let letter = |i: usize| tokenizer::token_of((b'a' + (i % 26) as u8) as char) as usize;

        let mut transitions = Vec::with_capacity(n_codes);
        for code in 0..n_codes {
            let cluster: Vec<usize> = (0..5).map(|i| letter(code * 5 + i)).collect();
            let mut table = vec![vec![0.0; vocab]; vocab];
            for prev in 0..vocab {
                let row = &mut table[prev];
                if prev == EOS as usize {
                    // Never a predecessor during generation; keep it stochastic.
                    let w = 1.0 / (vocab - 1) as f64;
                    for (next, r) in row.iter_mut().enumerate() {
                        if next != BOS as usize {
                            *r = w;
                        }
                    }
                    continue;
                }
                let (cluster_mass, space_mass, eos_mass) = if prev == BOS as usize {
                    (1.0, 0.0, 0.0)
                } else if prev == space {
                    (0.85, 0.0, 0.05)
                } else if cluster.contains(&prev) {
                    (0.75, 0.10, 0.07)
                } else {
                    (0.80, 0.05, 0.05)
                };
                let smooth_mass = 1.0 - cluster_mass - space_mass - eos_mass;

                let weights: Vec<f64> = cluster
                    .iter()
                    .map(|_| 0.25 + rand::Rng::random::<f64>(&mut rng))
                    .collect();
                let wsum: f64 = weights.iter().sum();
                for (i, &t) in cluster.iter().enumerate() {
                    row[t] += cluster_mass * weights[i] / wsum;
                }
                row[space] += space_mass;
                row[EOS as usize] += eos_mass;

                // Spread the remainder over printable tokens outside the
                // cluster so every code shares a thin common support.
                let others: Vec<usize> = (3..vocab)
                    .filter(|t| !cluster.contains(t) && *t != space)
                    .collect();
                let per = smooth_mass / others.len() as f64;
                for t in others {
                    row[t] += per;
                }

                let sum: f64 = row.iter().sum();
                for r in row.iter_mut() {
                    *r /= sum;
                }
            }
            transitions.push(table);
        }

        CorpusSpec {
            vocab_size: vocab,
            mixture: vec![1.0 / n_codes as f64; n_codes],
            transitions,
            max_length: 64,
        }
    }

    /// Blends every transition row toward a random distribution, emulating a
    /// pretrained model whose distribution diverges from the target.
    /// `magnitude` 0 returns an identical spec; 1 is fully random.
    pub fn shifted(&self, magnitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lambda = magnitude.clamp(0.0, 1.0);
        let mut out = self.clone();
        for table in &mut out.transitions {
            for (prev, row) in table.iter_mut().enumerate() {
                if prev == EOS as usize {
                    continue;
                }
                // Random support over printable tokens and EOS; BOS is never
                // a target so chains stay well-formed.
                let mut noise = vec![0.0; self.vocab_size];
                let mut total = 0.0;
                for (next, n) in noise.iter_mut().enumerate() {
                    if next != BOS as usize && next != tokenizer::UNK as usize {
                        *n = rand::Rng::random::<f64>(&mut rng);
                        total += *n;
                    }
                }
                for (r, n) in row.iter_mut().zip(&noise) {
                    *r = (1.0 - lambda) * *r + lambda * n / total;
                }
                let sum: f64 = row.iter().sum();
                for r in row.iter_mut() {
                    *r /= sum;
                }
            }
        }
        out
    }
}

/// Samples `n` documents i.i.d. from the spec: code from the mixture, then
/// a token chain from that code's transition table. Deterministic in `seed`.
pub fn synthesize_ground_truth(spec: &CorpusSpec, n: usize, seed: u64) -> Result<Vec<Document>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::with_capacity(n);
    for _ in 0..n {
        let code = sample_categorical(&spec.mixture, &mut rng);
        let mut tokens = vec![BOS];
        loop {
            let prev = *tokens.last().unwrap() as usize;
            let next = sample_categorical(&spec.transitions[code][prev], &mut rng) as u16;
            tokens.push(next);
            if next == EOS || tokens.len() >= spec.max_length {
                break;
            }
        }
        documents.push(Document { tokens, code });
    }
    Ok(documents)
}

/// Number of strong clients for a fraction, guarded against float fuzz.
fn strong_count(n_clients: usize, strong_fraction: f64) -> Result<usize> {
    if !(strong_fraction > 0.0 && strong_fraction <= 1.0) {
        return Err(Error::Partition(format!(
            "strong_fraction must lie in (0, 1], got {strong_fraction}"
        )));
    }
    let k = (strong_fraction * n_clients as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n_clients))
}

/// Uniformly partitions a corpus: seeded shuffle, then round-robin deal.
///
/// Client sizes differ by at most one; the first `ceil(strong_fraction * n)`
/// clients are marked strong.
pub fn partition_iid(
    corpus: &[Document],
    n_clients: usize,
    strong_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if n_clients > corpus.len() {
        return Err(Error::Partition(format!(
            "{n_clients} clients but only {} documents",
            corpus.len()
        )));
    }
    let n_strong = strong_count(n_clients, strong_fraction)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut clients: Vec<ClientDataset> = (0..n_clients)
        .map(|client_id| ClientDataset {
            client_id,
            documents: Vec::new(),
            capacity: if client_id < n_strong {
                Capacity::Strong
            } else {
                Capacity::Weak
            },
        })
        .collect();
    for (i, &doc) in order.iter().enumerate() {
        clients[i % n_clients].documents.push(corpus[doc].clone());
    }
    Ok(clients)
}

/// Non-IID partition: strong clients receive only documents whose code is
/// in `strong_codes`; weak clients share the remainder uniformly.
pub fn partition_noniid(
    corpus: &[Document],
    n_clients: usize,
    strong_fraction: f64,
    strong_codes: &BTreeSet<usize>,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if strong_codes.is_empty() {
        return Err(Error::Partition("strong_codes must be nonempty".into()));
    }
    let n_strong = strong_count(n_clients, strong_fraction)?;
    let n_weak = n_clients - n_strong;

    let mut matching: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (i, doc) in corpus.iter().enumerate() {
        if strong_codes.contains(&doc.code) {
            matching.push(i);
        } else {
            rest.push(i);
        }
    }
    if matching.is_empty() {
        return Err(Error::Partition("no document matches strong_codes".into()));
    }
    if matching.len() < n_strong {
        return Err(Error::Partition(format!(
            "{} matching documents cannot fill {n_strong} strong clients",
            matching.len()
        )));
    }
    if n_weak > 0 && rest.len() < n_weak {
        return Err(Error::Partition(format!(
            "{} remaining documents cannot fill {n_weak} weak clients",
            rest.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    matching.shuffle(&mut rng);
    rest.shuffle(&mut rng);

    let mut clients: Vec<ClientDataset> = (0..n_clients)
        .map(|client_id| ClientDataset {
            client_id,
            documents: Vec::new(),
            capacity: if client_id < n_strong {
                Capacity::Strong
            } else {
                Capacity::Weak
            },
        })
        .collect();
    for (i, &doc) in matching.iter().enumerate() {
        clients[i % n_strong].documents.push(corpus[doc].clone());
    }
    if n_weak > 0 {
        for (i, &doc) in rest.iter().enumerate() {
            clients[n_strong + i % n_weak].documents.push(corpus[doc].clone());
        }
    } else if !rest.is_empty() {
        return Err(Error::Partition(
            "documents outside strong_codes but no weak clients to hold them".into(),
        ));
    }
    Ok(clients)
}

/// Exact per-code document counts for one client.
pub fn profile(ds: &ClientDataset, code_set: &CodeSet) -> ProfileVector {
    let mut counts = vec![0.0; code_set.len()];
    for doc in &ds.documents {
        counts[doc.code] += 1.0;
    }
    ProfileVector(counts)
}
