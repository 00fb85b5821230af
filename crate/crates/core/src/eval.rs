//! Distribution-alignment metrics and downstream-utility evaluation.
//!
//! Alignment is measured by an unbiased Gaussian-kernel MMD estimate on
//! hashed embeddings plus the total-variation distance between control-code
//! histograms. Downstream utility trains a multinomial logistic regression
//! on bag-of-token features over synthetic data and scores it on held-out
//! real data.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::generator::SyntheticDataset;
use crate::refine::Embedding;
use crate::tokenizer::{BOS, EOS};

/// Gaussian kernel `exp(-||x - y||^2 / (2 bw^2))`.
fn kernel(a: &Embedding, b: &Embedding, bandwidth: f64) -> f64 {
    (-a.squared_distance(b) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Unbiased squared-MMD estimate with a Gaussian kernel, clamped at zero.
pub fn mmd(a: &[Embedding], b: &[Embedding], bandwidth: f64) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "unbiased MMD needs at least two samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let m = a.len() as f64;
    let n = b.len() as f64;
    let mut kaa = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i != j {
                kaa += kernel(&a[i], &a[j], bandwidth);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                kbb += kernel(&b[i], &b[j], bandwidth);
            }
        }
    }
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += kernel(x, y, bandwidth);
        }
    }
    let est = kaa / (m * (m - 1.0)) + kbb / (n * (n - 1.0)) - 2.0 * kab / (m * n);
    Ok(est.max(0.0))
}

/// Median pairwise distance of the pooled sample; 1.0 when degenerate.
pub fn median_heuristic_bandwidth(pooled: &[Embedding]) -> f64 {
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len().saturating_sub(1)) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(pooled[i].squared_distance(&pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = dists[dists.len() / 2];
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn code_histogram(codes: impl Iterator<Item = usize>, n_codes: usize) -> Result<Vec<f64>> {
    let mut hist = vec![0.0; n_codes];
    let mut total = 0.0;
    for code in codes {
        if code >= n_codes {
            return Err(Error::ShapeMismatch(format!(
                "code {code} outside histogram of {n_codes}"
            )));
        }
        hist[code] += 1.0;
        total += 1.0;
    }
    if total == 0.0 {
        return Err(Error::InvalidParameter("empty dataset has no histogram".into()));
    }
    for h in hist.iter_mut() {
        *h /= total;
    }
    Ok(hist)
}

/// Total-variation distance between the synthetic and reference control-code
/// histograms, in `[0, 1]`.
pub fn code_histogram_tv(
    synthetic: &SyntheticDataset,
    reference: &[Document],
    n_codes: usize,
) -> Result<f64> {
    let syn = code_histogram(synthetic.samples.iter().map(|s| s.code), n_codes)?;
    let rf = code_histogram(reference.iter().map(|d| d.code), n_codes)?;
    Ok(0.5 * syn.iter().zip(&rf).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Multinomial logistic regression over bag-of-token features.
///
/// Features are per-document token frequencies (sentinels excluded) plus a
/// bias term; training is full-batch gradient descent from zero weights, so
/// it is deterministic by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    n_codes: usize,
    n_features: usize,
    /// Row-major `[n_codes][n_features + 1]`, bias last.
    weights: Vec<f64>,
}

/// Training hyperparameters; the defaults suit desk-scale corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 2.0,
        }
    }
}

/// Token-frequency features; BOS/EOS carry no signal and are dropped.
fn features(doc: &Document, n_features: usize) -> Vec<f64> {
    let mut x = vec![0.0; n_features];
    let mut count = 0.0;
    for &t in &doc.tokens {
        if t == BOS || t == EOS {
            continue;
        }
        let idx = (t as usize - 2).min(n_features - 1);
        x[idx] += 1.0;
        count += 1.0;
    }
    if count > 0.0 {
        for v in x.iter_mut() {
            *v /= count;
        }
    }
    x
}

fn feature_count() -> usize {
    crate::tokenizer::VOCAB_SIZE - 2
}

impl Classifier {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        let stride = self.n_features + 1;
        (0..self.n_codes)
            .map(|c| {
                let row = &self.weights[c * stride..(c + 1) * stride];
                let mut z = row[self.n_features];
                for (w, v) in row[..self.n_features].iter().zip(x) {
                    z += w * v;
                }
                z
            })
            .collect()
    }

    pub fn predict(&self, doc: &Document) -> usize {
        let x = features(doc, self.n_features);
        let scores = self.scores(&x);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Trains the downstream control-code classifier on labeled documents.
pub fn train_classifier(
    train: &[Document],
    n_codes: usize,
    cfg: &ClassifierConfig,
) -> Result<Classifier> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut present = vec![false; n_codes];
    for d in train {
        present[d.code] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidParameter(
            "training set must contain at least two classes".into(),
        ));
    }

    let n_features = feature_count();
    let stride = n_features + 1;
    let xs: Vec<Vec<f64>> = train.iter().map(|d| features(d, n_features)).collect();
    let mut clf = Classifier {
        n_codes,
        n_features,
        weights: vec![0.0; n_codes * stride],
    };
    let inv_n = 1.0 / train.len() as f64;
    let mut grad = vec![0.0; clf.weights.len()];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, d) in xs.iter().zip(train) {
            let scores = clf.scores(x);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..n_codes {
                let err = exps[c] / z - if c == d.code { 1.0 } else { 0.0 };
                let row = &mut grad[c * stride..(c + 1) * stride];
                for (g, v) in row[..n_features].iter_mut().zip(x) {
                    *g += err * v;
                }
                row[n_features] += err;
            }
        }
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * inv_n * g;
        }
    }
    Ok(clf)
}

/// Accuracy and macro-F1 on a test set. Macro-F1 averages per-class F1
/// over the classes present in the test set.
pub fn evaluate(clf: &Classifier, test: &[Document]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    let n_codes = clf.n_codes;
    let mut tp = vec![0.0; n_codes];
    let mut fp = vec![0.0; n_codes];
    let mut fn_ = vec![0.0; n_codes];
    let mut correct = 0usize;
    for d in test {
        let pred = clf.predict(d);
        if pred == d.code {
            correct += 1;
            tp[d.code] += 1.0;
        } else {
            fp[pred] += 1.0;
            fn_[d.code] += 1.0;
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    let mut f1_sum = 0.0;
    let mut classes = 0.0;
    for c in 0..n_codes {
        if tp[c] + fn_[c] == 0.0 {
            continue; // class absent from test
        }
        classes += 1.0;
        let denom = 2.0 * tp[c] + fp[c] + fn_[c];
        if denom > 0.0 {
            f1_sum += 2.0 * tp[c] / denom;
        }
    }
    Ok((accuracy, f1_sum / classes))
}

/// One evaluation record, tied to the exact run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Which synthetic set was scored ("unrefined" or "refined").
    pub dataset: String,
    pub mmd: f64,
    pub code_tv: f64,
    pub downstream_accuracy: f64,
    pub downstream_macro_f1: f64,
    pub seed: u64,
    pub config_fingerprint: String,
}
