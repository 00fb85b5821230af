//! KNN voting with DP, vote aggregation, per-code probability
//! normalization, and weighted sampling without replacement.
//!
//! Voters embed documents as hashed bags of token 3-grams and cast `K`
//! votes for the nearest same-code synthetic candidates. The server adds
//! calibrated Gaussian noise per voter, sums, normalizes within each code,
//! and resamples candidates sequentially without replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClientDataset, Document};
use crate::error::{Error, Result};
use crate::generator::SyntheticDataset;
use crate::privacy::{
    add_gaussian_noise, calibrate_analytic_gaussian, Ledger, LedgerEntry, Neighboring, Phase,
    PrivacyBudget,
};
use crate::rng::{fnv1a, stream_rng};

/// Unit-norm hashed embedding of a document; zero for documents shorter
/// than one 3-gram.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn squared_distance(&self, other: &Embedding) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Default embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Hashed bag of token 3-grams: each 3-gram hashes to a bucket and a sign,
/// and the result is L2-normalized. Deterministic and corpus-independent.
pub fn embed(doc: &Document, dim: usize) -> Result<Embedding> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "embedding dimension must be a power of two, got {dim}"
        )));
    }
    Ok(embed_tokens(&doc.tokens, dim))
}

pub(crate) fn embed_tokens(tokens: &[u16], dim: usize) -> Embedding {
    let mut values = vec![0.0; dim];
    for gram in tokens.windows(3) {
        let mut bytes = [0u8; 6];
        bytes[0..2].copy_from_slice(&gram[0].to_le_bytes());
        bytes[2..4].copy_from_slice(&gram[1].to_le_bytes());
        bytes[4..6].copy_from_slice(&gram[2].to_le_bytes());
        let h = fnv1a(&bytes);
        let bucket = (h as usize) & (dim - 1);
        let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v /= norm;
        }
    }
    Embedding(values)
}

/// One client's votes over the synthetic candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteVector(pub Vec<f64>);

impl VoteVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pre-noise KNN votes for one client against precomputed candidate
/// embeddings. Each local example adds one vote to each of its `k`
/// nearest same-code candidates (all of them when the pool is smaller);
/// codes with no candidates are skipped with a warning.
fn raw_votes(
    synthetic_embeddings: &[Embedding],
    index_sets: &[Vec<usize>],
    ds: &ClientDataset,
    k: usize,
    embed_dim: usize,
) -> Vec<f64> {
    let mut votes = vec![0.0; synthetic_embeddings.len()];
    for doc in &ds.documents {
        let pool = &index_sets[doc.code];
        if pool.is_empty() {
            log::warn!(
                "client {}: no synthetic candidates for code {}, skipping example",
                ds.client_id,
                doc.code
            );
            continue;
        }
        if pool.len() <= k {
            for &i in pool {
                votes[i] += 1.0;
            }
            continue;
        }
        let local = embed_tokens(&doc.tokens, embed_dim);
        let mut dists: Vec<(f64, usize)> = pool
            .iter()
            .map(|&i| (local.squared_distance(&synthetic_embeddings[i]), i))
            .collect();
        // Ties break toward the lower candidate index.
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, i) in dists.iter().take(k) {
            votes[i] += 1.0;
        }
    }
    votes
}

/// KNN voting for one client, with calibrated Gaussian noise when a budget
/// is given (`sensitivity` is the voter's L2 contribution bound, normally
/// `sqrt(K)`). Returns the noisy vote vector.
#[allow(clippy::too_many_arguments)]
pub fn local_vote<R: Rng + ?Sized>(
    synthetic: &SyntheticDataset,
    ds: &ClientDataset,
    k: usize,
    embed_dim: usize,
    budget: Option<&PrivacyBudget>,
    sensitivity: f64,
    ledger: &Ledger,
    rng: &mut R,
) -> Result<VoteVector> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let embeddings: Vec<Embedding> = synthetic
        .samples
        .iter()
        .map(|s| embed_tokens(&s.tokens, embed_dim))
        .collect();
    if embed_dim == 0 || !embed_dim.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "embedding dimension must be a power of two, got {embed_dim}"
        )));
    }
    let votes = raw_votes(&embeddings, &synthetic.index_sets, ds, k, embed_dim);
    apply_vote_noise(votes, ds.client_id, budget, sensitivity, ledger, rng)
}

fn apply_vote_noise<R: Rng + ?Sized>(
    votes: Vec<f64>,
    client_id: usize,
    budget: Option<&PrivacyBudget>,
    sensitivity: f64,
    ledger: &Ledger,
    rng: &mut R,
) -> Result<VoteVector> {
    let Some(budget) = budget else {
        return Ok(VoteVector(votes));
    };
    let sigma = calibrate_analytic_gaussian(*budget, sensitivity)?;
    let noisy = add_gaussian_noise(&votes, sigma, rng);
    ledger.append(LedgerEntry {
        client_id,
        phase: Phase::Vote,
        budget: *budget,
        sensitivity,
        sigma,
        steps: 1,
    });
    Ok(VoteVector(noisy))
}

/// Coordinate-wise sum of vote vectors. An empty voter set degenerates to
/// the zero vector (refinement then falls back to uniform sampling).
pub fn aggregate_votes(votes: &[VoteVector], len: usize) -> Result<VoteVector> {
    let mut sum = vec![0.0; len];
    for v in votes {
        if v.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "vote vector length {} != {len}",
                v.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(&v.0) {
            *s += x;
        }
    }
    Ok(VoteVector(sum))
}

/// Per-code selection probabilities from aggregated votes.
///
/// Noise can push entries negative, so each code's slice clamps at zero
/// first; an all-zero slice falls back to uniform.
pub fn per_code_probabilities(votes: &VoteVector, index_sets: &[Vec<usize>]) -> Vec<Vec<f64>> {
    index_sets
        .iter()
        .map(|set| {
            let clamped: Vec<f64> = set.iter().map(|&i| votes.0[i].max(0.0)).collect();
            let total: f64 = clamped.iter().sum();
            if total > 0.0 {
                clamped.iter().map(|&v| v / total).collect()
            } else if set.is_empty() {
                Vec::new()
            } else {
                vec![1.0 / set.len() as f64; set.len()]
            }
        })
        .collect()
}

/// Sequential weighted sampling without replacement.
///
/// Draws `M = min(max(1, floor(r * n)), n)` distinct indices; each draw
/// picks with probability proportional to the remaining weights, or
/// uniformly once all remaining weight is zero. Returned in draw order.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    indices: &[usize],
    rate: f64,
    p: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling rate must lie in (0, 1], got {rate}"
        )));
    }
    if p.len() != indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} indices",
            p.len(),
            indices.len()
        )));
    }
    let n = indices.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = ((rate * n as f64).floor() as usize).max(1).min(n);

    let mut remaining: Vec<(usize, f64)> = indices.iter().copied().zip(p.iter().copied()).collect();
    let mut selected = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = remaining.iter().map(|&(_, w)| w).sum();
        let pos = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = None;
            for (j, &(_, w)) in remaining.iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    last_positive = Some(j);
                    if acc > target {
                        pick = Some(j);
                        break;
                    }
                }
            }
            pick.or(last_positive).expect("positive total implies a positive weight")
        } else {
            rng.random_range(0..remaining.len())
        };
        let (idx, _) = remaining.remove(pos);
        selected.push(idx);
    }
    Ok(selected)
}

/// Knobs for Stage 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub k: usize,
    pub rate: f64,
    pub embed_dim: usize,
    /// Replace vote-derived probabilities with uniform ones (the
    /// uniform-subsampling control).
    pub uniform: bool,
    pub neighboring: Neighboring,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            k: 5,
            rate: 0.2,
            embed_dim: DEFAULT_EMBED_DIM,
            uniform: false,
            neighboring: Neighboring::AddRemove,
        }
    }
}

/// Refinement outputs: the refined dataset plus the vote vectors for audit.
#[derive(Debug, Clone)]
pub struct RefineReport {
    pub refined: SyntheticDataset,
    /// Aggregated noisy votes over the full candidate set.
    pub votes: VoteVector,
    /// Aggregated pre-noise votes; simulator-side audit data, not private.
    pub votes_prenoise: VoteVector,
    /// Selected candidate indices per code, ascending.
    pub selected: Vec<Vec<usize>>,
}

/// Stage 4: per-voter KNN voting, aggregation, per-code normalization, and
/// weighted resampling. Per-voter and per-code randomness is derived from
/// `master_seed`, so voter order never perturbs the outcome.
pub fn refine(
    synthetic: &SyntheticDataset,
    voters: &[ClientDataset],
    opts: &RefineOptions,
    budget: Option<&PrivacyBudget>,
    ledger: &Ledger,
    master_seed: u64,
) -> Result<RefineReport> {
    if synthetic.is_empty() {
        return Err(Error::InvalidParameter("synthetic candidate set is empty".into()));
    }
    if opts.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if opts.embed_dim == 0 || !opts.embed_dim.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "embedding dimension must be a power of two, got {}",
            opts.embed_dim
        )));
    }
    let embeddings: Vec<Embedding> = synthetic
        .samples
        .iter()
        .map(|s| embed_tokens(&s.tokens, opts.embed_dim))
        .collect();
    let sensitivity = opts.neighboring.vote_sensitivity(opts.k);

    let mut noisy = Vec::with_capacity(voters.len());
    let mut prenoise = vec![0.0; synthetic.len()];
    for ds in voters {
        let raw = raw_votes(&embeddings, &synthetic.index_sets, ds, opts.k, opts.embed_dim);
        for (acc, v) in prenoise.iter_mut().zip(&raw) {
            *acc += v;
        }
        let mut rng = stream_rng(master_seed, "vote", ds.client_id as u64);
        noisy.push(apply_vote_noise(
            raw,
            ds.client_id,
            budget,
            sensitivity,
            ledger,
            &mut rng,
        )?);
    }
    let votes = aggregate_votes(&noisy, synthetic.len())?;

    let probs = if opts.uniform {
        synthetic
            .index_sets
            .iter()
            .map(|set| {
                if set.is_empty() {
                    Vec::new()
                } else {
                    vec![1.0 / set.len() as f64; set.len()]
                }
            })
            .collect()
    } else {
        per_code_probabilities(&votes, &synthetic.index_sets)
    };

    let mut selected = Vec::with_capacity(synthetic.index_sets.len());
    for (code, set) in synthetic.index_sets.iter().enumerate() {
        let mut rng = stream_rng(master_seed, "refine", code as u64);
        let mut chosen = sample_without_replacement(set, opts.rate, &probs[code], &mut rng)?;
        chosen.sort_unstable();
        selected.push(chosen);
    }

    let mut samples = Vec::new();
    let mut index_sets = vec![Vec::new(); synthetic.index_sets.len()];
    let mut kept_votes = Vec::new();
    for (code, chosen) in selected.iter().enumerate() {
        for &i in chosen {
            index_sets[code].push(samples.len());
            samples.push(synthetic.samples[i].clone());
            kept_votes.push(votes.0[i]);
        }
    }
    let refined = SyntheticDataset {
        samples,
        index_sets,
        votes: Some(kept_votes),
    };
    Ok(RefineReport {
        refined,
        votes,
        votes_prenoise: VoteVector(prenoise),
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Capacity;
    use crate::generator::GenSample;
    use crate::tokenizer::{BOS, EOS};

    fn doc(tokens: &[u16], code: usize) -> Document {
        Document {
            tokens: tokens.to_vec(),
            code,
        }
    }

    fn synthetic_from_docs(docs: &[Document], n_codes: usize) -> SyntheticDataset {
        let mut samples = Vec::new();
        let mut index_sets = vec![Vec::new(); n_codes];
        for d in docs {
            index_sets[d.code].push(samples.len());
            samples.push(GenSample {
                tokens: d.tokens.clone(),
                code: d.code,
                log_prob: 0.0,
            });
        }
        SyntheticDataset {
            samples,
            index_sets,
            votes: None,
        }
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let d = doc(&[BOS, 10, 11, 12, 13, EOS], 0);
        let a = embed(&d, 256).unwrap();
        let b = embed(&d, 256).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn short_documents_embed_to_flagged_zero() {
        let d = doc(&[BOS, EOS], 0);
        let e = embed(&d, 64).unwrap();
        assert!(e.is_zero());
    }

    #[test]
    fn embed_requires_power_of_two_dim() {
        let d = doc(&[BOS, 10, 11, EOS], 0);
        assert!(embed(&d, 100).is_err());
        assert!(embed(&d, 0).is_err());
    }

    #[test]
    fn nearest_neighbor_ordering_matches_exact_trigram_cosine() {
        // Exact-cosine oracle on raw 3-gram count vectors at small scale.
        use std::collections::HashMap;
        let mut rng = stream_rng(3, "emb", 0);
        let random_doc = |rng: &mut rand_chacha::ChaCha8Rng| {
            let len = rng.random_range(6..20usize);
            let mut tokens = vec![BOS];
            for _ in 0..len {
                tokens.push(rng.random_range(3..20u16));
            }
            tokens.push(EOS);
            doc(&tokens, 0)
        };
        let exact_cosine = |a: &Document, b: &Document| -> f64 {
            let grams = |d: &Document| {
                let mut m: HashMap<(u16, u16, u16), f64> = HashMap::new();
                for w in d.tokens.windows(3) {
                    *m.entry((w[0], w[1], w[2])).or_default() += 1.0;
                }
                m
            };
            let (ga, gb) = (grams(a), grams(b));
            let dot: f64 = ga
                .iter()
                .filter_map(|(k, va)| gb.get(k).map(|vb| va * vb))
                .sum();
            let na: f64 = ga.values().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = gb.values().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };

        let dim = 1024;
        let mut checked = 0;
        for _ in 0..300 {
            let query = random_doc(&mut rng);
            let a = random_doc(&mut rng);
            let b = random_doc(&mut rng);
            let exact_a = exact_cosine(&query, &a);
            let exact_b = exact_cosine(&query, &b);
            if (exact_a - exact_b).abs() < 0.08 {
                continue; // too close to call under hashing noise
            }
            let eq = embed(&query, dim).unwrap();
            let da = eq.squared_distance(&embed(&a, dim).unwrap());
            let db = eq.squared_distance(&embed(&b, dim).unwrap());
            // Higher cosine similarity must mean smaller embedding distance.
            assert_eq!(exact_a > exact_b, da < db, "cos=({exact_a},{exact_b})");
            checked += 1;
        }
        assert!(checked > 50, "only {checked} informative pairs");
    }

    #[test]
    fn single_voter_nearest_neighbor_gets_the_vote() {
        // Candidate 0 shares the query's 3-grams; candidate 1 does not.
        let candidates = vec![doc(&[BOS, 10, 11, 12, EOS], 0), doc(&[BOS, 30, 31, 32, EOS], 0)];
        let synthetic = synthetic_from_docs(&candidates, 1);
        let ds = ClientDataset {
            client_id: 0,
            documents: vec![doc(&[BOS, 10, 11, 12, EOS], 0)],
            capacity: Capacity::Weak,
        };
        let ledger = Ledger::new();
        let v = local_vote(
            &synthetic,
            &ds,
            1,
            256,
            None,
            1.0,
            &ledger,
            &mut stream_rng(0, "v", 0),
        )
        .unwrap();
        assert_eq!(v.0, vec![1.0, 0.0]);
    }

    #[test]
    fn small_pools_get_one_vote_per_candidate() {
        let candidates = vec![doc(&[BOS, 10, 11, 12, EOS], 0), doc(&[BOS, 30, 31, 32, EOS], 0)];
        let synthetic = synthetic_from_docs(&candidates, 1);
        let ds = ClientDataset {
            client_id: 0,
            documents: vec![
                doc(&[BOS, 10, 11, 12, EOS], 0),
                doc(&[BOS, 30, 31, 33, EOS], 0),
                doc(&[BOS, 40, 41, 42, EOS], 0),
            ],
            capacity: Capacity::Weak,
        };
        let ledger = Ledger::new();
        let v = local_vote(
            &synthetic,
            &ds,
            5,
            256,
            None,
            5.0f64.sqrt(),
            &ledger,
            &mut stream_rng(0, "v", 1),
        )
        .unwrap();
        assert_eq!(v.0, vec![3.0, 3.0]);
    }

    #[test]
    fn votes_never_cross_codes() {
        let candidates = vec![
            doc(&[BOS, 10, 11, 12, EOS], 0),
            doc(&[BOS, 10, 11, 12, EOS], 1),
            doc(&[BOS, 10, 11, 13, EOS], 1),
        ];
        let synthetic = synthetic_from_docs(&candidates, 2);
        let ds = ClientDataset {
            client_id: 2,
            documents: vec![doc(&[BOS, 10, 11, 12, EOS], 1)],
            capacity: Capacity::Weak,
        };
        let ledger = Ledger::new();
        let v = local_vote(
            &synthetic,
            &ds,
            1,
            256,
            None,
            1.0,
            &ledger,
            &mut stream_rng(0, "v", 2),
        )
        .unwrap();
        assert_eq!(v.0[0], 0.0);
        assert_eq!(v.0[1], 1.0);
        assert_eq!(v.0[2], 0.0);
    }

    #[test]
    fn vote_mass_is_conserved_pre_noise() {
        let mut rng = stream_rng(9, "v", 3);
        let mut docs_pool = Vec::new();
        for code in 0..2 {
            for _ in 0..20 {
                let mut tokens = vec![BOS];
                for _ in 0..10 {
                    tokens.push(rng.random_range(3..30u16));
                }
                tokens.push(EOS);
                docs_pool.push(doc(&tokens, code));
            }
        }
        let synthetic = synthetic_from_docs(&docs_pool, 2);
        let mut local = Vec::new();
        for code in 0..2 {
            for _ in 0..7 {
                let mut tokens = vec![BOS];
                for _ in 0..10 {
                    tokens.push(rng.random_range(3..30u16));
                }
                tokens.push(EOS);
                local.push(doc(&tokens, code));
            }
        }
        let ds = ClientDataset {
            client_id: 0,
            documents: local,
            capacity: Capacity::Weak,
        };
        let ledger = Ledger::new();
        let k = 3;
        let v = local_vote(
            &synthetic,
            &ds,
            k,
            256,
            None,
            1.0,
            &ledger,
            &mut stream_rng(0, "v", 4),
        )
        .unwrap();
        // Each of the 14 local examples casts exactly min(k, pool) = 3 votes.
        let total: f64 = v.0.iter().sum();
        assert_eq!(total, (14 * k) as f64);
    }

    #[test]
    fn noisy_votes_are_ledgered() {
        let candidates = vec![doc(&[BOS, 10, 11, 12, EOS], 0)];
        let synthetic = synthetic_from_docs(&candidates, 1);
        let ds = ClientDataset {
            client_id: 5,
            documents: vec![doc(&[BOS, 10, 11, 12, EOS], 0)],
            capacity: Capacity::Weak,
        };
        let ledger = Ledger::new();
        let budget = PrivacyBudget::new(6.0, 1e-4).unwrap();
        let k = 5;
        let sens = Neighboring::AddRemove.vote_sensitivity(k);
        let v = local_vote(
            &synthetic,
            &ds,
            k,
            256,
            Some(&budget),
            sens,
            &ledger,
            &mut stream_rng(0, "v", 5),
        )
        .unwrap();
        assert_ne!(v.0, vec![1.0]);
        let entries = ledger.snapshot();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].phase, Phase::Vote);
        assert_eq!(entries[0].sensitivity, sens);
    }

    #[test]
    fn aggregate_votes_handles_empty_and_sums() {
        let zero = aggregate_votes(&[], 4).unwrap();
        assert_eq!(zero.0, vec![0.0; 4]);
        let a = VoteVector(vec![1.0, 2.0]);
        let b = VoteVector(vec![0.5, -1.0]);
        let one = aggregate_votes(&[a.clone()], 2).unwrap();
        assert_eq!(one, a);
        let sum = aggregate_votes(&[a, b], 2).unwrap();
        assert_eq!(sum.0, vec![1.5, 1.0]);
        assert!(aggregate_votes(&[VoteVector(vec![1.0])], 2).is_err());
    }

    #[test]
    fn aggregate_votes_matches_sequential_accumulation() {
        let mut rng = stream_rng(4, "v", 6);
        let vs: Vec<VoteVector> = (0..6)
            .map(|_| VoteVector((0..10).map(|_| rng.random_range(-2.0..5.0)).collect()))
            .collect();
        let agg = aggregate_votes(&vs, 10).unwrap();
        let mut manual = vec![0.0; 10];
        for v in &vs {
            for (m, x) in manual.iter_mut().zip(&v.0) {
                *m += x;
            }
        }
        assert_eq!(agg.0, manual);
    }

    #[test]
    fn per_code_probabilities_clamp_and_normalize() {
        let votes = VoteVector(vec![2.0, 2.0, -1.0, 3.0, 0.0, 0.0, 0.0]);
        let sets = vec![vec![0, 1], vec![2, 3], vec![4, 5, 6]];
        let probs = per_code_probabilities(&votes, &sets);
        assert_eq!(probs[0], vec![0.5, 0.5]);
        assert_eq!(probs[1], vec![0.0, 1.0]);
        let third: f64 = 1.0 / 3.0;
        assert_eq!(probs[2], vec![third, third, third]);
        for p in &probs {
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn swr_count_formula() {
        let indices: Vec<usize> = (0..10).collect();
        let p = vec![0.1; 10];
        let mut rng = stream_rng(5, "s", 0);
        let out = sample_without_replacement(&indices, 0.2, &p, &mut rng).unwrap();
        assert_eq!(out.len(), 2);

        let indices: Vec<usize> = (0..3).collect();
        let p = vec![1.0 / 3.0; 3];
        let out = sample_without_replacement(&indices, 0.01, &p, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn swr_returns_distinct_indices_across_sweep() {
        let mut rng = stream_rng(6, "s", 1);
        for n in 1..=100usize {
            for rate in [0.01, 0.2, 0.5, 1.0] {
                let indices: Vec<usize> = (0..n).map(|i| i * 3).collect();
                let p = vec![1.0 / n as f64; n];
                let out = sample_without_replacement(&indices, rate, &p, &mut rng).unwrap();
                let expected = ((rate * n as f64).floor() as usize).max(1).min(n);
                assert_eq!(out.len(), expected, "n={n} rate={rate}");
                let mut unique = out.clone();
                unique.sort_unstable();
                unique.dedup();
                assert_eq!(unique.len(), out.len());
                assert!(out.iter().all(|i| indices.contains(i)));
            }
        }
    }

    #[test]
    fn swr_zero_weight_items_need_the_uniform_branch() {
        let indices = vec![0, 1, 2, 3];
        let p = vec![0.9, 0.1, 0.0, 0.0];
        let mut rng = stream_rng(7, "s", 2);
        for _ in 0..2000 {
            let out = sample_without_replacement(&indices, 0.5, &p, &mut rng).unwrap();
            // M = 2 and both positive-weight items outrank the zero-weight
            // ones while any weight remains.
            assert_eq!(out.len(), 2);
            assert!(out.contains(&0) || out.contains(&1));
            assert!(!out.contains(&2) || !out.contains(&3));
        }
    }

    #[test]
    fn swr_uniform_fallback_when_all_weights_zero() {
        let indices = vec![10, 20, 30];
        let p = vec![0.0; 3];
        let mut rng = stream_rng(8, "s", 3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let out = sample_without_replacement(&indices, 1.0, &p, &mut rng).unwrap();
            assert_eq!(out.len(), 3);
            seen.insert(out[0]);
        }
        assert_eq!(seen.len(), 3, "uniform fallback never varied first draws");
    }

    fn cluster_doc(rng: &mut rand_chacha::ChaCha8Rng, base: u16, code: usize) -> Document {
        let mut tokens = vec![BOS];
        for _ in 0..12 {
            tokens.push(base + rng.random_range(0..4u16));
        }
        tokens.push(EOS);
        doc(&tokens, code)
    }

    #[test]
    fn refine_r1_returns_full_candidate_set_per_code() {
        let mut rng = stream_rng(9, "r", 0);
        let mut docs_pool = Vec::new();
        for code in 0..2 {
            for _ in 0..8 {
                docs_pool.push(cluster_doc(&mut rng, 10 + 20 * code as u16, code));
            }
        }
        let synthetic = synthetic_from_docs(&docs_pool, 2);
        let voters = vec![ClientDataset {
            client_id: 0,
            documents: vec![cluster_doc(&mut rng, 10, 0), cluster_doc(&mut rng, 30, 1)],
            capacity: Capacity::Weak,
        }];
        let opts = RefineOptions {
            rate: 1.0,
            ..RefineOptions::default()
        };
        let ledger = Ledger::new();
        let report = refine(&synthetic, &voters, &opts, None, &ledger, 42).unwrap();
        assert_eq!(report.refined.len(), synthetic.len());
        // Sorted selection at rate 1 reproduces the candidate order exactly.
        assert_eq!(report.refined.samples, synthetic.samples);
        assert_eq!(report.selected[0], synthetic.index_sets[0]);
    }

    #[test]
    fn refine_empty_voter_set_degenerates_to_uniform_sampling() {
        let mut rng = stream_rng(10, "r", 1);
        let docs_pool: Vec<Document> = (0..10).map(|_| cluster_doc(&mut rng, 10, 0)).collect();
        let synthetic = synthetic_from_docs(&docs_pool, 1);
        let ledger = Ledger::new();
        let report = refine(
            &synthetic,
            &[],
            &RefineOptions::default(),
            None,
            &ledger,
            7,
        )
        .unwrap();
        assert_eq!(report.refined.len(), 2);
        assert!(report.votes.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refine_is_deterministic_in_master_seed() {
        let mut rng = stream_rng(11, "r", 2);
        let docs_pool: Vec<Document> = (0..20).map(|_| cluster_doc(&mut rng, 10, 0)).collect();
        let synthetic = synthetic_from_docs(&docs_pool, 1);
        let voters = vec![ClientDataset {
            client_id: 0,
            documents: (0..5).map(|_| cluster_doc(&mut rng, 10, 0)).collect(),
            capacity: Capacity::Weak,
        }];
        let budget = PrivacyBudget::new(6.0, 1e-3).unwrap();
        let opts = RefineOptions::default();
        let l1 = Ledger::new();
        let a = refine(&synthetic, &voters, &opts, Some(&budget), &l1, 99).unwrap();
        let l2 = Ledger::new();
        let b = refine(&synthetic, &voters, &opts, Some(&budget), &l2, 99).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.votes, b.votes);
    }

    #[test]
    fn refine_upvotes_planted_duplicates() {
        // Plantable-signal oracle: half the candidates exactly duplicate
        // voter documents, so refinement must over-select them.
        let mut wins = 0;
        for seed in 0..20u64 {
            let mut rng = stream_rng(seed, "plant", 0);
            let voter_docs: Vec<Document> =
                (0..30).map(|_| cluster_doc(&mut rng, 10, 0)).collect();
            let mut candidates = Vec::new();
            for i in 0..40 {
                if i % 2 == 0 {
                    candidates.push(voter_docs[i % voter_docs.len()].clone());
                } else {
                    candidates.push(cluster_doc(&mut rng, 60, 0));
                }
            }
            let synthetic = synthetic_from_docs(&candidates, 1);
            let voters = vec![ClientDataset {
                client_id: 0,
                documents: voter_docs,
                capacity: Capacity::Weak,
            }];
            let opts = RefineOptions {
                rate: 0.25,
                ..RefineOptions::default()
            };
            let ledger = Ledger::new();
            let report = refine(&synthetic, &voters, &opts, None, &ledger, seed).unwrap();
            let dup_frac_pool = 0.5;
            let dup_kept = report.selected[0].iter().filter(|i| *i % 2 == 0).count();
            let frac = dup_kept as f64 / report.selected[0].len() as f64;
            if frac > dup_frac_pool {
                wins += 1;
            }
        }
        assert!(wins >= 16, "duplicates favored in only {wins}/20 seeds");
    }
}
