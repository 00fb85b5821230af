//! DP-SGD local updates and FedAvg-style server aggregation over strong
//! clients.
//!
//! Each step clips per-sample gradients, sums them, adds a single Gaussian
//! noise draw to the sum, and averages by the batch size. Local rounds run
//! a fixed number of minibatch steps over seeded epoch permutations; the
//! server averages client deltas and applies them with its own step size.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Capacity, ClientDataset, Document};
use crate::error::{Error, Result};
use crate::generator::{sparse_grad_neg_log_prob, ModelParams};
use crate::privacy::{
    calibrate_analytic_gaussian, per_step_training_budget, BudgetSplit, Ledger, LedgerEntry, Phase,
};
use crate::rng::stream_rng;

/// How the server divides the summed client deltas.
///
/// `Participants` averages over the clients that actually trained.
/// `AllClients(n)` divides by the full client count instead, which silently
/// down-weights updates when only a few strong clients train; it is kept
/// for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateDenominator {
    Participants,
    AllClients(usize),
}

impl Default for AggregateDenominator {
    fn default() -> Self {
        AggregateDenominator::Participants
    }
}

/// Hyperparameters for federated DP-SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    /// Per-sample clipping norm; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub local_lr: f64,
    pub server_lr: f64,
    /// Noise multiplier `sigma_s`; the per-coordinate noise added to the
    /// gradient sum has standard deviation `sigma_s * clip_norm`. Zero means
    /// non-private.
    pub noise_multiplier: f64,
    pub seed: u64,
    #[serde(default)]
    pub denominator: AggregateDenominator,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParameter("clip_norm must be positive".into()));
        }
        if self.noise_multiplier < 0.0 {
            return Err(Error::InvalidParameter("noise_multiplier must be >= 0".into()));
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return Err(Error::InvalidParameter(
                "private mode requires a finite clip_norm".into(),
            ));
        }
        Ok(())
    }
}

/// One client's local model delta for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
}

/// `g / max(1, ||g||_2 / c)`: norm capped at `c`, direction preserved.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = 1.0 / (norm / clip_norm).max(1.0);
    g.iter().map(|x| x * scale).collect()
}

/// Per-sample clipping evidence from one step: post-clip norms captured
/// before any cross-sample summation.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub clipped_norms: Vec<f64>,
}

/// One DP-SGD step over a batch, mutating `params` in place.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    params: &mut ModelParams,
    batch: &[Document],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<()> {
    dp_sgd_step_traced(params, batch, cfg, rng).map(|_| ())
}

/// [`dp_sgd_step`] variant returning the per-sample clipping trace.
pub fn dp_sgd_step_traced<R: Rng + ?Sized>(
    params: &mut ModelParams,
    batch: &[Document],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepTrace> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("batch must be nonempty".into()));
    }
    let mut sum = vec![0.0; params.len()];
    let mut clipped_norms = Vec::with_capacity(batch.len());
    for doc in batch {
        let mut grad = sparse_grad_neg_log_prob(params, doc);
        let norm = grad.squared_norm().sqrt();
        let scale = 1.0 / (norm / cfg.clip_norm).max(1.0);
        grad.scale(scale);
        clipped_norms.push(norm * scale);
        grad.add_into(&mut sum);
    }
    if cfg.noise_multiplier > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_multiplier * cfg.clip_norm).expect("valid sigma");
        for s in sum.iter_mut() {
            *s += noise.sample(rng);
        }
    }
    let step = cfg.local_lr / batch.len() as f64;
    for (p, s) in params.as_mut_slice().iter_mut().zip(&sum) {
        *p -= step * s;
    }
    Ok(StepTrace { clipped_norms })
}

/// Runs `local_iters` DP-SGD steps from the broadcast parameters and
/// returns the local delta. Minibatches come from seeded epoch
/// permutations; a trailing short batch is dropped and triggers a fresh
/// permutation.
pub fn local_round<R: Rng + ?Sized>(
    global_params: &ModelParams,
    ds: &ClientDataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    if ds.capacity != Capacity::Strong {
        return Err(Error::InvalidParameter(format!(
            "client {} is not a strong client",
            ds.client_id
        )));
    }
    if cfg.batch_size > ds.documents.len() {
        return Err(Error::InvalidParameter(format!(
            "batch_size {} exceeds client {}'s {} documents",
            cfg.batch_size,
            ds.client_id,
            ds.documents.len()
        )));
    }
    let mut params = global_params.clone();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    for _ in 0..cfg.local_iters {
        if cursor + cfg.batch_size > order.len() {
            order = (0..ds.documents.len()).collect();
            order.shuffle(rng);
            cursor = 0;
        }
        let batch: Vec<Document> = order[cursor..cursor + cfg.batch_size]
            .iter()
            .map(|&i| ds.documents[i].clone())
            .collect();
        cursor += cfg.batch_size;
        dp_sgd_step(&mut params, &batch, cfg, rng)?;
    }
    let delta: Vec<f64> = params
        .as_slice()
        .iter()
        .zip(global_params.as_slice())
        .map(|(after, before)| after - before)
        .collect();
    Ok(ClientUpdate {
        client_id: ds.client_id,
        delta,
    })
}

/// Coordinate-wise mean of client deltas, summed in client-id order so the
/// result is independent of arrival order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    aggregate_with(updates, AggregateDenominator::Participants)
}

/// [`aggregate`] with an explicit denominator rule.
pub fn aggregate_with(
    updates: &[ClientUpdate],
    denominator: AggregateDenominator,
) -> Result<Vec<f64>> {
    let Some(first) = updates.first() else {
        return Err(Error::InvalidParameter("no updates to aggregate".into()));
    };
    let len = first.delta.len();
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut sum = vec![0.0; len];
    for u in ordered {
        if u.delta.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "update length {} != {len}",
                u.delta.len()
            )));
        }
        for (s, d) in sum.iter_mut().zip(&u.delta) {
            *s += d;
        }
    }
    let denom = match denominator {
        AggregateDenominator::Participants => updates.len() as f64,
        AggregateDenominator::AllClients(n) => {
            if n == 0 {
                return Err(Error::InvalidParameter("denominator cannot be zero".into()));
            }
            n as f64
        }
    };
    for s in sum.iter_mut() {
        *s /= denom;
    }
    Ok(sum)
}

/// Per-round summary for the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_delta_norm: f64,
    pub noise_multiplier: f64,
}

/// Derives the DP-SGD noise multiplier from a training budget: the
/// per-step budget under basic composition, calibrated at sensitivity
/// `clip_norm`, expressed as a multiple of `clip_norm`.
pub fn noise_multiplier_for(split: &BudgetSplit, cfg: &TrainConfig) -> Result<f64> {
    let train = split.train.ok_or_else(|| {
        Error::Privacy("budget split carries no training budget".into())
    })?;
    if !cfg.clip_norm.is_finite() {
        return Err(Error::InvalidParameter(
            "private training requires a finite clip_norm".into(),
        ));
    }
    let per_step = per_step_training_budget(train, cfg.rounds, cfg.local_iters)?;
    let sigma = calibrate_analytic_gaussian(per_step, cfg.clip_norm)?;
    Ok(sigma / cfg.clip_norm)
}

/// Federated DP finetuning over the strong clients.
///
/// When `split` is present the noise multiplier is derived from the
/// training budget and one composed `Train` entry is ledgered per client;
/// otherwise `cfg.noise_multiplier` is used as-is and nothing is ledgered.
/// `on_round` observes each round's updated global parameters.
pub fn run_finetuning(
    init: ModelParams,
    strong: &[ClientDataset],
    cfg: &TrainConfig,
    split: Option<&BudgetSplit>,
    ledger: &Ledger,
    mut on_round: impl FnMut(usize, &ModelParams, &RoundMetrics) -> Result<()>,
) -> Result<ModelParams> {
    cfg.validate()?;
    if strong.is_empty() {
        return Err(Error::InvalidParameter("no strong clients to train on".into()));
    }
    let mut effective = cfg.clone();
    if let Some(split) = split {
        effective.noise_multiplier = noise_multiplier_for(split, cfg)?;
        let train = split.train.expect("checked by noise_multiplier_for");
        let sigma = effective.noise_multiplier * cfg.clip_norm;
        for ds in strong {
            ledger.append(LedgerEntry {
                client_id: ds.client_id,
                phase: Phase::Train,
                budget: train,
                sensitivity: cfg.clip_norm,
                sigma,
                steps: (cfg.rounds * cfg.local_iters) as u32,
            });
        }
    }

    let mut global = init;
    for round in 0..cfg.rounds {
        let mut updates = Vec::with_capacity(strong.len());
        for ds in strong {
            let stream = ((round as u64) << 32) | ds.client_id as u64;
            let mut rng = stream_rng(cfg.seed, "train", stream);
            updates.push(local_round(&global, ds, &effective, &mut rng)?);
        }
        let delta = aggregate_with(&updates, cfg.denominator)?;
        global.apply_delta(&delta, cfg.server_lr);
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let metrics = RoundMetrics {
            round,
            mean_delta_norm: norm,
            noise_multiplier: effective.noise_multiplier,
        };
        on_round(round, &global, &metrics)?;
    }
    Ok(global)
}
