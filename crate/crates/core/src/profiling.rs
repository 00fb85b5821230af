//! DP perturbation of per-client profile vectors, global aggregation, and
//! allocation of synthetic-sample counts per control code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::{
    add_gaussian_noise, calibrate_analytic_gaussian, Ledger, LedgerEntry, Phase, PrivacyBudget,
};

/// Per-code counts of a client's documents.
///
/// Entries are exact nonnegative integers before noise and arbitrary reals
/// after; negatives are handled downstream by [`allocate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileVector(pub Vec<f64>);

impl ProfileVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Perturbs a profile with calibrated Gaussian noise and records the release.
///
/// `budget == None` is the non-private mode: the profile passes through
/// unchanged and nothing is ledgered.
pub fn dp_profile<R: Rng + ?Sized>(
    p: &ProfileVector,
    client_id: usize,
    budget: Option<&PrivacyBudget>,
    sensitivity: f64,
    ledger: &Ledger,
    rng: &mut R,
) -> Result<ProfileVector> {
    let Some(budget) = budget else {
        return Ok(p.clone());
    };
    let sigma = calibrate_analytic_gaussian(*budget, sensitivity)?;
    let noisy = add_gaussian_noise(&p.0, sigma, rng);
    ledger.append(LedgerEntry {
        client_id,
        phase: Phase::Profile,
        budget: *budget,
        sensitivity,
        sigma,
        steps: 1,
    });
    Ok(ProfileVector(noisy))
}

/// Coordinate-wise sum of per-client profiles.
pub fn aggregate_profiles(profiles: &[ProfileVector]) -> Result<ProfileVector> {
    let Some(first) = profiles.first() else {
        return Err(Error::ShapeMismatch("no profiles to aggregate".into()));
    };
    let len = first.len();
    let mut sum = vec![0.0; len];
    for p in profiles {
        if p.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "profile length {} != {}",
                p.len(),
                len
            )));
        }
        for (s, v) in sum.iter_mut().zip(&p.0) {
            *s += v;
        }
    }
    Ok(ProfileVector(sum))
}

/// Integer sample counts per code, summing exactly to the requested total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub counts: Vec<usize>,
    pub total: usize,
}

/// Turns a (possibly noisy) global profile into per-code sample counts.
///
/// Negative entries clamp to zero, the vector is renormalized, and counts
/// are assigned by largest-remainder rounding so they sum to `s` exactly.
/// An all-clamped profile falls back to a uniform allocation.
pub fn allocate(p_global: &ProfileVector, s: usize) -> Allocation {
    let n = p_global.len();
    assert!(n > 0, "allocation needs at least one code");
    let clamped: Vec<f64> = p_global.0.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    let probs: Vec<f64> = if total > 0.0 {
        clamped.iter().map(|&v| v / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };

    let mut counts = vec![0usize; n];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(n);
    let mut assigned = 0usize;
    for (j, &p) in probs.iter().enumerate() {
        let quota = p * s as f64;
        let base = quota.floor() as usize;
        counts[j] = base;
        assigned += base;
        remainders.push((j, quota - base as f64));
    }
    // Largest remainder first; ties resolve to the lower code index.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(j, _) in remainders.iter().take(s - assigned) {
        counts[j] += 1;
    }
    Allocation { counts, total: s }
}
