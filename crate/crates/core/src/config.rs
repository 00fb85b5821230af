//! Run configuration: a versioned TOML schema covering every stage, with
//! CLI-flag overrides and a content fingerprint for tying metrics to the
//! exact configuration that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CodeSet;
use crate::error::{Error, Result};
use crate::fedtrain::{AggregateDenominator, TrainConfig};
use crate::privacy::Neighboring;
use crate::refine::{RefineOptions, DEFAULT_EMBED_DIM};

/// Where the training corpus comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Built-in ground-truth generator.
    Benchmark,
    /// JSON-Lines file with `text` and `code` fields.
    Jsonl,
    /// Corpus-spec TOML file (transition tables and mixture).
    Spec,
}

/// Which clients contribute to a server-side aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participants {
    All,
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub source: CorpusSource,
    /// Corpus path for `jsonl`, spec path for `spec`.
    pub path: Option<PathBuf>,
    /// Held-out reference corpus for `jsonl` mode.
    pub holdout_path: Option<PathBuf>,
    /// Code labels for `jsonl` mode.
    pub labels: Option<Vec<String>>,
    pub n_codes: usize,
    pub n_docs: usize,
    pub holdout_docs: usize,
    pub max_length: usize,
    /// Distribution shift applied when fitting the pretrained checkpoint.
    pub shift: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            source: CorpusSource::Benchmark,
            path: None,
            holdout_path: None,
            labels: None,
            n_codes: 5,
            n_docs: 4000,
            holdout_docs: 2000,
            max_length: 64,
            shift: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSection {
    pub clients: usize,
    pub strong_fraction: f64,
    /// Restricting strong clients to these codes makes the split non-IID.
    pub strong_codes: Option<Vec<usize>>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            clients: 20,
            strong_fraction: 0.1,
            strong_codes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_iters: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub local_lr: f64,
    pub server_lr: f64,
    /// Divide aggregated deltas by the total client count instead of the
    /// participating strong count.
    pub aggregate_over_all_clients: bool,
    pub save_round_checkpoints: bool,
    /// Start from this checkpoint instead of fitting the shifted spec.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: 4,
            local_iters: 4,
            batch_size: 32,
            clip_norm: 1.0,
            local_lr: 0.5,
            server_lr: 1.0,
            aggregate_over_all_clients: false,
            save_round_checkpoints: false,
            init_checkpoint: None,
        }
    }
}

impl TrainSection {
    /// Concrete trainer configuration; the noise multiplier is filled in by
    /// the finetune stage from the privacy budget.
    pub fn to_train_config(&self, seed: u64, total_clients: usize) -> TrainConfig {
        TrainConfig {
            rounds: self.rounds,
            local_iters: self.local_iters,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            local_lr: self.local_lr,
            server_lr: self.server_lr,
            noise_multiplier: 0.0,
            seed,
            denominator: if self.aggregate_over_all_clients {
                AggregateDenominator::AllClients(total_clients)
            } else {
                AggregateDenominator::Participants
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    /// Number of synthetic candidates to generate.
    pub s: usize,
    pub temperature: f64,
    /// Whose profiles feed the global allocation.
    pub profile_from: Participants,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            s: 10_000,
            temperature: 1.0,
            profile_from: Participants::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    pub k: usize,
    pub rate: f64,
    pub embed_dim: usize,
    /// Uniform-subsampling control: ignore votes when resampling.
    pub uniform: bool,
    /// Include vote values in the refined JSONL (not private).
    pub audit_votes: bool,
    /// Which clients vote.
    pub vote_from: Participants,
}

impl Default for RefineSection {
    fn default() -> Self {
        Self {
            k: 5,
            rate: 0.2,
            embed_dim: DEFAULT_EMBED_DIM,
            uniform: false,
            audit_votes: false,
            vote_from: Participants::Weak,
        }
    }
}

impl RefineSection {
    pub fn to_options(&self, neighboring: Neighboring) -> RefineOptions {
        RefineOptions {
            k: self.k,
            rate: self.rate,
            embed_dim: self.embed_dim,
            uniform: self.uniform,
            neighboring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Fixed kernel bandwidth; absent means the median heuristic.
    pub bandwidth: Option<f64>,
    /// Cap on embeddings per side for the MMD estimate.
    pub mmd_samples: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bandwidth: None,
            mmd_samples: 1000,
            classifier_epochs: 120,
            classifier_lr: 2.0,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Total per-client privacy budget; `inf` disables DP everywhere.
    pub epsilon: f64,
    pub neighboring: Neighboring,
    pub corpus: CorpusSection,
    pub partition: PartitionSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub refine: RefineSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: 1,
            seed: 42,
            out_dir: PathBuf::from("run"),
            epsilon: 8.0,
            neighboring: Neighboring::AddRemove,
            corpus: CorpusSection::default(),
            partition: PartitionSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            refine: RefineSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Flag-level overrides; flags beat the environment, which beats the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub env_out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub strong_fraction: Option<f64>,
    pub strong_codes: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub rate: Option<f64>,
    pub uniform: bool,
    pub non_private: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Whether any DP noise is applied.
    pub fn is_private(&self) -> bool {
        self.epsilon.is_finite()
    }

    /// SHA-256 over the canonical TOML serialization.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The shared code set implied by the corpus section. `Spec` sources
    /// resolve their code count from the spec file at stage time, so this
    /// returns an error for them when labels are absent.
    pub fn code_set(&self) -> Result<CodeSet> {
        match self.corpus.source {
            CorpusSource::Benchmark => Ok(CodeSet::generic(self.corpus.n_codes)),
            CorpusSource::Jsonl | CorpusSource::Spec => match &self.corpus.labels {
                Some(labels) => CodeSet::new(labels.clone()),
                None if self.corpus.source == CorpusSource::Spec => {
                    Ok(CodeSet::generic(self.corpus.n_codes))
                }
                None => Err(Error::Config(
                    "corpus.labels is required for jsonl sources".into(),
                )),
            },
        }
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(dir) = ov.out_dir.clone().or_else(|| ov.env_out_dir.clone()) {
            self.out_dir = dir;
        }
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(eps) = ov.epsilon {
            self.epsilon = eps;
        }
        if ov.non_private {
            self.epsilon = f64::INFINITY;
        }
        if let Some(f) = ov.strong_fraction {
            self.partition.strong_fraction = f;
        }
        if let Some(codes) = ov.strong_codes.clone() {
            self.partition.strong_codes = Some(codes);
        }
        if let Some(k) = ov.k {
            self.refine.k = k;
        }
        if let Some(rate) = ov.rate {
            self.refine.rate = rate;
        }
        if ov.uniform {
            self.refine.uniform = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive (or inf)".into()));
        }
        if self.corpus.max_length < 4 {
            return Err(Error::Config("corpus.max_length must be at least 4".into()));
        }
        match self.corpus.source {
            CorpusSource::Benchmark => {
                if self.corpus.n_codes == 0 || self.corpus.n_docs == 0 {
                    return Err(Error::Config(
                        "benchmark corpora need n_codes >= 1 and n_docs >= 1".into(),
                    ));
                }
            }
            CorpusSource::Jsonl => {
                if self.corpus.path.is_none() {
                    return Err(Error::Config("corpus.path is required for jsonl".into()));
                }
                if self.corpus.holdout_path.is_none() {
                    return Err(Error::Config(
                        "corpus.holdout_path is required for jsonl".into(),
                    ));
                }
                if self.corpus.labels.is_none() {
                    return Err(Error::Config("corpus.labels is required for jsonl".into()));
                }
            }
            CorpusSource::Spec => {
                if self.corpus.path.is_none() {
                    return Err(Error::Config("corpus.path is required for spec".into()));
                }
            }
        }
        if self.partition.clients == 0 {
            return Err(Error::Config("partition.clients must be positive".into()));
        }
        if !(self.partition.strong_fraction > 0.0 && self.partition.strong_fraction <= 1.0) {
            return Err(Error::Config("strong_fraction must lie in (0, 1]".into()));
        }
        if let Some(codes) = &self.partition.strong_codes {
            if codes.is_empty() {
                return Err(Error::Config("strong_codes cannot be empty".into()));
            }
            if let Ok(set) = self.code_set() {
                if codes.iter().any(|&c| c >= set.len()) {
                    return Err(Error::Config(format!(
                        "strong_codes {:?} outside the {}-code set",
                        codes,
                        set.len()
                    )));
                }
            }
        }
        if !(self.generate.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.refine.k == 0 {
            return Err(Error::Config("refine.k must be at least 1".into()));
        }
        if !(self.refine.rate > 0.0 && self.refine.rate <= 1.0) {
            return Err(Error::Config("refine.rate must lie in (0, 1]".into()));
        }
        if self.refine.embed_dim == 0 || !self.refine.embed_dim.is_power_of_two() {
            return Err(Error::Config("refine.embed_dim must be a power of two".into()));
        }
        if self.eval.mmd_samples < 2 {
            return Err(Error::Config("eval.mmd_samples must be at least 2".into()));
        }
        if let Some(bw) = self.eval.bandwidth {
            if !(bw > 0.0) {
                return Err(Error::Config("eval.bandwidth must be positive".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let parsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.epsilon = 4.0;
        cfg.neighboring = Neighboring::Replace;
        cfg.corpus.n_codes = 3;
        cfg.corpus.shift = 0.25;
        cfg.partition.strong_codes = Some(vec![0, 2]);
        cfg.train.clip_norm = f64::INFINITY;
        cfg.train.rounds = 7;
        cfg.generate.s = 123;
        cfg.refine.uniform = true;
        cfg.refine.vote_from = Participants::All;
        cfg.eval.bandwidth = Some(0.4);
        let parsed = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn infinity_epsilon_parses_and_disables_privacy() {
        let cfg = RunConfig::from_toml("epsilon = inf").unwrap();
        assert!(!cfg.is_private());
        let cfg = RunConfig::from_toml("epsilon = 8.0").unwrap();
        assert!(cfg.is_private());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn overrides_follow_precedence() {
        let mut cfg = RunConfig::default();
        let ov = Overrides {
            out_dir: Some(PathBuf::from("flag")),
            env_out_dir: Some(PathBuf::from("env")),
            seed: Some(7),
            epsilon: Some(4.0),
            uniform: true,
            ..Overrides::default()
        };
        cfg.apply_overrides(&ov);
        assert_eq!(cfg.out_dir, PathBuf::from("flag"));
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epsilon, 4.0);
        assert!(cfg.refine.uniform);

        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&Overrides {
            env_out_dir: Some(PathBuf::from("env")),
            non_private: true,
            ..Overrides::default()
        });
        assert_eq!(cfg.out_dir, PathBuf::from("env"));
        assert!(cfg.epsilon.is_infinite());
    }

    #[test]
    fn validation_rejects_bad_sections() {
        let mut cfg = RunConfig::default();
        cfg.refine.embed_dim = 100;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.partition.strong_codes = Some(vec![9]);
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.corpus.source = CorpusSource::Jsonl;
        assert!(cfg.validate().is_err());
    }
}
