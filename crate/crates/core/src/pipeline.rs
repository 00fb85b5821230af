//! Pipeline stages and the end-to-end run.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs back there, so a full run is exactly the six stages chained on
//! the same directory and any stage can be rerun in isolation (reruns
//! replace that stage's ledger entries rather than double-counting them).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::{CorpusSource, Participants, RunConfig};
use crate::corpus::{
    self, load_corpus, partition_iid, partition_noniid, synthesize_ground_truth, write_corpus,
    Capacity, ClientDataset, CodeSet, CorpusSpec, Document,
};
use crate::error::{Error, Result};
use crate::eval::{
    code_histogram_tv, evaluate, median_heuristic_bandwidth, mmd, train_classifier,
    ClassifierConfig, MetricsReport,
};
use crate::fedtrain::run_finetuning;
use crate::generator::{generate_synthetic, ModelParams, SyntheticDataset};
use crate::privacy::{split_budget, BudgetSplit, Ledger, LedgerEntry, Phase};
use crate::profiling::{aggregate_profiles, allocate, dp_profile};
use crate::refine::{embed_tokens, refine, Embedding};
use crate::rng::{derive_seed, stream_rng};

/// Artifact paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_toml(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn spec_toml(&self) -> PathBuf {
        self.root.join("spec.toml")
    }
    pub fn corpus_jsonl(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }
    pub fn holdout_jsonl(&self) -> PathBuf {
        self.root.join("holdout.jsonl")
    }
    pub fn partition_json(&self) -> PathBuf {
        self.root.join("partition.json")
    }
    pub fn pretrained_ckpt(&self) -> PathBuf {
        self.root.join("pretrained.ckpt")
    }
    pub fn model_ckpt(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn round_ckpt(&self, round: usize) -> PathBuf {
        self.root.join(format!("model_round_{round}.ckpt"))
    }
    pub fn train_log_jsonl(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn profiles_json(&self) -> PathBuf {
        self.root.join("profiles.json")
    }
    pub fn synthetic_jsonl(&self) -> PathBuf {
        self.root.join("synthetic.jsonl")
    }
    pub fn refined_jsonl(&self) -> PathBuf {
        self.root.join("refined.jsonl")
    }
    pub fn ledger_json(&self) -> PathBuf {
        self.root.join("ledger.json")
    }
    pub fn metrics_json(&self, variant: &str) -> PathBuf {
        self.root.join(format!("metrics_{variant}.json"))
    }
    pub fn comparison_json(&self) -> PathBuf {
        self.root.join("eval_comparison.json")
    }
    pub fn failed_marker(&self) -> PathBuf {
        self.root.join("FAILED")
    }
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.display().to_string(),
            stage: produced_by.to_string(),
        })
    }
}

fn load_ledger(dir: &RunDir) -> Result<Ledger> {
    let ledger = Ledger::new();
    let path = dir.ledger_json();
    if path.exists() {
        let entries: Vec<LedgerEntry> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ledger.replace(entries);
    }
    Ok(ledger)
}

fn save_ledger(dir: &RunDir, ledger: &Ledger) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.ledger_json())?);
    serde_json::to_writer_pretty(&mut w, &ledger.snapshot())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_partition(dir: &RunDir) -> Result<Vec<ClientDataset>> {
    require(&dir.partition_json(), "partition")?;
    let clients: Vec<ClientDataset> =
        serde_json::from_reader(BufReader::new(File::open(dir.partition_json())?))?;
    Ok(clients)
}

/// The resolved code set for a run directory; `spec` sources read the code
/// count from the copied spec artifact.
pub fn resolve_code_set(cfg: &RunConfig, dir: &RunDir) -> Result<CodeSet> {
    if cfg.corpus.source == CorpusSource::Spec && cfg.corpus.labels.is_none() {
        require(&dir.spec_toml(), "gen-corpus")?;
        let spec = load_spec(&dir.spec_toml())?;
        return Ok(CodeSet::generic(spec.n_codes()));
    }
    cfg.code_set()
}

fn load_spec(path: &Path) -> Result<CorpusSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec: CorpusSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn save_spec(path: &Path, spec: &CorpusSpec) -> Result<()> {
    let text = toml::to_string(spec).expect("spec serializes");
    std::fs::write(path, text)?;
    Ok(())
}

/// Stage: materialize `corpus.jsonl` and `holdout.jsonl` (plus `spec.toml`
/// for generated corpora).
pub fn stage_gen_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    std::fs::create_dir_all(dir.root())?;
    let code_set = cfg.code_set()?;
    match cfg.corpus.source {
        CorpusSource::Benchmark => {
            let spec = CorpusSpec::benchmark(cfg.corpus.n_codes, derive_seed(cfg.seed, "spec", 0));
            let mut spec = spec;
            spec.max_length = cfg.corpus.max_length;
            save_spec(&dir.spec_toml(), &spec)?;
            let corpus =
                synthesize_ground_truth(&spec, cfg.corpus.n_docs, derive_seed(cfg.seed, "corpus", 0))?;
            let holdout = synthesize_ground_truth(
                &spec,
                cfg.corpus.holdout_docs,
                derive_seed(cfg.seed, "holdout", 0),
            )?;
            write_corpus(&dir.corpus_jsonl(), &corpus, &code_set)?;
            write_corpus(&dir.holdout_jsonl(), &holdout, &code_set)?;
        }
        CorpusSource::Spec => {
            let src = cfg.corpus.path.as_ref().expect("validated");
            let spec = load_spec(src)?;
            let code_set = CodeSet::generic(spec.n_codes());
            save_spec(&dir.spec_toml(), &spec)?;
            let corpus =
                synthesize_ground_truth(&spec, cfg.corpus.n_docs, derive_seed(cfg.seed, "corpus", 0))?;
            let holdout = synthesize_ground_truth(
                &spec,
                cfg.corpus.holdout_docs,
                derive_seed(cfg.seed, "holdout", 0),
            )?;
            write_corpus(&dir.corpus_jsonl(), &corpus, &code_set)?;
            write_corpus(&dir.holdout_jsonl(), &holdout, &code_set)?;
        }
        CorpusSource::Jsonl => {
            let src = cfg.corpus.path.as_ref().expect("validated");
            let holdout_src = cfg.corpus.holdout_path.as_ref().expect("validated");
            let corpus = load_corpus(src, &code_set, cfg.corpus.max_length)?;
            let holdout = load_corpus(holdout_src, &code_set, cfg.corpus.max_length)?;
            write_corpus(&dir.corpus_jsonl(), &corpus, &code_set)?;
            write_corpus(&dir.holdout_jsonl(), &holdout, &code_set)?;
        }
    }
    Ok(())
}

/// Stage: split the corpus into client datasets.
pub fn stage_partition(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    require(&dir.corpus_jsonl(), "gen-corpus")?;
    let code_set = resolve_code_set(cfg, dir)?;
    let corpus = load_corpus(&dir.corpus_jsonl(), &code_set, cfg.corpus.max_length)?;
    let seed = derive_seed(cfg.seed, "partition", 0);
    let clients = match &cfg.partition.strong_codes {
        None => partition_iid(&corpus, cfg.partition.clients, cfg.partition.strong_fraction, seed)?,
        Some(codes) => {
            let set = codes.iter().copied().collect();
            partition_noniid(
                &corpus,
                cfg.partition.clients,
                cfg.partition.strong_fraction,
                &set,
                seed,
            )?
        }
    };
    let mut w = BufWriter::new(File::create(dir.partition_json())?);
    serde_json::to_writer(&mut w, &clients)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn resolve_init(cfg: &RunConfig, dir: &RunDir, code_set: &CodeSet) -> Result<ModelParams> {
    if let Some(path) = &cfg.train.init_checkpoint {
        return ModelParams::load(path);
    }
    if dir.spec_toml().exists() {
        let spec = load_spec(&dir.spec_toml())?;
        let shifted = spec.shifted(cfg.corpus.shift, derive_seed(cfg.seed, "pretrain", 0));
        return ModelParams::from_corpus_spec(&shifted);
    }
    // External corpora without a spec start from the uniform model.
    Ok(ModelParams::uniform(
        code_set.len(),
        crate::tokenizer::VOCAB_SIZE,
    ))
}

/// Stage: federated DP finetuning over strong clients; writes the
/// pretrained and final checkpoints plus a per-round training log.
pub fn stage_finetune(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let clients = load_partition(dir)?;
    let code_set = resolve_code_set(cfg, dir)?;
    let strong: Vec<ClientDataset> = clients
        .iter()
        .filter(|c| c.capacity == Capacity::Strong)
        .cloned()
        .collect();
    let init = resolve_init(cfg, dir, &code_set)?;
    init.save(&dir.pretrained_ckpt())?;

    let train_cfg = cfg.train.to_train_config(cfg.seed, clients.len());
    let split: Option<BudgetSplit> = if cfg.is_private() {
        Some(split_budget(cfg.epsilon, Capacity::Strong, clients.len())?)
    } else {
        None
    };

    let ledger = load_ledger(dir)?;
    ledger.clear_phase(Phase::Train);

    let mut log = BufWriter::new(File::create(dir.train_log_jsonl())?);
    let save_rounds = cfg.train.save_round_checkpoints;
    let model = run_finetuning(
        init,
        &strong,
        &train_cfg,
        split.as_ref(),
        &ledger,
        |round, params, metrics| {
            serde_json::to_writer(&mut log, metrics)?;
            log.write_all(b"\n")?;
            if save_rounds {
                params.save(&dir.round_ckpt(round))?;
            }
            Ok(())
        },
    )?;
    log.flush()?;
    model.save(&dir.model_ckpt())?;
    save_ledger(dir, &ledger)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct ProfilesAudit {
    noisy_profiles: Vec<(usize, Vec<f64>)>,
    aggregate: Vec<f64>,
    allocation: Vec<usize>,
}

/// Stage: DP profiling, allocation, and profile-guided generation.
pub fn stage_generate(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let clients = load_partition(dir)?;
    require(&dir.model_ckpt(), "finetune")?;
    let code_set = resolve_code_set(cfg, dir)?;
    let model = ModelParams::load(&dir.model_ckpt())?;

    let ledger = load_ledger(dir)?;
    ledger.clear_phase(Phase::Profile);

    let profilers: Vec<&ClientDataset> = clients
        .iter()
        .filter(|c| cfg.generate.profile_from == Participants::All || c.capacity == Capacity::Weak)
        .collect();
    let sensitivity = cfg.neighboring.profile_sensitivity();
    let mut noisy = Vec::with_capacity(profilers.len());
    let mut audit_rows = Vec::with_capacity(profilers.len());
    for ds in &profilers {
        let exact = corpus::profile(ds, &code_set);
        let budget = if cfg.is_private() {
            Some(split_budget(cfg.epsilon, ds.capacity, clients.len())?.prof)
        } else {
            None
        };
        let mut rng = stream_rng(cfg.seed, "profile", ds.client_id as u64);
        let perturbed = dp_profile(
            &exact,
            ds.client_id,
            budget.as_ref(),
            sensitivity,
            &ledger,
            &mut rng,
        )?;
        audit_rows.push((ds.client_id, perturbed.0.clone()));
        noisy.push(perturbed);
    }
    let global = aggregate_profiles(&noisy)?;
    let allocation = allocate(&global, cfg.generate.s);

    let mut rng = stream_rng(cfg.seed, "generate", 0);
    let synthetic = generate_synthetic(
        &model,
        &allocation,
        cfg.corpus.max_length,
        cfg.generate.temperature,
        &mut rng,
    )?;
    synthetic.write_jsonl(&dir.synthetic_jsonl(), &code_set, false)?;

    let audit = ProfilesAudit {
        noisy_profiles: audit_rows,
        aggregate: global.0.clone(),
        allocation: allocation.counts.clone(),
    };
    let mut w = BufWriter::new(File::create(dir.profiles_json())?);
    serde_json::to_writer_pretty(&mut w, &audit)?;
    w.write_all(b"\n")?;
    w.flush()?;
    save_ledger(dir, &ledger)?;
    Ok(())
}

/// Stage: DP KNN voting and weighted resampling of the candidate set.
pub fn stage_refine(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    let clients = load_partition(dir)?;
    require(&dir.synthetic_jsonl(), "generate")?;
    let code_set = resolve_code_set(cfg, dir)?;
    let synthetic =
        SyntheticDataset::read_jsonl(&dir.synthetic_jsonl(), &code_set, cfg.corpus.max_length, None)?;

    let voters: Vec<ClientDataset> = clients
        .iter()
        .filter(|c| cfg.refine.vote_from == Participants::All || c.capacity == Capacity::Weak)
        .cloned()
        .collect();
    // Voting draws on the weak-role split regardless of who votes.
    let budget = if cfg.is_private() {
        Some(
            split_budget(cfg.epsilon, Capacity::Weak, clients.len())?
                .vote
                .expect("weak split carries a vote budget"),
        )
    } else {
        None
    };

    let ledger = load_ledger(dir)?;
    ledger.clear_phase(Phase::Vote);
    let opts = cfg.refine.to_options(cfg.neighboring);
    let report = refine(&synthetic, &voters, &opts, budget.as_ref(), &ledger, cfg.seed)?;
    report
        .refined
        .write_jsonl(&dir.refined_jsonl(), &code_set, cfg.refine.audit_votes)?;
    save_ledger(dir, &ledger)?;
    Ok(())
}

fn embeddings_of(docs: &[Document], dim: usize) -> Vec<Embedding> {
    docs.iter().map(|d| embed_tokens(&d.tokens, dim)).collect()
}

/// Deterministic subsample for the MMD estimate.
fn subsample(embeddings: &[Embedding], cap: usize, seed: u64, stream: u64) -> Vec<Embedding> {
    if embeddings.len() <= cap {
        return embeddings.to_vec();
    }
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.shuffle(&mut stream_rng(seed, "eval", stream));
    order.truncate(cap);
    order.into_iter().map(|i| embeddings[i].clone()).collect()
}

/// Paired evaluation of the unrefined and refined synthetic sets.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalComparison {
    pub unrefined: MetricsReport,
    pub refined: MetricsReport,
}

/// Stage: metrics for both synthetic sets against the held-out reference.
pub fn stage_eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalComparison> {
    require(&dir.holdout_jsonl(), "gen-corpus")?;
    require(&dir.synthetic_jsonl(), "generate")?;
    require(&dir.refined_jsonl(), "refine")?;
    let code_set = resolve_code_set(cfg, dir)?;
    let holdout = load_corpus(&dir.holdout_jsonl(), &code_set, cfg.corpus.max_length)?;
    let unrefined =
        SyntheticDataset::read_jsonl(&dir.synthetic_jsonl(), &code_set, cfg.corpus.max_length, None)?;
    let refined =
        SyntheticDataset::read_jsonl(&dir.refined_jsonl(), &code_set, cfg.corpus.max_length, None)?;

    let dim = cfg.refine.embed_dim;
    let holdout_emb = subsample(&embeddings_of(&holdout, dim), cfg.eval.mmd_samples, cfg.seed, 0);
    let unrefined_emb = subsample(
        &embeddings_of(&unrefined.documents(), dim),
        cfg.eval.mmd_samples,
        cfg.seed,
        1,
    );
    let refined_emb = subsample(
        &embeddings_of(&refined.documents(), dim),
        cfg.eval.mmd_samples,
        cfg.seed,
        2,
    );

    // One bandwidth for both reports keeps the pair comparable.
    let bandwidth = match cfg.eval.bandwidth {
        Some(bw) => bw,
        None => {
            let mut pooled = holdout_emb.clone();
            pooled.extend(unrefined_emb.iter().cloned());
            median_heuristic_bandwidth(&pooled)
        }
    };

    let clf_cfg = ClassifierConfig {
        epochs: cfg.eval.classifier_epochs,
        learning_rate: cfg.eval.classifier_lr,
    };
    let fingerprint = cfg.fingerprint();
    let mut report_for = |name: &str, set: &SyntheticDataset, emb: &[Embedding]| -> Result<MetricsReport> {
        let clf = train_classifier(&set.documents(), code_set.len(), &clf_cfg)?;
        let (accuracy, macro_f1) = evaluate(&clf, &holdout)?;
        Ok(MetricsReport {
            dataset: name.to_string(),
            mmd: mmd(&holdout_emb, emb, bandwidth)?,
            code_tv: code_histogram_tv(set, &holdout, code_set.len())?,
            downstream_accuracy: accuracy,
            downstream_macro_f1: macro_f1,
            seed: cfg.seed,
            config_fingerprint: fingerprint.clone(),
        })
    };
    let unrefined_report = report_for("unrefined", &unrefined, &unrefined_emb)?;
    let refined_report = report_for("refined", &refined, &refined_emb)?;

    for (variant, report) in [("unrefined", &unrefined_report), ("refined", &refined_report)] {
        let mut w = BufWriter::new(File::create(dir.metrics_json(variant))?);
        serde_json::to_writer_pretty(&mut w, report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    let comparison = EvalComparison {
        unrefined: unrefined_report,
        refined: refined_report,
    };
    let mut w = BufWriter::new(File::create(dir.comparison_json())?);
    serde_json::to_writer_pretty(&mut w, &comparison)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(comparison)
}

/// Runs all six stages in order. On failure a `FAILED` marker naming the
/// stage is left next to whatever artifacts were already written.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalComparison> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    std::fs::create_dir_all(dir.root())?;
    let _ = std::fs::remove_file(dir.failed_marker());
    cfg.save(&dir.config_toml())?;

    let run = |stage: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        f().map_err(|e| {
            let err = e.in_stage(stage);
            let _ = std::fs::write(dir.failed_marker(), format!("{err}\n"));
            err
        })
    };

    run("gen-corpus", &mut || stage_gen_corpus(cfg, &dir))?;
    run("partition", &mut || stage_partition(cfg, &dir))?;
    run("finetune", &mut || stage_finetune(cfg, &dir))?;
    run("generate", &mut || stage_generate(cfg, &dir))?;
    run("refine", &mut || stage_refine(cfg, &dir))?;
    let mut out = None;
    run("eval", &mut || {
        out = Some(stage_eval(cfg, &dir)?);
        Ok(())
    })?;
    Ok(out.expect("eval stage ran"))
}

/// Reads one JSONL artifact into memory line by line (used by tests and the
/// CLI to inspect training logs).
pub fn read_jsonl_values(path: &Path) -> Result<Vec<serde_json::Value>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}
