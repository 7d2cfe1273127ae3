//! The batch subcommands: `fuzz`, `dataset`, `train`, `eval`, `aot` and
//! `tokens export`.
//!
//! Each command refuses to touch outputs that already exist unless `force`
//! is set, in which case it replaces them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpatch_core::dataset::{build_split, load_split, save_split, CorpusStore, CorpusWriter, SplitDataset, MANIFEST_NAME};
use vpatch_core::features::{FeatureConfig, TokenList};
use vpatch_core::fuzzer::{derive_tokens, read_dictionary, run_campaign_with_sink, write_dictionary, CampaignConfig, TokenOrigin};
use vpatch_core::metrics::{ahead_of_threat_experiment, verify_no_crash_on_new_version, AotConfig, AotOutcome, EvalReport};
use vpatch_core::neuralnet::{load_model, save_model, train as train_model, ArchitectureConfig, Detector, TrainConfig};
use vpatch_core::target::{generator, Format, TargetSpec};

use crate::{CliError, Settings};

/// File inside a split directory listing the corpus seqs left out because
/// they crash the newer target.
pub const EXCLUDED_NAME: &str = "excluded";
/// Token file written next to the corpus when `tokens` is not set.
pub const DEFAULT_TOKENS_NAME: &str = "tokens.dict";

/// Result of a command that may have found its output already in place.
#[derive(Debug, Clone, PartialEq)]
pub enum Step<T> {
    Done(T),
    Skipped(PathBuf),
}

impl<T> Step<T> {
    pub fn done(self) -> Option<T> {
        match self {
            Step::Done(t) => Some(t),
            Step::Skipped(_) => None,
        }
    }
}

/// True when `path` should be (re)written. With `force`, an existing output
/// is removed first; directories are only removed when they look like
/// something this tool wrote.
fn claim_output(path: &Path, force: bool) -> Result<bool, CliError> {
    if !path.exists() {
        return Ok(true);
    }
    if !force {
        info!("{} exists, skipping (use --force to replace it)", path.display());
        return Ok(false);
    }
    if path.is_dir() {
        let ours = path.join(MANIFEST_NAME).exists() || path.join("barrier_seq").exists();
        if !ours {
            return Err(CliError::Usage(format!(
                "refusing to replace {}: not a corpus or split directory",
                path.display()
            )));
        }
        fs::remove_dir_all(path)?;
    } else {
        fs::remove_file(path)?;
    }
    Ok(true)
}

pub fn target(s: &Settings) -> Result<TargetSpec, CliError> {
    Ok(TargetSpec::parse(&s.target, s.timeout_ms, s.workers)?)
}

fn new_target(s: &Settings) -> Result<TargetSpec, CliError> {
    let name = s
        .new_target
        .as_deref()
        .ok_or_else(|| CliError::Usage("missing setting \"new_target\"".into()))?;
    Ok(TargetSpec::parse(name, s.timeout_ms, s.workers)?)
}

/// The token file: `tokens` if set, otherwise next to the corpus.
pub fn tokens_path(s: &Settings) -> Result<PathBuf, CliError> {
    if let Some(p) = &s.tokens {
        return Ok(p.clone());
    }
    match &s.corpus {
        Some(c) => Ok(c.join(DEFAULT_TOKENS_NAME)),
        None => Err(CliError::Usage("missing setting \"tokens\" (or \"corpus\")".into())),
    }
}

pub fn load_tokens(path: &Path) -> Result<TokenList, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("token file {} not found", path.display())));
    }
    Ok(TokenList::new(read_dictionary(path, TokenOrigin::Discovered)?))
}

/// Every regular file of `dir`, in file-name order.
pub fn read_inputs(dir: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(fs::read(p)?)).collect()
}

/// Random benign documents for a builtin target's format.
pub fn generated_documents(format: Format, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    (0..count)
        .map(|_| match format {
            Format::Minimark => generator::minimark_document(rng, 6),
            Format::Minibin => generator::minibin_document(rng),
        })
        .collect()
}

fn seed_inputs(s: &Settings, target: &TargetSpec, rng_seed: u64) -> Result<Vec<Vec<u8>>, CliError> {
    if let Some(dir) = &s.seeds {
        let seeds = read_inputs(dir)?;
        if seeds.is_empty() {
            return Err(CliError::Usage(format!("no seed files in {}", dir.display())));
        }
        return Ok(seeds);
    }
    let format = target
        .format()
        .ok_or_else(|| CliError::Usage("external targets need a \"seeds\" directory".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(generated_documents(format, s.generate_seeds, &mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzSummary {
    pub executions: u64,
    pub unique: u64,
    pub label_counts: [u64; 3],
    pub tokens: usize,
}

/// Runs a campaign, streaming the corpus to `corpus` and writing the derived
/// token list.
pub fn fuzz(s: &Settings, force: bool) -> Result<Step<FuzzSummary>, CliError> {
    let corpus = s.require("corpus", &s.corpus)?;
    let tokens_out = tokens_path(s)?;
    let target = target(s)?;
    if !claim_output(corpus, force)? {
        return Ok(Step::Skipped(corpus.to_owned()));
    }
    if tokens_out.exists() && !force {
        return Err(CliError::Usage(format!(
            "token file {} exists; use --force to replace it",
            tokens_out.display()
        )));
    }
    let user_dictionary = match &s.dictionary {
        Some(p) => read_dictionary(p, TokenOrigin::UserDictionary)?,
        None => Vec::new(),
    };
    let mut config = CampaignConfig::new(target.clone(), seed_inputs(s, &target, s.seed)?);
    config.user_dictionary = user_dictionary;
    config.rng_seed = s.seed;
    config.max_executions = s.max_executions;
    config.workers = s.workers;
    info!(
        "fuzzing {} from {} seeds for {} executions",
        target.name(),
        config.seed_corpus.len(),
        config.max_executions
    );
    let mut writer = CorpusWriter::create(corpus)?;
    let log = run_campaign_with_sink(&config, &mut writer)?;
    writer.finish()?;
    let tokens = derive_tokens(&log.events, &config.user_dictionary);
    write_dictionary(&tokens_out, &tokens)?;
    info!(
        "{} executions, {} unique, labels {:?}, {} tokens",
        log.executions,
        log.unique,
        log.label_counts,
        tokens.len()
    );
    Ok(Step::Done(FuzzSummary {
        executions: log.executions,
        unique: log.unique,
        label_counts: log.label_counts,
        tokens: tokens.len(),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub train: usize,
    pub eval: usize,
    pub barrier_seq: u64,
    pub excluded: Vec<u64>,
}

fn read_excluded(split: &Path) -> Result<Vec<u64>, CliError> {
    let p = split.join(EXCLUDED_NAME);
    if !p.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(&p)?
        .lines()
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// The corpus as training saw it: the stored cases minus any excluded by
/// `dataset`.
pub fn training_store(s: &Settings) -> Result<CorpusStore, CliError> {
    let store = CorpusStore::load(s.require("corpus", &s.corpus)?)?;
    match &s.split {
        Some(split) => Ok(store.without(&read_excluded(split)?)),
        None => Ok(store),
    }
}

/// Splits the corpus at the time barrier and balances both sides. With
/// `exclude_crashing_on`, inputs that crash that target are dropped first
/// and listed in the split's `excluded` file.
pub fn dataset(s: &Settings, force: bool) -> Result<Step<DatasetSummary>, CliError> {
    let corpus = s.require("corpus", &s.corpus)?;
    let split_dir = s.require("split", &s.split)?;
    if !claim_output(split_dir, force)? {
        return Ok(Step::Skipped(split_dir.to_owned()));
    }
    let mut store = CorpusStore::load(corpus)?;
    if store.is_truncated() {
        warn!("{} is marked truncated; using the cases written before the failure", corpus.display());
    }
    let mut excluded = Vec::new();
    if let Some(name) = &s.exclude_crashing_on {
        let newer = TargetSpec::parse(name, s.timeout_ms, s.workers)?;
        excluded = verify_no_crash_on_new_version(&store, &newer, s.workers)?;
        for seq in &excluded {
            info!("excluding seq {seq}: crashes {}", newer.name());
        }
        info!("{} of {} inputs excluded", excluded.len(), store.len());
        store = store.without(&excluded);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let split = build_split(&store, s.fraction, &mut rng)?;
    save_split(&split, split_dir)?;
    if !excluded.is_empty() {
        let text: String = excluded.iter().map(|q| format!("{q}\n")).collect();
        fs::write(split_dir.join(EXCLUDED_NAME), text)?;
    }
    info!(
        "barrier at seq {}: {} train, {} eval samples",
        split.barrier_seq,
        split.train.len(),
        split.eval.len()
    );
    Ok(Step::Done(DatasetSummary {
        train: split.train.len(),
        eval: split.eval.len(),
        barrier_seq: split.barrier_seq,
        excluded,
    }))
}

pub fn train_config(s: &Settings) -> TrainConfig {
    let mut c = TrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        rng_seed: s.seed,
        ..TrainConfig::default()
    };
    c.optimizer.learning_rate = s.learning_rate;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub samples: usize,
    pub parameters: usize,
    pub epoch_losses: Vec<f64>,
}

pub fn train(s: &Settings, force: bool) -> Result<Step<TrainSummary>, CliError> {
    let split_dir = s.require("split", &s.split)?;
    let model_path = s.require("model", &s.model)?;
    let tokens = load_tokens(&tokens_path(s)?)?;
    let arch = ArchitectureConfig::preset(&s.preset)?;
    if !claim_output(model_path, force)? {
        return Ok(Step::Skipped(model_path.to_owned()));
    }
    let split = load_split(split_dir)?;
    let features = FeatureConfig::new(s.seq_len, tokens);
    let out = train_model(&arch, &split.train, &features, &train_config(s))?;
    for (i, l) in out.epoch_losses.iter().enumerate() {
        info!("epoch {} loss {l:.6}", i + 1);
    }
    save_model(&out.model, model_path)?;
    Ok(Step::Done(TrainSummary {
        samples: split.train.len(),
        parameters: out.model.net.param_count(),
        epoch_losses: out.epoch_losses,
    }))
}

/// Model plus the token file it was trained with.
pub fn detector(s: &Settings) -> Result<Detector, CliError> {
    let model_path = s.require("model", &s.model)?;
    if !model_path.exists() {
        return Err(CliError::Usage(format!("model {} not found", model_path.display())));
    }
    let model = load_model(model_path)?;
    let tokens = load_tokens(&tokens_path(s)?)?;
    Ok(Detector::new(model, tokens)?)
}

pub fn score_split(detector: &Detector, split: &SplitDataset, threshold: f64) -> Result<EvalReport, CliError> {
    let inputs: Vec<Vec<u8>> = split.eval.iter().map(|x| x.bytes.clone()).collect();
    let scores: Vec<f64> = detector.predict_many(&inputs).into_iter().map(f64::from).collect();
    let labels: Vec<_> = split.eval.iter().map(|x| x.label).collect();
    Ok(EvalReport::from_scores(&labels, &scores, threshold)?)
}

fn write_report(s: &Settings, text: &str, roc: &str) -> Result<(), CliError> {
    if let Some(p) = &s.report {
        fs::write(p, text)?;
    }
    if let Some(p) = &s.roc {
        fs::write(p, roc)?;
    }
    Ok(())
}

/// Scores the evaluation side of the split.
pub fn eval(s: &Settings, force: bool) -> Result<Step<EvalReport>, CliError> {
    let split_dir = s.require("split", &s.split)?;
    let det = detector(s)?;
    if let Some(p) = &s.report {
        if !claim_output(p, force)? {
            return Ok(Step::Skipped(p.clone()));
        }
    }
    let split = load_split(split_dir)?;
    let report = score_split(&det, &split, s.threshold)?;
    write_report(s, &report.to_text(), &report.roc_tsv())?;
    Ok(Step::Done(report))
}

pub fn aot_text(out: &AotOutcome, max_fpr: f64) -> String {
    let mut t = out.report.to_text();
    let c = &out.crash_point;
    let _ = writeln!(t, "crash_samples\t{}", c.crash_count);
    let _ = writeln!(t, "crash_tpr_at_fpr<={max_fpr}\t{:.6}", c.crash_tpr);
    let _ = writeln!(t, "crash_operating_fpr\t{:.6}", c.fpr);
    let _ = writeln!(t, "crash_operating_threshold\t{}", c.threshold);
    let _ = writeln!(t, "dropped_seen\t{}", out.dropped_seen);
    let _ = writeln!(t, "violating_training_inputs\t{}", out.violating.len());
    t
}

/// The old-version/new-version experiment: fuzz the newer target from
/// fresh benign seeds plus PoCs and score the result with a model trained
/// on the older one.
pub fn aot(s: &Settings, force: bool) -> Result<Step<AotOutcome>, CliError> {
    let old = target(s)?;
    let newer = new_target(s)?;
    let det = detector(s)?;
    let store = training_store(s)?;
    if let Some(p) = &s.report {
        if !claim_output(p, force)? {
            return Ok(Step::Skipped(p.clone()));
        }
    }
    let format = newer.format();
    // A different stream from the one that generated the training seeds.
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x6e65_7776_6572);
    let benign = match (&s.seeds, format) {
        (Some(dir), _) => read_inputs(dir)?,
        (None, Some(f)) => generated_documents(f, s.generate_seeds, &mut rng),
        (None, None) => return Err(CliError::Usage("external targets need a \"seeds\" directory".into())),
    };
    let pocs = match (&s.pocs, format) {
        (Some(dir), _) => read_inputs(dir)?,
        (None, Some(Format::Minimark)) => generator::minimark_v2_pocs(&mut rng, s.poc_count),
        (None, Some(Format::Minibin)) => generator::minibin_v2_pocs(&mut rng, s.poc_count),
        (None, None) => return Err(CliError::Usage("external targets need a \"pocs\" directory".into())),
    };
    let mut cfg = AotConfig::new(old, newer, benign, pocs);
    cfg.rng_seed = s.seed;
    cfg.max_executions = s.aot_executions;
    cfg.workers = s.workers;
    cfg.threshold = s.threshold;
    cfg.max_fpr = s.max_fpr;
    let out = ahead_of_threat_experiment(&cfg, &store, &det)?;
    write_report(s, &aot_text(&out, s.max_fpr), &out.report.roc_tsv())?;
    Ok(Step::Done(out))
}

/// Writes the token list in dictionary form to `out`, or returns it when
/// `out` is unset. With `model` set, the list is checked against it first.
pub fn tokens_export(s: &Settings, force: bool) -> Result<Step<String>, CliError> {
    let tokens = load_tokens(&tokens_path(s)?)?;
    if let Some(p) = &s.model {
        load_model(p)?.check_tokens(&tokens)?;
    }
    let text = format!(
        "# {} tokens, version {:016x}\n{}",
        tokens.len(),
        tokens.version(),
        vpatch_core::fuzzer::format_dictionary(tokens.tokens())
    );
    if let Some(p) = &s.out {
        if !claim_output(p, force)? {
            return Ok(Step::Skipped(p.clone()));
        }
        fs::write(p, &text)?;
    }
    Ok(Step::Done(text))
}
