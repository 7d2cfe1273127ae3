//! Ahead-of-threat evaluation: a model trained on an old target version is
//! scored on inputs fuzzed from a newer version whose new bugs it never saw.

use std::collections::{HashMap, HashSet};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EvalReport, MetricsError, DEFAULT_THRESHOLD};
use crate::dataset::{balance_classes, merge_classes, CorpusStore, Sample};
use crate::fuzzer::{run_campaign, CampaignConfig};
use crate::hash::fnv1a64;
use crate::neuralnet::Detector;
use crate::par;
use crate::target::{label_of, Label, TargetError, TargetSpec};

/// Re-runs every stored input on `new_target` and returns the seqs that
/// crash it. Those inputs would leak new-version bugs into training.
pub fn verify_no_crash_on_new_version(
    store: &CorpusStore,
    new_target: &TargetSpec,
    workers: usize,
) -> Result<Vec<u64>, TargetError> {
    let labels = par::map_with_workers(workers, store.cases(), |c| label_of(new_target, &c.bytes));
    let mut out = Vec::new();
    for (case, label) in store.cases().iter().zip(labels) {
        if label? == Label::Crash {
            out.push(case.seq);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AotConfig {
    pub old_target: TargetSpec,
    pub new_target: TargetSpec,
    /// Fresh benign documents for the evaluation campaign.
    pub benign_seeds: Vec<Vec<u8>>,
    /// Inputs that crash the new version but not the old one.
    pub poc_seeds: Vec<Vec<u8>>,
    pub rng_seed: u64,
    pub max_executions: u64,
    pub workers: usize,
    pub threshold: f64,
    /// FPR budget for the crash-class operating point.
    pub max_fpr: f64,
}

impl AotConfig {
    pub fn new(old_target: TargetSpec, new_target: TargetSpec, benign_seeds: Vec<Vec<u8>>, poc_seeds: Vec<Vec<u8>>) -> Self {
        Self {
            old_target,
            new_target,
            benign_seeds,
            poc_seeds,
            rng_seed: 0,
            max_executions: 20_000,
            workers: 1,
            threshold: DEFAULT_THRESHOLD,
            max_fpr: 0.2,
        }
    }
}

/// Best crash-class detection rate with the benign false-positive rate held
/// at or below a budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrashOperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub crash_tpr: f64,
    pub crash_count: usize,
}

/// Sweeps every distinct score as a threshold. Positives are samples whose
/// original verdict is Crash; negatives are benign samples. Error samples do
/// not take part.
pub fn crash_tpr_at_fpr(samples: &[Sample], scores: &[f64], max_fpr: f64) -> CrashOperatingPoint {
    let mut pts: Vec<(f64, bool)> = samples
        .iter()
        .zip(scores)
        .filter(|(s, _)| s.original != Label::Error)
        .map(|(s, &p)| (p, s.original == Label::Crash))
        .collect();
    let crashes = pts.iter().filter(|p| p.1).count();
    let benign = pts.len() - crashes;
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = CrashOperatingPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        crash_tpr: 0.0,
        crash_count: crashes,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pts.len() {
        let t = pts[i].0;
        while i < pts.len() && pts[i].0 == t {
            if pts[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fpr = if benign == 0 { 0.0 } else { fp as f64 / benign as f64 };
        let tpr = if crashes == 0 { 0.0 } else { tp as f64 / crashes as f64 };
        if fpr <= max_fpr && tpr > best.crash_tpr {
            best = CrashOperatingPoint {
                threshold: t,
                fpr,
                crash_tpr: tpr,
                crash_count: crashes,
            };
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct AotOutcome {
    pub report: EvalReport,
    /// Training seqs that crash the new version (should be empty once the
    /// caller has excluded them before training).
    pub violating: Vec<u64>,
    /// Fuzzed inputs dropped because they already occur in training data or
    /// repeat an earlier evaluation input.
    pub dropped_seen: usize,
    /// The balanced evaluation set and its scores.
    pub eval: Vec<Sample>,
    pub scores: Vec<f64>,
    /// Crash detection over all fresh inputs, before balancing.
    pub crash_point: CrashOperatingPoint,
}

pub fn ahead_of_threat_experiment(
    config: &AotConfig,
    training_store: &CorpusStore,
    detector: &Detector,
) -> Result<AotOutcome, MetricsError> {
    if config.poc_seeds.is_empty() {
        return Err(MetricsError::InvalidInput("no PoC seeds".into()));
    }
    for (i, poc) in config.poc_seeds.iter().enumerate() {
        if label_of(&config.old_target, poc)? == Label::Crash {
            return Err(MetricsError::PremiseViolated(format!(
                "PoC seed {i} already crashes {}",
                config.old_target.name()
            )));
        }
        if label_of(&config.new_target, poc)? != Label::Crash {
            return Err(MetricsError::InvalidInput(format!(
                "PoC seed {i} does not crash {}",
                config.new_target.name()
            )));
        }
    }
    let violating = verify_no_crash_on_new_version(training_store, &config.new_target, config.workers)?;
    if !violating.is_empty() {
        warn!(
            "{} training inputs crash {}; they should have been excluded before training",
            violating.len(),
            config.new_target.name()
        );
    }

    let mut seeds = config.benign_seeds.clone();
    seeds.extend(config.poc_seeds.iter().cloned());
    let mut campaign = CampaignConfig::new(config.new_target.clone(), seeds);
    campaign.rng_seed = config.rng_seed;
    campaign.max_executions = config.max_executions;
    campaign.workers = config.workers;
    campaign.save_non_unique = true;
    let fuzzed = run_campaign(&campaign)?;

    let mut seen = training_store.content_hashes();
    let mut fresh = Vec::new();
    let mut dropped_seen = 0;
    for s in merge_classes(&fuzzed.store) {
        if seen.insert(fnv1a64(&s.bytes)) {
            fresh.push(s);
        } else {
            dropped_seen += 1;
        }
    }
    // The crash operating point is measured on every fresh input: after
    // balancing, crashes are a small slice of the merged positive class and
    // too few to estimate a rate from.
    let fresh_inputs: Vec<Vec<u8>> = fresh.iter().map(|s| s.bytes.clone()).collect();
    let fresh_scores: Vec<f64> = detector.predict_many(&fresh_inputs).into_iter().map(f64::from).collect();
    let crash_point = crash_tpr_at_fpr(&fresh, &fresh_scores, config.max_fpr);
    let score_of: HashMap<u64, f64> = fresh.iter().map(|s| s.seq).zip(fresh_scores).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x414f_5421);
    let eval = balance_classes(fresh, &mut rng)?;
    info!(
        "ahead-of-threat eval set: {} samples ({} crashes), {dropped_seen} repeats dropped, {} crashes overall",
        eval.len(),
        eval.iter().filter(|s| s.original == Label::Crash).count(),
        crash_point.crash_count
    );
    let scores: Vec<f64> = eval.iter().map(|s| score_of[&s.seq]).collect();
    let labels: Vec<_> = eval.iter().map(|s| s.label).collect();
    let report = EvalReport::from_scores(&labels, &scores, config.threshold)?;
    Ok(AotOutcome {
        report,
        violating,
        dropped_seen,
        eval,
        scores,
        crash_point,
    })
}

/// Content hashes shared by two sample sets; used to check that evaluation
/// inputs never appeared in training.
pub fn shared_inputs(a: &[Sample], b: &CorpusStore) -> usize {
    let hb: HashSet<u64> = b.content_hashes();
    a.iter().filter(|s| hb.contains(&fnv1a64(&s.bytes))).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BinaryLabel;
    use crate::fuzzer::TestCase;
    use crate::target::generator::minimark_v2_pocs;
    use crate::target::Version;

    fn case(seq: u64, bytes: &[u8], label: Label) -> TestCase {
        TestCase {
            seq,
            bytes: bytes.to_vec(),
            label,
            coverage_sig: seq,
            unique: true,
        }
    }

    #[test]
    fn verify_flags_new_version_crashes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poc = minimark_v2_pocs(&mut rng, 1).remove(0);
        let store = CorpusStore::from_cases(vec![case(1, b"<a>x</a>", Label::Benign), case(2, &poc, Label::Error)]);
        let v2 = TargetSpec::minimark(Version::V2);
        assert_eq!(verify_no_crash_on_new_version(&store, &v2, 1).unwrap(), vec![2]);
        assert!(verify_no_crash_on_new_version(&CorpusStore::new(), &v2, 1).unwrap().is_empty());
    }

    #[test]
    fn operating_point() {
        let mk = |o: Label| Sample {
            seq: 0,
            bytes: vec![],
            label: BinaryLabel::from(o),
            original: o,
        };
        let samples = vec![mk(Label::Benign), mk(Label::Benign), mk(Label::Crash), mk(Label::Crash), mk(Label::Error)];
        let scores = [0.1, 0.7, 0.8, 0.6, 0.99];
        let p = crash_tpr_at_fpr(&samples, &scores, 0.2);
        assert_eq!((p.threshold, p.crash_tpr, p.fpr), (0.8, 0.5, 0.0));
        let p = crash_tpr_at_fpr(&samples, &scores, 0.5);
        assert_eq!((p.threshold, p.crash_tpr, p.fpr), (0.6, 1.0, 0.5));
    }

    #[test]
    fn premise_checked() {
        // Crashes v1 through an out-of-range character reference.
        let bad = b"<a>&#99999999;</a>".to_vec();
        let cfg = AotConfig::new(
            TargetSpec::minimark(Version::V1),
            TargetSpec::minimark(Version::V2),
            vec![b"<a/>".to_vec()],
            vec![bad],
        );
        let tokens = crate::features::TokenList::new(vec![]);
        let model = crate::neuralnet::Model::init(&crate::neuralnet::ArchitectureConfig::desk(), 64, &tokens, 0).unwrap();
        let det = Detector::new(model, tokens).unwrap();
        let err = ahead_of_threat_experiment(&cfg, &CorpusStore::new(), &det).unwrap_err();
        assert!(matches!(err, MetricsError::PremiseViolated(_)), "{err}");
        let empty = AotConfig { poc_seeds: vec![], ..cfg };
        assert!(matches!(
            ahead_of_threat_experiment(&empty, &CorpusStore::new(), &det),
            Err(MetricsError::InvalidInput(_))
        ));
    }
}
