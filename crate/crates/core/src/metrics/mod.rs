//! Evaluation: confusion matrix, accuracy, macro-F1, ROC/AUC and the
//! old-version/new-version ahead-of-threat experiment.
//!
//! MaliciousOrError is the positive class everywhere.

mod aot;

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{BinaryLabel, DatasetError};
use crate::fuzzer::FuzzError;
use crate::neuralnet::NetError;
use crate::target::TargetError;

pub use aot::{
    ahead_of_threat_experiment, crash_tpr_at_fpr, shared_inputs, verify_no_crash_on_new_version, AotConfig, AotOutcome,
    CrashOperatingPoint,
};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("confusion matrix has no entries")]
    EmptyMatrix,
    #[error("labels and scores differ in length ({labels} vs {scores})")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("only one class present")]
    OneClassOnly,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("ahead-of-threat premise violated: {0}")]
    PremiseViolated(String),
    #[error("invalid experiment input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Rows are the true class, columns the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    /// Benign predicted benign.
    pub tb: u64,
    /// Benign predicted malicious.
    pub fb_m: u64,
    /// Malicious predicted benign.
    pub fm_b: u64,
    /// Malicious predicted malicious.
    pub tm: u64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

impl ConfusionMatrix {
    pub fn new(tb: u64, fb_m: u64, fm_b: u64, tm: u64) -> Self {
        Self { tb, fb_m, fm_b, tm }
    }

    pub fn total(&self) -> u64 {
        self.tb + self.fb_m + self.fm_b + self.tm
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        match self.total() {
            0 => Err(MetricsError::EmptyMatrix),
            t => Ok((self.tb + self.tm) as f64 / t as f64),
        }
    }

    /// F1 with MaliciousOrError as the positive class.
    pub fn malicious_f1(&self) -> f64 {
        f1(self.tm, self.fb_m, self.fm_b)
    }

    /// F1 with Benign as the positive class.
    pub fn benign_f1(&self) -> f64 {
        f1(self.tb, self.fm_b, self.fb_m)
    }

    /// Mean of the two per-class F1 scores.
    pub fn macro_f1(&self) -> Result<f64, MetricsError> {
        if self.total() == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        Ok((self.benign_f1() + self.malicious_f1()) / 2.0)
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tm, self.tm + self.fm_b)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fb_m, self.fb_m + self.tb)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_inputs(labels: &[BinaryLabel], scores: &[f64]) -> Result<(), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    Ok(())
}

/// Positive prediction iff `score >= threshold`.
pub fn confusion(labels: &[BinaryLabel], scores: &[f64], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    check_inputs(labels, scores)?;
    let mut cm = ConfusionMatrix::default();
    for (&l, &s) in labels.iter().zip(scores) {
        match (l.is_positive(), s >= threshold) {
            (false, false) => cm.tb += 1,
            (false, true) => cm.fb_m += 1,
            (true, false) => cm.fm_b += 1,
            (true, true) => cm.tm += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are positive; `+inf` for the origin.
    pub threshold: f64,
}

/// ROC curve over the distinct scores (plus `+inf`) and its trapezoid area.
///
/// Equal scores form one threshold step. The area is accumulated as an
/// integer numerator over `2 * P * N` and divided once, which makes it
/// exactly equal to the pairwise estimate `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn roc_auc(labels: &[BinaryLabel], scores: &[f64]) -> Result<(Vec<RocPoint>, f64), MetricsError> {
    check_inputs(labels, scores)?;
    let pos = labels.iter().filter(|l| l.is_positive()).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += u128::from(fp - fp0) * u128::from(tp0 + tp);
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    let auc = area as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok((points, auc))
}

/// Exhaustive pairwise AUC, `O(P * N)`. Reference implementation for tests.
pub fn pairwise_auc(labels: &[BinaryLabel], scores: &[f64]) -> Result<f64, MetricsError> {
    check_inputs(labels, scores)?;
    let (mut twice_wins, mut pairs) = (0u128, 0u128);
    for (i, li) in labels.iter().enumerate() {
        if !li.is_positive() {
            continue;
        }
        for (j, lj) in labels.iter().enumerate() {
            if lj.is_positive() {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                twice_wins += 2;
            } else if scores[i] == scores[j] {
                twice_wins += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    Ok(twice_wins as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
}

impl EvalReport {
    pub fn from_scores(labels: &[BinaryLabel], scores: &[f64], threshold: f64) -> Result<Self, MetricsError> {
        let confusion = confusion(labels, scores, threshold)?;
        let (roc, auc) = roc_auc(labels, scores)?;
        Ok(Self {
            threshold,
            accuracy: confusion.accuracy()?,
            macro_f1: confusion.macro_f1()?,
            confusion,
            roc,
            auc,
        })
    }

    /// Highest TPR over ROC points with FPR at most `max_fpr`.
    pub fn tpr_at_fpr(&self, max_fpr: f64) -> RocPoint {
        self.roc
            .iter()
            .filter(|p| p.fpr <= max_fpr)
            .copied()
            .fold(self.roc[0], |best, p| if p.tpr > best.tpr { p } else { best })
    }

    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "samples\t{}", c.total());
        let _ = writeln!(s, "threshold\t{}", self.threshold);
        let _ = writeln!(s, "confusion (rows true, cols predicted: benign, malicious)");
        let _ = writeln!(s, "  benign\t{}\t{}", c.tb, c.fb_m);
        let _ = writeln!(s, "  malicious\t{}\t{}", c.fm_b, c.tm);
        let _ = writeln!(s, "accuracy\t{:.6}", self.accuracy);
        let _ = writeln!(s, "macro_f1\t{:.6}", self.macro_f1);
        let _ = writeln!(s, "auc\t{:.6}", self.auc);
        s
    }

    /// `fpr\ttpr\tthreshold` rows under a header line.
    pub fn roc_tsv(&self) -> String {
        let mut s = String::from("fpr\ttpr\tthreshold\n");
        for p in &self.roc {
            let _ = writeln!(s, "{}\t{}\t{}", p.fpr, p.tpr, p.threshold);
        }
        s
    }
}
