//! Coverage-guided genetic input generation.
//!
//! A campaign executes seeds and then mutated (optionally spliced) children
//! of queued parents. The queue holds every input that produced a coverage
//! signature not seen before. Unlike a classic fuzzer, the campaign can keep
//! every executed input, not only the coverage-increasing ones, and it keeps
//! error verdicts as their own class.

pub mod dictionary;
pub mod mutate;

use std::collections::HashSet;
use std::io;

use log::{debug, info};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::CorpusStore;
use crate::par;
use crate::target::{self, classify_verdict, Label, TargetError, TargetSpec};

pub use dictionary::{format_dictionary, parse_dictionary, read_dictionary, write_dictionary};
pub use mutate::{crossover, mutate, replay, splice, MutationOp, MutationRecord};

pub const MAX_TOKEN_LEN: usize = 32;

/// Parents that produced an Error or Crash verdict are this many times more
/// likely to be picked than benign ones.
pub const FAULT_PARENT_BIAS: u32 = 4;

/// Probability that a child starts from a splice of two queue entries.
const CROSSOVER_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestCase {
    pub seq: u64,
    pub bytes: Vec<u8>,
    pub label: Label,
    pub coverage_sig: u64,
    pub unique: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenOrigin {
    UserDictionary,
    Discovered,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    bytes: Vec<u8>,
    origin: TokenOrigin,
}

impl Token {
    pub fn new(bytes: Vec<u8>, origin: TokenOrigin) -> Result<Self, String> {
        if bytes.is_empty() || bytes.len() > MAX_TOKEN_LEN {
            return Err(format!(
                "token length {} outside [1, {MAX_TOKEN_LEN}]",
                bytes.len()
            ));
        }
        Ok(Self { bytes, origin })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn origin(&self) -> TokenOrigin {
        self.origin
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub target: TargetSpec,
    pub seed_corpus: Vec<Vec<u8>>,
    pub user_dictionary: Vec<Token>,
    pub rng_seed: u64,
    pub max_executions: u64,
    pub save_non_unique: bool,
    pub workers: usize,
    /// Mutations never grow an input past this many bytes.
    pub max_input_len: usize,
}

impl CampaignConfig {
    pub fn new(target: TargetSpec, seed_corpus: Vec<Vec<u8>>) -> Self {
        Self {
            target,
            seed_corpus,
            user_dictionary: Vec::new(),
            rng_seed: 0,
            max_executions: 10_000,
            save_non_unique: true,
            workers: 1,
            max_input_len: 4096,
        }
    }

    fn validate(&self) -> Result<(), FuzzError> {
        if self.max_executions == 0 {
            return Err(FuzzError::InvalidConfig("max_executions must be > 0".into()));
        }
        if self.seed_corpus.is_empty() {
            return Err(FuzzError::InvalidConfig("seed corpus is empty".into()));
        }
        if self.seed_corpus.iter().any(Vec::is_empty) {
            return Err(FuzzError::InvalidConfig("seed inputs must be non-empty".into()));
        }
        if self.max_input_len == 0 || self.max_input_len > target::DEFAULT_MAX_INPUT {
            return Err(FuzzError::InvalidConfig(format!(
                "max_input_len must be in [1, {}]",
                target::DEFAULT_MAX_INPUT
            )));
        }
        Ok(())
    }
}

/// How a child was produced and whether it found a new coverage signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MutationEvent {
    pub seq: u64,
    /// `(partner queue index, cut_a, cut_b)` when the parent was spliced first.
    pub splice: Option<(usize, usize, usize)>,
    pub parent: usize,
    pub record: MutationRecord,
    pub successful: bool,
}

#[derive(Debug, Clone, Default)]
pub struct CampaignLog {
    pub events: Vec<MutationEvent>,
    pub executions: u64,
    pub unique: u64,
    pub label_counts: [u64; 3],
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub store: CorpusStore,
    pub log: CampaignLog,
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("invalid campaign config: {0}")]
    InvalidConfig(String),
    #[error("dictionary line {line}: {reason}")]
    Dictionary { line: usize, reason: String },
    #[error("corpus write failed after {recorded} test cases: {source}")]
    Storage {
        recorded: u64,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Receives test cases in seq order as the campaign produces them.
pub trait CaseSink {
    fn record(&mut self, case: &TestCase) -> io::Result<()>;
}

impl CaseSink for CorpusStore {
    fn record(&mut self, case: &TestCase) -> io::Result<()> {
        self.push(case.clone());
        Ok(())
    }
}

impl<F: FnMut(&TestCase) -> io::Result<()>> CaseSink for F {
    fn record(&mut self, case: &TestCase) -> io::Result<()> {
        self(case)
    }
}

struct QueueEntry {
    bytes: Vec<u8>,
}

/// Parent queue with label-weighted sampling.
struct Queue {
    entries: Vec<QueueEntry>,
    cumulative: Vec<u64>,
}

impl Queue {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    fn push(&mut self, bytes: Vec<u8>, label: Label) {
        let w = match label {
            Label::Benign => 1,
            Label::Error | Label::Crash => u64::from(FAULT_PARENT_BIAS),
        };
        let total = self.cumulative.last().copied().unwrap_or(0);
        self.cumulative.push(total + w);
        self.entries.push(QueueEntry { bytes });
    }

    fn pick(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("queue is never empty when picking");
        let x = rng.gen_range(0..total);
        self.cumulative.partition_point(|&c| c <= x)
    }
}

struct Candidate {
    bytes: Vec<u8>,
    parent: usize,
    splice: Option<(usize, usize, usize)>,
    record: MutationRecord,
}

/// Runs a campaign and keeps the corpus in memory.
pub fn run_campaign(config: &CampaignConfig) -> Result<Campaign, FuzzError> {
    let mut store = CorpusStore::new();
    let log = run_campaign_with_sink(config, &mut store)?;
    Ok(Campaign { store, log })
}

/// Runs a campaign, streaming every saved test case into `sink`.
///
/// With `workers == 1` the run is fully reproducible from `rng_seed`. With
/// more workers, children are generated in batches and executed concurrently;
/// results are still registered in generation order.
pub fn run_campaign_with_sink(
    config: &CampaignConfig,
    sink: &mut dyn CaseSink,
) -> Result<CampaignLog, FuzzError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut queue = Queue::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut log = CampaignLog::default();
    let mut recorded = 0u64;

    let mut register = |bytes: Vec<u8>,
                        outcome: target::ExecutionOutcome,
                        queue: &mut Queue,
                        log: &mut CampaignLog|
     -> Result<bool, FuzzError> {
        let seq = log.executions + 1;
        log.executions = seq;
        let label = classify_verdict(&outcome);
        let sig = outcome.coverage_sig();
        let unique = seen.insert(sig);
        log.label_counts[label as usize] += 1;
        let case = TestCase {
            seq,
            bytes,
            label,
            coverage_sig: sig,
            unique,
        };
        if unique || config.save_non_unique {
            sink.record(&case).map_err(|source| FuzzError::Storage { recorded, source })?;
            recorded += 1;
        }
        if unique {
            log.unique += 1;
            queue.push(case.bytes, label);
        }
        Ok(unique)
    };

    let seeds: Vec<&Vec<u8>> = config
        .seed_corpus
        .iter()
        .take(config.max_executions as usize)
        .collect();
    let outcomes = par::map_with_workers(config.workers, &seeds, |s| {
        target::execute(&config.target, s)
    });
    for (seed, outcome) in seeds.into_iter().zip(outcomes) {
        register(seed.clone(), outcome?, &mut queue, &mut log)?;
    }

    let batch = if config.workers <= 1 {
        1
    } else {
        config.workers * 16
    };
    while log.executions < config.max_executions {
        let n = batch.min((config.max_executions - log.executions) as usize);
        let candidates: Vec<Candidate> = (0..n)
            .map(|_| make_child(&queue, &mut rng, config))
            .collect();
        let outcomes = par::map_with_workers(config.workers, &candidates, |c| {
            target::execute(&config.target, &c.bytes)
        });
        for (cand, outcome) in candidates.into_iter().zip(outcomes) {
            let seq = log.executions + 1;
            let successful = register(cand.bytes, outcome?, &mut queue, &mut log)?;
            log.events.push(MutationEvent {
                seq,
                splice: cand.splice,
                parent: cand.parent,
                record: cand.record,
                successful,
            });
        }
        if log.executions % 10_000 == 0 {
            debug!(
                "{} executions, {} unique, queue {}",
                log.executions,
                log.unique,
                queue.entries.len()
            );
        }
    }
    info!(
        "campaign on {}: {} executions, {} unique, labels b/e/c = {:?}",
        config.target.name(),
        log.executions,
        log.unique,
        log.label_counts
    );
    Ok(log)
}

fn make_child(queue: &Queue, rng: &mut ChaCha8Rng, config: &CampaignConfig) -> Candidate {
    let parent = queue.pick(rng);
    let base = &queue.entries[parent].bytes;
    let (start, splice_info) = if queue.entries.len() > 1 && rng.gen_bool(CROSSOVER_RATE) {
        let partner = queue.pick(rng);
        let other = &queue.entries[partner].bytes;
        let cut_a = rng.gen_range(1..=base.len());
        let cut_b = rng.gen_range(0..other.len());
        let mut spliced = splice(base, other, cut_a, cut_b);
        spliced.truncate(config.max_input_len);
        (spliced, Some((partner, cut_a, cut_b)))
    } else {
        (base.clone(), None)
    };
    let (bytes, record) = mutate(&start, rng, &config.user_dictionary, config.max_input_len);
    Candidate {
        bytes,
        parent,
        splice: splice_info,
        record,
    }
}

/// Collects the bytes written by every successful mutation as tokens, clamped
/// to [`MAX_TOKEN_LEN`], deduplicated and appended after the user dictionary.
/// Discovered tokens keep the order in which they were found.
pub fn derive_tokens(events: &[MutationEvent], user_dictionary: &[Token]) -> Vec<Token> {
    let mut seen: HashSet<&[u8]> = HashSet::new();
    let mut out = Vec::new();
    for t in user_dictionary {
        if seen.insert(t.bytes()) {
            out.push(t.clone());
        }
    }
    for ev in events.iter().filter(|e| e.successful) {
        let bytes = &ev.record.inserted[..ev.record.inserted.len().min(MAX_TOKEN_LEN)];
        if bytes.is_empty() || !seen.insert(bytes) {
            continue;
        }
        out.push(Token::new(bytes.to_vec(), TokenOrigin::Discovered).expect("length checked"));
    }
    out
}
