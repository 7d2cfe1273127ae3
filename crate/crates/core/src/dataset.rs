//! Corpus storage and the time-barrier train/eval split.
//!
//! On disk a corpus is a directory of raw inputs named `<seq>_<label>.bin`
//! plus a tab-separated `manifest.tsv`. Splitting uses the generation order
//! as the time axis: the barrier is placed so that a given fraction of the
//! unique coverage signatures falls before it.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::fuzzer::{CaseSink, TestCase};
use crate::hash::fnv1a64;
use crate::target::Label;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "seq\tlabel\tcoverage_sig\tunique\tfilename\tbyte_length";
pub const TRUNCATION_MARKER: &str = "TRUNCATED";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("only one class present ({0})")]
    OneClassOnly(&'static str),
    #[error("empty corpus")]
    EmptyStore,
    #[error("corrupt corpus: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Binary label after merging Error and Crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryLabel {
    Benign,
    MaliciousOrError,
}

impl BinaryLabel {
    pub fn is_positive(self) -> bool {
        self == BinaryLabel::MaliciousOrError
    }
}

impl From<Label> for BinaryLabel {
    fn from(label: Label) -> Self {
        merge_label(label)
    }
}

pub fn merge_label(label: Label) -> BinaryLabel {
    match label {
        Label::Benign => BinaryLabel::Benign,
        Label::Error | Label::Crash => BinaryLabel::MaliciousOrError,
    }
}

/// Test cases in seq order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStore {
    cases: Vec<TestCase>,
    truncated: bool,
}

impl CorpusStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_cases(mut cases: Vec<TestCase>) -> Self {
        cases.sort_by_key(|c| c.seq);
        Self {
            cases,
            truncated: false,
        }
    }

    pub fn push(&mut self, case: TestCase) {
        debug_assert!(self.cases.last().map_or(true, |l| l.seq < case.seq));
        self.cases.push(case);
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Set when the campaign writing this store stopped on a storage error.
    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for c in &self.cases {
            counts[c.label as usize] += 1;
        }
        counts
    }

    pub fn unique_count(&self) -> usize {
        self.cases.iter().filter(|c| c.unique).count()
    }

    /// Content hashes of every stored input.
    pub fn content_hashes(&self) -> HashSet<u64> {
        self.cases.iter().map(|c| fnv1a64(&c.bytes)).collect()
    }

    /// Drops the cases whose seq is in `seqs`.
    pub fn without(&self, seqs: &[u64]) -> CorpusStore {
        let drop: HashSet<u64> = seqs.iter().copied().collect();
        CorpusStore {
            cases: self
                .cases
                .iter()
                .filter(|c| !drop.contains(&c.seq))
                .cloned()
                .collect(),
            truncated: self.truncated,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let mut w = CorpusWriter::create(dir)?;
        for c in &self.cases {
            w.record(c)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest = File::open(dir.join(MANIFEST_NAME))?;
        let mut lines = BufReader::new(manifest).lines();
        match lines.next() {
            Some(Ok(h)) if h == MANIFEST_HEADER => {}
            _ => return Err(DatasetError::Corrupt("missing or bad manifest header".into())),
        }
        let mut cases = Vec::new();
        let mut last_seq = 0u64;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row = parse_row(&line)
                .map_err(|e| DatasetError::Corrupt(format!("manifest row {}: {e}", i + 2)))?;
            if row.seq <= last_seq && !cases.is_empty() {
                return Err(DatasetError::Corrupt(format!("manifest row {} out of seq order", i + 2)));
            }
            last_seq = row.seq;
            let bytes = fs::read(dir.join(&row.filename))?;
            if bytes.len() != row.byte_length {
                return Err(DatasetError::Corrupt(format!(
                    "{} has {} bytes, manifest says {}",
                    row.filename,
                    bytes.len(),
                    row.byte_length
                )));
            }
            cases.push(TestCase {
                seq: row.seq,
                bytes,
                label: row.label,
                coverage_sig: row.coverage_sig,
                unique: row.unique,
            });
        }
        Ok(Self {
            cases,
            truncated: dir.join(TRUNCATION_MARKER).exists(),
        })
    }
}

struct ManifestRow {
    seq: u64,
    label: Label,
    coverage_sig: u64,
    unique: bool,
    filename: String,
    byte_length: usize,
}

fn parse_row(line: &str) -> Result<ManifestRow, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 6 {
        return Err(format!("expected 6 fields, got {}", f.len()));
    }
    if f[2].len() != 16 {
        return Err("coverage_sig must be 16 hex digits".into());
    }
    Ok(ManifestRow {
        seq: f[0].parse().map_err(|e| format!("seq: {e}"))?,
        label: f[1].parse().map_err(|e| format!("label: {e}"))?,
        coverage_sig: u64::from_str_radix(f[2], 16).map_err(|e| format!("coverage_sig: {e}"))?,
        unique: match f[3] {
            "0" => false,
            "1" => true,
            other => return Err(format!("unique: {other:?}")),
        },
        filename: f[4].to_owned(),
        byte_length: f[5].parse().map_err(|e| format!("byte_length: {e}"))?,
    })
}

pub fn case_filename(case: &TestCase) -> String {
    format!("{}_{}.bin", case.seq, case.label)
}

pub fn manifest_row(case: &TestCase) -> String {
    format!(
        "{}\t{}\t{:016x}\t{}\t{}\t{}",
        case.seq,
        case.label,
        case.coverage_sig,
        u8::from(case.unique),
        case_filename(case),
        case.bytes.len()
    )
}

/// Streams test cases into a corpus directory. A failed write leaves the
/// manifest flushed up to the last complete row and drops a `TRUNCATED`
/// marker file next to it.
pub struct CorpusWriter {
    dir: PathBuf,
    manifest: BufWriter<File>,
}

impl CorpusWriter {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_NAME))?);
        writeln!(manifest, "{MANIFEST_HEADER}")?;
        let _ = fs::remove_file(dir.join(TRUNCATION_MARKER));
        Ok(Self {
            dir: dir.to_owned(),
            manifest,
        })
    }

    fn write_case(&mut self, case: &TestCase) -> io::Result<()> {
        fs::write(self.dir.join(case_filename(case)), &case.bytes)?;
        writeln!(self.manifest, "{}", manifest_row(case))
    }

    fn mark_truncated(&mut self) {
        let _ = self.manifest.flush();
        if let Err(e) = fs::write(self.dir.join(TRUNCATION_MARKER), b"") {
            warn!("could not write truncation marker: {e}");
        }
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.manifest.flush()
    }
}

impl CaseSink for CorpusWriter {
    fn record(&mut self, case: &TestCase) -> io::Result<()> {
        self.write_case(case).inspect_err(|_| self.mark_truncated())
    }
}

/// A labeled sample after class merging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub seq: u64,
    pub bytes: Vec<u8>,
    pub label: BinaryLabel,
    /// Verdict before merging, kept for per-class reporting.
    pub original: Label,
}

/// Relabels every case with its merged binary label.
pub fn merge_classes(store: &CorpusStore) -> Vec<Sample> {
    store
        .cases()
        .iter()
        .map(|c| Sample {
            seq: c.seq,
            bytes: c.bytes.clone(),
            label: merge_label(c.label),
            original: c.label,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeSplit {
    pub barrier_seq: u64,
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
}

/// Places the barrier at the smallest seq where the unique cases at or
/// before it make up at least `unique_train_fraction` of all unique cases.
/// Every case (unique or not) at or before the barrier trains; everything
/// after it evaluates.
pub fn time_barrier_split(
    store: &CorpusStore,
    unique_train_fraction: f64,
) -> Result<TimeSplit, DatasetError> {
    if store.is_empty() {
        return Err(DatasetError::EmptyStore);
    }
    if !(unique_train_fraction > 0.0 && unique_train_fraction <= 1.0) {
        return Err(DatasetError::DegenerateSplit(format!(
            "fraction {unique_train_fraction} outside (0, 1]"
        )));
    }
    let unique_seqs: Vec<u64> = store.cases().iter().filter(|c| c.unique).map(|c| c.seq).collect();
    let n = unique_seqs.len();
    if n < 2 {
        return Err(DatasetError::DegenerateSplit(format!("{n} unique test cases, need >= 2")));
    }
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= unique_train_fraction)
        .unwrap_or(n);
    let barrier_seq = unique_seqs[k - 1];
    let max_seq = store.cases().last().expect("non-empty").seq;
    if barrier_seq >= max_seq {
        return Err(DatasetError::DegenerateSplit(format!(
            "barrier at seq {barrier_seq} leaves no evaluation samples"
        )));
    }
    let (train, eval): (Vec<u64>, Vec<u64>) = store
        .cases()
        .iter()
        .map(|c| c.seq)
        .partition(|&s| s <= barrier_seq);
    Ok(TimeSplit {
        barrier_seq,
        train,
        eval,
    })
}

/// Randomly under-samples the larger class down to the size of the smaller
/// one, then shuffles.
pub fn balance_classes(samples: Vec<Sample>, rng: &mut impl Rng) -> Result<Vec<Sample>, DatasetError> {
    let (mut benign, mut malicious): (Vec<Sample>, Vec<Sample>) =
        samples.into_iter().partition(|s| s.label == BinaryLabel::Benign);
    if benign.is_empty() {
        return Err(DatasetError::OneClassOnly("no benign samples"));
    }
    if malicious.is_empty() {
        return Err(DatasetError::OneClassOnly("no malicious/error samples"));
    }
    let keep = benign.len().min(malicious.len());
    for side in [&mut benign, &mut malicious] {
        if side.len() > keep {
            let (chosen, _) = side.partial_shuffle(rng, keep);
            let mut chosen = chosen.to_vec();
            chosen.sort_by_key(|s| s.seq);
            *side = chosen;
        }
    }
    let mut out = benign;
    out.append(&mut malicious);
    out.shuffle(rng);
    Ok(out)
}

/// Marker of the positive class in [`sanity_dataset`].
pub const SANITY_TOKEN: &[u8] = b"EVIL";

/// A separable-by-construction set: printable text where exactly the
/// samples containing [`SANITY_TOKEN`] are positive. Classes alternate.
pub fn sanity_dataset(n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzEILV <>/=\"&;.0123456789";
    (0..n)
        .map(|i| {
            let bad = i % 2 == 1;
            let len = rng.gen_range(16..240);
            let mut bytes: Vec<u8> = loop {
                let b: Vec<u8> = (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect();
                if !b.windows(SANITY_TOKEN.len()).any(|w| w == SANITY_TOKEN) {
                    break b;
                }
            };
            if bad {
                let at = rng.gen_range(0..=bytes.len());
                bytes.splice(at..at, SANITY_TOKEN.iter().copied());
            }
            Sample {
                seq: i as u64,
                bytes,
                label: if bad { BinaryLabel::MaliciousOrError } else { BinaryLabel::Benign },
                original: if bad { Label::Crash } else { Label::Benign },
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub barrier_seq: u64,
}

/// Merge, split at the time barrier, then balance each side independently.
pub fn build_split(
    store: &CorpusStore,
    unique_train_fraction: f64,
    rng: &mut impl Rng,
) -> Result<SplitDataset, DatasetError> {
    let split = time_barrier_split(store, unique_train_fraction)?;
    let (train, eval): (Vec<Sample>, Vec<Sample>) = merge_classes(store)
        .into_iter()
        .partition(|s| s.seq <= split.barrier_seq);
    let train = balance_classes(train, rng)?;
    let eval = balance_classes(eval, rng)?;
    Ok(SplitDataset {
        train,
        eval,
        barrier_seq: split.barrier_seq,
    })
}

/// Writes a split as two sub-corpora (`train/`, `eval/`). Each side keeps the
/// original three-way verdicts in its manifest and lists the balanced sample
/// order in an `order` file.
pub fn save_split(split: &SplitDataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("barrier_seq"), format!("{}\n", split.barrier_seq))?;
    for (name, side) in [("train", &split.train), ("eval", &split.eval)] {
        let mut w = CorpusWriter::create(&dir.join(name))?;
        let mut by_seq: Vec<&Sample> = side.iter().collect();
        by_seq.sort_by_key(|s| s.seq);
        for s in by_seq {
            w.write_case(&sample_case(s))?;
        }
        w.finish()?;
        let order: String = side.iter().map(|s| format!("{}\n", s.seq)).collect();
        fs::write(dir.join(name).join("order"), order)?;
    }
    Ok(())
}

/// Reads back a split written by [`save_split`], in the saved sample order.
pub fn load_split(dir: &Path) -> Result<SplitDataset, DatasetError> {
    let barrier_seq = fs::read_to_string(dir.join("barrier_seq"))?
        .trim()
        .parse()
        .map_err(|e| DatasetError::Corrupt(format!("barrier_seq: {e}")))?;
    let mut sides = Vec::new();
    for name in ["train", "eval"] {
        let store = CorpusStore::load(&dir.join(name))?;
        let order: Vec<u64> = fs::read_to_string(dir.join(name).join("order"))?
            .lines()
            .map(|l| l.parse().map_err(|e| DatasetError::Corrupt(format!("order: {e}"))))
            .collect::<Result<_, _>>()?;
        let by_seq: std::collections::HashMap<u64, &TestCase> =
            store.cases().iter().map(|c| (c.seq, c)).collect();
        let samples = order
            .iter()
            .map(|s| {
                let c = by_seq
                    .get(s)
                    .ok_or_else(|| DatasetError::Corrupt(format!("order lists unknown seq {s}")))?;
                Ok(Sample {
                    seq: c.seq,
                    bytes: c.bytes.clone(),
                    label: merge_label(c.label),
                    original: c.label,
                })
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        sides.push(samples);
    }
    let eval = sides.pop().expect("two sides");
    let train = sides.pop().expect("two sides");
    Ok(SplitDataset {
        train,
        eval,
        barrier_seq,
    })
}

fn sample_case(s: &Sample) -> TestCase {
    TestCase {
        seq: s.seq,
        bytes: s.bytes.clone(),
        label: s.original,
        coverage_sig: 0,
        unique: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(seq: u64, label: Label, unique: bool) -> TestCase {
        TestCase {
            seq,
            bytes: seq.to_le_bytes().to_vec(),
            label,
            coverage_sig: if unique { seq } else { 0 },
            unique,
        }
    }

    fn sample(seq: u64, label: BinaryLabel) -> Sample {
        Sample {
            seq,
            bytes: vec![seq as u8],
            label,
            original: if label == BinaryLabel::Benign {
                Label::Benign
            } else {
                Label::Error
            },
        }
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_label(Label::Crash), BinaryLabel::MaliciousOrError);
        assert_eq!(merge_label(Label::Error), BinaryLabel::MaliciousOrError);
        assert_eq!(merge_label(Label::Benign), BinaryLabel::Benign);
    }

    #[test]
    fn ninety_nine_to_one() {
        let store = CorpusStore::from_cases((1..=100).map(|s| case(s, Label::Benign, true)).collect());
        let split = time_barrier_split(&store, 0.99).unwrap();
        assert_eq!(split.barrier_seq, 99);
        assert_eq!(split.train.len(), 99);
        assert_eq!(split.eval, vec![100]);
    }

    #[test]
    fn full_fraction_is_degenerate() {
        let store = CorpusStore::from_cases((1..=10).map(|s| case(s, Label::Benign, true)).collect());
        assert!(matches!(time_barrier_split(&store, 1.0), Err(DatasetError::DegenerateSplit(_))));
        let one = CorpusStore::from_cases(vec![case(1, Label::Benign, true), case(2, Label::Error, false)]);
        assert!(matches!(time_barrier_split(&one, 0.5), Err(DatasetError::DegenerateSplit(_))));
        assert!(matches!(
            time_barrier_split(&CorpusStore::new(), 0.99),
            Err(DatasetError::EmptyStore)
        ));
    }

    #[test]
    fn balance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |b: u64, m: u64| -> Vec<Sample> {
            (0..b)
                .map(|i| sample(i, BinaryLabel::Benign))
                .chain((b..b + m).map(|i| sample(i, BinaryLabel::MaliciousOrError)))
                .collect()
        };
        for (b, m) in [(100, 300), (300, 100), (50, 50)] {
            let input = mk(b, m);
            let out = balance_classes(input.clone(), &mut rng).unwrap();
            let nb = out.iter().filter(|s| s.label == BinaryLabel::Benign).count();
            assert_eq!(nb, b.min(m) as usize);
            assert_eq!(out.len(), 2 * b.min(m) as usize);
            let seqs: HashSet<u64> = out.iter().map(|s| s.seq).collect();
            assert_eq!(seqs.len(), out.len());
            assert!(out.iter().all(|s| input.contains(s)));
        }
        let one_class = mk(10, 0);
        assert!(matches!(balance_classes(one_class, &mut rng), Err(DatasetError::OneClassOnly(_))));
    }

    #[test]
    fn eval_side_one_class() {
        let mut cases: Vec<TestCase> = (1..=50).map(|s| case(s, if s % 2 == 0 { Label::Error } else { Label::Benign }, true)).collect();
        cases.push(case(51, Label::Benign, true));
        cases.push(case(52, Label::Benign, false));
        let store = CorpusStore::from_cases(cases);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(build_split(&store, 0.99, &mut rng), Err(DatasetError::OneClassOnly(_))));
        assert!(matches!(build_split(&CorpusStore::new(), 0.99, &mut rng), Err(DatasetError::EmptyStore)));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusStore::from_cases(vec![
            case(1, Label::Benign, true),
            case(2, Label::Error, false),
            case(3, Label::Crash, true),
        ]);
        store.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(MANIFEST_HEADER));
        assert_eq!(lines.next(), Some("1\tbenign\t0000000000000001\t1\t1_benign.bin\t8"));
        assert!(dir.path().join("3_crash.bin").exists());
        let back = CorpusStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        assert!(!back.is_truncated());
    }

    #[test]
    fn load_detects_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusStore::from_cases(vec![case(1, Label::Benign, true)]);
        store.save(dir.path()).unwrap();
        fs::write(dir.path().join("1_benign.bin"), b"x").unwrap();
        assert!(matches!(CorpusStore::load(dir.path()), Err(DatasetError::Corrupt(_))));
    }

    #[test]
    fn merge_is_idempotent() {
        for l in Label::ALL {
            let once = merge_label(l);
            let again = match once {
                BinaryLabel::Benign => merge_label(Label::Benign),
                BinaryLabel::MaliciousOrError => merge_label(Label::Error),
            };
            assert_eq!(once, again);
        }
    }
}
