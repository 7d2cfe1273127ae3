//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "VPATCH_CONFIG";

/// Every key a config file may set. Command-line flags use the same names
/// with `-` in place of `_`.
pub const KEYS: &[&str] = &[
    "target",
    "new_target",
    "timeout_ms",
    "workers",
    "seed",
    "max_executions",
    "seeds",
    "generate_seeds",
    "dictionary",
    "corpus",
    "split",
    "fraction",
    "exclude_crashing_on",
    "preset",
    "seq_len",
    "epochs",
    "batch_size",
    "learning_rate",
    "tokens",
    "model",
    "threshold",
    "port",
    "pocs",
    "poc_count",
    "aot_executions",
    "max_fpr",
    "report",
    "roc",
    "out",
];

/// Parses `key = value` lines. `#` starts a comment line; blank lines are
/// skipped; keys are normalized to snake case.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        let key = normalize_key(k.trim());
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key {key:?}", i + 1)));
        }
        out.insert(key, v.trim().to_owned());
    }
    Ok(out)
}

pub fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

/// Resolved settings for every subcommand. Paths are not checked here;
/// each command checks the ones it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub target: String,
    pub new_target: Option<String>,
    pub timeout_ms: u64,
    pub workers: usize,
    pub seed: u64,
    pub max_executions: u64,
    pub seeds: Option<PathBuf>,
    pub generate_seeds: usize,
    pub dictionary: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub fraction: f64,
    pub exclude_crashing_on: Option<String>,
    pub preset: String,
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tokens: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub threshold: f64,
    pub port: u16,
    /// Directory of PoC inputs; generated for builtin targets when unset.
    pub pocs: Option<PathBuf>,
    pub poc_count: usize,
    pub aot_executions: u64,
    pub max_fpr: f64,
    pub report: Option<PathBuf>,
    pub roc: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            target: "builtin-minimark-v1".into(),
            new_target: None,
            timeout_ms: 1000,
            workers: 1,
            seed: 0,
            max_executions: 50_000,
            seeds: None,
            generate_seeds: 8,
            dictionary: None,
            corpus: None,
            split: None,
            fraction: 0.99,
            exclude_crashing_on: None,
            preset: "desk".into(),
            seq_len: vpatch_core::features::DEFAULT_SEQ_LEN,
            epochs: 4,
            batch_size: 64,
            learning_rate: 1e-3,
            tokens: None,
            model: None,
            threshold: 0.5,
            port: 7878,
            pocs: None,
            poc_count: 4,
            aot_executions: 20_000,
            max_fpr: 0.2,
            report: None,
            roc: None,
            out: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse {v:?}")))
}

fn opt_str(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_owned())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl Settings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let key = normalize_key(key);
        match key.as_str() {
            "target" => self.target = v.to_owned(),
            "new_target" => self.new_target = opt_str(v),
            "timeout_ms" => self.timeout_ms = num(&key, v)?,
            "workers" => self.workers = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "max_executions" => self.max_executions = num(&key, v)?,
            "seeds" => self.seeds = opt_path(v),
            "generate_seeds" => self.generate_seeds = num(&key, v)?,
            "dictionary" => self.dictionary = opt_path(v),
            "corpus" => self.corpus = opt_path(v),
            "split" => self.split = opt_path(v),
            "fraction" => self.fraction = num(&key, v)?,
            "exclude_crashing_on" => self.exclude_crashing_on = opt_str(v),
            "preset" => self.preset = v.to_owned(),
            "seq_len" => self.seq_len = num(&key, v)?,
            "epochs" => self.epochs = num(&key, v)?,
            "batch_size" => self.batch_size = num(&key, v)?,
            "learning_rate" => self.learning_rate = num(&key, v)?,
            "tokens" => self.tokens = opt_path(v),
            "model" => self.model = opt_path(v),
            "threshold" => self.threshold = num(&key, v)?,
            "port" => self.port = num(&key, v)?,
            "pocs" => self.pocs = opt_path(v),
            "poc_count" => self.poc_count = num(&key, v)?,
            "aot_executions" => self.aot_executions = num(&key, v)?,
            "max_fpr" => self.max_fpr = num(&key, v)?,
            "report" => self.report = opt_path(v),
            "roc" => self.roc = opt_path(v),
            "out" => self.out = opt_path(v),
            _ => return Err(CliError::Usage(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then the config file, then the overrides in order.
    pub fn resolve<'a>(
        config_file: Option<&Path>,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, CliError> {
        let mut s = Self::default();
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        if let Some(path) = config_file.map(Path::to_path_buf).or(env_path) {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                s.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(CliError::Usage(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CliError::Usage(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if !(self.max_fpr >= 0.0 && self.max_fpr <= 1.0) {
            return Err(CliError::Usage(format!("max_fpr {} outside [0, 1]", self.max_fpr)));
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be >= 1".into()));
        }
        if self.seq_len == 0 {
            return Err(CliError::Usage("seq_len must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CliError::Usage("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// A path setting that the command cannot do without.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("missing setting {key:?}")))
    }
}
