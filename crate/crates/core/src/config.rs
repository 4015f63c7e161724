//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub clients: usize,
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub spread: f64,
    pub concentration: f64,
    pub min_shard: usize,
    pub holdout: f64,
    pub depth: usize,
    pub hidden: usize,
    pub widths: Vec<usize>,
    pub exit_set: Vec<usize>,
    pub split_depths: Vec<usize>,
    pub rounds: usize,
    pub local_steps: Vec<usize>,
    pub participation: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub bits: u32,
    pub csa_weight: f64,
    pub csa_lr: f64,
    pub entropy_threshold: Vec<f64>,
    pub personalize_steps: usize,
    pub stochastic_exit: bool,
    pub seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub record_transcript: bool,
    pub diagnostics: bool,
    pub probe_pairs: usize,
    pub noise_probes: usize,
    pub wall_clock: bool,
    pub export_dataset: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            classes: 4,
            dim: 16,
            samples: 4096,
            spread: 0.5,
            concentration: 0.5,
            min_shard: 10,
            holdout: 0.2,
            depth: 6,
            hidden: 32,
            widths: Vec::new(),
            exit_set: vec![2, 3, 4],
            split_depths: Vec::new(),
            rounds: 50,
            local_steps: vec![5],
            participation: 1.0,
            gamma: 0.5,
            lambda: 0.0,
            inner_lr: 0.05,
            outer_lr: 0.05,
            inner_steps: 1,
            batch_size: 32,
            margin: 1.0,
            bits: 8,
            csa_weight: 1.0,
            csa_lr: 0.05,
            entropy_threshold: vec![0.5],
            personalize_steps: 20,
            stochastic_exit: true,
            seed: 17,
            workers: 1,
            output_dir: PathBuf::from("hsfl-out"),
            record_transcript: false,
            diagnostics: false,
            probe_pairs: 4,
            noise_probes: 8,
            wall_clock: true,
            export_dataset: false,
        }
    }
}

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("clients", "number of clients N"),
    ("classes", "number of classes C"),
    ("dim", "input feature dimension d"),
    ("samples", "total number of samples n"),
    (
        "spread",
        "standard deviation of each Gaussian class cluster",
    ),
    (
        "concentration",
        "Dirichlet concentration of the label-skew partition",
    ),
    ("min_shard", "minimum number of samples per client shard"),
    ("holdout", "fraction of each shard held out for evaluation"),
    ("depth", "number of backbone blocks D"),
    ("hidden", "width of every hidden block"),
    (
        "widths",
        "comma list of D block output widths (overrides hidden)",
    ),
    ("exit_set", "comma list of depths at which heads may attach"),
    (
        "split_depths",
        "comma list of per-client split depths (empty: round-robin over exit_set)",
    ),
    ("rounds", "number of rounds R"),
    (
        "local_steps",
        "local steps per round T_n (one value or one per client)",
    ),
    ("participation", "fraction of clients sampled each round"),
    ("gamma", "weight of the on-device loss, in [0, 1]"),
    ("lambda", "self weight in client aggregation, in [0, 1]"),
    ("inner_lr", "inner adaptation step size alpha"),
    ("outer_lr", "outer step size beta"),
    ("inner_steps", "inner adaptation steps S"),
    ("batch_size", "mini-batch size"),
    ("margin", "contrastive margin m"),
    ("bits", "feature quantization bit width b"),
    (
        "csa_weight",
        "weight of the contrastive alignment loss (0 disables it)",
    ),
    ("csa_lr", "step size of the contrastive trunk update"),
    (
        "entropy_threshold",
        "inference entropy threshold e_n (one value or one per client)",
    ),
    ("personalize_steps", "fine-tuning steps after training"),
    (
        "stochastic_exit",
        "sample the exit depth K each step (false: K = split depth)",
    ),
    ("seed", "master random seed (HSFL_SEED overrides the file)"),
    ("workers", "parallel client tasks per round"),
    (
        "output_dir",
        "directory receiving metrics, summary and checkpoint",
    ),
    (
        "record_transcript",
        "write every wire frame to transcript.bin",
    ),
    (
        "diagnostics",
        "estimate smoothness, dissimilarity and noise levels after the run",
    ),
    (
        "probe_pairs",
        "parameter pairs used for the smoothness estimate",
    ),
    ("noise_probes", "samples used for each noise estimate"),
    (
        "wall_clock",
        "record round wall time in the metrics file (false writes 0)",
    ),
    (
        "export_dataset",
        "write the generated dataset to dataset.csv",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| ConfigError::new(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(ConfigError::new(
            key,
            format!("expected a boolean, got {other:?}"),
        )),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its textual value. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "clients" => self.clients = parse(k, value)?,
            "classes" => self.classes = parse(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "samples" => self.samples = parse(k, value)?,
            "spread" => self.spread = parse(k, value)?,
            "concentration" => self.concentration = parse(k, value)?,
            "min_shard" => self.min_shard = parse(k, value)?,
            "holdout" => self.holdout = parse(k, value)?,
            "depth" => self.depth = parse(k, value)?,
            "hidden" => self.hidden = parse(k, value)?,
            "widths" => self.widths = parse_list(k, value)?,
            "exit_set" => self.exit_set = parse_list(k, value)?,
            "split_depths" => self.split_depths = parse_list(k, value)?,
            "rounds" => self.rounds = parse(k, value)?,
            "local_steps" => self.local_steps = parse_list(k, value)?,
            "participation" => self.participation = parse(k, value)?,
            "gamma" => self.gamma = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "inner_lr" => self.inner_lr = parse(k, value)?,
            "outer_lr" => self.outer_lr = parse(k, value)?,
            "inner_steps" => self.inner_steps = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "margin" => self.margin = parse(k, value)?,
            "bits" => self.bits = parse(k, value)?,
            "csa_weight" => self.csa_weight = parse(k, value)?,
            "csa_lr" => self.csa_lr = parse(k, value)?,
            "entropy_threshold" => self.entropy_threshold = parse_list(k, value)?,
            "personalize_steps" => self.personalize_steps = parse(k, value)?,
            "stochastic_exit" => self.stochastic_exit = parse_bool(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "workers" => self.workers = parse(k, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "record_transcript" => self.record_transcript = parse_bool(k, value)?,
            "diagnostics" => self.diagnostics = parse_bool(k, value)?,
            "probe_pairs" => self.probe_pairs = parse(k, value)?,
            "noise_probes" => self.noise_probes = parse(k, value)?,
            "wall_clock" => self.wall_clock = parse_bool(k, value)?,
            "export_dataset" => self.export_dataset = parse_bool(k, value)?,
            _ => return Err(ConfigError::new(k, "unknown key")),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key.replace('-', "_").as_str() {
            "clients" => self.clients.to_string(),
            "classes" => self.classes.to_string(),
            "dim" => self.dim.to_string(),
            "samples" => self.samples.to_string(),
            "spread" => self.spread.to_string(),
            "concentration" => self.concentration.to_string(),
            "min_shard" => self.min_shard.to_string(),
            "holdout" => self.holdout.to_string(),
            "depth" => self.depth.to_string(),
            "hidden" => self.hidden.to_string(),
            "widths" => join(&self.widths),
            "exit_set" => join(&self.exit_set),
            "split_depths" => join(&self.split_depths),
            "rounds" => self.rounds.to_string(),
            "local_steps" => join(&self.local_steps),
            "participation" => self.participation.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda" => self.lambda.to_string(),
            "inner_lr" => self.inner_lr.to_string(),
            "outer_lr" => self.outer_lr.to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "margin" => self.margin.to_string(),
            "bits" => self.bits.to_string(),
            "csa_weight" => self.csa_weight.to_string(),
            "csa_lr" => self.csa_lr.to_string(),
            "entropy_threshold" => join(&self.entropy_threshold),
            "personalize_steps" => self.personalize_steps.to_string(),
            "stochastic_exit" => self.stochastic_exit.to_string(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "record_transcript" => self.record_transcript.to_string(),
            "diagnostics" => self.diagnostics.to_string(),
            "probe_pairs" => self.probe_pairs.to_string(),
            "noise_probes" => self.noise_probes.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "export_dataset" => self.export_dataset.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies every `key = value` line of `text`. Blank lines and text after
    /// `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::new(format!("line {}", i + 1), "expected `key = value`")
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Renders every key; [`RunConfig::from_text`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Block output widths, one per depth.
    pub fn block_widths(&self) -> Vec<usize> {
        if self.widths.is_empty() {
            vec![self.hidden; self.depth]
        } else {
            self.widths.clone()
        }
    }

    /// Split depth of every client.
    pub fn client_splits(&self) -> Vec<usize> {
        if self.split_depths.is_empty() {
            (0..self.clients)
                .map(|n| self.exit_set[n % self.exit_set.len()])
                .collect()
        } else {
            self.split_depths.clone()
        }
    }

    pub fn client_local_steps(&self) -> Vec<usize> {
        per_client(&self.local_steps, self.clients)
    }

    pub fn client_thresholds(&self) -> Vec<f64> {
        per_client(&self.entropy_threshold, self.clients)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: String| Err(ConfigError::new(key, reason));
        let positive = [
            ("clients", self.clients),
            ("classes", self.classes),
            ("dim", self.dim),
            ("depth", self.depth),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
            ("workers", self.workers),
            ("min_shard", self.min_shard),
        ];
        for (key, v) in positive {
            if v == 0 {
                return fail(key, "must be at least 1".into());
            }
        }
        if self.classes < 2 {
            return fail("classes", "must be at least 2".into());
        }
        if self.samples < self.classes.max(self.clients * self.min_shard) {
            return fail(
                "samples",
                format!(
                    "{} samples cannot cover {} classes and {} clients of at least {}",
                    self.samples, self.classes, self.clients, self.min_shard
                ),
            );
        }
        let finite_nonneg = [
            ("spread", self.spread),
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("margin", self.margin),
            ("csa_weight", self.csa_weight),
            ("csa_lr", self.csa_lr),
        ];
        for (key, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return fail(key, format!("{v} must be finite and non-negative"));
            }
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return fail(
                "concentration",
                format!("{} must be positive", self.concentration),
            );
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return fail("holdout", format!("{} outside [0, 1)", self.holdout));
        }
        for (key, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(key, format!("{v} outside [0, 1]"));
            }
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(
                "participation",
                format!("{} outside (0, 1]", self.participation),
            );
        }
        if self.bits == 0 || self.bits > crate::client::MAX_BITS {
            return fail(
                "bits",
                format!("{} outside 1..={}", self.bits, crate::client::MAX_BITS),
            );
        }
        if self.hidden == 0 && self.widths.is_empty() {
            return fail("hidden", "must be at least 1".into());
        }
        if !self.widths.is_empty() && (self.widths.len() != self.depth || self.widths.contains(&0))
        {
            return fail("widths", format!("expected {} positive widths", self.depth));
        }
        if self.exit_set.is_empty() {
            return fail("exit_set", "must name at least one depth".into());
        }
        if let Some(&e) = self.exit_set.iter().find(|&&e| e == 0 || e >= self.depth) {
            return fail("exit_set", format!("depth {e} outside 1..{}", self.depth));
        }
        let splits = self.client_splits();
        if splits.len() != self.clients {
            return fail(
                "split_depths",
                format!("expected {} entries, got {}", self.clients, splits.len()),
            );
        }
        if let Some(&s) = splits.iter().find(|s| !self.exit_set.contains(s)) {
            return fail("split_depths", format!("depth {s} is not in exit_set"));
        }
        if !matches!(self.local_steps.len(), 1) && self.local_steps.len() != self.clients {
            return fail(
                "local_steps",
                format!("expected 1 or {} entries", self.clients),
            );
        }
        if !matches!(self.entropy_threshold.len(), 1)
            && self.entropy_threshold.len() != self.clients
        {
            return fail(
                "entropy_threshold",
                format!("expected 1 or {} entries", self.clients),
            );
        }
        if let Some(e) = self
            .entropy_threshold
            .iter()
            .find(|e| !(e.is_finite() && **e >= 0.0))
        {
            return fail(
                "entropy_threshold",
                format!("{e} must be finite and non-negative"),
            );
        }
        Ok(())
    }
}

fn per_client<T: Copy>(values: &[T], clients: usize) -> Vec<T> {
    if values.len() == 1 {
        vec![values[0]; clients]
    } else {
        values.to_vec()
    }
}
