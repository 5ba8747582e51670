//! Experiment configuration: dataset-aware defaults, a `key = value` config
//! file format, and command-line overrides (command line > file > defaults).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use fedsikd::clustering::KmeansOptions;
use fedsikd::data::StatsMode;
use fedsikd::federation::{FederationConfig, Strategy, StudentData};
use fedsikd::nn::{architectures, TrainConfig};

pub const DATA_ROOT_ENV: &str = "FEDSIKD_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Har,
}

impl DatasetKind {
    pub fn dir_name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Har => "har",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Experiment-scale defaults: 40 clients, batch 64, 70/50 rounds.
    #[default]
    Paper,
    /// Minutes-scale defaults for CI and determinism checks.
    Smoke,
}

/// Fully resolved run configuration. Serializes into the summary JSON; the
/// textual echo written next to the metrics reproduces the run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub strategy: String,
    pub alpha: f64,
    pub clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub kd_temperature: f64,
    pub kd_weight: f64,
    pub teacher_epochs: usize,
    pub stats_mode: String,
    pub k_min: usize,
    pub k_max: usize,
    pub fixed_k: Option<usize>,
    pub fl_hc_threshold: Option<f64>,
    pub student_data: String,
    pub fedavg_weighted: bool,
    pub min_per_client: usize,
    pub allow_small_clients: bool,
    pub subset_fraction: f64,
    pub eval_batch: usize,
    pub seed: u64,
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Dataset-specific defaults for a preset.
    pub fn defaults(dataset: DatasetKind, preset: Preset) -> Self {
        let mnist = dataset == DatasetKind::Mnist;
        let base = ExperimentConfig {
            dataset,
            strategy: "fedsikd".into(),
            alpha: 0.1,
            clients: 40,
            rounds: if mnist { 70 } else { 50 },
            batch_size: 64,
            epochs: 1,
            learning_rate: 0.01,
            kd_temperature: 3.0,
            kd_weight: 0.5,
            teacher_epochs: 1,
            stats_mode: "per_feature".into(),
            k_min: 2,
            k_max: 10,
            fixed_k: None,
            fl_hc_threshold: None,
            student_data: "local".into(),
            fedavg_weighted: true,
            // MNIST clients must hold two batches; the HAR floor is low so
            // strongly skewed splits of the small dataset stay feasible
            // (padding handles sub-batch clients).
            min_per_client: if mnist { 128 } else { 2 },
            allow_small_clients: !mnist,
            subset_fraction: 1.0,
            eval_batch: 512,
            seed: 42,
            data_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
        };
        match preset {
            Preset::Paper => base,
            Preset::Smoke => ExperimentConfig {
                clients: 8,
                rounds: 3,
                batch_size: 16,
                min_per_client: if mnist { 32 } else { 2 },
                allow_small_clients: true,
                subset_fraction: if mnist { 0.05 } else { 0.25 },
                k_max: 4,
                ..base
            },
        }
    }

    pub fn strategy_enum(&self) -> Result<Strategy> {
        parse_strategy(&self.strategy)
    }

    pub fn stats_mode_enum(&self) -> Result<StatsMode> {
        match self.stats_mode.as_str() {
            "per_feature" => Ok(StatsMode::PerFeature),
            "scalar" => Ok(StatsMode::Scalar),
            other => bail!("stats_mode '{other}' is not one of per_feature, scalar"),
        }
    }

    pub fn student_data_enum(&self) -> Result<StudentData> {
        match self.student_data.as_str() {
            "local" => Ok(StudentData::Local),
            "cluster_excl_self" => Ok(StudentData::ClusterExclSelf),
            other => bail!("student_data '{other}' is not one of local, cluster_excl_self"),
        }
    }

    /// Directory holding this dataset's files.
    pub fn dataset_dir(&self) -> PathBuf {
        self.data_root.join(self.dataset.dir_name())
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy_enum()?;
        self.stats_mode_enum()?;
        self.student_data_enum()?;
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(anyhow!("{name} out of range"))
            }
        };
        positive("alpha (must be > 0)", self.alpha > 0.0 && self.alpha.is_finite())?;
        positive("clients (must be >= 2)", self.clients >= 2)?;
        positive("rounds (must be >= 1)", self.rounds >= 1)?;
        positive("batch_size (must be >= 1)", self.batch_size >= 1)?;
        positive("epochs (must be >= 1)", self.epochs >= 1)?;
        positive(
            "learning_rate (must be finite and >= 0)",
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
        )?;
        positive(
            "kd_temperature (must be > 0)",
            self.kd_temperature > 0.0 && self.kd_temperature.is_finite(),
        )?;
        positive(
            "kd_weight (must be in [0, 1])",
            (0.0..=1.0).contains(&self.kd_weight),
        )?;
        positive("k_min (must be >= 2)", self.k_min >= 2)?;
        positive("k_max (must be >= k_min)", self.k_max >= self.k_min)?;
        positive(
            "subset_fraction (must be in (0, 1])",
            self.subset_fraction > 0.0 && self.subset_fraction <= 1.0,
        )?;
        positive("eval_batch (must be >= 1)", self.eval_batch >= 1)?;
        if let Some(k) = self.fixed_k {
            positive("fixed_k (must be in [1, clients])", (1..=self.clients).contains(&k))?;
        }
        if let Some(t) = self.fl_hc_threshold {
            positive("fl_hc_threshold (must be > 0)", t > 0.0 && t.is_finite())?;
        }
        if !self.dataset_dir().is_dir() {
            bail!(
                "data_root: dataset directory {} not found (set data_root or ${DATA_ROOT_ENV})",
                self.dataset_dir().display()
            );
        }
        Ok(())
    }

    /// The federation-layer view of this configuration.
    pub fn federation_config(&self) -> Result<FederationConfig> {
        let (teacher_arch, student_arch) = match self.dataset {
            DatasetKind::Mnist => (architectures::mnist_teacher(), architectures::mnist_student()),
            DatasetKind::Har => (architectures::har_teacher(), architectures::har_student()),
        };
        Ok(FederationConfig {
            strategy: self.strategy_enum()?,
            rounds: self.rounds,
            client_count: self.clients,
            alpha: self.alpha,
            min_per_client: self.min_per_client,
            train: TrainConfig {
                batch_size: self.batch_size,
                local_epochs: self.epochs,
                learning_rate: self.learning_rate,
                kd_temperature: self.kd_temperature,
                kd_weight: self.kd_weight,
                rng_seed: 0,
                allow_small_clients: self.allow_small_clients,
            },
            teacher_epochs: self.teacher_epochs,
            stats_mode: self.stats_mode_enum()?,
            k_min: self.k_min,
            k_max: self.k_max,
            fixed_k: self.fixed_k,
            kmeans: KmeansOptions::default(),
            fl_hc_threshold: self.fl_hc_threshold,
            student_data: self.student_data_enum()?,
            fedavg_weighted: self.fedavg_weighted,
            master_seed: self.seed,
            eval_batch: self.eval_batch,
            teacher_arch,
            student_arch,
        })
    }

    /// Echo as a config file that reproduces this run exactly.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("dataset", self.dataset.to_string());
        push("strategy", self.strategy.clone());
        push("alpha", self.alpha.to_string());
        push("clients", self.clients.to_string());
        push("rounds", self.rounds.to_string());
        push("batch_size", self.batch_size.to_string());
        push("epochs", self.epochs.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("kd_temperature", self.kd_temperature.to_string());
        push("kd_weight", self.kd_weight.to_string());
        push("teacher_epochs", self.teacher_epochs.to_string());
        push("stats_mode", self.stats_mode.clone());
        push("k_min", self.k_min.to_string());
        push("k_max", self.k_max.to_string());
        if let Some(k) = self.fixed_k {
            push("fixed_k", k.to_string());
        }
        if let Some(t) = self.fl_hc_threshold {
            push("fl_hc_threshold", t.to_string());
        }
        push("student_data", self.student_data.clone());
        push("fedavg_weighted", self.fedavg_weighted.to_string());
        push("min_per_client", self.min_per_client.to_string());
        push("allow_small_clients", self.allow_small_clients.to_string());
        push("subset_fraction", self.subset_fraction.to_string());
        push("eval_batch", self.eval_batch.to_string());
        push("seed", self.seed.to_string());
        push("data_root", self.data_root.display().to_string());
        push("output_dir", self.output_dir.display().to_string());
        out
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "fedsikd" => Ok(Strategy::FedSiKd),
        "fedavg" => Ok(Strategy::FedAvg),
        "random_cluster" => Ok(Strategy::RandomCluster),
        "fl_hc" => Ok(Strategy::FlHc),
        other => bail!("strategy '{other}' is not one of fedsikd, fedavg, random_cluster, fl_hc"),
    }
}

/// One `key = value` pair plus where it came from, for error messages and
/// duplicate-key warnings.
#[derive(Debug, Clone)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub location: String,
}

/// Parse a config file into ordered key-value pairs. Lines are
/// `key = value`; `#` starts a comment; blank lines are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<KeyValue>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                lineno + 1
            );
        };
        pairs.push(KeyValue {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            location: format!("{}:{}", path.display(), lineno + 1),
        });
    }
    Ok(pairs)
}

/// Resolve a config from defaults, file pairs, and `--set` overrides, in
/// that order. Duplicate keys warn and the last occurrence wins.
pub fn resolve_config(
    file_pairs: &[KeyValue],
    overrides: &[KeyValue],
    preset: Preset,
) -> Result<ExperimentConfig> {
    let all: Vec<&KeyValue> = file_pairs.iter().chain(overrides).collect();

    // The dataset decides the defaults, so find it first (last wins).
    let dataset_value = all
        .iter()
        .rev()
        .find(|kv| kv.key == "dataset")
        .ok_or_else(|| anyhow!("missing required key 'dataset' (mnist or har)"))?;
    let dataset = match dataset_value.value.as_str() {
        "mnist" => DatasetKind::Mnist,
        "har" => DatasetKind::Har,
        other => bail!(
            "{}: dataset '{other}' is not one of mnist, har",
            dataset_value.location
        ),
    };

    let mut cfg = ExperimentConfig::defaults(dataset, preset);
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        if !root.is_empty() {
            cfg.data_root = PathBuf::from(root);
        }
    }

    let mut seen: HashMap<String, String> = HashMap::new();
    for kv in &all {
        if let Some(previous) = seen.insert(kv.key.clone(), kv.location.clone()) {
            eprintln!(
                "warning: key '{}' at {} overrides earlier value from {previous}",
                kv.key, kv.location
            );
        }
        apply_key(&mut cfg, kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut ExperimentConfig, kv: &KeyValue) -> Result<()> {
    let err = |what: &str| anyhow!("{}: key '{}': {what}", kv.location, kv.key);
    macro_rules! parse {
        ($ty:ty, $what:expr) => {
            kv.value.parse::<$ty>().map_err(|_| err($what))?
        };
    }
    match kv.key.as_str() {
        "dataset" => {
            cfg.dataset = match kv.value.as_str() {
                "mnist" => DatasetKind::Mnist,
                "har" => DatasetKind::Har,
                _ => return Err(err("expected mnist or har")),
            }
        }
        "strategy" => {
            parse_strategy(&kv.value).map_err(|e| anyhow!("{}: {e}", kv.location))?;
            cfg.strategy = kv.value.clone();
        }
        "alpha" => cfg.alpha = parse!(f64, "expected a positive real"),
        "clients" => cfg.clients = parse!(usize, "expected a positive integer"),
        "rounds" => cfg.rounds = parse!(usize, "expected a positive integer"),
        "batch_size" => cfg.batch_size = parse!(usize, "expected a positive integer"),
        "epochs" => cfg.epochs = parse!(usize, "expected a positive integer"),
        "learning_rate" => cfg.learning_rate = parse!(f64, "expected a non-negative real"),
        "kd_temperature" => cfg.kd_temperature = parse!(f64, "expected a positive real"),
        "kd_weight" => cfg.kd_weight = parse!(f64, "expected a real in [0, 1]"),
        "teacher_epochs" => cfg.teacher_epochs = parse!(usize, "expected an integer"),
        "stats_mode" => {
            match kv.value.as_str() {
                "per_feature" | "scalar" => cfg.stats_mode = kv.value.clone(),
                _ => return Err(err("expected per_feature or scalar")),
            };
        }
        "k_min" => cfg.k_min = parse!(usize, "expected an integer >= 2"),
        "k_max" => cfg.k_max = parse!(usize, "expected an integer"),
        "fixed_k" => {
            cfg.fixed_k = if kv.value == "none" {
                None
            } else {
                Some(parse!(usize, "expected an integer or 'none'"))
            }
        }
        "fl_hc_threshold" => {
            cfg.fl_hc_threshold = if kv.value == "none" {
                None
            } else {
                Some(parse!(f64, "expected a positive real or 'none'"))
            }
        }
        "student_data" => {
            match kv.value.as_str() {
                "local" | "cluster_excl_self" => cfg.student_data = kv.value.clone(),
                _ => return Err(err("expected local or cluster_excl_self")),
            };
        }
        "fedavg_weighted" => cfg.fedavg_weighted = parse!(bool, "expected true or false"),
        "min_per_client" => cfg.min_per_client = parse!(usize, "expected an integer"),
        "allow_small_clients" => {
            cfg.allow_small_clients = parse!(bool, "expected true or false")
        }
        "subset_fraction" => cfg.subset_fraction = parse!(f64, "expected a real in (0, 1]"),
        "eval_batch" => cfg.eval_batch = parse!(usize, "expected a positive integer"),
        "seed" => cfg.seed = parse!(u64, "expected an unsigned integer"),
        "data_root" => cfg.data_root = PathBuf::from(&kv.value),
        "output_dir" => cfg.output_dir = PathBuf::from(&kv.value),
        unknown => {
            return Err(anyhow!(
                "{}: unknown configuration key '{unknown}'",
                kv.location
            ))
        }
    }
    Ok(())
}
