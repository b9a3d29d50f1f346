//! Experiment orchestration: config files, the per-seed pipeline, metrics and the results
//! file.
//!
//! Config files are flat `section.key=value` lines; `#` starts a comment. Only
//! `dataset.kind` is required. [`ExperimentConfig::render`] prints every key with its
//! effective value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attack::{run_variant, AttackConfig, AttackOutcome, AttackerView, ClusterSpace, Variant};
use crate::data::{self, Dataset, SplitMode, SyntheticSpec, TabularSchema};
use crate::defenses::{DefenseSpec, DiscreteCalibration};
use crate::detectors::{fit_calibrated, DeepAeConfig, DetectorConfig, DetectorKind, LabelAwareDetector, ThresholdMode};
use crate::matrix::{self, Matrix};
use crate::nn::SgdConfig;
use crate::protocol::{InferenceOracle, LocalOracle, TcpOracle};
use crate::rng::derive_seed;
use crate::selection::GreedyMode;
use crate::vfl::{train_vfl, Aggregation, MonitorMode, PredictionLabel, VflArch, VflModel, VflSystem};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Hypercube-corner Gaussian blobs; train and test are drawn independently per seed.
    Synthetic {
        classes: usize,
        dim: usize,
        separation: f64,
        stdev: f64,
        train_per_class: usize,
        test_per_class: usize,
    },
    Tabular {
        train: PathBuf,
        test: PathBuf,
        schema: TabularSchema,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseKind {
    None,
    Noisy,
    Discrete,
    Compressed,
}

/// Defense settings as written in the config; calibration happens per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub sigma: f64,
    pub bins: usize,
    pub shared_range: bool,
    pub ratio: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            sigma: 0.1,
            bins: 8,
            shared_range: false,
            ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub fractions: Vec<f64>,
    pub split_mode: SplitMode,
    pub attacker: usize,
    pub arch: VflArch,
    pub train: SgdConfig,
    pub detector: DetectorConfig,
    pub detector_enabled: bool,
    pub percentile: f64,
    pub threshold_mode: ThresholdMode,
    pub monitor_aggregate: bool,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub transport: Transport,
    pub host: String,
    pub port: u16,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults for everything but the dataset.
    pub fn with_dataset(dataset: DatasetSpec) -> Self {
        Self {
            dataset,
            fractions: vec![0.5, 0.5],
            split_mode: SplitMode::Contiguous,
            attacker: 1,
            arch: VflArch::default(),
            train: SgdConfig {
                epochs: 30,
                lr: 0.05,
                batch_size: 32,
            },
            detector: DetectorConfig::deepae(DeepAeConfig::default()),
            detector_enabled: true,
            percentile: 95.0,
            threshold_mode: ThresholdMode::PerClass,
            monitor_aggregate: false,
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            variant: Variant::Vtarbel,
            seeds: vec![0, 1, 2, 3, 4],
            transport: Transport::InProc,
            host: "127.0.0.1".into(),
            port: 0,
            output: None,
        }
    }

    /// The standard synthetic fixture: four classes, 20 features, 2000 test samples.
    pub fn fixture() -> Self {
        Self::with_dataset(DatasetSpec::Synthetic {
            classes: 4,
            dim: 20,
            separation: 2.0,
            stdev: 1.0,
            train_per_class: 500,
            test_per_class: 500,
        })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Synthetic { classes, .. } => Some(*classes),
            DatasetSpec::Tabular { schema, .. } => schema.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::config("split.fractions is empty"));
        }
        if self.attacker == 0 || self.attacker >= self.fractions.len() {
            return Err(Error::config(format!(
                "split.attacker must name a passive party in [1, {})",
                self.fractions.len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("experiment.seeds is empty"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::config("detector.percentile must lie in (0, 100)"));
        }
        if let Some(c) = self.num_classes() {
            self.attack.validate(c)?;
        }
        self.defense_spec_unchecked().validate()
    }

    fn defense_spec_unchecked(&self) -> DefenseSpec {
        let d = &self.defense;
        match d.kind {
            DefenseKind::None => DefenseSpec::None,
            DefenseKind::Noisy => DefenseSpec::Noisy { sigma: d.sigma, seed: 0 },
            DefenseKind::Discrete => DefenseSpec::Discrete {
                bins: d.bins,
                calibration: DiscreteCalibration::Shared(0.0, 1.0),
            },
            DefenseKind::Compressed => DefenseSpec::Compressed { ratio: d.ratio },
        }
    }

    /// Every key with its effective value, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                separation,
                stdev,
                train_per_class,
                test_per_class,
            } => {
                kv("dataset.kind", "synthetic".into());
                kv("dataset.classes", classes.to_string());
                kv("dataset.dim", dim.to_string());
                kv("dataset.separation", separation.to_string());
                kv("dataset.stdev", stdev.to_string());
                kv("dataset.train_per_class", train_per_class.to_string());
                kv("dataset.test_per_class", test_per_class.to_string());
            }
            DatasetSpec::Tabular { train, test, schema } => {
                kv("dataset.kind", "tabular".into());
                kv("dataset.train", train.display().to_string());
                kv("dataset.test", test.display().to_string());
                kv("dataset.delimiter", schema.delimiter.to_string());
                kv("dataset.label_column", schema.label_column.to_string());
                kv("dataset.header", schema.has_header.to_string());
                if let Some(c) = schema.num_classes {
                    kv("dataset.classes", c.to_string());
                }
            }
        }
        kv("split.fractions", self.fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","));
        kv(
            "split.mode",
            match self.split_mode {
                SplitMode::Contiguous => "contiguous",
                SplitMode::Random => "random",
            }
            .into(),
        );
        kv("split.attacker", self.attacker.to_string());
        kv("model.bottom_hidden", list(&self.arch.bottom_hidden));
        kv("model.embed_dim", self.arch.embed_dim.to_string());
        kv("model.top_hidden", list(&self.arch.top_hidden));
        kv(
            "model.aggregation",
            match self.arch.aggregation {
                Aggregation::Sum => "sum",
                Aggregation::Concat => "concat",
            }
            .into(),
        );
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("detector.enabled", self.detector_enabled.to_string());
        kv("detector.kind", self.detector.kind.name().into());
        kv("detector.percentile", self.percentile.to_string());
        kv(
            "detector.threshold_mode",
            match self.threshold_mode {
                ThresholdMode::PerClass => "per_class",
                ThresholdMode::Global => "global",
            }
            .into(),
        );
        kv("detector.monitor", if self.monitor_aggregate { "aggregate" } else { "party" }.into());
        kv("detector.bandwidth", self.detector.bandwidth.map_or("median".into(), |h| h.to_string()));
        render_ae(&mut kv, "detector", &self.detector.deepae);
        let a = &self.attack;
        kv("attack.variant", self.variant.name().into());
        kv("attack.target", a.target.to_string());
        kv("attack.lambda", a.lambda.map_or("auto".into(), |l| l.to_string()));
        kv("attack.detector", a.estimator.kind.name().into());
        kv("attack.bandwidth", a.estimator.bandwidth.map_or("median".into(), |h| h.to_string()));
        render_ae(&mut kv, "attack", &a.estimator.deepae);
        kv("attack.percentile", a.estimator_percentile.to_string());
        kv("attack.t_opt", a.t_opt.to_string());
        kv("attack.alpha", a.alpha.map_or("auto".into(), |x| x.to_string()));
        kv("attack.alpha_scale", a.alpha_scale.to_string());
        kv("attack.beta", a.beta.to_string());
        kv("attack.eta", a.eta.to_string());
        kv("attack.epsilon", a.epsilon.to_string());
        kv("attack.max_rounds", a.max_rounds.to_string());
        kv("attack.t_ft", a.t_ft.to_string());
        kv("attack.ft_lr", a.ft_lr.to_string());
        kv("attack.ft_batch_size", a.ft_batch_size.to_string());
        kv("attack.head_hidden", list(&a.head_hidden));
        kv(
            "attack.greedy",
            match a.greedy {
                GreedyMode::Sequential => "sequential",
                GreedyMode::Batch => "batch",
            }
            .into(),
        );
        kv(
            "attack.cluster_space",
            match a.cluster_space {
                ClusterSpace::Embedding => "embedding",
                ClusterSpace::Raw => "raw",
            }
            .into(),
        );
        kv("attack.cluster_max_iter", a.cluster_max_iter.to_string());
        let d = &self.defense;
        kv(
            "defense.kind",
            match d.kind {
                DefenseKind::None => "none",
                DefenseKind::Noisy => "noisy",
                DefenseKind::Discrete => "discrete",
                DefenseKind::Compressed => "compressed",
            }
            .into(),
        );
        kv("defense.sigma", d.sigma.to_string());
        kv("defense.bins", d.bins.to_string());
        kv("defense.range", if d.shared_range { "shared" } else { "per_dimension" }.into());
        kv("defense.ratio", d.ratio.to_string());
        kv("experiment.seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        kv(
            "experiment.transport",
            match self.transport {
                Transport::InProc => "inproc",
                Transport::Tcp => "tcp",
            }
            .into(),
        );
        kv("experiment.host", self.host.clone());
        kv("experiment.port", self.port.to_string());
        out
    }

    /// SHA-256 of [`ExperimentConfig::render`], hex encoded. The output path and the
    /// transport are excluded so that the same experiment has the same digest everywhere.
    pub fn digest(&self) -> String {
        let canonical: String = self
            .render()
            .lines()
            .filter(|l| !l.starts_with("experiment.transport=") && !l.starts_with("experiment.host=") && !l.starts_with("experiment.port="))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn render_ae(kv: &mut impl FnMut(&str, String), section: &str, ae: &DeepAeConfig) {
    let list = ae.hidden.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    kv(&format!("{section}.ae_hidden"), list);
    kv(&format!("{section}.ae_latent"), ae.latent.to_string());
    kv(&format!("{section}.ae_epochs"), ae.epochs.to_string());
    kv(&format!("{section}.ae_lr"), ae.lr.to_string());
    kv(&format!("{section}.ae_batch_size"), ae.batch_size.to_string());
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Parse {
        line,
        msg: format!("{key}: {e}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_value(key, s.trim(), line)).collect()
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("{key}: expected true or false"),
        }),
    }
}

fn parse_opt_f64(key: &str, v: &str, line: usize, auto: &str) -> Result<Option<f64>> {
    if v == auto {
        Ok(None)
    } else {
        parse_value(key, v, line).map(Some)
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses a config file body.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| bad(line, "expected key=value"))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if entries.insert(k.clone(), (v, line)).is_some() {
            return Err(bad(line, format!("duplicate key {k}")));
        }
    }
    let take = |entries: &mut BTreeMap<String, (String, usize)>, k: &str| entries.remove(k);

    let (kind, kind_line) = take(&mut entries, "dataset.kind").ok_or_else(|| Error::config("dataset.kind is required"))?;
    let dataset = match kind.as_str() {
        "synthetic" => {
            let mut get = |k: &str, default: f64| -> Result<f64> {
                match take(&mut entries, k) {
                    Some((v, l)) => parse_value(k, &v, l),
                    None => Ok(default),
                }
            };
            DatasetSpec::Synthetic {
                classes: get("dataset.classes", 4.0)? as usize,
                dim: get("dataset.dim", 20.0)? as usize,
                separation: get("dataset.separation", 2.0)?,
                stdev: get("dataset.stdev", 1.0)?,
                train_per_class: get("dataset.train_per_class", 500.0)? as usize,
                test_per_class: get("dataset.test_per_class", 500.0)? as usize,
            }
        }
        "tabular" => {
            let train = take(&mut entries, "dataset.train").ok_or_else(|| Error::config("dataset.train is required for tabular data"))?;
            let test = take(&mut entries, "dataset.test").ok_or_else(|| Error::config("dataset.test is required for tabular data"))?;
            let mut schema = TabularSchema::default();
            if let Some((v, l)) = take(&mut entries, "dataset.delimiter") {
                let mut chars = v.chars();
                schema.delimiter = match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ if v == "tab" => '\t',
                    _ => return Err(bad(l, "dataset.delimiter must be one character")),
                };
            }
            if let Some((v, l)) = take(&mut entries, "dataset.label_column") {
                schema.label_column = parse_value("dataset.label_column", &v, l)?;
            }
            if let Some((v, l)) = take(&mut entries, "dataset.header") {
                schema.has_header = parse_bool("dataset.header", &v, l)?;
            }
            if let Some((v, l)) = take(&mut entries, "dataset.classes") {
                schema.num_classes = Some(parse_value("dataset.classes", &v, l)?);
            }
            DatasetSpec::Tabular {
                train: train.0.into(),
                test: test.0.into(),
                schema,
            }
        }
        other => return Err(bad(kind_line, format!("unknown dataset.kind {other:?}"))),
    };
    let mut cfg = ExperimentConfig::with_dataset(dataset);

    for (key, (v, line)) in entries {
        let v = v.as_str();
        let k = key.as_str();
        match k {
            "split.fractions" => cfg.fractions = parse_list(k, v, line)?,
            "split.mode" => {
                cfg.split_mode = match v {
                    "contiguous" => SplitMode::Contiguous,
                    "random" => SplitMode::Random,
                    _ => return Err(bad(line, "split.mode must be contiguous or random")),
                }
            }
            "split.attacker" => cfg.attacker = parse_value(k, v, line)?,
            "model.bottom_hidden" => cfg.arch.bottom_hidden = parse_list(k, v, line)?,
            "model.embed_dim" => cfg.arch.embed_dim = parse_value(k, v, line)?,
            "model.top_hidden" => cfg.arch.top_hidden = parse_list(k, v, line)?,
            "model.aggregation" => cfg.arch.aggregation = parse_value(k, v, line)?,
            "train.epochs" => cfg.train.epochs = parse_value(k, v, line)?,
            "train.lr" => cfg.train.lr = parse_value(k, v, line)?,
            "train.batch_size" => cfg.train.batch_size = parse_value(k, v, line)?,
            "detector.enabled" => cfg.detector_enabled = parse_bool(k, v, line)?,
            "detector.kind" => cfg.detector.kind = parse_value::<DetectorKind>(k, v, line)?,
            "detector.percentile" => cfg.percentile = parse_value(k, v, line)?,
            "detector.threshold_mode" => {
                cfg.threshold_mode = match v {
                    "per_class" => ThresholdMode::PerClass,
                    "global" => ThresholdMode::Global,
                    _ => return Err(bad(line, "detector.threshold_mode must be per_class or global")),
                }
            }
            "detector.monitor" => {
                cfg.monitor_aggregate = match v {
                    "party" => false,
                    "aggregate" => true,
                    _ => return Err(bad(line, "detector.monitor must be party or aggregate")),
                }
            }
            "detector.bandwidth" => cfg.detector.bandwidth = parse_opt_f64(k, v, line, "median")?,
            "attack.variant" => cfg.variant = parse_value(k, v, line)?,
            "attack.target" => cfg.attack.target = parse_value(k, v, line)?,
            "attack.lambda" => cfg.attack.lambda = parse_opt_f64(k, v, line, "auto")?,
            "attack.detector" => cfg.attack.estimator.kind = parse_value::<DetectorKind>(k, v, line)?,
            "attack.bandwidth" => cfg.attack.estimator.bandwidth = parse_opt_f64(k, v, line, "median")?,
            "attack.percentile" => cfg.attack.estimator_percentile = parse_value(k, v, line)?,
            "attack.t_opt" => cfg.attack.t_opt = parse_value(k, v, line)?,
            "attack.alpha" => cfg.attack.alpha = parse_opt_f64(k, v, line, "auto")?,
            "attack.alpha_scale" => cfg.attack.alpha_scale = parse_value(k, v, line)?,
            "attack.beta" => cfg.attack.beta = parse_value(k, v, line)?,
            "attack.eta" => cfg.attack.eta = parse_value(k, v, line)?,
            "attack.epsilon" => cfg.attack.epsilon = parse_value(k, v, line)?,
            "attack.max_rounds" => cfg.attack.max_rounds = parse_value(k, v, line)?,
            "attack.t_ft" => cfg.attack.t_ft = parse_value(k, v, line)?,
            "attack.ft_lr" => cfg.attack.ft_lr = parse_value(k, v, line)?,
            "attack.ft_batch_size" => cfg.attack.ft_batch_size = parse_value(k, v, line)?,
            "attack.head_hidden" => cfg.attack.head_hidden = parse_list(k, v, line)?,
            "attack.greedy" => {
                cfg.attack.greedy = match v {
                    "sequential" => GreedyMode::Sequential,
                    "batch" => GreedyMode::Batch,
                    _ => return Err(bad(line, "attack.greedy must be sequential or batch")),
                }
            }
            "attack.cluster_space" => {
                cfg.attack.cluster_space = match v {
                    "embedding" => ClusterSpace::Embedding,
                    "raw" => ClusterSpace::Raw,
                    _ => return Err(bad(line, "attack.cluster_space must be embedding or raw")),
                }
            }
            "attack.cluster_max_iter" => cfg.attack.cluster_max_iter = parse_value(k, v, line)?,
            "defense.kind" => {
                cfg.defense.kind = match v {
                    "none" => DefenseKind::None,
                    "noisy" => DefenseKind::Noisy,
                    "discrete" => DefenseKind::Discrete,
                    "compressed" => DefenseKind::Compressed,
                    _ => return Err(bad(line, format!("unknown defense.kind {v:?}"))),
                }
            }
            "defense.sigma" => cfg.defense.sigma = parse_value(k, v, line)?,
            "defense.bins" => cfg.defense.bins = parse_value(k, v, line)?,
            "defense.range" => {
                cfg.defense.shared_range = match v {
                    "per_dimension" => false,
                    "shared" => true,
                    _ => return Err(bad(line, "defense.range must be per_dimension or shared")),
                }
            }
            "defense.ratio" => cfg.defense.ratio = parse_value(k, v, line)?,
            "experiment.seeds" => cfg.seeds = parse_list(k, v, line)?,
            "experiment.transport" => {
                cfg.transport = match v {
                    "inproc" => Transport::InProc,
                    "tcp" => Transport::Tcp,
                    _ => return Err(bad(line, "experiment.transport must be inproc or tcp")),
                }
            }
            "experiment.host" => cfg.host = v.to_string(),
            "experiment.port" => cfg.port = parse_value(k, v, line)?,
            "experiment.output" => cfg.output = Some(PathBuf::from(v)),
            _ => {
                if let Some(rest) = k.strip_prefix("detector.ae_") {
                    set_ae(&mut cfg.detector.deepae, rest, k, v, line)?;
                } else if let Some(rest) = k.strip_prefix("attack.ae_") {
                    set_ae(&mut cfg.attack.estimator.deepae, rest, k, v, line)?;
                } else {
                    return Err(bad(line, format!("unknown key {k}")));
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_ae(ae: &mut DeepAeConfig, field: &str, key: &str, v: &str, line: usize) -> Result<()> {
    match field {
        "hidden" => ae.hidden = parse_list(key, v, line)?,
        "latent" => ae.latent = parse_value(key, v, line)?,
        "epochs" => ae.epochs = parse_value(key, v, line)?,
        "lr" => ae.lr = parse_value(key, v, line)?,
        "batch_size" => ae.batch_size = parse_value(key, v, line)?,
        _ => return Err(bad(line, format!("unknown key {key}"))),
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Fraction of predictions equal to `target`; `REJ` never matches.
pub fn compute_asr(predictions: &[PredictionLabel], target: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::config("no predictions"));
    }
    let hits = predictions.iter().filter(|&&p| p == PredictionLabel::Class(target)).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// F1 of the positive (anomalous) class; 0 when there are no true positives.
pub fn detector_f1(flags: &[bool], truth: &[bool]) -> Result<f64> {
    if flags.len() != truth.len() {
        return Err(Error::shape("flags and truth differ in length"));
    }
    let tp = flags.iter().zip(truth).filter(|(&f, &t)| f && t).count() as f64;
    let fp = flags.iter().zip(truth).filter(|(&f, &t)| f && !t).count() as f64;
    let fn_ = flags.iter().zip(truth).filter(|(&f, &t)| !f && t).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Trained system and data for one seed, shared by every variant run on that seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub train_parts: Vec<Matrix>,
    pub test_parts: Vec<Matrix>,
    pub columns: Vec<Vec<usize>>,
    pub model: VflModel,
    pub train_loss: Vec<f64>,
    /// Calibrated defender detector.
    pub detector: LabelAwareDetector,
    /// Embeddings the detector was fit on.
    pub monitored_train: Matrix,
    pub monitor: MonitorMode,
}

fn stage<T>(name: &'static str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        seed,
        source: Box::new(e),
    })
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            separation,
            stdev,
            train_per_class,
            test_per_class,
        } => {
            let train = SyntheticSpec::grid(*classes, *dim, *separation, *stdev, *train_per_class);
            let test = SyntheticSpec::grid(*classes, *dim, *separation, *stdev, *test_per_class);
            Ok((
                data::generate_synthetic(&train, derive_seed(seed, 1))?,
                data::generate_synthetic(&test, derive_seed(seed, 2))?,
            ))
        }
        DatasetSpec::Tabular { train, test, schema } => {
            let tr = data::load_tabular(train, schema)?;
            let mut schema = schema.clone();
            schema.num_classes = Some(tr.num_classes);
            let te = data::load_tabular(test, &schema)?;
            if tr.dim() != te.dim() {
                return Err(Error::shape("train and test files differ in feature count"));
            }
            Ok((tr, te))
        }
    }
}

/// Data generation, vertical split, split training and defender calibration.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let (train, test) = stage("data", seed, load_data(cfg, seed))?;
    let columns = stage(
        "split",
        seed,
        data::split_columns(train.dim(), &cfg.fractions, derive_seed(seed, 3), cfg.split_mode),
    )?;
    let train_parts: Vec<Matrix> = columns.iter().map(|c| train.features.select_cols(c)).collect();
    let test_parts: Vec<Matrix> = columns.iter().map(|c| test.features.select_cols(c)).collect();
    let (model, train_loss) = stage(
        "train",
        seed,
        train_vfl(&train_parts, &train.labels, train.num_classes, &cfg.arch, &cfg.train, derive_seed(seed, 4)),
    )?;

    let monitor = if cfg.monitor_aggregate {
        MonitorMode::Aggregate
    } else {
        MonitorMode::Party(cfg.attacker)
    };
    let detector_stage = || -> Result<(Matrix, LabelAwareDetector)> {
        let monitored = match monitor {
            MonitorMode::Party(p) => model.embed_batch(p, &train_parts[p])?,
            MonitorMode::Aggregate => {
                let embs = (0..model.num_parties())
                    .map(|k| model.embed_batch(k, &train_parts[k]))
                    .collect::<Result<Vec<_>>>()?;
                let rows = (0..train.len())
                    .map(|r| {
                        let parts: Vec<&[f64]> = embs.iter().map(|e| e.row(r)).collect();
                        crate::vfl::aggregate(&parts, model.aggregation)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Matrix::from_rows(&rows)?
            }
        };
        let det_cfg = DetectorConfig {
            deepae: DeepAeConfig {
                seed: derive_seed(seed, 5),
                ..cfg.detector.deepae.clone()
            },
            ..cfg.detector.clone()
        };
        let mut det = fit_calibrated(&monitored, &train.labels, train.num_classes, &det_cfg, cfg.percentile, cfg.threshold_mode)?;
        if !cfg.detector_enabled {
            det.set_uniform_threshold(f64::INFINITY);
        }
        Ok((monitored, det))
    };
    let (monitored_train, detector) = stage("detector", seed, detector_stage())?;
    Ok(SeedContext {
        seed,
        train,
        test,
        train_parts,
        test_parts,
        columns,
        model,
        train_loss,
        detector,
        monitored_train,
        monitor,
    })
}

impl SeedContext {
    /// Builds the deployed system with the configured defense on the attacker's embedding.
    pub fn system(&self, cfg: &ExperimentConfig, defense: &DefenseConfig) -> Result<VflSystem> {
        let spec = match defense.kind {
            DefenseKind::None => DefenseSpec::None,
            DefenseKind::Noisy => DefenseSpec::Noisy {
                sigma: defense.sigma,
                seed: derive_seed(self.seed, 6),
            },
            DefenseKind::Discrete => {
                let attacker_train = self.model.embed_batch(cfg.attacker, &self.train_parts[cfg.attacker])?;
                DefenseSpec::Discrete {
                    bins: defense.bins,
                    calibration: if defense.shared_range {
                        DiscreteCalibration::shared(&attacker_train)
                    } else {
                        DiscreteCalibration::per_dimension(&attacker_train)
                    },
                }
            }
            DefenseKind::Compressed => DefenseSpec::Compressed { ratio: defense.ratio },
        };
        spec.validate()?;
        Ok(VflSystem::new(self.model.clone(), Some(self.detector.clone()), self.monitor).with_defense(spec, cfg.attacker))
    }

    pub fn attacker_bounds(&self, cfg: &ExperimentConfig) -> Vec<(f64, f64)> {
        self.columns[cfg.attacker].iter().map(|&c| self.test.feature_bounds[c]).collect()
    }
}

/// Summary of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub variant: Variant,
    pub asr: f64,
    pub s1: f64,
    pub s2: f64,
    pub accuracy: f64,
    /// Agreement of the attacker's estimated detector with the defender on benign
    /// traffic; NaN when the variant builds no estimator.
    pub f1: f64,
    pub anomaly_ratio: f64,
    pub prep_size: usize,
    pub samples: usize,
}

/// Everything produced for one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub row: SeedRow,
    pub outcome: AttackOutcome,
    /// Benign predictions of the deployed system on the test set.
    pub benign: Vec<PredictionLabel>,
}

/// Runs `variant` on a prepared seed with the given defense.
pub fn run_on_context(cfg: &ExperimentConfig, ctx: &SeedContext, variant: Variant, defense: &DefenseConfig) -> Result<SeedRun> {
    let seed = ctx.seed;
    let system = stage("system", seed, ctx.system(cfg, defense))?;
    let bounds = ctx.attacker_bounds(cfg);
    let view = AttackerView {
        features: &ctx.test_parts[cfg.attacker],
        bottom: &ctx.model.bottoms[cfg.attacker],
        bounds: &bounds,
        num_classes: ctx.test.num_classes,
    };
    let attack_cfg = AttackConfig {
        seed: derive_seed(seed, 7),
        ..cfg.attack.clone()
    };
    let outcome = stage(
        "attack",
        seed,
        (|| {
            let mut oracle: Box<dyn InferenceOracle + '_> = match cfg.transport {
                Transport::InProc => Box::new(LocalOracle::new(&system, &ctx.test_parts, cfg.attacker)),
                Transport::Tcp => Box::new(TcpOracle::spawn(
                    &format!("{}:{}", cfg.host, cfg.port),
                    system.clone(),
                    ctx.test_parts.clone(),
                    cfg.attacker,
                )?),
            };
            run_variant(variant, &view, oracle.as_mut(), &attack_cfg)
        })(),
    )?;
    let benign = stage("evaluate", seed, system.infer_batch(&ctx.test_parts))?;
    let correct = benign.iter().zip(&ctx.test.labels).filter(|(p, &y)| **p == PredictionLabel::Class(y)).count();
    let f1 = match outcome.preparation.as_ref().and_then(|p| p.estimator.as_ref().map(|e| (p, e))) {
        Some((prep, est)) => stage("evaluate", seed, estimator_agreement(ctx, cfg, &prep.surrogate, est, &benign))?,
        None => f64::NAN,
    };
    let report = &outcome.report;
    Ok(SeedRun {
        row: SeedRow {
            seed,
            variant,
            asr: report.overall(),
            s1: report.s1(),
            s2: report.s2(),
            accuracy: correct as f64 / benign.len().max(1) as f64,
            f1,
            anomaly_ratio: report.anomaly_ratio(),
            prep_size: report.preparation_size(),
            samples: report.num_samples(),
        },
        outcome,
        benign,
    })
}

/// F1 of the estimated detector's flags against the defender's `REJ` answers on benign
/// test traffic.
fn estimator_agreement(
    ctx: &SeedContext,
    cfg: &ExperimentConfig,
    surrogate: &crate::attack::Surrogate,
    est: &LabelAwareDetector,
    benign: &[PredictionLabel],
) -> Result<f64> {
    let x = &ctx.test_parts[cfg.attacker];
    let flags = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let e = surrogate.bottom.predict(x.row(i))?;
            let c = matrix::argmax(&surrogate.head.predict(&e)?);
            Ok(est.score(&e, c)? > est.threshold(c)?)
        })
        .collect::<Result<Vec<bool>>>()?;
    let truth: Vec<bool> = benign.iter().map(|p| p.is_reject()).collect();
    detector_f1(&flags, &truth)
}

/// Per-seed rows plus the config digest.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRecord {
    pub digest: String,
    pub rows: Vec<SeedRow>,
}

/// Mean and population standard deviation, skipping NaN entries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub const RESULTS_HEADER: &str = "seed,variant,asr,s1,s2,accuracy,f1,anomaly_ratio,prep_size,samples,asr_std,accuracy_std,f1_std,anomaly_ratio_std";

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub asr: (f64, f64),
    pub s1: f64,
    pub s2: f64,
    pub accuracy: (f64, f64),
    pub f1: (f64, f64),
    pub anomaly_ratio: (f64, f64),
    pub prep_size: f64,
    pub samples: f64,
}

impl ResultsRecord {
    pub fn aggregate(&self) -> Aggregate {
        let col = |f: fn(&SeedRow) -> f64| self.rows.iter().map(f).collect::<Vec<_>>();
        Aggregate {
            asr: mean_std(&col(|r| r.asr)),
            s1: mean_std(&col(|r| r.s1)).0,
            s2: mean_std(&col(|r| r.s2)).0,
            accuracy: mean_std(&col(|r| r.accuracy)),
            f1: mean_std(&col(|r| r.f1)),
            anomaly_ratio: mean_std(&col(|r| r.anomaly_ratio)),
            prep_size: mean_std(&col(|r| r.prep_size as f64)).0,
            samples: mean_std(&col(|r| r.samples as f64)).0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# digest={}\n{RESULTS_HEADER}\n", self.digest);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},,,,",
                r.seed,
                r.variant.name(),
                r.asr,
                r.s1,
                r.s2,
                r.accuracy,
                r.f1,
                r.anomaly_ratio,
                r.prep_size,
                r.samples
            );
        }
        let a = self.aggregate();
        let variant = self.rows.first().map_or("", |r| r.variant.name());
        let _ = writeln!(
            out,
            "AGGREGATE,{variant},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.asr.0, a.s1, a.s2, a.accuracy.0, a.f1.0, a.anomaly_ratio.0, a.prep_size, a.samples, a.asr.1, a.accuracy.1, a.f1.1, a.anomaly_ratio.1
        );
        out
    }

    /// Parses a results file written by [`ResultsRecord::to_csv`]. The AGGREGATE row is
    /// checked against the per-seed rows.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut digest = String::new();
        let mut rows = Vec::new();
        let mut aggregate_line = None;
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if let Some(d) = line.strip_prefix("# digest=") {
                digest = d.to_string();
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != RESULTS_HEADER {
                    return Err(bad(ln, "unexpected results header"));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(bad(ln, format!("expected 14 fields, found {}", f.len())));
            }
            if f[0] == "AGGREGATE" {
                aggregate_line = Some((ln, f.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
                continue;
            }
            let num = |j: usize| -> Result<f64> { parse_value(RESULTS_HEADER.split(',').nth(j).unwrap_or("?"), f[j], ln) };
            rows.push(SeedRow {
                seed: parse_value("seed", f[0], ln)?,
                variant: parse_value("variant", f[1], ln)?,
                asr: num(2)?,
                s1: num(3)?,
                s2: num(4)?,
                accuracy: num(5)?,
                f1: num(6)?,
                anomaly_ratio: num(7)?,
                prep_size: parse_value("prep_size", f[8], ln)?,
                samples: parse_value("samples", f[9], ln)?,
            });
        }
        let record = ResultsRecord { digest, rows };
        let (ln, agg) = aggregate_line.ok_or_else(|| Error::config("results file has no AGGREGATE row"))?;
        let expected = record.to_csv();
        let expected_agg = expected.lines().last().unwrap_or("");
        if agg.join(",") != expected_agg {
            return Err(bad(ln, "AGGREGATE row does not match the per-seed rows"));
        }
        Ok(record)
    }

    /// Human-readable aggregate table.
    pub fn pretty(&self) -> String {
        let a = self.aggregate();
        let mut out = String::new();
        let variant = self.rows.first().map_or("?", |r| r.variant.name());
        let _ = writeln!(out, "variant        {variant}");
        let _ = writeln!(out, "seeds          {}", self.rows.len());
        let _ = writeln!(out, "config digest  {}", self.digest);
        let _ = writeln!(out, "ASR            {:.4} ± {:.4}", a.asr.0, a.asr.1);
        let _ = writeln!(out, "  s1 / s2      {:.4} / {:.4}", a.s1, a.s2);
        let _ = writeln!(out, "accuracy       {:.4} ± {:.4}", a.accuracy.0, a.accuracy.1);
        let _ = writeln!(out, "estimator F1   {:.4} ± {:.4}", a.f1.0, a.f1.1);
        let _ = writeln!(out, "anomaly ratio  {:.4} ± {:.4}", a.anomaly_ratio.0, a.anomaly_ratio.1);
        let _ = writeln!(out, "|Q*| (mean)    {:.1} of {:.0}", a.prep_size, a.samples);
        out
    }
}

/// Runs the configured variant on every seed. Seeds run in parallel; rows come back in
/// seed-list order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsRecord> {
    cfg.validate()?;
    let rows = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = prepare_seed(cfg, seed)?;
            run_on_context(cfg, &ctx, cfg.variant, &cfg.defense).map(|r| r.row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultsRecord { digest: cfg.digest(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_counting() {
        let mut p = vec![PredictionLabel::Class(0); 3];
        p.extend([PredictionLabel::Reject; 2]);
        p.extend([PredictionLabel::Class(1); 5]);
        assert_eq!(compute_asr(&p, 0).unwrap(), 0.3);
        assert_eq!(compute_asr(&[PredictionLabel::Class(2)], 2).unwrap(), 1.0);
        assert_eq!(compute_asr(&[PredictionLabel::Reject], 0).unwrap(), 0.0);
        assert!(compute_asr(&[], 0).is_err());
    }

    #[test]
    fn f1_hand_computed() {
        // TP=2, FP=1, FN=1, TN=6
        let flags = [true, true, true, false, false, false, false, false, false, false];
        let truth = [true, true, false, true, false, false, false, false, false, false];
        assert!((detector_f1(&flags, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(detector_f1(&truth, &truth).unwrap(), 1.0);
        assert_eq!(detector_f1(&[false; 10], &truth).unwrap(), 0.0);
        assert_eq!(detector_f1(&[false; 3], &[false; 3]).unwrap(), 0.0);
    }

    #[test]
    fn config_round_trips_through_render() {
        let text = "dataset.kind=synthetic\nattack.eta=5\ndefense.kind=compressed\ndefense.ratio=0.1\nexperiment.seeds=3,4\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.attack.eta, 5);
        assert_eq!(cfg.seeds, vec![3, 4]);
        let again = parse_config(&cfg.render()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        assert!(matches!(parse_config("attack.eta=5\n"), Err(Error::InvalidConfig(_))));
        match parse_config("dataset.kind=synthetic\n\nattack.eta=five\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_config("dataset.kind=synthetic\nbogus.key=1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn results_csv_round_trip() {
        let row = |seed, asr| SeedRow {
            seed,
            variant: Variant::Vtarbel,
            asr,
            s1: 0.25,
            s2: 0.5,
            accuracy: 0.9,
            f1: f64::NAN,
            anomaly_ratio: 0.05,
            prep_size: 40,
            samples: 100,
        };
        let rec = ResultsRecord {
            digest: "abc".into(),
            rows: vec![row(0, 0.5), row(1, 0.7)],
        };
        let text = rec.to_csv();
        let back = ResultsRecord::from_csv(&text).unwrap();
        assert_eq!(back.to_csv(), text);
        assert!((back.aggregate().asr.0 - 0.6).abs() < 1e-12);
        let tampered = text.replace("AGGREGATE,vtarbel,0.6", "AGGREGATE,vtarbel,0.7");
        assert!(ResultsRecord::from_csv(&tampered).is_err());
    }
}
