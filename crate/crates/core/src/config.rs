//! Declarative run configuration (TOML), validation, and construction of the
//! datasets, device pool and training settings a run needs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{partition as plan_blocks, ModelLayout};
use crate::data::{self, DataError, Dataset, GaussianMixture, PartitionMode, PartitionSpec};
use crate::distill::DistillConfig;
use crate::federation::{derive_seed, DevicePool, FederationError};
use crate::freeze::FreezePolicy;
use crate::memory::{self, DeviceBudget};
use crate::metrics::Mode;
use crate::nn::SgdConfig;
use crate::pipeline::{step_estimates, TrainSettings};

const CENTER_STREAM: u64 = 0x10;
const TRAIN_STREAM: u64 = 0x11;
const TEST_STREAM: u64 = 0x12;
const SHARD_STREAM: u64 = 0x13;
const BUDGET_STREAM: u64 = 0x14;

pub const BYTES_PER_MB: f64 = 1_000_000.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    /// Isotropic Gaussian classes; train and test share the class centers.
    Gaussian {
        classes: usize,
        dims: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
// unknown-field checking does not combine with the flattened source
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    pub partition: PartitionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Gaussian {
                classes: 4,
                dims: 16,
                train_per_class: 1000,
                test_per_class: 250,
                spread: 1.0,
            },
            partition: PartitionMode::Dirichlet { alpha: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64, 64, 32, 32, 32, 32],
            blocks: 4,
        }
    }
}

/// How per-device memory capacities are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BudgetSpec {
    /// Uniform in `[min, max] ×` the end-to-end training estimate.
    Relative { min: f64, max: f64 },
    /// Uniform in `[min, max]` bytes.
    Bytes { min: u64, max: u64 },
    /// Uniform in `[min, max]` megabytes.
    Megabytes { min: f64, max: f64 },
    /// One capacity in bytes per device.
    Explicit { bytes: Vec<u64> },
}

impl Default for BudgetSpec {
    fn default() -> Self {
        BudgetSpec::Relative { min: 0.15, max: 1.35 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub devices: usize,
    pub clients_per_round: usize,
    pub budget: BudgetSpec,
    pub cache_frozen: bool,
    pub shrinking: bool,
    pub train_basic_layers: bool,
    pub round_cap: usize,
    pub baseline_rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            devices: 100,
            clients_per_round: 20,
            budget: BudgetSpec::default(),
            cache_frozen: false,
            shrinking: true,
            train_basic_layers: false,
            round_cap: 300,
            baseline_rounds: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for SgdSection {
    fn default() -> Self {
        let d = SgdConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            local_epochs: d.local_epochs,
        }
    }
}

impl From<SgdSection> for SgdConfig {
    fn from(s: SgdSection) -> Self {
        SgdConfig {
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            local_epochs: s.local_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::Profl,
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub sgd: SgdSection,
    pub freeze: FreezePolicy,
    pub distill: DistillConfig,
}

/// Findings of [`RunConfig::validate`]. Errors make the config unusable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }
}

/// Everything a run needs, built from a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub layout: ModelLayout,
    pub train: Dataset,
    pub test: Dataset,
    pub pool: DevicePool,
    pub settings: TrainSettings,
    pub mode: Mode,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Input width and class count as far as they are known without
    /// reading files.
    fn shape_hint(&self) -> Option<(usize, usize)> {
        match &self.data.source {
            DataSource::Gaussian { classes, dims, .. } => Some((*dims, *classes)),
            DataSource::Idx { .. } => None,
        }
    }

    pub fn layout_with(&self, input_dim: usize, classes: usize) -> ModelLayout {
        ModelLayout {
            input_dim,
            hidden: self.model.hidden.clone(),
            classes,
        }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            blocks: self.model.blocks,
            sgd: self.sgd.into(),
            freeze: self.freeze,
            distill: self.distill,
            clients_per_round: self.federation.clients_per_round,
            cache_frozen: self.federation.cache_frozen,
            round_cap: self.federation.round_cap,
            baseline_rounds: self.federation.baseline_rounds,
            shrinking: self.federation.shrinking,
            train_basic_layers: self.federation.train_basic_layers,
            seed: self.run.seed,
            threads: self.run.threads,
        }
    }

    pub fn validate(&self) -> Report {
        let mut r = Report::default();
        let err = |r: &mut Report, m: String| r.errors.push(m);
        let m = &self.model;
        if m.hidden.is_empty() || m.hidden.contains(&0) {
            err(&mut r, "model.hidden: need at least one layer, all widths ≥ 1".into());
        }
        if m.blocks < 2 {
            err(&mut r, format!("model.blocks: {} < 2", m.blocks));
        } else if m.blocks > m.hidden.len() {
            err(&mut r, format!("model.blocks: {} blocks but only {} hidden layers", m.blocks, m.hidden.len()));
        }
        if let DataSource::Gaussian {
            classes,
            dims,
            train_per_class,
            test_per_class,
            spread,
        } = &self.data.source
        {
            if *classes < 2 {
                err(&mut r, "data.classes: need at least 2".into());
            }
            if *dims == 0 {
                err(&mut r, "data.dims: must be ≥ 1".into());
            }
            if *train_per_class == 0 || *test_per_class == 0 {
                err(&mut r, "data.train_per_class / test_per_class: must be ≥ 1".into());
            }
            if !(*spread >= 0.0) {
                err(&mut r, "data.spread: must be ≥ 0".into());
            }
            if classes * train_per_class < self.federation.devices {
                err(&mut r, "federation.devices: more devices than training samples".into());
            }
        }
        if let PartitionMode::Dirichlet { alpha } = self.data.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                err(&mut r, format!("data.partition.alpha: {alpha} must be positive"));
            }
        }
        let f = &self.federation;
        if f.devices == 0 {
            err(&mut r, "federation.devices: must be ≥ 1".into());
        }
        if f.clients_per_round == 0 {
            err(&mut r, "federation.clients_per_round: must be ≥ 1".into());
        }
        if f.round_cap == 0 {
            err(&mut r, "federation.round_cap: must be ≥ 1".into());
        }
        match &f.budget {
            BudgetSpec::Relative { min, max } | BudgetSpec::Megabytes { min, max } => {
                if !(*min > 0.0 && min <= max && max.is_finite()) {
                    err(&mut r, format!("federation.budget: need 0 < min ≤ max, got [{min}, {max}]"));
                }
            }
            BudgetSpec::Bytes { min, max } => {
                if *min == 0 || min > max {
                    err(&mut r, format!("federation.budget: need 0 < min ≤ max, got [{min}, {max}]"));
                }
            }
            BudgetSpec::Explicit { bytes } => {
                if bytes.len() != f.devices {
                    err(&mut r, format!("federation.budget: {} capacities for {} devices", bytes.len(), f.devices));
                }
                if bytes.contains(&0) {
                    err(&mut r, "federation.budget: capacities must be positive".into());
                }
            }
        }
        let s = &self.sgd;
        if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
            err(&mut r, format!("sgd.learning_rate: {} must be positive", s.learning_rate));
        }
        if s.batch_size == 0 {
            err(&mut r, "sgd.batch_size: must be ≥ 1".into());
        }
        let p = &self.freeze;
        if p.window == 0 {
            err(&mut r, "freeze.window: must be ≥ 1".into());
        }
        if !(p.slope_fraction > 0.0 && p.slope_fraction < 1.0) {
            err(&mut r, format!("freeze.slope_fraction: {} outside (0, 1)", p.slope_fraction));
        }
        if p.consecutive == 0 {
            err(&mut r, "freeze.consecutive: must be ≥ 1".into());
        }
        if p.trailing.is_some_and(|n| n < 2) {
            err(&mut r, "freeze.trailing: a slope needs at least 2 points".into());
        }
        if !(10..=20).contains(&p.window) {
            r.warnings.push(format!("freeze.window {} outside the usual 10..=20", p.window));
        }
        if !(0.10..=0.20).contains(&p.slope_fraction) {
            r.warnings.push(format!("freeze.slope_fraction {} outside the usual 0.10..=0.20", p.slope_fraction));
        }
        if !(20..=40).contains(&p.consecutive) {
            r.warnings.push(format!("freeze.consecutive {} outside the usual 20..=40", p.consecutive));
        }
        if p.min_rounds <= p.window {
            r.warnings.push(format!(
                "freeze.min_rounds {} ≤ window {}: the first slopes rest on very few points",
                p.min_rounds, p.window
            ));
        }
        let d = &self.distill;
        if !(d.learning_rate > 0.0) || d.batch_size == 0 || d.clients_per_round == 0 {
            err(&mut r, "distill: learning_rate > 0, batch_size ≥ 1, clients_per_round ≥ 1 required".into());
        }
        if r.errors.is_empty() {
            if let Some((dims, classes)) = self.shape_hint() {
                self.feasibility(&self.layout_with(dims, classes), &mut r);
            }
        }
        r
    }

    /// Capacity bounds: `(smallest possible, largest possible)`.
    fn budget_bounds(&self, layout: &ModelLayout) -> (u64, u64) {
        let full = memory::estimate_full(layout, self.sgd.batch_size).bytes() as f64;
        match &self.federation.budget {
            BudgetSpec::Relative { min, max } => ((min * full).floor() as u64, (max * full).floor() as u64),
            BudgetSpec::Bytes { min, max } => (*min, *max),
            BudgetSpec::Megabytes { min, max } => ((min * BYTES_PER_MB) as u64, (max * BYTES_PER_MB) as u64),
            BudgetSpec::Explicit { bytes } => (
                bytes.iter().copied().min().unwrap_or(0),
                bytes.iter().copied().max().unwrap_or(0),
            ),
        }
    }

    fn feasibility(&self, layout: &ModelLayout, r: &mut Report) {
        let (_, hi) = self.budget_bounds(layout);
        let Ok(steps) = step_estimates(layout, &self.settings()) else {
            return;
        };
        for s in steps {
            if s.head_only.bytes() > hi {
                r.warnings.push(format!(
                    "{} step {}: no feasible participants (head-only needs {} B, largest budget {hi} B)",
                    s.stage.as_str(),
                    s.step,
                    s.head_only.bytes()
                ));
            } else if s.full.bytes() > hi {
                r.warnings.push(format!(
                    "{} step {}: empty eligibility, only head-only trainers ({} B needed, largest budget {hi} B)",
                    s.stage.as_str(),
                    s.step,
                    s.full.bytes()
                ));
            }
        }
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.run.seed, stream)
    }

    fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data.source {
            DataSource::Gaussian {
                classes,
                dims,
                train_per_class,
                test_per_class,
                spread,
            } => {
                let mix = GaussianMixture::new(*classes, *dims, *spread, self.seed(CENTER_STREAM))?;
                let train = mix.sample(*train_per_class, &mut ChaCha8Rng::seed_from_u64(self.seed(TRAIN_STREAM)));
                let test = mix.sample(*test_per_class, &mut ChaCha8Rng::seed_from_u64(self.seed(TEST_STREAM)));
                Ok((train, test))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => Ok((data::load_idx(train_images, train_labels)?, data::load_idx(test_images, test_labels)?)),
        }
    }

    pub fn draw_budgets(&self, layout: &ModelLayout) -> Vec<DeviceBudget> {
        let n = self.federation.devices;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(BUDGET_STREAM));
        let full = memory::estimate_full(layout, self.sgd.batch_size).bytes() as f64;
        let bytes: Vec<u64> = match &self.federation.budget {
            BudgetSpec::Explicit { bytes } => bytes.clone(),
            BudgetSpec::Bytes { min, max } => (0..n).map(|_| rng.random_range(*min..=*max)).collect(),
            BudgetSpec::Relative { min, max } => (0..n)
                .map(|_| (full * uniform(&mut rng, *min, *max)).floor() as u64)
                .collect(),
            BudgetSpec::Megabytes { min, max } => (0..n)
                .map(|_| (BYTES_PER_MB * uniform(&mut rng, *min, *max)).floor() as u64)
                .collect(),
        };
        bytes.into_iter().map(|capacity_bytes| DeviceBudget { capacity_bytes }).collect()
    }

    /// Validates, then builds data, shards, budgets and settings.
    pub fn prepare(&self) -> Result<Experiment> {
        let report = self.validate();
        if !report.errors.is_empty() {
            return Err(ConfigError::Invalid(report.errors));
        }
        let (train, test) = self.load_data()?;
        if train.dims() != test.dims() || train.classes != test.classes {
            return Err(ConfigError::Invalid(vec!["data: train and test sets disagree on shape".into()]));
        }
        let layout = self.layout_with(train.dims(), train.classes);
        if let Err(e) = plan_blocks(&layout, self.model.blocks) {
            return Err(ConfigError::Invalid(vec![format!("model.blocks: {e}")]));
        }
        let shards = data::partition(
            &train,
            &PartitionSpec {
                mode: self.data.partition,
                shards: self.federation.devices,
                seed: self.seed(SHARD_STREAM),
            },
        )?;
        let budgets = self.draw_budgets(&layout);
        let pool = DevicePool::new(&train, &shards, &budgets)?;
        Ok(Experiment {
            layout,
            train,
            test,
            pool,
            settings: self.settings(),
            mode: self.run.mode,
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_clean() {
        let r = RunConfig::default().validate();
        assert!(r.is_clean(), "{r:?}");
    }

    #[test]
    fn defaults_survive_a_toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn partial_file_overrides_only_what_it_names() {
        let c = RunConfig::from_toml(
            "[run]\nmode = \"oracle\"\nseed = 7\n[federation]\ndevices = 10\n[federation.budget]\nkind = \"bytes\"\nmin = 10\nmax = 20\n[data]\nsource = \"gaussian\"\nclasses = 3\ndims = 4\ntrain_per_class = 10\ntest_per_class = 5\nspread = 0.5\n[data.partition]\nmode = \"iid\"\n",
        )
        .unwrap();
        assert_eq!(c.run.mode, Mode::Oracle);
        assert_eq!(c.run.seed, 7);
        assert_eq!(c.federation.devices, 10);
        assert_eq!(c.federation.clients_per_round, 20);
        assert_eq!(c.data.partition, PartitionMode::Iid);
        assert_eq!(c.federation.budget, BudgetSpec::Bytes { min: 10, max: 20 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[sgd]\nlearning_rat = 0.1\n").is_err());
    }

    #[test]
    fn too_many_blocks_is_an_error() {
        let mut c = RunConfig::default();
        c.model.blocks = c.model.hidden.len() + 1;
        let r = c.validate();
        assert!(r.errors.iter().any(|e| e.starts_with("model.blocks")), "{r:?}");
    }

    #[test]
    fn tiny_budgets_warn_about_participants() {
        let mut c = RunConfig::default();
        c.federation.budget = BudgetSpec::Bytes { min: 1, max: 2 };
        let r = c.validate();
        assert!(r.errors.is_empty());
        assert!(r.warnings.iter().any(|w| w.contains("no feasible participants")), "{r:?}");
    }

    #[test]
    fn prepare_builds_a_consistent_experiment() {
        let mut c = RunConfig::default();
        c.federation.devices = 20;
        let e = c.prepare().unwrap();
        assert_eq!(e.pool.len(), 20);
        assert_eq!(e.pool.total_samples(), e.train.len());
        let full = memory::estimate_full(&e.layout, 32).bytes() as f64;
        for b in e.pool.budgets() {
            let f = b.capacity_bytes as f64 / full;
            assert!((0.149..=1.35).contains(&f));
        }
        let again = c.prepare().unwrap();
        assert_eq!(again.pool.budgets(), e.pool.budgets());
        assert_eq!(again.train, e.train);
    }
}
