//! Experiment plumbing: configuration, orchestration and artifact files.
//!
//! Configs are flat `key = value` text. Keys carry a block prefix
//! (`distribution.q`, `train.eta`, ...), `#` starts a comment, and every key
//! has a default so an empty file is the calibrated desk experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

use crate::analysis::{cosine_sim, patch_association_score, residual_norm, test_accuracy};
use crate::constructions::{
    downstream_feature, linear_baseline_error, linear_error_exact, sample_complexity_sweep, spurious_transformer, Arm,
    DownstreamFeature, SweepConfig, SweepResult,
};
use crate::distribution::{
    label_consistency, label_consistency_exact, make_localized_partition, make_random_partition, sample_feature,
    Dataset, DistributionSpec, Partition,
};
use crate::error::{Error, Result};
use crate::idealized::{init_scalar_state, run_scalar, DynHyper, ScalarRun};
use crate::linalg::Matrix;
use crate::model::{finite_diff_check, ModelParams};
use crate::rng::{purpose, Streams, RNG_IDENTITY};
use crate::trainer::{init_params, train_from, EvalSet, ModelHyper, RunRecord, TrainConfig, TrainMode, TrainOutcome};

pub const VERSION: &str = concat!("patchassoc ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    /// Rectangular blocks of a patch grid.
    Localized,
    /// A uniformly random equal-size partition.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionBlock {
    pub d: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    pub partition: PartitionKind,
    /// Optional file of 1-based set ids, one per patch; overrides `partition`.
    pub partition_file: Option<PathBuf>,
    pub q: f64,
    /// `None` means `1/d`.
    pub sigma2: Option<f64>,
    pub threshold_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelBlock {
    pub p: u32,
    pub nu: f64,
    pub tau: f64,
    pub sigma_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainBlock {
    pub eta: f64,
    pub steps: usize,
    pub omega: f64,
    pub n: usize,
    pub eval_every: usize,
    pub test_samples: usize,
    /// Write a params checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferBlock {
    pub sizes: Vec<usize>,
    pub seeds: usize,
    pub feature: DownstreamFeature,
    pub test_samples: usize,
    pub scratch_etas: Vec<f64>,
    pub scratch_steps: usize,
    pub linear_eta: f64,
    pub linear_steps: usize,
    /// Params file to transfer from; when unset the `train` block runs first.
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdealizedBlock {
    pub eta: f64,
    pub steps: usize,
    pub record_every: usize,
    pub alpha_event_const: f64,
    pub gamma_event_const: f64,
    pub c_gamma: f64,
    pub c_alpha: f64,
    pub c_rho: f64,
    /// `None` means `D^0.01`.
    pub lambda0: Option<f64>,
    /// `None` means `ln D`.
    pub polylog: Option<f64>,
    /// Diagonal of the idealized attention; independent of `model.sigma_a`
    /// because the scalar process has no temperature.
    pub sigma_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckBlock {
    pub baseline_samples: usize,
    pub consistency_samples: usize,
    /// `None` means `5 tau`.
    pub spurious_beta: Option<f64>,
    pub spurious_samples: usize,
    pub gradcheck_instances: usize,
    pub gradcheck_h: f64,
}

/// Fully resolved experiment description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub distribution: DistributionBlock,
    pub model: ModelBlock,
    pub train: TrainBlock,
    pub transfer: TransferBlock,
    pub idealized: IdealizedBlock,
    pub check: CheckBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            distribution: DistributionBlock {
                d: 128,
                grid_rows: 8,
                grid_cols: 12,
                block_rows: 2,
                block_cols: 3,
                partition: PartitionKind::Localized,
                partition_file: None,
                q: 0.3,
                sigma2: None,
                threshold_frac: 0.9,
            },
            model: ModelBlock {
                p: 3,
                nu: 0.01,
                tau: 2e-4,
                sigma_a: 6e-4,
            },
            train: TrainBlock {
                eta: 5e-5,
                steps: 150,
                omega: 1e-6,
                n: 8192,
                eval_every: 10,
                test_samples: 4000,
                checkpoint_every: 0,
            },
            transfer: TransferBlock {
                sizes: vec![8, 16, 32, 64, 128],
                seeds: 10,
                feature: DownstreamFeature::Orthogonal,
                test_samples: 2000,
                scratch_etas: vec![5e-5, 5e-4],
                scratch_steps: 150,
                linear_eta: 1.0,
                linear_steps: 300,
                pretrained: None,
            },
            idealized: IdealizedBlock {
                eta: 1e-5,
                steps: 1_000_000,
                record_every: 1000,
                alpha_event_const: 8.0,
                gamma_event_const: 12.0,
                c_gamma: 1.0,
                c_alpha: 1.0,
                c_rho: 1.0,
                lambda0: None,
                polylog: None,
                sigma_a: (128f64).ln().ln(),
            },
            check: CheckBlock {
                baseline_samples: 100_000,
                consistency_samples: 1_000_000,
                spurious_beta: None,
                spurious_samples: 10_000,
                gradcheck_instances: 20,
                gradcheck_h: 1e-5,
            },
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Option<T>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_val(key, value).map(Some)
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    value.split(',').map(|s| parse_val(key, s.trim())).collect()
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: idx + 1,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line: idx + 1, msg })?;
        }
        cfg.check().map_err(|msg| Error::Config { line: 0, msg })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides; diagnostics report line 0.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override '{item}' is not key=value"),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config { line: 0, msg })?;
        }
        self.check().map_err(|msg| Error::Config { line: 0, msg })
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let d = &mut self.distribution;
        let m = &mut self.model;
        let t = &mut self.train;
        let x = &mut self.transfer;
        let i = &mut self.idealized;
        let c = &mut self.check;
        match key {
            "seed" => self.seed = parse_val(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "distribution.d" => d.d = parse_val(key, v)?,
            "distribution.grid_rows" => d.grid_rows = parse_val(key, v)?,
            "distribution.grid_cols" => d.grid_cols = parse_val(key, v)?,
            "distribution.block_rows" => d.block_rows = parse_val(key, v)?,
            "distribution.block_cols" => d.block_cols = parse_val(key, v)?,
            "distribution.partition" => {
                d.partition = match v {
                    "localized" => PartitionKind::Localized,
                    "random" => PartitionKind::Random,
                    _ => return Err(format!("{key}: expected localized or random, found '{v}'")),
                }
            }
            "distribution.partition_file" => d.partition_file = (v != "none").then(|| PathBuf::from(v)),
            "distribution.q" => d.q = parse_val(key, v)?,
            "distribution.sigma2" => d.sigma2 = parse_opt(key, v)?,
            "distribution.threshold_frac" => d.threshold_frac = parse_val(key, v)?,
            "model.p" => m.p = parse_val(key, v)?,
            "model.nu" => m.nu = parse_val(key, v)?,
            "model.tau" => m.tau = parse_val(key, v)?,
            "model.sigma_a" => m.sigma_a = parse_val(key, v)?,
            "train.eta" => t.eta = parse_val(key, v)?,
            "train.steps" => t.steps = parse_val(key, v)?,
            "train.omega" => t.omega = parse_val(key, v)?,
            "train.n" => t.n = parse_val(key, v)?,
            "train.eval_every" => t.eval_every = parse_val(key, v)?,
            "train.test_samples" => t.test_samples = parse_val(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_val(key, v)?,
            "transfer.sizes" => x.sizes = parse_list(key, v)?,
            "transfer.seeds" => x.seeds = parse_val(key, v)?,
            "transfer.feature" => x.feature = v.parse().map_err(|e: Error| format!("{key}: {e}"))?,
            "transfer.test_samples" => x.test_samples = parse_val(key, v)?,
            "transfer.scratch_etas" => x.scratch_etas = parse_list(key, v)?,
            "transfer.scratch_steps" => x.scratch_steps = parse_val(key, v)?,
            "transfer.linear_eta" => x.linear_eta = parse_val(key, v)?,
            "transfer.linear_steps" => x.linear_steps = parse_val(key, v)?,
            "transfer.pretrained" => x.pretrained = (v != "none").then(|| PathBuf::from(v)),
            "idealized.eta" => i.eta = parse_val(key, v)?,
            "idealized.steps" => i.steps = parse_val(key, v)?,
            "idealized.record_every" => i.record_every = parse_val(key, v)?,
            "idealized.alpha_event_const" => i.alpha_event_const = parse_val(key, v)?,
            "idealized.gamma_event_const" => i.gamma_event_const = parse_val(key, v)?,
            "idealized.c_gamma" => i.c_gamma = parse_val(key, v)?,
            "idealized.c_alpha" => i.c_alpha = parse_val(key, v)?,
            "idealized.c_rho" => i.c_rho = parse_val(key, v)?,
            "idealized.lambda0" => i.lambda0 = parse_opt(key, v)?,
            "idealized.polylog" => i.polylog = parse_opt(key, v)?,
            "idealized.sigma_a" => i.sigma_a = parse_val(key, v)?,
            "check.baseline_samples" => c.baseline_samples = parse_val(key, v)?,
            "check.consistency_samples" => c.consistency_samples = parse_val(key, v)?,
            "check.spurious_beta" => c.spurious_beta = parse_opt(key, v)?,
            "check.spurious_samples" => c.spurious_samples = parse_val(key, v)?,
            "check.gradcheck_instances" => c.gradcheck_instances = parse_val(key, v)?,
            "check.gradcheck_h" => c.gradcheck_h = parse_val(key, v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every key with its resolved textual value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.distribution;
        let m = &self.model;
        let t = &self.train;
        let x = &self.transfer;
        let i = &self.idealized;
        let c = &self.check;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("distribution.d", d.d.to_string()),
            ("distribution.grid_rows", d.grid_rows.to_string()),
            ("distribution.grid_cols", d.grid_cols.to_string()),
            ("distribution.block_rows", d.block_rows.to_string()),
            ("distribution.block_cols", d.block_cols.to_string()),
            (
                "distribution.partition",
                match d.partition {
                    PartitionKind::Localized => "localized".into(),
                    PartitionKind::Random => "random".into(),
                },
            ),
            ("distribution.partition_file", path(&d.partition_file)),
            ("distribution.q", d.q.to_string()),
            ("distribution.sigma2", self.sigma2().to_string()),
            ("distribution.threshold_frac", d.threshold_frac.to_string()),
            ("model.p", m.p.to_string()),
            ("model.nu", m.nu.to_string()),
            ("model.tau", m.tau.to_string()),
            ("model.sigma_a", m.sigma_a.to_string()),
            ("train.eta", t.eta.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.omega", t.omega.to_string()),
            ("train.n", t.n.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.test_samples", t.test_samples.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("transfer.sizes", fmt_list(&x.sizes)),
            ("transfer.seeds", x.seeds.to_string()),
            (
                "transfer.feature",
                match x.feature {
                    DownstreamFeature::Fresh => "fresh".into(),
                    DownstreamFeature::Orthogonal => "orthogonal".into(),
                },
            ),
            ("transfer.test_samples", x.test_samples.to_string()),
            ("transfer.scratch_etas", fmt_list(&x.scratch_etas)),
            ("transfer.scratch_steps", x.scratch_steps.to_string()),
            ("transfer.linear_eta", x.linear_eta.to_string()),
            ("transfer.linear_steps", x.linear_steps.to_string()),
            ("transfer.pretrained", path(&x.pretrained)),
            ("idealized.eta", i.eta.to_string()),
            ("idealized.steps", i.steps.to_string()),
            ("idealized.record_every", i.record_every.to_string()),
            ("idealized.alpha_event_const", i.alpha_event_const.to_string()),
            ("idealized.gamma_event_const", i.gamma_event_const.to_string()),
            ("idealized.c_gamma", i.c_gamma.to_string()),
            ("idealized.c_alpha", i.c_alpha.to_string()),
            ("idealized.c_rho", i.c_rho.to_string()),
            ("idealized.lambda0", fmt_opt(&i.lambda0)),
            ("idealized.polylog", fmt_opt(&i.polylog)),
            ("idealized.sigma_a", i.sigma_a.to_string()),
            ("check.baseline_samples", c.baseline_samples.to_string()),
            ("check.consistency_samples", c.consistency_samples.to_string()),
            ("check.spurious_beta", self.spurious_beta().to_string()),
            ("check.spurious_samples", c.spurious_samples.to_string()),
            ("check.gradcheck_instances", c.gradcheck_instances.to_string()),
            ("check.gradcheck_h", c.gradcheck_h.to_string()),
        ]
    }

    /// The resolved config in the same `key = value` format it is read from.
    pub fn render(&self) -> String {
        let mut s = format!("# {VERSION}, resolved configuration\n");
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").ok();
        }
        s
    }

    fn check(&self) -> std::result::Result<(), String> {
        let d = &self.distribution;
        if d.d == 0 || d.grid_rows == 0 || d.grid_cols == 0 || d.block_rows == 0 || d.block_cols == 0 {
            return Err("distribution sizes must be positive".into());
        }
        if self.model.tau <= 0.0 {
            return Err("model.tau must be positive".into());
        }
        if self.train.eval_every == 0 {
            return Err("train.eval_every must be at least 1".into());
        }
        if self.transfer.scratch_etas.is_empty() {
            return Err("transfer.scratch_etas is empty".into());
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        self.distribution.sigma2.unwrap_or(1.0 / self.distribution.d as f64)
    }

    pub fn spurious_beta(&self) -> f64 {
        self.check.spurious_beta.unwrap_or(5.0 * self.model.tau)
    }

    pub fn num_patches(&self) -> usize {
        self.distribution.grid_rows * self.distribution.grid_cols
    }

    pub fn set_size(&self) -> usize {
        self.distribution.block_rows * self.distribution.block_cols
    }

    pub fn model_hyper(&self) -> ModelHyper {
        ModelHyper {
            p: self.model.p,
            nu: self.model.nu,
            tau: self.model.tau,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta: self.train.eta,
            steps: self.train.steps,
            omega: self.train.omega,
            sigma_a: self.model.sigma_a,
            seed: self.seed,
            eval_every: self.train.eval_every,
            mode: TrainMode::Realistic,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            sample_sizes: self.transfer.sizes.clone(),
            seeds: self.transfer.seeds,
            test_samples: self.transfer.test_samples,
            scratch_etas: self.transfer.scratch_etas.clone(),
            scratch_steps: self.transfer.scratch_steps,
            scratch_omega: self.train.omega,
            linear_eta: self.transfer.linear_eta,
            linear_steps: self.transfer.linear_steps,
        }
    }

    pub fn dyn_hyper(&self) -> DynHyper {
        let i = &self.idealized;
        let mut h = DynHyper::new(i.eta, self.set_size(), self.num_patches(), self.model.p);
        h.alpha_event_const = i.alpha_event_const;
        h.gamma_event_const = i.gamma_event_const;
        h.c_gamma = i.c_gamma;
        h.c_alpha = i.c_alpha;
        h.c_rho = i.c_rho;
        if let Some(l) = i.lambda0 {
            h.lambda0 = l;
        }
        if let Some(p) = i.polylog {
            h.polylog = p;
        }
        h
    }

    pub fn streams(&self) -> Streams {
        Streams::new(self.seed)
    }

    /// Partition and population spec from the `distribution` block.
    pub fn problem(&self) -> Result<(Partition, DistributionSpec)> {
        let d = &self.distribution;
        let streams = self.streams();
        let partition = if let Some(path) = &d.partition_file {
            let text = fs::read_to_string(path)?;
            let ids: Vec<usize> = text
                .split_whitespace()
                .map(|t| match t.parse::<usize>() {
                    Ok(k) if k >= 1 => Ok(k - 1),
                    _ => Err(Error::Parse(format!("{}: bad set id '{t}'", path.display()))),
                })
                .collect::<Result<_>>()?;
            Partition::from_membership(&ids)?
        } else {
            match d.partition {
                PartitionKind::Localized => {
                    make_localized_partition(d.grid_rows, d.grid_cols, d.block_rows, d.block_cols)?
                }
                PartitionKind::Random => make_random_partition(
                    self.num_patches(),
                    self.set_size(),
                    &mut streams.stream(purpose::PARTITION, 0),
                )?,
            }
        };
        let w = sample_feature(d.d, &mut streams.stream(purpose::FEATURE, 0))?;
        let spec = DistributionSpec::new(d.d, &partition, d.q, self.sigma2(), d.threshold_frac, w)?;
        Ok((partition, spec))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    GenerateData,
    Train,
    Idealized,
    Transfer,
    Sweep,
    Baseline,
    Spurious,
    Gradcheck,
}

/// What a run produced, for the exit code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunStatus {
    /// Names of acceptance gates that failed.
    pub failed_gates: Vec<String>,
}

impl RunStatus {
    fn from_gates(gates: &[(&str, bool)]) -> Self {
        Self {
            failed_gates: gates.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.to_string()).collect(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failed_gates.is_empty()
    }
}

/// Writes the resolved config and run metadata, then dispatches.
pub fn run_experiment(cfg: &ExperimentConfig, cmd: Subcommand) -> Result<RunStatus> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.resolved"), cfg.render())?;
    let meta = json!({
        "version": VERSION,
        "rng": RNG_IDENTITY,
        "master_seed": cfg.seed,
        "stream_purposes": {
            "feature": purpose::FEATURE,
            "partition": purpose::PARTITION,
            "train_data": purpose::TRAIN_DATA,
            "test_data": purpose::TEST_DATA,
            "init": purpose::INIT,
            "downstream": purpose::DOWNSTREAM,
            "sweep": purpose::SWEEP,
            "eval": purpose::EVAL,
            "misc": purpose::MISC,
        },
    });
    write_json(&cfg.out.join("run.json"), &meta)?;
    match cmd {
        Subcommand::GenerateData => generate_data(cfg),
        Subcommand::Train => run_train(cfg).map(|(status, _)| status),
        Subcommand::Idealized => run_idealized(cfg),
        Subcommand::Transfer => run_transfer(cfg, false),
        Subcommand::Sweep => run_transfer(cfg, true),
        Subcommand::Baseline => run_baseline(cfg),
        Subcommand::Spurious => run_spurious(cfg),
        Subcommand::Gradcheck => run_gradcheck(cfg),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn generate_data(cfg: &ExperimentConfig) -> Result<RunStatus> {
    let (partition, spec) = cfg.problem()?;
    let streams = cfg.streams();
    let train = Dataset::sample(&spec, &partition, cfg.train.n, &streams, purpose::TRAIN_DATA)?;
    train.write_to(BufWriter::new(fs::File::create(cfg.out.join("train.dataset"))?))?;
    let test = Dataset::sample(&spec, &partition, cfg.train.test_samples, &streams, purpose::TEST_DATA)?;
    test.write_to(BufWriter::new(fs::File::create(cfg.out.join("test.dataset"))?))?;
    Ok(RunStatus::from_gates(&[]))
}

/// Acceptance gates applied to a finished realistic run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub patch_association_score: f64,
    pub test_accuracy: f64,
    pub cosine_sim: f64,
    pub residual_ratio: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub gamma_hat: f64,
    pub rho_hat: f64,
}

impl TrainSummary {
    pub fn gates(&self) -> [(&'static str, bool); 4] {
        [
            ("patch_association_score == 1", self.patch_association_score == 1.0),
            ("test_accuracy >= 0.95", self.test_accuracy >= 0.95),
            ("cosine_sim >= 0.99", self.cosine_sim >= 0.99),
            ("residual_ratio <= 0.05", self.residual_ratio <= 0.05),
        ]
    }
}

/// Trains on fresh data from the config and writes the training artifacts.
/// Returns the gate status together with the outcome.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(RunStatus, TrainOutcome)> {
    let started = Instant::now();
    let (partition, spec) = cfg.problem()?;
    let streams = cfg.streams();
    let train = Dataset::sample(&spec, &partition, cfg.train.n, &streams, purpose::TRAIN_DATA)?;
    let test = Dataset::sample(&spec, &partition, cfg.train.test_samples, &streams, purpose::TEST_DATA)?;
    let eval = EvalSet::from(test);
    let tc = cfg.train_config();
    let params = init_params(&tc, &cfg.model_hyper(), spec.d, spec.num_patches, &streams)?;

    let mut metrics = csv::Writer::from_path(cfg.out.join("metrics.csv")).map_err(csv_err)?;
    let mut write_err: Option<Error> = None;
    let every = cfg.train.checkpoint_every;
    let out = train_from(
        params,
        &tc,
        &train.points,
        &eval,
        |rec: &RunRecord, at: &ModelParams| {
            let mut result = metrics.serialize(rec).map_err(csv_err);
            if result.is_ok() && every > 0 && rec.step.is_multiple_of(every) {
                result = fs::File::create(cfg.out.join(format!("checkpoint_{:06}.txt", rec.step)))
                    .map_err(Error::from)
                    .and_then(|f| at.write_to(BufWriter::new(f)));
            }
            if let Err(e) = result {
                write_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    metrics.flush()?;
    drop(metrics);

    out.params
        .write_to(BufWriter::new(fs::File::create(cfg.out.join("params.txt"))?))?;
    write_matrix_csv(&out.params.a, &cfg.out.join("attention.csv"))?;
    export_heatmap(&out.params.a, &cfg.out.join("attention.pgm"))?;
    export_heatmap(&target_mask(&partition), &cfg.out.join("target_mask.pgm"))?;

    let summary = summarize(&out, &eval, &partition)?;
    let gates = summary.gates();
    let status = RunStatus::from_gates(&gates);
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "version": VERSION,
            "subcommand": "train",
            "summary": summary,
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
            "diverged": out.diverged.as_ref().map(|e| e.to_string()),
            "started_unix": unix_time() - started.elapsed().as_secs(),
            "elapsed_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    if let Some(Error::Divergence { step, reason }) = &out.diverged {
        return Err(Error::Divergence {
            step: *step,
            reason: reason.clone(),
        });
    }
    Ok((status, out))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

fn summarize(out: &TrainOutcome, eval: &EvalSet, partition: &Partition) -> Result<TrainSummary> {
    let params = &out.params;
    let w = &eval.spec.w_star;
    let report = patch_association_score(&params.a, partition)?;
    let vnorm = crate::linalg::norm(&params.v);
    let last = out.history.last();
    Ok(TrainSummary {
        patch_association_score: report.score,
        test_accuracy: last.map_or(0.0, |r| r.test_accuracy),
        cosine_sim: if vnorm > 0.0 { cosine_sim(&params.v, w)? } else { 0.0 },
        residual_ratio: if vnorm > 0.0 {
            residual_norm(&params.v, w) / vnorm
        } else {
            f64::INFINITY
        },
        final_loss: last.map_or(f64::NAN, |r| r.train_loss),
        steps: last.map_or(0, |r| r.step),
        gamma_hat: last.map_or(0.0, |r| r.gamma_hat),
        rho_hat: last.map_or(0.0, |r| r.rho_hat),
    })
}

/// 1 where two patches share a set (diagonal included), else 0.
pub fn target_mask(partition: &Partition) -> Matrix {
    let n = partition.num_patches();
    Matrix::from_fn(n, n, |i, j| if partition.same_set(i, j) { 1.0 } else { 0.0 })
}

pub fn write_matrix_csv(a: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    for i in 0..a.rows() {
        w.write_record(a.row(i).iter().map(|x| x.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar of a heatmap: the affine map from pixels back to values.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HeatmapMeta {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes an ASCII P2 image, min-max scaled to 0..=255, one raster row per
/// matrix row, and a `<path>.json` sidecar with the range.
pub fn export_heatmap(a: &Matrix, path: &Path) -> Result<()> {
    if !a.all_finite() {
        return Err(Error::NonFinite("heatmap input".into()));
    }
    let (lo, hi) = a.min_max();
    let constant = hi <= lo;
    let mut s = format!("P2\n{} {}\n255\n", a.cols(), a.rows());
    for i in 0..a.rows() {
        let row: Vec<String> = a
            .row(i)
            .iter()
            .map(|&x| {
                let px = if constant {
                    0.0
                } else {
                    ((x - lo) / (hi - lo) * 255.0).round()
                };
                (px as u8).to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    fs::write(path, s)?;
    let meta = HeatmapMeta {
        min: lo,
        max: hi,
        rows: a.rows(),
        cols: a.cols(),
        note: constant.then(|| "constant matrix; raster is all zero".to_string()),
    };
    write_json(&sidecar_path(path), &meta)
}

/// Parses a P2 file into raw pixel values.
pub fn read_pgm(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |m: &str| Error::Parse(format!("{}: {m}", path.display()));
    if tokens.next() != Some("P2") {
        return Err(bad("not a P2 image"));
    }
    let mut num = || -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("truncated or malformed"))
    };
    let (cols, rows, maxval) = (num()?, num()?, num()?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("bad maxval"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(num()? as f64);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Reconstructs matrix values from a heatmap and its sidecar.
pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    let raster = read_pgm(path)?;
    let meta: HeatmapMeta =
        serde_json::from_str(&fs::read_to_string(sidecar_path(path))?).map_err(|e| Error::Parse(e.to_string()))?;
    let span = meta.max - meta.min;
    Ok(Matrix::from_fn(raster.rows(), raster.cols(), |i, j| {
        meta.min + raster.get(i, j) / 255.0 * span
    }))
}

fn run_idealized(cfg: &ExperimentConfig) -> Result<RunStatus> {
    let run = idealized_run(cfg)?;
    let mut w = csv::Writer::from_path(cfg.out.join("trajectory.csv")).map_err(csv_err)?;
    for point in &run.trajectory {
        w.serialize(point).map_err(csv_err)?;
    }
    w.flush()?;
    let c = &run.checks;
    let ordered = matches!((run.events.t0, run.events.t1), (Some(a), Some(b)) if a < b);
    let gates = [
        ("T0 < T1", ordered),
        ("gamma non-decreasing", c.gamma_non_decreasing),
        ("gamma >= rho", c.gamma_dominates_rho),
        ("normalization within 1e-12", c.max_normalization_error <= 1e-12),
    ];
    write_json(
        &cfg.out.join("events.json"),
        &json!({
            "events": run.events,
            "checks": run.checks,
            "final_state": {
                "t": run.final_state.t,
                "alpha": run.final_state.alpha,
                "gamma": run.final_state.gamma,
                "rho": run.final_state.rho,
            },
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(RunStatus::from_gates(&gates))
}

pub fn idealized_run(cfg: &ExperimentConfig) -> Result<ScalarRun> {
    let init = init_scalar_state(cfg.model.p, cfg.model.nu, cfg.idealized.sigma_a)?;
    run_scalar(init, &cfg.dyn_hyper(), cfg.idealized.steps, cfg.idealized.record_every)
}

fn load_or_train(cfg: &ExperimentConfig) -> Result<ModelParams> {
    match &cfg.transfer.pretrained {
        Some(path) => ModelParams::read_from(std::io::BufReader::new(fs::File::open(path)?)),
        None => {
            let sub = ExperimentConfig {
                out: cfg.out.join("pretrain"),
                ..cfg.clone()
            };
            fs::create_dir_all(&sub.out)?;
            fs::write(sub.out.join("config.resolved"), sub.render())?;
            Ok(run_train(&sub)?.1.params)
        }
    }
}

fn run_transfer(cfg: &ExperimentConfig, all_arms: bool) -> Result<RunStatus> {
    let started = Instant::now();
    let pretrained = load_or_train(cfg)?;
    let (partition, spec) = cfg.problem()?;
    let streams = cfg.streams();
    let w_tilde = downstream_feature(
        &spec.w_star,
        cfg.transfer.feature,
        &mut streams.stream(purpose::DOWNSTREAM, 0),
    )?;
    let downstream = spec.with_feature(w_tilde)?;
    let mut sweep_cfg = cfg.sweep_config();
    if !all_arms {
        // transfer alone: no scratch or linear arms worth their cost
        sweep_cfg.scratch_steps = 0;
        sweep_cfg.linear_steps = 0;
    }
    let result = sample_complexity_sweep(
        &pretrained,
        &downstream,
        &partition,
        &sweep_cfg,
        &streams.child(purpose::DOWNSTREAM, 1),
    )?;
    let arms: &[Arm] = if all_arms {
        &[Arm::FrozenA, Arm::Scratch, Arm::Linear]
    } else {
        &[Arm::FrozenA]
    };
    write_sweep_csv(&result, arms, &cfg.out.join("sweep.csv"))?;
    let gates = sweep_gates(&result, all_arms);
    let per_arm: BTreeMap<&str, Vec<serde_json::Value>> = arms
        .iter()
        .map(|&arm| {
            let rows = result
                .sample_sizes
                .iter()
                .zip(result.arm_means(arm))
                .map(|(&n, mean)| json!({"n": n, "mean": mean, "std_err": result.std_err(arm, n)}))
                .collect();
            (arm.name(), rows)
        })
        .collect();
    write_json(
        &cfg.out.join("summary.json"),
        &json!({
            "version": VERSION,
            "subcommand": if all_arms { "sweep" } else { "transfer" },
            "feature": cfg.transfer.feature,
            "seeds": result.seeds,
            "arms": per_arm,
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
            "started_unix": unix_time() - started.elapsed().as_secs(),
            "elapsed_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(RunStatus::from_gates(&gates))
}

fn write_sweep_csv(result: &SweepResult, arms: &[Arm], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        n: usize,
        arm: &'a str,
        seed: usize,
        accuracy: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for cell in result.cells.iter().filter(|c| arms.contains(&c.arm)) {
        w.serialize(Row {
            n: cell.n,
            arm: cell.arm.name(),
            seed: cell.seed,
            accuracy: cell.accuracy,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Gates of the transfer experiment at the sizes present in the grid.
pub fn sweep_gates(result: &SweepResult, all_arms: bool) -> Vec<(&'static str, bool)> {
    let at = |arm: Arm, n: usize| {
        result
            .sample_sizes
            .iter()
            .position(|&m| m == n)
            .and_then(|k| result.arm_means(arm)[k])
    };
    let mut gates = Vec::new();
    if let Some(f) = at(Arm::FrozenA, 32) {
        gates.push(("frozen-A accuracy at N=32 >= 0.9", f >= 0.9));
    }
    if all_arms {
        if let Some(s) = at(Arm::Scratch, 32) {
            gates.push(("scratch accuracy at N=32 <= 0.75", s <= 0.75));
        }
        let dominates = result.sample_sizes.iter().filter(|&&n| n > 0 && n <= 64).all(|&n| {
            match (at(Arm::FrozenA, n), at(Arm::Scratch, n)) {
                (Some(f), Some(s)) => f >= s,
                _ => true,
            }
        });
        gates.push(("frozen-A >= scratch for N <= 64", dominates));
    }
    gates
}

fn run_baseline(cfg: &ExperimentConfig) -> Result<RunStatus> {
    let (partition, spec) = cfg.problem()?;
    let streams = cfg.streams();
    let est = linear_baseline_error(&spec, &partition, cfg.check.baseline_samples, &streams)?;
    let exact = linear_error_exact(spec.num_patches, spec.set_size, spec.q)?;
    let consistency = label_consistency(
        &spec,
        &partition,
        cfg.check.consistency_samples,
        &streams.child(purpose::MISC, 1),
    )?;
    let consistency_exact = label_consistency_exact(&spec)?;
    let gates = [
        ("linear error >= 0.125", est.error >= 0.125),
        (
            "linear error within 0.01 of exact tail",
            (est.error - exact).abs() <= 0.01,
        ),
        ("label consistency >= 0.999", consistency >= 0.999),
        ("exact label consistency >= 0.999", consistency_exact >= 0.999),
    ];
    write_json(
        &cfg.out.join("report.json"),
        &json!({
            "linear_error": est,
            "linear_error_exact": exact,
            "label_consistency": consistency,
            "label_consistency_samples": cfg.check.consistency_samples,
            "label_consistency_exact": consistency_exact,
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(RunStatus::from_gates(&gates))
}

fn run_spurious(cfg: &ExperimentConfig) -> Result<RunStatus> {
    let (partition, spec) = cfg.problem()?;
    let beta = cfg.spurious_beta();
    let params = spurious_transformer(&partition, beta, &spec.w_star, &cfg.model_hyper())?;
    let report = patch_association_score(&params.a, &partition)?;
    let acc = test_accuracy(&params, &spec, &partition, cfg.check.spurious_samples, &cfg.streams())?;
    let gates = [
        ("accuracy >= 0.99", acc.accuracy >= 0.99),
        ("patch association score == 0", report.score == 0.0),
        (
            "Top-C disjoint from own set in every row",
            report.intersection_empty_fraction == 1.0,
        ),
    ];
    write_json(
        &cfg.out.join("report.json"),
        &json!({
            "beta": beta,
            "tau": cfg.model.tau,
            "accuracy": acc,
            "patch_association_score": report.score,
            "intersection_empty_fraction": report.intersection_empty_fraction,
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
        }),
    )?;
    Ok(RunStatus::from_gates(&gates))
}

/// Result of checking analytic gradients on random small instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_err: f64,
    pub per_instance: Vec<GradcheckInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckInstance {
    pub d: usize,
    pub num_patches: usize,
    pub p: u32,
    pub max_rel_err: f64,
    pub max_abs_diagonal: f64,
}

/// Random instances with `d <= 8`, `D <= 6` and `p` alternating between 3 and 5.
pub fn gradcheck_suite(streams: &Streams, instances: usize, h: f64) -> Result<GradcheckReport> {
    let mut per_instance = Vec::with_capacity(instances);
    for k in 0..instances {
        let mut rng = streams.stream(purpose::MISC, k as u64);
        let d = rng.random_range(2..=8);
        let n = rng.random_range(2..=6);
        let p = if k % 2 == 0 { 3 } else { 5 };
        let mut params = ModelParams::zeros(d, n, p, 0.05, 1.3, 0.7)?;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    params.a.set(i, j, rng.sample(StandardNormal));
                }
            }
        }
        for v in &mut params.v {
            *v = 0.15 * rng.sample::<f64, _>(StandardNormal);
        }
        let x: Vec<f64> = (0..d * n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let check = finite_diff_check(&params, &x, y, h)?;
        per_instance.push(GradcheckInstance {
            d,
            num_patches: n,
            p,
            max_rel_err: check.max_rel_err,
            max_abs_diagonal: check.diagonal.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        });
    }
    let max_rel_err = per_instance.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err));
    Ok(GradcheckReport {
        instances,
        max_rel_err,
        per_instance,
    })
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<RunStatus> {
    let report = gradcheck_suite(&cfg.streams(), cfg.check.gradcheck_instances, cfg.check.gradcheck_h)?;
    let gates = [
        ("at least 20 instances", report.instances >= 20),
        ("max relative error < 1e-6", report.max_rel_err < 1e-6),
        (
            "frozen diagonal has zero gradient",
            report.per_instance.iter().all(|c| c.max_abs_diagonal == 0.0),
        ),
    ];
    let mut file = BufWriter::new(fs::File::create(cfg.out.join("gradcheck.json"))?);
    serde_json::to_writer_pretty(
        &mut file,
        &json!({
            "report": report,
            "gates": gates.iter().map(|(n, ok)| json!({"gate": n, "pass": ok})).collect::<Vec<_>>(),
        }),
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    file.write_all(b"\n")?;
    Ok(RunStatus::from_gates(&gates))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_keys_comments_and_overrides() {
        let text = "# desk\ntrain.eta = 0.001  # faster\n\ntransfer.sizes = 4, 8\ndistribution.sigma2 = auto\n";
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.eta, 0.001);
        assert_eq!(cfg.transfer.sizes, vec![4, 8]);
        cfg.apply_overrides(["seed=9", "model.tau = 0.5"]).unwrap();
        assert_eq!((cfg.seed, cfg.model.tau), (9, 0.5));
    }

    #[test]
    fn diagnostics_name_line_and_field() {
        match ExperimentConfig::parse("seed = 1\ntrain.eta = fast\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("train.eta"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("\n\ntrain.bogus = 1") {
            Err(Error::Config { line: 3, msg }) => assert!(msg.contains("train.bogus")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::parse("just words"),
            Err(Error::Config { line: 1, .. })
        ));
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides([
            "distribution.partition=random",
            "transfer.feature=fresh",
            "check.spurious_beta=0.1",
        ])
        .unwrap();
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        // auto-valued fields come back resolved
        assert_eq!(back.render(), cfg.render());
    }

    #[test]
    fn heatmap_scaling_and_constant_note() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let a = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        export_heatmap(&a, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap().as_slice(), &[0.0, 255.0, 255.0, 0.0]);
        let z = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        export_heatmap(&z, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap().as_slice(), &[0.0]);
        let meta: HeatmapMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert!(meta.note.is_some());
    }
}
