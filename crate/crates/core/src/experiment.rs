//! Config-driven sweeps.
//!
//! One config describes the data, the client partition, the model and a list
//! of strategies; each (strategy, seed) pair is an independent job writing to
//! `<output_dir>/<label>/seed<k>/`. Every random stream is derived from the
//! master seed and a purpose tag (see [`crate::seed`]), so dataset, partition,
//! initialization and training are reproducible on their own.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_synthetic, partition_dirichlet, Dataset, Partition, SplitData, SyntheticSpec};
use crate::federation::{Federation, FederationState, StrategyConfig, StrategyKind};
use crate::flatness::{
    landscape_2d, local_global_eigs, power_iteration_lambda1, EigRow, EigenEstimate, LandscapeGrid,
    LandscapeSpec, PowerIterConfig,
};
use crate::localopt::{LocalHyper, LocalOptimizer};
use crate::numcore::{Activation, MlpObjective, ModelArch, Objective, ParamVector};
use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Trailing window, in evaluations, for the accuracy used by comparisons.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    /// Fixed partition seed; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSet {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Record the dominant Hessian eigenvalue every this many rounds (0: never
    /// during training).
    pub lambda1_every: usize,
    /// Dominant eigenvalue of the final global model on the train set.
    pub lambda1_final: bool,
    pub delta_eps: bool,
    /// Per-client eigenvalues of the last round's local models.
    pub client_eigs: bool,
    /// Completed-round counts at which to record a 2D landscape.
    pub landscape_rounds: Vec<usize>,
    pub landscape: LandscapeSpec,
    pub landscape_on: EvalSet,
    pub power_iter: PowerIterConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            lambda1_every: 0,
            lambda1_final: true,
            delta_eps: true,
            client_eigs: false,
            landscape_rounds: Vec::new(),
            landscape: LandscapeSpec::default(),
            landscape_on: EvalSet::Train,
            power_iter: PowerIterConfig::default(),
        }
    }
}

/// Per-strategy overrides of the shared `[local]` table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl LocalOverride {
    pub fn apply(&self, base: &LocalHyper) -> LocalHyper {
        LocalHyper {
            eta: self.eta.unwrap_or(base.eta),
            rho_l: self.rho_l.unwrap_or(base.rho_l),
            mu: self.mu.unwrap_or(base.mu),
            beta: self.beta.unwrap_or(base.beta),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            momentum: self.momentum.unwrap_or(base.momentum),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn rho0_default() -> f64 {
    0.001
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    /// Output directory name; defaults to the strategy name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub kind: StrategyKind,
    #[serde(default = "one")]
    pub server_lr: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "rho0_default")]
    pub rho0: f64,
    #[serde(default)]
    pub rho_warmup: usize,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub admm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_optimizer: Option<LocalOptimizer>,
    #[serde(default)]
    pub local: LocalOverride,
}

impl StrategyEntry {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyEntry {
            label: None,
            kind,
            server_lr: 1.0,
            rho: 0.0,
            rho0: rho0_default(),
            rho_warmup: 0,
            admm: true,
            local_optimizer: None,
            local: LocalOverride::default(),
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn resolve(&self, base: &LocalHyper) -> StrategyConfig {
        StrategyConfig {
            kind: self.kind,
            server_lr: self.server_lr,
            rho: self.rho,
            rho0: self.rho0,
            rho_warmup: self.rho_warmup,
            admm: self.admm,
            local_optimizer: self.local_optimizer,
            local: self.local.apply(base),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub clients_per_round: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Train the clients of a round on the thread pool.
    #[serde(default)]
    pub parallel_clients: bool,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub local: LocalHyper,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    pub strategies: Vec<StrategyEntry>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let violations = cfg.validate();
        if violations.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(violations))
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Every violation, one message per offending field.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seeds: at least one seed is required".into());
        }
        if self.rounds == 0 {
            v.push("rounds: must be >= 1".into());
        }
        if self.eval_every == 0 {
            v.push("eval_every: must be >= 1".into());
        }
        let c = self.partition.num_clients;
        if c == 0 {
            v.push("partition.num_clients: must be >= 1".into());
        }
        if !(self.partition.alpha >= 0.0 && self.partition.alpha.is_finite()) {
            v.push(format!("partition.alpha: must be >= 0, got {}", self.partition.alpha));
        }
        if self.clients_per_round == 0 || self.clients_per_round > c {
            v.push(format!(
                "clients_per_round: must lie in 1..={c} (partition.num_clients), got {}",
                self.clients_per_round
            ));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                if s.num_classes < 2 {
                    v.push("data.num_classes: must be >= 2".into());
                }
                if s.per_class < 5 {
                    v.push("data.per_class: must be >= 5 to leave a test split".into());
                }
                if s.input_dim < 2 {
                    v.push("data.input_dim: must be >= 2".into());
                }
                if !(s.noise_sd >= 0.0 && s.noise_sd.is_finite()) {
                    v.push(format!("data.noise_sd: must be >= 0, got {}", s.noise_sd));
                }
                if !s.class_sep.is_finite() {
                    v.push("data.class_sep: must be finite".into());
                }
            }
            DataConfig::Csv { num_classes, .. } => {
                if num_classes.is_some_and(|k| k < 2) {
                    v.push("data.num_classes: must be >= 2".into());
                }
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            v.push("model.hidden: needs at least one layer, all widths >= 1".into());
        }
        v.extend(self.local.violations("local"));
        let d = &self.diagnostics;
        if d.power_iter.max_iter == 0 {
            v.push("diagnostics.power_iter.max_iter: must be >= 1".into());
        }
        if !d.landscape_rounds.is_empty() && d.landscape.resolution < 3 {
            v.push("diagnostics.landscape.resolution: must be >= 3".into());
        }
        if self.strategies.is_empty() {
            v.push("strategies: at least one strategy is required".into());
        }
        let mut labels = BTreeSet::new();
        for (i, s) in self.strategies.iter().enumerate() {
            let label = s.label();
            if label.is_empty() || label.contains(['/', '\\']) {
                v.push(format!("strategies[{i}].label: must be a plain, nonempty name"));
            }
            if !labels.insert(label.clone()) {
                v.push(format!("strategies[{i}].label: duplicate label {label:?}"));
            }
            v.extend(s.resolve(&self.local).violations(&format!("strategies[{i}]")));
        }
        v
    }

    pub fn strategies(&self) -> Vec<(String, StrategyConfig)> {
        self.strategies
            .iter()
            .map(|s| (s.label(), s.resolve(&self.local)))
            .collect()
    }

    pub fn build_data(&self, seed: u64) -> Result<SplitData> {
        let data = match &self.data {
            DataConfig::Synthetic(spec) => make_synthetic(spec, derive_seed(seed, "data", &[]))?,
            DataConfig::Csv {
                train,
                test,
                num_classes,
            } => {
                let train = Dataset::read_csv(train, *num_classes)?;
                let k = num_classes.unwrap_or(train.num_classes());
                let test = Dataset::read_csv(test, Some(k))?;
                if train.input_dim() != test.input_dim() {
                    return Err(Error::config("train and test CSVs differ in input dimension"));
                }
                SplitData { train, test }
            }
        };
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::config("train and test splits must both be nonempty"));
        }
        Ok(data)
    }

    pub fn build_partition(&self, train: &Dataset, seed: u64) -> Result<Partition> {
        let pseed = self
            .partition
            .seed
            .unwrap_or_else(|| derive_seed(seed, "partition", &[]));
        partition_dirichlet(train, self.partition.num_clients, self.partition.alpha, pseed)
    }

    pub fn arch(&self, train: &Dataset) -> Result<ModelArch> {
        ModelArch::new(
            train.input_dim(),
            self.model.hidden.clone(),
            train.num_classes(),
            self.model.activation,
        )
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&fs::read_to_string(path)?)
}

/// Data, partition and architecture for one master seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub data: SplitData,
    pub partition: Partition,
    pub arch: ModelArch,
}

impl SeedContext {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let data = cfg.build_data(seed)?;
        let partition = cfg.build_partition(&data.train, seed)?;
        let arch = cfg.arch(&data.train)?;
        Ok(SeedContext {
            seed,
            data,
            partition,
            arch,
        })
    }

    pub fn client_objectives(&self) -> Result<Vec<MlpObjective<'_>>> {
        self.partition
            .client_indices
            .iter()
            .map(|idx| self.data.train.subset_objective(&self.arch, idx))
            .collect()
    }

    pub fn train_objective(&self) -> Result<MlpObjective<'_>> {
        self.data.train.objective(&self.arch)
    }

    pub fn test_objective(&self) -> Result<MlpObjective<'_>> {
        self.data.test.objective(&self.arch)
    }

    /// Same initial model for every strategy under this seed.
    pub fn initial_model(&self) -> ParamVector {
        self.arch.init_params(&mut rng_for(self.seed, "init", &[]))
    }
}

/// One evaluation row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub strategy: String,
    pub train_loss: f64,
    pub test_acc: f64,
    pub lambda1: Option<f64>,
    pub delta_eps: Option<f64>,
    pub w_norm: f64,
    pub bits_cum: u64,
}

/// One row per round of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub rho: f64,
    pub perturbation_norm: f64,
    pub delta_eps: Option<f64>,
    pub w_norm: f64,
    pub bits_cum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub round: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
    pub trace: Vec<RoundTrace>,
    pub diverged: Option<DivergenceEvent>,
    pub state: FederationState,
    pub final_lambda1: Option<EigenEstimate>,
    pub client_eigs: Vec<EigRow>,
    pub landscapes: Vec<(usize, LandscapeGrid)>,
}

impl RunOutcome {
    pub fn final_model(&self) -> &ParamVector {
        &self.state.server.w
    }

    /// Mean test accuracy over the last 10% of evaluations (at least one).
    pub fn final_accuracy(&self) -> Option<f64> {
        final_accuracy(&self.records)
    }

    pub fn delta_eps_values(&self) -> Vec<Option<f64>> {
        self.trace.iter().map(|t| t.delta_eps).collect()
    }
}

pub fn final_accuracy(records: &[MetricsRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let k = records.len().div_ceil(10);
    let tail = &records[records.len() - k..];
    Some(tail.iter().map(|r| r.test_acc).sum::<f64>() / k as f64)
}

/// Run one strategy for `cfg.rounds` rounds, or continue from `resume` until
/// `cfg.rounds` rounds have completed in total.
pub fn run_strategy(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    label: &str,
    strategy: &StrategyConfig,
    resume: Option<FederationState>,
) -> Result<RunOutcome> {
    let clients = ctx.client_objectives()?;
    let train = ctx.train_objective()?;
    let test = ctx.test_objective()?;
    let fed_seed = derive_seed(ctx.seed, "federation", &[]);
    let mut fed = match resume {
        Some(state) => Federation::resume(&clients, strategy.clone(), cfg.clients_per_round, state)?,
        None => Federation::new(
            &clients,
            strategy.clone(),
            cfg.clients_per_round,
            ctx.initial_model(),
            fed_seed,
        )?,
    }
    .with_parallel(cfg.parallel_clients);
    let diag = &cfg.diagnostics;
    let eigen_cfg = |tag| PowerIterConfig {
        seed: derive_seed(ctx.seed, "eigen", &[tag]),
        ..diag.power_iter.clone()
    };

    let mut records = Vec::new();
    let mut trace = Vec::new();
    let mut landscapes = Vec::new();
    let mut diverged = None;
    while fed.server().round < cfg.rounds {
        let report = match fed.run_round() {
            Ok(r) => r,
            Err(Error::Diverged { round, reason }) => {
                diverged = Some(DivergenceEvent { round, reason });
                break;
            }
            Err(e) => return Err(e),
        };
        let done = report.round + 1;
        let delta = if diag.delta_eps { report.delta_eps } else { None };
        trace.push(RoundTrace {
            round: done,
            rho: report.rho,
            perturbation_norm: report.perturbation_norm,
            delta_eps: delta,
            w_norm: report.w_norm,
            bits_cum: report.bits_cum,
        });
        let w = fed.model();
        if done % cfg.eval_every == 0 || done == cfg.rounds {
            let lambda1 = if diag.lambda1_every > 0 && done % diag.lambda1_every == 0 {
                Some(power_iteration_lambda1(&train, w, &eigen_cfg(done as u64))?.lambda1)
            } else {
                None
            };
            records.push(MetricsRecord {
                round: done,
                strategy: label.to_string(),
                train_loss: train.loss(w)?,
                test_acc: test.accuracy(w)?.unwrap_or(f64::NAN),
                lambda1,
                delta_eps: delta,
                w_norm: report.w_norm,
                bits_cum: report.bits_cum,
            });
        }
        if diag.landscape_rounds.contains(&done) {
            let obj = match diag.landscape_on {
                EvalSet::Train => &train,
                EvalSet::Test => &test,
            };
            let spec = LandscapeSpec {
                seed: derive_seed(ctx.seed, "landscape", &[diag.landscape.seed]),
                ..diag.landscape
            };
            landscapes.push((done, landscape_2d(obj, w, &ctx.arch.layer_segments(), &spec)?));
        }
    }

    let final_lambda1 = if diag.lambda1_final && diverged.is_none() {
        Some(power_iteration_lambda1(&train, fed.model(), &eigen_cfg(u64::MAX))?)
    } else {
        None
    };
    let client_eigs = if diag.client_eigs && diverged.is_none() {
        local_global_eigs(fed.last_client_models(), &clients, &train, &eigen_cfg(u64::MAX - 1))?
    } else {
        Vec::new()
    };
    Ok(RunOutcome {
        label: label.to_string(),
        strategy: strategy.clone(),
        seed: ctx.seed,
        records,
        trace,
        diverged,
        state: fed.into_state(),
        final_lambda1,
        client_eigs,
        landscapes,
    })
}

/// Serialized run state, sufficient to continue training or to rerun the
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub strategy: StrategyConfig,
    pub state: FederationState,
}

impl Snapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let snap: Snapshot = serde_json::from_slice(&fs::read(path)?)?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::config(format!(
                "snapshot version {} is not supported (expected {SNAPSHOT_VERSION})",
                snap.version
            )));
        }
        Ok(snap)
    }
}

pub fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(label).join(format!("seed{seed}"))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Write metrics, per-round trace, snapshot and diagnostics of one run.
pub fn write_outcome(cfg: &ExperimentConfig, out: &Path, run: &RunOutcome) -> Result<PathBuf> {
    let dir = run_dir(out, &run.label, run.seed);
    fs::create_dir_all(&dir)?;
    if run.records.is_empty() {
        // Header only, so a run that diverged immediately still has a file.
        csv::Writer::from_path(dir.join("metrics.csv"))?.write_record([
            "round", "strategy", "train_loss", "test_acc", "lambda1", "delta_eps", "w_norm", "bits_cum",
        ])?;
    } else {
        write_rows(&dir.join("metrics.csv"), &run.records)?;
    }
    write_rows(&dir.join("rounds.csv"), &run.trace)?;
    Snapshot {
        version: SNAPSHOT_VERSION,
        label: run.label.clone(),
        seed: run.seed,
        config: cfg.clone(),
        strategy: run.strategy.clone(),
        state: run.state.clone(),
    }
    .save(dir.join("snapshot.json"))?;
    if !run.client_eigs.is_empty() {
        crate::flatness::write_eigs_csv(&dir.join("eigs.csv"), &run.client_eigs)?;
    }
    for (round, grid) in &run.landscapes {
        crate::flatness::write_landscape_csv(&dir.join(format!("landscape_r{round}.csv")), grid)?;
    }
    match &run.diverged {
        Some(ev) => fs::write(dir.join("diverged.txt"), format!("{}\t{}\n", ev.round, ev.reason))?,
        None => {
            let stale = dir.join("diverged.txt");
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub strategy: String,
    /// A seed, or `mean` / `sd` across seeds.
    pub seed: String,
    pub final_acc: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub lambda1: Option<f64>,
    pub w_norm: Option<f64>,
    pub bits_total: Option<f64>,
    pub diverged_at: Option<usize>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Per-seed rows followed by mean and standard deviation rows per label.
/// Diverged runs are listed but left out of the aggregates.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut labels: Vec<&str> = Vec::new();
    for o in outcomes {
        if !labels.contains(&o.label.as_str()) {
            labels.push(&o.label);
        }
    }
    for label in labels {
        let runs: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.label == label).collect();
        let strategy = runs[0].strategy.kind.name().to_string();
        let per_seed: Vec<SummaryRow> = runs
            .iter()
            .map(|o| SummaryRow {
                label: label.to_string(),
                strategy: strategy.clone(),
                seed: o.seed.to_string(),
                final_acc: o.final_accuracy(),
                final_train_loss: o.records.last().map(|r| r.train_loss),
                lambda1: o.final_lambda1.map(|e| e.lambda1),
                w_norm: Some(o.final_model().norm()),
                bits_total: Some(o.state.ledger.total_bits() as f64),
                diverged_at: o.diverged.as_ref().map(|d| d.round),
            })
            .collect();
        let ok: Vec<&SummaryRow> = per_seed.iter().filter(|r| r.diverged_at.is_none()).collect();
        let agg = |f: fn(&SummaryRow) -> Option<f64>| -> Option<(f64, f64)> {
            let xs: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!xs.is_empty()).then(|| mean_sd(&xs))
        };
        let stats = [
            agg(|r| r.final_acc),
            agg(|r| r.final_train_loss),
            agg(|r| r.lambda1),
            agg(|r| r.w_norm),
            agg(|r| r.bits_total),
        ];
        rows.extend(per_seed);
        for (name, pick) in [("mean", 0usize), ("sd", 1)] {
            let get = |i: usize| stats[i].map(|s| if pick == 0 { s.0 } else { s.1 });
            rows.push(SummaryRow {
                label: label.to_string(),
                strategy: strategy.clone(),
                seed: name.to_string(),
                final_acc: get(0),
                final_train_loss: get(1),
                lambda1: get(2),
                w_norm: get(3),
                bits_total: get(4),
                diverged_at: None,
            });
        }
    }
    rows
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn divergences(&self) -> Vec<(&str, u64, &DivergenceEvent)> {
        self.outcomes
            .iter()
            .filter_map(|o| o.diverged.as_ref().map(|d| (o.label.as_str(), o.seed, d)))
            .collect()
    }
}

/// Every (strategy, seed) job of the config, without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let strategies = cfg.strategies();
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::build(cfg, seed)?;
        let runs = strategies
            .par_iter()
            .map(|(label, s)| run_strategy(cfg, &ctx, label, s, None))
            .collect::<Result<Vec<_>>>()?;
        outcomes.extend(runs);
    }
    Ok(outcomes)
}

/// Run the whole sweep and write `<output_dir>/<label>/seed<k>/*`,
/// `summary.csv` and a copy of the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let outcomes = execute(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    cfg.save(out.join("config.toml"))?;
    for o in &outcomes {
        write_outcome(cfg, out, o)?;
    }
    let summary = summarize(&outcomes);
    write_rows(&out.join("summary.csv"), &summary)?;
    Ok(ExperimentReport { outcomes, summary })
}

/// One line of a run comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub strategy: String,
    pub final_acc: f64,
    pub lambda1: Option<f64>,
    pub bits_total: u64,
    /// `None` when the target accuracy is never reached.
    pub rounds_to_target: Option<usize>,
    pub cost_bits: Option<u64>,
    /// `cost_bits` relative to FedAvg's bits over `rounds_to_target` rounds.
    pub cost_multiplier: Option<f64>,
}

/// Trailing mean over the last `window` values at every position.
pub fn trailing_mean(xs: &[f64], window: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = if path.is_dir() { path.join("metrics.csv") } else { path.to_path_buf() };
    let mut r = csv::Reader::from_path(&file)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(rows)
}

/// Compare runs against FedAvg's final smoothed accuracy.
///
/// The target is the trailing-mean test accuracy at the last evaluation of the
/// FedAvg runs among the inputs (averaged if there are several); rounds to
/// target is the first round whose trailing-mean accuracy reaches it.
pub fn compare_runs(runs: &[(String, Vec<MetricsRecord>)]) -> Result<Vec<CompareRow>> {
    let smoothed = |recs: &[MetricsRecord]| {
        trailing_mean(&recs.iter().map(|r| r.test_acc).collect::<Vec<_>>(), SMOOTHING_WINDOW)
    };
    let refs: Vec<&Vec<MetricsRecord>> = runs
        .iter()
        .map(|(_, recs)| recs)
        .filter(|recs| recs.first().is_some_and(|r| r.strategy == StrategyKind::FedAvg.name()))
        .collect();
    if refs.is_empty() {
        return Err(Error::config("comparison needs at least one FedAvg run"));
    }
    let target = refs
        .iter()
        .map(|recs| *smoothed(recs).last().expect("nonempty"))
        .sum::<f64>()
        / refs.len() as f64;
    let fedavg_round_bits = refs
        .iter()
        .map(|recs| {
            let last = recs.last().expect("nonempty");
            last.bits_cum as f64 / last.round as f64
        })
        .sum::<f64>()
        / refs.len() as f64;

    runs.iter()
        .map(|(name, recs)| {
            let last = recs
                .last()
                .ok_or_else(|| Error::config(format!("{name}: no metrics rows")))?;
            let hit = smoothed(recs)
                .iter()
                .position(|&a| a >= target)
                .map(|i| &recs[i]);
            Ok(CompareRow {
                run: name.clone(),
                strategy: last.strategy.clone(),
                final_acc: final_accuracy(recs).expect("nonempty"),
                lambda1: recs.iter().rev().find_map(|r| r.lambda1),
                bits_total: last.bits_cum,
                rounds_to_target: hit.map(|r| r.round),
                cost_bits: hit.map(|r| r.bits_cum),
                cost_multiplier: hit.map(|r| r.bits_cum as f64 / (fedavg_round_bits * r.round as f64)),
            })
        })
        .collect()
}

pub fn compare_paths(paths: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let runs = paths
        .iter()
        .map(|p| Ok((p.display().to_string(), read_metrics(p)?)))
        .collect::<Result<Vec<_>>>()?;
    compare_runs(&runs)
}

fn dash<T: std::fmt::Display>(x: Option<T>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Plain-text table with `-` for targets never reached.
pub fn format_comparison(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<40} {:<14} {:>9} {:>10} {:>14} {:>7} {:>14} {:>6}\n",
        "run", "strategy", "final_acc", "lambda1", "bits", "rounds", "cost_bits", "cost"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<40} {:<14} {:>9.4} {:>10} {:>14} {:>7} {:>14} {:>6}\n",
            r.run,
            r.strategy,
            r.final_acc,
            dash(r.lambda1.map(|x| format!("{x:.4}"))),
            r.bits_total,
            dash(r.rounds_to_target),
            dash(r.cost_bits),
            dash(r.cost_multiplier.map(|m| format!("{m:.2}x"))),
        ));
    }
    s
}

pub fn write_comparison_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Per-client label statistics for `partition-stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub num_clients: usize,
    pub alpha: f64,
    pub shard_size: usize,
    pub mean_classes_per_client: f64,
    pub mean_label_entropy: f64,
    pub histograms: Vec<Vec<usize>>,
}

pub fn partition_stats(cfg: &ExperimentConfig, seed: u64) -> Result<PartitionStats> {
    let data = cfg.build_data(seed)?;
    let p = cfg.build_partition(&data.train, seed)?;
    Ok(PartitionStats {
        num_clients: p.num_clients(),
        alpha: p.alpha,
        shard_size: p.client_indices.first().map_or(0, Vec::len),
        mean_classes_per_client: p.mean_classes_per_client(&data.train),
        mean_label_entropy: p.mean_label_entropy(&data.train),
        histograms: p.label_histograms(&data.train),
    })
}
