//! End-to-end run orchestration behind the command-line interface.
//!
//! A run is identified by `(task, n_train, variant, solver, seed)`. Each
//! stage command reads its upstream artifacts from a fixed directory layout,
//! skips work whose outputs already exist, and produces byte-identical files
//! when rerun over identical inputs. Every artifact records the hash of the
//! resolved run configuration, and data files get a content hash in their
//! JSON sidecar, so any result row can be traced back to the exact
//! configuration and bytes that produced it.
//!
//! Layout under the output root (`--output` flag, config file value, or the
//! `CPE_OUTPUT_DIR` environment variable):
//!
//! ```text
//! {task}/n{n}/seed{s}/dataset.csv + dataset.json      simulated training data
//! {task}/n{n}/seed{s}/observation.json                conditioning point
//! {task}/n{n}/seed{s}/reference.csv + reference.json  slice-sampler posterior
//! {task}/n{n}/seed{s}/{variant}/checkpoint.json       trained flow
//! {task}/n{n}/seed{s}/{variant}/history.csv + train.json
//! {task}/n{n}/seed{s}/{variant}/samples_{solver}.csv + .json
//! {task}/n{n}/seed{s}/{variant}/report_{solver}.json  evaluation metrics
//! results.csv                                         one row per report
//! summary.csv                                         seed-averaged rows
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cpeflow::{CpeConfig, FlowVariant};
use crate::dcpeflow::DiscreteFlowNet;
use crate::error::CpeError;
use crate::eval::{C2stConfig, EvalReport};
use crate::math::{sha256_hex, substream};
use crate::samplers::{discrete_sample, euler_sample, rk45_sample, SampleSet};
use crate::tasks::{make_task, slice_sample_reference, ReferenceConfig};
use crate::train::{simulate_dataset, train_pipeline, Dataset, FlowPipeline, TrainConfig};

/// Environment variable giving the default output root.
pub const OUTPUT_DIR_ENV: &str = "CPE_OUTPUT_DIR";

/// ODE solver used to push base draws through a continuous flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Fixed-step Euler integration.
    Euler,
    /// Adaptive Runge-Kutta 5(4).
    Rk45,
}

impl std::str::FromStr for Solver {
    type Err = CpeError;

    fn from_str(s: &str) -> Result<Self, CpeError> {
        match s {
            "euler" => Ok(Solver::Euler),
            "rk45" => Ok(Solver::Rk45),
            other => Err(CpeError::Config(format!(
                "unknown solver `{other}`; expected `euler` or `rk45`"
            ))),
        }
    }
}

impl std::str::FromStr for FlowVariant {
    type Err = CpeError;

    fn from_str(s: &str) -> Result<Self, CpeError> {
        match s {
            "continuous" => Ok(FlowVariant::Continuous),
            "discrete" => Ok(FlowVariant::Discrete),
            other => Err(CpeError::Config(format!(
                "unknown variant `{other}`; expected `continuous` or `discrete`"
            ))),
        }
    }
}

/// Fully resolved configuration of one run.
///
/// Every field has a default, so an empty JSON object is a valid config
/// file. The configuration hash covers everything except the output
/// location, so moving the output root does not change run identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Benchmark task registry name.
    pub task: String,
    /// Number of simulations in the training set.
    pub n_train: usize,
    /// Flow family to train and sample.
    pub variant: FlowVariant,
    /// ODE solver for continuous-flow sampling (ignored by discrete flows,
    /// which always invert by bisection).
    pub solver: Solver,
    /// Run seeds; every stage processes each seed independently.
    pub seeds: Vec<u64>,
    /// Output root directory.
    pub output_dir: PathBuf,
    /// Posterior draws requested per run.
    pub n_samples: usize,
    /// Master seed of the per-run observation draws, kept separate from the
    /// run seeds so observations never share RNG streams with simulations.
    pub observation_seed: u64,
    /// Euler step count.
    pub euler_steps: usize,
    /// Relative tolerance of the adaptive solver.
    pub rk45_rtol: f64,
    /// Absolute tolerance of the adaptive solver.
    pub rk45_atol: f64,
    /// Bisection tolerance of discrete-flow inversion.
    pub invert_tol: f64,
    /// Network architecture.
    pub arch: CpeConfig,
    /// Optimizer and schedule settings.
    pub train: TrainConfig,
    /// Reference sampler budget.
    pub reference: ReferenceConfig,
    /// Classifier two-sample test settings.
    pub c2st: C2stConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "linear_gaussian".into(),
            n_train: 10_000,
            variant: FlowVariant::Continuous,
            solver: Solver::Euler,
            seeds: vec![1, 2, 3],
            output_dir: default_output_dir(),
            n_samples: 5000,
            observation_seed: 20_000_017,
            euler_steps: 20,
            rk45_rtol: 1e-5,
            rk45_atol: 1e-6,
            invert_tol: 1e-10,
            arch: CpeConfig::default(),
            train: TrainConfig::default(),
            reference: ReferenceConfig::default(),
            c2st: C2stConfig::default(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunConfig {
    /// Read a configuration from a JSON file; missing fields take defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig, CpeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CpeError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CpeError::Config(format!("bad config `{}`: {e}", path.display())))
    }

    /// Check the configuration, including all nested sections.
    pub fn validate(&self) -> Result<(), CpeError> {
        make_task(&self.task)?;
        if self.seeds.is_empty() {
            return Err(CpeError::Config("need at least one seed".into()));
        }
        if self.n_train < 10 {
            return Err(CpeError::Config(format!(
                "n_train must be at least 10, got {}",
                self.n_train
            )));
        }
        if self.n_samples == 0 {
            return Err(CpeError::Config("n_samples must be positive".into()));
        }
        if self.euler_steps == 0 {
            return Err(CpeError::Config("euler_steps must be positive".into()));
        }
        for (name, v) in [
            ("rk45_rtol", self.rk45_rtol),
            ("rk45_atol", self.rk45_atol),
            ("invert_tol", self.invert_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CpeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.train.validate()?;
        self.reference.validate()?;
        self.c2st.validate()?;
        Ok(())
    }

    /// Hash of the configuration with the output location removed.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config is a JSON object")
            .remove("output_dir");
        sha256_hex(serde_json::to_string(&value).expect("config serializes").as_bytes())
    }

    /// Tag naming the sampling method in file names and sample metadata.
    pub fn solver_tag(&self) -> String {
        match self.variant {
            FlowVariant::Discrete => "bisect".into(),
            FlowVariant::Continuous => match self.solver {
                Solver::Euler => format!("euler{}", self.euler_steps),
                Solver::Rk45 => "rk45".into(),
            },
        }
    }

    /// Directory holding all seeds of this task and training size.
    pub fn task_dir(&self) -> PathBuf {
        self.output_dir
            .join(&self.task)
            .join(format!("n{}", self.n_train))
    }

    /// Directory holding one seed's artifacts.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.task_dir().join(format!("seed{seed}"))
    }

    /// Directory holding one seed's variant-specific artifacts.
    pub fn variant_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join(self.variant.tag())
    }

    /// Training data CSV.
    pub fn dataset_csv(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("dataset.csv")
    }

    /// Training data metadata sidecar.
    pub fn dataset_meta(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("dataset.json")
    }

    /// Conditioning observation JSON.
    pub fn observation_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("observation.json")
    }

    /// Reference posterior CSV.
    pub fn reference_csv(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("reference.csv")
    }

    /// Reference posterior metadata sidecar.
    pub fn reference_meta(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("reference.json")
    }

    /// Trained flow checkpoint.
    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed).join("checkpoint.json")
    }

    /// Training loss history CSV.
    pub fn history_path(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed).join("history.csv")
    }

    /// Training run summary JSON.
    pub fn train_meta_path(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed).join("train.json")
    }

    /// Posterior samples CSV of the configured method.
    pub fn samples_csv(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed)
            .join(format!("samples_{}.csv", self.solver_tag()))
    }

    /// Posterior samples metadata sidecar.
    pub fn samples_meta(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed)
            .join(format!("samples_{}.json", self.solver_tag()))
    }

    /// Evaluation report JSON.
    pub fn report_path(&self, seed: u64) -> PathBuf {
        self.variant_dir(seed)
            .join(format!("report_{}.json", self.solver_tag()))
    }

    /// Tidy per-report result table.
    pub fn results_csv(&self) -> PathBuf {
        self.output_dir.join("results.csv")
    }

    /// Seed-averaged summary table.
    pub fn summary_csv(&self) -> PathBuf {
        self.output_dir.join("summary.csv")
    }
}

/// Ground-truth parameter and observation a run conditions on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    /// Task the observation was generated from.
    pub task: String,
    /// Run seed it belongs to.
    pub seed: u64,
    /// Parameter that generated the observation.
    pub theta_true: Vec<f64>,
    /// The observation itself.
    pub x_obs: Vec<f64>,
    /// Hash of the run configuration that generated it, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Load the seed's observation, generating and persisting it on first use.
pub fn ensure_observation(config: &RunConfig, seed: u64) -> Result<Observation, CpeError> {
    let path = config.observation_path(seed);
    if path.exists() {
        let obs: Observation = read_json(&path, "observation")?;
        if obs.task != config.task {
            return Err(CpeError::Data(format!(
                "observation `{}` belongs to task `{}`, not `{}`",
                path.display(),
                obs.task,
                config.task
            )));
        }
        return Ok(obs);
    }
    let task = make_task(&config.task)?;
    let mut rng = substream(config.observation_seed, seed);
    let (theta, x) = task.generate_observation(&mut rng);
    let obs = Observation {
        task: config.task.clone(),
        seed,
        theta_true: theta.to_vec(),
        x_obs: x.to_vec(),
        config_hash: Some(config.config_hash()),
    };
    write_json(&path, &obs)?;
    Ok(obs)
}

/// Stage labels used to derive independent stage seeds from a run seed.
///
/// Dataset simulation consumes the run seed directly (one RNG substream per
/// row), so downstream stages mix the run seed through SplitMix64 with a
/// stage-specific offset; their substream families can then never collide
/// with the per-row simulation streams.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    /// Flow training.
    Train,
    /// Flow sampling.
    Sample,
    /// Reference MCMC.
    Reference,
    /// Evaluation.
    Evaluate,
}

/// Derive the RNG master seed a stage uses for one run seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let mut z = seed.wrapping_add((1 + stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulate and persist the training datasets for every seed.
pub fn cmd_simulate(config: &RunConfig) -> Result<(), CpeError> {
    config.validate()?;
    let hash = config.config_hash();
    for &seed in &config.seeds {
        let csv = config.dataset_csv(seed);
        let meta = config.dataset_meta(seed);
        if csv.exists() && meta.exists() {
            log::info!("dataset `{}` exists, skipping", csv.display());
            continue;
        }
        let task = make_task(&config.task)?;
        log::info!(
            "simulating {} rows of task `{}`, seed {seed}",
            config.n_train,
            config.task
        );
        let mut dataset = simulate_dataset(task.as_ref(), config.n_train, seed)?;
        dataset.config_hash = Some(hash.clone());
        create_parent(&csv)?;
        dataset.save(&csv, &meta)?;
    }
    Ok(())
}

/// Per-seed training summary written next to the history CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Task the flow was trained on.
    pub task: String,
    /// Run seed.
    pub seed: u64,
    /// Flow family tag.
    pub variant: String,
    /// Epoch whose parameters the checkpoint holds.
    pub best_epoch: usize,
    /// Validation loss at the checkpoint.
    pub best_val_loss: f64,
    /// Epochs actually run.
    pub epochs_run: usize,
    /// Abnormal events during training.
    pub warnings: Vec<String>,
    /// Hash of the run configuration.
    pub config_hash: String,
    /// Content hash of the history CSV.
    pub history_sha256: String,
    /// Content hash of the checkpoint file.
    pub checkpoint_sha256: String,
}

/// Train and checkpoint a flow for every seed with a dataset.
pub fn cmd_train(config: &RunConfig) -> Result<(), CpeError> {
    config.validate()?;
    let hash = config.config_hash();
    for &seed in &config.seeds {
        let ckpt = config.checkpoint_path(seed);
        if ckpt.exists() {
            log::info!("checkpoint `{}` exists, skipping", ckpt.display());
            continue;
        }
        let csv = config.dataset_csv(seed);
        require(&csv, "dataset", "simulate")?;
        require(&config.dataset_meta(seed), "dataset metadata", "simulate")?;
        let dataset = Dataset::load(&csv, &config.dataset_meta(seed))?;
        let task = make_task(&config.task)?;
        log::info!(
            "training {} flow on `{}`, seed {seed}",
            config.variant.tag(),
            config.task
        );
        let (pipeline, result) = train_pipeline(
            task,
            &dataset,
            config.variant,
            &config.arch,
            &config.train,
            stage_seed(seed, Stage::Train),
        )?;
        for w in &result.warnings {
            log::warn!("seed {seed}: {w}");
        }
        create_parent(&ckpt)?;
        pipeline.save(&ckpt, &hash)?;
        let history = config.history_path(seed);
        result.write_history_csv(&history)?;
        let summary = TrainSummary {
            task: config.task.clone(),
            seed,
            variant: config.variant.tag().to_string(),
            best_epoch: result.best_epoch,
            best_val_loss: result.best_val_loss,
            epochs_run: result.history.len().saturating_sub(1),
            warnings: result.warnings.clone(),
            config_hash: hash.clone(),
            history_sha256: sha256_hex(&std::fs::read(&history)?),
            checkpoint_sha256: sha256_hex(&std::fs::read(&ckpt)?),
        };
        write_json(&config.train_meta_path(seed), &summary)?;
    }
    Ok(())
}

/// Draw posterior samples from the trained flow for every seed.
pub fn cmd_sample(config: &RunConfig) -> Result<(), CpeError> {
    config.validate()?;
    let hash = config.config_hash();
    for &seed in &config.seeds {
        let csv = config.samples_csv(seed);
        let meta = config.samples_meta(seed);
        if csv.exists() && meta.exists() {
            log::info!("samples `{}` exist, skipping", csv.display());
            continue;
        }
        let ckpt = config.checkpoint_path(seed);
        require(&ckpt, "checkpoint", "train")?;
        let (pipeline, header) = FlowPipeline::load(&ckpt).map_err(|e| match e {
            CpeError::Data(_) => e,
            other => CpeError::Data(format!(
                "cannot load checkpoint `{}`: {other}",
                ckpt.display()
            )),
        })?;
        if header.config_hash != hash {
            log::warn!(
                "checkpoint `{}` was produced by config {}, current config is {hash}",
                ckpt.display(),
                header.config_hash
            );
        }
        if pipeline.task.name() != config.task {
            return Err(CpeError::Config(format!(
                "checkpoint `{}` was trained on task `{}`, config says `{}`",
                ckpt.display(),
                pipeline.task.name(),
                config.task
            )));
        }
        if pipeline.net.variant != config.variant {
            return Err(CpeError::Config(format!(
                "checkpoint `{}` holds a {} flow, config says {}",
                ckpt.display(),
                pipeline.net.variant.tag(),
                config.variant.tag()
            )));
        }
        let obs = ensure_observation(config, seed)?;
        let x_obs = Array1::from(obs.x_obs.clone());
        let sample_seed = stage_seed(seed, Stage::Sample);
        log::info!(
            "drawing {} samples with {} for seed {seed}",
            config.n_samples,
            config.solver_tag()
        );
        let mut set = match config.variant {
            FlowVariant::Continuous => match config.solver {
                Solver::Euler => euler_sample(
                    &pipeline,
                    x_obs.view(),
                    config.n_samples,
                    config.euler_steps,
                    sample_seed,
                )?,
                Solver::Rk45 => rk45_sample(
                    &pipeline,
                    x_obs.view(),
                    config.n_samples,
                    config.rk45_rtol,
                    config.rk45_atol,
                    sample_seed,
                )?,
            },
            FlowVariant::Discrete => {
                let dnet = DiscreteFlowNet::from_net(pipeline.net.clone());
                discrete_sample(
                    &pipeline,
                    &dnet,
                    x_obs.view(),
                    config.n_samples,
                    config.invert_tol,
                    sample_seed,
                )?
            }
        };
        set.seed = seed;
        set.config_hash = Some(hash.clone());
        for w in &set.warnings {
            log::warn!("seed {seed}: {w}");
        }
        write_sample_set(&set, &csv, &meta, config)?;
    }
    Ok(())
}

/// Build the slice-sampler reference posterior for every seed.
pub fn cmd_reference(config: &RunConfig) -> Result<(), CpeError> {
    config.validate()?;
    let hash = config.config_hash();
    for &seed in &config.seeds {
        let csv = config.reference_csv(seed);
        let meta = config.reference_meta(seed);
        if csv.exists() && meta.exists() {
            log::info!("reference `{}` exists, skipping", csv.display());
            continue;
        }
        let task = make_task(&config.task)?;
        let obs = ensure_observation(config, seed)?;
        let x_obs = Array1::from(obs.x_obs.clone());
        log::info!(
            "running {} reference chains for seed {seed}",
            config.reference.chains
        );
        let mut set = slice_sample_reference(
            task.as_ref(),
            x_obs.view(),
            &config.reference,
            stage_seed(seed, Stage::Reference),
        )?;
        set.seed = seed;
        set.config_hash = Some(hash.clone());
        for w in &set.warnings {
            log::warn!("seed {seed}: {w}");
        }
        write_sample_set(&set, &csv, &meta, config)?;
    }
    Ok(())
}

/// Evaluate flow samples against the reference for every seed, then rebuild
/// the result tables from all reports under the output root.
pub fn cmd_evaluate(config: &RunConfig) -> Result<(), CpeError> {
    config.validate()?;
    let hash = config.config_hash();
    for &seed in &config.seeds {
        let report_path = config.report_path(seed);
        if report_path.exists() {
            log::info!("report `{}` exists, skipping", report_path.display());
        } else {
            require(&config.samples_csv(seed), "samples", "sample")?;
            require(&config.samples_meta(seed), "sample metadata", "sample")?;
            require(&config.reference_csv(seed), "reference samples", "reference")?;
            require(&config.reference_meta(seed), "reference metadata", "reference")?;
            let candidate =
                SampleSet::read(&config.samples_csv(seed), &config.samples_meta(seed))?;
            let reference =
                SampleSet::read(&config.reference_csv(seed), &config.reference_meta(seed))?;
            log::info!("evaluating seed {seed}");
            let mut report = EvalReport::compare(
                &candidate,
                &reference,
                &config.task,
                config.n_train,
                &config.c2st,
                stage_seed(seed, Stage::Evaluate),
            )?;
            report.seed = seed;
            report.config_hash = Some(hash.clone());
            write_json(&report_path, &report)?;
        }
    }
    rebuild_tables(config)
}

/// Run the whole pipeline for the configured grid: simulate, train, sample,
/// reference, evaluate.
pub fn cmd_benchmark(config: &RunConfig) -> Result<(), CpeError> {
    cmd_simulate(config)?;
    cmd_train(config)?;
    cmd_sample(config)?;
    cmd_reference(config)?;
    cmd_evaluate(config)
}

/// Flattened result row; `results.csv` holds one per report.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultRow {
    task: String,
    method: String,
    solver: String,
    n_train: usize,
    seed: u64,
    c2st: f64,
    mean_error: f64,
    cov_error: f64,
    acceptance_rate: f64,
    config_hash: String,
}

/// Seed-averaged row of `summary.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryRow {
    task: String,
    method: String,
    solver: String,
    n_train: usize,
    seeds: usize,
    c2st: f64,
    mean_error: f64,
    cov_error: f64,
    acceptance_rate: f64,
}

/// Rewrite `results.csv` and `summary.csv` from every report found under the
/// output root. Deterministic: rows are sorted, and rerunning without new
/// reports reproduces the tables byte for byte.
pub fn rebuild_tables(config: &RunConfig) -> Result<(), CpeError> {
    let mut reports: Vec<EvalReport> = Vec::new();
    collect_reports(&config.output_dir, &mut reports)?;
    reports.sort_by(|a, b| {
        (&a.task, &a.method, &a.solver, a.n_train, a.seed).cmp(&(
            &b.task,
            &b.method,
            &b.solver,
            b.n_train,
            b.seed,
        ))
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &reports {
        w.serialize(ResultRow {
            task: r.task.clone(),
            method: r.method.clone(),
            solver: r.solver.clone(),
            n_train: r.n_train,
            seed: r.seed,
            c2st: r.c2st,
            mean_error: r.mean_error,
            cov_error: r.cov_error,
            acceptance_rate: r.acceptance_rate,
            config_hash: r.config_hash.clone().unwrap_or_default(),
        })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CpeError::Serialization(e.to_string()))?;
    create_parent(&config.results_csv())?;
    std::fs::write(config.results_csv(), bytes)?;

    let mut groups: BTreeMap<(String, String, String, usize), Vec<&EvalReport>> = BTreeMap::new();
    for r in &reports {
        groups
            .entry((r.task.clone(), r.method.clone(), r.solver.clone(), r.n_train))
            .or_default()
            .push(r);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for ((task, method, solver, n_train), rows) in &groups {
        let n = rows.len() as f64;
        w.serialize(SummaryRow {
            task: task.clone(),
            method: method.clone(),
            solver: solver.clone(),
            n_train: *n_train,
            seeds: rows.len(),
            c2st: rows.iter().map(|r| r.c2st).sum::<f64>() / n,
            mean_error: rows.iter().map(|r| r.mean_error).sum::<f64>() / n,
            cov_error: rows.iter().map(|r| r.cov_error).sum::<f64>() / n,
            acceptance_rate: rows.iter().map(|r| r.acceptance_rate).sum::<f64>() / n,
        })?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CpeError::Serialization(e.to_string()))?;
    std::fs::write(config.summary_csv(), bytes)?;
    Ok(())
}

/// Recursively gather every `report_*.json` under `dir`.
fn collect_reports(dir: &Path, out: &mut Vec<EvalReport>) -> Result<(), CpeError> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_reports(&path, out)?;
        } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name.starts_with("report_") && name.ends_with(".json") {
                out.push(read_json(&path, "report")?);
            }
        }
    }
    Ok(())
}

/// Write a sample set's CSV plus a sidecar carrying the CSV content hash.
fn write_sample_set(
    set: &SampleSet,
    csv_path: &Path,
    meta_path: &Path,
    config: &RunConfig,
) -> Result<(), CpeError> {
    create_parent(csv_path)?;
    set.write_csv(csv_path)?;
    let mut meta = set.meta();
    meta.extra
        .insert("csv_sha256".into(), sha256_hex(&std::fs::read(csv_path)?));
    meta.extra.insert("task".into(), config.task.clone());
    meta.extra
        .insert("n_train".into(), config.n_train.to_string());
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Error for an absent upstream artifact, naming the file and the stage
/// that produces it.
fn require(path: &Path, what: &str, stage: &str) -> Result<(), CpeError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CpeError::Data(format!(
            "missing {what} `{}`; run the {stage} stage first",
            path.display()
        )))
    }
}

fn create_parent(path: &Path) -> Result<(), CpeError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CpeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CpeError::Data(format!("cannot read {what} `{}`: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CpeError::Data(format!("malformed {what} `{}`: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CpeError> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
