//! Dataset simulation, standardization, Adam optimization and the
//! training loops for both flow variants.
//!
//! Training operates in a standardized, unconstrained, flow-ordered
//! coordinate space ("network space"): constrained parameter coordinates
//! are mapped through their [`DimTransform`], every dimension is
//! standardized with statistics fit on the training split, and coordinates
//! are permuted into the posterior-program order. [`FlowPipeline`] bundles
//! the trained network with these maps so that samplers can move between
//! spaces without re-deriving any of them.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cpeflow::{
    interpolate, rectified_loss, rectified_loss_grad, CpeConfig, FlowNet, FlowVariant,
};
use crate::dcpeflow::{ml_loss, ml_loss_grad, BaseDensity, DiscreteFlowNet};
use crate::error::CpeError;
use crate::exec;
use crate::graph::{dependency_mask, invert_program, topological_sort, DependencyMask};
use crate::math::{sha256_hex, substream, Rng};
use crate::params::{CheckpointHeader, ParamStore};
use crate::tasks::{make_task, DimTransform, Task};

/// Simulated training corpus: row `i` of `x` was generated from row `i` of
/// `theta`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Parameter draws, one row per simulation (task layout).
    pub theta: Array2<f64>,
    /// Matching observations.
    pub x: Array2<f64>,
    /// Task registry name.
    pub task: String,
    /// Seed the dataset was simulated from.
    pub seed: u64,
    /// Hash of the run configuration that produced the dataset, if any.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    task: String,
    seed: u64,
    rows: usize,
    theta_dim: usize,
    x_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    csv_sha256: Option<String>,
}

/// Attempts per row before a simulator is declared broken.
const SIM_RETRIES: usize = 100;

/// Simulate `n` independent `(theta, x)` pairs from the task's joint
/// distribution.
///
/// Each row draws from its own RNG substream, so the dataset is identical
/// for a given seed regardless of worker count. Rows with non-finite
/// simulator output are resampled within the row's stream and the total
/// number of resamples is logged.
pub fn simulate_dataset(task: &dyn Task, n: usize, seed: u64) -> Result<Dataset, CpeError> {
    if n == 0 {
        return Err(CpeError::Config("dataset size must be at least 1".into()));
    }
    let rows = exec::map_indexed(n, |i| -> Result<(Array1<f64>, Array1<f64>, usize), CpeError> {
        let mut rng = substream(seed, i as u64);
        for attempt in 0..SIM_RETRIES {
            let theta = task.prior_sample(&mut rng);
            let x = task.simulate(theta.view(), &mut rng);
            if theta.iter().all(|v| v.is_finite()) && x.iter().all(|v| v.is_finite()) {
                return Ok((theta, x, attempt));
            }
        }
        Err(CpeError::Numeric(format!(
            "row {i}: simulator returned non-finite values in {SIM_RETRIES} attempts"
        )))
    });

    let mut theta = Array2::zeros((n, task.theta_dim()));
    let mut x = Array2::zeros((n, task.x_dim()));
    let mut resampled = 0usize;
    for (i, row) in rows.into_iter().enumerate() {
        let (t, o, retries) = row?;
        theta.row_mut(i).assign(&t);
        x.row_mut(i).assign(&o);
        resampled += retries;
    }
    if resampled > 0 {
        log::warn!("simulate_dataset({}): resampled {resampled} non-finite rows", task.name());
    }
    Ok(Dataset { theta, x, task: task.name().to_string(), seed, config_hash: None })
}

impl Dataset {
    /// Number of simulations.
    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    /// True when the dataset has no rows.
    pub fn is_empty(&self) -> bool {
        self.theta.nrows() == 0
    }

    /// Write the dataset as a CSV (`theta_*` then `x_*` columns) plus a
    /// JSON metadata sidecar.
    pub fn save(&self, csv_path: &Path, meta_path: &Path) -> Result<(), CpeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let (d_t, d_x) = (self.theta.ncols(), self.x.ncols());
        let header: Vec<String> = (0..d_t)
            .map(|i| format!("theta_{i}"))
            .chain((0..d_x).map(|i| format!("x_{i}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<f64> =
                self.theta.row(i).iter().chain(self.x.row(i).iter()).copied().collect();
            w.serialize(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CpeError::Serialization(e.to_string()))?;
        std::fs::write(csv_path, &bytes)?;
        let meta = DatasetMeta {
            task: self.task.clone(),
            seed: self.seed,
            rows: self.len(),
            theta_dim: d_t,
            x_dim: d_x,
            config_hash: self.config_hash.clone(),
            csv_sha256: Some(sha256_hex(&bytes)),
        };
        std::fs::write(meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Read a dataset written by [`Dataset::save`].
    pub fn load(csv_path: &Path, meta_path: &Path) -> Result<Self, CpeError> {
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(meta_path).map_err(|e| {
                CpeError::Data(format!("cannot read dataset metadata `{}`: {e}", meta_path.display()))
            })?,
        )?;
        let bytes = std::fs::read(csv_path)
            .map_err(|e| CpeError::Data(format!("cannot read dataset `{}`: {e}", csv_path.display())))?;
        if let Some(expected) = &meta.csv_sha256 {
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(CpeError::Data(format!(
                    "dataset `{}` content hash {actual} does not match its metadata sidecar ({expected})",
                    csv_path.display()
                )));
            }
        }
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let width = meta.theta_dim + meta.x_dim;
        let mut theta = Array2::zeros((meta.rows, meta.theta_dim));
        let mut x = Array2::zeros((meta.rows, meta.x_dim));
        let mut count = 0usize;
        for (i, record) in reader.deserialize::<Vec<f64>>().enumerate() {
            let row = record?;
            if i >= meta.rows || row.len() != width {
                return Err(CpeError::Data(format!(
                    "dataset `{}` does not match its metadata sidecar",
                    csv_path.display()
                )));
            }
            theta.row_mut(i).assign(&ArrayView1::from(&row[..meta.theta_dim]));
            x.row_mut(i).assign(&ArrayView1::from(&row[meta.theta_dim..]));
            count += 1;
        }
        if count != meta.rows {
            return Err(CpeError::Data(format!(
                "dataset `{}` has {count} rows but metadata records {}",
                csv_path.display(),
                meta.rows
            )));
        }
        Ok(Dataset {
            theta,
            x,
            task: meta.task,
            seed: meta.seed,
            config_hash: meta.config_hash,
        })
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    /// Epochs without a validation improvement before training stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            max_epochs: 2000,
            val_fraction: 0.1,
            patience: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CpeError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CpeError::Config(format!(
                "validation fraction {} must lie strictly between 0 and 1",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(CpeError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CpeError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Standard-deviation floor protecting constant dimensions.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension affine map to zero mean and unit standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    /// Fit mean and standard deviation per column.
    pub fn fit(data: ArrayView2<f64>) -> Standardizer {
        let n = data.nrows();
        let mut mean = Vec::with_capacity(data.ncols());
        let mut sd = Vec::with_capacity(data.ncols());
        for col in data.columns() {
            let m = col.sum() / n as f64;
            let var = if n > 1 {
                col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            mean.push(m);
            sd.push(var.sqrt().max(STD_FLOOR));
        }
        Standardizer { mean, sd }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, v: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(v.len(), |i| (v[i] - self.mean[i]) / self.sd[i])
    }

    pub fn inverse(&self, v: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(v.len(), |i| v[i] * self.sd[i] + self.mean[i])
    }

    pub fn forward_batch(&self, data: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(data.raw_dim(), |(r, c)| (data[[r, c]] - self.mean[c]) / self.sd[c])
    }

    pub fn inverse_batch(&self, data: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(data.raw_dim(), |(r, c)| data[[r, c]] * self.sd[c] + self.mean[c])
    }
}

/// Adam state over a parameter store's flat buffer. Updates touch only
/// trainable entries and reapply tensor masks afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Adam {
        Adam {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
            trainable: store.trainable_flags(),
        }
    }

    /// Steps taken so far.
    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One Adam update from the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[f64]) {
        assert_eq!(grads.len(), store.len(), "gradient buffer length mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let values = store.values_mut();
        for i in 0..values.len() {
            if !self.trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        store.apply_masks();
    }
}

/// Derive the posterior-program dependency mask of a task.
pub fn posterior_mask(task: &dyn Task) -> Result<DependencyMask, CpeError> {
    let posterior = invert_program(task.dag());
    let order = topological_sort(&posterior)?;
    dependency_mask(&posterior, &order)
}

fn theta_rows_to_net(
    transforms: &[DimTransform],
    std: &Standardizer,
    task_to_flow: &[usize],
    theta: ArrayView2<f64>,
) -> Result<Array2<f64>, CpeError> {
    let d = transforms.len();
    if theta.ncols() != d {
        return Err(CpeError::Config(format!(
            "parameter rows have {} columns, expected {d}",
            theta.ncols()
        )));
    }
    let mut out = Array2::zeros(theta.raw_dim());
    for (r, row) in theta.rows().into_iter().enumerate() {
        for t in 0..d {
            let u = transforms[t].to_unconstrained(row[t]);
            if !u.is_finite() {
                return Err(CpeError::Numeric(format!(
                    "parameter {t} = {} is outside the transform domain",
                    row[t]
                )));
            }
            out[[r, task_to_flow[t]]] = (u - std.mean[t]) / std.sd[t];
        }
    }
    Ok(out)
}

fn net_rows_to_task(
    transforms: &[DimTransform],
    std: &Standardizer,
    flow_to_task: &[usize],
    net: ArrayView2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(net.raw_dim());
    for (r, row) in net.rows().into_iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            let t = flow_to_task[f];
            let u = v * std.sd[t] + std.mean[t];
            out[[r, t]] = transforms[t].from_unconstrained(u);
        }
    }
    out
}

/// Task prior expressed as a density over the network space, composing the
/// coordinate transforms, standardizers and flow permutation.
pub struct PriorBase<'a> {
    task: &'a dyn Task,
    transforms: &'a [DimTransform],
    std: &'a Standardizer,
    flow_to_task: &'a [usize],
}

impl BaseDensity for PriorBase<'_> {
    fn logpdf_grad(&self, z: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let d = z.len();
        let mut u = Array1::zeros(d);
        let mut theta = Array1::zeros(d);
        for (f, &v) in z.iter().enumerate() {
            let t = self.flow_to_task[f];
            u[t] = v * self.std.sd[t] + self.std.mean[t];
            theta[t] = self.transforms[t].from_unconstrained(u[t]);
        }
        let (mut lp, g_theta) = self.task.prior_logpdf_grad(theta.view());
        let mut grad = Array1::zeros(d);
        for f in 0..d {
            let t = self.flow_to_task[f];
            lp += self.std.sd[t].ln() + self.transforms[t].log_abs_det_jacobian(u[t]);
            let (dtheta_du, dladj_du) = match self.transforms[t] {
                DimTransform::Identity => (1.0, 0.0),
                DimTransform::Log => (u[t].exp(), 1.0),
            };
            grad[f] = (g_theta[t] * dtheta_du + dladj_du) * self.std.sd[t];
        }
        if !lp.is_finite() {
            return (f64::NEG_INFINITY, Array1::zeros(d));
        }
        (lp, grad)
    }
}

/// A trained network together with the maps between the task's parameter
/// space and the network's standardized flow-ordered space.
pub struct FlowPipeline {
    pub task: Box<dyn Task>,
    pub net: FlowNet,
    pub mask: DependencyMask,
    pub transforms: Vec<DimTransform>,
    pub theta_std: Standardizer,
    pub x_std: Standardizer,
}

impl std::fmt::Debug for FlowPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowPipeline")
            .field("task", &self.task.name())
            .field("variant", &self.net.variant)
            .field("theta_dim", &self.mask.theta_dim())
            .field("x_dim", &self.net.x_dim)
            .finish_non_exhaustive()
    }
}

impl FlowPipeline {
    /// Map task-layout parameter rows into network space.
    pub fn theta_to_net_batch(&self, theta: ArrayView2<f64>) -> Result<Array2<f64>, CpeError> {
        theta_rows_to_net(&self.transforms, &self.theta_std, &self.mask.task_to_flow, theta)
    }

    /// Map network-space rows back to task-layout parameters. Non-finite
    /// entries pass through unchanged so failed trajectories can be counted
    /// downstream.
    pub fn net_to_task_batch(&self, net: ArrayView2<f64>) -> Result<Array2<f64>, CpeError> {
        if net.ncols() != self.mask.theta_dim() {
            return Err(CpeError::Config(format!(
                "network rows have {} columns, expected {}",
                net.ncols(),
                self.mask.theta_dim()
            )));
        }
        Ok(net_rows_to_task(&self.transforms, &self.theta_std, &self.mask.flow_to_task, net))
    }

    /// Standardize an observation.
    pub fn data_to_net(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, CpeError> {
        if x.len() != self.task.x_dim() {
            return Err(CpeError::Config(format!(
                "observation has {} dimensions but task {} expects {}",
                x.len(),
                self.task.name(),
                self.task.x_dim()
            )));
        }
        Ok(self.x_std.forward(x))
    }

    /// Draw `n` prior samples and map them into network space.
    pub fn prior_to_net_batch(&self, n: usize, rng: &mut Rng) -> Result<Array2<f64>, CpeError> {
        let mut rows = Array2::zeros((n, self.task.theta_dim()));
        for mut row in rows.rows_mut() {
            row.assign(&self.task.prior_sample(rng));
        }
        self.theta_to_net_batch(rows.view())
    }

    /// The task prior as a base density over network space.
    pub fn base_density(&self) -> PriorBase<'_> {
        PriorBase {
            task: self.task.as_ref(),
            transforms: &self.transforms,
            std: &self.theta_std,
            flow_to_task: &self.mask.flow_to_task,
        }
    }

    /// Write a checkpoint containing all weights and the space maps.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<(), CpeError> {
        let meta = serde_json::json!({
            "task": self.task.name(),
            "arch": self.net.config,
            "theta_std": self.theta_std,
            "x_std": self.x_std,
        });
        let header = CheckpointHeader {
            variant: self.net.variant.tag().to_string(),
            config_hash: config_hash.to_string(),
            meta,
        };
        self.net.store.save(path, &header)
    }

    /// Rebuild a pipeline from a checkpoint written by
    /// [`FlowPipeline::save`].
    pub fn load(path: &Path) -> Result<(FlowPipeline, CheckpointHeader), CpeError> {
        let (store, header) = ParamStore::load(path)?;
        let bad = |why: String| CpeError::Data(format!("checkpoint `{}`: {why}", path.display()));
        let task_name = header.meta["task"]
            .as_str()
            .ok_or_else(|| bad("missing task name".into()))?
            .to_string();
        let arch: CpeConfig = serde_json::from_value(header.meta["arch"].clone())
            .map_err(|e| bad(format!("unreadable architecture: {e}")))?;
        let theta_std: Standardizer = serde_json::from_value(header.meta["theta_std"].clone())
            .map_err(|e| bad(format!("unreadable standardizer: {e}")))?;
        let x_std: Standardizer = serde_json::from_value(header.meta["x_std"].clone())
            .map_err(|e| bad(format!("unreadable standardizer: {e}")))?;
        let variant = match header.variant.as_str() {
            "continuous" => FlowVariant::Continuous,
            "discrete" => FlowVariant::Discrete,
            other => return Err(bad(format!("unknown variant `{other}`"))),
        };
        let task = make_task(&task_name)?;
        let mask = posterior_mask(task.as_ref())?;
        let mut net = FlowNet::new(&mask, task.x_dim(), variant, arch, 0);
        if net.store.len() != store.len()
            || !net
                .store
                .ids()
                .zip(store.ids())
                .all(|(a, b)| net.store.name(a) == store.name(b) && net.store.shape(a) == store.shape(b))
        {
            return Err(bad("weights do not match the rebuilt architecture".into()));
        }
        net.store = store;
        Ok((
            FlowPipeline {
                transforms: task.transforms(),
                mask,
                net,
                theta_std,
                x_std,
                task,
            },
            header,
        ))
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Per-epoch losses; epoch 0 records the initial parameters.
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Validation loss at the returned parameters.
    pub best_val_loss: f64,
    /// Abnormal events (divergence aborts).
    pub warnings: Vec<String>,
}

impl TrainResult {
    /// Write the history as `epoch,train_loss,val_loss` CSV.
    pub fn write_history_csv(&self, path: &Path) -> Result<(), CpeError> {
        let mut w = csv::Writer::from_path(path)?;
        for record in &self.history {
            w.serialize(record)?;
        }
        w.flush().map_err(|e| CpeError::Serialization(e.to_string()))?;
        Ok(())
    }
}

enum NetSlot {
    Continuous(FlowNet),
    Discrete(DiscreteFlowNet),
}

impl NetSlot {
    fn net(&self) -> &FlowNet {
        match self {
            NetSlot::Continuous(n) => n,
            NetSlot::Discrete(d) => &d.net,
        }
    }

    fn net_mut(&mut self) -> &mut FlowNet {
        match self {
            NetSlot::Continuous(n) => n,
            NetSlot::Discrete(d) => &mut d.net,
        }
    }

    fn into_net(self) -> FlowNet {
        match self {
            NetSlot::Continuous(n) => n,
            NetSlot::Discrete(d) => d.net,
        }
    }
}

/// Evaluation chunk size bounding activation-cache memory.
const EVAL_CHUNK: usize = 2048;

fn select_rows(data: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), data.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&data.row(i));
    }
    out
}

/// Fixed validation-side coupling for the rectified objective, drawn once
/// so that epoch-to-epoch validation losses integrate the same points.
struct ValCoupling {
    theta_t: Array2<f64>,
    ts: Vec<f64>,
    target: Array2<f64>,
}

struct SpaceRefs<'a> {
    transforms: &'a [DimTransform],
    theta_std: &'a Standardizer,
    task_to_flow: &'a [usize],
}

fn draw_prior_net(
    task: &dyn Task,
    spaces: &SpaceRefs<'_>,
    n: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>, CpeError> {
    let mut rows = Array2::zeros((n, task.theta_dim()));
    for mut row in rows.rows_mut() {
        row.assign(&task.prior_sample(rng));
    }
    theta_rows_to_net(spaces.transforms, spaces.theta_std, spaces.task_to_flow, rows.view())
}

fn chunked_eval<F>(n: usize, mut f: F) -> Result<f64, CpeError>
where
    F: FnMut(std::ops::Range<usize>) -> Result<f64, CpeError>,
{
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        total += f(start..end)? * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

fn eval_loss(
    slot: &NetSlot,
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    coupling: Option<&ValCoupling>,
    base: &PriorBase<'_>,
) -> Result<f64, CpeError> {
    match slot {
        NetSlot::Continuous(net) => {
            let c = coupling.expect("continuous evaluation needs a coupling");
            chunked_eval(theta.nrows(), |r| {
                rectified_loss(
                    net,
                    c.theta_t.slice(ndarray::s![r.clone(), ..]),
                    &c.ts[r.clone()],
                    x.slice(ndarray::s![r.clone(), ..]),
                    c.target.slice(ndarray::s![r, ..]),
                )
            })
        }
        NetSlot::Discrete(dnet) => chunked_eval(theta.nrows(), |r| {
            ml_loss(
                dnet,
                theta.slice(ndarray::s![r.clone(), ..]),
                x.slice(ndarray::s![r, ..]),
                base,
            )
        }),
    }
}

/// Train a flow for `task` on `dataset` and return the resulting pipeline
/// together with the loss history.
///
/// The dataset is split into training and validation parts with a seeded
/// shuffle, standardizers are fit on the training rows only, and the
/// network minimizing validation loss over all visited epochs is returned.
/// Epochs abort early after `patience` epochs without improvement, or when
/// a loss turns non-finite; the latter is recorded as a warning and the
/// best parameters seen so far are kept.
pub fn train_pipeline(
    task: Box<dyn Task>,
    dataset: &Dataset,
    variant: FlowVariant,
    arch: &CpeConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(FlowPipeline, TrainResult), CpeError> {
    config.validate()?;
    if dataset.task != task.name() {
        return Err(CpeError::Config(format!(
            "dataset was simulated for task `{}`, not `{}`",
            dataset.task,
            task.name()
        )));
    }
    let n = dataset.len();
    if n < 10 {
        return Err(CpeError::Config(format!("training needs at least 10 simulations, got {n}")));
    }
    if dataset.theta.ncols() != task.theta_dim() || dataset.x.ncols() != task.x_dim() {
        return Err(CpeError::Config(format!(
            "dataset shapes ({}, {}) do not match task `{}` ({}, {})",
            dataset.theta.ncols(),
            dataset.x.ncols(),
            task.name(),
            task.theta_dim(),
            task.x_dim()
        )));
    }

    // Validation split: seeded shuffle, held-out head.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, 1));
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = perm.split_at(n_val);

    let transforms = task.transforms();
    let mask = posterior_mask(task.as_ref())?;

    // Unconstrain all parameter rows, then fit statistics on the training
    // split only.
    let mut theta_u = Array2::zeros(dataset.theta.raw_dim());
    for ((r, t), &v) in dataset.theta.indexed_iter() {
        let u = transforms[t].to_unconstrained(v);
        if !u.is_finite() {
            return Err(CpeError::Numeric(format!(
                "dataset row {r}: parameter {t} = {v} is outside the transform domain"
            )));
        }
        theta_u[[r, t]] = u;
    }
    let theta_std = Standardizer::fit(select_rows(theta_u.view(), train_idx).view());
    let x_std = Standardizer::fit(select_rows(dataset.x.view(), train_idx).view());

    let spaces = SpaceRefs {
        transforms: &transforms,
        theta_std: &theta_std,
        task_to_flow: &mask.task_to_flow,
    };
    let theta_net =
        theta_rows_to_net(&transforms, &theta_std, &mask.task_to_flow, dataset.theta.view())?;
    let x_net = x_std.forward_batch(dataset.x.view());
    let th_train = select_rows(theta_net.view(), train_idx);
    let x_train = select_rows(x_net.view(), train_idx);
    let th_val = select_rows(theta_net.view(), val_idx);
    let x_val = select_rows(x_net.view(), val_idx);

    let net = FlowNet::new(&mask, task.x_dim(), variant, arch.clone(), seed);
    let mut slot = match variant {
        FlowVariant::Continuous => NetSlot::Continuous(net),
        FlowVariant::Discrete => NetSlot::Discrete(DiscreteFlowNet::from_net(net)),
    };
    let base = PriorBase {
        task: task.as_ref(),
        transforms: &transforms,
        std: &theta_std,
        flow_to_task: &mask.flow_to_task,
    };

    let val_coupling = match variant {
        FlowVariant::Continuous => {
            let mut rng = substream(seed, 2);
            let theta0 = draw_prior_net(task.as_ref(), &spaces, n_val, &mut rng)?;
            let ts: Vec<f64> = (0..n_val).map(|_| rng.gen::<f64>()).collect();
            let theta_t = interpolate(theta0.view(), th_val.view(), &ts);
            let target = &th_val - &theta0;
            Some(ValCoupling { theta_t, ts, target })
        }
        FlowVariant::Discrete => None,
    };
    let train_coupling = match variant {
        FlowVariant::Continuous => {
            let mut rng = substream(seed, 3);
            let n_train = train_idx.len();
            let theta0 = draw_prior_net(task.as_ref(), &spaces, n_train, &mut rng)?;
            let ts: Vec<f64> = (0..n_train).map(|_| rng.gen::<f64>()).collect();
            let theta_t = interpolate(theta0.view(), th_train.view(), &ts);
            let target = &th_train - &theta0;
            Some(ValCoupling { theta_t, ts, target })
        }
        FlowVariant::Discrete => None,
    };

    let mut adam = Adam::new(&slot.net().store, config);
    let mut grads = vec![0.0; slot.net().store.len()];
    let mut history = Vec::new();
    let mut warnings = Vec::new();

    let init_val = eval_loss(&slot, th_val.view(), x_val.view(), val_coupling.as_ref(), &base)?;
    let init_train =
        eval_loss(&slot, th_train.view(), x_train.view(), train_coupling.as_ref(), &base)?;
    history.push(EpochRecord { epoch: 0, train_loss: init_train, val_loss: init_val });

    let mut best_val = init_val;
    let mut best_epoch = 0usize;
    let mut best_params = slot.net().store.values().to_vec();

    'epochs: for epoch in 1..=config.max_epochs {
        let mut rng = substream(seed, 10_000 + epoch as u64);
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let th_b = select_rows(th_train.view(), chunk);
            let x_b = select_rows(x_train.view(), chunk);
            grads.fill(0.0);
            let loss = match &slot {
                NetSlot::Continuous(net) => {
                    let theta0 = draw_prior_net(task.as_ref(), &spaces, chunk.len(), &mut rng)?;
                    let ts: Vec<f64> = (0..chunk.len()).map(|_| rng.gen::<f64>()).collect();
                    let theta_t = interpolate(theta0.view(), th_b.view(), &ts);
                    let target = &th_b - &theta0;
                    rectified_loss_grad(
                        net,
                        theta_t.view(),
                        &ts,
                        x_b.view(),
                        target.view(),
                        &mut grads,
                    )
                }
                NetSlot::Discrete(dnet) => {
                    ml_loss_grad(dnet, th_b.view(), x_b.view(), &base, &mut grads)
                }
            };
            let loss = match loss {
                Ok(l) => l,
                Err(CpeError::Numeric(why)) => {
                    warnings.push(format!("training aborted at epoch {epoch}: {why}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            adam.step(&mut slot.net_mut().store, &grads);
        }

        let val = match eval_loss(&slot, th_val.view(), x_val.view(), val_coupling.as_ref(), &base)
        {
            Ok(v) => v,
            Err(CpeError::Numeric(why)) => {
                warnings.push(format!("training aborted at epoch {epoch}: {why}"));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / seen.max(1) as f64,
            val_loss: val,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params.copy_from_slice(slot.net().store.values());
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    slot.net_mut().store.values_mut().copy_from_slice(&best_params);
    let pipeline = FlowPipeline {
        net: slot.into_net(),
        mask,
        transforms,
        theta_std,
        x_std,
        task,
    };
    let result = TrainResult { history, best_epoch, best_val_loss: best_val, warnings };
    Ok((pipeline, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Axis;

    fn tiny_arch() -> CpeConfig {
        CpeConfig {
            layers: 2,
            width: 8,
            cond_dim: 8,
            n_freq: 4,
            time_hidden: 8,
            data_hidden: 8,
            ..CpeConfig::default()
        }
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            max_epochs: epochs,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn simulated_theta_mean_is_within_the_clt_bound() {
        let task = make_task("linear_gaussian").unwrap();
        let n = 1000;
        let data = simulate_dataset(task.as_ref(), n, 5).unwrap();
        let sd = 0.1_f64.sqrt();
        for col in data.theta.columns() {
            let mean = col.sum() / n as f64;
            assert!(mean.abs() <= 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
        }
    }

    #[test]
    fn single_row_dataset_has_matching_shapes() {
        let task = make_task("linear_gaussian").unwrap();
        let data = simulate_dataset(task.as_ref(), 1, 0).unwrap();
        assert_eq!(data.theta.dim(), (1, 10));
        assert_eq!(data.x.dim(), (1, 10));
    }

    #[test]
    fn datasets_are_bit_identical_for_a_seed() {
        let task = make_task("two_moons").unwrap();
        let a = simulate_dataset(task.as_ref(), 50, 9).unwrap();
        let b = simulate_dataset(task.as_ref(), 50, 9).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.x, b.x);
        let c = simulate_dataset(task.as_ref(), 50, 10).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let task = make_task("tree").unwrap();
        let data = simulate_dataset(task.as_ref(), 20, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("sims.csv");
        let meta = dir.path().join("sims.json");
        data.save(&csv, &meta).unwrap();
        let loaded = Dataset::load(&csv, &meta).unwrap();
        assert_eq!(loaded.task, "tree");
        assert_eq!(loaded.seed, 3);
        assert_eq!(loaded.theta, data.theta);
        assert_eq!(loaded.x, data.x);
    }

    #[test]
    fn standardizer_round_trip_is_tight() {
        let mut rng = substream(4, 0);
        let data = Array2::from_shape_fn((40, 3), |(r, c)| {
            if c == 2 { 7.5 } else { (r as f64 - 20.0) * (c as f64 + 0.3) + rng.gen::<f64>() }
        });
        let std = Standardizer::fit(data.view());
        assert!(std.sd[2] >= STD_FLOOR);
        for row in data.rows() {
            let back = std.inverse(std.forward(row).view());
            for (a, b) in back.iter().zip(row.iter()) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
        let fwd = std.forward_batch(data.view());
        let back = std.inverse_batch(fwd.view());
        for (a, b) in back.iter().zip(data.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn adam_first_step_matches_the_hand_recurrence() {
        let mut store = ParamStore::new();
        store.add_tensor("p", 1, 1, true);
        store.values_mut()[0] = 0.7;
        let config = TrainConfig { learning_rate: 0.01, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &config);
        adam.step(&mut store, &[1.0]);
        // First step: m_hat = 1, v_hat = 1.
        let expected = 0.7 - 0.01 / (1.0 + 1e-8);
        assert_relative_eq!(store.values()[0], expected, epsilon = 1e-15);
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn adam_zero_gradient_advances_time_but_not_params() {
        let mut store = ParamStore::new();
        store.add_tensor("p", 2, 1, true);
        store.values_mut().copy_from_slice(&[0.3, -1.1]);
        let mut adam = Adam::new(&store, &TrainConfig::default());
        adam.step(&mut store, &[0.0, 0.0]);
        assert_eq!(store.values(), &[0.3, -1.1]);
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn adam_keeps_masked_entries_at_zero() {
        let mut store = ParamStore::new();
        let w = store.add_tensor("w", 2, 1, true);
        store.values_mut().copy_from_slice(&[0.5, 0.5]);
        store.set_mask(w, vec![1.0, 0.0]);
        let mut adam = Adam::new(&store, &TrainConfig { learning_rate: 0.1, ..Default::default() });
        adam.step(&mut store, &[1.0, 1.0]);
        assert_ne!(store.values()[0], 0.5);
        assert_eq!(store.values()[1], 0.0);
    }

    #[test]
    fn adam_reaches_the_minimum_of_a_quadratic() {
        let mut store = ParamStore::new();
        store.add_tensor("p", 3, 1, true);
        let target = [2.0, -1.0, 0.5];
        let scale = [1.0, 4.0, 0.5];
        let config = TrainConfig { learning_rate: 0.05, ..TrainConfig::default() };
        let mut adam = Adam::new(&store, &config);
        for _ in 0..500 {
            let mut grads = [0.0; 3];
            for i in 0..3 {
                grads[i] = scale[i] * (store.values()[i] - target[i]);
            }
            adam.step(&mut store, &grads);
        }
        for i in 0..3 {
            assert!(
                (store.values()[i] - target[i]).abs() <= 1e-3,
                "param {i}: {} vs {}",
                store.values()[i],
                target[i]
            );
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_parameters() {
        let task = make_task("two_moons").unwrap();
        let data = simulate_dataset(task.as_ref(), 40, 7).unwrap();
        let config = TrainConfig { max_epochs: 0, ..quick_config(0) };
        let (pipeline, result) =
            train_pipeline(make_task("two_moons").unwrap(), &data, FlowVariant::Continuous, &tiny_arch(), &config, 42)
                .unwrap();
        let fresh = FlowNet::new(
            &posterior_mask(task.as_ref()).unwrap(),
            task.x_dim(),
            FlowVariant::Continuous,
            tiny_arch(),
            42,
        );
        assert_eq!(pipeline.net.store.values(), fresh.store.values());
        assert_eq!(result.best_epoch, 0);
        assert_eq!(result.history.len(), 1);
    }

    #[test]
    fn training_improves_validation_loss_on_linear_gaussian() {
        let task = make_task("linear_gaussian").unwrap();
        let data = simulate_dataset(task.as_ref(), 256, 11).unwrap();
        let (pipeline, result) = train_pipeline(
            make_task("linear_gaussian").unwrap(),
            &data,
            FlowVariant::Continuous,
            &tiny_arch(),
            &quick_config(40),
            13,
        )
        .unwrap();
        assert!(result.best_val_loss <= result.history[0].val_loss);
        assert!(result.warnings.is_empty(), "{:?}", result.warnings);
        assert_eq!(result.history[0].epoch, 0);
        assert!(pipeline.net.store.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn discrete_training_improves_validation_loss() {
        let task = make_task("tree").unwrap();
        let data = simulate_dataset(task.as_ref(), 200, 21).unwrap();
        let (_, result) = train_pipeline(
            make_task("tree").unwrap(),
            &data,
            FlowVariant::Discrete,
            &tiny_arch(),
            &quick_config(30),
            23,
        )
        .unwrap();
        assert!(result.best_val_loss < result.history[0].val_loss);
        assert!(result.warnings.is_empty(), "{:?}", result.warnings);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let data = simulate_dataset(make_task("two_moons").unwrap().as_ref(), 64, 3).unwrap();
        let run = |seed: u64| {
            let (p, _) = train_pipeline(
                make_task("two_moons").unwrap(),
                &data,
                FlowVariant::Continuous,
                &tiny_arch(),
                &quick_config(3),
                seed,
            )
            .unwrap();
            p.net.store.values().to_vec()
        };
        assert_eq!(run(8), run(8));
        assert_ne!(run(8), run(9));
    }

    #[test]
    fn divergence_aborts_with_partial_history_and_best_params() {
        // A huge learning rate overflows the exponential diagonal of the
        // discrete variant within a few steps.
        let task = make_task("tree").unwrap();
        let data = simulate_dataset(task.as_ref(), 64, 31).unwrap();
        let config = TrainConfig {
            learning_rate: 1e6,
            batch_size: 16,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let (pipeline, result) = train_pipeline(
            make_task("tree").unwrap(),
            &data,
            FlowVariant::Discrete,
            &tiny_arch(),
            &config,
            37,
        )
        .unwrap();
        assert!(!result.warnings.is_empty(), "expected an abort warning");
        assert!(result.warnings[0].contains("aborted"));
        assert!(result.history.len() < 51);
        assert!(pipeline.net.store.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn short_datasets_and_mismatched_tasks_are_rejected() {
        let task = make_task("two_moons").unwrap();
        let data = simulate_dataset(task.as_ref(), 5, 1).unwrap();
        let err = train_pipeline(
            make_task("two_moons").unwrap(),
            &data,
            FlowVariant::Continuous,
            &tiny_arch(),
            &quick_config(1),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CpeError::Config(_)), "{err}");

        let data = simulate_dataset(task.as_ref(), 20, 1).unwrap();
        let err = train_pipeline(
            make_task("tree").unwrap(),
            &data,
            FlowVariant::Continuous,
            &tiny_arch(),
            &quick_config(1),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CpeError::Config(_)), "{err}");
    }

    #[test]
    fn pipeline_space_maps_round_trip_prior_draws() {
        for name in ["hierarchical", "two_moons"] {
            let task = make_task(name).unwrap();
            let data = simulate_dataset(task.as_ref(), 40, 2).unwrap();
            let (pipeline, _) = train_pipeline(
                make_task(name).unwrap(),
                &data,
                FlowVariant::Continuous,
                &tiny_arch(),
                &quick_config(0),
                1,
            )
            .unwrap();
            let mut rng = substream(77, 0);
            let mut thetas = Array2::zeros((20, task.theta_dim()));
            for mut row in thetas.rows_mut() {
                row.assign(&pipeline.task.prior_sample(&mut rng));
            }
            let net = pipeline.theta_to_net_batch(thetas.view()).unwrap();
            let back = pipeline.net_to_task_batch(net.view()).unwrap();
            for (a, b) in back.iter().zip(thetas.iter()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn prior_base_matches_finite_differences_through_all_maps() {
        let task = make_task("hierarchical").unwrap();
        let data = simulate_dataset(task.as_ref(), 60, 6).unwrap();
        let (pipeline, _) = train_pipeline(
            make_task("hierarchical").unwrap(),
            &data,
            FlowVariant::Discrete,
            &tiny_arch(),
            &quick_config(0),
            3,
        )
        .unwrap();
        let base = pipeline.base_density();
        let mut rng = substream(5, 0);
        let theta = pipeline.task.prior_sample(&mut rng);
        let z = pipeline
            .theta_to_net_batch(theta.view().insert_axis(Axis(0)))
            .unwrap()
            .row(0)
            .to_owned();
        let (lp, grad) = base.logpdf_grad(z.view());
        assert!(lp.is_finite());
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (base.logpdf(zp.view()) - base.logpdf(zm.view())) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * (1.0 + fd.abs()),
                "dim {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn checkpoints_round_trip_the_full_pipeline() {
        let task = make_task("hierarchical").unwrap();
        let data = simulate_dataset(task.as_ref(), 60, 4).unwrap();
        let (pipeline, _) = train_pipeline(
            make_task("hierarchical").unwrap(),
            &data,
            FlowVariant::Continuous,
            &tiny_arch(),
            &quick_config(2),
            19,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cpe");
        pipeline.save(&path, "deadbeef").unwrap();
        let (loaded, header) = FlowPipeline::load(&path).unwrap();
        assert_eq!(header.config_hash, "deadbeef");
        assert_eq!(header.variant, "continuous");
        assert_eq!(loaded.task.name(), "hierarchical");
        assert_eq!(loaded.net.store.values(), pipeline.net.store.values());
        assert_eq!(loaded.theta_std, pipeline.theta_std);
        assert_eq!(loaded.x_std, pipeline.x_std);
        assert_eq!(loaded.net.config, pipeline.net.config);

        // Missing file errors must name the path.
        let missing = dir.path().join("absent.cpe");
        let err = FlowPipeline::load(&missing).unwrap_err();
        assert!(err.to_string().contains("absent.cpe"), "{err}");
    }
}
