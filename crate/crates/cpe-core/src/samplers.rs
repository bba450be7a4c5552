//! Posterior sampling: fixed-step Euler and adaptive Runge-Kutta 5(4)
//! integration of the learned vector field, discrete-flow inversion
//! sampling, and prior-support rejection accounting.
//!
//! The generic integrators in this module operate on caller-supplied
//! fields and serve as the numeric backbone for the network-backed
//! entry points [`euler_sample`], [`rk45_sample`] and [`discrete_sample`],
//! which draw base samples from the task prior, integrate or invert in the
//! pipeline's standardized space, and filter the results to the prior
//! support.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dcpeflow::{invert_batch, DiscreteFlowNet};
use crate::error::CpeError;
use crate::exec;
use crate::math::{substream, Rng};
use crate::train::FlowPipeline;

/// A set of accepted posterior samples with rejection accounting.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// Accepted samples, one row per draw (task parameter layout).
    pub samples: Array2<f64>,
    /// Total proposals made, including rejected and failed trajectories.
    pub proposed: usize,
    /// Producing method: `cpe`, `dcpe` or `reference`.
    pub method: String,
    /// Solver tag: `euler20`, `rk45`, `bisect`, `slice`.
    pub solver: String,
    /// Seed the draws were generated from.
    pub seed: u64,
    /// Diagnostics accumulated during sampling (e.g. convergence warnings).
    pub warnings: Vec<String>,
    /// Hash of the run configuration that produced this set, if any.
    pub config_hash: Option<String>,
}

/// Sidecar metadata serialized next to the sample CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub method: String,
    pub solver: String,
    pub seed: u64,
    pub proposed: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl SampleSet {
    /// Number of accepted samples.
    pub fn accepted(&self) -> usize {
        self.samples.nrows()
    }

    /// Fraction of proposals that were accepted.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted() as f64 / self.proposed as f64
        }
    }

    /// Sidecar metadata record.
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            method: self.method.clone(),
            solver: self.solver.clone(),
            seed: self.seed,
            proposed: self.proposed,
            accepted: self.accepted(),
            acceptance_rate: self.acceptance_rate(),
            warnings: self.warnings.clone(),
            config_hash: self.config_hash.clone(),
            extra: BTreeMap::new(),
        }
    }

    /// Write the samples as CSV (`theta_0..theta_{d-1}` header, one row per
    /// draw).
    pub fn write_csv(&self, path: &Path) -> Result<(), CpeError> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.samples.ncols();
        w.write_record((0..d).map(|i| format!("theta_{i}")))?;
        for row in self.samples.rows() {
            w.serialize(row.iter().collect::<Vec<_>>())?;
        }
        w.flush().map_err(|e| CpeError::Serialization(e.to_string()))?;
        Ok(())
    }

    /// Write the sidecar metadata JSON.
    pub fn write_meta(&self, path: &Path) -> Result<(), CpeError> {
        let text = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Read a sample CSV together with its metadata sidecar.
    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<Self, CpeError> {
        let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let samples = read_sample_csv(csv_path)?;
        if samples.nrows() != meta.accepted {
            return Err(CpeError::Data(format!(
                "sample file {} has {} rows but metadata records {}",
                csv_path.display(),
                samples.nrows(),
                meta.accepted
            )));
        }
        Ok(SampleSet {
            samples,
            proposed: meta.proposed,
            method: meta.method,
            solver: meta.solver,
            seed: meta.seed,
            warnings: meta.warnings,
            config_hash: meta.config_hash,
        })
    }
}

/// Read a bare samples CSV (header row then one draw per row).
pub fn read_sample_csv(path: &Path) -> Result<Array2<f64>, CpeError> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for record in r.records() {
        let record = record?;
        if record.len() != width {
            return Err(CpeError::Data(format!(
                "ragged row in {}: expected {width} fields, got {}",
                path.display(),
                record.len()
            )));
        }
        for field in record.iter() {
            rows.push(field.parse::<f64>().map_err(|e| {
                CpeError::Data(format!("bad number `{field}` in {}: {e}", path.display()))
            })?);
        }
        count += 1;
    }
    Array2::from_shape_vec((count, width), rows)
        .map_err(|e| CpeError::Shape(e.to_string()))
}

/// Advance one state from `t=0` to `t=1` with `steps` fixed Euler steps,
/// evaluating the field at the left endpoint of each step.
pub fn euler_integrate<F>(
    theta0: ArrayView1<f64>,
    steps: usize,
    mut field: F,
) -> Result<Array1<f64>, CpeError>
where
    F: FnMut(f64, ArrayView1<f64>) -> Result<Array1<f64>, CpeError>,
{
    assert!(steps > 0, "need at least one step");
    let h = 1.0 / steps as f64;
    let mut y = theta0.to_owned();
    for k in 0..steps {
        let t = k as f64 * h;
        let v = field(t, y.view())?;
        y.scaled_add(h, &v);
        if y.iter().any(|z| !z.is_finite()) {
            return Err(CpeError::Numeric(format!(
                "non-finite state after Euler step {k}"
            )));
        }
    }
    Ok(y)
}

/// Dormand-Prince 5(4) coefficients.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const MIN_STEP: f64 = 1e-12;
const MAX_RK_STEPS: usize = 100_000;

/// Integrate one state from `t0` to `t1` with an adaptive Dormand-Prince
/// 5(4) solver.
pub fn rk45_integrate<F>(
    theta0: ArrayView1<f64>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    mut field: F,
) -> Result<Array1<f64>, CpeError>
where
    F: FnMut(f64, ArrayView1<f64>) -> Result<Array1<f64>, CpeError>,
{
    assert!(t1 > t0, "integration interval must be forward");
    let d = theta0.len();
    let mut t = t0;
    let mut y = theta0.to_owned();
    let mut h = 0.1 * (t1 - t0);
    let mut k: Vec<Array1<f64>> = vec![Array1::zeros(d); 7];
    k[0] = field(t, y.view())?;
    let mut attempts = 0usize;
    while t < t1 {
        attempts += 1;
        if attempts > MAX_RK_STEPS {
            return Err(CpeError::Numeric("adaptive solver exceeded step budget".into()));
        }
        h = h.min(t1 - t);
        if h < MIN_STEP {
            return Err(CpeError::Numeric("adaptive solver step size underflow".into()));
        }
        let mut failed = false;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    ys.scaled_add(h * a, kj);
                }
            }
            if ys.iter().any(|z| !z.is_finite()) {
                failed = true;
                break;
            }
            k[s] = field(t + DP_C[s] * h, ys.view())?;
            if k[s].iter().any(|z| !z.is_finite()) {
                failed = true;
                break;
            }
        }
        if failed {
            h *= 0.5;
            continue;
        }
        let mut y5 = y.clone();
        let mut err_sq = 0.0;
        for i in 0..d {
            let mut dy5 = 0.0;
            let mut dy4 = 0.0;
            for (s, ks) in k.iter().enumerate() {
                dy5 += DP_B5[s] * ks[i];
                dy4 += DP_B4[s] * ks[i];
            }
            y5[i] += h * dy5;
            let scale = atol + rtol * y[i].abs().max(y5[i].abs());
            let e = h * (dy5 - dy4) / scale;
            err_sq += e * e;
        }
        let err = (err_sq / d as f64).sqrt();
        if !err.is_finite() || y5.iter().any(|z| !z.is_finite()) {
            h *= 0.5;
            continue;
        }
        if err <= 1.0 {
            t += h;
            // First-same-as-last: stage 7 was evaluated at (t + h, y5).
            k.swap(0, 6);
            y = y5;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
    }
    Ok(y)
}

/// Filter candidate rows to the prior support.
///
/// Rows with non-finite entries or prior log-density of negative infinity
/// are dropped; `proposed` counts every candidate row.
pub fn rejection_filter<F>(
    candidates: ArrayView2<f64>,
    prior_logpdf: F,
    method: &str,
    solver: &str,
    seed: u64,
) -> SampleSet
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    let d = candidates.ncols();
    let mut kept: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for row in candidates.rows() {
        if row.iter().all(|v| v.is_finite()) && prior_logpdf(row) > f64::NEG_INFINITY {
            kept.extend(row.iter());
            n += 1;
        }
    }
    SampleSet {
        samples: Array2::from_shape_vec((n, d), kept).expect("row-major fill"),
        proposed: candidates.nrows(),
        method: method.to_string(),
        solver: solver.to_string(),
        seed,
        warnings: Vec::new(),
        config_hash: None,
    }
}

/// Proposal cap multiplier: sampling stops with an error after `10 n`
/// proposals without `n` acceptances.
const PROPOSAL_CAP_FACTOR: usize = 10;

fn batched_rejection_sample<G>(
    pipeline: &FlowPipeline,
    n: usize,
    seed: u64,
    method: &str,
    solver: &str,
    mut propose: G,
) -> Result<SampleSet, CpeError>
where
    G: FnMut(usize, u64) -> Result<Array2<f64>, CpeError>,
{
    assert!(n >= 1, "need at least one sample");
    let cap = PROPOSAL_CAP_FACTOR * n;
    let d = pipeline.task.theta_dim();
    let mut kept: Vec<f64> = Vec::new();
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut round = 0u64;
    while accepted < n {
        let want = (n - accepted).min(cap - proposed);
        if want == 0 {
            return Err(CpeError::Numeric(format!(
                "accepted only {accepted}/{n} samples after {proposed} proposals"
            )));
        }
        let batch = propose(want, round)?;
        proposed += batch.nrows();
        for row in batch.rows() {
            if accepted == n {
                break;
            }
            if row.iter().all(|v| v.is_finite())
                && pipeline.task.prior_logpdf(row) > f64::NEG_INFINITY
            {
                kept.extend(row.iter());
                accepted += 1;
            }
        }
        round += 1;
    }
    Ok(SampleSet {
        samples: Array2::from_shape_vec((accepted, d), kept).expect("row-major fill"),
        proposed,
        method: method.to_string(),
        solver: solver.to_string(),
        seed,
        warnings: Vec::new(),
        config_hash: None,
    })
}

/// Draw `n` posterior samples by integrating the learned field with a
/// fixed-step Euler solver (`steps` defaults to 20 in the CLI).
///
/// Trajectories start at fresh prior draws, advance jointly in the
/// pipeline's network space, and are de-standardized and rejection-filtered
/// at the end. Trajectories that leave the finite range are discarded but
/// still counted as proposals.
pub fn euler_sample(
    pipeline: &FlowPipeline,
    x_obs: ArrayView1<f64>,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<SampleSet, CpeError> {
    assert!(steps > 0, "need at least one step");
    let compiled = pipeline.net.compile();
    let x_net = pipeline.data_to_net(x_obs)?;
    let data = compiled.embed_data(x_net.view().insert_axis(Axis(0)))?;
    let h = 1.0 / steps as f64;
    let solver = format!("euler{steps}");
    batched_rejection_sample(pipeline, n, seed, "cpe", &solver, |want, round| {
        let mut rng = proposal_rng(seed, round);
        let mut theta = pipeline.prior_to_net_batch(want, &mut rng)?;
        for k in 0..steps {
            let t = k as f64 * h;
            let ts = vec![t; theta.nrows()];
            let cond = compiled.condition(Some(&ts), &data, theta.nrows());
            let cache = compiled.forward(theta.view(), &cond);
            let v = compiled.output(theta.view(), &cache);
            theta.scaled_add(h, &v);
        }
        pipeline.net_to_task_batch(theta.view())
    })
}

/// Draw `n` posterior samples by integrating each trajectory with the
/// adaptive Runge-Kutta 5(4) solver.
pub fn rk45_sample(
    pipeline: &FlowPipeline,
    x_obs: ArrayView1<f64>,
    n: usize,
    rtol: f64,
    atol: f64,
    seed: u64,
) -> Result<SampleSet, CpeError> {
    let compiled = pipeline.net.compile();
    let x_net = pipeline.data_to_net(x_obs)?;
    let data = compiled.embed_data(x_net.view().insert_axis(Axis(0)))?;
    batched_rejection_sample(pipeline, n, seed, "cpe", "rk45", |want, round| {
        let mut rng = proposal_rng(seed, round);
        let starts = pipeline.prior_to_net_batch(want, &mut rng)?;
        let rows = exec::map_indexed(want, |i| {
            let field = |t: f64, y: ArrayView1<f64>| -> Result<Array1<f64>, CpeError> {
                let theta = y.insert_axis(Axis(0));
                let cond = compiled.condition(Some(&[t]), &data, 1);
                let cache = compiled.forward(theta, &cond);
                let v = compiled.output(theta, &cache);
                Ok(v.row(0).to_owned())
            };
            rk45_integrate(starts.row(i), 0.0, 1.0, rtol, atol, field)
        });
        let d = starts.ncols();
        let mut out = Array2::from_elem((want, d), f64::NAN);
        for (i, row) in rows.into_iter().enumerate() {
            match row {
                Ok(y) => out.row_mut(i).assign(&y),
                // Leave the row non-finite; the rejection filter counts it
                // as a failed proposal.
                Err(CpeError::Numeric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        pipeline.net_to_task_batch(out.view())
    })
}

/// Draw `n` posterior samples from a discrete flow by pushing base draws
/// through the numerically inverted transform.
pub fn discrete_sample(
    pipeline: &FlowPipeline,
    dnet: &DiscreteFlowNet,
    x_obs: ArrayView1<f64>,
    n: usize,
    tol: f64,
    seed: u64,
) -> Result<SampleSet, CpeError> {
    let x_net = pipeline.data_to_net(x_obs)?;
    let x_row = x_net.view().insert_axis(Axis(0));
    batched_rejection_sample(pipeline, n, seed, "dcpe", "bisect", |want, round| {
        let mut rng = proposal_rng(seed, round);
        let z = pipeline.prior_to_net_batch(want, &mut rng)?;
        match invert_batch(dnet, z.view(), x_row, tol) {
            Ok(theta) => pipeline.net_to_task_batch(theta.view()),
            // A failed batch counts as rejected proposals.
            Err(CpeError::Inversion(_)) => Ok(Array2::from_elem(z.raw_dim(), f64::NAN)),
            Err(e) => Err(e),
        }
    })
}

/// Deterministic, worker-count-independent RNG for proposal round `round`
/// of a sampling run.
pub(crate) fn proposal_rng(seed: u64, round: u64) -> Rng {
    // Rounds use a dedicated substream family well away from the
    // per-sample streams used during dataset simulation.
    substream(seed, 1_000_003 + round)
}
