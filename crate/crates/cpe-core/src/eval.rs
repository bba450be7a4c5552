//! Posterior comparison diagnostics.
//!
//! The main instrument is the classifier two-sample test ([`c2st`]): a small
//! MLP is trained to distinguish two sample sets and its cross-validated
//! held-out accuracy is the statistic. Accuracy near 0.5 means the sets are
//! statistically indistinguishable to the classifier; accuracy near 1.0 means
//! they are trivially separable. [`moment_report`] adds first and second
//! moment discrepancies, and [`cluster_inertia_ratio`] quantifies bimodality
//! for the two-moons geometry. [`EvalReport`] bundles the metrics for one
//! (task, method, seed) run into a serializable row.

use crate::error::CpeError;
use crate::exec;
use crate::math::{frobenius_norm, sample_cov, sample_mean, substream, Rng};
use crate::params::{ParamStore, TensorId};
use crate::samplers::SampleSet;
use crate::train::{Adam, Standardizer, TrainConfig};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Minimum number of samples per set for a meaningful c2st estimate.
pub const MIN_C2ST_SAMPLES: usize = 500;

/// Configuration of the classifier two-sample test.
///
/// The classifier is an MLP with two tanh hidden layers of `hidden` units
/// trained with the same Adam settings as the flow models. Inputs are
/// standardized jointly across both sets and class sizes are balanced by
/// subsampling the larger set, so the chance level is exactly 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct C2stConfig {
    /// Width of both hidden layers.
    pub hidden: usize,
    /// Number of cross-validation folds.
    pub folds: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Minibatch size.
    pub batch_size: usize,
    /// Maximum training epochs per fold.
    pub max_epochs: usize,
    /// Epochs without training-loss improvement before a fold stops early.
    pub patience: usize,
}

impl Default for C2stConfig {
    fn default() -> Self {
        C2stConfig {
            hidden: 64,
            folds: 5,
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl C2stConfig {
    /// Check the configuration for internal consistency.
    pub fn validate(&self) -> Result<(), CpeError> {
        if self.folds < 2 {
            return Err(CpeError::Config(format!(
                "c2st needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CpeError::Config(
                "c2st hidden width, batch size and max epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CpeError::Config(format!(
                "c2st learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One row of evaluation results for a (task, method, seed) run.
///
/// `c2st` stores the folded statistic `max(acc, 1 - acc)` so values start at
/// 0.5 up to fold noise; `mean_error` and `cov_error` come from
/// [`moment_report`] against the reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Benchmark task name.
    pub task: String,
    /// Producing method of the candidate set (`cpe`, `dcpe`, `reference`).
    pub method: String,
    /// Solver tag of the candidate set.
    pub solver: String,
    /// Number of training simulations behind the candidate.
    pub n_train: usize,
    /// Seed of the evaluated run.
    pub seed: u64,
    /// Folded classifier two-sample statistic, `max(acc, 1 - acc)`.
    pub c2st: f64,
    /// Euclidean distance between candidate and reference means.
    pub mean_error: f64,
    /// Frobenius distance between candidate and reference covariances.
    pub cov_error: f64,
    /// Acceptance rate of the candidate sampler.
    pub acceptance_rate: f64,
    /// Hash of the run configuration that produced the report, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl EvalReport {
    /// Compare a candidate sample set against a reference set.
    ///
    /// Runs the classifier test and the moment diagnostics and fills the
    /// remaining fields from the candidate's metadata.
    pub fn compare(
        candidate: &SampleSet,
        reference: &SampleSet,
        task: &str,
        n_train: usize,
        config: &C2stConfig,
        seed: u64,
    ) -> Result<EvalReport, CpeError> {
        let acc = c2st(candidate, reference, config, seed)?;
        let (mean_error, cov_error) = moment_report(candidate, reference)?;
        Ok(EvalReport {
            task: task.to_string(),
            method: candidate.method.clone(),
            solver: candidate.solver.clone(),
            n_train,
            seed,
            c2st: acc.max(1.0 - acc),
            mean_error,
            cov_error,
            acceptance_rate: candidate.acceptance_rate(),
            config_hash: None,
        })
    }
}

/// Classifier two-sample test between two sample sets.
///
/// Returns the raw cross-validated held-out accuracy (not folded around 0.5),
/// so values slightly below 0.5 are possible for indistinguishable sets. The
/// result is deterministic in `(A, B, config, seed)`.
pub fn c2st(
    a: &SampleSet,
    b: &SampleSet,
    config: &C2stConfig,
    seed: u64,
) -> Result<f64, CpeError> {
    c2st_arrays(a.samples.view(), b.samples.view(), config, seed)
}

/// [`c2st`] on raw sample matrices (rows are draws).
pub fn c2st_arrays(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    config: &C2stConfig,
    seed: u64,
) -> Result<f64, CpeError> {
    config.validate()?;
    if a.ncols() != b.ncols() {
        return Err(CpeError::Shape(format!(
            "c2st sets have different dims: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < MIN_C2ST_SAMPLES || b.nrows() < MIN_C2ST_SAMPLES {
        return Err(CpeError::Config(format!(
            "c2st needs at least {} samples per set, got {} and {}",
            MIN_C2ST_SAMPLES,
            a.nrows(),
            b.nrows()
        )));
    }
    let d = a.ncols();
    let m = a.nrows().min(b.nrows());

    let rows_a = subsample_rows(a.nrows(), m, &mut substream(seed, 0));
    let rows_b = subsample_rows(b.nrows(), m, &mut substream(seed, 1));
    let mut x = Array2::zeros((2 * m, d));
    let mut y = Array1::zeros(2 * m);
    for (k, &r) in rows_a.iter().enumerate() {
        x.row_mut(k).assign(&a.row(r));
        y[k] = 1.0;
    }
    for (k, &r) in rows_b.iter().enumerate() {
        x.row_mut(m + k).assign(&b.row(r));
        y[m + k] = -1.0;
    }
    let std = Standardizer::fit(x.view());
    let x = std.forward_batch(x.view());

    let mut perm: Vec<usize> = (0..2 * m).collect();
    perm.shuffle(&mut substream(seed, 2));

    let accs = exec::map_indexed(config.folds, |fold| {
        let test: Vec<usize> = perm
            .iter()
            .copied()
            .skip(fold)
            .step_by(config.folds)
            .collect();
        let train: Vec<usize> = perm
            .iter()
            .copied()
            .enumerate()
            .filter(|(i, _)| i % config.folds != fold)
            .map(|(_, r)| r)
            .collect();
        let mut rng = substream(seed, 10 + fold as u64);
        let net = train_classifier(
            take_rows(x.view(), &train).view(),
            take_elems(y.view(), &train).view(),
            config,
            &mut rng,
        );
        net.accuracy(
            take_rows(x.view(), &test).view(),
            take_elems(y.view(), &test).view(),
        )
    });
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// First and second moment discrepancies between two sample sets.
///
/// Returns `(mean error, covariance error)`: the Euclidean distance of the
/// sample means and the Frobenius distance of the unbiased sample
/// covariances. Exactly symmetric in its arguments.
pub fn moment_report(a: &SampleSet, b: &SampleSet) -> Result<(f64, f64), CpeError> {
    moment_report_arrays(a.samples.view(), b.samples.view())
}

/// [`moment_report`] on raw sample matrices (rows are draws).
pub fn moment_report_arrays(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
) -> Result<(f64, f64), CpeError> {
    if a.ncols() != b.ncols() {
        return Err(CpeError::Shape(format!(
            "moment report sets have different dims: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let dmean = sample_mean(a) - sample_mean(b);
    let dcov = sample_cov(a) - sample_cov(b);
    Ok((
        dmean.iter().map(|v| v * v).sum::<f64>().sqrt(),
        frobenius_norm(dcov.view()),
    ))
}

/// Ratio of 1-means to 2-means inertia of a sample set.
///
/// Inertia is the total squared distance of rows to their assigned cluster
/// center. The 2-means solution is the best of several seeded Lloyd runs.
/// Values near 1 indicate a single blob; a well separated two-component set
/// scores high because splitting it removes most of the spread.
pub fn cluster_inertia_ratio(samples: ArrayView2<f64>, seed: u64) -> f64 {
    let n = samples.nrows();
    if n < 2 {
        return 1.0;
    }
    let mean = sample_mean(samples);
    let inertia1: f64 = samples
        .rows()
        .into_iter()
        .map(|r| (&r - &mean).iter().map(|v| v * v).sum::<f64>())
        .sum();
    let restarts = 8;
    let inertia2 = (0..restarts)
        .map(|r| lloyd_two_means(samples, &mut substream(seed, r)))
        .fold(f64::INFINITY, f64::min);
    if inertia2 <= 0.0 {
        if inertia1 <= 0.0 {
            return 1.0;
        }
        return f64::INFINITY;
    }
    inertia1 / inertia2
}

/// One Lloyd run of 2-means; returns the final inertia.
fn lloyd_two_means(samples: ArrayView2<f64>, rng: &mut Rng) -> f64 {
    let n = samples.nrows();
    let d = samples.ncols();
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let mut centers = [samples.row(i).to_owned(), samples.row(j).to_owned()];
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (k, row) in samples.rows().into_iter().enumerate() {
            let d0: f64 = (&row - &centers[0]).iter().map(|v| v * v).sum();
            let d1: f64 = (&row - &centers[1]).iter().map(|v| v * v).sum();
            let c = usize::from(d1 < d0);
            if assign[k] != c {
                assign[k] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = [Array1::<f64>::zeros(d), Array1::<f64>::zeros(d)];
        let mut counts = [0usize; 2];
        for (k, row) in samples.rows().into_iter().enumerate() {
            sums[assign[k]] += &row;
            counts[assign[k]] += 1;
        }
        for c in 0..2 {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    samples
        .rows()
        .into_iter()
        .zip(&assign)
        .map(|(row, &c)| (&row - &centers[c]).iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Draw `m` distinct row indices out of `n` without replacement.
fn subsample_rows(n: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        idx.shuffle(rng);
        idx.truncate(m);
    }
    idx
}

/// Gather the given rows of a matrix into a new matrix.
fn take_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&x.row(r));
    }
    out
}

/// Gather the given entries of a vector into a new vector.
fn take_elems(y: ArrayView1<f64>, rows: &[usize]) -> Array1<f64> {
    Array1::from_iter(rows.iter().map(|&r| y[r]))
}

/// Binary classifier: input -> tanh(hidden) -> tanh(hidden) -> logit.
///
/// Labels are encoded as +1 / -1 and the training loss is the mean logistic
/// loss `softplus(-y * logit)`.
struct Classifier {
    store: ParamStore,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    w3: TensorId,
    b3: TensorId,
}

impl Classifier {
    fn new(in_dim: usize, hidden: usize, rng: &mut Rng) -> Classifier {
        let mut store = ParamStore::new();
        let w1 = store.add_tensor("c2st.w1", hidden, in_dim, true);
        let b1 = store.add_tensor("c2st.b1", hidden, 1, true);
        let w2 = store.add_tensor("c2st.w2", hidden, hidden, true);
        let b2 = store.add_tensor("c2st.b2", hidden, 1, true);
        let w3 = store.add_tensor("c2st.w3", 1, hidden, true);
        let b3 = store.add_tensor("c2st.b3", 1, 1, true);
        for (id, fan_in) in [(w1, in_dim), (w2, hidden), (w3, hidden)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store
                .matrix_mut(id)
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        Classifier {
            store,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    /// Forward pass returning both hidden activations and the logits.
    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let s = &self.store;
        let mut h1 = x.dot(&s.matrix(self.w1).t());
        h1 += &s.vector(self.b1);
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&s.matrix(self.w2).t());
        h2 += &s.vector(self.b2);
        h2.mapv_inplace(f64::tanh);
        let logits = h2.dot(&s.matrix(self.w3).row(0)) + s.vector(self.b3)[0];
        (h1, h2, logits)
    }

    /// Mean logistic loss and its gradient accumulated into `grads`.
    fn loss_grad(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, grads: &mut [f64]) -> f64 {
        let n = x.nrows() as f64;
        let (h1, h2, logits) = self.forward(x);
        let mut loss = 0.0;
        let mut dlogit = Array1::zeros(logits.len());
        for k in 0..logits.len() {
            let z = -y[k] * logits[k];
            loss += softplus(z);
            dlogit[k] = -y[k] * sigmoid(z) / n;
        }
        let s = &self.store;
        let w3 = s.matrix(self.w3).row(0).to_owned();
        let w2 = s.matrix(self.w2).to_owned();

        s.grad_matrix_mut(grads, self.b3)[[0, 0]] += dlogit.sum();
        {
            let mut g = s.grad_matrix_mut(grads, self.w3);
            let gw3 = h2.t().dot(&dlogit);
            g.row_mut(0).zip_mut_with(&gw3, |a, b| *a += b);
        }
        let mut dz2 = Array2::zeros(h2.raw_dim());
        for k in 0..h2.nrows() {
            for c in 0..h2.ncols() {
                dz2[[k, c]] = dlogit[k] * w3[c] * (1.0 - h2[[k, c]] * h2[[k, c]]);
            }
        }
        {
            let mut g = s.grad_matrix_mut(grads, self.w2);
            g += &dz2.t().dot(&h1);
        }
        {
            let mut g = s.grad_matrix_mut(grads, self.b2);
            let gb = dz2.sum_axis(Axis(0));
            g.column_mut(0).zip_mut_with(&gb, |a, b| *a += b);
        }
        let dh1 = dz2.dot(&w2);
        let mut dz1 = dh1;
        for k in 0..h1.nrows() {
            for c in 0..h1.ncols() {
                dz1[[k, c]] *= 1.0 - h1[[k, c]] * h1[[k, c]];
            }
        }
        {
            let mut g = s.grad_matrix_mut(grads, self.w1);
            g += &dz1.t().dot(&x);
        }
        {
            let mut g = s.grad_matrix_mut(grads, self.b1);
            let gb = dz1.sum_axis(Axis(0));
            g.column_mut(0).zip_mut_with(&gb, |a, b| *a += b);
        }
        loss / n
    }

    /// Fraction of rows whose predicted sign matches the label.
    fn accuracy(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
        if x.nrows() == 0 {
            return 0.5;
        }
        let (_, _, logits) = self.forward(x);
        let correct = logits
            .iter()
            .zip(y.iter())
            .filter(|(l, y)| (**l > 0.0) == (**y > 0.0))
            .count();
        correct as f64 / x.nrows() as f64
    }
}

/// Numerically stable `ln(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Train one fold's classifier with minibatch Adam and early stopping on the
/// epoch training loss.
fn train_classifier(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    config: &C2stConfig,
    rng: &mut Rng,
) -> Classifier {
    let net = Classifier::new(x.ncols(), config.hidden, rng);
    let adam_config = TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(&net.store, &adam_config);
    let mut net = net;
    let mut grads = vec![0.0; net.store.len()];
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            let xb = take_rows(x, batch);
            let yb = take_elems(y, batch);
            epoch_loss += net.loss_grad(xb.view(), yb.view(), &mut grads);
            batches += 1;
            adam.step(&mut net.store, &grads);
        }
        epoch_loss /= batches.max(1) as f64;
        if !epoch_loss.is_finite() {
            break;
        }
        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
        }
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    net
}
