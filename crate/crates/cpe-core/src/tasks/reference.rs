//! Gradient-free reference posteriors via hit-and-run slice sampling,
//! with rank-normalized split R-hat and effective-sample-size
//! diagnostics.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::CpeError;
use crate::exec;
use crate::math::{std_normal_inv_cdf, substream, Rng};
use crate::samplers::SampleSet;

/// Budget and tuning knobs of the reference sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    /// Number of independent chains.
    pub chains: usize,
    /// Iterations per chain, including warmup.
    pub samples_per_chain: usize,
    /// Leading iterations discarded from every chain.
    pub warmup: usize,
    /// Keep every `thin`-th post-warmup draw.
    pub thin: usize,
    /// Initial slice bracket width along the sampled direction.
    pub step_width: f64,
    /// Attempts to find a finite-density initial point per chain.
    pub init_retries: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            chains: 4,
            samples_per_chain: 5000,
            warmup: 2500,
            thin: 2,
            step_width: 2.0,
            init_retries: 100,
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<(), CpeError> {
        if self.chains == 0 {
            return Err(CpeError::Config("reference sampler needs at least one chain".into()));
        }
        if self.warmup >= self.samples_per_chain {
            return Err(CpeError::Config(format!(
                "warmup {} must be smaller than samples_per_chain {}",
                self.warmup, self.samples_per_chain
            )));
        }
        if self.thin == 0 {
            return Err(CpeError::Config("thin must be at least 1".into()));
        }
        if !(self.step_width > 0.0) {
            return Err(CpeError::Config("step_width must be positive".into()));
        }
        Ok(())
    }
}

/// Threshold above which a split R-hat triggers a convergence warning.
pub const RHAT_WARN: f64 = 1.05;

const MAX_STEPOUT: usize = 1000;
const MAX_SHRINK: usize = 1000;

fn unit_direction(d: usize, rng: &mut Rng) -> Array1<f64> {
    loop {
        let dir: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
        let norm = dir.dot(&dir).sqrt();
        if norm > 0.0 {
            return dir / norm;
        }
    }
}

/// One hit-and-run slice update: sample a random direction, then slice
/// sample the log posterior along that line with stepping out and
/// shrinkage.
fn slice_step<F>(log_post: &F, theta: &mut Array1<f64>, lp: &mut f64, width: f64, rng: &mut Rng)
where
    F: Fn(ArrayView1<f64>) -> f64,
{
    let dir = unit_direction(theta.len(), rng);
    let along = |t: f64| {
        let cand = &*theta + &(t * &dir);
        let f = log_post(cand.view());
        (cand, f)
    };
    let y = *lp + (1.0 - rng.gen::<f64>()).ln();

    let mut lo = -width * rng.gen::<f64>();
    let mut hi = lo + width;
    for _ in 0..MAX_STEPOUT {
        if along(lo).1 <= y {
            break;
        }
        lo -= width;
    }
    for _ in 0..MAX_STEPOUT {
        if along(hi).1 <= y {
            break;
        }
        hi += width;
    }

    for _ in 0..MAX_SHRINK {
        let t = rng.gen_range(lo..hi);
        let (cand, f) = along(t);
        if f > y {
            *theta = cand;
            *lp = f;
            return;
        }
        if t < 0.0 {
            lo = t;
        } else {
            hi = t;
        }
    }
    // The bracket failed to shrink onto the slice; keep the current state,
    // which leaves the target invariant.
}

fn run_chain(
    task: &dyn Task,
    x_obs: ArrayView1<f64>,
    config: &ReferenceConfig,
    seed: u64,
    chain: usize,
) -> Result<Array2<f64>, CpeError> {
    let mut rng = substream(seed, chain as u64);
    let log_post =
        |theta: ArrayView1<f64>| task.prior_logpdf(theta) + task.likelihood_logpdf(theta, x_obs);

    let mut theta = Array1::zeros(task.theta_dim());
    let mut lp = f64::NEG_INFINITY;
    for _ in 0..config.init_retries {
        theta = task.prior_sample(&mut rng);
        lp = log_post(theta.view());
        if lp.is_finite() {
            break;
        }
    }
    if !lp.is_finite() {
        return Err(CpeError::Numeric(format!(
            "chain {chain}: no finite-density initial point in {} prior draws",
            config.init_retries
        )));
    }

    let kept_rows = (config.samples_per_chain - config.warmup).div_ceil(config.thin);
    let mut kept = Array2::zeros((kept_rows, task.theta_dim()));
    let mut row = 0;
    for iter in 0..config.samples_per_chain {
        slice_step(&log_post, &mut theta, &mut lp, config.step_width, &mut rng);
        if iter >= config.warmup && (iter - config.warmup) % config.thin == 0 {
            kept.row_mut(row).assign(&theta);
            row += 1;
        }
    }
    debug_assert_eq!(row, kept_rows);
    Ok(kept)
}

/// Run the configured chains and return the kept draws of each.
pub(crate) fn run_reference_chains(
    task: &dyn Task,
    x_obs: ArrayView1<f64>,
    config: &ReferenceConfig,
    seed: u64,
) -> Result<Vec<Array2<f64>>, CpeError> {
    config.validate()?;
    if x_obs.len() != task.x_dim() {
        return Err(CpeError::Config(format!(
            "observation has {} dimensions but task {} expects {}",
            x_obs.len(),
            task.name(),
            task.x_dim()
        )));
    }
    exec::map_indexed(config.chains, |c| run_chain(task, x_obs, config, seed, c))
        .into_iter()
        .collect()
}

/// Draw a reference posterior sample for `x_obs` with hit-and-run slice
/// sampling.
///
/// Chains run independently from per-chain RNG substreams, warmup draws are
/// dropped, and the kept draws of all chains are concatenated. Dimensions
/// whose rank-normalized split R-hat exceeds [`RHAT_WARN`] are reported in
/// the returned warnings rather than treated as errors.
pub fn slice_sample_reference(
    task: &dyn Task,
    x_obs: ArrayView1<f64>,
    config: &ReferenceConfig,
    seed: u64,
) -> Result<SampleSet, CpeError> {
    let chains = run_reference_chains(task, x_obs, config, seed)?;

    let mut warnings = Vec::new();
    if config.chains > 1 && chains[0].nrows() >= 4 {
        for (d, rhat) in split_rhat(&chains).into_iter().enumerate() {
            if !(rhat <= RHAT_WARN) {
                warnings.push(format!(
                    "split R-hat {rhat:.3} for theta_{d} exceeds {RHAT_WARN}"
                ));
            }
        }
    }

    let views: Vec<ArrayView2<f64>> = chains.iter().map(|c| c.view()).collect();
    let samples = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| CpeError::Numeric(format!("chain concatenation failed: {e}")))?;
    let total = samples.nrows();
    Ok(SampleSet {
        samples,
        proposed: total,
        method: "reference".into(),
        solver: "slice".into(),
        seed,
        warnings,
        config_hash: None,
    })
}

fn ranks_with_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Split every chain in half and collect the resulting sequences as
/// columns of per-dimension matrices.
fn split_sequences(chains: &[Array2<f64>]) -> (usize, Vec<Array2<f64>>) {
    assert!(!chains.is_empty(), "split_rhat needs at least one chain");
    let dim = chains[0].ncols();
    let half = chains.iter().map(|c| c.nrows()).min().unwrap() / 2;
    assert!(half >= 2, "split_rhat needs at least four draws per chain");
    let mut per_dim = vec![Array2::zeros((half, 2 * chains.len())); dim];
    for (c, chain) in chains.iter().enumerate() {
        assert_eq!(chain.ncols(), dim, "chains disagree on dimension");
        for d in 0..dim {
            for i in 0..half {
                per_dim[d][[i, 2 * c]] = chain[[i, d]];
                per_dim[d][[i, 2 * c + 1]] = chain[[half + i, d]];
            }
        }
    }
    (half, per_dim)
}

/// Potential scale reduction of `sequences`, an `n` by `m` matrix holding
/// `m` sequences of length `n` in its columns.
fn rhat_of_sequences(sequences: &Array2<f64>) -> f64 {
    let n = sequences.nrows() as f64;
    let m = sequences.ncols() as f64;
    let means: Vec<f64> = sequences.columns().into_iter().map(|c| c.mean().unwrap()).collect();
    let vars: Vec<f64> = sequences
        .columns()
        .into_iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0))
        .collect();
    let w: f64 = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<f64>();
    if !(w > 0.0) {
        return 1.0;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split R-hat per parameter dimension.
///
/// Each chain is split in half, pooled draws are replaced by normal scores
/// of their fractional ranks, and the classic potential scale reduction is
/// computed on the scores.
pub fn split_rhat(chains: &[Array2<f64>]) -> Vec<f64> {
    let (half, per_dim) = split_sequences(chains);
    per_dim
        .iter()
        .map(|seqs| {
            let flat: Vec<f64> = seqs.t().iter().copied().collect();
            let total = flat.len() as f64;
            let ranks = ranks_with_ties(&flat);
            let mut scores = Array2::zeros(seqs.dim());
            for (k, r) in ranks.iter().enumerate() {
                let z = std_normal_inv_cdf((r - 0.375) / (total + 0.25));
                scores[[k % half, k / half]] = z;
            }
            rhat_of_sequences(&scores)
        })
        .collect()
}

/// Effective sample size per dimension across `chains`, using the initial
/// positive sequence truncation of the pooled autocorrelation estimate.
pub fn effective_sample_size(chains: &[Array2<f64>]) -> Vec<f64> {
    assert!(!chains.is_empty(), "effective_sample_size needs at least one chain");
    let dim = chains[0].ncols();
    let n = chains.iter().map(|c| c.nrows()).min().unwrap();
    assert!(n >= 4, "effective_sample_size needs at least four draws per chain");
    let m = chains.len();
    let total = (m * n) as f64;

    (0..dim)
        .map(|d| {
            let cols: Vec<Vec<f64>> =
                chains.iter().map(|c| c.column(d).iter().take(n).copied().collect()).collect();
            let means: Vec<f64> =
                cols.iter().map(|v| v.iter().sum::<f64>() / n as f64).collect();
            let acov = |c: usize, t: usize| -> f64 {
                let v = &cols[c];
                let mu = means[c];
                (0..n - t).map(|i| (v[i] - mu) * (v[i + t] - mu)).sum::<f64>() / n as f64
            };
            let mean_var =
                (0..m).map(|c| acov(c, 0)).sum::<f64>() / m as f64 * n as f64 / (n - 1) as f64;
            let mut var_plus = mean_var * (n - 1) as f64 / n as f64;
            if m > 1 {
                let grand = means.iter().sum::<f64>() / m as f64;
                var_plus +=
                    means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<f64>()
                        / (m - 1) as f64;
            }
            if !(var_plus > 0.0) {
                return total;
            }
            let rho = |t: usize| -> f64 {
                let pooled = (0..m).map(|c| acov(c, t)).sum::<f64>() / m as f64;
                1.0 - (mean_var - pooled) / var_plus
            };
            let mut pair_sum = 0.0;
            let mut t = 0;
            while t + 1 < n {
                let pair = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
                if pair <= 0.0 {
                    break;
                }
                pair_sum += pair;
                t += 2;
            }
            let tau = (2.0 * pair_sum - 1.0).max(1.0);
            (total / tau).min(total)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{analytic_posterior, make_task};
    use ndarray::array;
    use rand_distr::Normal;

    fn gaussian_chains(m: usize, n: usize, dim: usize, seed: u64) -> Vec<Array2<f64>> {
        (0..m)
            .map(|c| {
                let mut rng = substream(seed, c as u64);
                Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut rng))
            })
            .collect()
    }

    #[test]
    fn split_rhat_is_near_one_for_matching_chains() {
        let chains = gaussian_chains(4, 500, 2, 11);
        for rhat in split_rhat(&chains) {
            assert!(rhat < 1.02, "rhat {rhat}");
            assert!(rhat > 0.95, "rhat {rhat}");
        }
    }

    #[test]
    fn split_rhat_flags_a_shifted_chain() {
        let mut chains = gaussian_chains(4, 500, 2, 12);
        chains[3].column_mut(0).mapv_inplace(|v| v + 3.0);
        let rhat = split_rhat(&chains);
        assert!(rhat[0] > 1.3, "rhat {}", rhat[0]);
        assert!(rhat[1] < 1.02, "rhat {}", rhat[1]);
    }

    #[test]
    fn split_rhat_flags_within_chain_drift() {
        // A chain whose halves have different means is caught by the split
        // even though the chain means agree.
        let mut chains = gaussian_chains(2, 400, 1, 13);
        for c in &mut chains {
            for i in 0..200 {
                c[[i, 0]] -= 1.5;
                c[[200 + i, 0]] += 1.5;
            }
        }
        assert!(split_rhat(&chains)[0] > 1.3);
    }

    #[test]
    fn effective_sample_size_tracks_iid_and_autocorrelated_chains() {
        let iid = gaussian_chains(1, 2000, 1, 21);
        let ess = effective_sample_size(&iid)[0];
        assert!(ess > 1200.0 && ess <= 2000.0, "iid ess {ess}");

        // AR(1) with coefficient 0.9 has integrated autocorrelation time
        // (1 + 0.9) / (1 - 0.9) = 19.
        let mut rng = substream(22, 0);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let n = 20_000;
        let mut chain = Array2::zeros((n, 1));
        let mut state = 0.0;
        for i in 0..n {
            state = 0.9 * state + noise.sample(&mut rng);
            chain[[i, 0]] = state;
        }
        let ess = effective_sample_size(&[chain])[0];
        let expected = n as f64 / 19.0;
        assert!(
            ess > 0.5 * expected && ess < 2.0 * expected,
            "ar1 ess {ess}, expected about {expected}"
        );
    }

    #[test]
    fn reference_config_validation_rejects_inconsistent_budgets() {
        let mut config = ReferenceConfig::default();
        config.warmup = config.samples_per_chain;
        assert!(matches!(config.validate(), Err(CpeError::Config(_))));
        let config = ReferenceConfig { thin: 0, ..ReferenceConfig::default() };
        assert!(matches!(config.validate(), Err(CpeError::Config(_))));
        assert!(ReferenceConfig::default().validate().is_ok());
    }

    #[test]
    fn reference_sampler_recovers_the_linear_gaussian_posterior() {
        let task = make_task("linear_gaussian").unwrap();
        let x_obs = array![0.4, -0.2, 0.9, -0.7, 0.1, 0.3, -0.5, 0.6, 0.0, -0.9];
        let config = ReferenceConfig {
            chains: 4,
            samples_per_chain: 1200,
            warmup: 400,
            thin: 2,
            ..ReferenceConfig::default()
        };
        let chains = run_reference_chains(task.as_ref(), x_obs.view(), &config, 31).unwrap();
        let views: Vec<ArrayView2<f64>> = chains.iter().map(|c| c.view()).collect();
        let pooled = ndarray::concatenate(Axis(0), &views).unwrap();

        let (mean, cov) = analytic_posterior(task.as_ref(), x_obs.view()).unwrap();
        let ess = effective_sample_size(&chains);
        let emp_mean = crate::math::sample_mean(pooled.view());

        // Error bound: three standard errors of the vector mean, using the
        // per-dimension effective sample sizes.
        let se2: f64 = (0..10).map(|d| cov[[d, d]] / ess[d]).sum();
        let err: f64 = (0..10).map(|d| (emp_mean[d] - mean[d]).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 3.0 * se2.sqrt(), "mean error {err} vs bound {}", 3.0 * se2.sqrt());

        let emp_var: f64 =
            (0..10).map(|d| pooled.column(d).var(1.0)).sum::<f64>() / 10.0;
        assert!(
            (emp_var - cov[[0, 0]]).abs() <= 0.2 * cov[[0, 0]],
            "variance {emp_var} vs analytic {}",
            cov[[0, 0]]
        );
    }

    #[test]
    fn reference_sampler_is_deterministic_in_the_seed() {
        let task = make_task("two_moons").unwrap();
        let x_obs = array![0.2, -0.4];
        let config = ReferenceConfig {
            chains: 2,
            samples_per_chain: 60,
            warmup: 20,
            thin: 2,
            ..ReferenceConfig::default()
        };
        let a = slice_sample_reference(task.as_ref(), x_obs.view(), &config, 5).unwrap();
        let b = slice_sample_reference(task.as_ref(), x_obs.view(), &config, 5).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.proposed, a.samples.nrows());
        assert_eq!(a.method, "reference");
        assert_eq!(a.solver, "slice");
        let c = slice_sample_reference(task.as_ref(), x_obs.view(), &config, 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn reference_sampler_handles_multimodal_targets() {
        // Two moons has a bimodal posterior over theta1 + theta2; with four
        // chains both signs of the sum should be visited.
        let task = make_task("two_moons").unwrap();
        let x_obs = array![0.0, 0.0];
        let config = ReferenceConfig {
            chains: 4,
            samples_per_chain: 400,
            warmup: 100,
            thin: 2,
            ..ReferenceConfig::default()
        };
        let set = slice_sample_reference(task.as_ref(), x_obs.view(), &config, 17).unwrap();
        let sums: Vec<f64> =
            set.samples.rows().into_iter().map(|r| r[0] + r[1]).collect();
        assert!(sums.iter().any(|&s| s > 0.05));
        assert!(sums.iter().any(|&s| s < -0.05));
        let ratio = crate::eval::cluster_inertia_ratio(set.samples.view(), 1);
        assert!(ratio > 1.5, "expected two clusters, inertia ratio {ratio}");
    }
}
