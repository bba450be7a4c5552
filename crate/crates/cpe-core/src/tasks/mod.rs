//! Benchmark generative models.
//!
//! Each task bundles a prior sampler and log-density, a simulator, the
//! prior-program graph used to derive dependency masks, a likelihood
//! density for reference MCMC, and an observed-data generator. Tasks are
//! addressed by name through [`make_task`].

mod models;
mod reference;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::CpeError;
use crate::graph::Dag;
use crate::math::Rng;

pub use reference::{effective_sample_size, slice_sample_reference, split_rhat, ReferenceConfig};

/// Per-coordinate reparameterization between the model space and the
/// unconstrained space the flows operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimTransform {
    /// Coordinate is already unconstrained.
    Identity,
    /// Positive coordinate mapped through the natural logarithm.
    Log,
}

impl DimTransform {
    /// Model space to unconstrained space.
    pub fn to_unconstrained(self, v: f64) -> f64 {
        match self {
            DimTransform::Identity => v,
            DimTransform::Log => v.ln(),
        }
    }

    /// Unconstrained space back to model space.
    pub fn from_unconstrained(self, u: f64) -> f64 {
        match self {
            DimTransform::Identity => u,
            DimTransform::Log => u.exp(),
        }
    }

    /// `log |d model / d unconstrained|` at the unconstrained point `u`.
    pub fn log_abs_det_jacobian(self, u: f64) -> f64 {
        match self {
            DimTransform::Identity => 0.0,
            DimTransform::Log => u,
        }
    }
}

/// A benchmark generative model.
pub trait Task: Send + Sync {
    /// Registry name.
    fn name(&self) -> &str;

    /// Prior program: parameter and data nodes with cause-to-effect edges.
    fn dag(&self) -> &Dag;

    /// Total parameter dimension (task layout: parameter nodes in graph
    /// insertion order).
    fn theta_dim(&self) -> usize {
        self.dag().theta_dim()
    }

    /// Total data dimension.
    fn x_dim(&self) -> usize {
        self.dag().x_dim()
    }

    /// Draw one parameter vector from the prior.
    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64>;

    /// Prior log-density (negative infinity outside the support).
    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64;

    /// Prior log-density together with its gradient. The gradient is zero
    /// outside the support and on flat (uniform) regions.
    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>);

    /// Simulate one observation from the model at `theta`.
    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64>;

    /// Likelihood log-density of an observation given parameters.
    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64;

    /// Per-coordinate reparameterizations (task layout). The default is
    /// fully unconstrained.
    fn transforms(&self) -> Vec<DimTransform> {
        vec![DimTransform::Identity; self.theta_dim()]
    }

    /// Draw a ground-truth parameter and a matching observation.
    fn generate_observation(&self, rng: &mut Rng) -> (Array1<f64>, Array1<f64>) {
        let theta = self.prior_sample(rng);
        let x = self.simulate(theta.view(), rng);
        (theta, x)
    }
}

/// Registry names of the nine benchmark tasks.
pub const TASK_NAMES: [&str; 9] = [
    "linear_gaussian",
    "gaussian_mixture_1",
    "gaussian_mixture_2",
    "hierarchical",
    "hyperboloid",
    "distractors",
    "slcp",
    "tree",
    "two_moons",
];

/// Construct a benchmark task by name.
pub fn make_task(name: &str) -> Result<Box<dyn Task>, CpeError> {
    match name {
        "linear_gaussian" => Ok(Box::new(models::LinearGaussian::new())),
        "gaussian_mixture_1" => Ok(Box::new(models::GaussianMixture1::new())),
        "gaussian_mixture_2" => Ok(Box::new(models::GaussianMixture2::new())),
        "hierarchical" => Ok(Box::new(models::Hierarchical::new())),
        "hyperboloid" => Ok(Box::new(models::Hyperboloid::new())),
        "distractors" => Ok(Box::new(models::Distractors::new())),
        "slcp" => Ok(Box::new(models::Slcp::new())),
        "tree" => Ok(Box::new(models::Tree::new())),
        "two_moons" => Ok(Box::new(models::TwoMoons::new())),
        other => Err(CpeError::UnknownTask(other.to_string())),
    }
}

/// Conjugate posterior of the linear-Gaussian task: equal prior and noise
/// precisions give mean `x_obs / 2` and covariance `(sigma^2 / 2) I`.
pub fn analytic_posterior(
    task: &dyn Task,
    x_obs: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array2<f64>), CpeError> {
    if task.name() != "linear_gaussian" {
        return Err(CpeError::Config(format!(
            "no analytic posterior for task `{}`",
            task.name()
        )));
    }
    if x_obs.len() != task.x_dim() {
        return Err(CpeError::Shape(format!(
            "observation has {} dims, expected {}",
            x_obs.len(),
            task.x_dim()
        )));
    }
    let mean = x_obs.mapv(|v| v / 2.0);
    let var = models::LINEAR_GAUSSIAN_VAR / 2.0;
    let cov = Array2::from_diag(&Array1::from_elem(x_obs.len(), var));
    Ok((mean, cov))
}

/// A persisted ground-truth parameter / observation pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub task: String,
    pub seed: u64,
    pub theta_star: Vec<f64>,
    pub x_obs: Vec<f64>,
}

impl Observation {
    /// Generate the observation pair for a task and seed.
    pub fn generate(task: &dyn Task, seed: u64) -> Self {
        let mut rng = crate::math::substream(seed, 0);
        let (theta, x) = task.generate_observation(&mut rng);
        Observation {
            task: task.name().to_string(),
            seed,
            theta_star: theta.to_vec(),
            x_obs: x.to_vec(),
        }
    }

    /// Observation vector as an array.
    pub fn x(&self) -> Array1<f64> {
        Array1::from_vec(self.x_obs.clone())
    }

    /// Write as JSON.
    pub fn save(&self, path: &Path) -> Result<(), CpeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Read from JSON.
    pub fn load(path: &Path) -> Result<Self, CpeError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{dependency_mask, invert_program, topological_sort};
    use crate::math::substream;
    use approx::assert_relative_eq;
    use ndarray::Array1;

    #[test]
    fn registry_builds_every_task_and_rejects_unknown_names() {
        for name in TASK_NAMES {
            let task = make_task(name).unwrap();
            assert_eq!(task.name(), name);
            assert_eq!(task.theta_dim(), task.dag().theta_dim());
            assert_eq!(task.x_dim(), task.dag().x_dim());
        }
        assert!(matches!(make_task("lotka_volterra"), Err(CpeError::UnknownTask(_))));
    }

    #[test]
    fn every_task_graph_yields_a_dependency_mask() {
        for name in TASK_NAMES {
            let task = make_task(name).unwrap();
            let posterior = invert_program(task.dag());
            let order = topological_sort(&posterior).unwrap();
            let mask = dependency_mask(&posterior, &order).unwrap();
            assert_eq!(mask.theta_dim(), task.theta_dim(), "task {name}");
            for flow in 0..mask.theta_dim() {
                assert_eq!(mask.task_to_flow[mask.flow_to_task[flow]], flow);
            }
        }
    }

    #[test]
    fn simulations_from_the_prior_are_finite() {
        for name in TASK_NAMES {
            let task = make_task(name).unwrap();
            let mut rng = substream(11, 0);
            for _ in 0..10_000 {
                let theta = task.prior_sample(&mut rng);
                assert!(theta.iter().all(|v| v.is_finite()), "task {name}");
                assert!(
                    task.prior_logpdf(theta.view()).is_finite(),
                    "prior density must be finite on its own draws ({name})"
                );
                let x = task.simulate(theta.view(), &mut rng);
                assert_eq!(x.len(), task.x_dim(), "task {name}");
                assert!(x.iter().all(|v| v.is_finite()), "task {name}");
            }
        }
    }

    #[test]
    fn low_dimensional_priors_integrate_to_one() {
        // Midpoint quadrature over the known supports.
        let cases: [(&str, f64, usize); 4] = [
            ("distractors", 10.5, 1),
            ("gaussian_mixture_1", 10.5, 2),
            ("hyperboloid", 2.5, 2),
            ("two_moons", 10.5, 2),
        ];
        for (name, half_width, dims) in cases {
            let task = make_task(name).unwrap();
            let n = if dims == 1 { 20_001 } else { 801 };
            let h = 2.0 * half_width / n as f64;
            let mut total = 0.0;
            if dims == 1 {
                for i in 0..n {
                    let v = -half_width + (i as f64 + 0.5) * h;
                    let lp = task.prior_logpdf(Array1::from_vec(vec![v]).view());
                    if lp > f64::NEG_INFINITY {
                        total += lp.exp() * h;
                    }
                }
            } else {
                for i in 0..n {
                    for j in 0..n {
                        let v = Array1::from_vec(vec![
                            -half_width + (i as f64 + 0.5) * h,
                            -half_width + (j as f64 + 0.5) * h,
                        ]);
                        let lp = task.prior_logpdf(v.view());
                        if lp > f64::NEG_INFINITY {
                            total += lp.exp() * h * h;
                        }
                    }
                }
            }
            assert!((total - 1.0).abs() <= 1e-3, "task {name}: integral {total}");
        }
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        for name in TASK_NAMES {
            let task = make_task(name).unwrap();
            let mut rng = substream(5, 1);
            for _ in 0..20 {
                let theta = task.prior_sample(&mut rng);
                let (lp, grad) = task.prior_logpdf_grad(theta.view());
                assert_relative_eq!(lp, task.prior_logpdf(theta.view()));
                let step = 1e-6;
                for i in 0..theta.len() {
                    let mut up = theta.clone();
                    up[i] += step;
                    let mut down = theta.clone();
                    down[i] -= step;
                    let (lu, ld) = (task.prior_logpdf(up.view()), task.prior_logpdf(down.view()));
                    if !lu.is_finite() || !ld.is_finite() {
                        // Stepped over a support boundary.
                        continue;
                    }
                    let fd = (lu - ld) / (2.0 * step);
                    assert!(
                        (grad[i] - fd).abs() <= 1e-4 * grad[i].abs().max(fd.abs()).max(1.0),
                        "task {name} dim {i}: {} vs {fd}",
                        grad[i]
                    );
                }
            }
        }
    }

    #[test]
    fn analytic_posterior_matches_conjugate_formulas() {
        let task = make_task("linear_gaussian").unwrap();
        let zeros = Array1::zeros(10);
        let (mean, cov) = analytic_posterior(task.as_ref(), zeros.view()).unwrap();
        assert!(mean.iter().all(|&v| v == 0.0));
        for i in 0..10 {
            for j in 0..10 {
                let want = if i == j { 0.05 } else { 0.0 };
                assert_relative_eq!(cov[[i, j]], want, epsilon = 1e-15);
            }
        }
        let ones = Array1::ones(10);
        let (mean, cov) = analytic_posterior(task.as_ref(), ones.view()).unwrap();
        assert!(mean.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        // Posterior variance is smaller than the prior variance everywhere.
        for i in 0..10 {
            assert!(cov[[i, i]] < models::LINEAR_GAUSSIAN_VAR);
        }
        let other = make_task("tree").unwrap();
        assert!(analytic_posterior(other.as_ref(), zeros.view()).is_err());
    }

    #[test]
    fn two_moons_keeps_nuisance_parameters_out_of_theta() {
        let task = make_task("two_moons").unwrap();
        assert_eq!(task.theta_dim(), 2);
        assert_eq!(task.dag().parameter_nodes().len(), 1);
    }

    #[test]
    fn hierarchical_transforms_unconstrain_the_scale() {
        let task = make_task("hierarchical").unwrap();
        let tr = task.transforms();
        assert_eq!(tr.len(), 9);
        assert_eq!(tr[8], DimTransform::Log);
        assert!(tr[..8].iter().all(|&t| t == DimTransform::Identity));
        let v = 0.37;
        let u = DimTransform::Log.to_unconstrained(v);
        assert_relative_eq!(DimTransform::Log.from_unconstrained(u), v, epsilon = 1e-12);
        assert_relative_eq!(DimTransform::Log.log_abs_det_jacobian(u), u);
    }

    #[test]
    fn observations_round_trip_through_json() {
        let task = make_task("two_moons").unwrap();
        let obs = Observation::generate(task.as_ref(), 3);
        assert_eq!(obs.theta_star.len(), 2);
        assert_eq!(obs.x_obs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        obs.save(&path).unwrap();
        let back = Observation::load(&path).unwrap();
        assert_eq!(back.task, obs.task);
        assert_eq!(back.theta_star, obs.theta_star);
        assert_eq!(back.x_obs, obs.x_obs);
        // Same seed regenerates the same pair.
        let again = Observation::generate(task.as_ref(), 3);
        assert_eq!(again.x_obs, obs.x_obs);
    }

    #[test]
    fn likelihoods_are_finite_on_simulated_pairs() {
        for name in TASK_NAMES {
            let task = make_task(name).unwrap();
            let mut rng = substream(17, 0);
            for _ in 0..200 {
                let theta = task.prior_sample(&mut rng);
                let x = task.simulate(theta.view(), &mut rng);
                let ll = task.likelihood_logpdf(theta.view(), x.view());
                assert!(ll.is_finite(), "task {name}: log-likelihood {ll}");
            }
        }
    }
}
