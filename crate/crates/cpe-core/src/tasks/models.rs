//! The nine benchmark models.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use ndarray::{Array1, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{DimTransform, Task};
use crate::graph::{Dag, DagNode, NodeRole};
use crate::math::{
    bivariate_normal_logpdf, diag_normal_logpdf, ln_gamma, logaddexp, logsumexp, normal_logpdf,
    Rng,
};

/// Shared prior and noise variance of the linear-Gaussian task.
pub const LINEAR_GAUSSIAN_VAR: f64 = 0.1;

fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn param(id: &str, dim: usize) -> DagNode {
    DagNode::new(id, NodeRole::Parameter, dim)
}

fn data(id: &str, dim: usize) -> DagNode {
    DagNode::new(id, NodeRole::Data, dim)
}

/// Lower Cholesky factor of a 2 by 2 covariance.
fn chol2(cov: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l11 = cov[0][0].sqrt();
    let l21 = cov[0][1] / l11;
    let l22 = (cov[1][1] - l21 * l21).sqrt();
    [[l11, 0.0], [l21, l22]]
}

/// Log-density of a box-uniform prior with half-width `half` per
/// coordinate.
fn box_uniform_logpdf(theta: ArrayView1<f64>, half: f64) -> f64 {
    if theta.iter().all(|v| v.abs() <= half) {
        -(theta.len() as f64) * (2.0 * half).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Isotropic multivariate Student's t log-density with location `mean` on
/// every axis and scale matrix `sigma2 I`.
fn student_t_iso_logpdf(x: ArrayView1<f64>, mean: f64, sigma2: f64, nu: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sigma2;
    ln_gamma(0.5 * (nu + d))
        - ln_gamma(0.5 * nu)
        - 0.5 * d * (nu * PI).ln()
        - 0.5 * d * sigma2.ln()
        - 0.5 * (nu + d) * (1.0 + q / nu).ln()
}

// ---------------------------------------------------------------------------
// Linear Gaussian

/// Ten independent Gaussian coordinates observed under Gaussian noise of
/// the same variance.
pub struct LinearGaussian {
    dag: Dag,
}

impl LinearGaussian {
    pub fn new() -> Self {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for i in 1..=10 {
            nodes.push(param(&format!("theta{i}"), 1));
        }
        for i in 1..=10 {
            nodes.push(data(&format!("x{i}"), 1));
            edges.push((format!("theta{i}"), format!("x{i}")));
        }
        let edge_refs: Vec<(&str, &str)> =
            edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
        LinearGaussian { dag: Dag::new(nodes, &edge_refs).expect("static graph") }
    }
}

impl Default for LinearGaussian {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for LinearGaussian {
    fn name(&self) -> &str {
        "linear_gaussian"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        let sd = LINEAR_GAUSSIAN_VAR.sqrt();
        Array1::from_shape_fn(10, |_| sd * std_normal(rng))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        diag_normal_logpdf(theta, Array1::zeros(10).view(), LINEAR_GAUSSIAN_VAR)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), theta.mapv(|v| -v / LINEAR_GAUSSIAN_VAR))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let sd = LINEAR_GAUSSIAN_VAR.sqrt();
        Array1::from_shape_fn(10, |i| theta[i] + sd * std_normal(rng))
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        diag_normal_logpdf(x, theta, LINEAR_GAUSSIAN_VAR)
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture 1

/// Two-dimensional location inferred from an equal mixture of a wide and a
/// narrow Gaussian around it.
pub struct GaussianMixture1 {
    dag: Dag,
}

const GM1_NARROW_VAR: f64 = 0.01;

impl GaussianMixture1 {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![param("theta1", 1), param("theta2", 1), data("x", 2)],
            &[("theta1", "x"), ("theta2", "x")],
        )
        .expect("static graph");
        GaussianMixture1 { dag }
    }
}

impl Default for GaussianMixture1 {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for GaussianMixture1 {
    fn name(&self) -> &str {
        "gaussian_mixture_1"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_shape_fn(2, |_| rng.gen_range(-10.0..10.0))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        box_uniform_logpdf(theta, 10.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), Array1::zeros(2))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let sd = if rng.gen_bool(0.5) { 1.0 } else { GM1_NARROW_VAR.sqrt() };
        Array1::from_shape_fn(2, |i| theta[i] + sd * std_normal(rng))
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let half = 0.5_f64.ln();
        logaddexp(
            half + diag_normal_logpdf(x, theta, 1.0),
            half + diag_normal_logpdf(x, theta, GM1_NARROW_VAR),
        )
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture 2

/// Three parameter pairs, one of which generates the observation through a
/// component-specific covariance.
pub struct GaussianMixture2 {
    dag: Dag,
}

const GM2_PRIOR_MEAN: [f64; 6] = [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0];

/// Component covariances. The stated third component pairs a 0.95
/// interaction with variances 0.1 and 1, which is not positive definite as
/// a covariance; it is treated as a correlation and scaled by the marginal
/// standard deviations.
fn gm2_covs() -> [[[f64; 2]; 2]; 3] {
    let rho = 0.95 * (0.1_f64).sqrt();
    [
        [[0.7, 0.0], [0.0, 0.05]],
        [[0.7, 0.0], [0.0, 0.05]],
        [[0.1, rho], [rho, 1.0]],
    ]
}

impl GaussianMixture2 {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![param("theta12", 2), param("theta34", 2), param("theta56", 2), data("x", 2)],
            &[("theta12", "x"), ("theta34", "x"), ("theta56", "x")],
        )
        .expect("static graph");
        GaussianMixture2 { dag }
    }
}

impl Default for GaussianMixture2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for GaussianMixture2 {
    fn name(&self) -> &str {
        "gaussian_mixture_2"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_shape_fn(6, |i| GM2_PRIOR_MEAN[i] + std_normal(rng))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        theta
            .iter()
            .zip(GM2_PRIOR_MEAN.iter())
            .map(|(&t, &m)| normal_logpdf(t, m, 1.0))
            .sum()
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let grad = Array1::from_shape_fn(6, |i| GM2_PRIOR_MEAN[i] - theta[i]);
        (self.prior_logpdf(theta), grad)
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let k = rng.gen_range(0..3usize);
        let l = chol2(&gm2_covs()[k]);
        let (z1, z2) = (std_normal(rng), std_normal(rng));
        Array1::from_vec(vec![
            theta[2 * k] + l[0][0] * z1,
            theta[2 * k + 1] + l[1][0] * z1 + l[1][1] * z2,
        ])
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let covs = gm2_covs();
        let third = (1.0_f64 / 3.0).ln();
        let terms: Vec<f64> = (0..3)
            .map(|k| {
                let mean = Array1::from_vec(vec![theta[2 * k], theta[2 * k + 1]]);
                third + bivariate_normal_logpdf(x, mean.view(), &covs[k])
            })
            .collect();
        logsumexp(&terms)
    }
}

// ---------------------------------------------------------------------------
// Hierarchical model

/// Global location, three group effects around it, and a half-normal noise
/// scale observed through three two-dimensional measurements.
pub struct Hierarchical {
    dag: Dag,
}

impl Hierarchical {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![
                param("gamma", 2),
                param("beta1", 2),
                param("beta2", 2),
                param("beta3", 2),
                param("sigma", 1),
                data("x1", 2),
                data("x2", 2),
                data("x3", 2),
            ],
            &[
                ("gamma", "beta1"),
                ("gamma", "beta2"),
                ("gamma", "beta3"),
                ("beta1", "x1"),
                ("beta2", "x2"),
                ("beta3", "x3"),
                ("sigma", "x1"),
                ("sigma", "x2"),
                ("sigma", "x3"),
            ],
        )
        .expect("static graph");
        Hierarchical { dag }
    }
}

impl Default for Hierarchical {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Hierarchical {
    fn name(&self) -> &str {
        "hierarchical"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        let mut theta = Array1::zeros(9);
        for i in 0..2 {
            theta[i] = std_normal(rng);
        }
        for b in 0..3 {
            for i in 0..2 {
                theta[2 + 2 * b + i] = theta[i] + std_normal(rng);
            }
        }
        theta[8] = std_normal(rng).abs();
        theta
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        let sigma = theta[8];
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for i in 0..2 {
            lp += normal_logpdf(theta[i], 0.0, 1.0);
        }
        for b in 0..3 {
            for i in 0..2 {
                lp += normal_logpdf(theta[2 + 2 * b + i], theta[i], 1.0);
            }
        }
        lp + 2.0_f64.ln() + normal_logpdf(sigma, 0.0, 1.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let lp = self.prior_logpdf(theta);
        let mut grad = Array1::zeros(9);
        if !lp.is_finite() {
            return (lp, grad);
        }
        for i in 0..2 {
            grad[i] = -theta[i];
            for b in 0..3 {
                let resid = theta[2 + 2 * b + i] - theta[i];
                grad[i] += resid;
                grad[2 + 2 * b + i] = -resid;
            }
        }
        grad[8] = -theta[8];
        (lp, grad)
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let sigma = theta[8].abs();
        Array1::from_shape_fn(6, |i| theta[2 + i] + sigma * std_normal(rng))
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let sigma = theta[8];
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        diag_normal_logpdf(x, theta.slice(ndarray::s![2..8]), sigma * sigma)
    }

    fn transforms(&self) -> Vec<DimTransform> {
        let mut tr = vec![DimTransform::Identity; 9];
        tr[8] = DimTransform::Log;
        tr
    }
}

// ---------------------------------------------------------------------------
// Hyperboloid

/// Mixture of two Student's t components whose means are absolute
/// path-length differences to two beacon pairs.
pub struct Hyperboloid {
    dag: Dag,
}

const HYPERBOLOID_NU: f64 = 3.0;
const HYPERBOLOID_VAR: f64 = 0.01;
const HYPERBOLOID_A: [[f64; 2]; 2] = [[-0.5, 0.0], [0.5, 0.0]];
const HYPERBOLOID_B: [[f64; 2]; 2] = [[0.0, -0.5], [0.0, 0.5]];

/// Absolute difference of distances from `theta` to the two anchors.
pub(crate) fn hyperboloid_mean(theta: ArrayView1<f64>, anchors: &[[f64; 2]; 2]) -> f64 {
    let dist = |p: &[f64; 2]| ((theta[0] - p[0]).powi(2) + (theta[1] - p[1]).powi(2)).sqrt();
    (dist(&anchors[0]) - dist(&anchors[1])).abs()
}

impl Hyperboloid {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![param("theta1", 1), param("theta2", 1), data("x", 10)],
            &[("theta1", "x"), ("theta2", "x")],
        )
        .expect("static graph");
        Hyperboloid { dag }
    }
}

impl Default for Hyperboloid {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Hyperboloid {
    fn name(&self) -> &str {
        "hyperboloid"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_shape_fn(2, |_| rng.gen_range(-2.0..2.0))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        box_uniform_logpdf(theta, 2.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), Array1::zeros(2))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let anchors = if rng.gen_bool(0.5) { &HYPERBOLOID_A } else { &HYPERBOLOID_B };
        let mean = hyperboloid_mean(theta, anchors);
        // Multivariate t draw: shared chi-square mixing across dimensions.
        let w = Gamma::new(HYPERBOLOID_NU / 2.0, 2.0).expect("static shape").sample(rng);
        let scale = (HYPERBOLOID_NU / w).sqrt() * HYPERBOLOID_VAR.sqrt();
        Array1::from_shape_fn(10, |_| mean + scale * std_normal(rng))
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let half = 0.5_f64.ln();
        let ma = hyperboloid_mean(theta, &HYPERBOLOID_A);
        let mb = hyperboloid_mean(theta, &HYPERBOLOID_B);
        logaddexp(
            half + student_t_iso_logpdf(x, ma, HYPERBOLOID_VAR, HYPERBOLOID_NU),
            half + student_t_iso_logpdf(x, mb, HYPERBOLOID_VAR, HYPERBOLOID_NU),
        )
    }
}

// ---------------------------------------------------------------------------
// Mixture model with distractors

/// Scalar location observed through two informative mixture draws plus
/// eight pure-noise dimensions.
pub struct Distractors {
    dag: Dag,
}

const DISTRACTOR_ALPHA: f64 = 0.3;
const DISTRACTOR_SD: f64 = 0.3;

impl Distractors {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![param("theta", 1), data("x_info", 2), data("x_noise", 8)],
            &[("theta", "x_info")],
        )
        .expect("static graph");
        Distractors { dag }
    }
}

impl Default for Distractors {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Distractors {
    fn name(&self) -> &str {
        "distractors"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_vec(vec![rng.gen_range(-10.0..10.0)])
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        box_uniform_logpdf(theta, 10.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), Array1::zeros(1))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let t = theta[0];
        let mut x = Array1::zeros(10);
        for i in 0..2 {
            x[i] = if rng.gen_bool(DISTRACTOR_ALPHA) {
                t + std_normal(rng)
            } else {
                -t + DISTRACTOR_SD * std_normal(rng)
            };
        }
        for i in 2..10 {
            x[i] = std_normal(rng);
        }
        x
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let t = theta[0];
        let mut lp = 0.0;
        for i in 0..2 {
            lp += logaddexp(
                DISTRACTOR_ALPHA.ln() + normal_logpdf(x[i], t, 1.0),
                (1.0 - DISTRACTOR_ALPHA).ln() + normal_logpdf(x[i], -t, DISTRACTOR_SD),
            );
        }
        for i in 2..10 {
            lp += normal_logpdf(x[i], 0.0, 1.0);
        }
        lp
    }

    /// The benchmark observation fixes both informative dimensions at 5 and
    /// draws fresh standard-normal distractor coordinates.
    fn generate_observation(&self, rng: &mut Rng) -> (Array1<f64>, Array1<f64>) {
        let theta = self.prior_sample(rng);
        let mut x = Array1::zeros(10);
        x[0] = 5.0;
        x[1] = 5.0;
        for i in 2..10 {
            x[i] = std_normal(rng);
        }
        (theta, x)
    }
}

// ---------------------------------------------------------------------------
// SLCP

/// Five parameters mapped to the mean and covariance of four independent
/// bivariate Gaussian draws.
pub struct Slcp {
    dag: Dag,
}

impl Slcp {
    pub fn new() -> Self {
        let mut nodes: Vec<DagNode> = (1..=5).map(|i| param(&format!("theta{i}"), 1)).collect();
        let mut edges = Vec::new();
        for j in 1..=4 {
            nodes.push(data(&format!("x{j}"), 2));
            for i in 1..=5 {
                edges.push((format!("theta{i}"), format!("x{j}")));
            }
        }
        let edge_refs: Vec<(&str, &str)> =
            edges.iter().map(|(p, c)| (p.as_str(), c.as_str())).collect();
        Slcp { dag: Dag::new(nodes, &edge_refs).expect("static graph") }
    }

    fn moments(theta: ArrayView1<f64>) -> ([f64; 2], [[f64; 2]; 2]) {
        let mean = [theta[0], theta[1]];
        let phi1 = theta[2] * theta[2];
        let phi2 = theta[3] * theta[3];
        let rho = theta[4].tanh();
        let cov = [
            [phi1 * phi1, rho * phi1 * phi2],
            [rho * phi1 * phi2, phi2 * phi2],
        ];
        (mean, cov)
    }
}

impl Default for Slcp {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Slcp {
    fn name(&self) -> &str {
        "slcp"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_shape_fn(5, |_| rng.gen_range(-3.0..3.0))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        box_uniform_logpdf(theta, 3.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), Array1::zeros(5))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let (mean, cov) = Slcp::moments(theta);
        let l = chol2(&cov);
        let mut x = Array1::zeros(8);
        for j in 0..4 {
            let (z1, z2) = (std_normal(rng), std_normal(rng));
            x[2 * j] = mean[0] + l[0][0] * z1;
            x[2 * j + 1] = mean[1] + l[1][0] * z1 + l[1][1] * z2;
        }
        x
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let (mean, cov) = Slcp::moments(theta);
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(det > 0.0) {
            return f64::NEG_INFINITY;
        }
        let mean = Array1::from_vec(mean.to_vec());
        (0..4)
            .map(|j| {
                bivariate_normal_logpdf(x.slice(ndarray::s![2 * j..2 * j + 2]), mean.view(), &cov)
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Tree

/// A root location with two dependent children, each observed through two
/// nonlinear noise channels.
pub struct Tree {
    dag: Dag,
}

impl Tree {
    pub fn new() -> Self {
        let dag = Dag::new(
            vec![
                param("theta1", 1),
                param("theta2", 1),
                param("theta3", 1),
                data("x1", 1),
                data("x2", 1),
                data("x3", 1),
                data("x4", 1),
            ],
            &[
                ("theta1", "theta2"),
                ("theta1", "theta3"),
                ("theta2", "x1"),
                ("theta2", "x2"),
                ("theta3", "x3"),
                ("theta3", "x4"),
            ],
        )
        .expect("static graph");
        Tree { dag }
    }

    fn means(theta: ArrayView1<f64>) -> [f64; 4] {
        [
            theta[1].sin().powi(2),
            theta[1] * theta[1],
            0.1 * theta[2] * theta[2],
            theta[2].cos().powi(2),
        ]
    }
}

const TREE_SDS: [f64; 4] = [0.2, 0.2, 0.6, 0.1];

impl Default for Tree {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for Tree {
    fn name(&self) -> &str {
        "tree"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        let t1 = std_normal(rng);
        let t2 = t1 + std_normal(rng);
        let t3 = t1 + std_normal(rng);
        Array1::from_vec(vec![t1, t2, t3])
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        normal_logpdf(theta[0], 0.0, 1.0)
            + normal_logpdf(theta[1], theta[0], 1.0)
            + normal_logpdf(theta[2], theta[0], 1.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let r2 = theta[1] - theta[0];
        let r3 = theta[2] - theta[0];
        let grad = Array1::from_vec(vec![-theta[0] + r2 + r3, -r2, -r3]);
        (self.prior_logpdf(theta), grad)
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let means = Tree::means(theta);
        Array1::from_shape_fn(4, |i| means[i] + TREE_SDS[i] * std_normal(rng))
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        let means = Tree::means(theta);
        (0..4).map(|i| normal_logpdf(x[i], means[i], TREE_SDS[i])).sum()
    }
}

// ---------------------------------------------------------------------------
// Two moons

/// Crescent-shaped observation of the summed parameters with angular and
/// radial nuisance noise.
pub struct TwoMoons {
    dag: Dag,
}

const TWO_MOONS_R_MEAN: f64 = 0.1;
const TWO_MOONS_R_SD: f64 = 0.1;

/// Deterministic observation for fixed nuisance draws.
pub(crate) fn two_moons_observation(theta: ArrayView1<f64>, alpha: f64, r: f64) -> [f64; 2] {
    let s = (theta[0] + theta[1]) / SQRT_2;
    [r * alpha.cos() + 0.25 - s.abs(), r * alpha.sin() - s]
}

impl TwoMoons {
    pub fn new() -> Self {
        let dag = Dag::new(vec![param("theta", 2), data("x", 2)], &[("theta", "x")])
            .expect("static graph");
        TwoMoons { dag }
    }
}

impl Default for TwoMoons {
    fn default() -> Self {
        Self::new()
    }
}

impl Task for TwoMoons {
    fn name(&self) -> &str {
        "two_moons"
    }

    fn dag(&self) -> &Dag {
        &self.dag
    }

    fn prior_sample(&self, rng: &mut Rng) -> Array1<f64> {
        Array1::from_shape_fn(2, |_| rng.gen_range(-10.0..10.0))
    }

    fn prior_logpdf(&self, theta: ArrayView1<f64>) -> f64 {
        box_uniform_logpdf(theta, 10.0)
    }

    fn prior_logpdf_grad(&self, theta: ArrayView1<f64>) -> (f64, Array1<f64>) {
        (self.prior_logpdf(theta), Array1::zeros(2))
    }

    fn simulate(&self, theta: ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
        let alpha = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let r = TWO_MOONS_R_MEAN + TWO_MOONS_R_SD * std_normal(rng);
        Array1::from_vec(two_moons_observation(theta, alpha, r).to_vec())
    }

    fn likelihood_logpdf(&self, theta: ArrayView1<f64>, x: ArrayView1<f64>) -> f64 {
        // Undo the deterministic shift, then change variables from the
        // nuisance pair (r, alpha) to the plane: the angle is uniform over a
        // half circle and the radius can be negative, so exactly one branch
        // reproduces the point.
        let s = (theta[0] + theta[1]) / SQRT_2;
        let u1 = x[0] + s.abs() - 0.25;
        let u2 = x[1] + s;
        let rho = (u1 * u1 + u2 * u2).sqrt();
        if rho == 0.0 {
            return f64::NEG_INFINITY;
        }
        let r = if u1 >= 0.0 { rho } else { -rho };
        normal_logpdf(r, TWO_MOONS_R_MEAN, TWO_MOONS_R_SD) - PI.ln() - rho.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::substream;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn linear_gaussian_noise_variance_matches_model() {
        let task = LinearGaussian::new();
        let mut rng = substream(1, 0);
        let theta = Array1::zeros(10);
        let mut sums = vec![0.0; 10];
        let mut sq = vec![0.0; 10];
        let n = 10_000;
        for _ in 0..n {
            let x = task.simulate(theta.view(), &mut rng);
            for i in 0..10 {
                sums[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        for i in 0..10 {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((var - 0.1).abs() <= 0.01, "dim {i}: variance {var}");
        }
    }

    #[test]
    fn hyperboloid_mean_vanishes_on_the_symmetry_axis() {
        let theta = array![0.0, 0.0];
        assert_eq!(hyperboloid_mean(theta.view(), &HYPERBOLOID_A), 0.0);
        assert_eq!(hyperboloid_mean(theta.view(), &HYPERBOLOID_B), 0.0);
    }

    #[test]
    fn two_moons_deterministic_part_matches_direct_substitution() {
        let theta = array![0.0, 0.0];
        let x = two_moons_observation(theta.view(), 0.0, 0.1);
        assert_relative_eq!(x[0], 0.35, epsilon = 1e-15);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gm2_component_covariances_are_positive_definite() {
        for cov in gm2_covs() {
            let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
            assert!(det > 0.0, "determinant {det}");
            let l = chol2(&cov);
            assert!(l[0][0] > 0.0 && l[1][1] > 0.0);
        }
    }

    #[test]
    fn student_t_density_integrates_to_one_in_one_dimension() {
        // Quadrature oracle for the scaled t density.
        let mut total = 0.0;
        let h = 0.01;
        for i in 0..40_000 {
            let v = -200.0 + (i as f64 + 0.5) * h;
            let x = array![v];
            total += student_t_iso_logpdf(x.view(), 0.3, 0.25, 3.0).exp() * h;
        }
        assert!((total - 1.0).abs() <= 1e-3, "integral {total}");
    }

    #[test]
    fn two_moons_likelihood_matches_simulation_histogram() {
        // Empirical check of the nuisance-integrated density: compare the
        // probability of a small box under simulation against the density
        // at its center.
        let task = TwoMoons::new();
        let theta = array![1.0, -0.5];
        let center = {
            let m = two_moons_observation(theta.view(), 0.3, 0.12);
            array![m[0], m[1]]
        };
        let half = 0.02;
        let mut rng = substream(7, 0);
        let n = 400_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let x = task.simulate(theta.view(), &mut rng);
            if (x[0] - center[0]).abs() <= half && (x[1] - center[1]).abs() <= half {
                hits += 1;
            }
        }
        let p_emp = hits as f64 / n as f64;
        let p_density = task.likelihood_logpdf(theta.view(), center.view()).exp()
            * (2.0 * half)
            * (2.0 * half);
        let se = (p_emp * (1.0 - p_emp) / n as f64).sqrt();
        assert!(
            (p_emp - p_density).abs() <= 4.0 * se + 0.1 * p_density,
            "empirical {p_emp} vs density {p_density}"
        );
    }

    #[test]
    fn distractor_observation_pins_informative_dimensions() {
        let task = Distractors::new();
        let mut rng = substream(3, 0);
        let (_, x) = task.generate_observation(&mut rng);
        assert_eq!(x[0], 5.0);
        assert_eq!(x[1], 5.0);
        assert!(x.slice(ndarray::s![2..]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn slcp_simulated_draws_match_declared_moments() {
        let task = Slcp::new();
        let theta = array![0.5, -0.8, 1.2, 0.9, 0.4];
        let (mean, cov) = Slcp::moments(theta.view());
        let mut rng = substream(9, 0);
        let n = 200_000;
        let mut m = [0.0; 2];
        let mut c = [[0.0; 2]; 2];
        for _ in 0..n {
            let x = task.simulate(theta.view(), &mut rng);
            // Use the first of the four exchangeable draws.
            m[0] += x[0];
            m[1] += x[1];
            c[0][0] += x[0] * x[0];
            c[0][1] += x[0] * x[1];
            c[1][1] += x[1] * x[1];
        }
        for v in &mut m {
            *v /= n as f64;
        }
        assert!((m[0] - mean[0]).abs() < 0.02);
        assert!((m[1] - mean[1]).abs() < 0.02);
        let cov00 = c[0][0] / n as f64 - m[0] * m[0];
        let cov01 = c[0][1] / n as f64 - m[0] * m[1];
        let cov11 = c[1][1] / n as f64 - m[1] * m[1];
        assert!((cov00 - cov[0][0]).abs() < 0.05 * cov[0][0].max(1.0));
        assert!((cov01 - cov[0][1]).abs() < 0.05 * cov[0][1].abs().max(1.0));
        assert!((cov11 - cov[1][1]).abs() < 0.05 * cov[1][1].max(1.0));
    }

    #[test]
    fn hierarchical_prior_draws_have_positive_scale() {
        let task = Hierarchical::new();
        let mut rng = substream(13, 0);
        for _ in 0..1000 {
            let theta = task.prior_sample(&mut rng);
            assert!(theta[8] > 0.0);
            assert!(task.prior_logpdf(theta.view()).is_finite());
        }
        let mut bad = task.prior_sample(&mut rng);
        bad[8] = -0.5;
        assert_eq!(task.prior_logpdf(bad.view()), f64::NEG_INFINITY);
    }
}
