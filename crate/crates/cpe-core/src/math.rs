//! Small numeric and RNG utilities shared across modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The RNG used throughout the crate.
///
/// ChaCha streams give reproducible, statistically independent substreams:
/// every data-parallel item draws from `substream(seed, item_index)`, which
/// makes results independent of scheduling and worker count.
pub type Rng = ChaCha12Rng;

/// Deterministic RNG substream `stream` of a master `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Numerically stable `log(sum_i exp(x_i))`.
///
/// Returns negative infinity for an empty slice or when all entries are
/// negative infinity.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (sum of zeros), or a +inf/NaN dominates either way.
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Stable `log(exp(a) + exp(b))`.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Stable `log(1 - tanh(u)^2)`, the log-derivative of `tanh`.
pub fn log_tanh_deriv(u: f64) -> f64 {
    // 1 - tanh(u)^2 = 4 / (e^u + e^-u)^2 = sech(u)^2.
    let a = u.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Log-density of the scalar normal distribution.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log-density of an isotropic normal with shared variance on each axis.
pub fn diag_normal_logpdf(x: ArrayView1<f64>, mean: ArrayView1<f64>, var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
}

/// Log-density of a bivariate normal with full covariance.
pub fn bivariate_normal_logpdf(
    x: ArrayView1<f64>,
    mean: ArrayView1<f64>,
    cov: &[[f64; 2]; 2],
) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    assert!(det > 0.0, "covariance must be positive definite");
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    let quad = (cov[1][1] * dx * dx - 2.0 * cov[0][1] * dx * dy + cov[0][0] * dy * dy) / det;
    -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
}

/// Standard normal cumulative distribution function.
pub fn std_normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Standard normal quantile function.
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Mean across rows of a sample matrix (rows are observations).
pub fn sample_mean(samples: ArrayView2<f64>) -> Array1<f64> {
    let n = samples.nrows().max(1) as f64;
    samples.sum_axis(ndarray::Axis(0)) / n
}

/// Unbiased sample covariance of a sample matrix (rows are observations).
pub fn sample_cov(samples: ArrayView2<f64>) -> Array2<f64> {
    let n = samples.nrows();
    let d = samples.ncols();
    let mean = sample_mean(samples);
    let mut cov = Array2::zeros((d, d));
    if n < 2 {
        return cov;
    }
    for row in samples.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[[i, j]] += di * (row[j] - mean[j]);
            }
        }
    }
    cov / (n as f64 - 1.0)
}

/// Hex-encoded SHA-256 digest, used to fingerprint configurations and
/// artifact files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Frobenius norm of a matrix.
pub fn frobenius_norm(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean norm of a vector.
pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
