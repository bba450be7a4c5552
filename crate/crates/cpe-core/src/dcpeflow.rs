//! Discrete (time-free) invertible flow variant with exact
//! log-determinants and numeric inversion.
//!
//! The network is the shared masked block stack of [`crate::cpeflow`] with
//! `exp`-transformed diagonal blocks and no time input. Writing `lambda`
//! for the stack output and `gamma` for the gate, the transform
//!
//! `z_i = gamma_i theta_i + (1 - gamma_i) lambda_i(theta, x)`
//!
//! is strictly increasing in `theta_i`: diagonal-block weights are
//! positive, `tanh` is increasing, and off-diagonal contributions do not
//! involve `theta_i` at all thanks to the triangular mask. The Jacobian is
//! therefore triangular with positive diagonal
//! `gamma_i + (1 - gamma_i) * d lambda_i / d theta_i`, and its
//! log-determinant is a sum of `logaddexp(log gamma, log(1 - gamma) +
//! ell_i)` terms where `ell_i` accumulates through the layers by
//! log-matrix multiplication of diagonal-block logs and activation
//! derivative logs. Raw diagonal entries are their own logs (the `exp`
//! transform cancels), so the chain is computed without ever leaving log
//! space.
//!
//! Training maximizes likelihood of posterior draws under the pushforward
//! of a base density, which needs only the forward direction. Sampling
//! inverts coordinate by coordinate in topological order with bracketed
//! bisection.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::cpeflow::{backprop_stack, CpeConfig, FlowCache, FlowNet, FlowVariant};
use crate::error::CpeError;
use crate::graph::DependencyMask;
use crate::math::{logaddexp, log_tanh_deriv};

/// Discrete flow network wrapping the shared stack.
#[derive(Debug, Clone)]
pub struct DiscreteFlowNet {
    /// Underlying masked network (variant [`FlowVariant::Discrete`]).
    pub net: FlowNet,
}

impl DiscreteFlowNet {
    /// Build and initialize from a dependency mask.
    pub fn new(mask: &DependencyMask, x_dim: usize, config: CpeConfig, seed: u64) -> Self {
        DiscreteFlowNet { net: FlowNet::new(mask, x_dim, FlowVariant::Discrete, config, seed) }
    }

    /// Wrap an existing discrete-variant network (e.g. from a checkpoint).
    pub fn from_net(net: FlowNet) -> Self {
        assert_eq!(net.variant, FlowVariant::Discrete, "expected a discrete-variant network");
        DiscreteFlowNet { net }
    }
}

/// Base density for maximum-likelihood training, evaluated in the
/// network's coordinate space.
pub trait BaseDensity {
    /// Log-density and its gradient at a point.
    fn logpdf_grad(&self, u: ArrayView1<f64>) -> (f64, Array1<f64>);

    /// Log-density alone.
    fn logpdf(&self, u: ArrayView1<f64>) -> f64 {
        self.logpdf_grad(u).0
    }
}

/// Standard normal base.
#[derive(Debug, Clone, Copy)]
pub struct StandardNormalBase;

impl BaseDensity for StandardNormalBase {
    fn logpdf_grad(&self, u: ArrayView1<f64>) -> (f64, Array1<f64>) {
        let d = u.len() as f64;
        let sq: f64 = u.iter().map(|v| v * v).sum();
        let lp = -0.5 * sq - 0.5 * d * (2.0 * std::f64::consts::PI).ln();
        (lp, u.mapv(|v| -v))
    }
}

/// Log-matrix multiplication: `C[i][j] = logsumexp_k(A[i][k] + B[k][j])`,
/// stable under large magnitudes and `-inf` entries.
pub fn log_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, ka) = (a.nrows(), a.ncols());
    let (kb, n) = (b.nrows(), b.ncols());
    assert_eq!(ka, kb, "inner dimensions must match");
    let mut out = Array2::zeros((m, n));
    let mut terms = vec![0.0; ka];
    for i in 0..m {
        for j in 0..n {
            for k in 0..ka {
                terms[k] = a[[i, k]] + b[[k, j]];
            }
            out[[i, j]] = crate::math::logsumexp(&terms);
        }
    }
    out
}

/// Per-dimension log-derivative chains cached for the backward pass.
struct ChainCache {
    /// For each dimension: `cs[l]` after each layer contraction
    /// (`cs[0]` is the first layer's raw diagonal column broadcast over
    /// the batch) and `ts[l-1]` the pre-contraction sums `c_(l-1) + Dlog`.
    dims: Vec<DimChain>,
}

struct DimChain {
    cs: Vec<Array2<f64>>,
    ts: Vec<Array2<f64>>,
}

/// Raw diagonal block of a layer's weights for one coordinate.
fn raw_diag_block<'s>(
    net: &'s FlowNet,
    l: usize,
    dim: usize,
) -> ArrayView2<'s, f64> {
    let layer = &net.layers[l];
    let w = net.store.matrix(layer.weight);
    let rs = dim * layer.d_out..(dim + 1) * layer.d_out;
    let cs = dim * layer.d_in..(dim + 1) * layer.d_in;
    w.slice_move(s![rs, cs])
}

/// Accumulate the per-coordinate diagonal log-derivatives `ell` (batch by
/// dims) through the layer chain.
fn logdet_chain(net: &FlowNet, cache: &FlowCache, batch: usize) -> (Array2<f64>, ChainCache) {
    let k = net.layers.len();
    let dims = net.dims;
    let mut ell = Array2::zeros((batch, dims));
    let mut chains = Vec::with_capacity(dims);
    for i in 0..dims {
        let mut cs: Vec<Array2<f64>> = Vec::with_capacity(k);
        let mut ts: Vec<Array2<f64>> = Vec::with_capacity(k.saturating_sub(1));
        // First layer: log of the exp-transformed diagonal column is the
        // raw entry itself.
        let r0 = raw_diag_block(net, 0, i);
        let w0 = r0.nrows();
        let mut c0 = Array2::zeros((batch, w0));
        for b in 0..batch {
            for r in 0..w0 {
                c0[[b, r]] = r0[[r, 0]];
            }
        }
        cs.push(c0);
        for l in 1..k {
            // Activation derivative of the previous (tanh) layer on this
            // coordinate's units.
            let prev = &net.layers[l - 1];
            let off = i * prev.d_out;
            let mut t = cs[l - 1].clone();
            for b in 0..batch {
                for r in 0..prev.d_out {
                    t[[b, r]] += log_tanh_deriv(cache.pres[l - 1][[b, off + r]]);
                }
            }
            let rl = raw_diag_block(net, l, i);
            let c = log_matmul(t.view(), rl.t());
            ts.push(t);
            cs.push(c);
        }
        let last = cs.last().expect("at least one layer");
        assert_eq!(last.ncols(), 1, "final layer width must be one");
        for b in 0..batch {
            ell[[b, i]] = last[[b, 0]];
        }
        chains.push(DimChain { cs, ts });
    }
    (ell, ChainCache { dims: chains })
}

/// Gate-combined log-determinant per sample:
/// `sum_i logaddexp(log gamma_i, log(1 - gamma_i) + ell_i)`.
fn gate_logdet(gammas: &Array1<f64>, ell: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(ell.nrows());
    for (b, row) in ell.rows().into_iter().enumerate() {
        let mut acc = 0.0;
        for (i, &e) in row.iter().enumerate() {
            let g = gammas[i];
            acc += logaddexp(g.ln(), (1.0 - g).ln() + e);
        }
        out[b] = acc;
    }
    out
}

/// Forward transform and exact log-determinant for a batch.
pub fn forward_logdet_batch(
    dnet: &DiscreteFlowNet,
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>), CpeError> {
    let net = &dnet.net;
    let compiled = net.compile();
    let batch = theta.nrows();
    let data = compiled.embed_data(x)?;
    let cond = compiled.condition(None, &data, batch);
    let cache = compiled.forward(theta, &cond);
    let z = compiled.output(theta, &cache);
    let (ell, _) = logdet_chain(net, &cache, batch);
    let logdet = gate_logdet(&compiled.gammas, &ell);
    if z.iter().any(|v| !v.is_finite()) || logdet.iter().any(|v| !v.is_finite()) {
        return Err(CpeError::Numeric("non-finite discrete-flow forward".into()));
    }
    Ok((z, logdet))
}

/// Forward transform and log-determinant at a single point.
pub fn forward_logdet(
    dnet: &DiscreteFlowNet,
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
) -> Result<(Array1<f64>, f64), CpeError> {
    let (z, ld) = forward_logdet_batch(
        dnet,
        theta.insert_axis(Axis(0)),
        x.insert_axis(Axis(0)),
    )?;
    Ok((z.row(0).to_owned(), ld[0]))
}

/// Negative mean log-likelihood of `theta` rows under the pushforward of
/// `base` through the inverse transform:
/// `mean_b -[ base.logpdf(z_b) + logdet_b ]`.
pub fn ml_loss(
    dnet: &DiscreteFlowNet,
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    base: &dyn BaseDensity,
) -> Result<f64, CpeError> {
    let (z, logdet) = forward_logdet_batch(dnet, theta, x)?;
    let batch = theta.nrows() as f64;
    let mut loss = 0.0;
    for (b, row) in z.rows().into_iter().enumerate() {
        loss -= (base.logpdf(row) + logdet[b]) / batch;
    }
    if !loss.is_finite() {
        return Err(CpeError::Numeric("non-finite maximum-likelihood loss".into()));
    }
    Ok(loss)
}

/// Maximum-likelihood loss plus parameter gradients accumulated into
/// `grads`.
pub fn ml_loss_grad(
    dnet: &DiscreteFlowNet,
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    base: &dyn BaseDensity,
    grads: &mut [f64],
) -> Result<f64, CpeError> {
    let net = &dnet.net;
    assert_eq!(grads.len(), net.store.len(), "gradient buffer length mismatch");
    let compiled = net.compile();
    let batch = theta.nrows();
    let bf = batch as f64;
    let data = compiled.embed_data(x)?;
    let cond = compiled.condition(None, &data, batch);
    let cache = compiled.forward(theta, &cond);
    let z = compiled.output(theta, &cache);
    let (ell, chain) = logdet_chain(net, &cache, batch);
    let logdet = gate_logdet(&compiled.gammas, &ell);

    let mut loss = 0.0;
    let mut d_z = Array2::zeros((batch, net.dims));
    for b in 0..batch {
        let (lp, lg) = base.logpdf_grad(z.row(b));
        loss -= (lp + logdet[b]) / bf;
        for i in 0..net.dims {
            d_z[[b, i]] = -lg[i] / bf;
        }
    }
    if !loss.is_finite() {
        return Err(CpeError::Numeric("non-finite maximum-likelihood loss".into()));
    }

    // Output path: z = gamma theta + (1 - gamma) lambda.
    let lambda = compiled.lambda(&cache);
    let mut d_gammas = vec![0.0; net.dims];
    let mut d_lambda = d_z.clone();
    for b in 0..batch {
        for i in 0..net.dims {
            d_gammas[i] += d_z[[b, i]] * (theta[[b, i]] - lambda[[b, i]]);
            d_lambda[[b, i]] *= 1.0 - compiled.gammas[i];
        }
    }

    // Log-determinant path: d loss / d logdet_b = -1/batch.
    // phi = logaddexp(ln g, ln(1-g) + ell); both partials are stable
    // because exp(ell - phi) <= 1/(1-g) and exp(-phi) <= 1/g.
    let mut d_ell = Array2::zeros((batch, net.dims));
    for b in 0..batch {
        for i in 0..net.dims {
            let g = compiled.gammas[i];
            let phi = logaddexp(g.ln(), (1.0 - g).ln() + ell[[b, i]]);
            d_ell[[b, i]] = -((1.0 - g).ln() + ell[[b, i]] - phi).exp() / bf;
            d_gammas[i] -= ((-phi).exp() - (ell[[b, i]] - phi).exp()) / bf;
        }
    }
    net.gate.accumulate_grad(&net.store, &d_gammas, grads);

    // Backward through the per-dimension log chains. Produces direct raw
    // weight gradients for diagonal blocks plus extra pre-activation
    // gradients via the activation-derivative logs.
    let k = net.layers.len();
    let mut extra: Vec<Array2<f64>> = net
        .layers
        .iter()
        .map(|l| Array2::zeros((batch, net.dims * l.d_out)))
        .collect();
    for i in 0..net.dims {
        let dim_chain = &chain.dims[i];
        let last = &dim_chain.cs[k - 1];
        let mut dc: Array2<f64> = Array2::zeros(last.raw_dim());
        for b in 0..batch {
            dc[[b, 0]] = d_ell[[b, i]];
        }
        for l in (1..k).rev() {
            let rl = raw_diag_block(net, l, i);
            let t = &dim_chain.ts[l - 1];
            let c = &dim_chain.cs[l];
            let (w_out, w_in) = (rl.nrows(), rl.ncols());
            let mut dt = Array2::zeros((batch, w_in));
            {
                let layer = &net.layers[l];
                let mut gw = net.store.grad_matrix_mut(grads, layer.weight);
                let rs = i * layer.d_out..(i + 1) * layer.d_out;
                let cs_range = i * layer.d_in..(i + 1) * layer.d_in;
                let mut gblock = gw.slice_mut(s![rs, cs_range]);
                for b in 0..batch {
                    for r in 0..w_out {
                        let d = dc[[b, r]];
                        if d == 0.0 {
                            continue;
                        }
                        for kk in 0..w_in {
                            let p = (rl[[r, kk]] + t[[b, kk]] - c[[b, r]]).exp();
                            gblock[[r, kk]] += d * p;
                            dt[[b, kk]] += d * p;
                        }
                    }
                }
            }
            // t = c_(l-1) + log tanh'(pre_(l-1)); the derivative of the
            // log-derivative with respect to the pre-activation is
            // -2 tanh(pre), which is the cached activation itself.
            let prev = &net.layers[l - 1];
            let off = i * prev.d_out;
            for b in 0..batch {
                for r in 0..prev.d_out {
                    extra[l - 1][[b, off + r]] +=
                        dt[[b, r]] * (-2.0 * cache.posts[l - 1][[b, off + r]]);
                }
            }
            dc = dt;
        }
        // First layer: c_0 is the raw diagonal column itself.
        let layer = &net.layers[0];
        let mut gw = net.store.grad_matrix_mut(grads, layer.weight);
        let rs = i * layer.d_out..(i + 1) * layer.d_out;
        let cs_range = i * layer.d_in..(i + 1) * layer.d_in;
        let mut gblock = gw.slice_mut(s![rs, cs_range]);
        for b in 0..batch {
            for r in 0..gblock.nrows() {
                gblock[[r, 0]] += dc[[b, r]];
            }
        }
    }

    backprop_stack(net, &compiled, theta, x, &data, &cond, &cache, d_lambda, Some(&extra), grads);
    Ok(loss)
}

/// Solve `forward(theta) = z` for a batch of targets by per-coordinate
/// bisection in topological order.
///
/// `x` may hold one row (shared observation) or one row per target. The
/// stop criterion is image-space: `|forward_i(theta) - z_i| <= tol` per
/// coordinate. Brackets start at `[-10, 10]` and double until they change
/// sign; expansion beyond `1e6` is an inversion failure.
pub fn invert_batch(
    dnet: &DiscreteFlowNet,
    z: ArrayView2<f64>,
    x: ArrayView2<f64>,
    tol: f64,
) -> Result<Array2<f64>, CpeError> {
    let net = &dnet.net;
    let compiled = net.compile();
    let batch = z.nrows();
    let dims = net.dims;
    let k = net.layers.len();
    assert_eq!(z.ncols(), dims, "target width mismatch");
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CpeError::Numeric("non-finite inversion target".into()));
    }
    let data = compiled.embed_data(x)?;
    let cond = compiled.condition(None, &data, batch);

    // Projected conditioning per layer, reused for every coordinate.
    let pcs: Vec<Option<Array2<f64>>> = compiled
        .projs
        .iter()
        .map(|p| {
            p.as_ref().map(|(w, b)| {
                let mut pc = cond.cond.dot(&w.t());
                pc += &b.view().insert_axis(Axis(0));
                pc
            })
        })
        .collect();

    // Solved activations per interior layer (columns of unsolved
    // coordinates stay zero and are never read thanks to the mask).
    let mut posts: Vec<Array2<f64>> = net
        .layers
        .iter()
        .take(k - 1)
        .map(|l| Array2::zeros((batch, dims * l.d_out)))
        .collect();
    let mut theta = Array2::zeros((batch, dims));

    for i in 0..dims {
        // Constant part of each layer's pre-activation on coordinate i's
        // units: bias, conditioning and contributions of solved parents.
        let mut consts: Vec<Array2<f64>> = Vec::with_capacity(k);
        for (l, layer) in compiled.layers.iter().enumerate() {
            let rs = i * layer.d_out..(i + 1) * layer.d_out;
            let mut c = Array2::zeros((batch, layer.d_out));
            for (r, row) in rs.clone().enumerate() {
                c.column_mut(r).fill(layer.bias[row]);
            }
            if let Some(pc) = &pcs[l] {
                let flags = &compiled.unit_flags[l];
                for (r, row) in rs.clone().enumerate() {
                    if flags[row] {
                        let mut col = c.column_mut(r);
                        col += &pc.column(row);
                    }
                }
            }
            for &(bi, bj) in &layer.blocks {
                if bi != i || bj == i {
                    continue;
                }
                let w = layer.eff.slice(s![rs.clone(), bj * layer.d_in..(bj + 1) * layer.d_in]);
                if l == 0 {
                    // Layer input is theta itself (one unit per coordinate).
                    for b in 0..batch {
                        let th = theta[[b, bj]];
                        for r in 0..layer.d_out {
                            c[[b, r]] += w[[r, 0]] * th;
                        }
                    }
                } else {
                    let h = posts[l - 1]
                        .slice(s![.., bj * layer.d_in..(bj + 1) * layer.d_in]);
                    ndarray::linalg::general_mat_mul(1.0, &h, &w.t(), 1.0, &mut c);
                }
            }
            consts.push(c);
        }
        let diag: Vec<ArrayView2<f64>> = (0..k)
            .map(|l| {
                let layer = &compiled.layers[l];
                compiled.layers[l].eff.slice(s![
                    i * layer.d_out..(i + 1) * layer.d_out,
                    i * layer.d_in..(i + 1) * layer.d_in
                ])
            })
            .collect();

        let gamma = compiled.gammas[i];
        // Evaluate the gated forward output of coordinate i for a batch of
        // candidate values.
        let eval = |cand: &Array1<f64>| -> Array1<f64> {
            let mut h: Array2<f64> = Array2::zeros((batch, 0));
            for l in 0..k {
                let mut pre = consts[l].clone();
                if l == 0 {
                    for b in 0..batch {
                        for r in 0..pre.ncols() {
                            pre[[b, r]] += diag[0][[r, 0]] * cand[b];
                        }
                    }
                } else {
                    ndarray::linalg::general_mat_mul(1.0, &h, &diag[l].t(), 1.0, &mut pre);
                }
                h = if l == k - 1 { pre } else { pre.mapv(f64::tanh) };
            }
            Array1::from_shape_fn(batch, |b| gamma * cand[b] + (1.0 - gamma) * h[[b, 0]])
        };

        let mut lo = Array1::from_elem(batch, -10.0);
        let mut hi = Array1::from_elem(batch, 10.0);
        let target = z.column(i);
        // Expand brackets until the root is enclosed everywhere.
        loop {
            let glo = eval(&lo);
            let ghi = eval(&hi);
            let mut expanded = false;
            for b in 0..batch {
                if glo[b] > target[b] {
                    lo[b] *= 2.0;
                    expanded = true;
                }
                if ghi[b] < target[b] {
                    hi[b] *= 2.0;
                    expanded = true;
                }
            }
            if !expanded {
                break;
            }
            if lo.iter().any(|&v| v < -1e6) || hi.iter().any(|&v| v > 1e6) {
                return Err(CpeError::Inversion(format!(
                    "bisection bracket for coordinate {i} exceeded 1e6"
                )));
            }
        }
        // Lockstep bisection; converged rows keep halving harmlessly.
        let mut mid = Array1::zeros(batch);
        for _ in 0..200 {
            for b in 0..batch {
                mid[b] = 0.5 * (lo[b] + hi[b]);
            }
            let g = eval(&mid);
            let mut done = true;
            for b in 0..batch {
                if g[b] > target[b] {
                    hi[b] = mid[b];
                } else {
                    lo[b] = mid[b];
                }
                if (g[b] - target[b]).abs() > tol
                    && hi[b] - lo[b] > 4.0 * f64::EPSILON * mid[b].abs().max(1.0)
                {
                    done = false;
                }
            }
            if done {
                break;
            }
        }
        for b in 0..batch {
            theta[[b, i]] = 0.5 * (lo[b] + hi[b]);
        }

        // Finalize this coordinate's hidden activations for later
        // coordinates.
        let solved = theta.column(i).to_owned();
        let mut h: Array2<f64> = Array2::zeros((batch, 0));
        for l in 0..k - 1 {
            let layer = &compiled.layers[l];
            let mut pre = consts[l].clone();
            if l == 0 {
                for b in 0..batch {
                    for r in 0..pre.ncols() {
                        pre[[b, r]] += diag[0][[r, 0]] * solved[b];
                    }
                }
            } else {
                ndarray::linalg::general_mat_mul(1.0, &h, &diag[l].t(), 1.0, &mut pre);
            }
            h = pre.mapv(f64::tanh);
            posts[l]
                .slice_mut(s![.., i * layer.d_out..(i + 1) * layer.d_out])
                .assign(&h);
        }
    }
    Ok(theta)
}

/// Invert a single target vector.
pub fn invert(
    dnet: &DiscreteFlowNet,
    z: ArrayView1<f64>,
    x: ArrayView1<f64>,
    tol: f64,
) -> Result<Array1<f64>, CpeError> {
    let out = invert_batch(dnet, z.insert_axis(Axis(0)), x.insert_axis(Axis(0)), tol)?;
    Ok(out.row(0).to_owned())
}
