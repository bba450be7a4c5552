//! The conditioned, dependency-masked flow network and its continuous-time
//! training objective.
//!
//! A [`FlowNet`] stacks `K` masked block layers over the parameter
//! coordinates of a posterior program: per-coordinate widths go
//! `1 -> width -> ... -> width -> 1`, interior activations are `tanh` and
//! the last layer is linear. The `(t, x)` embedding enters additively after
//! the first projection, restricted to conditioned coordinates, and the
//! output is the convex combination `v = gamma * theta + (1 - gamma) *
//! lambda` with a trainable gate.
//!
//! The same structure serves both variants. The continuous variant
//! (functions in this module) treats the output as a time-dependent
//! velocity field trained with the rectified regression objective
//! `E ||(theta1 - theta0) - v_t(theta_t, x)||^2` on straight-line couplings.
//! The discrete variant reuses the stack with `exp`-transformed diagonal
//! blocks and no time input; see [`crate::dcpeflow`].
//!
//! All gradients are computed by a hand-written reverse pass and are pinned
//! against central finite differences in the test suites.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::CpeError;
use crate::graph::DependencyMask;
use crate::math::{substream, Rng};
use crate::netblocks::{
    apply_conditioning, Activation, BlockLinearLayer, CompiledBlockLayer, CompiledEmbedder,
    CondCache, ConditionEmbedder, ConvexGate, DiagTransform, MlpCache,
};
use crate::params::{ParamStore, TensorId};

/// Which transform family a [`FlowNet`] realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowVariant {
    /// Time-dependent velocity field trained by rectified regression.
    Continuous,
    /// Time-free invertible map trained by maximum likelihood.
    Discrete,
}

impl FlowVariant {
    /// Tag stored in checkpoint headers.
    pub fn tag(self) -> &'static str {
        match self {
            FlowVariant::Continuous => "continuous",
            FlowVariant::Discrete => "discrete",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpeConfig {
    /// Number of block layers `K`.
    pub layers: usize,
    /// Hidden units per parameter coordinate in interior layers.
    pub width: usize,
    /// Conditioning vector width.
    pub cond_dim: usize,
    /// Number of frozen Fourier frequencies for the time input.
    pub n_freq: usize,
    /// Hidden width of the time MLP.
    pub time_hidden: usize,
    /// Hidden width of the data MLP.
    pub data_hidden: usize,
    /// Condition after every interior layer instead of only the first.
    pub condition_each_layer: bool,
    /// Condition every coordinate, ignoring the conditioning-target set.
    pub condition_all_dims: bool,
    /// One gate value per coordinate instead of a single scalar.
    pub per_dim_gate: bool,
    /// Rank of optional low-rank corrections on off-diagonal blocks.
    pub low_rank: Option<usize>,
}

impl Default for CpeConfig {
    fn default() -> Self {
        CpeConfig {
            layers: 3,
            width: 64,
            cond_dim: 64,
            n_freq: 32,
            time_hidden: 64,
            data_hidden: 128,
            condition_each_layer: false,
            condition_all_dims: false,
            per_dim_gate: false,
            low_rank: None,
        }
    }
}

/// A complete flow network: masked block stack, conditioning path and gate.
#[derive(Debug, Clone)]
pub struct FlowNet {
    /// All parameters.
    pub store: ParamStore,
    /// Architecture settings.
    pub config: CpeConfig,
    /// Transform family.
    pub variant: FlowVariant,
    /// Parameter dimension (flow layout).
    pub dims: usize,
    /// Observation dimension.
    pub x_dim: usize,
    /// Block layers, input to output.
    pub layers: Vec<BlockLinearLayer>,
    /// `(t, x)` or `x` embedder.
    pub embedder: ConditionEmbedder,
    /// Per-layer conditioning projections `(P, bias)`; `None` where the
    /// layer is not conditioned.
    pub projs: Vec<Option<(TensorId, TensorId)>>,
    /// Output gate.
    pub gate: ConvexGate,
    /// Per-layer flags marking hidden units of conditioned coordinates.
    pub unit_flags: Vec<Vec<bool>>,
    /// Coordinate-level dependency mask (row may read column).
    pub dim_mask: Array2<bool>,
}

impl FlowNet {
    /// Build and initialize a network for a posterior program's dependency
    /// mask. `seed` fully determines the initialization.
    pub fn new(
        mask: &DependencyMask,
        x_dim: usize,
        variant: FlowVariant,
        config: CpeConfig,
        seed: u64,
    ) -> Self {
        assert!(config.layers >= 1, "need at least one block layer");
        let dims = mask.theta_dim();
        let mut store = ParamStore::new();
        let diag = match variant {
            FlowVariant::Continuous => DiagTransform::Identity,
            FlowVariant::Discrete => DiagTransform::Exp,
        };

        let mut layers = Vec::new();
        let mut unit_flags = Vec::new();
        let target = |d: usize| config.condition_all_dims || mask.target_dim_flags[d];
        for l in 0..config.layers {
            let d_in = if l == 0 { 1 } else { config.width };
            let d_out = if l == config.layers - 1 { 1 } else { config.width };
            let act = if l == config.layers - 1 { Activation::Identity } else { Activation::Tanh };
            layers.push(BlockLinearLayer::new(
                &mut store,
                &format!("layer{l}"),
                mask.dim_mask.view(),
                d_in,
                d_out,
                act,
                diag,
                config.low_rank,
            ));
            let mut flags = vec![false; dims * d_out];
            for d in 0..dims {
                if target(d) {
                    flags[d * d_out..(d + 1) * d_out].fill(true);
                }
            }
            unit_flags.push(flags);
        }

        let embedder = ConditionEmbedder::new(
            &mut store,
            "embed",
            x_dim,
            config.cond_dim,
            variant == FlowVariant::Continuous,
            config.n_freq,
            config.time_hidden,
            config.data_hidden,
        );

        let mut projs = Vec::new();
        for (l, layer) in layers.iter().enumerate() {
            let conditioned = l == 0 || (config.condition_each_layer && l < config.layers - 1);
            if !conditioned {
                projs.push(None);
                continue;
            }
            let rows = dims * layer.d_out;
            let p = store.add_tensor(&format!("proj{l}.weight"), rows, config.cond_dim, true);
            let pb = store.add_tensor(&format!("proj{l}.bias"), rows, 1, true);
            let flags = &unit_flags[l];
            let mut wmask = vec![0.0; rows * config.cond_dim];
            let mut bmask = vec![0.0; rows];
            for (r, &f) in flags.iter().enumerate() {
                if f {
                    wmask[r * config.cond_dim..(r + 1) * config.cond_dim].fill(1.0);
                    bmask[r] = 1.0;
                }
            }
            store.set_mask(p, wmask);
            store.set_mask(pb, bmask);
            projs.push(Some((p, pb)));
        }

        let gate = if config.per_dim_gate {
            ConvexGate::with_len(&mut store, "out", dims)
        } else {
            ConvexGate::new(&mut store, "out")
        };

        let mut net = FlowNet {
            store,
            config,
            variant,
            dims,
            x_dim,
            layers,
            embedder,
            projs,
            gate,
            unit_flags,
            dim_mask: mask.dim_mask.clone(),
        };
        net.initialize(seed);
        net
    }

    /// Reinitialize all weights from a seed.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng: Rng = substream(seed, 0);
        for layer in &self.layers {
            layer.init(&mut self.store, &mut rng);
        }
        self.embedder.init(&mut self.store, &mut rng);
        let bound = 1.0 / (self.config.cond_dim as f64).sqrt();
        for proj in self.projs.iter().flatten() {
            let mut w = self.store.matrix_mut(proj.0);
            w.iter_mut().for_each(|v| *v = rand::Rng::gen_range(&mut rng, -bound..bound));
        }
        // Gate raw values stay zero: gamma starts at one half.
        self.store.apply_masks();
    }

    /// Materialize all weights for repeated evaluation.
    pub fn compile(&self) -> CompiledFlow {
        CompiledFlow {
            layers: self.layers.iter().map(|l| l.compile(&self.store)).collect(),
            embedder: self.embedder.compile(&self.store),
            projs: self
                .projs
                .iter()
                .map(|p| {
                    p.as_ref().map(|(w, b)| {
                        (self.store.matrix(*w).to_owned(), self.store.vector(*b).to_owned())
                    })
                })
                .collect(),
            gammas: self.gate.gammas(&self.store, self.dims),
            unit_flags: self.unit_flags.clone(),
            variant: self.variant,
            dims: self.dims,
        }
    }
}

/// Materialized network.
#[derive(Debug, Clone)]
pub struct CompiledFlow {
    /// Compiled block layers.
    pub layers: Vec<CompiledBlockLayer>,
    /// Compiled embedder.
    pub embedder: CompiledEmbedder,
    /// Compiled conditioning projections.
    pub projs: Vec<Option<(Array2<f64>, Array1<f64>)>>,
    /// Gate values per coordinate.
    pub gammas: Array1<f64>,
    /// Per-layer conditioned-unit flags.
    pub unit_flags: Vec<Vec<bool>>,
    /// Transform family.
    pub variant: FlowVariant,
    /// Parameter dimension.
    pub dims: usize,
}

/// Cached intermediates of a stack forward pass.
#[derive(Debug, Clone)]
pub struct FlowCache {
    /// Pre-activations per layer (conditioning included).
    pub pres: Vec<Array2<f64>>,
    /// Activations per layer; the last entry is `lambda`.
    pub posts: Vec<Array2<f64>>,
}

impl CompiledFlow {
    /// Run the data branch of the embedder.
    pub fn embed_data(&self, x: ArrayView2<f64>) -> Result<MlpCache, CpeError> {
        self.embedder.embed_data(x)
    }

    /// Build conditioning vectors; `ts` must be given iff the variant is
    /// continuous.
    pub fn condition(&self, ts: Option<&[f64]>, data: &MlpCache, batch: usize) -> CondCache {
        self.embedder.condition(ts, data, batch)
    }

    /// Forward pass of the block stack for a batch of parameter vectors in
    /// flow layout; conditioning from `cond` is added after each
    /// conditioned layer's projection.
    pub fn forward(&self, theta: ArrayView2<f64>, cond: &CondCache) -> FlowCache {
        let batch = theta.nrows();
        assert_eq!(theta.ncols(), self.dims, "parameter width mismatch");
        assert_eq!(cond.cond.nrows(), batch, "conditioning batch mismatch");
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut posts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = if l == 0 {
                layer.forward(theta)
            } else {
                layer.forward(posts[l - 1].view())
            };
            if let Some((p, pb)) = &self.projs[l] {
                let mut pc = cond.cond.dot(&p.t());
                pc += &pb.view().insert_axis(Axis(0));
                apply_conditioning(&mut pre, pc.view(), &self.unit_flags[l]);
            }
            let post = layer.activate(&pre);
            pres.push(pre);
            posts.push(post);
        }
        FlowCache { pres, posts }
    }

    /// Stack output `lambda` from a forward cache.
    pub fn lambda<'c>(&self, cache: &'c FlowCache) -> &'c Array2<f64> {
        cache.posts.last().expect("at least one layer")
    }

    /// Gated output `gamma * theta + (1 - gamma) * lambda`.
    pub fn output(&self, theta: ArrayView2<f64>, cache: &FlowCache) -> Array2<f64> {
        let lambda = self.lambda(cache);
        let mut out = lambda.clone();
        for (mut row, trow) in out.rows_mut().into_iter().zip(theta.rows()) {
            for i in 0..self.dims {
                let g = self.gammas[i];
                row[i] = g * trow[i] + (1.0 - g) * row[i];
            }
        }
        out
    }

    /// Convenience: conditioning plus forward plus gate in one call.
    pub fn transform(
        &self,
        theta: ArrayView2<f64>,
        ts: Option<&[f64]>,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>, CpeError> {
        let data = self.embed_data(x)?;
        let cond = self.condition(ts, &data, theta.nrows());
        let cache = self.forward(theta, &cond);
        Ok(self.output(theta, &cache))
    }
}

/// Velocity of the continuous field at a single point.
///
/// `theta` is in flow layout; the result is finite for finite inputs and a
/// non-finite input is rejected as a numeric error.
pub fn vector_field(
    net: &FlowNet,
    t: f64,
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>, CpeError> {
    assert_eq!(net.variant, FlowVariant::Continuous, "vector field is continuous-variant only");
    if !t.is_finite() || theta.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(CpeError::Numeric("non-finite input to vector field".into()));
    }
    let compiled = net.compile();
    let theta2 = theta.insert_axis(Axis(0));
    let x2 = x.insert_axis(Axis(0));
    let out = compiled.transform(theta2, Some(&[t]), x2)?;
    Ok(out.row(0).to_owned())
}

/// Straight-line interpolation `t * theta1 + (1 - t) * theta0`.
pub fn interpolate_one(theta0: ArrayView1<f64>, theta1: ArrayView1<f64>, t: f64) -> Array1<f64> {
    assert_eq!(theta0.len(), theta1.len());
    ndarray::Zip::from(theta0).and(theta1).map_collect(|&a, &b| t * b + (1.0 - t) * a)
}

/// Row-wise straight-line interpolation with one time per row.
pub fn interpolate(theta0: ArrayView2<f64>, theta1: ArrayView2<f64>, ts: &[f64]) -> Array2<f64> {
    assert_eq!(theta0.shape(), theta1.shape());
    assert_eq!(theta0.nrows(), ts.len());
    let mut out = theta0.to_owned();
    for ((mut row, t1), &t) in out.rows_mut().into_iter().zip(theta1.rows()).zip(ts.iter()) {
        for (a, &b) in row.iter_mut().zip(t1.iter()) {
            *a = t * b + (1.0 - t) * *a;
        }
    }
    out
}

/// Mean squared rectified-flow residual
/// `mean_b || target_b - v(theta_b, t_b, x_b) ||^2`.
pub fn rectified_loss(
    net: &FlowNet,
    theta_t: ArrayView2<f64>,
    ts: &[f64],
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<f64, CpeError> {
    let compiled = net.compile();
    let v = compiled.transform(theta_t, Some(ts), x)?;
    let batch = theta_t.nrows() as f64;
    let loss = ndarray::Zip::from(&v)
        .and(&target)
        .fold(0.0, |acc, &vi, &ti| acc + (ti - vi) * (ti - vi))
        / batch;
    if !loss.is_finite() {
        return Err(CpeError::Numeric("non-finite rectified loss".into()));
    }
    Ok(loss)
}

/// Rectified loss plus parameter gradients accumulated into `grads`
/// (length of the parameter store).
pub fn rectified_loss_grad(
    net: &FlowNet,
    theta_t: ArrayView2<f64>,
    ts: &[f64],
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
    grads: &mut [f64],
) -> Result<f64, CpeError> {
    assert_eq!(grads.len(), net.store.len(), "gradient buffer length mismatch");
    let compiled = net.compile();
    let batch = theta_t.nrows();
    let data = compiled.embed_data(x)?;
    let cond = compiled.condition(Some(ts), &data, batch);
    let cache = compiled.forward(theta_t, &cond);
    let v = compiled.output(theta_t, &cache);

    let bf = batch as f64;
    let loss = ndarray::Zip::from(&v)
        .and(&target)
        .fold(0.0, |acc, &vi, &ti| acc + (ti - vi) * (ti - vi))
        / bf;
    if !loss.is_finite() {
        return Err(CpeError::Numeric("non-finite rectified loss".into()));
    }

    // d loss / d v
    let mut d_v = v;
    ndarray::Zip::from(&mut d_v).and(&target).for_each(|dv, &ti| *dv = 2.0 * (*dv - ti) / bf);

    // Gate path: v = gamma theta + (1 - gamma) lambda.
    let lambda = compiled.lambda(&cache);
    let mut d_gammas = vec![0.0; net.dims];
    let mut d_lambda = d_v.clone();
    for b in 0..batch {
        for i in 0..net.dims {
            d_gammas[i] += d_v[[b, i]] * (theta_t[[b, i]] - lambda[[b, i]]);
            d_lambda[[b, i]] *= 1.0 - compiled.gammas[i];
        }
    }
    net.gate.accumulate_grad(&net.store, &d_gammas, grads);

    backprop_stack(net, &compiled, theta_t, x, &data, &cond, &cache, d_lambda, None, grads);
    Ok(loss)
}

/// Reverse pass through the block stack, conditioning projections and
/// embedder. `d_lambda` is the upstream gradient on the stack output;
/// `extra_d_pre` optionally adds per-layer gradients on the
/// pre-activations (used by the discrete variant's log-det path). Returns
/// the gradient with respect to the input `theta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backprop_stack(
    net: &FlowNet,
    compiled: &CompiledFlow,
    theta: ArrayView2<f64>,
    x: ArrayView2<f64>,
    data: &MlpCache,
    cond: &CondCache,
    cache: &FlowCache,
    d_lambda: Array2<f64>,
    extra_d_pre: Option<&[Array2<f64>]>,
    grads: &mut [f64],
) -> Array2<f64> {
    let nl = net.layers.len();
    let batch = theta.nrows();
    let mut d_cond: Array2<f64> = Array2::zeros((batch, net.config.cond_dim));
    let mut d_post = d_lambda;
    for l in (0..nl).rev() {
        let layer = &compiled.layers[l];
        // Activation backward.
        let mut d_pre = d_post;
        if layer.activation == Activation::Tanh {
            ndarray::Zip::from(&mut d_pre)
                .and(&cache.posts[l])
                .for_each(|d, &h| *d *= 1.0 - h * h);
        }
        if let Some(extra) = extra_d_pre {
            d_pre += &extra[l];
        }
        // Conditioning backward (the projection rows of unconditioned
        // units are masked, so restrict explicitly to target units).
        if let Some((p, _)) = &compiled.projs[l] {
            let flags = &compiled.unit_flags[l];
            let mut d_pc = d_pre.clone();
            for mut row in d_pc.rows_mut() {
                for (v, &f) in row.iter_mut().zip(flags.iter()) {
                    if !f {
                        *v = 0.0;
                    }
                }
            }
            let (pw, pb) = net.projs[l].as_ref().expect("definition matches compiled");
            {
                let mut gp = net.store.grad_matrix_mut(grads, *pw);
                ndarray::linalg::general_mat_mul(1.0, &d_pc.t(), &cond.cond, 1.0, &mut gp);
            }
            {
                let range = net.store.range(*pb);
                let sums = d_pc.sum_axis(Axis(0));
                for (g, &s) in grads[range].iter_mut().zip(sums.iter()) {
                    *g += s;
                }
            }
            ndarray::linalg::general_mat_mul(1.0, &d_pc, p, 1.0, &mut d_cond);
        }
        // Affine backward.
        let mut d_eff = Array2::zeros(layer.eff.raw_dim());
        let mut d_bias = Array1::zeros(layer.bias.len());
        let d_h = if l == 0 {
            layer.backward(theta, d_pre.view(), &mut d_eff, &mut d_bias)
        } else {
            layer.backward(cache.posts[l - 1].view(), d_pre.view(), &mut d_eff, &mut d_bias)
        };
        net.layers[l].accumulate_weight_grads(&net.store, layer, &d_eff, &d_bias, grads);
        d_post = d_h;
    }
    // Embedder backward.
    let ts_present = compiled.embedder.time.is_some();
    if ts_present || d_cond.iter().any(|&v| v != 0.0) {
        let eg = compiled.embedder.backward(x, data, cond, d_cond.view());
        net.embedder.accumulate_grads(&net.store, &eg, grads);
    }
    d_post
}

/// Central finite-difference Jacobian of the network output with respect
/// to `theta` at one point (`t` given iff continuous).
pub fn numeric_jacobian(
    net: &FlowNet,
    t: Option<f64>,
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
    step: f64,
) -> Result<Array2<f64>, CpeError> {
    let compiled = net.compile();
    let ts: Option<Vec<f64>> = t.map(|t| vec![t]);
    let x2 = x.insert_axis(Axis(0));
    let d = theta.len();
    let mut jac = Array2::zeros((d, d));
    let mut point = theta.to_owned();
    for j in 0..d {
        let orig = point[j];
        point[j] = orig + step;
        let up = compiled.transform(point.view().insert_axis(Axis(0)), ts.as_deref(), x2)?;
        point[j] = orig - step;
        let down = compiled.transform(point.view().insert_axis(Axis(0)), ts.as_deref(), x2)?;
        point[j] = orig;
        for i in 0..d {
            jac[[i, j]] = (up[[0, i]] - down[[0, i]]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Boolean sparsity pattern of the numeric Jacobian: entry `(i, j)` is true
/// when `|dv_i / dtheta_j|` exceeds `threshold`.
pub fn jacobian_pattern(
    net: &FlowNet,
    t: Option<f64>,
    theta: ArrayView1<f64>,
    x: ArrayView1<f64>,
    threshold: f64,
) -> Result<Array2<bool>, CpeError> {
    let jac = numeric_jacobian(net, t, theta, x, 1e-6)?;
    Ok(jac.mapv(|v| v.abs() > threshold))
}
