//! Masked block-linear layers, conditioning embedders and the convex gate.
//!
//! A block layer maps `dims` parameter coordinates, each carried by `d_in`
//! hidden units, to the same coordinates carried by `d_out` units. The
//! weight matrix is stored dense with shape `(dims * d_out, dims * d_in)`
//! but only unit blocks permitted by the coordinate-level dependency mask
//! are ever touched: masked entries are structurally zero, receive zero
//! gradient and are re-zeroed after every optimizer step. Entries of blocks
//! on the coordinate diagonal can optionally pass through `exp`, which makes
//! every output coordinate strictly increasing in its own input coordinate
//! and is the basis of the discrete flow variant.
//!
//! Forward passes work on whole batches as a sequence of per-block GEMMs
//! against a compiled (transform-applied) copy of the weights, and every
//! layer exposes a matching hand-derived backward pass. Gradient
//! correctness is pinned against central finite differences in the test
//! suites.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;

use crate::math::Rng;
use crate::params::{ParamStore, TensorId};

/// Elementwise activation applied after a block transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    /// Hyperbolic tangent.
    Tanh,
    /// No activation (used on the final layer).
    Identity,
}

/// Transform applied to entries of diagonal unit blocks before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DiagTransform {
    /// Use raw entries (continuous variant).
    Identity,
    /// Strictly positive reparameterization (discrete variant).
    Exp,
}

/// Optional rank-`r` correction `xi * zeta^T` for one off-diagonal block.
#[derive(Debug, Clone)]
pub struct LowRankBlock {
    /// Output coordinate of the corrected block.
    pub out_dim: usize,
    /// Input coordinate of the corrected block.
    pub in_dim: usize,
    /// Factor of shape `(d_out, r)`.
    pub xi: TensorId,
    /// Factor of shape `(d_in, r)`.
    pub zeta: TensorId,
    /// Rank of the correction.
    pub rank: usize,
}

/// A masked block-linear layer definition (tensors live in a [`ParamStore`]).
#[derive(Debug, Clone)]
pub struct BlockLinearLayer {
    /// Full weight matrix of shape `(dims * d_out, dims * d_in)`.
    pub weight: TensorId,
    /// Bias of shape `(dims * d_out,)`.
    pub bias: TensorId,
    /// Number of parameter coordinates.
    pub dims: usize,
    /// Hidden units per coordinate on the input side.
    pub d_in: usize,
    /// Hidden units per coordinate on the output side.
    pub d_out: usize,
    /// Activation applied after the affine map (and conditioning, if any).
    pub activation: Activation,
    /// Transform for diagonal-block entries.
    pub diag_transform: DiagTransform,
    /// Allowed `(out_dim, in_dim)` block pairs, diagonal included.
    pub blocks: Vec<(usize, usize)>,
    /// Low-rank corrections, empty unless explicitly enabled.
    pub low_rank: Vec<LowRankBlock>,
}

impl BlockLinearLayer {
    /// Register a layer whose block pattern follows a coordinate-level
    /// dependency mask (`dim_mask[i][j]`: output coordinate `i` may read
    /// input coordinate `j`).
    ///
    /// `low_rank` attaches rank-`r` corrections to every allowed
    /// off-diagonal block when `Some(r)`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim_mask: ArrayView2<bool>,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        diag_transform: DiagTransform,
        low_rank: Option<usize>,
    ) -> Self {
        let dims = dim_mask.nrows();
        assert_eq!(dim_mask.ncols(), dims, "dim mask must be square");
        let rows = dims * d_out;
        let cols = dims * d_in;
        let weight = store.add_tensor(&format!("{prefix}.weight"), rows, cols, true);
        let bias = store.add_tensor(&format!("{prefix}.bias"), rows, 1, true);

        let mut blocks = Vec::new();
        let mut mask = vec![0.0; rows * cols];
        for i in 0..dims {
            for j in 0..dims {
                if dim_mask[[i, j]] {
                    blocks.push((i, j));
                    for r in i * d_out..(i + 1) * d_out {
                        for c in j * d_in..(j + 1) * d_in {
                            mask[r * cols + c] = 1.0;
                        }
                    }
                }
            }
        }
        store.set_mask(weight, mask);

        let mut lr = Vec::new();
        if let Some(rank) = low_rank {
            for &(i, j) in &blocks {
                if i == j {
                    continue;
                }
                let xi = store.add_tensor(&format!("{prefix}.lr_xi.{i}.{j}"), d_out, rank, true);
                let zeta =
                    store.add_tensor(&format!("{prefix}.lr_zeta.{i}.{j}"), d_in, rank, true);
                lr.push(LowRankBlock { out_dim: i, in_dim: j, xi, zeta, rank });
            }
        }

        BlockLinearLayer {
            weight,
            bias,
            dims,
            d_in,
            d_out,
            activation,
            diag_transform,
            blocks,
            low_rank: lr,
        }
    }

    /// Draw initial weights: unmasked entries uniform in `+-1/sqrt(fan_in)`
    /// with `fan_in` the full input width, biases zero. Entries of
    /// exp-transformed diagonal blocks are shifted by `-ln(d_in)` so the
    /// transformed entries start near `1/d_in` and block-diagonal row sums
    /// start near one.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let cols = self.dims * self.d_in;
        let bound = 1.0 / (cols as f64).sqrt();
        let shift = match self.diag_transform {
            DiagTransform::Identity => 0.0,
            DiagTransform::Exp => -((self.d_in as f64).max(1.0)).ln(),
        };
        {
            let mut w = store.matrix_mut(self.weight);
            for &(i, j) in &self.blocks {
                for r in i * self.d_out..(i + 1) * self.d_out {
                    for c in j * self.d_in..(j + 1) * self.d_in {
                        let u = rng.gen_range(-bound..bound);
                        w[[r, c]] = if i == j { u + shift } else { u };
                    }
                }
            }
        }
        store.vector_mut(self.bias).fill(0.0);
        for lr in &self.low_rank {
            let b = 1.0 / ((self.d_in * lr.rank) as f64).sqrt();
            let mut xi = store.matrix_mut(lr.xi);
            xi.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
            let mut zeta = store.matrix_mut(lr.zeta);
            zeta.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
        }
    }

    /// Materialize effective weights (mask, diagonal transform and low-rank
    /// corrections applied) for fast repeated evaluation.
    pub fn compile(&self, store: &ParamStore) -> CompiledBlockLayer {
        let rows = self.dims * self.d_out;
        let cols = self.dims * self.d_in;
        let raw = store.matrix(self.weight);
        let mut eff = Array2::zeros((rows, cols));
        for &(i, j) in &self.blocks {
            let rs = i * self.d_out..(i + 1) * self.d_out;
            let cs = j * self.d_in..(j + 1) * self.d_in;
            let mut dst = eff.slice_mut(s![rs.clone(), cs.clone()]);
            let src = raw.slice(s![rs, cs]);
            if i == j && self.diag_transform == DiagTransform::Exp {
                ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = s.exp());
            } else {
                dst.assign(&src);
            }
        }
        for lr in &self.low_rank {
            let xi = store.matrix(lr.xi);
            let zeta = store.matrix(lr.zeta);
            let rs = lr.out_dim * self.d_out..(lr.out_dim + 1) * self.d_out;
            let cs = lr.in_dim * self.d_in..(lr.in_dim + 1) * self.d_in;
            let mut dst = eff.slice_mut(s![rs, cs]);
            ndarray::linalg::general_mat_mul(1.0, &xi, &zeta.t(), 1.0, &mut dst);
        }
        CompiledBlockLayer {
            eff,
            bias: store.vector(self.bias).to_owned(),
            dims: self.dims,
            d_in: self.d_in,
            d_out: self.d_out,
            activation: self.activation,
            diag_transform: self.diag_transform,
            blocks: self.blocks.clone(),
        }
    }

    /// Map effective-weight gradients back to raw-parameter gradients and
    /// accumulate them (with bias and low-rank factors) into `grads`.
    ///
    /// For exp-transformed diagonal entries `d raw = d eff * eff`; all other
    /// unmasked entries pass through unchanged.
    pub fn accumulate_weight_grads(
        &self,
        store: &ParamStore,
        compiled: &CompiledBlockLayer,
        d_eff: &Array2<f64>,
        d_bias: &Array1<f64>,
        grads: &mut [f64],
    ) {
        {
            let mut gw = store.grad_matrix_mut(grads, self.weight);
            for &(i, j) in &self.blocks {
                let rs = i * self.d_out..(i + 1) * self.d_out;
                let cs = j * self.d_in..(j + 1) * self.d_in;
                let src = d_eff.slice(s![rs.clone(), cs.clone()]);
                let mut dst = gw.slice_mut(s![rs.clone(), cs.clone()]);
                if i == j && self.diag_transform == DiagTransform::Exp {
                    let eff = compiled.eff.slice(s![rs, cs]);
                    ndarray::Zip::from(&mut dst)
                        .and(&src)
                        .and(&eff)
                        .for_each(|d, &g, &e| *d += g * e);
                } else {
                    dst += &src;
                }
            }
        }
        {
            let range = store.range(self.bias);
            for (g, &d) in grads[range].iter_mut().zip(d_bias.iter()) {
                *g += d;
            }
        }
        for lr in &self.low_rank {
            let rs = lr.out_dim * self.d_out..(lr.out_dim + 1) * self.d_out;
            let cs = lr.in_dim * self.d_in..(lr.in_dim + 1) * self.d_in;
            let block = d_eff.slice(s![rs, cs]);
            let xi = store.matrix(lr.xi);
            let zeta = store.matrix(lr.zeta);
            let mut gxi = store.grad_matrix_mut(grads, lr.xi);
            ndarray::linalg::general_mat_mul(1.0, &block, &zeta, 1.0, &mut gxi);
            drop(gxi);
            let mut gzeta = store.grad_matrix_mut(grads, lr.zeta);
            ndarray::linalg::general_mat_mul(1.0, &block.t(), &xi, 1.0, &mut gzeta);
        }
    }
}

/// Materialized block layer used by forward and backward passes.
#[derive(Debug, Clone)]
pub struct CompiledBlockLayer {
    /// Effective weights (masked blocks are zero).
    pub eff: Array2<f64>,
    /// Bias vector.
    pub bias: Array1<f64>,
    /// Number of parameter coordinates.
    pub dims: usize,
    /// Hidden units per coordinate, input side.
    pub d_in: usize,
    /// Hidden units per coordinate, output side.
    pub d_out: usize,
    /// Activation of this layer.
    pub activation: Activation,
    /// Diagonal transform of this layer.
    pub diag_transform: DiagTransform,
    /// Allowed `(out_dim, in_dim)` pairs.
    pub blocks: Vec<(usize, usize)>,
}

impl CompiledBlockLayer {
    /// Output width `dims * d_out`.
    pub fn out_width(&self) -> usize {
        self.dims * self.d_out
    }

    /// Input width `dims * d_in`.
    pub fn in_width(&self) -> usize {
        self.dims * self.d_in
    }

    /// Pre-activation affine map for a batch of inputs (rows are samples):
    /// `pre = h W_eff^T + bias`, touching only allowed blocks.
    pub fn forward(&self, h: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(h.ncols(), self.in_width(), "block layer input width mismatch");
        let b = h.nrows();
        let mut pre = Array2::zeros((b, self.out_width()));
        for &(i, j) in &self.blocks {
            let rs = i * self.d_out..(i + 1) * self.d_out;
            let cs = j * self.d_in..(j + 1) * self.d_in;
            let w = self.eff.slice(s![rs.clone(), cs.clone()]);
            let hin = h.slice(s![.., cs]);
            let mut out = pre.slice_mut(s![.., rs]);
            ndarray::linalg::general_mat_mul(1.0, &hin, &w.t(), 1.0, &mut out);
        }
        pre += &self.bias.view().insert_axis(ndarray::Axis(0));
        pre
    }

    /// Apply this layer's activation elementwise.
    pub fn activate(&self, pre: &Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Tanh => pre.mapv(f64::tanh),
            Activation::Identity => pre.clone(),
        }
    }

    /// Backward pass of [`CompiledBlockLayer::forward`].
    ///
    /// Given upstream gradients with respect to the pre-activation, fills
    /// effective-weight and bias gradients and returns the gradient with
    /// respect to the layer input.
    pub fn backward(
        &self,
        h_in: ArrayView2<f64>,
        d_pre: ArrayView2<f64>,
        d_eff: &mut Array2<f64>,
        d_bias: &mut Array1<f64>,
    ) -> Array2<f64> {
        let b = h_in.nrows();
        assert_eq!(d_pre.nrows(), b);
        let mut d_h = Array2::zeros((b, self.in_width()));
        for &(i, j) in &self.blocks {
            let rs = i * self.d_out..(i + 1) * self.d_out;
            let cs = j * self.d_in..(j + 1) * self.d_in;
            let dpre_b = d_pre.slice(s![.., rs.clone()]);
            let hin_b = h_in.slice(s![.., cs.clone()]);
            let mut dw = d_eff.slice_mut(s![rs.clone(), cs.clone()]);
            ndarray::linalg::general_mat_mul(1.0, &dpre_b.t(), &hin_b, 1.0, &mut dw);
            let w = self.eff.slice(s![rs, cs.clone()]);
            let mut dh = d_h.slice_mut(s![.., cs]);
            ndarray::linalg::general_mat_mul(1.0, &dpre_b, &w, 1.0, &mut dh);
        }
        *d_bias += &d_pre.sum_axis(ndarray::Axis(0));
        d_h
    }
}

/// Frozen random Fourier features of a scalar.
#[derive(Debug, Clone)]
pub struct FourierEmbedding {
    /// Frozen frequency tensor of shape `(n_freq, 1)`.
    pub freq: TensorId,
    /// Number of frequencies; the embedding has width `2 * n_freq`.
    pub n_freq: usize,
}

impl FourierEmbedding {
    /// Register `n_freq` frozen frequencies.
    pub fn new(store: &mut ParamStore, prefix: &str, n_freq: usize) -> Self {
        let freq = store.add_tensor(&format!("{prefix}.freq"), n_freq, 1, false);
        FourierEmbedding { freq, n_freq }
    }

    /// Draw frequencies from a standard normal; they stay frozen afterwards.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let mut f = store.vector_mut(self.freq);
        for v in f.iter_mut() {
            *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        }
    }

    /// Embedding width.
    pub fn out_dim(&self) -> usize {
        2 * self.n_freq
    }

    /// Features `[sin(2 pi f_k t) .. , cos(2 pi f_k t) ..]` for a batch of
    /// scalars.
    pub fn embed(freqs: ArrayView1<f64>, ts: &[f64]) -> Array2<f64> {
        let n = freqs.len();
        let mut out = Array2::zeros((ts.len(), 2 * n));
        for (row, &t) in ts.iter().enumerate() {
            for (k, &f) in freqs.iter().enumerate() {
                let phase = 2.0 * std::f64::consts::PI * f * t;
                out[[row, k]] = phase.sin();
                out[[row, n + k]] = phase.cos();
            }
        }
        out
    }
}

/// Two-layer perceptron: `Linear -> tanh -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// First weight, shape `(hidden, in_dim)`.
    pub w1: TensorId,
    /// First bias.
    pub b1: TensorId,
    /// Second weight, shape `(out_dim, hidden)`.
    pub w2: TensorId,
    /// Second bias.
    pub b2: TensorId,
    /// Input width.
    pub in_dim: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Output width.
    pub out_dim: usize,
}

impl Mlp {
    /// Register a `in_dim -> hidden -> out_dim` perceptron.
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            w1: store.add_tensor(&format!("{prefix}.w1"), hidden, in_dim, true),
            b1: store.add_tensor(&format!("{prefix}.b1"), hidden, 1, true),
            w2: store.add_tensor(&format!("{prefix}.w2"), out_dim, hidden, true),
            b2: store.add_tensor(&format!("{prefix}.b2"), out_dim, 1, true),
            in_dim,
            hidden,
            out_dim,
        }
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for (w, fan) in [(self.w1, self.in_dim), (self.w2, self.hidden)] {
            let bound = 1.0 / (fan as f64).sqrt();
            let mut m = store.matrix_mut(w);
            m.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        store.vector_mut(self.b1).fill(0.0);
        store.vector_mut(self.b2).fill(0.0);
    }

    /// Materialize weights.
    pub fn compile(&self, store: &ParamStore) -> CompiledMlp {
        CompiledMlp {
            w1: store.matrix(self.w1).to_owned(),
            b1: store.vector(self.b1).to_owned(),
            w2: store.matrix(self.w2).to_owned(),
            b2: store.vector(self.b2).to_owned(),
        }
    }

    /// Accumulate MLP gradients computed by [`CompiledMlp::backward`].
    pub fn accumulate_grads(&self, store: &ParamStore, g: &MlpGrads, grads: &mut [f64]) {
        let mut gw1 = store.grad_matrix_mut(grads, self.w1);
        gw1 += &g.w1;
        drop(gw1);
        let mut gw2 = store.grad_matrix_mut(grads, self.w2);
        gw2 += &g.w2;
        drop(gw2);
        for (dst, src) in [(self.b1, &g.b1), (self.b2, &g.b2)] {
            let range = store.range(dst);
            for (gv, &sv) in grads[range].iter_mut().zip(src.iter()) {
                *gv += sv;
            }
        }
    }
}

/// Materialized MLP.
#[derive(Debug, Clone)]
pub struct CompiledMlp {
    /// First weight.
    pub w1: Array2<f64>,
    /// First bias.
    pub b1: Array1<f64>,
    /// Second weight.
    pub w2: Array2<f64>,
    /// Second bias.
    pub b2: Array1<f64>,
}

/// Cached intermediates of an MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Hidden activations `tanh(x W1^T + b1)`.
    pub h: Array2<f64>,
    /// Output `h W2^T + b2`.
    pub out: Array2<f64>,
}

/// Gradients of an MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    /// Gradient of the first weight.
    pub w1: Array2<f64>,
    /// Gradient of the first bias.
    pub b1: Array1<f64>,
    /// Gradient of the second weight.
    pub w2: Array2<f64>,
    /// Gradient of the second bias.
    pub b2: Array1<f64>,
}

impl CompiledMlp {
    /// Forward pass over a batch (rows are samples).
    pub fn forward(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut pre = x.dot(&self.w1.t());
        pre += &self.b1.view().insert_axis(ndarray::Axis(0));
        let h = pre.mapv(f64::tanh);
        let mut out = h.dot(&self.w2.t());
        out += &self.b2.view().insert_axis(ndarray::Axis(0));
        MlpCache { h, out }
    }

    /// Backward pass; returns gradients for the weights and for the input.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &MlpCache,
        d_out: ArrayView2<f64>,
    ) -> (MlpGrads, Array2<f64>) {
        let w2 = d_out.t().dot(&cache.h);
        let b2 = d_out.sum_axis(ndarray::Axis(0));
        let mut dh = d_out.dot(&self.w2);
        ndarray::Zip::from(&mut dh).and(&cache.h).for_each(|d, &h| *d *= 1.0 - h * h);
        let w1 = dh.t().dot(&x);
        let b1 = dh.sum_axis(ndarray::Axis(0));
        let dx = dh.dot(&self.w1);
        (MlpGrads { w1, b1, w2, b2 }, dx)
    }
}

/// Embeds `(t, x)` (or `x` alone) into a conditioning vector.
///
/// The optional time branch passes `t` through frozen random Fourier
/// features and a two-layer MLP; the data branch passes `x` through its own
/// two-layer MLP. Branch outputs are concatenated, squashed with `tanh` and
/// fused by a bias-free linear map into `cond_dim` features.
#[derive(Debug, Clone)]
pub struct ConditionEmbedder {
    /// Fourier features plus MLP for the scalar `t`, absent for flows that
    /// do not take a time input.
    pub time: Option<(FourierEmbedding, Mlp)>,
    /// MLP for the observation `x`.
    pub data: Mlp,
    /// Bias-free fusion map of shape `(cond_dim, concat_dim)`.
    pub fusion: TensorId,
    /// Observation width.
    pub x_dim: usize,
    /// Output width.
    pub cond_dim: usize,
}

impl ConditionEmbedder {
    /// Register an embedder. `with_time` adds the Fourier time branch.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        x_dim: usize,
        cond_dim: usize,
        with_time: bool,
        n_freq: usize,
        time_hidden: usize,
        data_hidden: usize,
    ) -> Self {
        let time = if with_time {
            let four = FourierEmbedding::new(store, &format!("{prefix}.time"), n_freq);
            let mlp = Mlp::new(
                store,
                &format!("{prefix}.time_mlp"),
                four.out_dim(),
                time_hidden,
                time_hidden,
            );
            Some((four, mlp))
        } else {
            None
        };
        let data = Mlp::new(store, &format!("{prefix}.data_mlp"), x_dim, data_hidden, data_hidden);
        let concat = time.as_ref().map_or(0, |(_, m)| m.out_dim) + data.out_dim;
        let fusion = store.add_tensor(&format!("{prefix}.fusion"), cond_dim, concat, true);
        ConditionEmbedder { time, data, fusion, x_dim, cond_dim }
    }

    /// Initialize all branch weights and the fusion map.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        if let Some((four, mlp)) = &self.time {
            four.init(store, rng);
            mlp.init(store, rng);
        }
        self.data.init(store, rng);
        let (_, concat) = store.shape(self.fusion);
        let bound = 1.0 / (concat as f64).sqrt();
        let mut f = store.matrix_mut(self.fusion);
        f.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    }

    /// Materialize weights.
    pub fn compile(&self, store: &ParamStore) -> CompiledEmbedder {
        CompiledEmbedder {
            time: self
                .time
                .as_ref()
                .map(|(four, mlp)| (store.vector(four.freq).to_owned(), mlp.compile(store))),
            data: self.data.compile(store),
            fusion: store.matrix(self.fusion).to_owned(),
            x_dim: self.x_dim,
        }
    }

    /// Accumulate gradients produced by [`CompiledEmbedder::backward`].
    pub fn accumulate_grads(&self, store: &ParamStore, g: &EmbedderGrads, grads: &mut [f64]) {
        if let (Some((_, mlp)), Some(tg)) = (&self.time, &g.time) {
            mlp.accumulate_grads(store, tg, grads);
        }
        self.data.accumulate_grads(store, &g.data, grads);
        let mut gf = store.grad_matrix_mut(grads, self.fusion);
        gf += &g.fusion;
    }
}

/// Materialized embedder.
#[derive(Debug, Clone)]
pub struct CompiledEmbedder {
    /// Frozen frequencies and compiled time MLP, if present.
    pub time: Option<(Array1<f64>, CompiledMlp)>,
    /// Compiled data MLP.
    pub data: CompiledMlp,
    /// Fusion map.
    pub fusion: Array2<f64>,
    /// Expected observation width.
    pub x_dim: usize,
}

/// Cached intermediates of a conditioning pass.
#[derive(Debug, Clone)]
pub struct CondCache {
    /// Fourier features of `t`, if a time branch exists.
    pub fourier: Option<Array2<f64>>,
    /// Time-MLP cache.
    pub time: Option<MlpCache>,
    /// `tanh` of the concatenated branch outputs.
    pub concat_act: Array2<f64>,
    /// Conditioning vectors, shape `(batch, cond_dim)`.
    pub cond: Array2<f64>,
}

/// Gradients of a conditioning pass.
#[derive(Debug, Clone)]
pub struct EmbedderGrads {
    /// Time-branch gradients.
    pub time: Option<MlpGrads>,
    /// Data-branch gradients.
    pub data: MlpGrads,
    /// Fusion gradient.
    pub fusion: Array2<f64>,
}

impl CompiledEmbedder {
    /// Run the data branch alone; reusable across integration steps when
    /// the observation is fixed.
    pub fn embed_data(&self, x: ArrayView2<f64>) -> Result<MlpCache, crate::error::CpeError> {
        if x.ncols() != self.x_dim {
            return Err(crate::error::CpeError::Shape(format!(
                "observation has {} columns, embedder expects {}",
                x.ncols(),
                self.x_dim
            )));
        }
        Ok(self.data.forward(x))
    }

    /// Fuse time and data embeddings into conditioning vectors.
    ///
    /// `data` may hold a single row, in which case it is broadcast over the
    /// batch. `ts` must be `Some` exactly when the time branch exists.
    pub fn condition(&self, ts: Option<&[f64]>, data: &MlpCache, batch: usize) -> CondCache {
        assert_eq!(
            ts.is_some(),
            self.time.is_some(),
            "time input must match the presence of the time branch"
        );
        let data_dim = data.out.ncols();
        let time_dim = self.time.as_ref().map_or(0, |(_, m)| m.b2.len());
        let mut concat = Array2::zeros((batch, time_dim + data_dim));
        let (fourier, time_cache) = match (&self.time, ts) {
            (Some((freqs, mlp)), Some(ts)) => {
                assert_eq!(ts.len(), batch, "one time value per batch row");
                let four = FourierEmbedding::embed(freqs.view(), ts);
                let cache = mlp.forward(four.view());
                concat.slice_mut(s![.., ..time_dim]).assign(&cache.out);
                (Some(four), Some(cache))
            }
            _ => (None, None),
        };
        if data.out.nrows() == batch {
            concat.slice_mut(s![.., time_dim..]).assign(&data.out);
        } else {
            assert_eq!(data.out.nrows(), 1, "data rows must be 1 or the batch size");
            for mut row in concat.slice_mut(s![.., time_dim..]).rows_mut() {
                row.assign(&data.out.row(0));
            }
        }
        let concat_act = concat.mapv(f64::tanh);
        let cond = concat_act.dot(&self.fusion.t());
        CondCache { fourier, time: time_cache, concat_act, cond }
    }

    /// Backward pass; requires one data row per batch row (no broadcast).
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        data: &MlpCache,
        cache: &CondCache,
        d_cond: ArrayView2<f64>,
    ) -> EmbedderGrads {
        let batch = d_cond.nrows();
        assert_eq!(x.nrows(), batch, "backward does not support broadcast observations");
        let fusion_g = d_cond.t().dot(&cache.concat_act);
        let mut d_act = d_cond.dot(&self.fusion);
        ndarray::Zip::from(&mut d_act)
            .and(&cache.concat_act)
            .for_each(|d, &a| *d *= 1.0 - a * a);
        let time_dim = self.time.as_ref().map_or(0, |(_, m)| m.b2.len());
        let time_g = match (&self.time, &cache.fourier, &cache.time) {
            (Some((_, mlp)), Some(four), Some(tc)) => {
                let d_te = d_act.slice(s![.., ..time_dim]);
                let (tg, _) = mlp.backward(four.view(), tc, d_te);
                Some(tg)
            }
            _ => None,
        };
        let d_de = d_act.slice(s![.., time_dim..]);
        let (data_g, _) = self.data.backward(x, data, d_de);
        EmbedderGrads { time: time_g, data: data_g, fusion: fusion_g }
    }
}

/// Add a (already projected) conditioning batch onto hidden units of target
/// coordinates, leaving all other units untouched.
pub fn apply_conditioning(h: &mut Array2<f64>, projected: ArrayView2<f64>, unit_flags: &[bool]) {
    assert_eq!(h.shape(), projected.shape(), "conditioning shape mismatch");
    assert_eq!(h.ncols(), unit_flags.len(), "unit flag length mismatch");
    for (mut hrow, prow) in h.rows_mut().into_iter().zip(projected.rows()) {
        for (u, (&p, &flag)) in hrow.iter_mut().zip(prow.iter().zip(unit_flags.iter())) {
            if flag {
                *u += p;
            }
        }
    }
}

/// Gate `gamma = sigmoid(raw)` blending the identity path with the learned
/// field: `v = gamma * theta + (1 - gamma) * lambda`.
///
/// The gate is a single scalar by default; an optional per-coordinate form
/// stores one raw value per parameter coordinate.
#[derive(Debug, Clone)]
pub struct ConvexGate {
    /// Raw (pre-sigmoid) parameter tensor of shape `(n, 1)`.
    pub raw: TensorId,
    /// Number of gate values (1 or the parameter dimension).
    pub n: usize,
}

impl ConvexGate {
    /// Register a scalar gate; the raw value starts at zero so `gamma = 0.5`.
    pub fn new(store: &mut ParamStore, prefix: &str) -> Self {
        Self::with_len(store, prefix, 1)
    }

    /// Register a gate with `n` values (one per coordinate when `n > 1`).
    pub fn with_len(store: &mut ParamStore, prefix: &str, n: usize) -> Self {
        ConvexGate { raw: store.add_tensor(&format!("{prefix}.gate"), n, 1, true), n }
    }

    /// Current scalar gate value in `(0, 1)` (first entry).
    pub fn gamma(&self, store: &ParamStore) -> f64 {
        sigmoid(store.values()[store.range(self.raw).start])
    }

    /// Gate values broadcast to `dims` coordinates.
    pub fn gammas(&self, store: &ParamStore, dims: usize) -> Array1<f64> {
        let raw = store.vector(self.raw);
        if self.n == 1 {
            Array1::from_elem(dims, sigmoid(raw[0]))
        } else {
            assert_eq!(self.n, dims, "per-coordinate gate length mismatch");
            raw.mapv(sigmoid)
        }
    }

    /// Chain per-coordinate gradients with respect to `gamma` back to the
    /// raw parameters (summed when the gate is scalar).
    pub fn accumulate_grad(&self, store: &ParamStore, d_gammas: &[f64], grads: &mut [f64]) {
        let range = store.range(self.raw);
        let raw = store.vector(self.raw).to_owned();
        if self.n == 1 {
            let g = sigmoid(raw[0]);
            grads[range.start] += d_gammas.iter().sum::<f64>() * g * (1.0 - g);
        } else {
            assert_eq!(d_gammas.len(), self.n);
            for (k, &d) in d_gammas.iter().enumerate() {
                let g = sigmoid(raw[k]);
                grads[range.start + k] += d * g * (1.0 - g);
            }
        }
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
