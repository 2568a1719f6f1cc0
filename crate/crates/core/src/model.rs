//! Dual-path retrieval network.
//!
//! Text path: two Chebyshev graph-convolution layers (each followed by ReLU)
//! over the corpus word graph, then a fully connected layer from the
//! flattened vertex features into the common space. Inverted dropout is
//! applied at the input of that last layer during training.
//!
//! Image path: precomputed image descriptors mapped by one fully connected
//! layer into the common space (optional hidden ReLU layers in front).
//!
//! Scorer: the two embeddings are multiplied elementwise and a fully
//! connected layer reduces the product to one score. The alternative
//! [`ScoreMode::Scalar`] takes the plain inner product and applies a scalar
//! affine map.
//!
//! Backward passes are written by hand per layer and validated against
//! central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};
use crate::exec::Exec;
use crate::linalg::{dot, gather_dot, SparseSym};
use crate::loss::{loss_gradient, pairwise_loss, LossBreakdown, LossConfig};
use crate::spectral::{cheb_basis_into, cheb_sum_vectors, DEFAULT_ORDER};
use crate::text_graph::{ClassId, TextGraph, TextSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// `w . (f_t * f_img) + b`
    #[default]
    Hadamard,
    /// `w * <f_t, f_img> + b`
    Scalar,
}

impl ScoreMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::Hadamard => "hadamard",
            ScoreMode::Scalar => "scalar",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cheb_order: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub common_dim: usize,
    pub dropout: f64,
    pub score_mode: ScoreMode,
    pub image_hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cheb_order: DEFAULT_ORDER,
            conv1_channels: 16,
            conv2_channels: 32,
            common_dim: 1024,
            dropout: 0.2,
            score_mode: ScoreMode::Hadamard,
            image_hidden: Vec::new(),
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cheb_order == 0 {
            return Err(GinError::Config("model.cheb_order must be >= 1".into()));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.common_dim == 0 {
            return Err(GinError::Config(
                "model channel counts and common_dim must be >= 1".into(),
            ));
        }
        if self.image_hidden.contains(&0) {
            return Err(GinError::Config(
                "model.image_hidden widths must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GinError::Config(format!(
                "model.dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Data-dependent dimensions fixed at model creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub image_dim: usize,
    pub graph_k: usize,
}

/// One Chebyshev graph-convolution layer:
/// `out_o = b_o + sum_i sum_k theta[i][o][k] T_k(L~) in_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub order: usize,
    /// Flattened `[in][out][k]`.
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) struct GcnCache {
    /// `basis[i][k]` = `T_k(L~) in_i`.
    basis: Vec<Vec<Vec<f64>>>,
}

impl GcnLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, order: usize) -> Self {
        GcnLayer {
            in_channels,
            out_channels,
            order,
            theta: vec![0.0; in_channels * out_channels * order],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn theta_index(&self, i: usize, o: usize, k: usize) -> usize {
        (i * self.out_channels + o) * self.order + k
    }

    /// Pre-activation outputs, one vector per output channel.
    pub(crate) fn forward(&self, lt: &SparseSym, input: &[Vec<f64>]) -> (Vec<Vec<f64>>, GcnCache) {
        let n = lt.n();
        let basis: Vec<Vec<Vec<f64>>> = input
            .iter()
            .map(|x| {
                let mut b = vec![vec![0.0; n]; self.order];
                cheb_basis_into(lt, x, &mut b);
                b
            })
            .collect();
        let mut out = Vec::with_capacity(self.out_channels);
        for o in 0..self.out_channels {
            let mut y = vec![self.bias[o]; n];
            for (i, bi) in basis.iter().enumerate() {
                for (k, bk) in bi.iter().enumerate() {
                    let t = self.theta[self.theta_index(i, o, k)];
                    if t == 0.0 {
                        continue;
                    }
                    for (yv, &xv) in y.iter_mut().zip(bk) {
                        *yv += t * xv;
                    }
                }
            }
            out.push(y);
        }
        (out, GcnCache { basis })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the layer input when requested.
    pub(crate) fn backward(
        &self,
        lt: &SparseSym,
        cache: &GcnCache,
        grad_out: &[Vec<f64>],
        grads: &mut GcnLayer,
        want_input: bool,
    ) -> Option<Vec<Vec<f64>>> {
        for (o, g) in grad_out.iter().enumerate() {
            grads.bias[o] += g.iter().sum::<f64>();
            for (i, bi) in cache.basis.iter().enumerate() {
                for (k, bk) in bi.iter().enumerate() {
                    let idx = self.theta_index(i, o, k);
                    grads.theta[idx] += dot(bk, g);
                }
            }
        }
        if !want_input {
            return None;
        }
        let n = lt.n();
        Some(
            (0..self.in_channels)
                .map(|i| {
                    let coeffs: Vec<Vec<f64>> = (0..self.order)
                        .map(|k| {
                            let mut c = vec![0.0; n];
                            for (o, g) in grad_out.iter().enumerate() {
                                let t = self.theta[self.theta_index(i, o, k)];
                                for (cv, &gv) in c.iter_mut().zip(g) {
                                    *cv += t * gv;
                                }
                            }
                            c
                        })
                        .collect();
                    cheb_sum_vectors(lt, &coeffs)
                })
                .collect(),
        )
    }
}

/// Fully connected layer `y = W x + b`, `W` row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    pub(crate) fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut DenseLayer,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        for ((g_row, &g), gb) in grads
            .weight
            .chunks_exact_mut(self.in_dim)
            .zip(grad_out)
            .zip(grads.bias.iter_mut())
        {
            *gb += g;
            if g == 0.0 {
                continue;
            }
            for (gw, &xv) in g_row.iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
        if !want_input {
            return None;
        }
        let mut gx = vec![0.0; self.in_dim];
        for (row, &g) in self.weight.chunks_exact(self.in_dim).zip(grad_out) {
            if g == 0.0 {
                continue;
            }
            for (gxv, &w) in gx.iter_mut().zip(row) {
                *gxv += g * w;
            }
        }
        Some(gx)
    }

    /// [`forward`](Self::forward) reading only the listed non-zero inputs.
    pub(crate) fn forward_sparse(&self, x: &[f64], nz: &[usize]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + gather_dot(row, x, nz))
            .collect()
    }

    /// [`backward`](Self::backward) for an input that is zero outside `nz`.
    /// The returned input gradient is filled at `nz` only.
    pub(crate) fn backward_sparse(
        &self,
        x: &[f64],
        nz: &[usize],
        grad_out: &[f64],
        grads: &mut DenseLayer,
    ) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (((row, g_row), &g), gb) in self
            .weight
            .chunks_exact(self.in_dim)
            .zip(grads.weight.chunks_exact_mut(self.in_dim))
            .zip(grad_out)
            .zip(grads.bias.iter_mut())
        {
            *gb += g;
            if g == 0.0 {
                continue;
            }
            for &j in nz {
                g_row[j] += g * x[j];
                gx[j] += g * row[j];
            }
        }
        gx
    }
}

/// A precomputed image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub img_id: String,
    pub label: ClassId,
    pub features: Vec<f64>,
}

/// Whether a forward pass is for training (dropout active, mask drawn from
/// the given seed) or inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Inference,
    Train { dropout_seed: u64 },
}

/// Every learnable tensor of the model. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GinModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub text_conv1: GcnLayer,
    pub text_conv2: GcnLayer,
    pub text_fc: DenseLayer,
    pub image_hidden: Vec<DenseLayer>,
    pub image_fc: DenseLayer,
    pub score_fc: DenseLayer,
}

pub type Gradients = GinModel;

/// Read-only view of one named parameter tensor.
pub struct Param<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Weights and filter taps are L2-penalized, biases are not.
    pub regularized: bool,
}

pub(crate) struct TextCache {
    conv1: GcnCache,
    pre1: Vec<Vec<f64>>,
    conv2: GcnCache,
    pre2: Vec<Vec<f64>>,
    /// Flattened, post-dropout input of `text_fc` (vertex-major).
    fc_input: Vec<f64>,
    /// Positions where `fc_input` is non-zero.
    fc_nz: Vec<usize>,
    /// Inverted-dropout multipliers, when training.
    mask: Option<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

pub(crate) struct ImageCache {
    /// Input of each hidden layer then of `image_fc`.
    inputs: Vec<Vec<f64>>,
    pre_hidden: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn glorot(rng: &mut ChaCha8Rng, data: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in data {
        *v = rng.random_range(-limit..=limit);
    }
}

impl GinModel {
    /// All-zero parameters with the shapes implied by `config` and `dims`.
    pub fn zeros(config: &ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        if dims.vocab_size == 0 || dims.image_dim == 0 {
            return Err(GinError::Config(
                "vocab_size and image_dim must be >= 1".into(),
            ));
        }
        let k = config.cheb_order;
        let mut image_hidden = Vec::new();
        let mut prev = dims.image_dim;
        for &w in &config.image_hidden {
            image_hidden.push(DenseLayer::zeros(prev, w));
            prev = w;
        }
        let score_in = match config.score_mode {
            ScoreMode::Hadamard => config.common_dim,
            ScoreMode::Scalar => 1,
        };
        Ok(GinModel {
            config: config.clone(),
            dims,
            text_conv1: GcnLayer::zeros(1, config.conv1_channels, k),
            text_conv2: GcnLayer::zeros(config.conv1_channels, config.conv2_channels, k),
            text_fc: DenseLayer::zeros(dims.vocab_size * config.conv2_channels, config.common_dim),
            image_hidden,
            image_fc: DenseLayer::zeros(prev, config.common_dim),
            score_fc: DenseLayer::zeros(score_in, 1),
        })
    }

    /// Glorot-uniform weights and zero biases, seeded by `config.init_seed`.
    pub fn init(config: &ModelConfig, dims: ModelDims) -> Result<Self> {
        let mut m = GinModel::zeros(config, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let k = config.cheb_order;
        for conv in [&mut m.text_conv1, &mut m.text_conv2] {
            let (fi, fo) = (conv.in_channels * k, conv.out_channels * k);
            glorot(&mut rng, &mut conv.theta, fi, fo);
        }
        for layer in std::iter::once(&mut m.text_fc)
            .chain(m.image_hidden.iter_mut())
            .chain([&mut m.image_fc, &mut m.score_fc])
        {
            let (fi, fo) = (layer.in_dim, layer.out_dim);
            glorot(&mut rng, &mut layer.weight, fi, fo);
        }
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        GinModel::zeros(&self.config, self.dims).expect("shapes already validated")
    }

    pub fn for_graph(config: &ModelConfig, graph: &TextGraph, image_dim: usize) -> Result<Self> {
        GinModel::init(
            config,
            ModelDims {
                vocab_size: graph.n(),
                image_dim,
                graph_k: graph.k(),
            },
        )
    }

    /// Named tensors in a fixed order.
    pub fn params(&self) -> Vec<Param<'_>> {
        fn gcn<'a>(out: &mut Vec<Param<'a>>, name: &str, l: &'a GcnLayer) {
            out.push(Param {
                name: format!("{name}.theta"),
                shape: vec![l.in_channels, l.out_channels, l.order],
                data: &l.theta,
                regularized: true,
            });
            out.push(Param {
                name: format!("{name}.bias"),
                shape: vec![l.out_channels],
                data: &l.bias,
                regularized: false,
            });
        }
        fn dense<'a>(out: &mut Vec<Param<'a>>, name: &str, l: &'a DenseLayer) {
            out.push(Param {
                name: format!("{name}.weight"),
                shape: vec![l.out_dim, l.in_dim],
                data: &l.weight,
                regularized: true,
            });
            out.push(Param {
                name: format!("{name}.bias"),
                shape: vec![l.out_dim],
                data: &l.bias,
                regularized: false,
            });
        }
        let mut out = Vec::new();
        gcn(&mut out, "text_conv1", &self.text_conv1);
        gcn(&mut out, "text_conv2", &self.text_conv2);
        dense(&mut out, "text_fc", &self.text_fc);
        for (i, l) in self.image_hidden.iter().enumerate() {
            dense(&mut out, &format!("image_hidden.{i}"), l);
        }
        dense(&mut out, "image_fc", &self.image_fc);
        dense(&mut out, "score_fc", &self.score_fc);
        out
    }

    /// Mutable tensors in the same order as [`GinModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![
            &mut self.text_conv1.theta,
            &mut self.text_conv1.bias,
            &mut self.text_conv2.theta,
            &mut self.text_conv2.bias,
            &mut self.text_fc.weight,
            &mut self.text_fc.bias,
        ];
        for l in self.image_hidden.iter_mut() {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v.push(&mut self.image_fc.weight);
        v.push(&mut self.image_fc.bias);
        v.push(&mut self.score_fc.weight);
        v.push(&mut self.score_fc.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `a += scale * b`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &GinModel, scale: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (d, v) in dst.iter_mut().zip(src.data) {
                *d += scale * v;
            }
        }
    }

    fn clear(&mut self) {
        for t in self.params_mut() {
            t.fill(0.0);
        }
    }

    fn accumulate(&mut self, other: &GinModel) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (d, v) in dst.iter_mut().zip(src.data) {
                *d += v;
            }
        }
    }

    /// `0.5 * l2 * sum ||W||^2` over regularized tensors.
    pub fn l2_penalty(&self, l2: f64) -> f64 {
        0.5 * l2
            * self
                .params()
                .iter()
                .filter(|p| p.regularized)
                .map(|p| p.data.iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    pub fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Model for a graph whose vertex `v` became `perm[v]`: only the columns
    /// of `text_fc` move, the filter taps are vertex-independent.
    pub fn permuted_vertices(&self, perm: &[usize]) -> Result<GinModel> {
        crate::linalg::check_permutation(perm, self.dims.vocab_size)?;
        let c = self.config.conv2_channels;
        let mut m = self.clone();
        let in_dim = self.text_fc.in_dim;
        for (row_src, row_dst) in self
            .text_fc
            .weight
            .chunks_exact(in_dim)
            .zip(m.text_fc.weight.chunks_exact_mut(in_dim))
        {
            for (v, &p) in perm.iter().enumerate() {
                row_dst[p * c..(p + 1) * c].copy_from_slice(&row_src[v * c..(v + 1) * c]);
            }
        }
        Ok(m)
    }

    fn check_text(&self, graph: &TextGraph, t: &TextSample) -> Result<()> {
        if graph.n() != self.dims.vocab_size {
            return Err(GinError::dim(
                "graph vertices",
                self.dims.vocab_size,
                graph.n(),
            ));
        }
        if t.n() != self.dims.vocab_size {
            return Err(GinError::dim(
                format!("text {} features", t.doc_id),
                self.dims.vocab_size,
                t.n(),
            ));
        }
        Ok(())
    }

    fn check_image(&self, img: &ImageSample) -> Result<()> {
        if img.features.len() != self.dims.image_dim {
            return Err(GinError::dim(
                format!("image {} features", img.img_id),
                self.dims.image_dim,
                img.features.len(),
            ));
        }
        Ok(())
    }

    pub(crate) fn text_forward_cached(
        &self,
        graph: &TextGraph,
        t: &TextSample,
        pass: Pass,
    ) -> Result<TextCache> {
        self.check_text(graph, t)?;
        let lt = graph.scaled_laplacian();
        let input = vec![t.dense()];
        let (pre1, conv1) = self.text_conv1.forward(lt, &input);
        let h1: Vec<Vec<f64>> = pre1.iter().map(|c| relu(c)).collect();
        let (pre2, conv2) = self.text_conv2.forward(lt, &h1);

        let n = graph.n();
        let c2 = self.config.conv2_channels;
        let mut fc_input = vec![0.0; n * c2];
        for (c, ch) in pre2.iter().enumerate() {
            for (v, &x) in ch.iter().enumerate() {
                fc_input[v * c2 + c] = x.max(0.0);
            }
        }
        let mask = match pass {
            Pass::Train { dropout_seed } if self.config.dropout > 0.0 => {
                let keep = 1.0 - self.config.dropout;
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let mask: Vec<f64> = (0..fc_input.len())
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (x, m) in fc_input.iter_mut().zip(&mask) {
                    *x *= m;
                }
                Some(mask)
            }
            _ => None,
        };
        let fc_nz: Vec<usize> = (0..fc_input.len())
            .filter(|&j| fc_input[j] != 0.0)
            .collect();
        let output = self.text_fc.forward_sparse(&fc_input, &fc_nz);
        Ok(TextCache {
            conv1,
            pre1,
            conv2,
            pre2,
            fc_input,
            fc_nz,
            mask,
            output,
        })
    }

    pub(crate) fn image_forward_cached(&self, img: &ImageSample) -> Result<ImageCache> {
        self.check_image(img)?;
        let mut inputs = vec![img.features.clone()];
        let mut pre_hidden = Vec::new();
        for layer in &self.image_hidden {
            let pre = layer.forward(inputs.last().expect("non-empty"));
            inputs.push(relu(&pre));
            pre_hidden.push(pre);
        }
        let output = self.image_fc.forward(inputs.last().expect("non-empty"));
        Ok(ImageCache {
            inputs,
            pre_hidden,
            output,
        })
    }

    /// Text embedding in the common space.
    pub fn text_forward(&self, graph: &TextGraph, t: &TextSample, pass: Pass) -> Result<Vec<f64>> {
        Ok(self.text_forward_cached(graph, t, pass)?.output)
    }

    /// Image embedding in the common space.
    pub fn image_forward(&self, img: &ImageSample) -> Result<Vec<f64>> {
        Ok(self.image_forward_cached(img)?.output)
    }

    pub fn score_pair(&self, f_t: &[f64], f_img: &[f64]) -> Result<f64> {
        let d = self.config.common_dim;
        if f_t.len() != d || f_img.len() != d {
            return Err(GinError::dim("score input", d, f_t.len().max(f_img.len())));
        }
        Ok(self.score_unchecked(f_t, f_img))
    }

    fn score_input(&self, f_t: &[f64], f_img: &[f64]) -> Vec<f64> {
        match self.config.score_mode {
            ScoreMode::Hadamard => f_t.iter().zip(f_img).map(|(a, b)| a * b).collect(),
            ScoreMode::Scalar => vec![f_t.iter().zip(f_img).map(|(a, b)| a * b).sum()],
        }
    }

    pub(crate) fn score_unchecked(&self, f_t: &[f64], f_img: &[f64]) -> f64 {
        self.score_fc.forward(&self.score_input(f_t, f_img))[0]
    }

    /// Backpropagates `d_score` for one pair into `grads`.
    fn backward_pair(
        &self,
        graph: &TextGraph,
        tc: &TextCache,
        ic: &ImageCache,
        d_score: f64,
        grads: &mut Gradients,
    ) {
        let (f_t, f_img) = (&tc.output, &ic.output);
        let s_in = self.score_input(f_t, f_img);
        let g_in = self
            .score_fc
            .backward(&s_in, &[d_score], &mut grads.score_fc, true)
            .expect("input gradient requested");
        let (g_ft, g_fimg): (Vec<f64>, Vec<f64>) = match self.config.score_mode {
            ScoreMode::Hadamard => (
                g_in.iter().zip(f_img).map(|(g, b)| g * b).collect(),
                g_in.iter().zip(f_t).map(|(g, a)| g * a).collect(),
            ),
            ScoreMode::Scalar => (
                f_img.iter().map(|b| g_in[0] * b).collect(),
                f_t.iter().map(|a| g_in[0] * a).collect(),
            ),
        };

        // Image path.
        let hidden = self.image_hidden.len();
        let mut g =
            self.image_fc
                .backward(&ic.inputs[hidden], &g_fimg, &mut grads.image_fc, hidden > 0);
        for l in (0..hidden).rev() {
            let gy: Vec<f64> = g
                .take()
                .expect("requested")
                .iter()
                .zip(&ic.pre_hidden[l])
                .map(|(g, &p)| if p > 0.0 { *g } else { 0.0 })
                .collect();
            g = self.image_hidden[l].backward(
                &ic.inputs[l],
                &gy,
                &mut grads.image_hidden[l],
                l > 0,
            );
        }

        // Text path.
        let lt = graph.scaled_laplacian();
        let mut g_flat =
            self.text_fc
                .backward_sparse(&tc.fc_input, &tc.fc_nz, &g_ft, &mut grads.text_fc);
        if let Some(mask) = &tc.mask {
            for (g, m) in g_flat.iter_mut().zip(mask) {
                *g *= m;
            }
        }
        let c2 = self.config.conv2_channels;
        let g_pre2: Vec<Vec<f64>> = tc
            .pre2
            .iter()
            .enumerate()
            .map(|(c, pre)| {
                pre.iter()
                    .enumerate()
                    .map(|(v, &p)| if p > 0.0 { g_flat[v * c2 + c] } else { 0.0 })
                    .collect()
            })
            .collect();
        let g_h1 = self
            .text_conv2
            .backward(lt, &tc.conv2, &g_pre2, &mut grads.text_conv2, true)
            .expect("requested");
        let g_pre1: Vec<Vec<f64>> = g_h1
            .iter()
            .zip(&tc.pre1)
            .map(|(g, pre)| {
                g.iter()
                    .zip(pre)
                    .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                    .collect()
            })
            .collect();
        self.text_conv1
            .backward(lt, &tc.conv1, &g_pre1, &mut grads.text_conv1, false);
    }
}

/// A mini-batch of `(text index, image index, is_match)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairBatch {
    pub fn new(pairs: Vec<(usize, usize, bool)>) -> Result<Self> {
        let q1 = pairs.iter().filter(|p| p.2).count();
        let q2 = pairs.len() - q1;
        if q1 < 2 || q2 < 2 {
            return Err(GinError::InvalidArgument(format!(
                "batch needs >= 2 matching and >= 2 non-matching pairs, got {q1} and {q2}"
            )));
        }
        Ok(PairBatch { pairs })
    }

    pub fn q1(&self) -> usize {
        self.pairs.iter().filter(|p| p.2).count()
    }

    pub fn q2(&self) -> usize {
        self.pairs.len() - self.q1()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Seed of the dropout mask for pair `index` of update `step`.
pub fn dropout_seed(base: u64, step: u64, index: u64) -> u64 {
    let mut z =
        base ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training-time options for [`loss_and_gradients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutPlan {
    Off,
    /// Dropout masks from [`dropout_seed`]`(base, step, pair index)`.
    On {
        base: u64,
        step: u64,
    },
}

/// Scores of every pair in the batch (no dropout).
pub fn batch_scores(
    model: &GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    batch: &PairBatch,
    exec: Exec,
) -> Result<Vec<f64>> {
    exec.map(&batch.pairs, |&(t, i, _)| {
        let ft = model.text_forward(graph, &texts[t], Pass::Inference)?;
        let fi = model.image_forward(&images[i])?;
        model.score_pair(&ft, &fi)
    })
    .into_iter()
    .collect()
}

/// Full objective (including the L2 term) and its gradient for one batch.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    model: &GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    batch: &PairBatch,
    loss_cfg: &LossConfig,
    dropout: DropoutPlan,
    exec: Exec,
) -> Result<(LossBreakdown, Gradients)> {
    for &(t, i, _) in &batch.pairs {
        if t >= texts.len() || i >= images.len() {
            return Err(GinError::InvalidArgument(format!(
                "pair ({t}, {i}) out of range for {} texts and {} images",
                texts.len(),
                images.len()
            )));
        }
    }
    let forward: Vec<Result<(TextCache, ImageCache)>> = exec.map_range(batch.len(), |p| {
        let (t, i, _) = batch.pairs[p];
        let pass = match dropout {
            DropoutPlan::Off => Pass::Inference,
            DropoutPlan::On { base, step } => Pass::Train {
                dropout_seed: dropout_seed(base, step, p as u64),
            },
        };
        Ok((
            model.text_forward_cached(graph, &texts[t], pass)?,
            model.image_forward_cached(&images[i])?,
        ))
    });
    let caches: Vec<(TextCache, ImageCache)> = forward.into_iter().collect::<Result<_>>()?;
    let scores: Vec<f64> = caches
        .iter()
        .map(|(tc, ic)| model.score_unchecked(&tc.output, &ic.output))
        .collect();

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&(_, _, m), &s) in batch.pairs.iter().zip(&scores) {
        if m {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    let breakdown = pairwise_loss(&pos, &neg, loss_cfg)?;
    let (gpos, gneg) = loss_gradient(&pos, &neg, loss_cfg)?;
    let (mut ip, mut ineg) = (gpos.into_iter(), gneg.into_iter());
    let d_scores: Vec<f64> = batch
        .pairs
        .iter()
        .map(|p| {
            if p.2 {
                ip.next().expect("count matches")
            } else {
                ineg.next().expect("count matches")
            }
        })
        .collect();

    let mut grads = exec.fold(
        batch.len(),
        || model.zeros_like(),
        |acc, p| {
            let (tc, ic) = &caches[p];
            model.backward_pair(graph, tc, ic, d_scores[p], acc);
        },
        |acc| acc.clear(),
        |acc, part| acc.accumulate(part),
    );

    if loss_cfg.l2 > 0.0 {
        for (g, p) in grads.params_mut().into_iter().zip(model.params()) {
            if p.regularized {
                for (gv, wv) in g.iter_mut().zip(p.data) {
                    *gv += loss_cfg.l2 * wv;
                }
            }
        }
    }
    Ok((breakdown.with_l2(model.l2_penalty(loss_cfg.l2)), grads))
}

/// Objective value only (for finite-difference checks).
pub fn batch_loss(
    model: &GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    batch: &PairBatch,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let scores = batch_scores(model, graph, texts, images, batch, Exec::SEQUENTIAL)?;
    let pos: Vec<f64> = batch
        .pairs
        .iter()
        .zip(&scores)
        .filter(|(p, _)| p.2)
        .map(|(_, &s)| s)
        .collect();
    let neg: Vec<f64> = batch
        .pairs
        .iter()
        .zip(&scores)
        .filter(|(p, _)| !p.2)
        .map(|(_, &s)| s)
        .collect();
    Ok(pairwise_loss(&pos, &neg, loss_cfg)?.with_l2(model.l2_penalty(loss_cfg.l2)))
}
