//! Kolmogorov-Arnold network layers with Gaussian RBF bases and Swish residuals.
//!
//! Every edge `(alpha, beta)` of a KAN layer carries a learnable univariate function
//!
//! ```text
//! phi(x) = sum_i w_rbf[alpha, beta, i] * psi(|n(x) - c_i|) + w_base[alpha, beta] * swish(x)
//! psi(r) = exp(-r^2 / (2 h^2))
//! ```
//!
//! with centers `c_i` fixed and uniformly spaced on `[-1, 1]` and `h` equal to the
//! center spacing. With input normalization on, `n = tanh` keeps the RBF arguments
//! inside the gridded domain; otherwise `n` is the identity. The Swish residual always
//! sees the raw layer input.
//!
//! A [`Network`] is an ordered list of KAN layers, or of dense `tanh` layers for the
//! MLP baseline. Networks are immutable values; training produces new networks from
//! flat parameter vectors (see [`Network::with_params`]). The flat layout is
//! layer-major, and inside each KAN layer `w_rbf` (row-major `[out][in][grid]`) comes
//! before `w_base` (`[out][in]`). Dense layers store `W` (`[out][in]`) then `b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard deviation of the Gaussian initializer for KAN weights.
pub const KAN_INIT_STD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KanError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {index} has input dimension {got} but the previous layer outputs {expected}")]
    BrokenChain {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid layer shape: {0}")]
    InvalidShape(String),
    #[error("network must contain at least one layer")]
    Empty,
    #[error("edge index ({alpha}, {beta}) out of range for a {out_dim}x{in_dim} layer")]
    IndexOutOfRange {
        alpha: usize,
        beta: usize,
        out_dim: usize,
        in_dim: usize,
    },
    #[error("layer index {0} out of range")]
    LayerOutOfRange(usize),
    #[error("activation recording needs at least one input sample")]
    EmptyInputs,
    #[error("network has no hidden layer to prune")]
    NoHiddenLayer,
    #[error("pruning at threshold {gamma_pr} removes every node of hidden layer {layer}")]
    EmptiedLayer { layer: usize, gamma_pr: f64 },
    #[error("operation requires a KAN network")]
    NotKan,
    #[error("activation record does not match the network architecture")]
    RecordMismatch,
}

pub type Result<T> = std::result::Result<T, KanError>;

/// Gaussian radial basis function `exp(-r^2 / (2 h^2))`.
#[inline]
pub fn rbf(r: f64, h: f64) -> f64 {
    (-r * r / (2.0 * h * h)).exp()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Swish residual activation `x * sigmoid(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn swish_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Uniformly spaced RBF centers on `[-1, 1]` and the matching spread `h`.
///
/// A single center sits at 0 with `h = 2`.
pub fn rbf_grid(grid_size: usize) -> (Vec<f64>, f64) {
    assert!(grid_size >= 1, "grid size must be positive");
    if grid_size == 1 {
        return (vec![0.0], 2.0);
    }
    let h = 2.0 / (grid_size - 1) as f64;
    let mut centers: Vec<f64> = (0..grid_size).map(|i| -1.0 + i as f64 * h).collect();
    centers[grid_size - 1] = 1.0;
    (centers, h)
}

/// Whether layer inputs pass through `tanh` before the RBF path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Tanh,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    Kan,
    Mlp,
}

/// Architecture description, independent of the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetSpec {
    /// KAN layers as `[in_dim, out_dim, grid_size]` triples.
    Kan {
        layers: Vec<[usize; 3]>,
        #[serde(default)]
        normalization: Normalization,
    },
    /// Dense layer widths, e.g. `[2, 50, 2]`; hidden activations are `tanh`.
    Mlp { dims: Vec<usize> },
}

impl NetSpec {
    pub fn kan(layers: &[[usize; 3]]) -> Self {
        NetSpec::Kan {
            layers: layers.to_vec(),
            normalization: Normalization::Tanh,
        }
    }

    pub fn mlp(dims: &[usize]) -> Self {
        NetSpec::Mlp {
            dims: dims.to_vec(),
        }
    }

    pub fn kind(&self) -> NetworkKind {
        match self {
            NetSpec::Kan { .. } => NetworkKind::Kan,
            NetSpec::Mlp { .. } => NetworkKind::Mlp,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        match self {
            NetSpec::Kan { layers, .. } => layers.first().map(|l| l[0]),
            NetSpec::Mlp { dims } => dims.first().copied(),
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match self {
            NetSpec::Kan { layers, .. } => layers.last().map(|l| l[1]),
            NetSpec::Mlp { dims } => dims.last().copied(),
        }
    }

    /// Trainable parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        match self {
            NetSpec::Kan { layers, .. } => layers.iter().map(|l| l[0] * l[1] * (l[2] + 1)).sum(),
            NetSpec::Mlp { dims } => dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }

    /// Checks positivity of every dimension and that adjacent layers chain.
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Kan { layers, .. } => {
                if layers.is_empty() {
                    return Err(KanError::Empty);
                }
                for (k, l) in layers.iter().enumerate() {
                    if l.contains(&0) {
                        return Err(KanError::InvalidShape(format!(
                            "layer {k} has a zero dimension: {l:?}"
                        )));
                    }
                    if k > 0 && layers[k - 1][1] != l[0] {
                        return Err(KanError::BrokenChain {
                            index: k,
                            expected: layers[k - 1][1],
                            got: l[0],
                        });
                    }
                }
            }
            NetSpec::Mlp { dims } => {
                if dims.len() < 2 {
                    return Err(KanError::Empty);
                }
                if dims.contains(&0) {
                    return Err(KanError::InvalidShape(format!(
                        "zero width in MLP dims {dims:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One KAN layer: trainable RBF and residual weights over a fixed center grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid_size: usize,
    /// Row-major `[out_dim][in_dim][grid_size]`.
    pub w_rbf: Vec<f64>,
    /// Row-major `[out_dim][in_dim]`.
    pub w_base: Vec<f64>,
    pub centers: Vec<f64>,
    pub h: f64,
}

/// Values retained from a KAN layer forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    /// Raw layer inputs.
    pub x: Vec<f64>,
    /// RBF-path inputs (`tanh(x)` when normalized).
    pub x_eff: Vec<f64>,
    /// `psi(|x_eff[beta] - c_i|)`, row-major `[in_dim][grid_size]`.
    pub basis: Vec<f64>,
    /// `swish(x[beta])`.
    pub base: Vec<f64>,
    pub normalized: bool,
}

impl KanLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, grid_size: usize) -> Self {
        let (centers, h) = rbf_grid(grid_size);
        Self {
            in_dim,
            out_dim,
            grid_size,
            w_rbf: vec![0.0; out_dim * in_dim * grid_size],
            w_base: vec![0.0; out_dim * in_dim],
            centers,
            h,
        }
    }

    pub fn from_weights(
        in_dim: usize,
        out_dim: usize,
        grid_size: usize,
        w_rbf: Vec<f64>,
        w_base: Vec<f64>,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || grid_size == 0 {
            return Err(KanError::InvalidShape(format!(
                "[{in_dim}, {out_dim}, {grid_size}]"
            )));
        }
        check_len(out_dim * in_dim * grid_size, w_rbf.len())?;
        check_len(out_dim * in_dim, w_base.len())?;
        let (centers, h) = rbf_grid(grid_size);
        Ok(Self {
            in_dim,
            out_dim,
            grid_size,
            w_rbf,
            w_base,
            centers,
            h,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim * (self.grid_size + 1)
    }

    fn shape(&self) -> KanShape<'_> {
        KanShape {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            grid: self.grid_size,
            centers: &self.centers,
            h: self.h,
        }
    }

    pub fn forward(&self, x: &[f64], normalize: bool) -> Result<(Vec<f64>, LayerCache)> {
        check_len(self.in_dim, x.len())?;
        let mut y = vec![0.0; self.out_dim];
        let mut cache = LayerCache::default();
        self.shape()
            .forward(&self.w_rbf, &self.w_base, x, normalize, &mut y, &mut cache);
        Ok((y, cache))
    }

    /// Evaluates the single edge function `phi[alpha, beta]` at each point of `xs`.
    pub fn activation_curve(
        &self,
        alpha: usize,
        beta: usize,
        xs: &[f64],
        normalize: bool,
    ) -> Result<Vec<f64>> {
        if alpha >= self.out_dim || beta >= self.in_dim {
            return Err(KanError::IndexOutOfRange {
                alpha,
                beta,
                out_dim: self.out_dim,
                in_dim: self.in_dim,
            });
        }
        let g = self.grid_size;
        let off = (alpha * self.in_dim + beta) * g;
        let w = &self.w_rbf[off..off + g];
        let wb = self.w_base[alpha * self.in_dim + beta];
        Ok(xs
            .iter()
            .map(|&x| {
                let xe = if normalize { x.tanh() } else { x };
                let rbf_part: f64 = w
                    .iter()
                    .zip(&self.centers)
                    .map(|(wi, c)| wi * rbf(xe - c, self.h))
                    .sum();
                rbf_part + wb * swish(x)
            })
            .collect())
    }
}

/// Dense layer `y = W x + b` used by the MLP baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim][in_dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Kan(KanLayer),
    Dense(DenseLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Kan(l) => l.in_dim,
            Layer::Dense(l) => l.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Kan(l) => l.out_dim,
            Layer::Dense(l) => l.out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Kan(l) => l.param_count(),
            Layer::Dense(l) => l.param_count(),
        }
    }

    /// The two weight blocks in flat order.
    fn blocks(&self) -> (&[f64], &[f64]) {
        match self {
            Layer::Kan(l) => (&l.w_rbf, &l.w_base),
            Layer::Dense(l) => (&l.weight, &l.bias),
        }
    }

    fn blocks_mut(&mut self) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match self {
            Layer::Kan(l) => (&mut l.w_rbf, &mut l.w_base),
            Layer::Dense(l) => (&mut l.weight, &mut l.bias),
        }
    }
}

/// Per-layer cache of a network forward pass.
#[derive(Debug, Clone)]
pub enum CacheEntry {
    Kan(LayerCache),
    /// Input to the dense layer (already activated).
    Dense { input: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<CacheEntry>,
}

/// An ordered stack of KAN layers or of dense `tanh` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    normalization: Normalization,
    offsets: Vec<usize>,
}

impl Network {
    /// Builds a network after checking homogeneity of layer kinds and the dimension chain.
    pub fn new(layers: Vec<Layer>, normalization: Normalization) -> Result<Self> {
        if layers.is_empty() {
            return Err(KanError::Empty);
        }
        let kan = matches!(layers[0], Layer::Kan(_));
        for (k, l) in layers.iter().enumerate() {
            if matches!(l, Layer::Kan(_)) != kan {
                return Err(KanError::InvalidShape(
                    "KAN and dense layers cannot be mixed".into(),
                ));
            }
            if let Layer::Kan(kl) = l {
                check_len(kl.out_dim * kl.in_dim * kl.grid_size, kl.w_rbf.len())?;
                check_len(kl.out_dim * kl.in_dim, kl.w_base.len())?;
            }
            if let Layer::Dense(dl) = l {
                check_len(dl.out_dim * dl.in_dim, dl.weight.len())?;
                check_len(dl.out_dim, dl.bias.len())?;
            }
            if k > 0 && layers[k - 1].out_dim() != l.in_dim() {
                return Err(KanError::BrokenChain {
                    index: k,
                    expected: layers[k - 1].out_dim(),
                    got: l.in_dim(),
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for l in &layers {
            acc += l.param_count();
            offsets.push(acc);
        }
        let normalization = if kan {
            normalization
        } else {
            Normalization::None
        };
        Ok(Self {
            layers,
            normalization,
            offsets,
        })
    }

    /// All-zero network with the given architecture.
    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        match spec {
            NetSpec::Kan {
                layers,
                normalization,
            } => Network::new(
                layers
                    .iter()
                    .map(|l| Layer::Kan(KanLayer::zeros(l[0], l[1], l[2])))
                    .collect(),
                *normalization,
            ),
            NetSpec::Mlp { dims } => Network::new(
                dims.windows(2)
                    .map(|w| Layer::Dense(DenseLayer::zeros(w[0], w[1])))
                    .collect(),
                Normalization::None,
            ),
        }
    }

    /// Seeded initialization: KAN weights i.i.d. `N(0, 0.1^2)`; MLP weights Glorot-uniform
    /// with zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match spec.kind() {
            NetworkKind::Kan => {
                let normal = Normal::new(0.0, KAN_INIT_STD).expect("valid std");
                for layer in &mut net.layers {
                    let (a, b) = layer.blocks_mut();
                    for w in a.iter_mut().chain(b.iter_mut()) {
                        *w = normal.sample(&mut rng);
                    }
                }
            }
            NetworkKind::Mlp => {
                for layer in &mut net.layers {
                    if let Layer::Dense(d) = layer {
                        let limit = (6.0 / (d.in_dim + d.out_dim) as f64).sqrt();
                        let dist = Uniform::new(-limit, limit).expect("valid range");
                        for w in &mut d.weight {
                            *w = dist.sample(&mut rng);
                        }
                    }
                }
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn normalizes(&self) -> bool {
        self.normalization == Normalization::Tanh
    }

    pub fn kind(&self) -> NetworkKind {
        match self.layers[0] {
            Layer::Kan(_) => NetworkKind::Kan,
            Layer::Dense(_) => NetworkKind::Mlp,
        }
    }

    pub fn spec(&self) -> NetSpec {
        match self.kind() {
            NetworkKind::Kan => NetSpec::Kan {
                layers: self
                    .layers
                    .iter()
                    .map(|l| match l {
                        Layer::Kan(k) => [k.in_dim, k.out_dim, k.grid_size],
                        Layer::Dense(_) => unreachable!("homogeneous network"),
                    })
                    .collect(),
                normalization: self.normalization,
            },
            NetworkKind::Mlp => {
                let mut dims = vec![self.layers[0].in_dim()];
                dims.extend(self.layers.iter().map(Layer::out_dim));
                NetSpec::Mlp { dims }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.offsets[self.layers.len()]
    }

    pub fn kan_layer(&self, index: usize) -> Result<&KanLayer> {
        match self.layers.get(index) {
            Some(Layer::Kan(l)) => Ok(l),
            Some(Layer::Dense(_)) => Err(KanError::NotKan),
            None => Err(KanError::LayerOutOfRange(index)),
        }
    }

    /// Flat parameter vector.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let (a, b) = l.blocks();
            out.extend_from_slice(a);
            out.extend_from_slice(b);
        }
        out
    }

    /// New network with this architecture and the given flat parameters.
    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        check_len(self.param_count(), theta.len())?;
        let mut net = self.clone();
        let mut pos = 0;
        for l in &mut net.layers {
            let (a, b) = l.blocks_mut();
            let na = a.len();
            a.copy_from_slice(&theta[pos..pos + na]);
            pos += na;
            let nb = b.len();
            b.copy_from_slice(&theta[pos..pos + nb]);
            pos += nb;
        }
        Ok(net)
    }

    fn layer_weights<'a>(&'a self, k: usize, theta: Option<&'a [f64]>) -> (&'a [f64], &'a [f64]) {
        match theta {
            None => self.layers[k].blocks(),
            Some(t) => {
                let (a, _) = self.layers[k].blocks();
                let start = self.offsets[k];
                let mid = start + a.len();
                (&t[start..mid], &t[mid..self.offsets[k + 1]])
            }
        }
    }

    fn forward_impl(
        &self,
        theta: Option<&[f64]>,
        x: &[f64],
        keep_cache: bool,
    ) -> (Vec<f64>, Option<ForwardCache>) {
        let normalize = self.normalizes();
        let n = self.layers.len();
        let mut caches = Vec::with_capacity(if keep_cache { n } else { 0 });
        let mut cur = x.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let (wa, wb) = self.layer_weights(k, theta);
            match layer {
                Layer::Kan(l) => {
                    let mut y = vec![0.0; l.out_dim];
                    let mut cache = LayerCache::default();
                    l.shape().forward(wa, wb, &cur, normalize, &mut y, &mut cache);
                    if keep_cache {
                        caches.push(CacheEntry::Kan(cache));
                    }
                    cur = y;
                }
                Layer::Dense(l) => {
                    let mut y = wb.to_vec();
                    for (a, yo) in y.iter_mut().enumerate() {
                        let row = &wa[a * l.in_dim..(a + 1) * l.in_dim];
                        *yo += dot(row, &cur);
                    }
                    if k + 1 < n {
                        for v in &mut y {
                            *v = v.tanh();
                        }
                    }
                    if keep_cache {
                        caches.push(CacheEntry::Dense { input: cur });
                    }
                    cur = y;
                }
            }
        }
        (cur, keep_cache.then_some(ForwardCache { layers: caches }))
    }

    /// Forward pass returning the output and the per-layer cache.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len(self.input_dim(), x.len())?;
        let (y, cache) = self.forward_impl(None, x, true);
        Ok((y, cache.expect("cache requested")))
    }

    /// Forward pass without a cache.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        Ok(self.forward_impl(None, x, false).0)
    }

    /// Forward pass with this architecture and external flat parameters.
    pub fn eval_with(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.param_count(), theta.len())?;
        check_len(self.input_dim(), x.len())?;
        Ok(self.forward_impl(Some(theta), x, false).0)
    }

    pub fn forward_with(&self, theta: &[f64], x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len(self.param_count(), theta.len())?;
        check_len(self.input_dim(), x.len())?;
        let (y, cache) = self.forward_impl(Some(theta), x, true);
        Ok((y, cache.expect("cache requested")))
    }

    /// Vector-Jacobian product at `x`: returns `(dy/dx)^T y_bar` and `(dy/dtheta)^T y_bar`.
    pub fn vjp(&self, x: &[f64], y_bar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x_bar = vec![0.0; self.input_dim()];
        let mut theta_bar = vec![0.0; self.param_count()];
        let (_, cache) = self.forward(x)?;
        self.backward_impl(None, &cache, y_bar, &mut x_bar, &mut theta_bar)?;
        Ok((x_bar, theta_bar))
    }

    /// Accumulating VJP with external parameters; recomputes the forward cache.
    pub fn vjp_with(
        &self,
        theta: &[f64],
        x: &[f64],
        y_bar: &[f64],
        x_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<()> {
        let (_, cache) = self.forward_with(theta, x)?;
        self.backward_impl(Some(theta), &cache, y_bar, x_bar, theta_bar)
    }

    /// Accumulating backward pass from a cache produced by [`Network::forward_with`]
    /// (or [`Network::forward`] when `theta` is `None`).
    pub fn backward_with(
        &self,
        theta: Option<&[f64]>,
        cache: &ForwardCache,
        y_bar: &[f64],
        x_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<()> {
        if let Some(t) = theta {
            check_len(self.param_count(), t.len())?;
        }
        self.backward_impl(theta, cache, y_bar, x_bar, theta_bar)
    }

    fn backward_impl(
        &self,
        theta: Option<&[f64]>,
        cache: &ForwardCache,
        y_bar: &[f64],
        x_bar: &mut [f64],
        theta_bar: &mut [f64],
    ) -> Result<()> {
        check_len(self.output_dim(), y_bar.len())?;
        check_len(self.input_dim(), x_bar.len())?;
        check_len(self.param_count(), theta_bar.len())?;
        if cache.layers.len() != self.layers.len() {
            return Err(KanError::DimensionMismatch {
                expected: self.layers.len(),
                got: cache.layers.len(),
            });
        }
        let n = self.layers.len();
        let mut g_out = y_bar.to_vec();
        for k in (0..n).rev() {
            let (wa, wb) = self.layer_weights(k, theta);
            let start = self.offsets[k];
            let end = self.offsets[k + 1];
            let layer_bar = &mut theta_bar[start..end];
            let mut g_in = vec![0.0; self.layers[k].in_dim()];
            match (&self.layers[k], &cache.layers[k]) {
                (Layer::Kan(l), CacheEntry::Kan(c)) => {
                    let (ra, rb) = layer_bar.split_at_mut(wa.len());
                    l.shape().backward(wa, wb, c, &g_out, &mut g_in, ra, rb);
                }
                (Layer::Dense(l), CacheEntry::Dense { input }) => {
                    let (rw, rbias) = layer_bar.split_at_mut(wa.len());
                    for (a, &g) in g_out.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        rbias[a] += g;
                        let row = &wa[a * l.in_dim..(a + 1) * l.in_dim];
                        let rrow = &mut rw[a * l.in_dim..(a + 1) * l.in_dim];
                        for b in 0..l.in_dim {
                            rrow[b] += g * input[b];
                            g_in[b] += g * row[b];
                        }
                    }
                    // The input of every dense layer after the first is a tanh output.
                    if k > 0 {
                        for (gi, h) in g_in.iter_mut().zip(input) {
                            *gi *= 1.0 - h * h;
                        }
                    }
                    let _ = wb;
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
            g_out = g_in;
        }
        for (xb, g) in x_bar.iter_mut().zip(&g_out) {
            *xb += g;
        }
        Ok(())
    }

    /// Edge function `phi[layer][alpha, beta]` over raw layer inputs `xs`, applying the
    /// network's input normalization.
    pub fn activation_curve(
        &self,
        layer: usize,
        alpha: usize,
        beta: usize,
        xs: &[f64],
    ) -> Result<Vec<f64>> {
        self.kan_layer(layer)?
            .activation_curve(alpha, beta, xs, self.normalizes())
    }

    /// Raw inputs seen by each layer for one sample (`inputs[k]` feeds layer `k`; the
    /// last entry is the network output).
    pub fn layer_inputs(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_len(self.input_dim(), x.len())?;
        let mut out = vec![x.to_vec()];
        let normalize = self.normalizes();
        for (k, layer) in self.layers.iter().enumerate() {
            let prev = out.last().expect("nonempty");
            let y = match layer {
                Layer::Kan(l) => l.forward(prev, normalize)?.0,
                Layer::Dense(_) => {
                    let single = Network::new(vec![layer.clone()], Normalization::None)?;
                    let mut y = single.eval(prev)?;
                    if k + 1 < self.layers.len() {
                        y.iter_mut().for_each(|v| *v = v.tanh());
                    }
                    y
                }
            };
            out.push(y);
        }
        Ok(out)
    }

    /// Per-node maxima over `inputs` of the largest absolute incoming edge activation
    /// (the raw value for input nodes) and of the absolute node value passed on.
    pub fn record_activations(&self, inputs: &[Vec<f64>]) -> Result<ActivationRecord> {
        if self.kind() != NetworkKind::Kan {
            return Err(KanError::NotKan);
        }
        if inputs.is_empty() {
            return Err(KanError::EmptyInputs);
        }
        let mut nodes: Vec<Vec<NodeRecord>> = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(vec![NodeRecord::default(); self.input_dim()]);
        for l in &self.layers {
            nodes.push(vec![NodeRecord::default(); l.out_dim()]);
        }
        let normalize = self.normalizes();
        for x in inputs {
            let acts = self.layer_inputs(x)?;
            for (b, v) in x.iter().enumerate() {
                nodes[0][b].max_in = nodes[0][b].max_in.max(v.abs());
            }
            for (k, layer) in self.layers.iter().enumerate() {
                let Layer::Kan(l) = layer else {
                    unreachable!()
                };
                let input = &acts[k];
                for beta in 0..l.in_dim {
                    let src = &mut nodes[k][beta];
                    src.max_out = src.max_out.max(input[beta].abs());
                    let xe = if normalize {
                        input[beta].tanh()
                    } else {
                        input[beta]
                    };
                    let basis: Vec<f64> = l.centers.iter().map(|c| rbf(xe - c, l.h)).collect();
                    let sw = swish(input[beta]);
                    for alpha in 0..l.out_dim {
                        let off = (alpha * l.in_dim + beta) * l.grid_size;
                        let phi = dot(&l.w_rbf[off..off + l.grid_size], &basis)
                            + l.w_base[alpha * l.in_dim + beta] * sw;
                        let dst = &mut nodes[k + 1][alpha];
                        dst.max_in = dst.max_in.max(phi.abs());
                    }
                }
            }
            let last = nodes.len() - 1;
            for (a, v) in acts[acts.len() - 1].iter().enumerate() {
                nodes[last][a].max_out = nodes[last][a].max_out.max(v.abs());
            }
        }
        Ok(ActivationRecord { nodes })
    }

    /// Removes every hidden node whose recorded input and output magnitudes are both below
    /// `gamma_pr`.
    pub fn prune(&self, record: &ActivationRecord, gamma_pr: f64) -> Result<Network> {
        if self.kind() != NetworkKind::Kan {
            return Err(KanError::NotKan);
        }
        let n = self.layers.len();
        if n < 2 {
            return Err(KanError::NoHiddenLayer);
        }
        if record.nodes.len() != n + 1
            || record
                .nodes
                .iter()
                .zip(std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)))
                .any(|(r, d)| r.len() != d)
        {
            return Err(KanError::RecordMismatch);
        }
        // kept[k] lists the surviving node indices of node layer k.
        let mut kept: Vec<Vec<usize>> = Vec::with_capacity(n + 1);
        kept.push((0..self.input_dim()).collect());
        for k in 1..n {
            let keep: Vec<usize> = record.nodes[k]
                .iter()
                .enumerate()
                .filter(|(_, r)| !(r.max_in < gamma_pr && r.max_out < gamma_pr))
                .map(|(j, _)| j)
                .collect();
            if keep.is_empty() {
                return Err(KanError::EmptiedLayer { layer: k, gamma_pr });
            }
            kept.push(keep);
        }
        kept.push((0..self.output_dim()).collect());

        let mut layers = Vec::with_capacity(n);
        for (k, layer) in self.layers.iter().enumerate() {
            let Layer::Kan(l) = layer else { unreachable!() };
            let ins = &kept[k];
            let outs = &kept[k + 1];
            let g = l.grid_size;
            let mut w_rbf = Vec::with_capacity(outs.len() * ins.len() * g);
            let mut w_base = Vec::with_capacity(outs.len() * ins.len());
            for &a in outs {
                for &b in ins {
                    let off = (a * l.in_dim + b) * g;
                    w_rbf.extend_from_slice(&l.w_rbf[off..off + g]);
                    w_base.push(l.w_base[a * l.in_dim + b]);
                }
            }
            layers.push(Layer::Kan(KanLayer::from_weights(
                ins.len(),
                outs.len(),
                g,
                w_rbf,
                w_base,
            )?));
        }
        Network::new(layers, self.normalization)
    }
}

/// Allocation-free evaluator for a network that is a single `[1, 1, G]` KAN edge, reading
/// its weights from a flat parameter slice (`G` RBF weights, then the residual weight).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEdge {
    centers: Vec<f64>,
    h: f64,
    normalize: bool,
}

impl ScalarEdge {
    pub fn grid_size(&self) -> usize {
        self.centers.len()
    }

    pub fn eval(&self, theta: &[f64], x: f64) -> f64 {
        let xe = if self.normalize { x.tanh() } else { x };
        let inv = 1.0 / (2.0 * self.h * self.h);
        let mut acc = 0.0;
        for (w, c) in theta.iter().zip(&self.centers) {
            let r = xe - c;
            acc += w * (-r * r * inv).exp();
        }
        acc + theta[self.centers.len()] * swish(x)
    }

    /// Accumulates `v * dphi/dtheta` into `theta_bar` and returns `v * dphi/dx`.
    pub fn vjp(&self, theta: &[f64], x: f64, v: f64, theta_bar: &mut [f64]) -> f64 {
        let g = self.centers.len();
        let xe = if self.normalize { x.tanh() } else { x };
        let inv = 1.0 / (2.0 * self.h * self.h);
        let inv_h2 = 1.0 / (self.h * self.h);
        let mut dx = 0.0;
        for i in 0..g {
            let r = xe - self.centers[i];
            let psi = (-r * r * inv).exp();
            theta_bar[i] += v * psi;
            dx -= theta[i] * psi * r * inv_h2;
        }
        if self.normalize {
            dx *= 1.0 - xe * xe;
        }
        theta_bar[g] += v * swish(x);
        v * (dx + theta[g] * swish_derivative(x))
    }
}

impl Network {
    /// Fast evaluator when the network is exactly one `[1, 1, G]` KAN layer.
    pub fn scalar_edge(&self) -> Option<ScalarEdge> {
        match self.layers.as_slice() {
            [Layer::Kan(l)] if l.in_dim == 1 && l.out_dim == 1 => Some(ScalarEdge {
                centers: l.centers.clone(),
                h: l.h,
                normalize: self.normalizes(),
            }),
            _ => None,
        }
    }
}

/// Running maxima for one node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeRecord {
    pub max_in: f64,
    pub max_out: f64,
}

/// Activation magnitudes per node layer: `nodes[0]` are the network inputs, `nodes[L]`
/// the outputs, and everything in between hidden nodes.
///
/// For input nodes `max_in` is the raw input magnitude; for output nodes `max_out` is
/// the network output magnitude. Everywhere else the values are maxima of the incoming
/// and outgoing edge activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub nodes: Vec<Vec<NodeRecord>>,
}

struct KanShape<'a> {
    in_dim: usize,
    out_dim: usize,
    grid: usize,
    centers: &'a [f64],
    h: f64,
}

impl KanShape<'_> {
    fn forward(
        &self,
        w_rbf: &[f64],
        w_base: &[f64],
        x: &[f64],
        normalize: bool,
        y: &mut [f64],
        cache: &mut LayerCache,
    ) {
        let g = self.grid;
        let inv = 1.0 / (2.0 * self.h * self.h);
        cache.normalized = normalize;
        cache.x.clear();
        cache.x.extend_from_slice(x);
        cache.x_eff.clear();
        cache
            .x_eff
            .extend(x.iter().map(|&v| if normalize { v.tanh() } else { v }));
        cache.basis.clear();
        cache.basis.reserve(self.in_dim * g);
        for &xe in &cache.x_eff {
            for &c in self.centers {
                let r = xe - c;
                cache.basis.push((-r * r * inv).exp());
            }
        }
        cache.base.clear();
        cache.base.extend(x.iter().map(|&v| swish(v)));
        let row = self.in_dim * g;
        for (a, ya) in y.iter_mut().enumerate().take(self.out_dim) {
            *ya = dot(&w_rbf[a * row..(a + 1) * row], &cache.basis)
                + dot(&w_base[a * self.in_dim..(a + 1) * self.in_dim], &cache.base);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        w_rbf: &[f64],
        w_base: &[f64],
        cache: &LayerCache,
        y_bar: &[f64],
        x_bar: &mut [f64],
        w_rbf_bar: &mut [f64],
        w_base_bar: &mut [f64],
    ) {
        let g = self.grid;
        let row = self.in_dim * g;
        let mut g_basis = vec![0.0; row];
        let mut g_base = vec![0.0; self.in_dim];
        for (a, &yb) in y_bar.iter().enumerate() {
            if yb == 0.0 {
                continue;
            }
            let wr = &w_rbf[a * row..(a + 1) * row];
            let wrb = &mut w_rbf_bar[a * row..(a + 1) * row];
            for j in 0..row {
                wrb[j] += yb * cache.basis[j];
                g_basis[j] += yb * wr[j];
            }
            let wbr = &w_base[a * self.in_dim..(a + 1) * self.in_dim];
            let wbb = &mut w_base_bar[a * self.in_dim..(a + 1) * self.in_dim];
            for b in 0..self.in_dim {
                wbb[b] += yb * cache.base[b];
                g_base[b] += yb * wbr[b];
            }
        }
        let inv_h2 = 1.0 / (self.h * self.h);
        for b in 0..self.in_dim {
            let xe = cache.x_eff[b];
            let mut gx = 0.0;
            for i in 0..g {
                let j = b * g + i;
                gx -= g_basis[j] * cache.basis[j] * (xe - self.centers[i]) * inv_h2;
            }
            if cache.normalized {
                gx *= 1.0 - xe * xe;
            }
            x_bar[b] += gx + g_base[b] * swish_derivative(cache.x[b]);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(KanError::DimensionMismatch { expected, got })
    }
}
