//! A small pre-norm decoder-only transformer with exact analytic gradients.
//!
//! Attention projections use the row-vector convention `y = x · W`, so for a
//! projection matrix the left singular vectors live on the input side.
//! Each projection can be dense, a rank-k bottleneck `F·G`, or a frozen
//! dense base with a trainable bottleneck on top.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, gemm_tn_acc, Matrix};
use crate::tasks::{Example, Token};

const LN_EPS: f64 = 1e-5;
/// Sequences per packed pass when no gradients are needed.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            context_len: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnRole {
    Q,
    K,
    V,
    O,
}

impl AttnRole {
    pub const ALL: [AttnRole; 4] = [AttnRole::Q, AttnRole::K, AttnRole::V, AttnRole::O];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttnRole::Q => "q",
            AttnRole::K => "k",
            AttnRole::V => "v",
            AttnRole::O => "o",
        }
    }
}

impl fmt::Display for AttnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttnRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(AttnRole::Q),
            "k" => Ok(AttnRole::K),
            "v" => Ok(AttnRole::V),
            "o" => Ok(AttnRole::O),
            _ => Err(invalid(format!("unknown attention role `{s}`"))),
        }
    }
}

/// Low-rank factorization `T = F·G` with interior dimension `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckPair {
    pub f: Matrix,
    pub g: Matrix,
}

impl BottleneckPair {
    pub fn new(f: Matrix, g: Matrix) -> Result<Self> {
        if f.cols() != g.rows() {
            return Err(invalid(format!(
                "bottleneck interior mismatch: F is {:?}, G is {:?}",
                f.shape(),
                g.shape()
            )));
        }
        if f.rows() != g.cols() {
            return Err(invalid("bottleneck product must be square"));
        }
        if f.cols() > f.rows() {
            return Err(invalid(format!("rank {} exceeds dimension {}", f.cols(), f.rows())));
        }
        Ok(Self { f, g })
    }

    /// Both factors drawn with variance `1/√(n·k)`, so the product starts at
    /// the same scale as a dense `N(0, 1/n)` matrix.
    pub fn random(n: usize, k: usize, rng: &mut impl Rng) -> Self {
        let std = ((n * k) as f64).powf(-0.25);
        Self {
            f: normal_matrix(n, k, std, rng),
            g: normal_matrix(k, n, std, rng),
        }
    }

    /// LoRA-style start: random `F`, zero `G`, so the product is exactly zero.
    pub fn zero_product(n: usize, k: usize, rng: &mut impl Rng) -> Self {
        let std = ((n * k) as f64).powf(-0.25);
        Self {
            f: normal_matrix(n, k, std, rng),
            g: Matrix::zeros(k, n),
        }
    }

    pub fn rank(&self) -> usize {
        self.f.cols()
    }

    pub fn dim(&self) -> usize {
        self.f.rows()
    }

    pub fn product(&self) -> Matrix {
        self.f.mul(&self.g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttnWeight {
    Dense(Matrix),
    Bottleneck(BottleneckPair),
    /// Frozen dense base plus a trainable bottleneck: `W + F·G`.
    Adapted { base: Matrix, adapter: BottleneckPair },
}

impl AttnWeight {
    pub fn effective(&self) -> Matrix {
        match self {
            AttnWeight::Dense(w) => w.clone(),
            AttnWeight::Bottleneck(p) => p.product(),
            AttnWeight::Adapted { base, adapter } => base.sum(&adapter.product()).expect("adapter shape"),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AttnWeight::Dense(_) => "dense",
            AttnWeight::Bottleneck(_) => "bottleneck",
            AttnWeight::Adapted { .. } => "adapted",
        }
    }

    fn dim(&self) -> usize {
        match self {
            AttnWeight::Dense(w) => w.rows(),
            AttnWeight::Bottleneck(p) => p.dim(),
            AttnWeight::Adapted { base, .. } => base.rows(),
        }
    }

    /// Trainable tensors of this projection.
    fn params(&self) -> Vec<&Matrix> {
        match self {
            AttnWeight::Dense(w) => vec![w],
            AttnWeight::Bottleneck(p) | AttnWeight::Adapted { adapter: p, .. } => vec![&p.f, &p.g],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AttnWeight::Dense(w) => vec![w],
            AttnWeight::Bottleneck(p) | AttnWeight::Adapted { adapter: p, .. } => vec![&mut p.f, &mut p.g],
        }
    }

    /// Returns `x · W` and, for factored forms, the intermediate `x · F`.
    fn project(&self, x: &Matrix) -> (Matrix, Option<Matrix>) {
        match self {
            AttnWeight::Dense(w) => (x.mul(w), None),
            AttnWeight::Bottleneck(p) => {
                let m = x.mul(&p.f);
                (m.mul(&p.g), Some(m))
            }
            AttnWeight::Adapted { base, adapter } => {
                let m = x.mul(&adapter.f);
                let mut y = x.mul(base);
                y.add_scaled(&m.mul(&adapter.g), 1.0).expect("shape");
                (y, Some(m))
            }
        }
    }

    /// Backward through `y = x · W`. Accumulates parameter gradients into
    /// `grads` when given and returns `dx` when requested.
    fn backward(
        &self,
        x: &Matrix,
        mid: Option<&Matrix>,
        dy: &Matrix,
        grads: Option<&mut Vec<Matrix>>,
        need_dx: bool,
    ) -> Option<Matrix> {
        match self {
            AttnWeight::Dense(w) => {
                if let Some(g) = grads {
                    gemm_tn_acc(x, dy, &mut g[0]);
                }
                need_dx.then(|| dy.mul_t(w))
            }
            AttnWeight::Bottleneck(p) => {
                let m = mid.expect("bottleneck cache");
                let dm = dy.mul_t(&p.g);
                if let Some(g) = grads {
                    gemm_tn_acc(x, &dm, &mut g[0]);
                    gemm_tn_acc(m, dy, &mut g[1]);
                }
                need_dx.then(|| dm.mul_t(&p.f))
            }
            AttnWeight::Adapted { base, adapter } => {
                let m = mid.expect("adapter cache");
                let dm = dy.mul_t(&adapter.g);
                if let Some(g) = grads {
                    gemm_tn_acc(x, &dm, &mut g[0]);
                    gemm_tn_acc(m, dy, &mut g[1]);
                }
                need_dx.then(|| {
                    let mut dx = dy.mul_t(base);
                    dx.add_scaled(&dm.mul_t(&adapter.f), 1.0).expect("shape");
                    dx
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    /// `1 × d`
    pub gain: Matrix,
    /// `1 × d`
    pub bias: Matrix,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        let mut gain = Matrix::zeros(1, d);
        gain.fill(1.0);
        Self {
            gain,
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub norm1: LayerNorm,
    /// Indexed by [`AttnRole::index`].
    pub attn: [AttnWeight; 4],
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl LayerWeights {
    pub fn attn(&self, role: AttnRole) -> &AttnWeight {
        &self.attn[role.index()]
    }

    pub fn attn_mut(&mut self, role: AttnRole) -> &mut AttnWeight {
        &mut self.attn[role.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// `vocab × d`
    pub token_embedding: Matrix,
    /// `context × d`
    pub pos_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: LayerNorm,
    /// `d × vocab`
    pub head: Matrix,
}

/// A named, independently freezable set of tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    TokenEmbedding,
    PosEmbedding,
    Norm1(usize),
    Attention(usize, AttnRole),
    Norm2(usize),
    FeedForward(usize),
    FinalNorm,
    Head,
}

impl ParamGroup {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            ParamGroup::Norm1(l)
            | ParamGroup::Attention(l, _)
            | ParamGroup::Norm2(l)
            | ParamGroup::FeedForward(l) => Some(l),
            _ => None,
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, ParamGroup::Attention(..))
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::TokenEmbedding => write!(f, "embed.token"),
            ParamGroup::PosEmbedding => write!(f, "embed.pos"),
            ParamGroup::Norm1(l) => write!(f, "layers.{l}.norm1"),
            ParamGroup::Attention(l, r) => write!(f, "layers.{l}.attn.{r}"),
            ParamGroup::Norm2(l) => write!(f, "layers.{l}.norm2"),
            ParamGroup::FeedForward(l) => write!(f, "layers.{l}.ffn"),
            ParamGroup::FinalNorm => write!(f, "final_norm"),
            ParamGroup::Head => write!(f, "head"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed.token" => return Ok(ParamGroup::TokenEmbedding),
            "embed.pos" => return Ok(ParamGroup::PosEmbedding),
            "final_norm" => return Ok(ParamGroup::FinalNorm),
            "head" => return Ok(ParamGroup::Head),
            _ => {}
        }
        let bad = || invalid(format!("unknown parameter group `{s}`"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, tail) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        match tail {
            "norm1" => Ok(ParamGroup::Norm1(layer)),
            "norm2" => Ok(ParamGroup::Norm2(layer)),
            "ffn" => Ok(ParamGroup::FeedForward(layer)),
            _ => {
                let role = tail.strip_prefix("attn.").ok_or_else(bad)?;
                Ok(ParamGroup::Attention(layer, role.parse()?))
            }
        }
    }
}

/// Set of trainable groups. Everything not listed is frozen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    unfrozen: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn all_frozen() -> Self {
        Self::default()
    }

    pub fn all_unfrozen(weights: &ModelWeights) -> Self {
        Self {
            unfrozen: weights.groups().into_iter().collect(),
        }
    }

    pub fn only(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            unfrozen: groups.into_iter().collect(),
        }
    }

    pub fn unfreeze(&mut self, g: ParamGroup) {
        self.unfrozen.insert(g);
    }

    pub fn freeze(&mut self, g: ParamGroup) {
        self.unfrozen.remove(&g);
    }

    pub fn is_frozen(&self, g: ParamGroup) -> bool {
        !self.unfrozen.contains(&g)
    }

    pub fn unfrozen(&self) -> impl Iterator<Item = &ParamGroup> {
        self.unfrozen.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.unfrozen.is_empty()
    }
}

/// Gradients keyed by group, tensors in [`ModelWeights::tensors`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub groups: BTreeMap<ParamGroup, Vec<Matrix>>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, g: ParamGroup) -> Option<&[Matrix]> {
        self.groups.get(&g).map(Vec::as_slice)
    }

    pub fn global_norm(&self) -> f64 {
        self.groups
            .values()
            .flatten()
            .flat_map(|m| m.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for m in self.groups.values_mut().flatten() {
                m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            }
        }
        n
    }

    fn scale(&mut self, s: f64) {
        for m in self.groups.values_mut().flatten() {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite samples")
}

/// Random initialization. Dense matrices are `N(0, 1/fan_in)`, layer norms
/// start at identity and biases at zero.
pub fn init_random(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let std_d = (d as f64).powf(-0.5);
    let token_embedding = normal_matrix(config.vocab_size, d, std_d, &mut rng);
    let pos_embedding = normal_matrix(config.context_len, d, std_d, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| {
            let attn = [0, 1, 2, 3].map(|_| AttnWeight::Dense(normal_matrix(d, d, std_d, &mut rng)));
            LayerWeights {
                norm1: LayerNorm::identity(d),
                attn,
                norm2: LayerNorm::identity(d),
                ffn: FeedForward {
                    w1: normal_matrix(d, config.d_ff, std_d, &mut rng),
                    b1: Matrix::zeros(1, config.d_ff),
                    w2: normal_matrix(config.d_ff, d, (config.d_ff as f64).powf(-0.5), &mut rng),
                    b2: Matrix::zeros(1, d),
                },
            }
        })
        .collect();
    let head = normal_matrix(d, config.vocab_size, std_d, &mut rng);
    Ok(ModelWeights {
        config: config.clone(),
        token_embedding,
        pos_embedding,
        layers,
        final_norm: LayerNorm::identity(d),
        head,
    })
}

struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, ln: &LayerNorm) -> (Matrix, NormCache) {
    let d = x.cols();
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    let gain = ln.gain.as_slice();
    let bias = ln.bias.as_slice();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
            o[j] = gain[j] * xh[j] + bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Backward through layer norm; accumulates gain/bias grads if requested.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    ln: &LayerNorm,
    grads: Option<&mut Vec<Matrix>>,
    need_dx: bool,
) -> Option<Matrix> {
    let d = dy.cols();
    if let Some(g) = grads {
        let (gg, gb) = g.split_at_mut(1);
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..d {
                gg[0].as_mut_slice()[j] += dyr[j] * xh[j];
                gb[0].as_mut_slice()[j] += dyr[j];
            }
        }
    }
    if !need_dx {
        return None;
    }
    let gain = ln.gain.as_slice();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Some(dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    x_in_norm: NormCache,
    a: Matrix,
    proj_mid: [Option<Matrix>; 3],
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights per segment and head, at `segment * n_heads + head`.
    probs: Vec<Matrix>,
    heads_out: Matrix,
    out_mid: Option<Matrix>,
    mid_norm: NormCache,
    b: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

/// Several sequences stacked row-wise; attention never crosses a segment.
struct ForwardCache {
    tokens: Vec<Token>,
    /// `(first row, length)` of each sequence.
    segments: Vec<(usize, usize)>,
    layers: Vec<LayerCache>,
    final_norm: NormCache,
    final_out: Matrix,
}

impl ModelWeights {
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Every parameter group in canonical order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::TokenEmbedding, ParamGroup::PosEmbedding];
        for l in 0..self.layers.len() {
            out.push(ParamGroup::Norm1(l));
            for r in AttnRole::ALL {
                out.push(ParamGroup::Attention(l, r));
            }
            out.push(ParamGroup::Norm2(l));
            out.push(ParamGroup::FeedForward(l));
        }
        out.push(ParamGroup::FinalNorm);
        out.push(ParamGroup::Head);
        out
    }

    pub fn tensors(&self, g: ParamGroup) -> Vec<&Matrix> {
        match g {
            ParamGroup::TokenEmbedding => vec![&self.token_embedding],
            ParamGroup::PosEmbedding => vec![&self.pos_embedding],
            ParamGroup::Norm1(l) => vec![&self.layers[l].norm1.gain, &self.layers[l].norm1.bias],
            ParamGroup::Attention(l, r) => self.layers[l].attn(r).params(),
            ParamGroup::Norm2(l) => vec![&self.layers[l].norm2.gain, &self.layers[l].norm2.bias],
            ParamGroup::FeedForward(l) => {
                let f = &self.layers[l].ffn;
                vec![&f.w1, &f.b1, &f.w2, &f.b2]
            }
            ParamGroup::FinalNorm => vec![&self.final_norm.gain, &self.final_norm.bias],
            ParamGroup::Head => vec![&self.head],
        }
    }

    pub fn tensors_mut(&mut self, g: ParamGroup) -> Vec<&mut Matrix> {
        match g {
            ParamGroup::TokenEmbedding => vec![&mut self.token_embedding],
            ParamGroup::PosEmbedding => vec![&mut self.pos_embedding],
            ParamGroup::Norm1(l) => {
                let n = &mut self.layers[l].norm1;
                vec![&mut n.gain, &mut n.bias]
            }
            ParamGroup::Attention(l, r) => self.layers[l].attn_mut(r).params_mut(),
            ParamGroup::Norm2(l) => {
                let n = &mut self.layers[l].norm2;
                vec![&mut n.gain, &mut n.bias]
            }
            ParamGroup::FeedForward(l) => {
                let f = &mut self.layers[l].ffn;
                vec![&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]
            }
            ParamGroup::FinalNorm => {
                let n = &mut self.final_norm;
                vec![&mut n.gain, &mut n.bias]
            }
            ParamGroup::Head => vec![&mut self.head],
        }
    }

    fn zero_grads(&self, g: ParamGroup) -> Vec<Matrix> {
        self.tensors(g)
            .into_iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.groups()
            .into_iter()
            .flat_map(|g| self.tensors(g))
            .map(|m| m.as_slice().len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .into_iter()
            .all(|g| self.tensors(g).iter().all(|m| m.is_finite()))
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(invalid(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(invalid(format!(
                "token {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Next-token logits for every position, `len × vocab`.
    pub fn forward(&self, tokens: &[Token]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cached(tokens, &[(0, tokens.len())]);
        Ok(cache.final_out.mul(&self.head))
    }

    /// Logits for several sequences in one packed pass.
    pub fn forward_batch(&self, seqs: &[Vec<Token>]) -> Result<Vec<Matrix>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let (tokens, segments) = self.pack(chunk.iter().map(|s| s.as_slice()))?;
            let cache = self.forward_cached(&tokens, &segments);
            let logits = cache.final_out.mul(&self.head);
            for &(s0, len) in &segments {
                let rows = logits.as_slice()[s0 * logits.cols()..(s0 + len) * logits.cols()].to_vec();
                out.push(Matrix::from_vec(len, logits.cols(), rows).expect("finite logits"));
            }
        }
        Ok(out)
    }

    fn pack<'a>(&self, seqs: impl Iterator<Item = &'a [Token]>) -> Result<(Vec<Token>, Vec<(usize, usize)>)> {
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Ok((tokens, segments))
    }

    fn forward_cached(&self, tokens: &[Token], segments: &[(usize, usize)]) -> ForwardCache {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for &(s0, len) in segments {
            for t in 0..len {
                let row = x.row_mut(s0 + t);
                for ((o, e), p) in row
                    .iter_mut()
                    .zip(self.token_embedding.row(tokens[s0 + t]))
                    .zip(self.pos_embedding.row(t))
                {
                    *o = e + p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = self.layer_forward(layer, x, segments);
            x = next;
            caches.push(cache);
        }
        let (final_out, final_norm) = layer_norm(&x, &self.final_norm);
        ForwardCache {
            tokens: tokens.to_vec(),
            segments: segments.to_vec(),
            layers: caches,
            final_norm,
            final_out,
        }
    }

    fn layer_forward(&self, layer: &LayerWeights, x: Matrix, segments: &[(usize, usize)]) -> (Matrix, LayerCache) {
        let n = x.rows();
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let (a, x_in_norm) = layer_norm(&x, &layer.norm1);
        let (q, qm) = layer.attn(AttnRole::Q).project(&a);
        let (k, km) = layer.attn(AttnRole::K).project(&a);
        let (v, vm) = layer.attn(AttnRole::V).project(&a);

        let mut heads_out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(h * segments.len());
        for &(s0, len) in segments {
            for head in 0..h {
                let c0 = head * dh;
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &q.row(s0 + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(qi, &k.row(s0 + j)[c0..c0 + dh]) * scale;
                        p[(i, j)] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let e = (p[(i, j)] - max).exp();
                        p[(i, j)] = e;
                        z += e;
                    }
                    let out = &mut heads_out.row_mut(s0 + i)[c0..c0 + dh];
                    for j in 0..=i {
                        let w = p[(i, j)] / z;
                        p[(i, j)] = w;
                        for (o, vv) in out.iter_mut().zip(&v.row(s0 + j)[c0..c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let (attn_out, out_mid) = layer.attn(AttnRole::O).project(&heads_out);
        let mut x1 = x;
        x1.add_scaled(&attn_out, 1.0).expect("shape");

        let (b, mid_norm) = layer_norm(&x1, &layer.norm2);
        let mut pre_act = b.mul(&layer.ffn.w1);
        add_row_bias(&mut pre_act, &layer.ffn.b1);
        let mut act = pre_act.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let mut f = act.mul(&layer.ffn.w2);
        add_row_bias(&mut f, &layer.ffn.b2);
        x1.add_scaled(&f, 1.0).expect("shape");

        (
            x1,
            LayerCache {
                x_in_norm,
                a,
                proj_mid: [qm, km, vm],
                q,
                k,
                v,
                probs,
                heads_out,
                out_mid,
                mid_norm,
                b,
                pre_act,
                act,
            },
        )
    }

    /// Mean negative log-likelihood over answer tokens and gradients for
    /// every unfrozen group.
    pub fn loss_and_grads(&self, batch: &[Example], mask: &FreezeMask) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let mut grads = Gradients::default();
        for g in mask.unfrozen() {
            grads.groups.insert(*g, self.zero_grads(*g));
        }
        let total: usize = batch.iter().map(|e| e.y.len()).sum();
        let inputs: Vec<Vec<Token>> = batch.iter().map(Example::input_tokens).collect();
        let (tokens, segments) = self.pack(inputs.iter().map(|s| s.as_slice()))?;
        let cache = self.forward_cached(&tokens, &segments);
        let logits = cache.final_out.mul(&self.head);
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for (ex, &(s0, _)) in batch.iter().zip(&segments) {
            loss += answer_nll(&logits, ex, s0, Some(&mut dlogits));
        }
        if !grads.is_empty() {
            self.backward(&cache, &dlogits, mask, &mut grads);
        }
        let inv = 1.0 / total as f64;
        grads.scale(inv);
        Ok((loss * inv, grads))
    }

    /// Mean answer-token NLL without gradients.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let total: usize = batch.iter().map(|e| e.y.len()).sum();
        let mut loss = 0.0;
        for chunk in batch.chunks(EVAL_CHUNK) {
            let inputs: Vec<Vec<Token>> = chunk.iter().map(Example::input_tokens).collect();
            let (tokens, segments) = self.pack(inputs.iter().map(|s| s.as_slice()))?;
            let cache = self.forward_cached(&tokens, &segments);
            let logits = cache.final_out.mul(&self.head);
            for (ex, &(s0, _)) in chunk.iter().zip(&segments) {
                loss += answer_nll(&logits, ex, s0, None);
            }
        }
        Ok(loss / total as f64)
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, mask: &FreezeMask, grads: &mut Gradients) {
        let n_layers = self.layers.len();
        // lowest[l]: some unfrozen group lives in layer l or below (or in the embeddings)
        let embed_open = !mask.is_frozen(ParamGroup::TokenEmbedding) || !mask.is_frozen(ParamGroup::PosEmbedding);
        let mut needs_below = vec![embed_open; n_layers + 1];
        for l in 0..n_layers {
            let here = [
                ParamGroup::Norm1(l),
                ParamGroup::Attention(l, AttnRole::Q),
                ParamGroup::Attention(l, AttnRole::K),
                ParamGroup::Attention(l, AttnRole::V),
                ParamGroup::Attention(l, AttnRole::O),
                ParamGroup::Norm2(l),
                ParamGroup::FeedForward(l),
            ]
            .iter()
            .any(|g| !mask.is_frozen(*g));
            needs_below[l + 1] = needs_below[l] || here;
        }

        if let Some(g) = grads.groups.get_mut(&ParamGroup::Head) {
            gemm_tn_acc(&cache.final_out, dlogits, &mut g[0]);
        }
        if !needs_below[n_layers] && mask.is_frozen(ParamGroup::FinalNorm) {
            return;
        }
        let dfinal = dlogits.mul_t(&self.head);
        let mut dx = match layer_norm_backward(
            &dfinal,
            &cache.final_norm,
            &self.final_norm,
            grads.groups.get_mut(&ParamGroup::FinalNorm),
            needs_below[n_layers],
        ) {
            Some(dx) => dx,
            None => return,
        };

        for l in (0..n_layers).rev() {
            if !needs_below[l + 1] {
                return;
            }
            dx = self.layer_backward(l, &cache.layers[l], &cache.segments, dx, grads, needs_below[l]);
        }

        if let Some(g) = grads.groups.get_mut(&ParamGroup::TokenEmbedding) {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                for (o, v) in g[0].row_mut(tok).iter_mut().zip(dx.row(t)) {
                    *o += v;
                }
            }
        }
        if let Some(g) = grads.groups.get_mut(&ParamGroup::PosEmbedding) {
            for &(s0, len) in &cache.segments {
                for t in 0..len {
                    for (o, v) in g[0].row_mut(t).iter_mut().zip(dx.row(s0 + t)) {
                        *o += v;
                    }
                }
            }
        }
    }

    fn layer_backward(
        &self,
        l: usize,
        c: &LayerCache,
        segments: &[(usize, usize)],
        dx_out: Matrix,
        grads: &mut Gradients,
        need_dx_in: bool,
    ) -> Matrix {
        let layer = &self.layers[l];
        let n = dx_out.rows();
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let df = &dx_out;
        let mut dact = df.mul_t(&layer.ffn.w2);
        if let Some(g) = grads.groups.get_mut(&ParamGroup::FeedForward(l)) {
            gemm_tn_acc(&c.act, df, &mut g[2]);
            add_col_sums(&mut g[3], df);
        }
        for (da, &u) in dact.as_mut_slice().iter_mut().zip(c.pre_act.as_slice()) {
            *da *= gelu_grad(u);
        }
        if let Some(g) = grads.groups.get_mut(&ParamGroup::FeedForward(l)) {
            gemm_tn_acc(&c.b, &dact, &mut g[0]);
            add_col_sums(&mut g[1], &dact);
        }
        let db = dact.mul_t(&layer.ffn.w1);
        let mut dx1 = dx_out.clone();
        let dnorm2 = layer_norm_backward(
            &db,
            &c.mid_norm,
            &layer.norm2,
            grads.groups.get_mut(&ParamGroup::Norm2(l)),
            true,
        )
        .expect("dx requested");
        dx1.add_scaled(&dnorm2, 1.0).expect("shape");

        // attention branch
        let dheads = layer.attn(AttnRole::O).backward(
            &c.heads_out,
            c.out_mid.as_ref(),
            &dx1,
            grads.groups.get_mut(&ParamGroup::Attention(l, AttnRole::O)),
            true,
        )
        .expect("dx requested");

        let d = self.config.d_model;
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dp = Vec::new();
        for (si, &(s0, len)) in segments.iter().enumerate() {
            dp.resize(len, 0.0);
            for head in 0..h {
                let c0 = head * dh;
                let p = &c.probs[si * h + head];
                for i in 0..len {
                    let doi = &dheads.row(s0 + i)[c0..c0 + dh];
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let g = dot(doi, &c.v.row(s0 + j)[c0..c0 + dh]);
                        dp[j] = g;
                        weighted += p[(i, j)] * g;
                        let pij = p[(i, j)];
                        for (o, x) in dv.row_mut(s0 + j)[c0..c0 + dh].iter_mut().zip(doi) {
                            *o += pij * x;
                        }
                    }
                    for j in 0..=i {
                        let ds = p[(i, j)] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &c.k.row(s0 + j)[c0..c0 + dh];
                        for (o, x) in dq.row_mut(s0 + i)[c0..c0 + dh].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &c.q.row(s0 + i)[c0..c0 + dh];
                        for (o, x) in dk.row_mut(s0 + j)[c0..c0 + dh].iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }

        let need_da = need_dx_in || grads.groups.contains_key(&ParamGroup::Norm1(l));
        let mut da = Matrix::zeros(n, d);
        for (idx, (role, dy)) in [(AttnRole::Q, &dq), (AttnRole::K, &dk), (AttnRole::V, &dv)]
            .into_iter()
            .enumerate()
        {
            let r = layer.attn(role).backward(
                &c.a,
                c.proj_mid[idx].as_ref(),
                dy,
                grads.groups.get_mut(&ParamGroup::Attention(l, role)),
                need_da,
            );
            if let Some(r) = r {
                da.add_scaled(&r, 1.0).expect("shape");
            }
        }
        if !need_da {
            return dx1;
        }
        if let Some(dn) = layer_norm_backward(
            &da,
            &c.x_in_norm,
            &layer.norm1,
            grads.groups.get_mut(&ParamGroup::Norm1(l)),
            need_dx_in,
        ) {
            dx1.add_scaled(&dn, 1.0).expect("shape");
        }
        dx1
    }

    /// `W ← W + sign·delta` on one dense attention projection.
    pub fn apply_delta(&self, layer: usize, role: AttnRole, delta: &Matrix, sign: f64) -> Result<ModelWeights> {
        let mut out = self.clone();
        out.apply_delta_in_place(layer, role, delta, sign)?;
        Ok(out)
    }

    pub fn apply_delta_in_place(&mut self, layer: usize, role: AttnRole, delta: &Matrix, sign: f64) -> Result<()> {
        if !(sign == 1.0 || sign == -1.0) {
            return Err(invalid(format!("sign must be +1 or -1, got {sign}")));
        }
        let n_layers = self.layers.len();
        let lw = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| invalid(format!("layer {layer} out of range (model has {n_layers})")))?;
        match lw.attn_mut(role) {
            AttnWeight::Dense(w) => {
                if !w.same_shape(delta) {
                    return Err(invalid(format!(
                        "delta shape {:?} does not match projection {:?}",
                        delta.shape(),
                        w.shape()
                    )));
                }
                if !delta.is_finite() {
                    return Err(invalid("delta contains non-finite entries"));
                }
                w.add_scaled(delta, sign)
            }
            other => Err(invalid(format!(
                "layer {layer} attention {role} is {}; deltas apply to dense weights only",
                other.kind()
            ))),
        }
    }

    /// Plain SGD update on the groups present in `grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, step_size: f64) {
        for (g, gs) in &grads.groups {
            for (p, d) in self.tensors_mut(*g).into_iter().zip(gs) {
                p.add_scaled(d, -step_size).expect("gradient shape");
            }
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.layers.first().map_or(self.config.d_model, |l| l.attn[0].dim())
    }
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    let b = bias.as_slice();
    for i in 0..m.rows() {
        for (x, y) in m.row_mut(i).iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn add_col_sums(out: &mut Matrix, m: &Matrix) {
    let o = out.as_mut_slice();
    for i in 0..m.rows() {
        for (x, y) in o.iter_mut().zip(m.row(i)) {
            *x += y;
        }
    }
}

/// Sum of answer-token NLL for the sequence starting at row `offset`,
/// writing unscaled `dL/dlogits` into `grad` when given.
fn answer_nll(logits: &Matrix, ex: &Example, offset: usize, mut grad: Option<&mut Matrix>) -> f64 {
    let mut nll = 0.0;
    let start = offset + ex.x.len() - 1;
    for (i, &target) in ex.y.iter().enumerate() {
        let t = start + i;
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        nll += lse - row[target];
        if let Some(d) = grad.as_deref_mut() {
            let drow = d.row_mut(t);
            for (o, v) in drow.iter_mut().zip(row) {
                *o = (v - lse).exp();
            }
            drow[target] -= 1.0;
        }
    }
    nll
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
