//! The whole-page reranker.
//!
//! Each candidate is embedded as `e_i = [e_sem; e_feat]`, where `e_sem` gates
//! the visual and text embeddings together and `e_feat` encodes bucketized
//! features. A stack of pre-norm blocks lets every item attend to `U` user
//! tokens, followed by a per-block MLP, and a linear head emits the score.
//! Items never attend to each other, so scores are permutation-equivariant.
//!
//! Gradients are written out by hand; [`grad_check`] compares them against
//! central differences.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Query, RankedList};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::objectives::{query_objective_grad, LossConfig, QueryTargets};
use crate::scalar::{sigmoid, Scalar};
use crate::seeding::stream;

const LN_EPS: f64 = 1e-5;
const FORMAT: &str = "smar-reranker";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Gated fusion, user cross-attention and MLP blocks.
    CrossAttention,
    /// As `CrossAttention` with `e_sem = e_text`.
    CrossAttentionNoFusion,
    /// Per-block MLP only; user features unused.
    Mlp,
    /// Linear score over the text embedding and one-hot features.
    HeadOnly,
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-attention" => Ok(Architecture::CrossAttention),
            "cross-attention-no-fusion" | "no-fusion" => Ok(Architecture::CrossAttentionNoFusion),
            "mlp" => Ok(Architecture::Mlp),
            "head-only" => Ok(Architecture::HeadOnly),
            other => Err(Error::config("model.architecture", format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub user_tokens: usize,
    /// Sorted cut points per raw item feature.
    pub bucket_boundaries: Vec<Vec<f64>>,
    pub text_dim: usize,
    pub user_feature_dim: usize,
    pub learning_rate: f64,
    /// Global gradient norm cap per step; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_queries: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults sized for `dataset`, with quantile bucket boundaries fitted
    /// on it.
    pub fn for_dataset(dataset: &Dataset, n_buckets: usize) -> Self {
        ModelConfig {
            architecture: Architecture::CrossAttention,
            embed_dim: dataset.embedding_dims.0 + 8,
            n_heads: 2,
            n_blocks: 2,
            mlp_hidden: 16,
            user_tokens: 4,
            bucket_boundaries: fit_boundaries(dataset, n_buckets),
            text_dim: dataset.embedding_dims.0,
            user_feature_dim: dataset.feature_dims.1,
            learning_rate: 0.05,
            grad_clip: 10.0,
            epochs: 20,
            batch_queries: 16,
            seed: 0,
        }
    }

    /// Overrides from `model.*` keys; boundaries are refitted when
    /// `model.n_buckets` is given.
    pub fn apply_kv(mut self, cfg: &KvConfig, dataset: &Dataset) -> Result<Self> {
        if let Some(a) = cfg.get("model.architecture")? {
            self.architecture = a;
        }
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = cfg.get($key)? {
                    self.$field = v;
                }
            };
        }
        set!(embed_dim, "model.embed_dim");
        set!(n_heads, "model.n_heads");
        set!(n_blocks, "model.n_blocks");
        set!(mlp_hidden, "model.mlp_hidden");
        set!(user_tokens, "model.user_tokens");
        set!(learning_rate, "model.learning_rate");
        set!(grad_clip, "model.grad_clip");
        set!(epochs, "model.epochs");
        set!(batch_queries, "model.batch_queries");
        set!(seed, "model.seed");
        if let Some(n) = cfg.get::<usize>("model.n_buckets")? {
            self.bucket_boundaries = fit_boundaries(dataset, n);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.embed_dim", self.embed_dim),
            ("model.n_heads", self.n_heads),
            ("model.n_blocks", self.n_blocks),
            ("model.mlp_hidden", self.mlp_hidden),
            ("model.user_tokens", self.user_tokens),
            ("model.batch_queries", self.batch_queries),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", "must divide embed_dim"));
        }
        if self.architecture != Architecture::HeadOnly && self.embed_dim <= self.text_dim {
            return Err(Error::config("model.embed_dim", "must exceed the text embedding dimension"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("model.learning_rate", "must be finite and >= 0"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("model.grad_clip", "must be finite and >= 0"));
        }
        for (f, b) in self.bucket_boundaries.iter().enumerate() {
            if b.iter().any(|x| !x.is_finite()) || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(
                    format!("model.bucket_boundaries.{f}"),
                    "must be finite and strictly increasing",
                ));
            }
        }
        Ok(())
    }

    fn n_bucket_bits(&self) -> usize {
        self.bucket_boundaries.iter().map(|b| b.len() + 1).sum()
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    fn attends(&self) -> bool {
        matches!(
            self.architecture,
            Architecture::CrossAttention | Architecture::CrossAttentionNoFusion
        )
    }
}

/// Quantile cut points of every item feature over `dataset`, deduplicated.
pub fn fit_boundaries(dataset: &Dataset, n_buckets: usize) -> Vec<Vec<f64>> {
    let dim = dataset.feature_dims.0;
    (0..dim)
        .map(|f| {
            let mut values: Vec<f64> = dataset
                .queries
                .iter()
                .flat_map(|q| q.candidates.iter().map(move |c| c.features[f]))
                .collect();
            values.sort_by(f64::total_cmp);
            let mut cuts: Vec<f64> = Vec::new();
            if values.is_empty() {
                return cuts;
            }
            for k in 1..n_buckets.max(1) {
                let v = values[k * values.len() / n_buckets];
                // A cut at the minimum would leave the lowest bucket empty.
                if v > values[0] && cuts.last().is_none_or(|&last| v > last) {
                    cuts.push(v);
                }
            }
            cuts
        })
        .collect()
}

/// Bucket of `value` among half-open intervals `(-inf, b0), [b0, b1), ...`.
fn bucket_of(value: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b <= value)
}

/// One-hot encoding of each feature over its buckets, concatenated.
pub fn bucketize_features(raw: &[f64], boundaries: &[Vec<f64>]) -> Result<Vec<u8>> {
    let idx = bucket_indices(raw, boundaries)?;
    let mut out = vec![0u8; boundaries.iter().map(|b| b.len() + 1).sum()];
    for k in idx {
        out[k] = 1;
    }
    Ok(out)
}

/// Positions of the set bits of [`bucketize_features`].
pub fn bucket_indices(raw: &[f64], boundaries: &[Vec<f64>]) -> Result<Vec<usize>> {
    if raw.len() != boundaries.len() {
        return Err(Error::Shape(format!(
            "{} raw features but boundaries for {}",
            raw.len(),
            boundaries.len()
        )));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(raw.len());
    for (&x, b) in raw.iter().zip(boundaries) {
        if x.is_nan() {
            return Err(Error::Numeric("NaN feature cannot be bucketized".into()));
        }
        out.push(offset + bucket_of(x, b));
        offset += b.len() + 1;
    }
    Ok(out)
}

/// `e_sem = z * visual + (1 - z) * text` with `z = sigmoid(W [visual; text] + b)`;
/// returns `text` when no visual embedding is present.
pub fn hybrid_fusion<T: Scalar>(
    visual: Option<&[T]>,
    text: &[T],
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Vec<T>> {
    let Some(v) = visual else {
        return Ok(text.to_vec());
    };
    let dt = text.len();
    if v.len() != dt || w.shape != [dt, 2 * dt] || b.data.len() != dt {
        return Err(Error::Shape(format!(
            "fusion of visual {} / text {} with gate {:?}",
            v.len(),
            dt,
            w.shape
        )));
    }
    let cat: Vec<T> = v.iter().chain(text).copied().collect();
    let mut z = vec![T::zero(); dt];
    matvec(&w.data, &cat, Some(&b.data), &mut z);
    Ok(z
        .iter()
        .zip(v.iter().zip(text))
        .map(|(&pre, (&vi, &ti))| {
            let g = sigmoid(pre);
            g * vi + (T::one() - g) * ti
        })
        .collect())
}

/// Row-major parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `[fan_out, fan_in]`
    /// matrix.
    fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Tensor {
            shape: vec![rows, cols],
            data: (0..rows * cols)
                .map(|_| T::of(rng.random_range(-limit..limit)))
                .collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub m1: Tensor<T>,
    pub c1: Tensor<T>,
    pub m2: Tensor<T>,
    pub c2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub gate_w: Tensor<T>,
    pub gate_b: Tensor<T>,
    pub feat_w1: Tensor<T>,
    pub feat_b1: Tensor<T>,
    pub feat_w2: Tensor<T>,
    pub feat_b2: Tensor<T>,
    pub user_w1: Tensor<T>,
    pub user_b1: Tensor<T>,
    pub user_w2: Tensor<T>,
    pub user_b2: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, wk, wv, wo, bo, ln2_g, ln2_b, m1, c1, m2, c2)
    };
}
macro_rules! top_fields {
    ($m:ident) => {
        $m!(gate_w, gate_b, feat_w1, feat_b1, feat_w2, feat_b2, user_w1, user_b1, user_w2, user_b2)
    };
}

impl<T: Scalar> Params<T> {
    fn init(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let dt = cfg.text_dim;
        let h = cfg.mlp_hidden;
        let bits = cfg.n_bucket_bits();
        let uin = cfg.user_feature_dim;
        let mut rng = stream(cfg.seed, "model/init", 0);
        let head_in = if cfg.architecture == Architecture::HeadOnly { dt + bits } else { d };
        let feat = cfg.embed_dim.saturating_sub(dt);
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams {
                ln1_g: Tensor::filled(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::xavier(d, d, &mut rng),
                wk: Tensor::xavier(d, d, &mut rng),
                wv: Tensor::xavier(d, d, &mut rng),
                wo: Tensor::xavier(d, d, &mut rng),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                m1: Tensor::xavier(h, d, &mut rng),
                c1: Tensor::zeros(&[h]),
                m2: Tensor::xavier(d, h, &mut rng),
                c2: Tensor::zeros(&[d]),
            })
            .collect();
        Params {
            gate_w: Tensor::xavier(dt, 2 * dt, &mut rng),
            gate_b: Tensor::zeros(&[dt]),
            feat_w1: Tensor::xavier(h, bits, &mut rng),
            feat_b1: Tensor::zeros(&[h]),
            feat_w2: Tensor::xavier(feat, h, &mut rng),
            feat_b2: Tensor::zeros(&[feat]),
            user_w1: Tensor::xavier(h, uin, &mut rng),
            user_b1: Tensor::zeros(&[h]),
            user_w2: Tensor::xavier(cfg.user_tokens * d, h, &mut rng),
            user_b2: Tensor::zeros(&[cfg.user_tokens * d]),
            blocks,
            head_w: Tensor::xavier(1, head_in, &mut rng),
            head_b: Tensor::zeros(&[1]),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        macro_rules! push_top { ($($f:ident),*) => { $(out.push((stringify!($f).to_string(), &self.$f));)* } }
        top_fields!(push_top);
        for (i, b) in self.blocks.iter().enumerate() {
            macro_rules! push_block { ($($f:ident),*) => { $(out.push((format!("block{i}.{}", stringify!($f)), &b.$f));)* } }
            block_fields!(push_block);
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        macro_rules! push_top { ($($f:ident),*) => { $(out.push((stringify!($f).to_string(), &mut self.$f));)* } }
        top_fields!(push_top);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            macro_rules! push_block { ($($f:ident),*) => { $(out.push((format!("block{i}.{}", stringify!($f)), &mut b.$f));)* } }
            block_fields!(push_block);
        }
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            *t = t.zeros_like();
        }
        z
    }

    /// `self += scale * other`.
    fn norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    fn add_scaled(&mut self, other: &Params<T>, scale: T) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }
}

/// A query converted to model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuery<T> {
    pub query_id: String,
    pub item_ids: Vec<String>,
    pub text: Vec<Vec<T>>,
    pub visual: Vec<Option<Vec<T>>>,
    pub buckets: Vec<Vec<usize>>,
    pub user: Vec<T>,
}

fn to_t<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::of(x)).collect()
}

impl<T: Scalar> EncodedQuery<T> {
    pub fn new(query: &Query, cfg: &ModelConfig) -> Result<Self> {
        if query.user_features.len() != cfg.user_feature_dim {
            return Err(Error::Shape(format!(
                "query {}: {} user features, model expects {}",
                query.query_id,
                query.user_features.len(),
                cfg.user_feature_dim
            )));
        }
        let mut enc = EncodedQuery {
            query_id: query.query_id.clone(),
            item_ids: Vec::with_capacity(query.len()),
            text: Vec::with_capacity(query.len()),
            visual: Vec::with_capacity(query.len()),
            buckets: Vec::with_capacity(query.len()),
            user: to_t(&query.user_features),
        };
        for c in &query.candidates {
            let shape_err = |what: &str, got: usize| {
                Error::Shape(format!(
                    "item {}: {what} has dimension {got}, model expects {}",
                    c.item_id, cfg.text_dim
                ))
            };
            if c.text_embedding.len() != cfg.text_dim {
                return Err(shape_err("text embedding", c.text_embedding.len()));
            }
            if let Some(v) = &c.visual_embedding {
                if v.len() != cfg.text_dim {
                    return Err(shape_err("visual embedding", v.len()));
                }
            }
            enc.item_ids.push(c.item_id.clone());
            enc.text.push(to_t(&c.text_embedding));
            enc.visual.push(c.visual_embedding.as_deref().map(to_t));
            enc.buckets.push(bucket_indices(&c.features, &cfg.bucket_boundaries)?);
        }
        Ok(enc)
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

fn matvec<T: Scalar>(w: &[T], x: &[T], b: Option<&[T]>, out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b.map_or(T::zero(), |b| b[r]);
        for (&wi, &xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// `dx += W^T dy`.
fn matvec_t_acc<T: Scalar>(w: &[T], dy: &[T], dx: &mut [T]) {
    let cols = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, &wi) in dx.iter_mut().zip(row) {
            *d += wi * g;
        }
    }
}

/// `gw += dy x^T`.
fn outer_acc<T: Scalar>(gw: &mut [T], dy: &[T], x: &[T]) {
    let cols = x.len();
    for (r, &g) in dy.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (d, &xi) in row.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
}

fn add_acc<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T]) -> (Vec<T>, T, Vec<T>) {
    let n = T::of_usize(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv).collect();
    let y = xhat.iter().zip(g.iter().zip(b)).map(|(&h, (&g, &b))| g * h + b).collect();
    (xhat, inv, y)
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dg`, `db`.
fn layer_norm_back<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv: T,
    g: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let n = T::of_usize(dy.len());
    let dxhat: Vec<T> = dy.iter().zip(g).map(|(&d, &g)| d * g).collect();
    let mean_d = dxhat.iter().copied().sum::<T>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum::<T>() / n;
    for k in 0..dy.len() {
        dg[k] += dy[k] * xhat[k];
        db[k] += dy[k];
        dx[k] += inv * (dxhat[k] - mean_d - xhat[k] * mean_dx);
    }
}

struct UserCtx<T> {
    hidden: Vec<T>,
    tokens: Vec<Vec<T>>,
    /// `[block][token]` key and value vectors.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

struct BlockCache<T> {
    xhat1: Vec<T>,
    inv1: T,
    y1: Vec<T>,
    q: Vec<T>,
    /// `[head][token]` attention weights.
    probs: Vec<Vec<T>>,
    attn: Vec<T>,
    xhat2: Vec<T>,
    inv2: T,
    y2: Vec<T>,
    a1: Vec<T>,
}

struct ItemCache<T> {
    z: Option<Vec<T>>,
    h_feat: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    x_out: Vec<T>,
}

/// Gradient-side accumulators for the user context of one query.
struct UserGrad<T> {
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
}

/// Options for [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Multiplies the analytic gate gradient; 1.0 except in mutation tests.
    pub fusion_grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_tensor: 20,
            seed: 0,
            fusion_grad_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<(String, f64)>,
    pub entries_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Full-pass training loss before the first update.
    pub initial_loss: f64,
    /// Mean batch loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-pass training loss after the last update.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerModel<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> RerankerModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(RerankerModel { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> RerankerModel<U> {
        let mut params = Params::<U>::init(&self.config);
        for ((_, dst), (_, src)) in params.named_mut().into_iter().zip(self.params.named()) {
            *dst = src.cast();
        }
        RerankerModel {
            config: self.config.clone(),
            params,
        }
    }

    pub fn encode(&self, query: &Query) -> Result<EncodedQuery<T>> {
        EncodedQuery::new(query, &self.config)
    }

    fn user_ctx(&self, user: &[T]) -> UserCtx<T> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.embed_dim;
        if !cfg.attends() {
            return UserCtx { hidden: vec![], tokens: vec![], keys: vec![], values: vec![] };
        }
        let mut hidden = vec![T::zero(); cfg.mlp_hidden];
        matvec(&p.user_w1.data, user, Some(&p.user_b1.data), &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.tanh());
        let mut flat = vec![T::zero(); cfg.user_tokens * d];
        matvec(&p.user_w2.data, &hidden, Some(&p.user_b2.data), &mut flat);
        let tokens: Vec<Vec<T>> = flat.chunks(d).map(<[T]>::to_vec).collect();
        let project = |w: &Tensor<T>| -> Vec<Vec<T>> {
            tokens
                .iter()
                .map(|t| {
                    let mut out = vec![T::zero(); d];
                    matvec(&w.data, t, None, &mut out);
                    out
                })
                .collect()
        };
        let keys = p.blocks.iter().map(|b| project(&b.wk)).collect();
        let values = p.blocks.iter().map(|b| project(&b.wv)).collect();
        UserCtx { hidden, tokens, keys, values }
    }

    fn item_forward(&self, ctx: &UserCtx<T>, q: &EncodedQuery<T>, i: usize) -> (T, ItemCache<T>) {
        let cfg = &self.config;
        let p = &self.params;
        let dt = cfg.text_dim;
        let text = &q.text[i];

        if cfg.architecture == Architecture::HeadOnly {
            let w = &p.head_w.data;
            let mut s = p.head_b.data[0];
            for (k, &t) in text.iter().enumerate() {
                s += w[k] * t;
            }
            for &b in &q.buckets[i] {
                s += w[dt + b];
            }
            let cache = ItemCache { z: None, h_feat: vec![], blocks: vec![], x_out: vec![] };
            return (s, cache);
        }

        let d = cfg.embed_dim;
        let mut x = vec![T::zero(); d];
        let mut z = None;
        match (&q.visual[i], cfg.architecture) {
            (Some(v), Architecture::CrossAttention | Architecture::Mlp) => {
                let cat: Vec<T> = v.iter().chain(text).copied().collect();
                let mut gate = vec![T::zero(); dt];
                matvec(&p.gate_w.data, &cat, Some(&p.gate_b.data), &mut gate);
                gate.iter_mut().for_each(|g| *g = sigmoid(*g));
                for k in 0..dt {
                    x[k] = gate[k] * v[k] + (T::one() - gate[k]) * text[k];
                }
                z = Some(gate);
            }
            _ => x[..dt].copy_from_slice(text),
        }

        let mut h_feat = p.feat_b1.data.clone();
        let h = cfg.mlp_hidden;
        for &b in &q.buckets[i] {
            for r in 0..h {
                h_feat[r] += p.feat_w1.data[r * p.feat_w1.shape[1] + b];
            }
        }
        h_feat.iter_mut().for_each(|v| *v = v.tanh());
        matvec(&p.feat_w2.data, &h_feat, Some(&p.feat_b2.data), &mut x[dt..]);

        let dh = cfg.head_dim();
        let scale = T::one() / T::of_usize(dh).sqrt();
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for (bi, b) in p.blocks.iter().enumerate() {
            let mut cache = BlockCache {
                xhat1: vec![],
                inv1: T::zero(),
                y1: vec![],
                q: vec![],
                probs: vec![],
                attn: vec![],
                xhat2: vec![],
                inv2: T::zero(),
                y2: vec![],
                a1: vec![],
            };
            if cfg.attends() {
                let (xhat1, inv1, y1) = layer_norm(&x, &b.ln1_g.data, &b.ln1_b.data);
                let mut qv = vec![T::zero(); d];
                matvec(&b.wq.data, &y1, None, &mut qv);
                let mut attn = vec![T::zero(); d];
                let mut probs = Vec::with_capacity(cfg.n_heads);
                for head in 0..cfg.n_heads {
                    let span = head * dh..(head + 1) * dh;
                    let logits: Vec<T> = ctx.keys[bi]
                        .iter()
                        .map(|k| {
                            qv[span.clone()].iter().zip(&k[span.clone()]).map(|(&a, &b)| a * b).sum::<T>() * scale
                        })
                        .collect();
                    let pr = crate::scalar::softmax(&logits);
                    for (u, &pu) in pr.iter().enumerate() {
                        for k in span.clone() {
                            attn[k] += pu * ctx.values[bi][u][k];
                        }
                    }
                    probs.push(pr);
                }
                let mut out = vec![T::zero(); d];
                matvec(&b.wo.data, &attn, Some(&b.bo.data), &mut out);
                add_acc(&mut x, &out);
                cache.xhat1 = xhat1;
                cache.inv1 = inv1;
                cache.y1 = y1;
                cache.q = qv;
                cache.probs = probs;
                cache.attn = attn;
            }
            let (xhat2, inv2, y2) = layer_norm(&x, &b.ln2_g.data, &b.ln2_b.data);
            let mut a1 = vec![T::zero(); h];
            matvec(&b.m1.data, &y2, Some(&b.c1.data), &mut a1);
            a1.iter_mut().for_each(|v| *v = v.tanh());
            let mut out = vec![T::zero(); d];
            matvec(&b.m2.data, &a1, Some(&b.c2.data), &mut out);
            add_acc(&mut x, &out);
            cache.xhat2 = xhat2;
            cache.inv2 = inv2;
            cache.y2 = y2;
            cache.a1 = a1;
            blocks.push(cache);
        }

        let s = p.head_w.data.iter().zip(&x).map(|(&w, &v)| w * v).sum::<T>() + p.head_b.data[0];
        (s, ItemCache { z, h_feat, blocks, x_out: x })
    }

    #[allow(clippy::too_many_arguments)]
    fn item_backward(
        &self,
        ctx: &UserCtx<T>,
        q: &EncodedQuery<T>,
        i: usize,
        cache: &ItemCache<T>,
        ds: T,
        grad: &mut Params<T>,
        ug: &mut UserGrad<T>,
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let dt = cfg.text_dim;
        let text = &q.text[i];
        grad.head_b.data[0] += ds;

        if cfg.architecture == Architecture::HeadOnly {
            for (k, &t) in text.iter().enumerate() {
                grad.head_w.data[k] += ds * t;
            }
            for &b in &q.buckets[i] {
                grad.head_w.data[dt + b] += ds;
            }
            return;
        }

        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden;
        for (g, &x) in grad.head_w.data.iter_mut().zip(&cache.x_out) {
            *g += ds * x;
        }
        let mut dx: Vec<T> = p.head_w.data.iter().map(|&w| w * ds).collect();

        let dh = cfg.head_dim();
        let scale = T::one() / T::of_usize(dh).sqrt();
        for bi in (0..cfg.n_blocks).rev() {
            let b = &p.blocks[bi];
            let c = &cache.blocks[bi];
            let gb = &mut grad.blocks[bi];

            outer_acc(&mut gb.m2.data, &dx, &c.a1);
            add_acc(&mut gb.c2.data, &dx);
            let mut da = vec![T::zero(); h];
            matvec_t_acc(&b.m2.data, &dx, &mut da);
            for (g, &a) in da.iter_mut().zip(&c.a1) {
                *g *= T::one() - a * a;
            }
            outer_acc(&mut gb.m1.data, &da, &c.y2);
            add_acc(&mut gb.c1.data, &da);
            let mut dy2 = vec![T::zero(); d];
            matvec_t_acc(&b.m1.data, &da, &mut dy2);
            layer_norm_back(&dy2, &c.xhat2, c.inv2, &b.ln2_g.data, &mut dx, &mut gb.ln2_g.data, &mut gb.ln2_b.data);

            if cfg.attends() {
                outer_acc(&mut gb.wo.data, &dx, &c.attn);
                add_acc(&mut gb.bo.data, &dx);
                let mut dattn = vec![T::zero(); d];
                matvec_t_acc(&b.wo.data, &dx, &mut dattn);
                let mut dq = vec![T::zero(); d];
                for head in 0..cfg.n_heads {
                    let span = head * dh..(head + 1) * dh;
                    let pr = &c.probs[head];
                    let dp: Vec<T> = ctx.values[bi]
                        .iter()
                        .map(|v| dattn[span.clone()].iter().zip(&v[span.clone()]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let mean: T = pr.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for u in 0..pr.len() {
                        let dlogit = pr[u] * (dp[u] - mean) * scale;
                        for k in span.clone() {
                            ug.values[bi][u][k] += pr[u] * dattn[k];
                            dq[k] += dlogit * ctx.keys[bi][u][k];
                            ug.keys[bi][u][k] += dlogit * c.q[k];
                        }
                    }
                }
                outer_acc(&mut gb.wq.data, &dq, &c.y1);
                let mut dy1 = vec![T::zero(); d];
                matvec_t_acc(&b.wq.data, &dq, &mut dy1);
                layer_norm_back(&dy1, &c.xhat1, c.inv1, &b.ln1_g.data, &mut dx, &mut gb.ln1_g.data, &mut gb.ln1_b.data);
            }
        }

        let de_feat = &dx[dt..];
        outer_acc(&mut grad.feat_w2.data, de_feat, &cache.h_feat);
        add_acc(&mut grad.feat_b2.data, de_feat);
        let mut dhf = vec![T::zero(); h];
        matvec_t_acc(&p.feat_w2.data, de_feat, &mut dhf);
        for (g, &a) in dhf.iter_mut().zip(&cache.h_feat) {
            *g *= T::one() - a * a;
        }
        add_acc(&mut grad.feat_b1.data, &dhf);
        let bits = p.feat_w1.shape[1];
        for &bk in &q.buckets[i] {
            for r in 0..h {
                grad.feat_w1.data[r * bits + bk] += dhf[r];
            }
        }

        if let (Some(z), Some(v)) = (&cache.z, &q.visual[i]) {
            let mut dpre = vec![T::zero(); dt];
            for k in 0..dt {
                dpre[k] = dx[k] * (v[k] - text[k]) * z[k] * (T::one() - z[k]);
            }
            let cat: Vec<T> = v.iter().chain(text).copied().collect();
            outer_acc(&mut grad.gate_w.data, &dpre, &cat);
            add_acc(&mut grad.gate_b.data, &dpre);
        }
    }

    fn user_backward(&self, q: &EncodedQuery<T>, ctx: &UserCtx<T>, ug: &UserGrad<T>, grad: &mut Params<T>) {
        let cfg = &self.config;
        if !cfg.attends() {
            return;
        }
        let d = cfg.embed_dim;
        let p = &self.params;
        let mut dflat = vec![T::zero(); cfg.user_tokens * d];
        for (bi, b) in p.blocks.iter().enumerate() {
            let gb = &mut grad.blocks[bi];
            for (u, tok) in ctx.tokens.iter().enumerate() {
                let dt = &mut dflat[u * d..(u + 1) * d];
                outer_acc(&mut gb.wk.data, &ug.keys[bi][u], tok);
                matvec_t_acc(&b.wk.data, &ug.keys[bi][u], dt);
                outer_acc(&mut gb.wv.data, &ug.values[bi][u], tok);
                matvec_t_acc(&b.wv.data, &ug.values[bi][u], dt);
            }
        }
        outer_acc(&mut grad.user_w2.data, &dflat, &ctx.hidden);
        add_acc(&mut grad.user_b2.data, &dflat);
        let mut dh = vec![T::zero(); cfg.mlp_hidden];
        matvec_t_acc(&p.user_w2.data, &dflat, &mut dh);
        for (g, &a) in dh.iter_mut().zip(&ctx.hidden) {
            *g *= T::one() - a * a;
        }
        outer_acc(&mut grad.user_w1.data, &dh, &q.user);
        add_acc(&mut grad.user_b1.data, &dh);
    }

    pub fn forward_encoded(&self, q: &EncodedQuery<T>) -> Vec<T> {
        let ctx = self.user_ctx(&q.user);
        (0..q.len()).map(|i| self.item_forward(&ctx, q, i).0).collect()
    }

    /// Scores in candidate order.
    pub fn forward(&self, query: &Query) -> Result<Vec<T>> {
        Ok(self.forward_encoded(&self.encode(query)?))
    }

    /// Candidates by descending score, ascending item id on ties.
    pub fn score_page(&self, query: &Query) -> Result<RankedList<T>> {
        let scores = self.forward(query)?;
        Ok(RankedList::from_scores(
            query.query_id.clone(),
            query.candidates.iter().map(|c| c.item_id.clone()).zip(scores),
        ))
    }

    /// Adds `weight * d loss(scores) / d params` for one query to `grad` and
    /// returns the query loss.
    fn accumulate_query(
        &self,
        q: &EncodedQuery<T>,
        targets: &QueryTargets,
        loss_cfg: &LossConfig<T>,
        weight: T,
        grad: &mut Params<T>,
    ) -> Result<T> {
        let ctx = self.user_ctx(&q.user);
        let (scores, caches): (Vec<T>, Vec<ItemCache<T>>) =
            (0..q.len()).map(|i| self.item_forward(&ctx, q, i)).unzip();
        let (loss, dscores) = query_objective_grad(&scores, targets, loss_cfg)?;
        let zero_user = |ctx_part: &Vec<Vec<Vec<T>>>| -> Vec<Vec<Vec<T>>> {
            ctx_part.iter().map(|b| b.iter().map(|t| vec![T::zero(); t.len()]).collect()).collect()
        };
        let mut ug = UserGrad { keys: zero_user(&ctx.keys), values: zero_user(&ctx.values) };
        for (i, cache) in caches.iter().enumerate() {
            let ds = dscores[i] * weight;
            if ds != T::zero() {
                self.item_backward(&ctx, q, i, cache, ds, grad, &mut ug);
            }
        }
        self.user_backward(q, &ctx, &ug, grad);
        Ok(loss)
    }

    /// Mean objective over `batch` and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(&EncodedQuery<T>, &QueryTargets)],
        loss_cfg: &LossConfig<T>,
    ) -> Result<(T, Params<T>)> {
        let mut grad = self.params.zeros_like();
        if batch.is_empty() {
            return Ok((T::zero(), grad));
        }
        let w = T::one() / T::of_usize(batch.len());
        let mut loss = T::zero();
        for (q, t) in batch {
            loss += self.accumulate_query(q, t, loss_cfg, w, &mut grad)?;
        }
        Ok((loss * w, grad))
    }

    /// Mean objective over `batch` without gradients.
    pub fn loss(&self, batch: &[(&EncodedQuery<T>, &QueryTargets)], loss_cfg: &LossConfig<T>) -> Result<T> {
        if batch.is_empty() {
            return Ok(T::zero());
        }
        let mut total = T::zero();
        for (q, t) in batch {
            let scores = self.forward_encoded(q);
            total += query_objective_grad(&scores, t, loss_cfg)?.0;
        }
        Ok(total / T::of_usize(batch.len()))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let file = Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name,
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|x| x.as_f64()).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let file: Checkpoint = serde_json::from_reader(input)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::Argument(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut model = RerankerModel::<T>::new(file.config)?;
        let mut records: HashMap<String, TensorRecord> =
            file.tensors.into_iter().map(|r| (r.name.clone(), r)).collect();
        for (name, t) in model.params.named_mut() {
            let r = records
                .remove(&name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if r.shape != t.shape || r.data.len() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint shape {:?}, config shape {:?}",
                    r.shape, t.shape
                )));
            }
            t.data = r.data.iter().map(|&x| T::of(x)).collect();
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::Shape(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

/// Mini-batch gradient descent on `targets` (one entry per query of
/// `dataset`, in order).
pub fn train_with_targets<T: Scalar>(
    dataset: &Dataset,
    targets: &[QueryTargets],
    config: &ModelConfig,
    loss_cfg: &LossConfig<T>,
) -> Result<(RerankerModel<T>, TrainingLog)> {
    if targets.len() != dataset.queries.len() {
        return Err(Error::Argument(format!(
            "{} target sets for {} queries",
            targets.len(),
            dataset.queries.len()
        )));
    }
    loss_cfg.validate()?;
    let mut model = RerankerModel::<T>::new(config.clone())?;
    let encoded = dataset
        .queries
        .iter()
        .map(|q| model.encode(q))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<(&EncodedQuery<T>, &QueryTargets)> = encoded.iter().zip(targets).collect();

    let full_pass = |m: &RerankerModel<T>, epoch: usize| -> Result<f64> {
        let l = m.loss(&all, loss_cfg)?.as_f64();
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::Divergence { epoch, loss: l })
        }
    };
    let initial_loss = full_pass(&model, 0)?;
    let lr = T::of(config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..all.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = stream(config.seed, "train/shuffle", epoch as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut running = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_queries) {
            let batch: Vec<_> = chunk.iter().map(|&k| all[k]).collect();
            let (loss, grad) = model.loss_and_grad(&batch, loss_cfg)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            running += loss;
            batches += 1;
            let norm = grad.norm();
            let step = if config.grad_clip > 0.0 && norm > config.grad_clip {
                lr * T::of(config.grad_clip / norm)
            } else {
                lr
            };
            model.params.add_scaled(&grad, -step);
        }
        epoch_losses.push(if batches == 0 { 0.0 } else { running / batches as f64 });
    }
    let final_loss = full_pass(&model, config.epochs)?;
    if model.params.named().iter().any(|(_, t)| t.data.iter().any(|x| !x.is_finite())) {
        return Err(Error::Divergence { epoch: config.epochs, loss: final_loss });
    }
    Ok((model, TrainingLog { initial_loss, epoch_losses, final_loss }))
}

/// Trains on the supervision implied by `plan`.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    plan: &crate::annotate::AnnotationPlan,
    config: &ModelConfig,
    loss_cfg: &LossConfig<T>,
) -> Result<(RerankerModel<T>, TrainingLog)> {
    let targets: Vec<QueryTargets> = dataset
        .queries
        .iter()
        .map(|q| QueryTargets::build(q, plan, None))
        .collect();
    train_with_targets(dataset, &targets, config, loss_cfg)
}

/// Worst relative error between analytic and central-difference gradients
/// over sampled entries of every tensor.
pub fn grad_check(
    model: &RerankerModel<f64>,
    batch: &[(&EncodedQuery<f64>, &QueryTargets)],
    loss_cfg: &LossConfig<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Argument("grad_check step must be > 0".into()));
    }
    let (_, mut analytic) = model.loss_and_grad(batch, loss_cfg)?;
    for t in [&mut analytic.gate_w, &mut analytic.gate_b] {
        t.data.iter_mut().for_each(|g| *g *= opts.fusion_grad_scale);
    }
    let mut rng = stream(opts.seed, "grad_check", 0);
    let mut probe = model.clone();
    let mut per_tensor = Vec::new();
    let mut checked = 0;
    let names: Vec<String> = analytic.named().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let a_data = analytic.named()[ti].1.data.clone();
        let n = a_data.len();
        let picks = sample(&mut rng, n, opts.samples_per_tensor.min(n));
        let mut worst: f64 = 0.0;
        for k in picks {
            let orig = model.params.named()[ti].1.data[k];
            probe.params.named_mut()[ti].1.data[k] = orig + opts.step;
            let up = probe.loss(batch, loss_cfg)?;
            probe.params.named_mut()[ti].1.data[k] = orig - opts.step;
            let down = probe.loss(batch, loss_cfg)?;
            probe.params.named_mut()[ti].1.data[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = a_data[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
        per_tensor.push((name.clone(), worst));
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_tensor, entries_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::plan_top_p;
    use crate::datagen::{generate_dataset, SynthConfig};

    fn tiny() -> (Dataset, crate::datagen::LabelOracle) {
        let cfg = SynthConfig { n_queries: 6, ..SynthConfig::default() };
        generate_dataset(&cfg).unwrap()
    }

    fn small_config(d: &Dataset, arch: Architecture) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            embed_dim: d.embedding_dims.0 + 4,
            n_heads: 2,
            n_blocks: 2,
            mlp_hidden: 6,
            user_tokens: 3,
            ..ModelConfig::for_dataset(d, 4)
        }
    }

    #[test]
    fn bucket_cases() {
        let b = vec![vec![0.3, 0.7]];
        assert_eq!(bucketize_features(&[0.5], &b).unwrap(), [0, 1, 0]);
        assert_eq!(bucketize_features(&[0.3], &b).unwrap(), [0, 1, 0]);
        assert_eq!(bucketize_features(&[-1.0], &b).unwrap(), [1, 0, 0]);
        let two = vec![vec![0.0], vec![1.0, 2.0]];
        assert_eq!(bucketize_features(&[1.0, 5.0], &two).unwrap().len(), 5);
        assert!(matches!(bucketize_features(&[f64::NAN], &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn fusion_cases() {
        let w = Tensor::<f64>::zeros(&[2, 4]);
        let mut b = Tensor::<f64>::zeros(&[2]);
        let v = [1.0, -2.0];
        let t = [3.0, 0.0];
        assert_eq!(hybrid_fusion(Some(&v), &t, &w, &b).unwrap(), [2.0, -1.0]);
        b.data = vec![10.0, 10.0];
        let e = hybrid_fusion(Some(&v), &t, &w, &b).unwrap();
        assert!(e.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-3 * 3.0));
        assert_eq!(hybrid_fusion(None, &t, &w, &b).unwrap(), t);
        assert!(hybrid_fusion(Some(&[1.0]), &t, &w, &b).is_err());
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let (d, _) = tiny();
        let m = Reranker64::new(small_config(&d, Architecture::CrossAttention)).unwrap();
        let q = &d.queries[0];
        let s = m.forward(q).unwrap();
        let mut rev = q.clone();
        rev.candidates.reverse();
        let mut r = m.forward(&rev).unwrap();
        r.reverse();
        assert_eq!(s, r);
    }

    type Reranker64 = RerankerModel<f64>;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (d, _) = tiny();
        let m = Reranker64::new(small_config(&d, Architecture::CrossAttention)).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = Reranker64::load(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.save(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, oracle) = tiny();
        let plan = plan_top_p(&d, 0.5, &oracle).unwrap();
        for arch in [
            Architecture::CrossAttention,
            Architecture::CrossAttentionNoFusion,
            Architecture::Mlp,
            Architecture::HeadOnly,
        ] {
            let m = Reranker64::new(small_config(&d, arch)).unwrap();
            let enc: Vec<_> = d.queries.iter().map(|q| m.encode(q).unwrap()).collect();
            let targets: Vec<_> = d.queries.iter().map(|q| QueryTargets::build(q, &plan, None)).collect();
            let batch: Vec<_> = enc.iter().zip(&targets).collect();
            let cfg = LossConfig { distill_on_labeled: true, ..LossConfig::default() };
            let r = grad_check(&m, &batch, &cfg, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "{arch:?}: {:?}", r.per_tensor);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (d, oracle) = tiny();
        let plan = plan_top_p(&d, 0.5, &oracle).unwrap();
        let cfg = ModelConfig { learning_rate: 0.0, epochs: 2, ..small_config(&d, Architecture::CrossAttention) };
        let (m, log) = train::<f64>(&d, &plan, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(m.params, Reranker64::new(cfg).unwrap().params);
        assert_eq!(log.initial_loss, log.final_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let (d, oracle) = tiny();
        let plan = plan_top_p(&d, 0.5, &oracle).unwrap();
        let cfg = ModelConfig { epochs: 2, ..small_config(&d, Architecture::CrossAttention) };
        let a = train::<f64>(&d, &plan, &cfg, &LossConfig::default()).unwrap();
        let b = train::<f64>(&d, &plan, &cfg, &LossConfig::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn config_validation() {
        let (d, _) = tiny();
        let mut c = small_config(&d, Architecture::CrossAttention);
        c.n_heads = 3;
        assert!(matches!(RerankerModel::<f64>::new(c), Err(Error::Config { .. })));
    }
}
