//! Training losses and their gradients with respect to item scores.
//!
//! Every per-query loss comes in a value form and a `*_grad` form returning
//! `(loss, d loss / d scores)`; the model backpropagates the latter.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotate::{pairs_from_plan, AnnotationPlan, PairSet, PairSource, PointSet};
use crate::dataset::{Grade, Query, MAX_GRADE};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::scalar::{log_add_exp, softmax, Scalar};

/// Which training objective a run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Label ListMLE plus weighted per-modality upstream ListMLE.
    Combined,
    /// Modality-weighted pairwise hinge, plus `pointwise_weight` times the
    /// squared error on pointwise targets.
    Pairwise,
    /// Pointwise squared error plus label and upstream hinges.
    Online,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Objective::Combined),
            "pairwise" => Ok(Objective::Pairwise),
            "online" => Ok(Objective::Online),
            other => Err(Error::config("loss.objective", format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<T> {
    pub objective: Objective,
    pub gamma: T,
    /// Per-modality pair weights.
    pub beta_m: BTreeMap<u32, T>,
    /// Weight for modalities missing from `beta_m`; `None` makes a missing
    /// weight an error.
    pub beta_m_default: Option<T>,
    /// Weight of label pairs whose items come from different modalities.
    pub beta_cross: T,
    /// Distillation weight of modalities carrying visual embeddings.
    pub alpha: T,
    /// Distillation weight of text-only modalities.
    pub beta: T,
    pub margin1: T,
    pub margin2: T,
    pub online_alpha: T,
    pub online_beta: T,
    pub normalize_listmle: bool,
    pub distill_on_labeled: bool,
    /// Weight of the pointwise term added to the pairwise objective.
    pub pointwise_weight: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            objective: Objective::Combined,
            gamma: T::of(0.1),
            beta_m: BTreeMap::new(),
            beta_m_default: Some(T::one()),
            beta_cross: T::one(),
            alpha: T::of(0.5),
            beta: T::of(0.5),
            margin1: T::of(0.1),
            margin2: T::of(0.1),
            online_alpha: T::of(0.5),
            online_beta: T::of(0.2),
            normalize_listmle: true,
            distill_on_labeled: false,
            pointwise_weight: T::zero(),
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    /// Reads `loss.*` keys, falling back to the defaults.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let real = |key: &str, default: T| -> Result<T> {
            Ok(cfg.get::<f64>(key)?.map(T::of).unwrap_or(default))
        };
        let mut beta_m = BTreeMap::new();
        for section in cfg.sections("loss.beta_m") {
            let id: u32 = section
                .parse()
                .map_err(|_| Error::config(format!("loss.beta_m.{section}"), "modality id must be an integer"))?;
            let w: f64 = cfg.get(&format!("loss.beta_m.{section}"))?.unwrap_or(1.0);
            beta_m.insert(id, T::of(w));
        }
        let config = LossConfig {
            objective: cfg.get("loss.objective")?.unwrap_or(d.objective),
            gamma: real("loss.gamma", d.gamma)?,
            beta_m,
            beta_m_default: d.beta_m_default,
            beta_cross: real("loss.beta_cross", d.beta_cross)?,
            alpha: real("loss.alpha", d.alpha)?,
            beta: real("loss.beta", d.beta)?,
            margin1: real("loss.margin1", d.margin1)?,
            margin2: real("loss.margin2", d.margin2)?,
            online_alpha: real("loss.online_alpha", d.online_alpha)?,
            online_beta: real("loss.online_beta", d.online_beta)?,
            normalize_listmle: cfg.get("loss.normalize_listmle")?.unwrap_or(d.normalize_listmle),
            distill_on_labeled: cfg.get("loss.distill_on_labeled")?.unwrap_or(d.distill_on_labeled),
            pointwise_weight: real("loss.pointwise_weight", d.pointwise_weight)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: T| v.is_finite() && v >= T::zero();
        if !(self.gamma.is_finite() && self.gamma > T::zero()) {
            return Err(Error::config("loss.gamma", "must be finite and > 0"));
        }
        for (name, v) in [
            ("loss.beta_cross", self.beta_cross),
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.online_alpha", self.online_alpha),
            ("loss.online_beta", self.online_beta),
            ("loss.pointwise_weight", self.pointwise_weight),
        ] {
            if !ok(v) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        for (name, v) in [("loss.margin1", self.margin1), ("loss.margin2", self.margin2)] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(Error::config(name, "must be finite and > 0"));
            }
        }
        for (m, &w) in &self.beta_m {
            if !ok(w) {
                return Err(Error::config(format!("loss.beta_m.{m}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    fn pair_weight(&self, modality: Option<u32>) -> Result<T> {
        match modality {
            None => Ok(self.beta_cross),
            Some(m) => self
                .beta_m
                .get(&m)
                .copied()
                .or(self.beta_m_default)
                .ok_or_else(|| Error::config(format!("loss.beta_m.{m}"), "no weight for modality")),
        }
    }
}

/// `y * max(0, gamma - (s_i - s_j))`.
pub fn pairwise_hinge<T: Scalar>(s_i: T, s_j: T, y: bool, gamma: T) -> T {
    pairwise_hinge_grad(s_i, s_j, y, gamma).0
}

/// Hinge value and its derivatives with respect to `s_i` and `s_j`. The
/// subgradient at the kink is 0.
pub fn pairwise_hinge_grad<T: Scalar>(s_i: T, s_j: T, y: bool, gamma: T) -> (T, T, T) {
    let slack = gamma - (s_i - s_j);
    if !y || slack <= T::zero() {
        (T::zero(), T::zero(), T::zero())
    } else {
        (slack, -T::one(), T::one())
    }
}

/// A preference between two score positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub pos: usize,
    pub neg: usize,
    pub source: PairSource,
    /// Shared modality, `None` for a cross-modality pair.
    pub modality: Option<u32>,
}

/// `Σ_m β_m · mean_m(hinge)` over pairs grouped by modality.
pub fn modality_weighted_pairwise<T: Scalar>(
    pairs: &[ScorePair],
    scores: &[T],
    cfg: &LossConfig<T>,
) -> Result<T> {
    Ok(modality_weighted_pairwise_grad(pairs, scores, cfg)?.0)
}

pub fn modality_weighted_pairwise_grad<T: Scalar>(
    pairs: &[ScorePair],
    scores: &[T],
    cfg: &LossConfig<T>,
) -> Result<(T, Vec<T>)> {
    let mut groups: BTreeMap<Option<u32>, Vec<&ScorePair>> = BTreeMap::new();
    for p in pairs {
        groups.entry(p.modality).or_default().push(p);
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    for (modality, group) in groups {
        let w = cfg.pair_weight(modality)?;
        let scale = w / T::of_usize(group.len());
        for p in group {
            let (l, gi, gj) = pairwise_hinge_grad(scores[p.pos], scores[p.neg], true, cfg.gamma);
            loss += scale * l;
            grad[p.pos] += scale * gi;
            grad[p.neg] += scale * gj;
        }
    }
    Ok((loss, grad))
}

fn check_finite<T: Scalar>(name: &str, xs: &[T]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains a non-finite score")))
    }
}

/// `KL(softmax(g) || softmax(f))`.
pub fn listwise_kl<T: Scalar>(g: &[T], f: &[T]) -> Result<T> {
    Ok(listwise_kl_grad(g, f)?.0)
}

/// KL value and its gradient with respect to `f`, `softmax(f) - softmax(g)`.
pub fn listwise_kl_grad<T: Scalar>(g: &[T], f: &[T]) -> Result<(T, Vec<T>)> {
    if g.is_empty() || g.len() != f.len() {
        return Err(Error::Shape(format!(
            "listwise KL needs equal nonempty lists, got {} and {}",
            g.len(),
            f.len()
        )));
    }
    check_finite("upstream list", g)?;
    check_finite("model list", f)?;
    let lg = log_softmax(g);
    let lf = log_softmax(f);
    let p = softmax(g);
    let q = softmax(f);
    let loss: T = p
        .iter()
        .zip(lg.iter().zip(&lf))
        .map(|(&pi, (&a, &b))| if pi > T::zero() { pi * (a - b) } else { T::zero() })
        .sum();
    let grad = q.iter().zip(&p).map(|(&qi, &pi)| qi - pi).collect();
    Ok((loss.max(T::zero()), grad))
}

fn log_softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let lse = crate::scalar::log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

/// Plackett-Luce negative log-likelihood of `ordered` (scores listed in
/// target order), optionally divided by the list length.
pub fn list_mle<T: Scalar>(ordered: &[T], normalize: bool) -> T {
    list_mle_grad(ordered, normalize).0
}

/// `dL/ds_i = -1 + Σ_{k<=i} exp(s_i - lse(s_k..))`.
pub fn list_mle_grad<T: Scalar>(ordered: &[T], normalize: bool) -> (T, Vec<T>) {
    let n = ordered.len();
    if n == 0 {
        return (T::zero(), Vec::new());
    }
    let mut suffix = vec![T::neg_infinity(); n];
    let mut acc = T::neg_infinity();
    for k in (0..n).rev() {
        acc = log_add_exp(acc, ordered[k]);
        suffix[k] = acc;
    }
    let mut loss = T::zero();
    for k in 0..n {
        loss += suffix[k] - ordered[k];
    }
    // Σ_{k<=i} exp(-lse_k), accumulated as a log to stay finite.
    let mut grad = Vec::with_capacity(n);
    let mut log_prefix = T::neg_infinity();
    for i in 0..n {
        log_prefix = log_add_exp(log_prefix, -suffix[i]);
        grad.push((ordered[i] + log_prefix).exp() - T::one());
    }
    let scale = if normalize { T::one() / T::of_usize(n) } else { T::one() };
    if normalize {
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    ((loss * scale).max(T::zero()), grad)
}

/// One modality's candidate positions in upstream order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityOrder {
    pub modality: u32,
    /// Whether the modality carries visual embeddings (weighted by `alpha`).
    pub visual: bool,
    pub order: Vec<usize>,
}

/// Everything the objectives need to know about one query besides its
/// scores. Positions index the query's candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTargets {
    pub query_id: String,
    /// Labeled positions by grade descending, item id ascending on ties.
    pub label_order: Option<Vec<usize>>,
    pub upstream_orders: Vec<ModalityOrder>,
    pub pairs: Vec<ScorePair>,
    /// Pointwise targets `grade / 4`.
    pub points: Vec<(usize, f64)>,
}

impl QueryTargets {
    /// Targets under `plan`. Pair supervision defaults to the plan's labels
    /// and modality queues unless an explicit pair/point set is given.
    pub fn build(query: &Query, plan: &AnnotationPlan, supervision: Option<(&PairSet, &PointSet)>) -> Self {
        let index: HashMap<&str, usize> = query
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| (c.item_id.as_str(), k))
            .collect();

        let mut labeled: Vec<(usize, Grade)> = query
            .candidates
            .iter()
            .enumerate()
            .filter_map(|(k, c)| plan.grade(&query.query_id, &c.item_id).map(|g| (k, g)))
            .collect();
        labeled.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| query.candidates[a.0].item_id.cmp(&query.candidates[b.0].item_id))
        });
        let label_order = (!labeled.is_empty()).then(|| labeled.iter().map(|&(k, _)| k).collect());

        let upstream_orders = query
            .modality_ids()
            .into_iter()
            .map(|m| {
                let queue = query.modality_queue(m);
                ModalityOrder {
                    modality: m,
                    visual: queue.iter().any(|c| !c.is_text_only()),
                    order: queue.iter().map(|c| index[c.item_id.as_str()]).collect(),
                }
            })
            .collect();

        let owned;
        let (pair_set, point_set) = match supervision {
            Some(s) => s,
            None => {
                owned = pairs_from_plan(query, plan);
                (&owned.0, &owned.1)
            }
        };
        let pairs = pair_set
            .iter()
            .filter_map(|p| {
                Some(ScorePair {
                    pos: *index.get(p.winner.as_str())?,
                    neg: *index.get(p.loser.as_str())?,
                    source: p.source,
                    modality: p.modality,
                })
            })
            .collect();
        let points = point_set
            .iter()
            .filter_map(|(id, g)| Some((*index.get(id.as_str())?, *g as f64 / MAX_GRADE as f64)))
            .collect();

        QueryTargets {
            query_id: query.query_id.clone(),
            label_order,
            upstream_orders,
            pairs,
            points,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.label_order.is_some()
    }
}

fn gather<T: Scalar>(scores: &[T], order: &[usize]) -> Vec<T> {
    order.iter().map(|&k| scores[k]).collect()
}

fn scatter_add<T: Scalar>(grad: &mut [T], order: &[usize], part: &[T], w: T) {
    for (&k, &g) in order.iter().zip(part) {
        grad[k] += w * g;
    }
}

/// Per-query combined objective: label ListMLE when the query has labels,
/// plus `alpha`/`beta` weighted ListMLE of each modality's upstream order
/// when the query is unlabeled or `distill_on_labeled` is set.
pub fn combined_query_grad<T: Scalar>(
    scores: &[T],
    targets: &QueryTargets,
    cfg: &LossConfig<T>,
) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    if let Some(order) = &targets.label_order {
        let (l, g) = list_mle_grad(&gather(scores, order), cfg.normalize_listmle);
        loss += l;
        scatter_add(&mut grad, order, &g, T::one());
    }
    if !targets.is_labeled() || cfg.distill_on_labeled {
        for m in &targets.upstream_orders {
            let w = if m.visual { cfg.alpha } else { cfg.beta };
            if w == T::zero() {
                continue;
            }
            let (l, g) = list_mle_grad(&gather(scores, &m.order), cfg.normalize_listmle);
            loss += w * l;
            scatter_add(&mut grad, &m.order, &g, w);
        }
    }
    (loss, grad)
}

/// Pointwise squared error against `grade / 4`, plus `online_alpha` times the
/// mean `margin1` hinge over label pairs and `online_beta` times the mean
/// `margin2` hinge over upstream pairs.
pub fn online_composite<T: Scalar>(
    points: &[(T, T)],
    label_pairs: &[(T, T)],
    upstream_pairs: &[(T, T)],
    cfg: &LossConfig<T>,
) -> T {
    let mean = |xs: &mut dyn Iterator<Item = T>, n: usize| {
        if n == 0 {
            T::zero()
        } else {
            xs.sum::<T>() / T::of_usize(n)
        }
    };
    let hinge = |&(p, n): &(T, T), m: T| pairwise_hinge(p, n, true, m);
    mean(&mut points.iter().map(|&(p, t)| (p - t) * (p - t)), points.len())
        + cfg.online_alpha
            * mean(&mut label_pairs.iter().map(|x| hinge(x, cfg.margin1)), label_pairs.len())
        + cfg.online_beta
            * mean(&mut upstream_pairs.iter().map(|x| hinge(x, cfg.margin2)), upstream_pairs.len())
}

/// Adds `weight * mean squared error` over `points` to `grad`; returns the
/// weighted term.
fn pointwise_acc<T: Scalar>(scores: &[T], points: &[(usize, f64)], weight: T, grad: &mut [T]) -> T {
    if points.is_empty() || weight == T::zero() {
        return T::zero();
    }
    let scale = weight / T::of_usize(points.len());
    let mut loss = T::zero();
    for &(k, t) in points {
        let d = scores[k] - T::of(t);
        loss += scale * d * d;
        grad[k] += scale * (d + d);
    }
    loss
}

pub fn online_query_grad<T: Scalar>(
    scores: &[T],
    targets: &QueryTargets,
    cfg: &LossConfig<T>,
) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); scores.len()];
    let mut loss = pointwise_acc(scores, &targets.points, T::one(), &mut grad);
    for (source, weight, margin) in [
        (PairSource::Label, cfg.online_alpha, cfg.margin1),
        (PairSource::Upstream, cfg.online_beta, cfg.margin2),
    ] {
        let pairs: Vec<&ScorePair> = targets.pairs.iter().filter(|p| p.source == source).collect();
        if pairs.is_empty() {
            continue;
        }
        let scale = weight / T::of_usize(pairs.len());
        for p in pairs {
            let (l, gi, gj) = pairwise_hinge_grad(scores[p.pos], scores[p.neg], true, margin);
            loss += scale * l;
            grad[p.pos] += scale * gi;
            grad[p.neg] += scale * gj;
        }
    }
    (loss, grad)
}

/// The configured objective for one query.
pub fn query_objective_grad<T: Scalar>(
    scores: &[T],
    targets: &QueryTargets,
    cfg: &LossConfig<T>,
) -> Result<(T, Vec<T>)> {
    match cfg.objective {
        Objective::Combined => Ok(combined_query_grad(scores, targets, cfg)),
        Objective::Pairwise => {
            let (l, mut g) = modality_weighted_pairwise_grad(&targets.pairs, scores, cfg)?;
            let p = pointwise_acc(scores, &targets.points, cfg.pointwise_weight, &mut g);
            Ok((l + p, g))
        }
        Objective::Online => Ok(online_query_grad(scores, targets, cfg)),
    }
}

/// Scores of one query with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySupervision<T> {
    pub scores: Vec<T>,
    pub targets: QueryTargets,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupervisionBatch<T> {
    pub queries: Vec<QuerySupervision<T>>,
}

/// Batch mean of the combined objective.
pub fn combined_objective<T: Scalar>(batch: &SupervisionBatch<T>, cfg: &LossConfig<T>) -> T {
    if batch.queries.is_empty() {
        return T::zero();
    }
    let total: T = batch
        .queries
        .iter()
        .map(|q| combined_query_grad(&q.scores, &q.targets, cfg).0)
        .sum();
    total / T::of_usize(batch.queries.len())
}

/// Batch mean of the configured objective with per-query score gradients.
pub fn batch_objective_grad<T: Scalar>(
    batch: &SupervisionBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<(T, Vec<Vec<T>>)> {
    let n = batch.queries.len();
    if n == 0 {
        return Ok((T::zero(), Vec::new()));
    }
    let scale = T::one() / T::of_usize(n);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(n);
    for q in &batch.queries {
        let (l, mut g) = query_objective_grad(&q.scores, &q.targets, cfg)?;
        loss += l;
        g.iter_mut().for_each(|x| *x *= scale);
        grads.push(g);
    }
    Ok((loss * scale, grads))
}
