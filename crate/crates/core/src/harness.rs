//! Config-driven experiments: percentile bands, budget sweep, iso-label
//! anchors and the attention ablation.
//!
//! Every (variant, seed) cell generates its seed's dataset, splits it 70/15/15
//! by query, annotates and trains on the training split and evaluates on the
//! test split. Cells run in parallel; each is deterministic on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{
    build_pairs, plan_anchors, plan_band, plan_queries, plan_random, plan_top_p, plan_unlabeled,
    AnnotationPlan,
};
use crate::datagen::{generate_dataset, LabelOracle, SynthConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::metrics::{evaluate, JudgedRun, MetricKind, MetricValue, MetricsReport};
use crate::model::{train_with_targets, Architecture, ModelConfig, RerankerModel, TrainingLog};
use crate::objectives::{LossConfig, Objective, QueryTargets};
use crate::seeding::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PercentileBands,
    BudgetSweep,
    Anchors,
    AblationAttention,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::PercentileBands,
        ExperimentKind::BudgetSweep,
        ExperimentKind::Anchors,
        ExperimentKind::AblationAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PercentileBands => "percentile-bands",
            ExperimentKind::BudgetSweep => "budget-sweep",
            ExperimentKind::Anchors => "anchors",
            ExperimentKind::AblationAttention => "ablation-attention",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown experiment kind {s:?}")))
    }
}

/// Which items a budget labels: the top of every queue, or whole queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Item,
    Query,
}

impl std::str::FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(Granularity::Item),
            "query" => Ok(Granularity::Query),
            other => Err(Error::config("experiment.granularity", format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Band {
    /// Queue positions `[floor(lo n), ceil(hi n))`.
    Range { name: String, lo: f64, hi: f64 },
    /// Uniform sample of a fraction of each queue.
    Random { name: String, fraction: f64 },
}

impl Band {
    pub fn name(&self) -> &str {
        match self {
            Band::Range { name, .. } | Band::Random { name, .. } => name,
        }
    }

    /// `name:lo:hi` or `name:random:fraction`.
    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("experiment.bands", format!("cannot parse band `{s}`"));
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        match parts.as_slice() {
            [name, "random", f] => Ok(Band::Random {
                name: name.to_string(),
                fraction: f.parse().map_err(|_| bad())?,
            }),
            [name, lo, hi] => Ok(Band::Range {
                name: name.to_string(),
                lo: lo.parse().map_err(|_| bad())?,
                hi: hi.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub synth: SynthConfig,
    pub loss: LossConfig<f64>,
    /// `model.*` override lines, applied to the defaults sized for each
    /// dataset.
    pub model: String,
    pub n_buckets: usize,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub bands: Vec<Band>,
    pub budgets: Vec<f64>,
    pub granularity: Granularity,
    /// `None` is unbounded.
    pub t_rounds: Vec<Option<usize>>,
    pub variants: Vec<Architecture>,
    pub f1_threshold: f64,
    pub config_hash: String,
}

fn parse_rounds(s: &str) -> Result<Option<usize>> {
    match s {
        "inf" | "unbounded" => Ok(None),
        n => n
            .parse()
            .map(Some)
            .map_err(|_| Error::config("experiment.t_rounds", format!("cannot parse `{n}`"))),
    }
}

impl ExperimentConfig {
    /// Defaults for `kind`, overridden by `cfg`. Unknown keys are errors.
    pub fn from_kv(kind: ExperimentKind, cfg: &KvConfig) -> Result<Self> {
        if let Some(k) = cfg.get::<ExperimentKind>("experiment.kind")? {
            if k != kind {
                return Err(Error::config(
                    "experiment.kind",
                    format!("config is for {}, requested {}", k.name(), kind.name()),
                ));
            }
        }
        let synth = SynthConfig::from_kv(cfg)?;
        let mut loss = LossConfig::<f64>::from_kv(cfg)?;
        let has = |key: &str| cfg.raw(key).is_some();
        match kind {
            ExperimentKind::PercentileBands | ExperimentKind::BudgetSweep => {
                if !has("loss.distill_on_labeled") {
                    loss.distill_on_labeled = true;
                }
            }
            ExperimentKind::Anchors => {
                if !has("loss.objective") {
                    loss.objective = Objective::Pairwise;
                }
                if !has("loss.pointwise_weight") {
                    loss.pointwise_weight = 1.0;
                }
            }
            ExperimentKind::AblationAttention => {}
        }
        loss.validate()?;

        let bands = match cfg.get_list::<String>("experiment.bands")? {
            Some(list) => list.iter().map(|s| Band::parse(s)).collect::<Result<Vec<_>>>()?,
            None => vec![
                Band::Range { name: "top30".into(), lo: 0.0, hi: 0.3 },
                Band::Range { name: "mid40".into(), lo: 0.3, hi: 0.7 },
                Band::Range { name: "tail30".into(), lo: 0.7, hi: 1.0 },
                Band::Random { name: "random30".into(), fraction: 0.3 },
            ],
        };
        let t_rounds = match cfg.get_list::<String>("experiment.t_rounds")? {
            Some(list) => list.iter().map(|s| parse_rounds(s)).collect::<Result<Vec<_>>>()?,
            None => vec![Some(1), Some(2), None],
        };
        let variants = cfg.get_list::<Architecture>("experiment.variants")?.unwrap_or_else(|| {
            vec![
                Architecture::CrossAttention,
                Architecture::CrossAttentionNoFusion,
                Architecture::Mlp,
            ]
        });
        // Model keys are applied per dataset; mark them consumed here.
        let model: String = cfg
            .canonical()
            .lines()
            .filter(|l| l.starts_with("model."))
            .map(|l| format!("{l}\n"))
            .collect();
        for line in model.lines() {
            if let Some((k, _)) = line.split_once(" = ") {
                cfg.raw(k);
            }
        }
        let out = ExperimentConfig {
            kind,
            synth,
            loss,
            model,
            n_buckets: 8,
            seeds: cfg.get_list("experiment.seeds")?.unwrap_or_else(|| vec![1, 2, 3]),
            k: cfg.get_or("experiment.k", 10)?,
            bands,
            budgets: cfg.get_list("experiment.budgets")?.unwrap_or_else(|| vec![0.1, 0.3, 1.0]),
            granularity: cfg.get_or("experiment.granularity", Granularity::Item)?,
            t_rounds,
            variants,
            f1_threshold: cfg.get_or("experiment.threshold", 0.5)?,
            config_hash: config_hash(kind, cfg),
        };
        cfg.finish()?;
        out.validate()?;
        Ok(out)
    }

    pub fn default_for(kind: ExperimentKind) -> Self {
        Self::from_kv(kind, &KvConfig::default()).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "must be nonempty"));
        }
        if self.k == 0 {
            return Err(Error::config("experiment.k", "must be >= 1"));
        }
        let grid_empty = match self.kind {
            ExperimentKind::PercentileBands => self.bands.is_empty(),
            ExperimentKind::BudgetSweep => self.budgets.is_empty(),
            ExperimentKind::Anchors => self.t_rounds.is_empty(),
            ExperimentKind::AblationAttention => self.variants.is_empty(),
        };
        if grid_empty {
            return Err(Error::config("experiment", "variant grid must be nonempty"));
        }
        if self.budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::config("experiment.budgets", "budgets must lie in (0, 1]"));
        }
        for band in &self.bands {
            let ok = match band {
                Band::Range { lo, hi, .. } => (0.0..=1.0).contains(lo) && (0.0..=1.0).contains(hi) && lo < hi,
                Band::Random { fraction, .. } => *fraction > 0.0 && *fraction <= 1.0,
            };
            if !ok {
                return Err(Error::config("experiment.bands", format!("invalid band `{}`", band.name())));
            }
        }
        Ok(())
    }
}

/// SHA-256 over the experiment kind and the canonical config text.
pub fn config_hash(kind: ExperimentKind, cfg: &KvConfig) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update(b"\n");
    h.update(cfg.canonical().as_bytes());
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Train/validation/test split of one seed's dataset.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub oracle: LabelOracle,
}

/// 70/15/15 split of a seeded shuffle of the queries.
pub fn split_dataset(dataset: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..dataset.queries.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut stream(seed, "split", 0));
    let n = idx.len();
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..(n_train + n_val).min(n)].to_vec();
    let mut test = idx[(n_train + n_val).min(n)..].to_vec();
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    (dataset.subset(&train), dataset.subset(&val), dataset.subset(&test))
}

pub fn prepare_seed(synth: &SynthConfig, seed: u64) -> Result<SplitData> {
    let cfg = SynthConfig { seed, ..synth.clone() };
    let (data, oracle) = generate_dataset(&cfg).map_err(|e| e.in_stage("generate"))?;
    let (train, validation, test) = split_dataset(&data, seed);
    Ok(SplitData { train, validation, test, oracle })
}

/// Outcome of one (variant, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub metrics: Vec<(String, Option<usize>, MetricValue)>,
    pub labeled_fraction: f64,
    pub oracle_calls: usize,
    pub train_queries: usize,
    pub log: TrainingLog,
}

impl CellResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(m, _, _)| m == name).map(|(_, _, v)| v.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    /// F1 decision threshold, for kinds that report F1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_threshold: Option<f64>,
    /// Variant → metric → mean over seeds.
    pub means: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ExperimentReport {
    pub fn mean(&self, variant: &str, metric: &str) -> Option<f64> {
        self.means.get(variant)?.get(metric).copied()
    }

    pub fn cell(&self, variant: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }

    /// Variant names in first-seen order.
    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.variant) {
                out.push(c.variant.clone());
            }
        }
        out
    }

    /// Per-cell rows then per-variant mean rows.
    pub fn to_metrics_report(&self) -> MetricsReport {
        let mut rep = MetricsReport::default();
        let mut push = |run_id: String, metric: &str, k: Option<usize>, v: MetricValue| {
            rep.rows.push(crate::metrics::MetricRow {
                run_id,
                metric: metric.to_owned(),
                k,
                value: v.value,
                n_queries: v.n_queries,
                n_excluded: v.n_excluded,
            });
        };
        for c in &self.cells {
            let run = format!("{}/seed={}", c.variant, c.seed);
            for (m, k, v) in &c.metrics {
                push(run.clone(), m, *k, *v);
            }
            let meta = |value: f64| MetricValue { value, n_queries: c.train_queries, n_excluded: 0 };
            push(run.clone(), "labeled_fraction", None, meta(c.labeled_fraction));
            push(run, "oracle_calls", None, meta(c.oracle_calls as f64));
        }
        for variant in self.variants() {
            let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.variant == variant).collect();
            let run = format!("{variant}/mean");
            for (m, k, _) in &cells[0].metrics {
                let vals: Vec<MetricValue> = cells
                    .iter()
                    .filter_map(|c| c.metrics.iter().find(|(n, _, _)| n == m).map(|x| x.2))
                    .collect();
                push(
                    run.clone(),
                    m,
                    *k,
                    MetricValue {
                        value: self.means[&variant][m],
                        n_queries: vals.iter().map(|v| v.n_queries).sum(),
                        n_excluded: vals.iter().map(|v| v.n_excluded).sum(),
                    },
                );
            }
            for m in ["labeled_fraction", "oracle_calls"] {
                let v = MetricValue { value: self.means[&variant][m], n_queries: cells.len(), n_excluded: 0 };
                push(run.clone(), m, None, v);
            }
        }
        rep
    }

    /// Writes `report.csv`, `summary.json` and `plot.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        self.to_metrics_report().write_csv(&mut csv)?;
        std::fs::write(dir.join("report.csv"), csv)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(dir.join("summary.json"), json)?;
        std::fs::write(dir.join("plot.svg"), bar_chart_svg(&self.to_metrics_report(), self.kind.name()))?;
        Ok(())
    }
}

fn summarize(kind: ExperimentKind, cfg: &ExperimentConfig, cells: Vec<CellResult>) -> ExperimentReport {
    let mut means: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for c in &cells {
        if !order.contains(&c.variant) {
            order.push(c.variant.clone());
        }
    }
    for variant in order {
        let group: Vec<&CellResult> = cells.iter().filter(|c| c.variant == variant).collect();
        let n = group.len() as f64;
        let entry = means.entry(variant).or_default();
        for (m, _, _) in &group[0].metrics {
            let total: f64 = group.iter().filter_map(|c| c.metric(m)).sum();
            entry.insert(m.clone(), total / n);
        }
        entry.insert("labeled_fraction".into(), group.iter().map(|c| c.labeled_fraction).sum::<f64>() / n);
        entry.insert("oracle_calls".into(), group.iter().map(|c| c.oracle_calls as f64).sum::<f64>() / n);
    }
    ExperimentReport {
        kind,
        config_hash: cfg.config_hash.clone(),
        seeds: cfg.seeds.clone(),
        cells,
        f1_threshold: (kind == ExperimentKind::Anchors).then_some(cfg.f1_threshold),
        means,
    }
}

struct CellSpec {
    variant: String,
    seed: u64,
    arch: Architecture,
    loss: LossConfig<f64>,
    supervision: Supervision,
    drop_unlabeled: bool,
}

enum Supervision {
    Plan(PlanKind),
    Anchors(Option<usize>),
}

#[derive(Clone, Copy)]
enum PlanKind {
    Band(f64, f64),
    Random(f64),
    TopP(f64),
    Queries(f64),
    Unlabeled,
}

fn metric_set(kind: ExperimentKind, k: usize) -> Vec<(MetricKind, Option<usize>)> {
    match kind {
        ExperimentKind::Anchors => vec![
            (MetricKind::F1, None),
            (MetricKind::Ndcg, Some(4)),
            (MetricKind::Pnr, None),
        ],
        _ => vec![
            (MetricKind::Mrr, Some(k)),
            (MetricKind::Map, Some(k)),
            (MetricKind::Ndcg, None),
        ],
    }
}

fn metric_label(kind: MetricKind, k: Option<usize>) -> String {
    match k {
        Some(k) => format!("{}@{k}", kind.name()),
        None => kind.name().to_owned(),
    }
}

fn run_cell(cfg: &ExperimentConfig, data: &SplitData, spec: &CellSpec) -> Result<CellResult> {
    let oracle = data.oracle.clone();
    oracle.reset_meter();
    let train = &data.train;
    let (plan, targets): (AnnotationPlan, Vec<QueryTargets>) = match &spec.supervision {
        Supervision::Plan(kind) => {
            let plan = match *kind {
                PlanKind::Band(lo, hi) => plan_band(train, lo, hi, &oracle),
                PlanKind::Random(p) => plan_random(train, p, spec.seed, &oracle),
                PlanKind::TopP(p) => plan_top_p(train, p, &oracle),
                PlanKind::Queries(p) => plan_queries(train, p, spec.seed, &oracle),
                PlanKind::Unlabeled => Ok(plan_unlabeled(train)),
            }
            .map_err(|e| e.in_stage("annotate"))?;
            let targets = train.queries.iter().map(|q| QueryTargets::build(q, &plan, None)).collect();
            (plan, targets)
        }
        Supervision::Anchors(t) => {
            let (plan, seqs) = plan_anchors(train, *t, &oracle).map_err(|e| e.in_stage("annotate"))?;
            let by_query: BTreeMap<&str, &crate::annotate::AlignedSequence> =
                seqs.iter().map(|s| (s.query_id.as_str(), s)).collect();
            let targets = train
                .queries
                .iter()
                .map(|q| match by_query.get(q.query_id.as_str()) {
                    Some(seq) => {
                        let (pairs, points) = build_pairs(seq);
                        QueryTargets::build(q, &plan, Some((&pairs, &points)))
                    }
                    None => QueryTargets::build(q, &plan, None),
                })
                .collect();
            (plan, targets)
        }
    };

    let (train_set, targets) = if spec.drop_unlabeled {
        let keep: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_labeled())
            .map(|(i, _)| i)
            .collect();
        let kept_targets = keep.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>();
        (train.subset(&keep), kept_targets)
    } else {
        (train.clone(), targets)
    };

    let mut model_cfg = ModelConfig::for_dataset(train, cfg.n_buckets);
    model_cfg.embed_dim = model_cfg.text_dim + 16;
    model_cfg.n_heads = 4;
    model_cfg.epochs = 30;
    let overrides = KvConfig::parse(&cfg.model).map_err(|e| e.in_stage("configure"))?;
    model_cfg = model_cfg.apply_kv(&overrides, train).map_err(|e| e.in_stage("configure"))?;
    model_cfg.seed = spec.seed;
    model_cfg.architecture = spec.arch;
    let (model, log) = train_with_targets::<f64>(&train_set, &targets, &model_cfg, &spec.loss)
        .map_err(|e| e.in_stage("train"))?;

    let metrics = evaluate_model(&model, &data.test, &metric_set(cfg.kind, cfg.k), cfg.f1_threshold)
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(CellResult {
        variant: spec.variant.clone(),
        seed: spec.seed,
        metrics,
        labeled_fraction: plan.labeled_fraction(),
        oracle_calls: oracle.calls(),
        train_queries: train_set.queries.len(),
        log,
    })
}

/// Scores every test query and evaluates the requested metrics.
pub fn evaluate_model(
    model: &RerankerModel<f64>,
    test: &Dataset,
    metrics: &[(MetricKind, Option<usize>)],
    threshold: f64,
) -> Result<Vec<(String, Option<usize>, MetricValue)>> {
    let lists = test
        .queries
        .iter()
        .map(|q| model.score_page(q))
        .collect::<Result<Vec<_>>>()?;
    let run = JudgedRun::from_dataset(test, lists)?.with_decision_threshold(threshold);
    metrics
        .iter()
        .map(|&(m, k)| Ok((metric_label(m, k), k, evaluate(&run, m, k)?)))
        .collect()
}

fn cells_for(cfg: &ExperimentConfig) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for &seed in &cfg.seeds {
        let cell = |variant: String, supervision, loss: LossConfig<f64>| CellSpec {
            variant,
            seed,
            arch: Architecture::CrossAttention,
            loss,
            supervision,
            drop_unlabeled: false,
        };
        match cfg.kind {
            ExperimentKind::PercentileBands => {
                for band in &cfg.bands {
                    let kind = match *band {
                        Band::Range { lo, hi, .. } => PlanKind::Band(lo, hi),
                        Band::Random { fraction, .. } => PlanKind::Random(fraction),
                    };
                    specs.push(cell(band.name().to_owned(), Supervision::Plan(kind), cfg.loss.clone()));
                }
            }
            ExperimentKind::BudgetSweep => {
                for &b in &cfg.budgets {
                    let kind = match cfg.granularity {
                        Granularity::Item => PlanKind::TopP(b),
                        Granularity::Query => PlanKind::Queries(b),
                    };
                    let sft_loss = LossConfig { alpha: 0.0, beta: 0.0, ..cfg.loss.clone() };
                    let mut sft = cell(format!("sft@{b}"), Supervision::Plan(kind), sft_loss);
                    sft.drop_unlabeled = true;
                    specs.push(sft);
                    specs.push(cell(format!("smar@{b}"), Supervision::Plan(kind), cfg.loss.clone()));
                }
                specs.push(cell("only-upstream".into(), Supervision::Plan(PlanKind::Unlabeled), cfg.loss.clone()));
            }
            ExperimentKind::Anchors => {
                for &t in &cfg.t_rounds {
                    let name = match t {
                        Some(t) => format!("t={t}"),
                        None => "t=inf".into(),
                    };
                    specs.push(cell(name, Supervision::Anchors(t), cfg.loss.clone()));
                }
            }
            ExperimentKind::AblationAttention => {
                for &arch in &cfg.variants {
                    let name = match arch {
                        Architecture::CrossAttention => "cross-attention",
                        Architecture::CrossAttentionNoFusion => "no-fusion",
                        Architecture::Mlp => "mlp",
                        Architecture::HeadOnly => "head-only",
                    };
                    let loss = LossConfig { distill_on_labeled: false, ..cfg.loss.clone() };
                    let mut c = cell(name.into(), Supervision::Plan(PlanKind::TopP(1.0)), loss);
                    c.arch = arch;
                    specs.push(c);
                }
            }
        }
    }
    specs
}

/// Runs every cell of `cfg` and aggregates the results.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data: BTreeMap<u64, SplitData> = cfg
        .seeds
        .par_iter()
        .map(|&s| Ok((s, prepare_seed(&cfg.synth, s)?)))
        .collect::<Result<_>>()?;
    let specs = cells_for(cfg);
    let cells = specs
        .par_iter()
        .map(|spec| run_cell(cfg, &data[&spec.seed], spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(cfg.kind, cfg, cells))
}

pub fn run_percentile_bands(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::PercentileBands)?;
    run_experiment(cfg)
}

pub fn run_budget_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::BudgetSweep)?;
    run_experiment(cfg)
}

pub fn run_anchor_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::Anchors)?;
    run_experiment(cfg)
}

pub fn run_attention_ablation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::AblationAttention)?;
    run_experiment(cfg)
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.kind == kind {
        Ok(())
    } else {
        Err(Error::Argument(format!("expected a {} config, got {}", kind.name(), cfg.kind.name())))
    }
}

/// Grouped bar chart of the `*/mean` rows of `report`, one group per
/// metric and one bar per variant.
pub fn bar_chart_svg(report: &MetricsReport, title: &str) -> String {
    let rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.run_id.ends_with("/mean") && r.metric != "oracle_calls")
        .collect();
    let mut metrics: Vec<&str> = Vec::new();
    let mut variants: Vec<&str> = Vec::new();
    for r in &rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        let v = r.run_id.trim_end_matches("/mean");
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];
    let bar = 18.0;
    let gap = 24.0;
    let group = bar * variants.len().max(1) as f64 + gap;
    let (left, top, height) = (50.0, 40.0, 240.0);
    let width = left + group * metrics.len().max(1) as f64 + 160.0;
    let max = rows.iter().map(|r| r.value).fold(1.0, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif" font-size="11">"#,
        top + height + 50.0
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="20" font-size="14">{title}</text>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{:.1}" y2="{}" stroke="black"/>"#,
        top + height,
        width - 150.0,
        top + height
    );
    for (mi, m) in metrics.iter().enumerate() {
        let x0 = left + gap / 2.0 + mi as f64 * group;
        for (vi, v) in variants.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.metric == *m && r.run_id.trim_end_matches("/mean") == *v) else {
                continue;
            };
            let h = (r.value / max).max(0.0) * height;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{}"><title>{v} {m} {:.4}</title></rect>"#,
                x0 + vi as f64 * bar,
                top + height - h,
                palette[vi % palette.len()],
                r.value
            );
        }
        let _ = writeln!(svg, r#"<text x="{x0:.1}" y="{:.1}">{m}</text>"#, top + height + 16.0);
    }
    for (vi, v) in variants.iter().enumerate() {
        let y = top + 14.0 * vi as f64;
        let x = width - 140.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{v}</text>"#,
            y - 9.0,
            palette[vi % palette.len()],
            x + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
