//! Offline evaluation metrics and entropy-based feature ranking.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Grade, RankedList};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A ranked list with the ground-truth grade of every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedQuery<T> {
    pub list: RankedList<T>,
    /// Grades aligned with `list.entries`.
    pub grades: Vec<Grade>,
}

impl<T> JudgedQuery<T> {
    fn relevant(&self, threshold: Grade) -> impl Iterator<Item = bool> + '_ {
        self.grades.iter().map(move |&g| g >= threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedRun<T> {
    pub queries: Vec<JudgedQuery<T>>,
    /// Grades at or above this count as relevant for binary metrics.
    pub relevance_threshold: Grade,
    /// Score at or above which an item is returned, for F1.
    pub decision_threshold: Option<T>,
}

impl<T: Scalar> JudgedRun<T> {
    pub fn new(queries: Vec<JudgedQuery<T>>) -> Self {
        JudgedRun {
            queries,
            relevance_threshold: 2,
            decision_threshold: None,
        }
    }

    pub fn with_decision_threshold(mut self, tau: T) -> Self {
        self.decision_threshold = Some(tau);
        self
    }

    /// Judges `lists` against the labels stored in `dataset`.
    pub fn from_dataset(dataset: &Dataset, lists: Vec<RankedList<T>>) -> Result<Self> {
        let mut queries = Vec::with_capacity(lists.len());
        for list in lists {
            let q = dataset.query(&list.query_id).ok_or_else(|| Error::Lookup {
                query_id: list.query_id.clone(),
                item_id: String::new(),
            })?;
            let grades = list
                .entries
                .iter()
                .map(|e| {
                    q.candidate(&e.item_id)
                        .and_then(|c| c.grade())
                        .ok_or_else(|| Error::Lookup {
                            query_id: list.query_id.clone(),
                            item_id: e.item_id.clone(),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            queries.push(JudgedQuery { list, grades });
        }
        Ok(JudgedRun::new(queries))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Reciprocal rank of the first relevant item within the top `k`.
pub fn mrr_at_k<T: Scalar>(run: &JudgedRun<T>, k: usize) -> f64 {
    mean(run.queries.iter().map(|q| {
        q.relevant(run.relevance_threshold)
            .take(k)
            .position(|r| r)
            .map_or(0.0, |p| 1.0 / (p + 1) as f64)
    }))
}

/// Average precision at `k`, normalized by the relevant count within the
/// top `k`; queries without a relevant item there contribute 0.
pub fn map_at_k<T: Scalar>(run: &JudgedRun<T>, k: usize) -> f64 {
    mean(run.queries.iter().map(|q| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (j, rel) in q.relevant(run.relevance_threshold).take(k).enumerate() {
            if rel {
                hits += 1;
                sum += hits as f64 / (j + 1) as f64;
            }
        }
        if hits == 0 {
            0.0
        } else {
            sum / hits as f64
        }
    }))
}

fn dcg(grades: impl Iterator<Item = Grade>) -> f64 {
    grades
        .enumerate()
        .map(|(j, g)| (2f64.powi(g as i32) - 1.0) / ((j + 2) as f64).log2())
        .sum()
}

/// NDCG of one graded ordering, optionally cut at `k`; 0 when the ideal DCG
/// is 0.
pub fn ndcg_of(grades: &[Grade], k: Option<usize>) -> f64 {
    let k = k.unwrap_or(grades.len());
    let mut ideal = grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if idcg == 0.0 {
        0.0
    } else {
        dcg(grades.iter().copied().take(k)) / idcg
    }
}

pub fn ndcg<T: Scalar>(run: &JudgedRun<T>, k: Option<usize>) -> f64 {
    mean(run.queries.iter().map(|q| ndcg_of(&q.grades, k)))
}

/// Macro F1 over queries with at least one relevant item.
pub fn f1_macro<T: Scalar>(run: &JudgedRun<T>) -> Result<MetricValue> {
    let tau = run.decision_threshold.ok_or_else(|| {
        Error::config("metrics.threshold", "F1 needs an explicit decision threshold")
    })?;
    let mut scores = Vec::new();
    for q in &run.queries {
        let mut returned = 0usize;
        let mut relevant = 0usize;
        let mut both = 0usize;
        for (e, rel) in q.list.entries.iter().zip(q.relevant(run.relevance_threshold)) {
            let ret = e.score >= tau;
            returned += ret as usize;
            relevant += rel as usize;
            both += (ret && rel) as usize;
        }
        if relevant == 0 {
            continue;
        }
        let p = if returned == 0 { 0.0 } else { both as f64 / returned as f64 };
        let r = both as f64 / relevant as f64;
        scores.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("F1: no query has a relevant item".into()));
    }
    Ok(MetricValue {
        value: mean(scores.iter().copied()),
        n_queries: scores.len(),
        n_excluded: run.queries.len() - scores.len(),
    })
}

/// Per-query concordant and discordant counts over label-unequal pairs,
/// ignoring score ties.
pub fn concordance<T: Scalar>(grades: &[Grade], scores: &[T]) -> (usize, usize) {
    let (mut c, mut d) = (0, 0);
    for i in 0..grades.len() {
        for j in i + 1..grades.len() {
            if grades[i] == grades[j] || scores[i] == scores[j] {
                continue;
            }
            if (grades[i] > grades[j]) == (scores[i] > scores[j]) {
                c += 1;
            } else {
                d += 1;
            }
        }
    }
    (c, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnrValue {
    pub value: f64,
    pub n_used: usize,
    /// Queries with concordant pairs but no discordant one.
    pub n_infinite: usize,
    /// Queries with no usable pair.
    pub n_pairless: usize,
}

/// Macro-averaged positive-negative ratio.
pub fn pnr<T: Scalar>(run: &JudgedRun<T>) -> Result<PnrValue> {
    let mut ratios = Vec::new();
    let (mut inf, mut none) = (0, 0);
    for q in &run.queries {
        let scores: Vec<T> = q.list.entries.iter().map(|e| e.score).collect();
        match concordance(&q.grades, &scores) {
            (0, 0) => none += 1,
            (_, 0) => inf += 1,
            (c, d) => ratios.push(c as f64 / d as f64),
        }
    }
    if ratios.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "PNR: no query with discordant pairs ({inf} infinite, {none} pairless)"
        )));
    }
    Ok(PnrValue {
        value: mean(ratios.iter().copied()),
        n_used: ratios.len(),
        n_infinite: inf,
        n_pairless: none,
    })
}

/// `(good - bad) / (2 (good + bad + same))`.
pub fn delta_gsb(good: usize, bad: usize, same: usize) -> Result<f64> {
    let total = good + bad + same;
    if total == 0 {
        return Err(Error::Argument("GSB counts are all zero".into()));
    }
    Ok((good as f64 - bad as f64) / (2.0 * total as f64))
}

/// Base-2 entropy of a histogram of `values` over `bins` equal-width bins.
pub fn binned_entropy(values: &[f64], bins: usize) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo)) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Item features by descending binned entropy, ties by feature index.
pub fn entropy_rank_features(dataset: &Dataset, bins: usize) -> Result<Vec<(usize, f64)>> {
    if bins < 2 {
        return Err(Error::Argument("entropy ranking needs at least 2 bins".into()));
    }
    let dim = dataset.feature_dims.0;
    let columns: Vec<Vec<f64>> = (0..dim)
        .map(|f| {
            dataset
                .queries
                .iter()
                .flat_map(|q| q.candidates.iter().map(move |c| c.features[f]))
                .collect()
        })
        .collect();
    Ok(rank_by_entropy(&columns, bins))
}

pub fn rank_by_entropy(columns: &[Vec<f64>], bins: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = columns
        .iter()
        .enumerate()
        .map(|(f, col)| (f, binned_entropy(col, bins)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mrr,
    Map,
    Ndcg,
    F1,
    Pnr,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mrr => "mrr",
            MetricKind::Map => "map",
            MetricKind::Ndcg => "ndcg",
            MetricKind::F1 => "f1",
            MetricKind::Pnr => "pnr",
        }
    }

    /// Whether the metric takes a cutoff.
    pub fn uses_k(self) -> bool {
        matches!(self, MetricKind::Mrr | MetricKind::Map | MetricKind::Ndcg)
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mrr" => Ok(MetricKind::Mrr),
            "map" => Ok(MetricKind::Map),
            "ndcg" => Ok(MetricKind::Ndcg),
            "f1" => Ok(MetricKind::F1),
            "pnr" => Ok(MetricKind::Pnr),
            other => Err(Error::Argument(format!("unknown metric {other:?}"))),
        }
    }
}

/// One metric at one cutoff. `k = None` means no cutoff.
pub fn evaluate<T: Scalar>(run: &JudgedRun<T>, kind: MetricKind, k: Option<usize>) -> Result<MetricValue> {
    let n = run.queries.len();
    let all = |value| MetricValue { value, n_queries: n, n_excluded: 0 };
    let need_k = || k.ok_or_else(|| Error::Argument(format!("{} needs a cutoff k", kind.name())));
    match kind {
        MetricKind::Mrr => Ok(all(mrr_at_k(run, need_k()?))),
        MetricKind::Map => Ok(all(map_at_k(run, need_k()?))),
        MetricKind::Ndcg => Ok(all(ndcg(run, k))),
        MetricKind::F1 => f1_macro(run),
        MetricKind::Pnr => {
            let p = pnr(run)?;
            Ok(MetricValue {
                value: p.value,
                n_queries: p.n_used,
                n_excluded: p.n_infinite + p.n_pairless,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

/// Rows of `run_id, metric, k, value, n_queries, n_excluded`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, run_id: &str, kind: MetricKind, k: Option<usize>, v: MetricValue) {
        self.rows.push(MetricRow {
            run_id: run_id.to_owned(),
            metric: kind.name().to_owned(),
            k,
            value: v.value,
            n_queries: v.n_queries,
            n_excluded: v.n_excluded,
        });
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, run_id: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.run_id == run_id && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run_id", "metric", "k", "value", "n_queries", "n_excluded"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.run_id.clone(),
                r.metric.clone(),
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                format!("{:.6}", r.value),
                r.n_queries.to_string(),
                r.n_excluded.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for (idx, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::Parse {
                line: idx + 2,
                message: format!("bad {what}"),
            };
            let field = |i: usize| rec.get(i).ok_or_else(|| bad("column count"));
            let k = field(2)?;
            rows.push(MetricRow {
                run_id: field(0)?.to_owned(),
                metric: field(1)?.to_owned(),
                k: if k.is_empty() { None } else { Some(k.parse().map_err(|_| bad("k"))?) },
                value: field(3)?.parse().map_err(|_| bad("value"))?,
                n_queries: field(4)?.parse().map_err(|_| bad("n_queries"))?,
                n_excluded: field(5)?.parse().map_err(|_| bad("n_excluded"))?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(grades: &[Grade]) -> JudgedQuery<f64> {
        let n = grades.len();
        JudgedQuery {
            list: RankedList::from_scores(
                "q",
                (0..n).map(|j| (format!("i{j:02}"), (n - j) as f64)),
            ),
            grades: grades.to_vec(),
        }
    }

    fn run(lists: &[&[Grade]]) -> JudgedRun<f64> {
        JudgedRun::new(lists.iter().map(|g| judged(g)).collect())
    }

    #[test]
    fn mrr_cases() {
        assert!((mrr_at_k(&run(&[&[0, 0, 3]]), 10) - 1.0 / 3.0).abs() < 1e-15);
        let mut late = vec![0; 10];
        late.push(4);
        assert_eq!(mrr_at_k(&run(&[&late]), 10), 0.0);
        assert_eq!(mrr_at_k(&run(&[&[2], &[0, 2]]), 10), 0.75);
    }

    #[test]
    fn map_cases() {
        assert!((map_at_k(&run(&[&[2, 0, 3]]), 3) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(map_at_k(&run(&[&[2, 3, 4]]), 3), 1.0);
        assert_eq!(map_at_k(&run(&[&[0, 1, 0, 4]]), 3), 0.0);
    }

    #[test]
    fn ndcg_cases() {
        assert_eq!(ndcg_of(&[3, 0], None), 1.0);
        assert!((ndcg_of(&[0, 3], None) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_of(&[0, 0], None), 0.0);
        assert_eq!(ndcg_of(&[0, 3], Some(1)), 0.0);
    }

    #[test]
    fn f1_cases() {
        // Returned {a,b,c}; relevant {a,d}.
        let q = JudgedQuery {
            list: RankedList::from_scores("q", [("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.1)]),
            grades: vec![3, 0, 1, 2],
        };
        let r = JudgedRun::new(vec![q]).with_decision_threshold(0.5);
        assert!((f1_macro(&r).unwrap().value - 0.4).abs() < 1e-15);
        let none_returned = run(&[&[3, 0]]).with_decision_threshold(100.0);
        assert_eq!(f1_macro(&none_returned).unwrap().value, 0.0);
        assert!(f1_macro(&run(&[&[3]])).is_err());
        assert!(matches!(
            f1_macro(&run(&[&[0, 1]]).with_decision_threshold(0.0)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pnr_cases() {
        assert_eq!(concordance(&[2, 1, 0], &[0.9, 0.2, 0.5]), (2, 1));
        let q = JudgedQuery {
            list: RankedList {
                query_id: "q".into(),
                entries: [("a", 0.9), ("b", 0.2), ("c", 0.5)]
                    .iter()
                    .map(|&(i, s)| crate::dataset::RankedEntry { item_id: i.into(), score: s })
                    .collect(),
            },
            grades: vec![2, 1, 0],
        };
        let r = JudgedRun::new(vec![q, judged(&[3, 2, 1])]);
        let p = pnr(&r).unwrap();
        assert_eq!((p.value, p.n_used, p.n_infinite), (2.0, 1, 1));
        assert_eq!(pnr(&run(&[&[0, 1, 2]])).unwrap().value, 0.0);
    }

    #[test]
    fn gsb_cases() {
        assert_eq!(delta_gsb(1, 0, 0).unwrap(), 0.5);
        assert_eq!(delta_gsb(3, 3, 4).unwrap(), 0.0);
        assert_eq!(delta_gsb(0, 0, 5).unwrap(), 0.0);
        assert!(delta_gsb(0, 0, 0).is_err());
    }

    #[test]
    fn entropy_cases() {
        let fair = vec![0.0, 0.0, 1.0, 1.0];
        let skew: Vec<f64> = (0..10).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let constant = vec![3.0; 7];
        assert_eq!(binned_entropy(&fair, 2), 1.0);
        assert!((binned_entropy(&skew, 2) - 0.4689955935892812).abs() < 1e-12);
        assert_eq!(binned_entropy(&constant, 4), 0.0);
        let order: Vec<usize> = rank_by_entropy(&[constant, fair, skew], 2).iter().map(|x| x.0).collect();
        assert_eq!(order, [1, 2, 0]);
    }

    #[test]
    fn report_csv_round_trip() {
        let mut rep = MetricsReport::default();
        rep.push("a,b", MetricKind::Mrr, Some(10), MetricValue { value: 0.5, n_queries: 3, n_excluded: 0 });
        rep.push("c", MetricKind::Pnr, None, MetricValue { value: 1.25, n_queries: 2, n_excluded: 1 });
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("run_id,metric,k,value,n_queries,n_excluded\n"));
        assert_eq!(MetricsReport::read_csv(&buf[..]).unwrap(), rep);
    }
}
