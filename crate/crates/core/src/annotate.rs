//! Budget-aware annotation: which items get a human grade and which are left
//! to their upstream ranker.
//!
//! Queues passed to the strategies are one modality's candidates ordered by
//! upstream score, highest first (see [`Query::modality_queue`]).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabelOracle;
use crate::dataset::{Candidate, Dataset, Grade, Query};
use crate::error::{Error, Result};
use crate::seeding::stream;

type Key = (String, String);

const EPS: f64 = 1e-9;

/// Labeled/unlabeled partition of the processed candidates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationPlan {
    pub labeled: BTreeMap<Key, Grade>,
    pub unlabeled: BTreeSet<Key>,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub query_id: String,
    pub item_id: String,
    pub status: Status,
    pub grade: Option<Grade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub oracle_calls: usize,
    pub labeled_fraction: f64,
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: PlanSummary,
}

impl AnnotationPlan {
    pub fn labeled_fraction(&self) -> f64 {
        let total = self.labeled.len() + self.unlabeled.len();
        if total == 0 {
            0.0
        } else {
            self.labeled.len() as f64 / total as f64
        }
    }

    pub fn grade(&self, query_id: &str, item_id: &str) -> Option<Grade> {
        self.labeled
            .get(&(query_id.to_owned(), item_id.to_owned()))
            .copied()
    }

    pub fn covers(&self, query_id: &str, item_id: &str) -> bool {
        let key = (query_id.to_owned(), item_id.to_owned());
        self.labeled.contains_key(&key) || self.unlabeled.contains(&key)
    }

    /// Whether any item of `query_id` is labeled.
    pub fn query_has_labels(&self, query_id: &str) -> bool {
        self.labeled
            .range((query_id.to_owned(), String::new())..)
            .next()
            .is_some_and(|((q, _), _)| q == query_id)
    }

    pub fn merge(&mut self, other: AnnotationPlan) {
        for (k, g) in other.labeled {
            self.unlabeled.remove(&k);
            self.labeled.insert(k, g);
        }
        for k in other.unlabeled {
            if !self.labeled.contains_key(&k) {
                self.unlabeled.insert(k);
            }
        }
        self.oracle_calls += other.oracle_calls;
    }

    fn label(&mut self, oracle: &LabelOracle, query_id: &str, c: &Candidate) -> Result<()> {
        let grade = oracle.label(query_id, &c.item_id)?;
        self.labeled.insert((query_id.to_owned(), c.item_id.clone()), grade);
        self.oracle_calls += 1;
        Ok(())
    }

    fn skip(&mut self, query_id: &str, c: &Candidate) {
        self.unlabeled.insert((query_id.to_owned(), c.item_id.clone()));
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            oracle_calls: self.oracle_calls,
            labeled_fraction: self.labeled_fraction(),
        }
    }

    pub fn rows(&self) -> Vec<PlanRow> {
        let mut rows: Vec<PlanRow> = self
            .labeled
            .iter()
            .map(|((q, i), &g)| PlanRow {
                query_id: q.clone(),
                item_id: i.clone(),
                status: Status::Labeled,
                grade: Some(g),
            })
            .chain(self.unlabeled.iter().map(|(q, i)| PlanRow {
                query_id: q.clone(),
                item_id: i.clone(),
                status: Status::Unlabeled,
                grade: None,
            }))
            .collect();
        rows.sort_by(|a, b| (&a.query_id, &a.item_id).cmp(&(&b.query_id, &b.item_id)));
        rows
    }

    /// One JSON row per item, ordered by `(query_id, item_id)`, then a
    /// summary line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.rows() {
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &SummaryLine { summary: self.summary() })?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut plan = AnnotationPlan::default();
        let mut calls = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            };
            if line.trim_start().starts_with("{\"summary\"") {
                let s: SummaryLine = serde_json::from_str(&line).map_err(parse_err)?;
                calls = Some(s.summary.oracle_calls);
                continue;
            }
            let row: PlanRow = serde_json::from_str(&line).map_err(parse_err)?;
            let key = (row.query_id, row.item_id);
            match (row.status, row.grade) {
                (Status::Labeled, Some(g)) if g <= crate::dataset::MAX_GRADE => {
                    plan.labeled.insert(key, g);
                }
                (Status::Labeled, _) => {
                    return Err(Error::Schema {
                        line: idx + 1,
                        message: "labeled row needs a grade in 0..=4".into(),
                    })
                }
                (Status::Unlabeled, _) => {
                    plan.unlabeled.insert(key);
                }
            }
        }
        plan.oracle_calls = calls.unwrap_or(plan.labeled.len());
        Ok(plan)
    }
}

fn check_fraction(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} must lie in (0, 1], got {p}")))
    }
}

/// Number of items labeled by a budget ratio `p` on a queue of `n`:
/// `ceil(p * n)`, so any positive budget labels at least one item.
pub fn top_p_count(p: f64, n: usize) -> usize {
    ((p * n as f64 - EPS).ceil().max(0.0) as usize).min(n)
}

/// Labels the top `ceil(p * n)` items of `queue`.
pub fn select_top_p(
    query_id: &str,
    queue: &[&Candidate],
    p: f64,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    check_fraction("p", p)?;
    let take = top_p_count(p, queue.len());
    let mut plan = AnnotationPlan::default();
    for (pos, c) in queue.iter().enumerate() {
        if pos < take {
            plan.label(oracle, query_id, c)?;
        } else {
            plan.skip(query_id, c);
        }
    }
    Ok(plan)
}

/// Labels queue positions in `[floor(lo * n), ceil(hi * n))`.
pub fn percentile_band(
    query_id: &str,
    queue: &[&Candidate],
    lo: f64,
    hi: f64,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::Argument(format!(
            "percentile band needs 0 <= lo < hi <= 1, got [{lo}, {hi})"
        )));
    }
    let n = queue.len() as f64;
    let start = (lo * n + EPS).floor() as usize;
    let end = ((hi * n - EPS).ceil().max(0.0) as usize).min(queue.len());
    let mut plan = AnnotationPlan::default();
    for (pos, c) in queue.iter().enumerate() {
        if (start..end).contains(&pos) {
            plan.label(oracle, query_id, c)?;
        } else {
            plan.skip(query_id, c);
        }
    }
    Ok(plan)
}

/// Labels `ceil(p * n)` items drawn uniformly without replacement.
pub fn random_fraction<R: Rng>(
    query_id: &str,
    queue: &[&Candidate],
    p: f64,
    rng: &mut R,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    check_fraction("p", p)?;
    let take = top_p_count(p, queue.len());
    let chosen: BTreeSet<usize> = sample(rng, queue.len(), take).into_iter().collect();
    let mut plan = AnnotationPlan::default();
    for (pos, c) in queue.iter().enumerate() {
        if chosen.contains(&pos) {
            plan.label(oracle, query_id, c)?;
        } else {
            plan.skip(query_id, c);
        }
    }
    Ok(plan)
}

fn per_queue<F>(dataset: &Dataset, mut f: F) -> Result<AnnotationPlan>
where
    F: FnMut(&Query, u32, &[&Candidate]) -> Result<AnnotationPlan>,
{
    let mut plan = AnnotationPlan::default();
    for q in &dataset.queries {
        for m in q.modality_ids() {
            let queue = q.modality_queue(m);
            plan.merge(f(q, m, &queue)?);
        }
    }
    Ok(plan)
}

/// Top-P over every modality queue of every query.
pub fn plan_top_p(dataset: &Dataset, p: f64, oracle: &LabelOracle) -> Result<AnnotationPlan> {
    per_queue(dataset, |q, _, queue| select_top_p(&q.query_id, queue, p, oracle))
}

pub fn plan_band(
    dataset: &Dataset,
    lo: f64,
    hi: f64,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    per_queue(dataset, |q, _, queue| percentile_band(&q.query_id, queue, lo, hi, oracle))
}

/// Uniform `p` sample of each queue; one seeded stream per query.
pub fn plan_random(
    dataset: &Dataset,
    p: f64,
    seed: u64,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    let mut plan = AnnotationPlan::default();
    for (qi, q) in dataset.queries.iter().enumerate() {
        let mut rng = stream(seed, "annotate/random", qi as u64);
        for m in q.modality_ids() {
            let queue = q.modality_queue(m);
            plan.merge(random_fraction(&q.query_id, &queue, p, &mut rng, oracle)?);
        }
    }
    Ok(plan)
}

/// Query-level budget: every item of a uniform `ceil(p * n_queries)` sample
/// of queries is labeled, the rest of the dataset is not.
pub fn plan_queries(
    dataset: &Dataset,
    p: f64,
    seed: u64,
    oracle: &LabelOracle,
) -> Result<AnnotationPlan> {
    check_fraction("p", p)?;
    let mut rng = stream(seed, "annotate/queries", 0);
    let take = top_p_count(p, dataset.queries.len());
    let chosen: BTreeSet<usize> = sample(&mut rng, dataset.queries.len(), take)
        .into_iter()
        .collect();
    let mut plan = AnnotationPlan::default();
    for (qi, q) in dataset.queries.iter().enumerate() {
        for c in &q.candidates {
            if chosen.contains(&qi) {
                plan.label(oracle, &q.query_id, c)?;
            } else {
                plan.skip(&q.query_id, c);
            }
        }
    }
    Ok(plan)
}

/// Nothing labeled; every item supervised by its upstream ranker.
pub fn plan_unlabeled(dataset: &Dataset) -> AnnotationPlan {
    let mut plan = AnnotationPlan::default();
    for q in &dataset.queries {
        for c in &q.candidates {
            plan.skip(&q.query_id, c);
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedItem {
    pub item_id: String,
    pub side: Side,
    pub modality: u32,
    pub upstream: f64,
    /// Present iff the item was graded during the search.
    pub grade: Option<Grade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    /// Equal-grade items from the two queues.
    Tie { first: AlignedItem, second: AlignedItem },
    /// A first-queue item placed between two second-queue items graded
    /// strictly above and strictly below it.
    VirtualTie {
        item: AlignedItem,
        above: AlignedItem,
        below: AlignedItem,
    },
    Single(Vec<AlignedItem>),
}

impl Segment {
    pub fn is_anchor(&self) -> bool {
        !matches!(self, Segment::Single(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequence {
    pub query_id: String,
    pub segments: Vec<Segment>,
    /// Successful tie / virtual tie events.
    pub anchors: usize,
    /// Distinct items graded.
    pub oracle_calls: usize,
    /// Second-queue probes spent on each anchor attempt, with the size of the
    /// second-queue remainder at the start of that attempt.
    pub attempts: Vec<(usize, usize)>,
    pub len_first: usize,
    pub len_second: usize,
}

impl AlignedSequence {
    /// Every item in sequence order.
    pub fn items(&self) -> Vec<&AlignedItem> {
        let mut out = Vec::new();
        for s in &self.segments {
            match s {
                Segment::Tie { first, second } => {
                    out.push(first);
                    out.push(second);
                }
                Segment::VirtualTie { item, .. } => out.push(item),
                Segment::Single(items) => out.extend(items.iter()),
            }
        }
        out
    }

    pub fn labeled_count(&self) -> usize {
        self.items().iter().filter(|i| i.grade.is_some()).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        let total = self.len_first + self.len_second;
        if total == 0 {
            0.0
        } else {
            self.labeled_count() as f64 / total as f64
        }
    }

    pub fn to_plan(&self) -> AnnotationPlan {
        let mut plan = AnnotationPlan {
            oracle_calls: self.oracle_calls,
            ..AnnotationPlan::default()
        };
        for item in self.items() {
            let key = (self.query_id.clone(), item.item_id.clone());
            match item.grade {
                Some(g) => {
                    plan.labeled.insert(key, g);
                }
                None => {
                    plan.unlabeled.insert(key);
                }
            }
        }
        plan
    }
}

enum Outcome {
    Found(usize),
    Bracket(usize),
    AllHigher,
    AllLower,
}

struct SecondQueue<'a, 'o> {
    query_id: &'a str,
    queue: &'a [&'a Candidate],
    grades: Vec<Option<Grade>>,
    oracle: &'o LabelOracle,
    calls: usize,
    probes: usize,
}

impl SecondQueue<'_, '_> {
    fn probe(&mut self, k: usize) -> Result<Grade> {
        self.probes += 1;
        if let Some(g) = self.grades[k] {
            return Ok(g);
        }
        let g = self.oracle.label(self.query_id, &self.queue[k].item_id)?;
        self.grades[k] = Some(g);
        self.calls += 1;
        Ok(g)
    }

    /// Binary search of `[start, len)` for `target`, assuming grades do not
    /// increase along the queue.
    fn binary_search(&mut self, start: usize, target: Grade) -> Result<Outcome> {
        let len = self.queue.len();
        let first = self.probe(start)?;
        if first == target {
            return Ok(Outcome::Found(start));
        }
        if first < target {
            return Ok(Outcome::AllLower);
        }
        let (mut lo, mut hi) = (start + 1, len);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let g = self.probe(mid)?;
            if g == target {
                return Ok(Outcome::Found(mid));
            }
            if g > target {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        Ok(if lo == len {
            Outcome::AllHigher
        } else {
            Outcome::Bracket(lo)
        })
    }

    fn probed_monotone(&self, start: usize) -> bool {
        let known: Vec<Grade> = self.grades[start..].iter().flatten().copied().collect();
        known.windows(2).all(|w| w[0] >= w[1])
    }

    /// Probes the whole remainder; used when noisy grades break the
    /// monotonicity the binary search relies on.
    fn linear_scan(&mut self, start: usize, target: Grade) -> Result<Outcome> {
        let len = self.queue.len();
        let mut grades = Vec::with_capacity(len - start);
        for k in start..len {
            grades.push(self.probe(k)?);
        }
        if let Some(off) = grades.iter().position(|&g| g == target) {
            return Ok(Outcome::Found(start + off));
        }
        if grades.iter().all(|&g| g > target) {
            return Ok(Outcome::AllHigher);
        }
        if grades.iter().all(|&g| g < target) {
            return Ok(Outcome::AllLower);
        }
        if let Some(off) = grades
            .windows(2)
            .position(|w| w[0] > target && w[1] < target)
        {
            return Ok(Outcome::Bracket(start + off + 1));
        }
        Ok(if grades[0] < target {
            Outcome::AllLower
        } else {
            Outcome::AllHigher
        })
    }

    fn item(&self, k: usize) -> AlignedItem {
        aligned(self.queue[k], Side::Second, self.grades[k])
    }

    fn items(&self, range: std::ops::Range<usize>) -> Vec<AlignedItem> {
        range.map(|k| self.item(k)).collect()
    }
}

fn aligned(c: &Candidate, side: Side, grade: Option<Grade>) -> AlignedItem {
    AlignedItem {
        item_id: c.item_id.clone(),
        side,
        modality: c.modality,
        upstream: c.upstream_score,
        grade,
    }
}

/// Aligns two upstream-ordered queues through equal-grade anchors.
///
/// Each first-queue item is graded and searched for in the unconsumed
/// remainder of the second queue. A match yields a tie; a gap between a
/// strictly higher and strictly lower graded neighbour yields a virtual tie;
/// otherwise the item is concatenated with the remainder as a single
/// segment. Anchoring stops after `t_rounds` ties and virtual ties (`None`
/// means unbounded) or when either queue runs out; the leftovers of both
/// queues are emitted as single segments, ungraded.
pub fn iso_label_anchor_search(
    query_id: &str,
    first: &[&Candidate],
    second: &[&Candidate],
    t_rounds: Option<usize>,
    oracle: &LabelOracle,
) -> Result<AlignedSequence> {
    let budget = t_rounds.unwrap_or(usize::MAX);
    let mut q2 = SecondQueue {
        query_id,
        queue: second,
        grades: vec![None; second.len()],
        oracle,
        calls: 0,
        probes: 0,
    };
    let mut segments = Vec::new();
    let mut attempts = Vec::new();
    let mut anchors = 0;
    let mut first_calls = 0;
    let (mut i, mut j) = (0, 0);

    while i < first.len() && j < second.len() && anchors < budget {
        let a = first[i];
        let grade = oracle.label(query_id, &a.item_id)?;
        first_calls += 1;
        let a_item = aligned(a, Side::First, Some(grade));

        q2.probes = 0;
        let remainder = second.len() - j;
        let mut outcome = q2.binary_search(j, grade)?;
        if !matches!(outcome, Outcome::Found(_)) && !q2.probed_monotone(j) {
            outcome = q2.linear_scan(j, grade)?;
        }
        attempts.push((q2.probes, remainder));

        match outcome {
            Outcome::Found(k) => {
                if k > j {
                    segments.push(Segment::Single(q2.items(j..k)));
                }
                segments.push(Segment::Tie {
                    first: a_item,
                    second: q2.item(k),
                });
                j = k + 1;
                anchors += 1;
            }
            Outcome::Bracket(k) => {
                // k > j: the bracket's upper item always lies in the remainder.
                segments.push(Segment::Single(q2.items(j..k)));
                segments.push(Segment::VirtualTie {
                    item: a_item,
                    above: q2.item(k - 1),
                    below: q2.item(k),
                });
                j = k;
                anchors += 1;
            }
            Outcome::AllHigher => {
                let mut run = q2.items(j..second.len());
                run.push(a_item);
                segments.push(Segment::Single(run));
                j = second.len();
            }
            Outcome::AllLower => {
                let mut run = vec![a_item];
                run.extend(q2.items(j..second.len()));
                segments.push(Segment::Single(run));
                j = second.len();
            }
        }
        i += 1;
    }

    if i < first.len() {
        segments.push(Segment::Single(
            first[i..].iter().map(|c| aligned(c, Side::First, None)).collect(),
        ));
    }
    if j < second.len() {
        segments.push(Segment::Single(q2.items(j..second.len())));
    }

    Ok(AlignedSequence {
        query_id: query_id.to_owned(),
        segments,
        anchors,
        oracle_calls: first_calls + q2.calls,
        attempts,
        len_first: first.len(),
        len_second: second.len(),
    })
}

/// Anchor search for every query. The lowest modality id is the reference
/// (second) queue; every other modality is aligned against it.
pub fn plan_anchors(
    dataset: &Dataset,
    t_rounds: Option<usize>,
    oracle: &LabelOracle,
) -> Result<(AnnotationPlan, Vec<AlignedSequence>)> {
    let mut plan = AnnotationPlan::default();
    let mut sequences = Vec::new();
    for q in &dataset.queries {
        let ids = q.modality_ids();
        let Some((&reference, others)) = ids.split_first() else {
            continue;
        };
        let second = q.modality_queue(reference);
        if others.is_empty() {
            for c in &second {
                plan.skip(&q.query_id, c);
            }
            continue;
        }
        for &m in others {
            let first = q.modality_queue(m);
            let seq = iso_label_anchor_search(&q.query_id, &first, &second, t_rounds, oracle)?;
            plan.merge(seq.to_plan());
            sequences.push(seq);
        }
    }
    Ok((plan, sequences))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairSource {
    Label,
    Upstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub winner: String,
    pub loser: String,
    pub source: PairSource,
    /// Modality of the pair when both items share one.
    pub modality: Option<u32>,
}

pub type PairSet = Vec<Preference>;
pub type PointSet = Vec<(String, Grade)>;

/// Input to pair construction: one candidate with its group (queue), upstream
/// score and optional grade. Bracketed items only pair with their brackets
/// on the label side.
#[derive(Debug, Clone)]
pub struct PairItem {
    pub item_id: String,
    pub group: u32,
    pub upstream: f64,
    pub grade: Option<Grade>,
    pub bracket: Option<(String, String)>,
}

/// Label pairs between graded items with unequal grades, upstream pairs
/// between same-group items that are not both graded, and a pointwise target
/// for every graded item that is not bracketed.
pub fn pairs_from_items(items: &[PairItem]) -> (PairSet, PointSet) {
    let mut pairs = Vec::new();
    for (a, x) in items.iter().enumerate() {
        for y in &items[a + 1..] {
            let modality = (x.group == y.group).then_some(x.group);
            match (x.grade, y.grade) {
                (Some(gx), Some(gy)) => {
                    if x.bracket.is_some() || y.bracket.is_some() || gx == gy {
                        continue;
                    }
                    let (w, l) = if gx > gy { (x, y) } else { (y, x) };
                    pairs.push(Preference {
                        winner: w.item_id.clone(),
                        loser: l.item_id.clone(),
                        source: PairSource::Label,
                        modality,
                    });
                }
                _ if modality.is_some() && x.upstream != y.upstream => {
                    let (w, l) = if x.upstream > y.upstream { (x, y) } else { (y, x) };
                    pairs.push(Preference {
                        winner: w.item_id.clone(),
                        loser: l.item_id.clone(),
                        source: PairSource::Upstream,
                        modality,
                    });
                }
                _ => {}
            }
        }
    }
    for x in items {
        if let Some((above, below)) = &x.bracket {
            let group_of = |id: &str| items.iter().find(|i| i.item_id == *id).map(|i| i.group);
            pairs.push(Preference {
                winner: above.clone(),
                loser: x.item_id.clone(),
                source: PairSource::Label,
                modality: (group_of(above) == Some(x.group)).then_some(x.group),
            });
            pairs.push(Preference {
                winner: x.item_id.clone(),
                loser: below.clone(),
                source: PairSource::Label,
                modality: (group_of(below) == Some(x.group)).then_some(x.group),
            });
        }
    }
    let points = items
        .iter()
        .filter(|x| x.bracket.is_none())
        .filter_map(|x| x.grade.map(|g| (x.item_id.clone(), g)))
        .collect();
    (pairs, points)
}

/// Pair and pointwise supervision from an aligned sequence.
pub fn build_pairs(aligned: &AlignedSequence) -> (PairSet, PointSet) {
    let mut items = Vec::new();
    let mut push = |it: &AlignedItem, bracket: Option<(String, String)>| {
        items.push(PairItem {
            item_id: it.item_id.clone(),
            group: it.modality,
            upstream: it.upstream,
            grade: it.grade,
            bracket,
        })
    };
    for s in &aligned.segments {
        match s {
            Segment::Tie { first, second } => {
                push(first, None);
                push(second, None);
            }
            Segment::VirtualTie { item, above, below } => {
                push(item, Some((above.item_id.clone(), below.item_id.clone())));
            }
            Segment::Single(run) => run.iter().for_each(|it| push(it, None)),
        }
    }
    pairs_from_items(&items)
}

/// Pair supervision for one query under an arbitrary plan, grouping by
/// modality.
pub fn pairs_from_plan(query: &Query, plan: &AnnotationPlan) -> (PairSet, PointSet) {
    let items: Vec<PairItem> = query
        .candidates
        .iter()
        .map(|c| PairItem {
            item_id: c.item_id.clone(),
            group: c.modality,
            upstream: c.upstream_score,
            grade: plan.grade(&query.query_id, &c.item_id),
            bracket: None,
        })
        .collect();
    pairs_from_items(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Modality, Query};

    /// A query whose queues carry the given grades in upstream order; modality
    /// 2 is the first queue, modality 1 the second.
    pub(crate) fn two_queue_query(first: &[Grade], second: &[Grade]) -> (Dataset, LabelOracle) {
        let mut candidates = Vec::new();
        for (m, grades, prefix) in [(2u32, first, "v"), (1, second, "n")] {
            for (k, &g) in grades.iter().enumerate() {
                candidates.push(Candidate {
                    item_id: format!("{prefix}{}", k + 1),
                    modality: m,
                    upstream_score: 1.0 - k as f64 * 0.01,
                    features: vec![],
                    text_embedding: vec![],
                    visual_embedding: None,
                    label: Some(g as i32),
                    clicked: None,
                });
            }
        }
        let d = Dataset {
            modalities: vec![
                Modality { id: 1, name: "natural".into() },
                Modality { id: 2, name: "video".into() },
            ],
            queries: vec![Query {
                query_id: "q".into(),
                user_features: vec![],
                candidates,
            }],
            embedding_dims: (0, 0),
            feature_dims: (0, 0),
        };
        let oracle = LabelOracle::from_dataset(&d);
        (d, oracle)
    }

    fn queue(len: usize, scores: impl Fn(usize) -> f64) -> Vec<Candidate> {
        (0..len)
            .map(|k| Candidate {
                item_id: format!("i{k:02}"),
                modality: 1,
                upstream_score: scores(k),
                features: vec![],
                text_embedding: vec![],
                visual_embedding: None,
                label: Some((k % 5) as i32),
                clicked: None,
            })
            .collect()
    }

    fn oracle_for(items: &[Candidate]) -> LabelOracle {
        LabelOracle::from_dataset(&Dataset {
            modalities: vec![Modality { id: 1, name: "m".into() }],
            queries: vec![Query {
                query_id: "q".into(),
                user_features: vec![],
                candidates: items.to_vec(),
            }],
            embedding_dims: (0, 0),
            feature_dims: (0, 0),
        })
    }

    #[test]
    fn top_p_counts() {
        let items = queue(10, |k| 1.0 - k as f64 / 10.0);
        let refs: Vec<&Candidate> = items.iter().collect();
        let oracle = oracle_for(&items);
        let plan = select_top_p("q", &refs, 0.3, &oracle).unwrap();
        assert_eq!((plan.labeled.len(), plan.unlabeled.len(), plan.oracle_calls), (3, 7, 3));
        let plan = select_top_p("q", &refs[..5], 0.1, &oracle).unwrap();
        assert_eq!(plan.labeled.len(), 1);
        let plan = select_top_p("q", &refs, 1.0, &oracle).unwrap();
        assert!(plan.unlabeled.is_empty());
        assert!(select_top_p("q", &refs, 0.0, &oracle).is_err());
        assert!(select_top_p("q", &refs, 1.5, &oracle).is_err());
        let empty = select_top_p("q", &[], 0.5, &oracle).unwrap();
        assert_eq!(empty, AnnotationPlan::default());
    }

    #[test]
    fn bands_select_positions() {
        let items = queue(10, |k| 1.0 - k as f64 / 10.0);
        let refs: Vec<&Candidate> = items.iter().collect();
        let oracle = oracle_for(&items);
        let labeled = |plan: &AnnotationPlan| -> Vec<String> {
            plan.labeled.keys().map(|(_, i)| i.clone()).collect()
        };
        let head = percentile_band("q", &refs, 0.0, 0.3, &oracle).unwrap();
        assert_eq!(labeled(&head), ["i00", "i01", "i02"]);
        let tail = percentile_band("q", &refs, 0.7, 1.0, &oracle).unwrap();
        assert_eq!(labeled(&tail), ["i07", "i08", "i09"]);
        let whole = percentile_band("q", &refs, 0.0, 1.0, &oracle).unwrap();
        let top = select_top_p("q", &refs, 1.0, &oracle).unwrap();
        assert_eq!(whole, top);
        assert!(percentile_band("q", &refs, 0.5, 0.5, &oracle).is_err());
    }

    #[test]
    fn random_fraction_samples_without_replacement() {
        let items = queue(10, |k| k as f64);
        let refs: Vec<&Candidate> = items.iter().collect();
        let oracle = oracle_for(&items);
        let mut rng = stream(1, "t", 0);
        let plan = random_fraction("q", &refs, 0.3, &mut rng, &oracle).unwrap();
        assert_eq!(plan.labeled.len(), 3);
        assert_eq!(plan.unlabeled.len(), 7);
    }

    #[test]
    fn plan_jsonl_round_trip() {
        let items = queue(6, |k| k as f64);
        let refs: Vec<&Candidate> = items.iter().collect();
        let oracle = oracle_for(&items);
        let plan = select_top_p("q", &refs, 0.5, &oracle).unwrap();
        let mut buf = Vec::new();
        plan.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().last().unwrap().contains("\"labeled_fraction\":0.5"));
        let back = AnnotationPlan::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, plan);
    }

    fn run(first: &[Grade], second: &[Grade], t: Option<usize>) -> AlignedSequence {
        let (d, oracle) = two_queue_query(first, second);
        let q = &d.queries[0];
        iso_label_anchor_search("q", &q.modality_queue(2), &q.modality_queue(1), t, &oracle).unwrap()
    }

    fn shape(seq: &AlignedSequence) -> Vec<String> {
        seq.segments
            .iter()
            .map(|s| match s {
                Segment::Tie { first, second } => format!("tie({},{})", first.item_id, second.item_id),
                Segment::VirtualTie { item, above, below } => {
                    format!("virtual_tie({}|{}>{})", item.item_id, above.item_id, below.item_id)
                }
                Segment::Single(items) => format!(
                    "single({})",
                    items.iter().map(|i| i.item_id.as_str()).collect::<Vec<_>>().join(",")
                ),
            })
            .collect()
    }

    #[test]
    fn traced_example_tie_single_virtual_single() {
        let seq = run(&[4, 2], &[4, 3, 1], None);
        assert_eq!(
            shape(&seq),
            ["tie(v1,n1)", "single(n2)", "virtual_tie(v2|n2>n3)", "single(n3)"]
        );
        assert_eq!(seq.anchors, 2);
    }

    #[test]
    fn one_element_match() {
        let seq = run(&[3], &[3], None);
        assert_eq!(shape(&seq), ["tie(v1,n1)"]);
        assert_eq!(seq.oracle_calls, 2);
    }

    #[test]
    fn zero_rounds_labels_nothing() {
        let seq = run(&[4, 2], &[4, 3, 1], Some(0));
        assert!(seq.segments.iter().all(|s| !s.is_anchor()));
        assert_eq!(seq.oracle_calls, 0);
        assert_eq!(seq.labeled_count(), 0);
    }

    #[test]
    fn round_budget_stops_anchoring() {
        let seq = run(&[4, 2], &[4, 3, 1], Some(1));
        assert_eq!(shape(&seq), ["tie(v1,n1)", "single(v2)", "single(n2,n3)"]);
    }

    #[test]
    fn all_higher_and_all_lower_runs() {
        let seq = run(&[1], &[4, 3], None);
        assert_eq!(shape(&seq), ["single(n1,n2,v1)"]);
        let seq = run(&[4, 3], &[2, 1], None);
        assert_eq!(shape(&seq), ["single(v1,n1,n2)", "single(v2)"]);
    }

    #[test]
    fn noisy_queue_falls_back_to_linear_scan() {
        // Probes n1 (3), n4 (1), n3 (4): out of order, so the whole queue is
        // scanned and the first adjacent bracket wins.
        let seq = run(&[2], &[3, 0, 4, 1, 1], None);
        assert_eq!(shape(&seq)[..2], ["single(n1)", "virtual_tie(v1|n1>n2)"]);
        assert_eq!(seq.oracle_calls, 6);
    }

    #[test]
    fn pairs_from_labels_and_upstream() {
        let items = vec![
            PairItem { item_id: "x".into(), group: 1, upstream: 0.9, grade: Some(3), bracket: None },
            PairItem { item_id: "y".into(), group: 2, upstream: 0.1, grade: Some(1), bracket: None },
            PairItem { item_id: "u1".into(), group: 1, upstream: 0.4, grade: None, bracket: None },
            PairItem { item_id: "u2".into(), group: 1, upstream: 0.9, grade: None, bracket: None },
            PairItem { item_id: "w".into(), group: 2, upstream: 0.5, grade: None, bracket: None },
        ];
        let (pairs, points) = pairs_from_items(&items);
        let has = |w: &str, l: &str, s: PairSource| {
            pairs.iter().any(|p| p.winner == w && p.loser == l && p.source == s)
        };
        assert!(has("x", "y", PairSource::Label));
        assert!(has("u2", "u1", PairSource::Upstream));
        assert!(has("x", "u1", PairSource::Upstream));
        assert!(!pairs.iter().any(|p| (p.winner == "w" || p.loser == "w") && p.modality.is_none()));
        assert_eq!(points.len(), 2);
    }

    #[test]
    fn virtual_tie_pairs_only_with_brackets() {
        let seq = run(&[4, 2], &[4, 3, 1], None);
        let (pairs, points) = build_pairs(&seq);
        let involving_v2: Vec<_> = pairs
            .iter()
            .filter(|p| p.winner == "v2" || p.loser == "v2")
            .map(|p| (p.winner.as_str(), p.loser.as_str()))
            .collect();
        assert_eq!(involving_v2, [("n2", "v2"), ("v2", "n3")]);
        assert!(points.iter().all(|(id, _)| id != "v2"));
        assert!(points.iter().any(|(id, g)| id == "v1" && *g == 4));
    }
}
