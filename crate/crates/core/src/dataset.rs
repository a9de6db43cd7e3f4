//! Domain types: modalities, candidates, queries, datasets and ranked lists.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

/// Relevance grade on the 0..=4 scale.
pub type Grade = u8;

pub const MAX_GRADE: Grade = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub modality: u32,
    pub upstream_score: f64,
    pub features: Vec<f64>,
    pub text_embedding: Vec<f64>,
    #[serde(default)]
    pub visual_embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub label: Option<i32>,
    #[serde(default)]
    pub clicked: Option<bool>,
}

impl Candidate {
    /// The label as a grade, if present and on the 0..=4 scale.
    pub fn grade(&self) -> Option<Grade> {
        self.label
            .filter(|l| (0..=MAX_GRADE as i32).contains(l))
            .map(|l| l as Grade)
    }

    pub fn is_text_only(&self) -> bool {
        self.visual_embedding.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub user_features: Vec<f64>,
    pub candidates: Vec<Candidate>,
}

impl Query {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Modality ids present in this query, ascending.
    pub fn modality_ids(&self) -> Vec<u32> {
        self.candidates
            .iter()
            .map(|c| c.modality)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Candidates of one modality ordered by upstream score, highest first,
    /// ties by ascending item id.
    pub fn modality_queue(&self, modality: u32) -> Vec<&Candidate> {
        let mut queue: Vec<&Candidate> = self
            .candidates
            .iter()
            .filter(|c| c.modality == modality)
            .collect();
        sort_by_upstream(&mut queue);
        queue
    }

    pub fn candidate(&self, item_id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.item_id == item_id)
    }
}

pub fn sort_by_upstream(queue: &mut [&Candidate]) {
    queue.sort_by(|a, b| {
        b.upstream_score
            .partial_cmp(&a.upstream_score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
    pub queries: Vec<Query>,
    /// `(text_dim, visual_dim)`; `visual_dim` is 0 when no item carries a
    /// visual embedding.
    pub embedding_dims: (usize, usize),
    /// `(item_feature_dim, user_feature_dim)`.
    pub feature_dims: (usize, usize),
}

impl Dataset {
    pub fn n_candidates(&self) -> usize {
        self.queries.iter().map(Query::len).sum()
    }

    pub fn query(&self, query_id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// A dataset over a subset of queries, sharing metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            queries: indices.iter().map(|&i| self.queries[i].clone()).collect(),
            embedding_dims: self.embedding_dims,
            feature_dims: self.feature_dims,
        }
    }

    /// Newline-delimited JSON, one query per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for q in &self.queries {
            serde_json::to_writer(&mut out, q)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub query_id: Option<String>,
    pub item_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.query_id, &self.item_id) {
            (Some(q), Some(i)) => write!(f, "query {q}, item {i}: {}", self.message),
            (Some(q), None) => write!(f, "query {q}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

/// Every invariant violation in `dataset`; empty means valid.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |q: Option<&str>, i: Option<&str>, msg: String| {
        out.push(Violation {
            query_id: q.map(str::to_owned),
            item_id: i.map(str::to_owned),
            message: msg,
        })
    };

    let m = dataset.modalities.len();
    if m == 0 {
        push(None, None, "no modalities declared".into());
    }
    let ids: HashSet<u32> = dataset.modalities.iter().map(|x| x.id).collect();
    let dense = ids.len() == m && (1..=m as u32).all(|id| ids.contains(&id));
    if m > 0 && !dense {
        push(None, None, "modality ids must be unique and dense in 1..M".into());
    }

    let (text_dim, visual_dim) = dataset.embedding_dims;
    let (item_dim, user_dim) = dataset.feature_dims;
    let mut seen_queries = HashSet::new();
    for q in &dataset.queries {
        let qid = Some(q.query_id.as_str());
        if !seen_queries.insert(q.query_id.as_str()) {
            push(qid, None, "duplicate query_id".into());
        }
        if q.candidates.is_empty() {
            push(qid, None, "empty candidate set".into());
        }
        if q.user_features.len() != user_dim {
            push(
                qid,
                None,
                format!("user_features has length {}, expected {user_dim}", q.user_features.len()),
            );
        }
        if q.user_features.iter().any(|x| !x.is_finite()) {
            push(qid, None, "non-finite user feature".into());
        }
        let mut seen_items = HashSet::new();
        for c in &q.candidates {
            let iid = Some(c.item_id.as_str());
            if !seen_items.insert(c.item_id.as_str()) {
                push(qid, iid, "duplicate item_id".into());
            }
            if !ids.contains(&c.modality) {
                push(qid, iid, format!("unknown modality {}", c.modality));
            }
            if !c.upstream_score.is_finite() {
                push(qid, iid, "non-finite upstream_score".into());
            }
            if let Some(l) = c.label {
                if !(0..=MAX_GRADE as i32).contains(&l) {
                    push(qid, iid, "label out of range".into());
                }
            }
            if c.features.len() != item_dim {
                push(
                    qid,
                    iid,
                    format!("features has length {}, expected {item_dim}", c.features.len()),
                );
            }
            if c.text_embedding.len() != text_dim {
                push(
                    qid,
                    iid,
                    format!(
                        "text_embedding has length {}, expected {text_dim}",
                        c.text_embedding.len()
                    ),
                );
            }
            if let Some(v) = &c.visual_embedding {
                if v.len() != visual_dim {
                    push(
                        qid,
                        iid,
                        format!("visual_embedding has length {}, expected {visual_dim}", v.len()),
                    );
                }
                if v.iter().any(|x| !x.is_finite()) {
                    push(qid, iid, "non-finite visual embedding".into());
                }
            }
            if c.features.iter().chain(&c.text_embedding).any(|x| !x.is_finite()) {
                push(qid, iid, "non-finite feature or embedding".into());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry<T> {
    pub item_id: String,
    pub score: T,
}

/// Items of one query in descending score order; ties by ascending item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList<T> {
    pub query_id: String,
    pub entries: Vec<RankedEntry<T>>,
}

impl<T: Scalar> RankedList<T> {
    pub fn from_scores<I, S>(query_id: impl Into<String>, scored: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
    {
        let mut entries: Vec<RankedEntry<T>> = scored
            .into_iter()
            .map(|(item_id, score)| RankedEntry {
                item_id: item_id.into(),
                score,
            })
            .collect();
        sort_ranked(&mut entries);
        RankedList {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    pub fn is_sorted(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| compare_ranked(&w[0], &w[1]) != Ordering::Greater)
    }
}

fn compare_ranked<T: Scalar>(a: &RankedEntry<T>, b: &RankedEntry<T>) -> Ordering {
    // NaN sorts last.
    match (a.score.is_nan(), b.score.is_nan()) {
        (true, false) => return Ordering::Greater,
        (false, true) => return Ordering::Less,
        _ => {}
    }
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.item_id.cmp(&b.item_id))
}

pub(crate) fn sort_ranked<T: Scalar>(entries: &mut [RankedEntry<T>]) {
    entries.sort_by(compare_ranked);
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn candidate(id: &str, modality: u32, score: f64, label: Option<i32>) -> Candidate {
        Candidate {
            item_id: id.into(),
            modality,
            upstream_score: score,
            features: vec![score, modality as f64],
            text_embedding: vec![0.1, 0.2],
            visual_embedding: (modality == 2).then(|| vec![0.3, 0.4]),
            label,
            clicked: None,
        }
    }

    pub fn small_dataset() -> Dataset {
        let q = |id: &str| Query {
            query_id: id.into(),
            user_features: vec![1.0],
            candidates: vec![
                candidate(&format!("{id}-a"), 1, 0.9, Some(3)),
                candidate(&format!("{id}-b"), 1, 0.2, Some(0)),
                candidate(&format!("{id}-c"), 2, 0.5, Some(2)),
            ],
        };
        Dataset {
            modalities: vec![
                Modality { id: 1, name: "natural".into() },
                Modality { id: 2, name: "video".into() },
            ],
            queries: vec![q("q1"), q("q2")],
            embedding_dims: (2, 2),
            feature_dims: (2, 1),
        }
    }

    #[test]
    fn well_formed_dataset_is_valid() {
        assert!(validate_dataset(&small_dataset()).is_empty());
    }

    #[test]
    fn label_five_is_reported() {
        let mut d = small_dataset();
        d.queries[0].candidates[1].label = Some(5);
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "label out of range");
        assert_eq!(v[0].item_id.as_deref(), Some("q1-b"));
    }

    #[test]
    fn empty_query_is_reported() {
        let mut d = small_dataset();
        d.queries[1].candidates.clear();
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].message, "empty candidate set");
        assert_eq!(v[0].query_id.as_deref(), Some("q2"));
    }

    #[test]
    fn dimension_and_modality_errors() {
        let mut d = small_dataset();
        d.queries[0].candidates[0].text_embedding.push(1.0);
        d.queries[0].candidates[2].modality = 7;
        let v = validate_dataset(&d);
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn ranked_list_tie_break_by_item_id() {
        let r = RankedList::from_scores("q", vec![("c", 0.5), ("a", 0.5), ("b", 0.9)]);
        let ids: Vec<_> = r.item_ids().collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert!(r.is_sorted());
    }

    #[test]
    fn modality_queue_orders_by_upstream() {
        let d = small_dataset();
        let queue = d.queries[0].modality_queue(1);
        assert_eq!(queue[0].item_id, "q1-a");
        assert_eq!(queue[1].item_id, "q1-b");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resorting_sorted_list_is_identity(scores in proptest::collection::vec(-3i32..3, 0..20)) {
                let scored: Vec<(String, f64)> = scores
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| (format!("i{i:02}"), s as f64 * 0.5))
                    .collect();
                let once = RankedList::from_scores("q", scored);
                prop_assert!(once.is_sorted());
                let twice = RankedList::from_scores(
                    "q",
                    once.entries.iter().map(|e| (e.item_id.clone(), e.score)),
                );
                prop_assert_eq!(once, twice);
            }
        }
    }
}
