//! Naive metric references shared by the oracle tests and the acceptance
//! suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use smar_core::dataset::RankedEntry;
use smar_core::metrics::{JudgedQuery, JudgedRun};
use smar_core::datagen::LabelOracle;
use smar_core::{Candidate, Dataset, Grade, Modality, Query, RankedList};

/// (grades in ranked order, scores in ranked order)
pub type RawQuery = (Vec<Grade>, Vec<f64>);

pub fn random_raw_run(rng: &mut ChaCha8Rng) -> Vec<RawQuery> {
    let nq = rng.random_range(1..=8);
    (0..nq)
        .map(|_| {
            let n = rng.random_range(1..=20);
            // Coarse scores so that ties occur.
            let scored: Vec<(String, f64, Grade)> = (0..n)
                .map(|i| {
                    let s = (rng.random_range(0..10) as f64) / 10.0;
                    (format!("i{i:02}"), s, rng.random_range(0..=4))
                })
                .collect();
            let list = RankedList::from_scores("q", scored.iter().map(|(id, s, _)| (id.clone(), *s)));
            let grades = list
                .entries
                .iter()
                .map(|e| scored.iter().find(|x| x.0 == e.item_id).unwrap().2)
                .collect();
            let scores = list.entries.iter().map(|e| e.score).collect();
            (grades, scores)
        })
        .collect()
}

pub fn to_run(raw: &[RawQuery]) -> JudgedRun<f64> {
    JudgedRun::new(
        raw.iter()
            .enumerate()
            .map(|(qi, (g, s))| JudgedQuery {
                list: RankedList {
                    query_id: format!("q{qi}"),
                    entries: s
                        .iter()
                        .enumerate()
                        .map(|(i, &score)| RankedEntry { item_id: format!("i{i:02}"), score })
                        .collect(),
                },
                grades: g.clone(),
            })
            .collect(),
    )
}

pub fn naive_mrr(raw: &[RawQuery], k: usize, t: Grade) -> f64 {
    let mut total = 0.0;
    for (g, _) in raw {
        let mut rr = 0.0;
        for rank in 1..=k.min(g.len()) {
            if g[rank - 1] >= t {
                rr = 1.0 / rank as f64;
                break;
            }
        }
        total += rr;
    }
    total / raw.len() as f64
}

pub fn naive_map(raw: &[RawQuery], k: usize, t: Grade) -> f64 {
    let mut total = 0.0;
    for (g, _) in raw {
        let top = &g[..k.min(g.len())];
        let rel: Vec<usize> = (1..=top.len()).filter(|&r| top[r - 1] >= t).collect();
        if rel.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        for &r in &rel {
            let hits_upto = rel.iter().filter(|&&x| x <= r).count();
            ap += hits_upto as f64 / r as f64;
        }
        total += ap / rel.len() as f64;
    }
    total / raw.len() as f64
}

pub fn naive_dcg(g: &[Grade]) -> f64 {
    let mut s = 0.0;
    for (i, &x) in g.iter().enumerate() {
        let gain = (1u32 << x) as f64 - 1.0;
        s += gain / (2.0 + i as f64).ln() * std::f64::consts::LN_2;
    }
    s
}

pub fn naive_ndcg_one(g: &[Grade], k: Option<usize>) -> f64 {
    let k = k.unwrap_or(g.len()).min(g.len());
    let mut ideal = g.to_vec();
    ideal.sort();
    ideal.reverse();
    let idcg = naive_dcg(&ideal[..k]);
    if idcg == 0.0 {
        0.0
    } else {
        naive_dcg(&g[..k]) / idcg
    }
}

pub fn naive_ndcg(raw: &[RawQuery], k: Option<usize>) -> f64 {
    raw.iter().map(|(g, _)| naive_ndcg_one(g, k)).sum::<f64>() / raw.len() as f64
}

/// Macro F1 over queries with at least one relevant item, or None.
pub fn naive_f1(raw: &[RawQuery], tau: f64, t: Grade) -> Option<f64> {
    let mut vals = Vec::new();
    for (g, s) in raw {
        let returned: BTreeSet<usize> = (0..s.len()).filter(|&i| s[i] >= tau).collect();
        let relevant: BTreeSet<usize> = (0..g.len()).filter(|&i| g[i] >= t).collect();
        if relevant.is_empty() {
            continue;
        }
        let inter = returned.intersection(&relevant).count() as f64;
        let p = if returned.is_empty() { 0.0 } else { inter / returned.len() as f64 };
        let r = inter / relevant.len() as f64;
        vals.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Macro PNR over queries with finite ratio, or None.
pub fn naive_pnr(raw: &[RawQuery]) -> Option<(f64, usize)> {
    let mut vals = Vec::new();
    for (g, s) in raw {
        let (mut c, mut d) = (0usize, 0usize);
        for i in 0..g.len() {
            for j in 0..g.len() {
                if g[i] > g[j] && s[i] != s[j] {
                    if s[i] > s[j] {
                        c += 1;
                    } else {
                        d += 1;
                    }
                }
            }
        }
        if d > 0 {
            vals.push(c as f64 / d as f64);
        }
    }
    (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
}

/// One query holding a visual first queue `v01..` and a text second queue
/// `n01..` with the given grades in upstream order.
pub fn queue_pair(first: &[Grade], second: &[Grade]) -> (Dataset, LabelOracle) {
    let mk = |prefix: &str, modality: u32, grades: &[Grade]| -> Vec<Candidate> {
        grades
            .iter()
            .enumerate()
            .map(|(i, &g)| Candidate {
                item_id: format!("{prefix}{:02}", i + 1),
                modality,
                upstream_score: 0.99 - 0.03 * i as f64,
                features: vec![0.0],
                text_embedding: vec![0.0, 0.0],
                visual_embedding: None,
                label: Some(g as i32),
                clicked: None,
            })
            .collect()
    };
    let mut candidates = mk("n", 1, second);
    candidates.extend(mk("v", 2, first));
    let d = Dataset {
        modalities: vec![Modality { id: 1, name: "n".into() }, Modality { id: 2, name: "v".into() }],
        queries: vec![Query { query_id: "q".into(), user_features: vec![0.0], candidates }],
        embedding_dims: (2, 0),
        feature_dims: (1, 1),
    };
    let oracle = LabelOracle::from_dataset(&d);
    (d, oracle)
}
