//! Loss values against direct formulas, invariances and finite-difference
//! gradients over random instances.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smar_core::annotate::PairSource;
use smar_core::objectives::{
    batch_objective_grad, combined_objective, list_mle, list_mle_grad, listwise_kl, listwise_kl_grad,
    modality_weighted_pairwise_grad, pairwise_hinge, LossConfig, ModalityOrder, Objective, QuerySupervision,
    QueryTargets, ScorePair, SupervisionBatch,
};

fn naive_list_mle(s: &[f64]) -> f64 {
    (0..s.len())
        .map(|i| s[i..].iter().map(|x| x.exp()).sum::<f64>().ln() - s[i])
        .sum()
}

fn naive_kl(g: &[f64], f: &[f64]) -> f64 {
    let zg: f64 = g.iter().map(|x| x.exp()).sum();
    let zf: f64 = f.iter().map(|x| x.exp()).sum();
    g.iter()
        .zip(f)
        .map(|(a, b)| {
            let p = a.exp() / zg;
            let q = b.exp() / zf;
            p * (p / q).ln()
        })
        .sum()
}

fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn fixed_values() {
    assert!((list_mle(&[0.3f64, 0.3, 0.3], false) - 6f64.ln()).abs() < 1e-12);
    let raw = list_mle(&[1.0f64, -0.5, 2.0, 0.1], false);
    assert_eq!(list_mle(&[1.0f64, -0.5, 2.0, 0.1], true), raw / 4.0);
    let e = std::f64::consts::E;
    assert!((listwise_kl(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap() - (e - 1.0) / (e + 1.0)).abs() < 1e-9);
    assert!(listwise_kl(&[1.0f64], &[1.0, 2.0]).is_err());
}

#[test]
fn list_mle_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!((list_mle(&s, false) - naive_list_mle(&s)).abs() < 1e-10);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!((listwise_kl(&g, &s).unwrap() - naive_kl(&g, &s)).abs() < 1e-10);
    }
}

#[test]
fn descending_order_minimizes_list_mle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=6 {
        for _ in 0..5 {
            let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s.dedup();
            let best = list_mle(&s, false);
            for p in permutations(s.len()) {
                let v: Vec<f64> = p.iter().map(|&i| s[i]).collect();
                assert!(list_mle(&v, false) >= best - 1e-12);
            }
        }
    }
}

#[test]
fn score_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    let cfg = LossConfig::<f64> { beta_m: BTreeMap::from([(1, 0.7), (2, 1.3)]), ..LossConfig::default() };
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        for norm in [false, true] {
            let (_, a) = list_mle_grad(&s, norm);
            assert!(rel_err(&a, &fd(|x| list_mle(x, norm), &s, h)) < 1e-4);
        }
        let (_, a) = listwise_kl_grad(&g, &s).unwrap();
        assert!(rel_err(&a, &fd(|x| listwise_kl(&g, x).unwrap(), &s, h)) < 1e-4);

        let pairs = random_pairs(&mut rng, n);
        // Stay away from hinge kinks.
        if pairs.iter().any(|p| ((s[p.pos] - s[p.neg]) - cfg.gamma).abs() < 1e-3) {
            continue;
        }
        let (_, a) = modality_weighted_pairwise_grad(&pairs, &s, &cfg).unwrap();
        let num = fd(|x| modality_weighted_pairwise_grad(&pairs, x, &cfg).unwrap().0, &s, h);
        assert!(rel_err(&a, &num) < 1e-4);
    }
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScorePair> {
    (0..rng.random_range(1..6))
        .map(|_| {
            let pos = rng.random_range(0..n);
            let neg = (pos + rng.random_range(1..n)) % n;
            ScorePair {
                pos,
                neg,
                source: if rng.random_bool(0.5) { PairSource::Label } else { PairSource::Upstream },
                modality: [None, Some(1), Some(2)][rng.random_range(0..3)],
            }
        })
        .collect()
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> QueryTargets {
    let split = rng.random_range(1..n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let labeled = rng.random_bool(0.6);
    QueryTargets {
        query_id: "q".into(),
        label_order: labeled.then(|| idx[..rng.random_range(1..=n)].to_vec()),
        upstream_orders: vec![
            ModalityOrder { modality: 1, visual: false, order: idx[..split].to_vec() },
            ModalityOrder { modality: 2, visual: true, order: idx[split..].to_vec() },
        ],
        pairs: random_pairs(rng, n),
        points: (0..n)
            .filter_map(|k| rng.random_bool(0.5).then(|| (k, rng.random_range(0..=4) as f64 / 4.0)))
            .collect(),
    }
}

fn near_kink(s: &[f64], t: &QueryTargets, cfg: &LossConfig<f64>) -> bool {
    t.pairs.iter().any(|p| {
        let d = s[p.pos] - s[p.neg];
        [cfg.gamma, cfg.margin1, cfg.margin2].iter().any(|m| (d - m).abs() < 1e-3)
    })
}

#[test]
fn batch_gradients_match_finite_differences_for_every_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for objective in [Objective::Combined, Objective::Pairwise, Objective::Online] {
        let cfg = LossConfig::<f64> {
            objective,
            pointwise_weight: 0.5,
            distill_on_labeled: true,
            ..LossConfig::default()
        };
        let mut checked = 0;
        while checked < 100 {
            let nq = rng.random_range(1..=3);
            let queries: Vec<QuerySupervision<f64>> = (0..nq)
                .map(|_| {
                    let n = rng.random_range(2..=7);
                    QuerySupervision {
                        scores: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
                        targets: random_targets(&mut rng, n),
                    }
                })
                .collect();
            if queries.iter().any(|q| near_kink(&q.scores, &q.targets, &cfg)) {
                continue;
            }
            let batch = SupervisionBatch { queries };
            let (_, grads) = batch_objective_grad(&batch, &cfg).unwrap();
            for (qi, q) in batch.queries.iter().enumerate() {
                let num = fd(
                    |x| {
                        let mut b = batch.clone();
                        b.queries[qi].scores = x.to_vec();
                        batch_objective_grad(&b, &cfg).unwrap().0
                    },
                    &q.scores,
                    1e-5,
                );
                let err = rel_err(&grads[qi], &num);
                assert!(err < 1e-4, "{objective:?}: relative error {err}");
            }
            checked += 1;
        }
    }
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..10)
}

proptest! {
    #[test]
    fn listwise_losses_are_translation_invariant(s in scores(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
        prop_assert!((list_mle(&s, true) - list_mle(&shifted, true)).abs() < 1e-9);
        prop_assert!((listwise_kl(&s, &s).unwrap()).abs() < 1e-12);
        let g: Vec<f64> = s.iter().rev().copied().collect();
        prop_assert!((listwise_kl(&g, &s).unwrap() - listwise_kl(&g, &shifted).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn combined_objective_is_translation_invariant(seed in 0u64..1000, c in -20.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..8);
        let targets = random_targets(&mut rng, n);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = LossConfig::<f64> { distill_on_labeled: true, ..LossConfig::default() };
        let a = combined_objective(&SupervisionBatch { queries: vec![QuerySupervision { scores: s.clone(), targets: targets.clone() }] }, &cfg);
        let b = combined_objective(&SupervisionBatch { queries: vec![QuerySupervision { scores: s.iter().map(|x| x + c).collect(), targets }] }, &cfg);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative(s in scores()) {
        prop_assert!(list_mle(&s, false) >= 0.0);
        let g: Vec<f64> = s.iter().map(|x| x * 0.5 - 1.0).collect();
        prop_assert!(listwise_kl(&g, &s).unwrap() >= -1e-15);
        prop_assert!(pairwise_hinge(s[0], 0.0, true, 0.1) >= 0.0);
    }

    #[test]
    fn hinge_non_increasing_in_margin(a in -3.0f64..3.0, b in -3.0f64..3.0, gamma in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(pairwise_hinge(hi, 0.0, true, gamma) <= pairwise_hinge(lo, 0.0, true, gamma));
    }
}
