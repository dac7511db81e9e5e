use std::collections::{BTreeMap, BTreeSet};

use privshape_core::ldp::{oue_debias, oue_perturb, RandomSource};
use privshape_core::metrics::distance;
use privshape_core::protocol::{
    average_linkage, estimate_length, run_baseline, run_privshape, LengthRange, MatchMode, Phase, ProtocolConfig,
    UserData,
};
use privshape_core::{DistanceMetric, PrivacyBudget, SymbolSequence};
use proptest::prelude::*;

fn seq(s: &str) -> SymbolSequence {
    SymbolSequence::parse(s).unwrap()
}

fn population(templates: &[SymbolSequence], n: usize) -> Vec<UserData> {
    (0..n)
        .map(|i| UserData {
            sequence: templates[i % templates.len()].clone(),
            label: None,
        })
        .collect()
}

/// Compressed sequences of a fixed length over `t` symbols.
fn compressed(t: u8, len: usize) -> impl Strategy<Value = SymbolSequence> {
    (0..t, proptest::collection::vec(1..t, len - 1)).prop_map(move |(first, steps)| {
        let mut out = vec![first];
        for s in steps {
            let prev = *out.last().unwrap();
            out.push((prev + s) % t);
        }
        SymbolSequence::new(out)
    })
}

#[test]
fn length_estimate_is_stable_under_grr() {
    let range = LengthRange::new(1, 10).unwrap();
    let budget = PrivacyBudget::new(1.0).unwrap();
    let mut users = Vec::with_capacity(10_000);
    let others = [1, 2, 3, 5, 6, 7, 8, 9, 10];
    for i in 0..10_000usize {
        let len = if i < 6_000 { 4 } else { others[i % others.len()] };
        users.push(SymbolSequence::new((0..len).map(|j| (j % 2) as u8).collect()));
    }
    let hits = (0..100u64)
        .filter(|&trial| estimate_length(&users, range, budget, trial).unwrap() == 4)
        .count();
    assert!(hits >= 99, "mode recovered in {hits} of 100 trials");
}

/// Mean distance between every cross-cluster pair, recomputed from scratch
/// at each merge.
fn naive_average_linkage(items: &[SymbolSequence], k: usize, metric: DistanceMetric) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..items.len()).map(|i| vec![i]).collect();
    while clusters.len() > k.max(1) {
        let mut best = (0, 1, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &x in &clusters[a] {
                    for &y in &clusters[b] {
                        total += distance(&items[x], &items[y], metric).unwrap();
                    }
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                if avg < best.2 - 1e-12 {
                    best = (a, b, avg);
                }
            }
        }
        let moved = clusters.remove(best.1);
        clusters[best.0].extend(moved);
        clusters[best.0].sort_unstable();
    }
    clusters
}

#[test]
fn linkage_matches_naive_oracle_on_crafted_set() {
    // two tight groups far apart under SED
    let items: Vec<SymbolSequence> = ["abcd", "abca", "abda", "dcba", "dcbd", "dcad"].iter().map(|s| seq(s)).collect();
    let got = average_linkage(&items, 2, DistanceMetric::Sed).unwrap();
    assert_eq!(got, naive_average_linkage(&items, 2, DistanceMetric::Sed));
    assert_eq!(got, vec![vec![0, 1, 2], vec![3, 4, 5]]);
}

#[test]
fn classification_refine_within_three_standard_errors() {
    // 10^5 users over 6 candidates x 2 classes; true cell counts known
    let budget = PrivacyBudget::new(1.0).unwrap();
    let cells = 12;
    let n = 100_000u64;
    let truth: Vec<u64> = (0..cells as u64).map(|c| if c < 6 { 2 * (c + 1) * 1000 } else { 0 }).collect();
    let rest = n - truth.iter().sum::<u64>();
    let mut truth = truth;
    truth[11] += rest;
    let mut sums = vec![0u64; cells];
    let mut rng = RandomSource::new(17);
    for (cell, &count) in truth.iter().enumerate() {
        for _ in 0..count {
            for (s, b) in sums.iter_mut().zip(oue_perturb(cell, cells, budget, &mut rng).unwrap()) {
                *s += u64::from(b);
            }
        }
    }
    let est = oue_debias(&sums, n, budget).unwrap();
    let q = 1.0 / (1.0f64.exp() + 1.0);
    for (cell, (&e, &t)) in est.iter().zip(&truth).enumerate() {
        let t = t as f64;
        let var = t * 0.25 + (n as f64 - t) * q * (1.0 - q);
        let se = var.sqrt() / (0.5 - q);
        assert!((e - t).abs() < 3.0 * se, "cell {cell}: {e} vs {t}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_run_recovers_distinct_templates(
        templates in proptest::collection::btree_set(compressed(4, 4), 1..=3),
        seed in any::<u64>(),
    ) {
        let templates: Vec<SymbolSequence> = templates.into_iter().collect();
        let cfg = ProtocolConfig {
            epsilon: PrivacyBudget::noiseless(),
            t: 4,
            k: 3,
            seed,
            ..ProtocolConfig::default()
        };
        let users = population(&templates, 3_000);
        let out = run_privshape(&users, &cfg).unwrap();
        let got: BTreeSet<_> = out.result.shapes.iter().cloned().collect();
        let want: BTreeSet<_> = templates.iter().cloned().collect();
        prop_assert_eq!(got, want);

        // counts equal the exact tallies of the refinement group
        let refine_round = out.rounds.iter().find(|r| r.phase == Phase::Refine).unwrap().index;
        let mut truth: BTreeMap<SymbolSequence, f64> = BTreeMap::new();
        for r in out.transcript.iter().filter(|r| r.round == refine_round) {
            *truth.entry(users[r.user as usize].sequence.clone()).or_default() += 1.0;
        }
        for (shape, count) in out.result.shapes.iter().zip(&out.result.counts) {
            prop_assert_eq!(truth[shape], *count);
        }
    }

    #[test]
    fn every_user_reports_once_and_rounds_stay_small(
        templates in proptest::collection::vec(compressed(4, 5), 1..6),
        eps in 0.5f64..6.0,
        k in 1usize..4,
        full in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = 800;
        let cfg = ProtocolConfig {
            epsilon: PrivacyBudget::new(eps).unwrap(),
            k,
            seed,
            match_mode: if full { MatchMode::FullSequence } else { MatchMode::Prefix },
            ..ProtocolConfig::default()
        };
        let users = population(&templates, n);
        let out = run_privshape(&users, &cfg).unwrap();
        let mut ids: Vec<u64> = out.transcript.iter().map(|r| r.user).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        for r in &out.rounds {
            prop_assert!(r.candidates <= cfg.c * cfg.c * k * k);
        }
        prop_assert!(out.result.shapes.len() <= k);
        let distinct: BTreeSet<_> = out.result.shapes.iter().collect();
        prop_assert_eq!(distinct.len(), out.result.shapes.len());
        for s in &out.result.shapes {
            prop_assert!(!s.has_adjacent_repeat());
        }

        let again = run_privshape(&users, &cfg).unwrap();
        prop_assert_eq!(&again.result, &out.result);
        prop_assert_eq!(&again.transcript, &out.transcript);
    }

    #[test]
    fn baseline_rounds_respect_expansion_bound(
        templates in proptest::collection::vec(compressed(3, 4), 1..4),
        threshold in 0.0f64..30.0,
        seed in any::<u64>(),
    ) {
        let cfg = ProtocolConfig {
            epsilon: PrivacyBudget::new(3.0).unwrap(),
            t: 3,
            threshold,
            seed,
            ..ProtocolConfig::default()
        };
        let out = run_baseline(&population(&templates, 600), &cfg).unwrap();
        for r in &out.rounds {
            if let Phase::Trie(level) = r.phase {
                prop_assert!(r.candidates <= 3 * 2usize.pow(level as u32 - 1));
            }
        }
        prop_assert_eq!(out.transcript.len(), 600);
    }
}
