use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symptom_core::agent::SymptomReport;
use symptom_core::controller::{das_controller, initial_indices, lloyd, ControllerConfig, Point};
use symptom_core::trace::{AgentId, VmId};

/// Textbook Lloyd: assign to the closest centre (first on ties), move each
/// centre to its members' mean, drop centres that lose every member, stop
/// when the assignment repeats.
fn reference_lloyd(points: &[Point], init: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut centres: Vec<Point> = init.iter().map(|&i| points[i]).collect();
    let mut last: Option<Vec<BTreeSet<usize>>> = None;
    for _ in 0..100 {
        let mut groups: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); centres.len()];
        for (i, p) in points.iter().enumerate() {
            let d: Vec<f64> = centres
                .iter()
                .map(|c| (0..5).map(|j| (p[j] - c[j]).powi(2)).sum())
                .collect();
            let mut best = 0;
            for (c, dc) in d.iter().enumerate() {
                if *dc < d[best] {
                    best = c;
                }
            }
            groups[best].insert(i);
        }
        groups.retain(|g| !g.is_empty());
        if last.as_ref() == Some(&groups) {
            break;
        }
        centres = groups
            .iter()
            .map(|g| {
                let mut m = [0.0; 5];
                for &i in g {
                    for j in 0..5 {
                        m[j] += points[i][j];
                    }
                }
                m.map(|x| x / g.len() as f64)
            })
            .collect();
        last = Some(groups);
    }
    last.unwrap_or_default()
}

fn partition(assignments: &[usize]) -> BTreeSet<BTreeSet<usize>> {
    let mut by: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for (i, &c) in assignments.iter().enumerate() {
        by.entry(c).or_default().insert(i);
    }
    by.into_values().collect()
}

fn points() -> impl Strategy<Value = Vec<Point>> {
    // coarse grid values make ties and duplicates common
    prop::collection::vec(prop::array::uniform5((0u8..=8).prop_map(|v| f64::from(v) / 8.0)), 1..40)
}

proptest! {
    #[test]
    fn lloyd_matches_reference(pts in points(), k in 1usize..8, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let res = lloyd(&pts, k, seed).unwrap();
        prop_assume!(!res.hit_cap);
        let init = initial_indices(&pts, k, seed);
        let expected: BTreeSet<BTreeSet<usize>> = reference_lloyd(&pts, &init).into_iter().collect();
        prop_assert_eq!(partition(&res.assignments), expected);
    }

    #[test]
    fn lloyd_objective_never_increases(pts in points(), k in 1usize..8, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let res = lloyd(&pts, k, seed).unwrap();
        for w in res.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", res.objective);
        }
        prop_assert!(res.representatives.len() <= k);
        prop_assert!(res.assignments.iter().all(|&c| c < res.representatives.len()));
    }

    #[test]
    fn initial_indices_are_distinct_vectors(pts in points(), k in 1usize..10, seed in any::<u64>()) {
        let idx = initial_indices(&pts, k, seed);
        let distinct: BTreeSet<[u64; 5]> = pts.iter().map(|p| p.map(f64::to_bits)).collect();
        prop_assert_eq!(idx.len(), k.min(distinct.len()));
        let chosen: BTreeSet<[u64; 5]> = idx.iter().map(|&i| pts[i].map(f64::to_bits)).collect();
        prop_assert_eq!(chosen.len(), idx.len());
    }
}

fn two_groups(seed: u64) -> (Vec<SymptomReport>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: [Point; 2] = [[0.0, 0.0, 0.9, 0.0, 0.1], [0.1, 0.8, 0.0, 0.0, 0.0]];
    let mut srs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40u32 {
        let g = (i % 2) as usize;
        let s = centres[g].map(|c| (c + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0));
        srs.push(SymptomReport {
            s,
            ..SymptomReport::zero(AgentId(i % 4), VmId(i), 5)
        });
        labels.push(g);
    }
    (srs, labels)
}

#[test]
fn two_tight_groups_are_separated() {
    for seed in 0..10 {
        let (srs, labels) = two_groups(seed);
        let out = das_controller(&srs, 4, seed, &ControllerConfig::default()).unwrap();
        let ks: Vec<usize> = out.elbow.iter().map(|e| e.k).collect();
        // K starts at 6L = 24 and halves
        assert_eq!(ks[0], 24);
        for w in ks.windows(2) {
            assert_eq!(w[1], w[0] / 2);
        }
        let cs: Vec<f64> = out.elbow.iter().map(|e| e.cs).collect();
        assert!(cs.windows(2).all(|w| w[1] > w[0]), "{cs:?}");
        assert!(out.clusters.len() >= 2);
        for c in &out.clusters {
            let groups: BTreeSet<usize> = c.members.iter().map(|m| labels[m.vm.0 as usize]).collect();
            assert_eq!(groups.len(), 1, "seed {seed}: mixed cluster");
        }
    }
}
