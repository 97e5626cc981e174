use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use quoteflow::cluster::{evaluate_matching, hdbscan, sweep, ClusterParams, Selection};
use quoteflow::embed::ReducedMatrix;

#[path = "common/hdbscan_oracle.rs"]
mod oracle;

/// Two 10-point unit-variance blobs 100 apart plus two far outliers.
fn blobs_and_outliers() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut x = Vec::new();
    for center in [0.0, 100.0] {
        for _ in 0..10 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            x.push(vec![center + a, b]);
        }
    }
    x.push(vec![50.0, 400.0]);
    x.push(vec![-300.0, -250.0]);
    x
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i:02}")).collect()
}

fn points(x: &[Vec<f64>]) -> ReducedMatrix {
    ReducedMatrix::from_points(ids(x.len()), DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j]))
}

fn partition(labels: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

#[test]
fn two_blobs_two_outliers_match_oracle() {
    let x = blobs_and_outliers();
    let params = ClusterParams::new(5, 5, Selection::ExcessOfMass);
    let got = hdbscan(&points(&x), &params).unwrap();
    assert_eq!(got.n_clusters, 2);
    assert_eq!(got.labels.iter().filter(|l| l.is_none()).count(), 2);
    assert!(got.labels[20].is_none() && got.labels[21].is_none());

    let tree = oracle::condensed(&oracle::mutual_reachability(&x, 5), 5);
    assert_eq!(partition(&got.labels), oracle::select(&tree, false));
    assert_eq!(oracle::select(&tree, false), vec![(0..10).collect::<Vec<_>>(), (10..20).collect()]);
}

#[test]
fn merging_setting_keeps_recall_and_loses_precision() {
    let x = blobs_and_outliers();
    let names = ids(x.len());
    let truth: Vec<Vec<String>> = vec![names[..10].to_vec(), names[10..20].to_vec(), vec![names[20].clone()], vec![names[21].clone()]];
    let fine = ClusterParams::new(5, 5, Selection::ExcessOfMass);
    let merged = ClusterParams::new(11, 5, Selection::ExcessOfMass);
    let rows = sweep(&points(&x), &[fine, merged], &truth).unwrap();
    let by = |p: &ClusterParams| rows.iter().find(|r| &r.params == p).unwrap().outcome.clone().unwrap();
    let (f, m) = (by(&fine), by(&merged));
    assert_eq!(hdbscan(&points(&x), &merged).unwrap().n_clusters, 1);
    assert!(m.recall >= f.recall);
    assert!(m.precision < f.precision);
    assert_eq!((f.tp, f.fp, f.fn_), (90, 0, 0));

    let predicted: BTreeMap<String, Option<usize>> =
        names.iter().cloned().zip(hdbscan(&points(&x), &fine).unwrap().labels).collect();
    assert_eq!(evaluate_matching(&predicted, &truth).unwrap(), f);
}

fn arb_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..4, 8usize..26).prop_flat_map(|(dim, n)| {
        prop::collection::vec(
            (0usize..3, prop::collection::vec(-1.5f64..1.5, dim)).prop_map(|(blob, off)| {
                off.iter().enumerate().map(|(k, o)| o + if k == 0 { blob as f64 * 12.0 } else { 0.0 }).collect::<Vec<f64>>()
            }),
            n,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clusters_respect_min_size_and_agree_with_oracle(
        x in arb_points(),
        mcs in 2usize..6,
        ms_frac in 0.0f64..1.0,
        leaf in any::<bool>(),
    ) {
        let ms = 1 + ((mcs - 1) as f64 * ms_frac) as usize;
        let selection = if leaf { Selection::Leaf } else { Selection::ExcessOfMass };
        let params = ClusterParams::new(mcs, ms, selection);
        let got = hdbscan(&points(&x), &params).unwrap();
        let parts = partition(&got.labels);
        prop_assert_eq!(parts.len(), got.n_clusters);
        for p in &parts {
            prop_assert!(p.len() >= mcs);
        }
        for (l, p) in got.labels.iter().zip(&got.probabilities) {
            prop_assert!((0.0..=1.0).contains(p));
            if l.is_none() {
                prop_assert_eq!(*p, 0.0);
            }
        }
        let tree = oracle::condensed(&oracle::mutual_reachability(&x, ms), mcs);
        prop_assert_eq!(parts, oracle::select(&tree, leaf));
    }

    #[test]
    fn partition_survives_reversal_and_scaling(x in arb_points(), scale in 0.05f64..20.0) {
        let params = ClusterParams::new(3, 2, Selection::ExcessOfMass);
        let base = partition(&hdbscan(&points(&x), &params).unwrap().labels);
        let n = x.len();
        let rev: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let mut back: Vec<Vec<usize>> = partition(&hdbscan(&points(&rev), &params).unwrap().labels)
            .into_iter()
            .map(|g| { let mut g: Vec<usize> = g.into_iter().map(|i| n - 1 - i).collect(); g.sort(); g })
            .collect();
        back.sort();
        prop_assert_eq!(&back, &base);
        let scaled: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        prop_assert_eq!(partition(&hdbscan(&points(&scaled), &params).unwrap().labels), base);
    }
}
