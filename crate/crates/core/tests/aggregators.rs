mod common;

use pvg_core::aggregate::{
    baseline_aggregate, decomposition_check, maxe_aggregate, maxe_update, AggregatorKind, AggregatorSpec,
};
use pvg_core::graph::GraphTopology;
use pvg_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn topo(rows: Vec<Vec<usize>>) -> GraphTopology {
    let k = rows[0].len();
    GraphTopology {
        n_nodes: rows.len(),
        k,
        neighbor_sim: vec![vec![0.0; k]; rows.len()],
        neighbor_idx: rows,
        clamp: None,
    }
}

fn maxe(x: &Tensor<f64>, t: &GraphTopology) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = maxe_aggregate(&mut tape, xv, t).unwrap();
    tape.take_value(out)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

fn matvec(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    let o = w.shape()[1];
    (0..o).map(|q| x.iter().enumerate().map(|(r, v)| v * w.get(&[r, q])).sum()).collect()
}

#[test]
fn decomposition_identity_holds_to_rounding() {
    let worst = common::decomposition_trials(1000);
    assert!(worst <= 1e-12, "residual {worst}");
}

#[test]
fn recursion_telescopes_exactly() {
    let (runs, inexact) = common::telescoping_trials(250);
    assert_eq!(runs, 1000);
    assert_eq!(inexact, 0);
}

#[test]
fn decomposition_hand_chain() {
    let r = decomposition_check(&[1.0, 3.0, 2.0], 2).unwrap();
    let l = r.levels[0];
    assert_eq!((l.max, l.mean, l.selected, l.bound), (3.0, 2.0, 1.0, 2.0));
    assert_eq!(l.mean + (l.selected - l.mean) + l.bound, 3.0);
    assert_eq!(r.telescoped, 3.0);
}

#[test]
fn maxe_hand_cases() {
    let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 3.0]).unwrap();
    assert_eq!(maxe(&x, &topo(vec![vec![1, 2], vec![0, 2], vec![0, 1]])).row(0), &[0.0, 3.0, 2.0]);
    let single = maxe(&x, &topo(vec![vec![2], vec![0], vec![1]]));
    assert_eq!(single.row(0), &[0.0, 3.0, 3.0]);
    let same = Tensor::new(vec![3, 2], vec![1.5, -1.0, 1.5, -1.0, 1.5, -1.0]).unwrap();
    assert_eq!(maxe(&same, &topo(vec![vec![1, 2], vec![0, 2], vec![0, 1]])).row(1), &[1.5, -1.0, 0.0, 0.0, 1.5, -1.0]);
}

#[test]
fn maxe_update_matches_per_node_matmul() {
    let (n, c, o) = (5, 4, 3);
    let x = common::random(&[n, c], 1);
    let t = common::fixed_topology(n, c, 2, 2);
    let w = common::random(&[3 * c, o], 3);
    let agg = maxe(&x, &t);
    let got = baseline_aggregate(&AggregatorSpec::new(AggregatorKind::MaxE, c, o), &x, &t, &[w.clone()]).unwrap();
    for i in 0..n {
        for (g, want) in got.row(i).iter().zip(matvec(agg.row(i), &w)) {
            assert!((g - want).abs() < 1e-12);
        }
    }
    // [I; 0; 0] keeps only the self part
    let mut eye = Tensor::<f64>::zeros(&[3 * c, c]).unwrap();
    for i in 0..c {
        eye.set(&[i, i], 1.0);
    }
    let mut tape = Tape::new();
    let a = tape.constant(agg);
    let wv = tape.constant(eye);
    let y = maxe_update(&mut tape, a, wv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn zeroing_mean_columns_reproduces_mr_graphconv() {
    let (n, c, o) = (9, 5, 4);
    let x = common::random(&[n, c], 10);
    let t = common::fixed_topology(n, c, 3, 11);
    let mut w = common::random(&[3 * c, o], 12);
    for r in 2 * c..3 * c {
        for q in 0..o {
            w.set(&[r, q], 0.0);
        }
    }
    let w_mr = Tensor::new(vec![2 * c, o], w.data()[..2 * c * o].to_vec()).unwrap();
    let maxe_out = baseline_aggregate(&AggregatorSpec::new(AggregatorKind::MaxE, c, o), &x, &t, &[w]).unwrap();
    let mr = baseline_aggregate(&AggregatorSpec::new(AggregatorKind::MrGraphConv, c, o), &x, &t, &[w_mr]).unwrap();
    assert_eq!(maxe_out, mr);
}

#[test]
fn edgeconv_matches_per_edge_enumeration() {
    let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![-0.75, 1.5]]).unwrap();
    let t = topo(vec![vec![1, 2], vec![2, 0], vec![0, 1]]);
    let spec = AggregatorSpec::new(AggregatorKind::EdgeConv, 2, 3);
    let w = spec.init_weights::<f64>(&mut common::rng(4)).unwrap();
    let got = baseline_aggregate(&spec, &x, &t, &w).unwrap();
    for i in 0..3 {
        let mut best = vec![f64::NEG_INFINITY; 3];
        for &j in &t.neighbor_idx[i] {
            let mut edge = x.row(i).to_vec();
            edge.extend(x.row(j).iter().zip(x.row(i)).map(|(a, b)| a - b));
            let hidden: Vec<f64> = matvec(&edge, &w[0]).into_iter().map(|v| v.max(0.0)).collect();
            for (b, v) in best.iter_mut().zip(matvec(&hidden, &w[1])) {
                *b = b.max(v);
            }
        }
        for (g, b) in got.row(i).iter().zip(&best) {
            assert!((g - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gin_and_graphsage_match_hand_forms() {
    let x = common::random(&[4, 3], 20);
    let t = topo(vec![vec![1], vec![2], vec![3], vec![0]]);
    let mut spec = AggregatorSpec::new(AggregatorKind::Gin, 3, 2);
    spec.gin_mlp = true;
    let w = spec.init_weights::<f64>(&mut common::rng(21)).unwrap();
    let got = baseline_aggregate(&spec, &x, &t, &w).unwrap();
    for i in 0..4 {
        let j = t.neighbor_idx[i][0];
        let s: Vec<f64> = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a + b).collect();
        let h: Vec<f64> = matvec(&s, &w[0]).into_iter().map(|v| v.max(0.0)).collect();
        for (g, want) in got.row(i).iter().zip(matvec(&h, &w[1])) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    let t = topo(vec![vec![1, 2], vec![2, 3], vec![3, 0], vec![0, 1]]);
    let spec = AggregatorSpec::new(AggregatorKind::GraphSage, 3, 2);
    let w = spec.init_weights::<f64>(&mut common::rng(22)).unwrap();
    let got = baseline_aggregate(&spec, &x, &t, &w).unwrap();
    for i in 0..4 {
        let mut cat = x.row(i).to_vec();
        let nb: Vec<Vec<f64>> = t.neighbor_idx[i].iter().map(|&j| matvec(x.row(j), &w[0])).collect();
        cat.extend((0..3).map(|ch| nb.iter().map(|r| r[ch]).sum::<f64>() / 2.0));
        for (g, want) in got.row(i).iter().zip(matvec(&cat, &w[1])) {
            assert!((g - want).abs() < 1e-12);
        }
    }
}

#[test]
fn mr_graphconv_with_equal_neighbourhood_sees_zero_difference() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    let t = topo(vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
    let spec = AggregatorSpec::new(AggregatorKind::MrGraphConv, 2, 2);
    let w = common::random(&[4, 2], 5);
    let got = baseline_aggregate(&spec, &x, &t, &[w.clone()]).unwrap();
    assert_eq!(got.row(0), matvec(&[1.0, 2.0, 0.0, 0.0], &w).as_slice());
}

#[test]
fn parameter_ratios_against_single_linear_gin() {
    for c in [8, 32, 96] {
        let ratio = |k| AggregatorSpec::new(k, c, c).ratio_vs_gin();
        assert_eq!(ratio(AggregatorKind::MaxE), 3.0);
        assert_eq!(ratio(AggregatorKind::MrGraphConv), 2.0);
        assert_eq!(ratio(AggregatorKind::Gin), 1.0);
        assert_eq!(AggregatorSpec::new(AggregatorKind::MaxE, c, c).param_count(), 3 * c * c);
        assert!(ratio(AggregatorKind::EdgeConv) > ratio(AggregatorKind::MaxE));
    }
}

proptest! {
    #[test]
    fn maxe_ignores_neighbour_order(n in 3usize..12, c in 1usize..5, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n - 1);
        let x = common::random(&[n, c], seed);
        let t = common::fixed_topology(n, c, k, seed ^ 7);
        let mut shuffled = t.clone();
        let mut r = common::rng(seed);
        for row in &mut shuffled.neighbor_idx {
            row.shuffle(&mut r);
        }
        // the max parts are order-free exactly; the mean may differ in the last bit
        let (a, b) = (maxe(&x, &t), maxe(&x, &shuffled));
        prop_assert_eq!(&rows(&a).iter().map(|r| r[..2 * c].to_vec()).collect::<Vec<_>>(), &rows(&b).iter().map(|r| r[..2 * c].to_vec()).collect::<Vec<_>>());
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-15);
    }
}
