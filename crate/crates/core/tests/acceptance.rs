//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to see them.

mod common;

use std::time::{Duration, Instant};

use pvg_core::aggregate::{AggregatorKind, AggregatorSpec};
use pvg_core::diagnostics::{diversity, trace_diversity};
use pvg_core::graphlu::phi;
use pvg_core::net::{ActivationKind, Model, ModelConfig};
use pvg_core::train::{image_at, train};
use pvg_core::{Tape, Tensor};

struct Suite {
    results: Vec<(&'static str, bool)>,
}

impl Suite {
    fn record(&mut self, name: &'static str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.results.push((name, ok));
    }
}

fn gradient_certification(suite: &mut Suite) {
    let start = Instant::now();
    let mut reports = common::op_reports().unwrap();
    reports.extend(common::aggregator_reports().unwrap());
    reports.extend(common::model_reports().unwrap());
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed || r.probe_count < 20 || r.max_rel_error > 1e-4)
        .map(|r| r.op_name.as_str())
        .collect();
    let ok = failing.is_empty() && elapsed < Duration::from_secs(300);
    suite.record(
        "gradient certification",
        ok,
        format!(
            "{} checks, worst relative error {worst:.2e}, min probes {}, {:.1}s, failing {failing:?}",
            reports.len(),
            reports.iter().map(|r| r.probe_count).min().unwrap_or(0),
            elapsed.as_secs_f64()
        ),
    );
}

fn knn(suite: &mut Suite) {
    let (rows, bad) = common::knn_trials(100);
    suite.record("knn oracle equivalence", bad == 0, format!("100 trials, {rows} rows, {bad} mismatches"));
}

fn second_order(suite: &mut Suite) {
    let worst = common::second_order_trials(50);
    suite.record("second-order equivalence", worst <= 1e-5, format!("50 trials, worst relative error {worst:.2e} (f32)"));
}

fn decomposition(suite: &mut Suite) {
    let worst = common::decomposition_trials(1000);
    let (runs, inexact) = common::telescoping_trials(1000);
    suite.record(
        "max decomposition and telescoping",
        worst <= 1e-12 && inexact == 0,
        format!("1000 vectors, worst residual {worst:.2e}; {runs} recursions to depth 4, {inexact} inexact"),
    );
}

fn graphlu_limit(suite: &mut Suite) {
    let dev = common::gelu_grid_deviation(10_000);
    let half = phi(0.0f64, 0.0) == 0.5 && phi(0.0f32, 0.0) == 0.5 && phi(0.0f64, 2.5) == 0.5;
    suite.record(
        "graphlu limit",
        dev <= 1e-6 && half,
        format!("max deviation from exact GELU {dev:.2e} on 10000 points; phi(0) = 0.5: {half}"),
    );
}

fn parameter_ratios(suite: &mut Suite) {
    let mut ok = true;
    let mut detail = String::new();
    for c in [8, 32, 64, 192] {
        let ratio = |k| AggregatorSpec::new(k, c, c).ratio_vs_gin();
        ok &= ratio(AggregatorKind::MaxE) == 3.0 && ratio(AggregatorKind::MrGraphConv) == 2.0;
        if c == 64 {
            detail = format!(
                "c=64: MaxE {} MRGraphConv {} EdgeConv {} GraphSAGE {} (last two reported only)",
                ratio(AggregatorKind::MaxE),
                ratio(AggregatorKind::MrGraphConv),
                ratio(AggregatorKind::EdgeConv),
                ratio(AggregatorKind::GraphSage)
            );
        }
    }
    suite.record("parameter ratios", ok, detail);
}

fn chebyshev(suite: &mut Suite) {
    let (entries, bad) = common::chebyshev_trials(16, &[1, 2, 3]);
    suite.record("chebyshev mask oracle", bad == 0, format!("{entries} pairs checked, {bad} mismatches"));
}

fn residual_identity(suite: &mut Suite) {
    let mut model = Model::<f32>::new(ModelConfig::tiny(4), 1).unwrap();
    model.zero_branch_outputs();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let mut blocks = 0;
    let mut exact = 0;
    for (s, b) in model.block_ids() {
        let (gh, gw) = model.stage_grid(s);
        let c = model.block_channels(s, b).total();
        let h = common::random(&[gh * gw, c], (s * 10 + b) as u64).cast::<f32>();
        let hv = tape.constant(h.clone());
        let (out, _) = model.block_forward(&mut tape, &vars, s, b, hv, None).unwrap();
        blocks += 1;
        exact += usize::from(tape.value(out) == &h);
    }
    suite.record("residual identity", blocks == exact, format!("{exact}/{blocks} blocks exact identity"));
}

fn learnability(suite: &mut Suite) {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let run = common::learn_run(dir.path());
        let data = run.data.clone().unwrap().load(2).unwrap();
        let start = Instant::now();
        let out = train(&run, &data).unwrap();
        let elapsed = start.elapsed();
        let files = (
            std::fs::read(&out.metrics_path).unwrap(),
            std::fs::read(&out.diversity_path).unwrap(),
        );
        runs.push((out.history, files, elapsed));
    }
    let (history, files, _) = &runs[0];
    let best = history.iter().map(|m| m.train_acc).fold(0.0, f64::max);
    let reached = history.iter().find(|m| m.train_acc >= 0.95).map(|m| m.epoch);
    let deterministic = runs[1].0 == *history && runs[1].1 == *files;
    let slowest = runs.iter().map(|r| r.2).max().unwrap();
    suite.record(
        "learnability",
        reached.is_some_and(|e| e <= 30) && deterministic && slowest <= Duration::from_secs(900),
        format!(
            "{} epochs, best train accuracy {best:.4}, first epoch at 0.95: {reached:?}, deterministic: {deterministic}, slowest run {:.0}s",
            history.len(),
            slowest.as_secs_f64()
        ),
    );
}

fn diversity_instrumentation(suite: &mut Suite) {
    let pair = diversity(&Tensor::from_rows(&[vec![0.0f64], vec![2.0]]).unwrap()).unwrap();
    let same = diversity(&Tensor::from_rows(&vec![vec![0.3f64, -7.0, 2.5]; 9]).unwrap()).unwrap();

    let images: Vec<Tensor<f32>> = {
        let data = pvg_core::train::patch_dataset(4, 32, 8, 9).unwrap();
        (0..4).map(|i| image_at(&data.images, i)).collect()
    };
    let mut traces = Vec::new();
    for act in [ActivationKind::GraphLu, ActivationKind::Gelu] {
        let mut cfg = common::deep_config(2);
        cfg.activation = act;
        let model = Model::<f32>::new(cfg, 4).unwrap();
        traces.push(trace_diversity(&model, &images, "deep").unwrap());
    }
    let mut buf = Vec::new();
    traces[0].write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    let complete = text.starts_with("run_id,block,diversity\n")
        && rows.len() == 21
        && rows.iter().enumerate().all(|(b, r)| {
            let f: Vec<&str> = r.split(',').collect();
            f.len() == 3 && f[1] == b.to_string() && f[2].parse::<f64>().is_ok_and(|d| d.is_finite() && d >= 0.0)
        });
    let last = |i: usize| traces[i].per_block.last().unwrap().1;
    suite.record(
        "diversity instrumentation",
        pair == 1.0 && same == 0.0 && complete,
        format!(
            "two-node {pair}, identical rows {same}, 21-block trace complete: {complete}; at init last block GraphLU {:.4} vs GELU {:.4} (not asserted)",
            last(0),
            last(1)
        ),
    );
}

#[test]
fn acceptance() {
    let mut suite = Suite { results: Vec::new() };
    gradient_certification(&mut suite);
    knn(&mut suite);
    second_order(&mut suite);
    decomposition(&mut suite);
    graphlu_limit(&mut suite);
    parameter_ratios(&mut suite);
    chebyshev(&mut suite);
    residual_identity(&mut suite);
    learnability(&mut suite);
    diversity_instrumentation(&mut suite);
    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("{}/{} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    assert!(failed.is_empty(), "failed: {failed:?}");
}
