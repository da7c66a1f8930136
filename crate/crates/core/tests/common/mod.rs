//! Oracles and fixtures shared by the integration tests and the acceptance
//! report.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use pvg_core::aggregate::{aggregate_update, decomposition_check, AggregatorKind, AggregatorSpec};
use pvg_core::gradcheck::{grad_check, random_projection, GradCheckConfig, GradCheckReport};
use pvg_core::graph::{
    chebyshev_mask, local_branch, pairwise_similarity, second_order_similarity, topk_neighbors, GraphTopology,
    LocalBranchParams, LocalStencil, Metric, NodeGrid,
};
use pvg_core::graphlu::{gelu, graphlu_value, GraphLuForm};
use pvg_core::net::{BlockGraphs, Model, ModelConfig, RatioRamp, TopologyMode};
use pvg_core::ops::ReduceMode;
use pvg_core::train::{DataSource, OptimizerConfig, RunConfig, ScheduleConfig};
use pvg_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut rng(seed)).unwrap()
}

/// Tiny model whose parameters are all drawn at random, so no layer sits at
/// its neutral initial value.
pub fn scrambled(seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(ModelConfig::tiny(3), seed).unwrap();
    let mut r = rng(seed + 100);
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        let bound = if name.ends_with("epsilon") { 0.3 } else { 0.4 };
        for v in t.data_mut() {
            *v = r.random_range(-bound..bound);
        }
        if name.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
    }
    model
}

pub fn check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        probes: 40,
        seed,
        ..GradCheckConfig::default()
    }
}

type Scalarised = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn project(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static, seed: u64) -> Scalarised {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        random_projection(t, y, seed)
    })
}

/// Gradient checks of every tape operation on small random inputs.
pub fn op_reports() -> Result<Vec<GradCheckReport>> {
    let m = |s: &[usize], seed: u64| random(s, seed);
    let grid = NodeGrid::row_major(3, 4);
    let stencil = Arc::new(LocalStencil::new(&grid, 1));
    let stencil2 = Arc::new(LocalStencil::new(&NodeGrid::row_major(4, 4), 2));

    let cases: Vec<(&str, Vec<Tensor<f64>>, Scalarised)> = vec![
        ("matmul", vec![m(&[4, 5], 1), m(&[5, 3], 2)], project(|t, v| t.matmul(v[0], v[1]), 1)),
        ("add", vec![m(&[4, 6], 3), m(&[4, 6], 4)], project(|t, v| t.add(v[0], v[1]), 2)),
        ("sub", vec![m(&[4, 6], 5), m(&[4, 6], 6)], project(|t, v| t.sub(v[0], v[1]), 3)),
        ("mul", vec![m(&[4, 6], 7), m(&[4, 6], 8)], project(|t, v| t.mul(v[0], v[1]), 4)),
        ("scale", vec![m(&[4, 6], 9)], project(|t, v| Ok(t.scale(v[0], -1.7)), 5)),
        (
            "erf",
            vec![ops_scaled(m(&[5, 6], 10), 2.5)],
            project(|t, v| Ok(t.erf(v[0])), 6),
        ),
        ("max0", vec![m(&[5, 6], 11)], project(|t, v| Ok(t.max0(v[0])), 7)),
        (
            "reduce_sum",
            vec![m(&[3, 4, 5], 12)],
            project(|t, v| t.reduce(v[0], 1, ReduceMode::Sum), 8),
        ),
        (
            "reduce_mean",
            vec![m(&[3, 4, 5], 13)],
            project(|t, v| t.reduce(v[0], 0, ReduceMode::Mean), 9),
        ),
        (
            "reduce_max_inner",
            vec![m(&[3, 4, 5], 14)],
            project(|t, v| t.reduce(v[0], 2, ReduceMode::Max), 10),
        ),
        (
            "reduce_max_middle",
            vec![m(&[3, 4, 5], 15)],
            project(|t, v| t.reduce(v[0], 1, ReduceMode::Max), 11),
        ),
        ("sum_all", vec![m(&[4, 6], 16)], Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum_all(v[0]))),
        (
            "concat_rows",
            vec![m(&[2, 5], 17), m(&[3, 5], 18)],
            project(|t, v| t.concat(&[v[0], v[1]], 0), 12),
        ),
        (
            "concat_cols",
            vec![m(&[4, 3], 19), m(&[4, 5], 20), m(&[4, 2], 21)],
            project(|t, v| t.concat(&[v[0], v[1], v[2]], 1), 13),
        ),
        ("narrow", vec![m(&[4, 8], 22)], project(|t, v| t.narrow(v[0], 1, 2, 5), 14)),
        (
            "gather_rows",
            vec![m(&[5, 4], 23)],
            project(|t, v| t.gather_rows(v[0], &[4, 0, 0, 2, 4, 4, 1]), 15),
        ),
        ("reshape", vec![m(&[4, 6], 24)], project(|t, v| t.reshape(v[0], vec![3, 8]), 16)),
        ("broadcast_rows", vec![m(&[24], 25)], project(|t, v| t.broadcast_rows(v[0], 3), 17)),
        (
            "linear",
            vec![m(&[4, 5], 26), m(&[5, 3], 27), m(&[3], 28)],
            project(|t, v| t.linear(v[0], v[1], Some(v[2])), 18),
        ),
        ("row_normalize", vec![m(&[4, 6], 29)], project(|t, v| t.row_normalize(v[0], 1e-5), 19)),
        (
            "graphlu_cdf",
            vec![ops_scaled(m(&[4, 6], 30), 3.0), Tensor::scalar(0.3)],
            project(|t, v| t.graphlu(v[0], v[1], GraphLuForm::Cdf), 20),
        ),
        (
            "graphlu_cdf_at_zero_eps",
            vec![ops_scaled(m(&[4, 6], 31), 3.0), Tensor::scalar(0.0)],
            project(|t, v| t.graphlu(v[0], v[1], GraphLuForm::Cdf), 21),
        ),
        (
            "graphlu_literal",
            vec![ops_scaled(m(&[4, 6], 32), 3.0), Tensor::scalar(-0.4)],
            project(|t, v| t.graphlu(v[0], v[1], GraphLuForm::Literal), 22),
        ),
        (
            "local_conv_r1",
            vec![m(&[12, 3], 33), m(&[9, 3], 34)],
            project(move |t, v| t.local_conv(v[0], v[1], stencil.clone()), 23),
        ),
        (
            "local_conv_r2",
            vec![m(&[16, 2], 35), m(&[25, 2], 36)],
            project(move |t, v| t.local_conv(v[0], v[1], stencil2.clone()), 24),
        ),
        (
            "softmax_cross_entropy",
            vec![ops_scaled(m(&[6, 4], 37), 3.0)],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax_cross_entropy(v[0], &[0, 3, 1, 1, 2, 0])),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| grad_check(name, &inputs, f, &check_config(i as u64)))
        .collect()
}

fn ops_scaled(mut t: Tensor<f64>, s: f64) -> Tensor<f64> {
    t.data_mut().iter_mut().for_each(|v| *v *= s);
    t
}

/// Fixed k-NN topology over random features.
pub fn fixed_topology(n: usize, c: usize, k: usize, seed: u64) -> GraphTopology {
    let x = random(&[n, c], seed);
    topk_neighbors(&pairwise_similarity(&x, Metric::Cosine).unwrap(), k).unwrap()
}

/// Gradient checks of every aggregator with respect to features and weights.
pub fn aggregator_reports() -> Result<Vec<GradCheckReport>> {
    let (n, c, o, k) = (7, 4, 3, 3);
    let topo = Arc::new(fixed_topology(n, c, k, 40));
    let mut specs: Vec<(String, AggregatorSpec)> = AggregatorKind::ALL
        .iter()
        .map(|&kind| (kind.name().to_string(), AggregatorSpec::new(kind, c, o)))
        .collect();
    let mut gin = AggregatorSpec::new(AggregatorKind::Gin, c, o);
    gin.gin_mlp = true;
    gin.gin_eps = 0.25;
    specs.push(("GIN-mlp".into(), gin));

    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, spec))| {
            let mut inputs = vec![random(&[n, c], 50 + i as u64)];
            inputs.extend(spec.init_weights::<f64>(&mut rng(60 + i as u64))?);
            let topo = topo.clone();
            let f = project(
                move |t, v| aggregate_update(t, &spec, v[0], &topo, &v[1..]),
                70 + i as u64,
            );
            grad_check(&format!("aggregate_{name}"), &inputs, f, &check_config(80 + i as u64))
        })
        .collect()
}

fn recorded_graphs(model: &Model<f64>, image: &Tensor<f64>) -> Vec<BlockGraphs> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let x = tape.constant(image.clone());
    model.forward(&mut tape, &vars, x, TopologyMode::Build).unwrap().graphs
}

/// Gradient checks of one block and of the whole tiny network in double
/// precision, with the k-NN topology recorded at the base point and
/// replayed under perturbation.
pub fn model_reports() -> Result<Vec<GradCheckReport>> {
    let model = Arc::new(scrambled(7));
    let cfg = model.config().clone();
    let image = {
        let mut r = rng(8);
        let [h, w] = cfg.image_size;
        Tensor::new(
            vec![h, w, cfg.in_channels],
            (0..h * w * cfg.in_channels).map(|_| r.random_range(0.0..1.0)).collect(),
        )?
    };
    let graphs = Arc::new(recorded_graphs(&model, &image));
    let params: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    let mut reports = Vec::new();

    // one block, stage 2 block 1, with its own input features
    {
        let (gh, gw) = model.stage_grid(2);
        let c = model.block_channels(2, 1).total();
        let h0 = random(&[gh * gw, c], 9);
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let hv = tape.constant(h0.clone());
        let (_, g) = model.block_forward(&mut tape, &vars, 2, 1, hv, None)?;
        let g = Arc::new(g);
        let mut inputs = vec![h0];
        inputs.extend(params.iter().cloned());
        let m = model.clone();
        let f = project(
            move |t, v| Ok(m.block_forward(t, &v[1..], 2, 1, v[0], Some(&g))?.0),
            90,
        );
        reports.push(grad_check("pvg_block", &inputs, f, &check_config(91))?);
    }

    // full network over image and every parameter
    {
        let mut inputs = vec![image.clone()];
        inputs.extend(params.iter().cloned());
        let (m, g) = (model.clone(), graphs.clone());
        let f = project(
            move |t, v| Ok(m.forward(t, &v[1..], v[0], TopologyMode::Replay(&g))?.logits),
            92,
        );
        reports.push(grad_check("pvg_tiny_forward", &inputs, f, &check_config(93))?);
    }

    // full network restricted to subsets the random probes above rarely hit
    let subsets: [(&str, fn(&str, &Tensor<f64>) -> bool); 2] = [
        ("pvg_tiny_small_params", |_, t| t.rank() <= 1),
        ("pvg_tiny_eps_and_local", |n, _| {
            n.ends_with("epsilon") || n.ends_with("local.w") || n.ends_with("local.pos")
        }),
    ];
    for (i, (label, pick)) in subsets.into_iter().enumerate() {
        let chosen: Vec<usize> = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, (n, t))| pick(n, t))
            .map(|(i, _)| i)
            .collect();
        let inputs: Vec<Tensor<f64>> = chosen.iter().map(|&i| params[i].clone()).collect();
        let (m, g) = (model.clone(), graphs.clone());
        let (all, img) = (params.clone(), image.clone());
        let f = project(
            move |t, v| {
                let mut vars = Vec::with_capacity(all.len());
                let mut next = 0;
                for (i, p) in all.iter().enumerate() {
                    if chosen.get(next) == Some(&i) {
                        vars.push(v[next]);
                        next += 1;
                    } else {
                        vars.push(t.constant(p.clone()));
                    }
                }
                let x = t.constant(img.clone());
                Ok(m.forward(t, &vars, x, TopologyMode::Replay(&g))?.logits)
            },
            94 + i as u64,
        );
        reports.push(grad_check(label, &inputs, f, &check_config(96 + i as u64))?);
    }
    Ok(reports)
}

/// Neighbours of every row by sorting all off-diagonal entries, larger
/// similarity first and lower index on ties.
pub fn brute_topk(s: &Tensor<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = s.shape()[0];
    (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| s.row(i)[b].partial_cmp(&s.row(i)[a]).unwrap().then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect()
}

/// Runs `trials` seeded comparisons of `topk_neighbors` against
/// [`brute_topk`] for every k. Every third trial quantises the similarities
/// so that ties are common. Returns `(rows compared, rows differing)`.
pub fn knn_trials(trials: u64) -> (usize, usize) {
    let (mut rows, mut bad) = (0, 0);
    for seed in 0..trials {
        let mut r = rng(1000 + seed);
        let n = r.random_range(2..=64);
        let quantise = seed % 3 == 0;
        let mut s = Tensor::<f64>::zeros(&[n, n]).unwrap();
        for v in s.data_mut() {
            let x: f64 = r.random_range(-1.0..1.0);
            *v = if quantise { (x * 4.0).round() / 4.0 } else { x };
        }
        for k in 1..n {
            let topo = topk_neighbors(&s, k).unwrap();
            let want = brute_topk(&s, k);
            for i in 0..n {
                rows += 1;
                let sims: Vec<f64> = want[i].iter().map(|&j| s.row(i)[j]).collect();
                if topo.neighbor_idx[i] != want[i] || topo.neighbor_sim[i] != sims {
                    bad += 1;
                }
            }
        }
    }
    (rows, bad)
}

/// Compares `chebyshev_mask` with a pairwise enumeration on every grid up to
/// `max_side × max_side` for each radius. Returns `(entries, mismatches)`.
pub fn chebyshev_trials(max_side: usize, radii: &[usize]) -> (usize, usize) {
    let (mut entries, mut bad) = (0, 0);
    for h in 1..=max_side {
        for w in 1..=max_side {
            for &r in radii {
                let mask = chebyshev_mask::<f64>(h, w, r).unwrap();
                let n = h * w;
                for a in 0..n {
                    for b in 0..n {
                        let (ya, xa) = ((a / w) as isize, (a % w) as isize);
                        let (yb, xb) = ((b / w) as isize, (b % w) as isize);
                        let within = (ya - yb).abs() <= r as isize && (xa - xb).abs() <= r as isize;
                        entries += 1;
                        if mask.row(a)[b] != f64::from(u8::from(within)) {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    (entries, bad)
}

/// Largest `‖S_pipeline − S_direct‖∞ / ‖S_direct‖∞` over `trials` random
/// f32 problems with at most 16 nodes.
pub fn second_order_trials(trials: u64) -> f64 {
    const GRIDS: [(usize, usize); 7] = [(4, 4), (2, 8), (3, 5), (1, 16), (3, 3), (2, 2), (4, 3)];
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut r = rng(2000 + seed);
        let (h, w) = GRIDS[r.random_range(0..GRIDS.len())];
        let radius: usize = r.random_range(1..=3);
        let c = r.random_range(1..=8);
        let grid = NodeGrid::row_major(h, w);
        let x = Tensor::<f32>::uniform(&[h * w, c], 1.0, &mut r).unwrap();
        let alpha = Tensor::<f32>::uniform(&[(2 * radius + 1).pow(2), c], 1.0, &mut r).unwrap();
        let params = LocalBranchParams::new(radius, alpha).unwrap();
        let pipeline = pairwise_similarity(&local_branch(&x, &params, &grid).unwrap(), Metric::Dot).unwrap();
        let direct = second_order_similarity(&x, &params.neighborhoods(&grid)).unwrap();
        let scale = direct.data().iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        let diff = pipeline.max_abs_diff(&direct).unwrap() as f64;
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    worst
}

/// Largest first-level identity residual over `trials` random real vectors
/// of length 1 to 32.
pub fn decomposition_trials(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut r = rng(3000 + seed);
        let k = r.random_range(1..=32);
        let scale = 10f64.powi(r.random_range(-3..=3));
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-scale..scale)).collect();
        worst = worst.max(decomposition_check(&z, 1).unwrap().identity_residual);
    }
    worst
}

/// Unrolls the recursion to depths 1 through 4 on integer-valued vectors
/// with power-of-two lengths, where every intermediate is representable, and
/// counts reconstructions that differ from `max(z)` in any bit.
pub fn telescoping_trials(trials: u64) -> (usize, usize) {
    let (mut runs, mut inexact) = (0, 0);
    for seed in 0..trials {
        let mut r = rng(4000 + seed);
        let k = 1usize << r.random_range(0..=5);
        let z: Vec<f64> = (0..k).map(|_| r.random_range(-1000i32..=1000) as f64).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for depth in 1..=4 {
            runs += 1;
            let rep = decomposition_check(&z, depth).unwrap();
            if rep.telescoped != max || rep.telescoped_error != 0.0 {
                inexact += 1;
            }
        }
    }
    (runs, inexact)
}

/// Largest `|graphlu(x, 0) − gelu(x)|` over `points` evenly spaced x in
/// `[−6, 6]`, with GELU evaluated from an independent series erf.
pub fn gelu_grid_deviation(points: usize) -> f64 {
    (0..points)
        .map(|i| {
            let x = -6.0 + 12.0 * i as f64 / (points - 1) as f64;
            let reference = 0.5 * x * (1.0 + erf_oracle(x / std::f64::consts::SQRT_2));
            let y = graphlu_value(x, 0.0, GraphLuForm::Cdf);
            (y - reference).abs().max((gelu(x) - reference).abs())
        })
        .fold(0.0, f64::max)
}

/// erf from its Maclaurin series for |x| ≤ 3 and the continued fraction of
/// erfc beyond.
pub fn erf_oracle(x: f64) -> f64 {
    let a = x.abs();
    let v = if a <= 3.0 {
        let mut term = a;
        let mut sum = a;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -a * a / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        sum * std::f64::consts::FRAC_2_SQRT_PI
    } else {
        // erfc(a) = e^{-a²}/√π · 1/(a + 1/2/(a + 1/(a + 3/2/(a + ...))))
        let mut f = a;
        for n in (1..60).rev() {
            f = a + (n as f64 / 2.0) / f;
        }
        1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / f
    };
    v.copysign(x)
}

/// `(2/√π)∫₀^x e^{−t²} dt` by composite Simpson with `intervals` panels.
pub fn erf_simpson(x: f64, intervals: usize) -> f64 {
    let h = x / intervals as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..intervals {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 * std::f64::consts::FRAC_2_SQRT_PI
}

/// Tiny-width model with 21 blocks in total.
pub fn deep_config(num_classes: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(num_classes);
    cfg.stage_depths = [3, 3, 12, 3];
    cfg.stage_widths = [32, 32, 64, 64];
    cfg.stage_k = [4, 4, 4, 3];
    cfg.schedule = [RatioRamp {
        start: 0.25,
        end: 0.75,
    }; 4];
    cfg
}

pub const LEARN_EPOCHS: usize = 8;
pub const LEARN_IMAGES: usize = 512;
pub const LEARN_BATCH: usize = 32;

/// PVG-Tiny on the two-class patch set: 512 images of 32×32, batch 32.
pub fn learn_run(output_dir: &Path) -> RunConfig {
    let total = LEARN_EPOCHS * LEARN_IMAGES.div_ceil(LEARN_BATCH);
    RunConfig {
        model: ModelConfig::tiny(2),
        optimizer: OptimizerConfig::default(),
        schedule: ScheduleConfig::with_default_warmup(total),
        batch_size: LEARN_BATCH,
        seed: 17,
        output_dir: output_dir.to_path_buf(),
        data: Some(DataSource::Synthetic {
            n: LEARN_IMAGES,
            size: 32,
            patch: 8,
            seed: 5,
        }),
        run_id: "learn".into(),
        diversity_every: 1,
        diversity_images: 16,
    }
}

/// Smallest run that exercises every output file.
pub fn quick_run(output_dir: &Path, lr: f64) -> RunConfig {
    let mut run = learn_run(output_dir);
    run.optimizer.lr = lr;
    run.schedule = ScheduleConfig {
        warmup_steps: 1,
        total_steps: 6,
    };
    run.batch_size = 4;
    run.data = Some(DataSource::Synthetic {
        n: 12,
        size: 32,
        patch: 8,
        seed: 3,
    });
    run.diversity_images = 2;
    run.run_id = "quick".into();
    run
}
