//! Neighbour aggregation and node update rules.
//!
//! MaxE concatenates a node's own features, the channel-wise max of
//! neighbour differences and the neighbour mean, then applies one linear map.
//! The four comparison rules (MR GraphConv, EdgeConv, GraphSAGE, GIN) share
//! the same interface so they can be swapped into a block.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::ops::ReduceMode;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    #[default]
    MaxE,
    MrGraphConv,
    EdgeConv,
    GraphSage,
    Gin,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Gin,
        AggregatorKind::MrGraphConv,
        AggregatorKind::EdgeConv,
        AggregatorKind::GraphSage,
        AggregatorKind::MaxE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::MaxE => "MaxE",
            AggregatorKind::MrGraphConv => "MRGraphConv",
            AggregatorKind::EdgeConv => "EdgeConv",
            AggregatorKind::GraphSage => "GraphSAGE",
            AggregatorKind::Gin => "GIN",
        }
    }
}

/// Shape-level description of an aggregator. All transforms are bias-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    pub in_c: usize,
    pub out_c: usize,
    /// GIN only: two-layer MLP instead of the single linear transform.
    #[serde(default)]
    pub gin_mlp: bool,
    /// GIN only: self weight `(1 + ε_g)`.
    #[serde(default)]
    pub gin_eps: f64,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind, in_c: usize, out_c: usize) -> Self {
        Self {
            kind,
            in_c,
            out_c,
            gin_mlp: false,
            gin_eps: 0.0,
        }
    }

    /// Named weight shapes in the order [`aggregate_update`] expects them.
    pub fn weight_shapes(&self) -> Vec<(&'static str, [usize; 2])> {
        let (c, o) = (self.in_c, self.out_c);
        match self.kind {
            AggregatorKind::MaxE => vec![("w", [3 * c, o])],
            AggregatorKind::MrGraphConv => vec![("w", [2 * c, o])],
            AggregatorKind::EdgeConv => vec![("w1", [2 * c, 2 * c]), ("w2", [2 * c, o])],
            AggregatorKind::GraphSage => vec![("w_neighbor", [c, c]), ("w", [2 * c, o])],
            AggregatorKind::Gin if self.gin_mlp => vec![("w1", [c, o]), ("w2", [o, o])],
            AggregatorKind::Gin => vec![("w", [c, o])],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shapes().iter().map(|(_, s)| s[0] * s[1]).sum()
    }

    /// Parameter count in units of a single-linear GIN transform at the same
    /// widths.
    pub fn ratio_vs_gin(&self) -> f64 {
        let unit = AggregatorSpec::new(AggregatorKind::Gin, self.in_c, self.out_c).param_count();
        self.param_count() as f64 / unit as f64
    }

    /// Multiply-adds of one update over `n` nodes with `k` neighbours each.
    pub fn mult_adds(&self, n: usize, k: usize) -> usize {
        let (c, o) = (self.in_c, self.out_c);
        match self.kind {
            AggregatorKind::MaxE => n * 3 * c * o,
            AggregatorKind::MrGraphConv => n * 2 * c * o,
            AggregatorKind::EdgeConv => n * k * (4 * c * c + 2 * c * o),
            AggregatorKind::GraphSage => n * k * c * c + n * 2 * c * o,
            AggregatorKind::Gin if self.gin_mlp => n * (c * o + o * o),
            AggregatorKind::Gin => n * c * o,
        }
    }

    pub fn init_weights<T: Scalar>(&self, rng: &mut impl rand::Rng) -> Result<Vec<Tensor<T>>> {
        self.weight_shapes()
            .iter()
            .map(|(_, s)| Tensor::uniform(s, 1.0 / (s[0] as f64).sqrt(), rng))
            .collect()
    }
}

struct Gathered {
    neighbors: Var,
    selves: Var,
    n: usize,
    k: usize,
    c: usize,
}

fn gather_edges<T: Scalar>(tape: &mut Tape<T>, x: Var, topo: &GraphTopology) -> Result<Gathered> {
    let (n, c) = tape.value(x).dims2()?;
    if topo.n_nodes != n {
        return Err(Error::dim(
            "aggregate",
            format!("topology over {} nodes for {n} feature rows", topo.n_nodes),
        ));
    }
    if topo.k == 0 || topo.neighbor_idx.iter().any(Vec::is_empty) {
        return Err(Error::DegenerateInput("empty neighbour row".into()));
    }
    let k = topo.k;
    let flat = topo.flat_neighbors();
    let selves: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let neighbors = tape.gather_rows(x, &flat)?;
    let selves = tape.gather_rows(x, &selves)?;
    Ok(Gathered {
        neighbors,
        selves,
        n,
        k,
        c,
    })
}

/// Channel-wise `max_j (x_j − x_i)` and `mean_j x_j` over each node's
/// neighbours.
fn max_diff_and_mean<T: Scalar>(tape: &mut Tape<T>, e: &Gathered) -> Result<(Var, Var)> {
    let diff = tape.sub(e.neighbors, e.selves)?;
    let diff = tape.reshape(diff, vec![e.n, e.k, e.c])?;
    let max = tape.reduce(diff, 1, ReduceMode::Max)?;
    let nb = tape.reshape(e.neighbors, vec![e.n, e.k, e.c])?;
    let mean = tape.reduce(nb, 1, ReduceMode::Mean)?;
    Ok((max, mean))
}

/// `[x_i ‖ max_j(x_j − x_i) ‖ mean_j x_j]`, shape `n×3c`.
pub fn maxe_aggregate<T: Scalar>(tape: &mut Tape<T>, x: Var, topo: &GraphTopology) -> Result<Var> {
    let e = gather_edges(tape, x, topo)?;
    let (max, mean) = max_diff_and_mean(tape, &e)?;
    tape.concat(&[x, max, mean], 1)
}

/// Linear update of a MaxE aggregate.
pub fn maxe_update<T: Scalar>(tape: &mut Tape<T>, agg: Var, w: Var) -> Result<Var> {
    tape.matmul(agg, w)
}

/// Aggregate-and-update for any [`AggregatorKind`]; `weights` follow
/// [`AggregatorSpec::weight_shapes`].
pub fn aggregate_update<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &AggregatorSpec,
    x: Var,
    topo: &GraphTopology,
    weights: &[Var],
) -> Result<Var> {
    let expected = spec.weight_shapes();
    if weights.len() != expected.len() {
        return Err(Error::dim(
            "aggregate",
            format!("{} weights for {}, expected {}", weights.len(), spec.kind.name(), expected.len()),
        ));
    }
    for (&w, (name, shape)) in weights.iter().zip(&expected) {
        if tape.shape(w) != shape {
            return Err(Error::dim(
                "aggregate",
                format!("{} weight {name} is {:?}, expected {shape:?}", spec.kind.name(), tape.shape(w)),
            ));
        }
    }
    if tape.shape(x).get(1) != Some(&spec.in_c) {
        return Err(Error::dim("aggregate", format!("input {:?} for in_c {}", tape.shape(x), spec.in_c)));
    }

    match spec.kind {
        AggregatorKind::MaxE => {
            let agg = maxe_aggregate(tape, x, topo)?;
            maxe_update(tape, agg, weights[0])
        }
        AggregatorKind::MrGraphConv => {
            let e = gather_edges(tape, x, topo)?;
            let (max, _) = max_diff_and_mean(tape, &e)?;
            let cat = tape.concat(&[x, max], 1)?;
            tape.matmul(cat, weights[0])
        }
        AggregatorKind::EdgeConv => {
            let e = gather_edges(tape, x, topo)?;
            let diff = tape.sub(e.neighbors, e.selves)?;
            let edge = tape.concat(&[e.selves, diff], 1)?;
            let h = tape.matmul(edge, weights[0])?;
            let h = tape.max0(h);
            let h = tape.matmul(h, weights[1])?;
            let h = tape.reshape(h, vec![e.n, e.k, spec.out_c])?;
            tape.reduce(h, 1, ReduceMode::Max)
        }
        AggregatorKind::GraphSage => {
            let e = gather_edges(tape, x, topo)?;
            let nb = tape.matmul(e.neighbors, weights[0])?;
            let nb = tape.reshape(nb, vec![e.n, e.k, e.c])?;
            let mean = tape.reduce(nb, 1, ReduceMode::Mean)?;
            let cat = tape.concat(&[x, mean], 1)?;
            tape.matmul(cat, weights[1])
        }
        AggregatorKind::Gin => {
            let e = gather_edges(tape, x, topo)?;
            let nb = tape.reshape(e.neighbors, vec![e.n, e.k, e.c])?;
            let sum = tape.reduce(nb, 1, ReduceMode::Sum)?;
            let own = tape.scale(x, T::one() + T::from_f64_lossy(spec.gin_eps));
            let h = tape.add(own, sum)?;
            let h = tape.matmul(h, weights[0])?;
            if spec.gin_mlp {
                let h = tape.max0(h);
                tape.matmul(h, weights[1])
            } else {
                Ok(h)
            }
        }
    }
}

/// Value-only evaluation of [`aggregate_update`].
pub fn baseline_aggregate<T: Scalar>(
    spec: &AggregatorSpec,
    x: &Tensor<T>,
    topo: &GraphTopology,
    weights: &[Tensor<T>],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv: Vec<Var> = weights.iter().map(|w| tape.constant(w.clone())).collect();
    let out = aggregate_update(&mut tape, spec, xv, topo, &wv)?;
    Ok(tape.take_value(out))
}

/// One level of the max decomposition
/// `max(z) = z̄ + (z″ − z̄) + max(z′ − z_j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionLevel {
    /// `z′ = max(z)`.
    pub max: f64,
    /// `z̄ = mean(z)`.
    pub mean: f64,
    /// `z″`, the element maximising `z′ − z_j` (the minimum).
    pub selected: f64,
    /// `z″ − z̄`.
    pub remainder: f64,
    /// `max_j (z′ − z_j)`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub levels: Vec<DecompositionLevel>,
    /// `|z̄ + (z″ − z̄) + max(z′ − z_j) − max(z)|` at the first level.
    pub identity_residual: f64,
    /// `Σ_levels (z̄_k + remainder_k) + max(z_{depth+1})`, the unrolled
    /// recursion.
    pub telescoped: f64,
    /// `|telescoped − max(z)|`.
    pub telescoped_error: f64,
}

fn level(z: &[f64]) -> DecompositionLevel {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    // argmax of z′ − z_j; the first occurrence wins on ties
    let mut selected = z[0];
    for &v in &z[1..] {
        if max - v > max - selected {
            selected = v;
        }
    }
    let bound = z.iter().map(|&v| max - v).fold(f64::NEG_INFINITY, f64::max);
    DecompositionLevel {
        max,
        mean,
        selected,
        remainder: selected - mean,
        bound,
    }
}

/// Evaluates the three-part max decomposition of `z` and unrolls its
/// recursion `z_{k+1} = z′_k − z_k` for `depth` levels.
pub fn decomposition_check(z: &[f64], depth: usize) -> Result<DecompositionReport> {
    if z.is_empty() {
        return Err(Error::DegenerateInput("decomposition of an empty vector".into()));
    }
    let depth = depth.max(1);
    let mut levels = Vec::with_capacity(depth);
    let mut cur = z.to_vec();
    let mut telescoped = 0.0;
    for _ in 0..depth {
        let l = level(&cur);
        telescoped += l.mean + l.remainder;
        cur = cur.iter().map(|&v| l.max - v).collect();
        levels.push(l);
    }
    telescoped += cur.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = levels[0];
    let identity_residual = (first.mean + first.remainder + first.bound - first.max).abs();
    Ok(DecompositionReport {
        identity_residual,
        telescoped,
        telescoped_error: (telescoped - first.max).abs(),
        levels,
    })
}
