//! Per-block graph construction.
//!
//! Covers first-order similarity and top-k sparsification for the global
//! graphs, the Chebyshev-bounded stencil of the local branch, the progressive
//! channel schedule, and the direct form of second-order similarity.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dot,
    #[default]
    Cosine,
    NegEuclidean,
}

/// `S[i][j] = l(x_i, x_j)` for every pair of rows of `x[n×c]`.
pub fn pairwise_similarity<T: Scalar>(x: &Tensor<T>, metric: Metric) -> Result<Tensor<T>> {
    let (n, _) = x.dims2()?;
    if n < 2 {
        return Err(Error::DegenerateInput(format!("similarity needs at least 2 nodes, got {n}")));
    }
    let rows: Vec<&[T]> = (0..n).map(|i| x.row(i)).collect();
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (&u, &v)| s + u * v);

    let normed;
    let rows = if metric == Metric::Cosine {
        normed = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let norm = dot(r, r).sqrt();
                if norm == T::zero() {
                    return Err(Error::DegenerateInput(format!("row {i} has zero norm under cosine")));
                }
                Ok(r.iter().map(|&v| v / norm).collect::<Vec<T>>())
            })
            .collect::<Result<Vec<_>>>()?;
        normed.iter().map(Vec::as_slice).collect()
    } else {
        rows
    };

    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let v = match metric {
                Metric::Dot | Metric::Cosine => dot(rows[i], rows[j]),
                Metric::NegEuclidean => -rows[i]
                    .iter()
                    .zip(rows[j])
                    .fold(T::zero(), |a, (&u, &w)| a + (u - w) * (u - w))
                    .sqrt(),
            };
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Ok(Tensor::from_parts(vec![n, n], s))
}

/// Similarity used inside the network. Same as [`pairwise_similarity`]
/// except that under cosine a zero row is compared as the zero vector rather
/// than rejected, since features collapsing to zero is a legitimate model
/// state.
pub fn graph_similarity<T: Scalar>(x: &Tensor<T>, metric: Metric) -> Result<Tensor<T>> {
    if metric != Metric::Cosine {
        return pairwise_similarity(x, metric);
    }
    let (n, c) = x.dims2()?;
    let mut unit = x.data().to_vec();
    for row in unit.chunks_exact_mut(c) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    pairwise_similarity(&Tensor::from_parts(vec![n, c], unit), Metric::Dot)
}

/// Emitted when the requested neighbour count cannot be met.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KClamp {
    pub requested: usize,
    pub effective: usize,
}

/// k-nearest-neighbour graph: row `i` lists the `k` most similar other nodes
/// in descending similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    pub n_nodes: usize,
    pub k: usize,
    pub neighbor_idx: Vec<Vec<usize>>,
    pub neighbor_sim: Vec<Vec<f64>>,
    pub clamp: Option<KClamp>,
}

impl GraphTopology {
    /// Checks the structural invariants: no self loops, indices in range,
    /// no duplicates, similarities non-increasing along each row.
    pub fn validate(&self) -> Result<()> {
        if self.neighbor_idx.len() != self.n_nodes || self.neighbor_sim.len() != self.n_nodes {
            return Err(Error::DegenerateInput("row count differs from n_nodes".into()));
        }
        for (i, (idx, sim)) in self.neighbor_idx.iter().zip(&self.neighbor_sim).enumerate() {
            if idx.len() != self.k || sim.len() != self.k {
                return Err(Error::DegenerateInput(format!("row {i} does not hold k={} entries", self.k)));
            }
            for (p, &j) in idx.iter().enumerate() {
                if j == i || j >= self.n_nodes || idx[..p].contains(&j) {
                    return Err(Error::DegenerateInput(format!("row {i} has invalid neighbour {j}")));
                }
            }
            if sim.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::DegenerateInput(format!("row {i} similarities increase")));
            }
        }
        Ok(())
    }

    /// Flat neighbour index list, row after row.
    pub fn flat_neighbors(&self) -> Vec<usize> {
        self.neighbor_idx.concat()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for j in self.neighbor_idx.iter().flatten() {
            deg[*j] += 1;
        }
        deg
    }

    /// Writes `block,node,neighbor,rank,similarity` rows, header first when
    /// `header` is set.
    pub fn write_edges<W: Write>(&self, block: usize, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["block", "node", "neighbor", "rank", "similarity"])?;
        }
        for (i, (idx, sim)) in self.neighbor_idx.iter().zip(&self.neighbor_sim).enumerate() {
            for (rank, (&j, &s)) in idx.iter().zip(sim).enumerate() {
                w.write_record([
                    block.to_string(),
                    i.to_string(),
                    j.to_string(),
                    rank.to_string(),
                    format!("{s}"),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("edge csv", e))?;
        Ok(())
    }
}

/// Keeps, per row, the `k` largest off-diagonal entries of `s[n×n]`; equal
/// similarities are ordered by lower node index. `k ≥ n` is clamped to `n−1`
/// and recorded in [`GraphTopology::clamp`].
pub fn topk_neighbors<T: Scalar>(s: &Tensor<T>, k: usize) -> Result<GraphTopology> {
    let (n, m) = s.dims2()?;
    if n != m {
        return Err(Error::dim("topk_neighbors", format!("similarity matrix is {n}×{m}")));
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!("top-k needs at least 2 nodes, got {n}")));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (k_eff, clamp) = if k >= n {
        log::warn!("k={k} exceeds n-1={} nodes; clamping", n - 1);
        (
            n - 1,
            Some(KClamp {
                requested: k,
                effective: n - 1,
            }),
        )
    } else {
        (k, None)
    };

    let mut neighbor_idx = Vec::with_capacity(n);
    let mut neighbor_sim = Vec::with_capacity(n);
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k_eff + 1);
    for i in 0..n {
        let row = s.row(i);
        best.clear();
        // Insertion into a sorted buffer of size k; a candidate displaces an
        // entry only when strictly more similar, which keeps lower indices on
        // ties because columns are visited in ascending order.
        for (j, &v) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if best.len() == k_eff && v <= best[k_eff - 1].0 {
                continue;
            }
            let pos = best.iter().position(|&(b, _)| v > b).unwrap_or(best.len());
            best.insert(pos, (v, j));
            best.truncate(k_eff);
        }
        neighbor_idx.push(best.iter().map(|&(_, j)| j).collect());
        neighbor_sim.push(best.iter().map(|&(v, _)| v.to_f64_lossy()).collect());
    }
    Ok(GraphTopology {
        n_nodes: n,
        k: k_eff,
        neighbor_idx,
        neighbor_sim,
        clamp,
    })
}

/// Patch grid with an explicit node → cell map, row-major by default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeGrid {
    pub height: usize,
    pub width: usize,
    cells: Vec<(usize, usize)>,
}

impl NodeGrid {
    pub fn row_major(height: usize, width: usize) -> Self {
        let cells = (0..height * width).map(|i| (i / width, i % width)).collect();
        Self { height, width, cells }
    }

    /// Grid whose node `i` sits at `cells[i]`; the cells must be a
    /// permutation of the grid.
    pub fn from_cells(height: usize, width: usize, cells: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = vec![false; height * width];
        if cells.len() != seen.len() {
            return Err(Error::dim("grid", format!("{} cells for {height}×{width}", cells.len())));
        }
        for &(r, c) in &cells {
            if r >= height || c >= width || std::mem::replace(&mut seen[r * width + c], true) {
                return Err(Error::dim("grid", format!("invalid or repeated cell ({r},{c})")));
            }
        }
        Ok(Self { height, width, cells })
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, node: usize) -> (usize, usize) {
        self.cells[node]
    }

    /// Node index for every cell, row-major over the cells.
    pub fn node_at(&self) -> Vec<usize> {
        let mut at = vec![0; self.cells.len()];
        for (node, &(r, c)) in self.cells.iter().enumerate() {
            at[r * self.width + c] = node;
        }
        at
    }

    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let (ra, ca) = self.cells[a];
        let (rb, cb) = self.cells[b];
        ra.abs_diff(rb).max(ca.abs_diff(cb))
    }
}

/// `mask[i][j] = 1` iff nodes `i` and `j` lie within Chebyshev distance `r`
/// on a row-major `h×w` grid.
pub fn chebyshev_mask<T: Scalar>(h: usize, w: usize, r: usize) -> Result<Tensor<T>> {
    let n = h * w;
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        let (ri, ci) = (i / w, i % w);
        for dr in ri.saturating_sub(r)..=(ri + r).min(h - 1) {
            for dc in ci.saturating_sub(r)..=(ci + r).min(w - 1) {
                m[i * n + dr * w + dc] = T::one();
            }
        }
    }
    Tensor::new(vec![n, n], m)
}

pub fn offset_count(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Offset `(dy, dx)` of stencil slot `o`, slots ordered row-major over
/// `dy, dx ∈ [-r, r]`.
pub fn offset_of(radius: usize, o: usize) -> (isize, isize) {
    let side = 2 * radius + 1;
    let r = radius as isize;
    ((o / side) as isize - r, (o % side) as isize - r)
}

/// Neighbour lookup for the local branch: for node `i` and stencil slot `o`,
/// the node at that offset or nothing past the grid border.
#[derive(Debug, Clone)]
pub struct LocalStencil {
    n: usize,
    radius: usize,
    table: Vec<Option<usize>>,
}

impl LocalStencil {
    pub fn new(grid: &NodeGrid, radius: usize) -> Self {
        let at = grid.node_at();
        let slots = offset_count(radius);
        let mut table = Vec::with_capacity(grid.n_nodes() * slots);
        for node in 0..grid.n_nodes() {
            let (r, c) = grid.cell(node);
            for o in 0..slots {
                let (dy, dx) = offset_of(radius, o);
                let (y, x) = (r as isize + dy, c as isize + dx);
                let inside = y >= 0 && x >= 0 && (y as usize) < grid.height && (x as usize) < grid.width;
                table.push(inside.then(|| at[y as usize * grid.width + x as usize]));
            }
        }
        Self {
            n: grid.n_nodes(),
            radius,
            table,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn slots(&self) -> usize {
        offset_count(self.radius)
    }

    pub fn neighbor(&self, node: usize, slot: usize) -> Option<usize> {
        self.table[node * self.slots() + slot]
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<usize> {
        let (n, c) = x.dims2()?;
        if n != self.n {
            return Err(Error::dim("local_branch", format!("{n} nodes for a grid of {}", self.n)));
        }
        if w.shape() != [self.slots(), c] {
            return Err(Error::dim(
                "local_branch",
                format!("weights {:?}, expected [{}, {c}]", w.shape(), self.slots()),
            ));
        }
        Ok(c)
    }

    /// `y[i,c] = Σ_o w[o,c] · x[nbr(i,o), c]` with zero padding.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.check(x, w)?;
        let slots = self.slots();
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![T::zero(); self.n * c];
        for i in 0..self.n {
            let orow = &mut out[i * c..(i + 1) * c];
            for o in 0..slots {
                if let Some(j) = self.table[i * slots + o] {
                    let xrow = &xd[j * c..(j + 1) * c];
                    let wrow = &wd[o * c..(o + 1) * c];
                    for ((y, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *y += wv * xv;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.n, c], out))
    }

    pub(crate) fn backward_input<T: Scalar>(&self, g: &[T], w: &[T], dx: &mut [T]) {
        let slots = self.slots();
        let c = g.len() / self.n;
        for i in 0..self.n {
            let grow = &g[i * c..(i + 1) * c];
            for o in 0..slots {
                if let Some(j) = self.table[i * slots + o] {
                    let wrow = &w[o * c..(o + 1) * c];
                    for ((d, &gv), &wv) in dx[j * c..(j + 1) * c].iter_mut().zip(grow).zip(wrow) {
                        *d += gv * wv;
                    }
                }
            }
        }
    }

    pub(crate) fn backward_weights<T: Scalar>(&self, g: &[T], x: &[T], dw: &mut [T]) {
        let slots = self.slots();
        let c = g.len() / self.n;
        for i in 0..self.n {
            let grow = &g[i * c..(i + 1) * c];
            for o in 0..slots {
                if let Some(j) = self.table[i * slots + o] {
                    let xrow = &x[j * c..(j + 1) * c];
                    for ((d, &gv), &xv) in dw[o * c..(o + 1) * c].iter_mut().zip(grow).zip(xrow) {
                        *d += gv * xv;
                    }
                }
            }
        }
    }
}

/// Learnable weights of the local branch: one weight per stencil offset and
/// channel, shared across grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBranchParams<T: Scalar = f32> {
    pub radius: usize,
    /// `[(2r+1)², c]`.
    pub offset_weights: Tensor<T>,
}

impl<T: Scalar> LocalBranchParams<T> {
    pub fn new(radius: usize, offset_weights: Tensor<T>) -> Result<Self> {
        let (slots, _) = offset_weights.dims2()?;
        if slots != offset_count(radius) {
            return Err(Error::dim(
                "local_branch",
                format!("{slots} offsets for radius {radius}, expected {}", offset_count(radius)),
            ));
        }
        Ok(Self { radius, offset_weights })
    }

    pub fn channels(&self) -> usize {
        self.offset_weights.shape()[1]
    }

    /// Weighted neighbourhood of every node on `grid`, for the direct form
    /// of second-order similarity.
    pub fn neighborhoods(&self, grid: &NodeGrid) -> Neighborhoods<T> {
        let stencil = LocalStencil::new(grid, self.radius);
        let sets = (0..grid.n_nodes())
            .map(|i| {
                (0..stencil.slots())
                    .filter_map(|o| {
                        stencil
                            .neighbor(i, o)
                            .map(|j| (j, self.offset_weights.row(o).to_vec()))
                    })
                    .collect()
            })
            .collect();
        Neighborhoods { sets }
    }
}

/// Local-branch aggregation over the Chebyshev ball of radius `r`.
pub fn local_branch<T: Scalar>(x: &Tensor<T>, params: &LocalBranchParams<T>, grid: &NodeGrid) -> Result<Tensor<T>> {
    LocalStencil::new(grid, params.radius).apply(x, &params.offset_weights)
}

/// Weighted neighbour sets: node `i` aggregates `Σ_(j,α) α ⊙ x_j`, where `α`
/// holds one weight per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods<T: Scalar = f32> {
    pub sets: Vec<Vec<(usize, Vec<T>)>>,
}

impl<T: Scalar> Neighborhoods<T> {
    /// Uniform-mean aggregation over explicit neighbour lists.
    pub fn mean(lists: &[Vec<usize>], channels: usize) -> Self {
        let sets = lists
            .iter()
            .map(|l| {
                let w = T::one() / T::from_usize(l.len().max(1)).unwrap();
                l.iter().map(|&j| (j, vec![w; channels])).collect()
            })
            .collect();
        Self { sets }
    }
}

/// Second-order similarity with dot-product `l`:
/// `S²[i][j] = Σ_ch (Σ_t α_it x_t) · (Σ_t α_jt x_t)`.
pub fn second_order_similarity<T: Scalar>(x: &Tensor<T>, hoods: &Neighborhoods<T>) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    if hoods.sets.len() != n {
        return Err(Error::dim(
            "second_order_similarity",
            format!("{} neighbourhoods for {n} nodes", hoods.sets.len()),
        ));
    }
    let mut agg = vec![T::zero(); n * c];
    for (i, set) in hoods.sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::DegenerateInput(format!("node {i} has an empty neighbourhood")));
        }
        for (j, alpha) in set {
            if *j >= n || alpha.len() != c {
                return Err(Error::dim("second_order_similarity", format!("bad neighbour {j} of node {i}")));
            }
            for ((a, &w), &v) in agg[i * c..(i + 1) * c].iter_mut().zip(alpha).zip(x.row(*j)) {
                *a += w * v;
            }
        }
    }
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..c).fold(T::zero(), |acc, l| acc + agg[i * c + l] * agg[j * c + l]);
        }
    }
    Ok(Tensor::from_parts(vec![n, n], s))
}

/// Channel split of one block: (local, first-order, second-order) widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockChannels {
    pub local: usize,
    pub first: usize,
    pub second: usize,
}

impl BlockChannels {
    pub fn total(&self) -> usize {
        self.local + self.first + self.second
    }

    pub fn global(&self) -> usize {
        self.first + self.second
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub total_c: usize,
    pub per_block: Vec<BlockChannels>,
}

/// Linear ramp of the global-graph width from `start_ratio` to `end_ratio`
/// of `total_c`, each width rounded to the nearest multiple of
/// `granularity`. The first block's global width stays with the first-order
/// group; everything added later forms the second-order group.
pub fn psgc_schedule(
    total_c: usize,
    n_blocks: usize,
    start_ratio: f64,
    end_ratio: f64,
    granularity: usize,
) -> Result<ChannelSchedule> {
    if !(0.0 < start_ratio && start_ratio <= end_ratio && end_ratio < 1.0) {
        return Err(Error::Config(format!(
            "schedule ratios must satisfy 0 < start <= end < 1, got {start_ratio} -> {end_ratio}"
        )));
    }
    if granularity == 0 || total_c % granularity != 0 {
        return Err(Error::Config(format!(
            "channel count {total_c} is not a multiple of granularity {granularity}"
        )));
    }
    let round = |ratio: f64| {
        let units = (total_c as f64 * ratio / granularity as f64).round() as usize;
        units * granularity
    };
    let global: Vec<usize> = (0..n_blocks)
        .map(|b| {
            let t = if n_blocks > 1 { b as f64 / (n_blocks - 1) as f64 } else { 0.0 };
            round(start_ratio + (end_ratio - start_ratio) * t)
        })
        .collect();
    let first = global.first().copied().unwrap_or(granularity);
    if first < granularity {
        return Err(Error::Config(format!(
            "first-order width {first} below granularity {granularity}; raise start_ratio"
        )));
    }
    let per_block = global
        .iter()
        .map(|&g| {
            if g > total_c {
                return Err(Error::Config(format!("global width {g} exceeds {total_c} channels")));
            }
            Ok(BlockChannels {
                local: total_c - g,
                first,
                second: g - first,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSchedule { total_c, per_block })
}
