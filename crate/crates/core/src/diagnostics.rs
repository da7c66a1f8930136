//! Over-smoothing and graph-structure statistics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::net::{Model, TopologyMode};
use crate::tensor::{Scalar, Tensor};

/// `(1/n) Σ_i ‖x_i − x̄‖₂` over the rows of `x[n×c]`.
pub fn diversity<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    let (n, c) = x.dims2()?;
    let mut mean = vec![0.0f64; c];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let total: f64 = (0..n)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(&mean)
                .map(|(&v, m)| (v.to_f64_lossy() - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityTrace {
    pub run_id: String,
    /// `(block index, diversity)` in execution order.
    pub per_block: Vec<(usize, f64)>,
}

impl DiversityTrace {
    /// Writes `run_id,block,diversity` rows, header first when `header` is set.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            w.write_record(["run_id", "block", "diversity"])?;
        }
        for (b, d) in &self.per_block {
            w.write_record([self.run_id.clone(), b.to_string(), format!("{d}")])?;
        }
        w.flush().map_err(|e| Error::io("diversity csv", e))?;
        Ok(())
    }
}

/// Node features after every block for one image, in execution order.
pub fn block_activations<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let f = model.forward(&mut tape, &vars, x, TopologyMode::Build)?;
    Ok(f.block_outputs.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Diversity of every block's output, averaged over `images`.
pub fn trace_diversity<T: Scalar>(model: &Model<T>, images: &[Tensor<T>], run_id: &str) -> Result<DiversityTrace> {
    if images.is_empty() {
        return Err(Error::DegenerateInput("diversity trace over an empty batch".into()));
    }
    let mut sums = vec![0.0; model.num_blocks()];
    for img in images {
        for (s, act) in sums.iter_mut().zip(block_activations(model, img)?) {
            *s += diversity(&act)?;
        }
    }
    Ok(DiversityTrace {
        run_id: run_id.to_string(),
        per_block: sums
            .into_iter()
            .enumerate()
            .map(|(b, s)| (b, s / images.len() as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub n_nodes: usize,
    pub k: usize,
    /// degree → number of nodes with that degree.
    pub in_degree: BTreeMap<usize, usize>,
    pub out_degree: BTreeMap<usize, usize>,
    /// `(q, value)` for q in 0, 0.25, 0.5, 0.75, 1 over all edge similarities.
    pub similarity_quantiles: Vec<(f64, f64)>,
    /// Fraction of edges joining nodes with the same label.
    pub purity: Option<f64>,
}

pub const QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn graph_stats(topo: &GraphTopology, labels: Option<&[usize]>) -> Result<GraphStats> {
    topo.validate()?;
    let mut in_degree = BTreeMap::new();
    for d in topo.in_degrees() {
        *in_degree.entry(d).or_insert(0) += 1;
    }
    let mut out_degree = BTreeMap::new();
    for row in &topo.neighbor_idx {
        *out_degree.entry(row.len()).or_insert(0) += 1;
    }
    let mut sims: Vec<f64> = topo.neighbor_sim.iter().flatten().copied().collect();
    sims.sort_by(f64::total_cmp);
    let similarity_quantiles = if sims.is_empty() {
        Vec::new()
    } else {
        QUANTILES.iter().map(|&q| (q, quantile(&sims, q))).collect()
    };
    let purity = match labels {
        None => None,
        Some(l) if l.len() != topo.n_nodes => {
            return Err(Error::dim(
                "graph_stats",
                format!("{} labels for {} nodes", l.len(), topo.n_nodes),
            ))
        }
        Some(l) => {
            let edges = topo.n_nodes * topo.k;
            let same = topo
                .neighbor_idx
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
                .filter(|&(i, j)| l[i] == l[j])
                .count();
            (edges > 0).then(|| same as f64 / edges as f64)
        }
    };
    Ok(GraphStats {
        n_nodes: topo.n_nodes,
        k: topo.k,
        in_degree,
        out_degree,
        similarity_quantiles,
        purity,
    })
}

impl GraphStats {
    /// `metric,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "value"])?;
        w.write_record(["n_nodes".to_string(), self.n_nodes.to_string()])?;
        w.write_record(["k".to_string(), self.k.to_string()])?;
        for (d, c) in &self.in_degree {
            w.write_record([format!("in_degree_{d}"), c.to_string()])?;
        }
        for (d, c) in &self.out_degree {
            w.write_record([format!("out_degree_{d}"), c.to_string()])?;
        }
        for (q, v) in &self.similarity_quantiles {
            w.write_record([format!("similarity_q{:02}", (q * 100.0).round() as usize), format!("{v}")])?;
        }
        if let Some(p) = self.purity {
            w.write_record(["purity".to_string(), format!("{p}")])?;
        }
        w.flush().map_err(|e| Error::io("graph stats csv", e))?;
        Ok(())
    }
}
