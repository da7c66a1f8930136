//! Central finite-difference certification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Coordinates to probe; every coordinate is probed when the inputs hold
    /// fewer values.
    pub probes: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`
    /// so that coordinates with vanishing gradient are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            probes: 20,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub probe_count: usize,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} probes={:<4} max_rel_error={:.3e} {}",
            self.op_name,
            self.probe_count,
            self.max_rel_error,
            if self.passed { "ok" } else { "FAILED" }
        )
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h` on randomly chosen
/// coordinates of `inputs`.
///
/// `f` receives the tape and one variable per input and must return a
/// single-element variable.
pub fn grad_check<F>(op_name: &str, inputs: &[Tensor<f64>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = single(tape.value(out))?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("{op_name}: function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    single(tape.value(out))?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
        .collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        let mut c = sample(&mut rng, total, cfg.probes).into_vec();
        c.sort_unstable();
        c
    };

    let mut work = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    for &flat in &coords {
        let (which, at) = locate(inputs, flat);
        let orig = work[which].data()[at];
        work[which].data_mut()[at] = orig + cfg.step;
        let plus = eval(&work)?;
        work[which].data_mut()[at] = orig - cfg.step;
        let minus = eval(&work)?;
        work[which].data_mut()[at] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[which][at];
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        passed: max_rel_error <= cfg.tolerance,
        probe_count: coords.len(),
    })
}

fn single(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::dim(
            "grad_check",
            format!("function must return one value, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

fn locate(inputs: &[Tensor<f64>], mut flat: usize) -> (usize, usize) {
    for (i, t) in inputs.iter().enumerate() {
        if flat < t.numel() {
            return (i, flat);
        }
        flat -= t.numel();
    }
    unreachable!("coordinate beyond inputs")
}

/// Scalarises `y` as `Σ w ⊙ y` with fixed pseudo-random weights so every
/// output coordinate contributes to the checked gradient.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut rng)?;
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}
