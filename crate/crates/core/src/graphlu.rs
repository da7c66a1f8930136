//! GraphLU: `x · φ(x)` where `φ` is the CDF of a zero-mean Gaussian whose
//! standard deviation `1 + ε` is learned.
//!
//! At `ε = 0` this is exactly the erf form of GELU. Larger `ε` flattens the
//! CDF, so negative inputs keep more of their magnitude.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Lower bound on ε, keeps the standard deviation `1 + ε` positive.
pub const EPSILON_FLOOR: f64 = -0.99;

/// Which closed form to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphLuForm {
    /// `0.5·x·(1 + erf(x / (√2(1+ε))))`.
    #[default]
    Cdf,
    /// `0.5·x·erf(x / (√2(1+ε)) + 1)`, the variant with the `+1` inside the
    /// erf bracket. Kept for side-by-side comparison only.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphLuParams {
    pub epsilon: f64,
}

impl Default for GraphLuParams {
    fn default() -> Self {
        Self { epsilon: 0.0 }
    }
}

impl GraphLuParams {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon: clamp_epsilon(epsilon),
        }
    }
}

pub fn clamp_epsilon<T: Scalar>(eps: T) -> T {
    eps.max(T::from_f64_lossy(EPSILON_FLOOR))
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian CDF with standard deviation `1 + ε`, evaluated as
/// `½·erfc(−x / (√2(1+ε)))` so the left tail keeps its relative precision.
pub fn phi<T: Scalar>(x: T, eps: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let sigma = T::one() + clamp_epsilon(eps);
    half * (-x / (T::from_f64_lossy(std::f64::consts::SQRT_2) * sigma)).erfc()
}

/// Scalar GraphLU value.
pub fn graphlu_value<T: Scalar>(x: T, eps: T, form: GraphLuForm) -> T {
    let half = T::from_f64_lossy(0.5);
    match form {
        GraphLuForm::Cdf => x * phi(x, eps),
        GraphLuForm::Literal => {
            let sigma = T::one() + clamp_epsilon(eps);
            let a = x / (T::from_f64_lossy(std::f64::consts::SQRT_2) * sigma) + T::one();
            half * x * a.erf()
        }
    }
}

/// Partial derivatives `(∂y/∂x, ∂y/∂ε)`. The ε partial is zero while ε sits
/// on the clamp floor.
pub fn graphlu_partials<T: Scalar>(x: T, eps: T, form: GraphLuForm) -> (T, T) {
    let floor = T::from_f64_lossy(EPSILON_FLOOR);
    let clamped = eps <= floor;
    let sigma = T::one() + clamp_epsilon(eps);
    let (dx, dsigma) = match form {
        GraphLuForm::Cdf => {
            let u = x / sigma;
            let density = T::from_f64_lossy(FRAC_1_SQRT_2PI) * (-(u * u) * T::from_f64_lossy(0.5)).exp();
            let dx = phi(x, eps) + x * density / sigma;
            let dsigma = -x * density * u / sigma;
            (dx, dsigma)
        }
        GraphLuForm::Literal => {
            let half = T::from_f64_lossy(0.5);
            let s2 = T::from_f64_lossy(std::f64::consts::SQRT_2) * sigma;
            let a = x / s2 + T::one();
            // d erf(a)/da = 2/√π e^{-a²}
            let derf = T::from_f64_lossy(std::f64::consts::FRAC_2_SQRT_PI) * (-(a * a)).exp();
            let dx = half * a.erf() + half * x * derf / s2;
            let dsigma = -half * x * derf * x / (s2 * sigma);
            (dx, dsigma)
        }
    };
    (dx, if clamped { T::zero() } else { dsigma })
}

/// Applies GraphLU elementwise to a plain tensor.
pub fn graphlu<T: Scalar>(x: &Tensor<T>, params: GraphLuParams, form: GraphLuForm) -> Tensor<T> {
    let eps = T::from_f64_lossy(params.epsilon);
    crate::ops::map(x, |v| graphlu_value(v, eps, form))
}

/// Exact-erf GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu<T: Scalar>(x: T) -> T {
    T::from_f64_lossy(0.5) * x * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf())
}

/// Differentiable GraphLU on the tape; `eps` is a rank-0 variable.
pub fn graphlu_var<T: Scalar>(tape: &mut Tape<T>, x: Var, eps: Var, form: GraphLuForm) -> Result<Var> {
    tape.graphlu(x, eps, form)
}
