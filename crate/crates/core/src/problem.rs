//! Equality-constrained control problems and their reduction to control space.
//!
//! A problem couples states `x ∈ ℝᵐ` and controls `u ∈ ℝⁿ` through `c(x, u) = 0`,
//! maps states to outputs `y = g(x) ∈ ℝⁿ` and scores outputs with a convex
//! tracking objective. Eliminating `x` by Newton's method gives the reduced
//! objective `u ↦ f(g(x(u)))`, whose gradient is obtained with one transposed
//! solve against `∇ₓc`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    banded_lu_factor, norm_inf, BandedFactorization, BandedMatrix, DenseLu, DenseMatrix,
    LinalgError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("Newton did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular state Jacobian: pivot {pivot:.3e} below {tolerance:.3e}")]
    SingularJacobian { pivot: f64, tolerance: f64 },
    #[error("state Jacobian is not square: {equations} equations for {states} states")]
    NonSquare { equations: usize, states: usize },
    #[error("control {index} = {value} lies outside [{lower}, {upper}]")]
    OutOfBox {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("model evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Linalg(LinalgError),
}

impl From<LinalgError> for ProblemError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular {
                pivot, tolerance, ..
            } => ProblemError::SingularJacobian { pivot, tolerance },
            other => ProblemError::Linalg(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// Componentwise bounds `lower ≤ u ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(ProblemError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(ProblemError::Configuration("empty control box".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(ProblemError::Configuration(format!(
                    "invalid bound pair at {i}: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// First coordinate outside the box by more than `slack`.
    pub fn check(&self, u: &[f64], slack: f64) -> Result<()> {
        if u.len() != self.dim() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        for (i, &v) in u.iter().enumerate() {
            let (l, h) = (self.lower[i], self.upper[i]);
            if !v.is_finite() || v < l - slack || v > h + slack {
                return Err(ProblemError::OutOfBox {
                    index: i,
                    value: v,
                    lower: l,
                    upper: h,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64], slack: f64) -> bool {
        self.check(u, slack).is_ok()
    }

    /// Componentwise clamp.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect()
    }

    /// The same box pulled inward by `rel` of each width.
    pub fn shrink(&self, rel: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &h)| {
                let m = rel * (h - l);
                (l + m, h - m)
            })
            .unzip();
        Self { lower, upper }
    }
}

/// `f(y) = Σ |yᵢ − tᵢ|ᵖ` with `p ≥ 2`; convex and continuously differentiable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingObjective {
    target: Vec<f64>,
    exponent: f64,
}

impl TrackingObjective {
    pub fn new(target: Vec<f64>, exponent: f64) -> Result<Self> {
        if !(exponent >= 2.0) || !exponent.is_finite() {
            return Err(ProblemError::Configuration(format!(
                "objective exponent must be a finite value >= 2, got {exponent}"
            )));
        }
        Ok(Self { target, exponent })
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let p = self.exponent;
        y.iter()
            .zip(&self.target)
            .map(|(yi, ti)| {
                let d = (yi - ti).abs();
                if p == 2.0 {
                    d * d
                } else {
                    d.powf(p)
                }
            })
            .sum()
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let p = self.exponent;
        y.iter()
            .zip(&self.target)
            .map(|(yi, ti)| {
                let d = yi - ti;
                if p == 2.0 {
                    2.0 * d
                } else {
                    p * d.abs().powf(p - 1.0) * d.signum()
                }
            })
            .collect()
    }
}

/// `∇ₓc` in whichever storage the problem finds natural.
#[derive(Debug, Clone)]
pub enum StateJacobian {
    Banded(BandedMatrix),
    Dense(DenseMatrix),
}

impl StateJacobian {
    pub fn rows(&self) -> usize {
        match self {
            StateJacobian::Banded(b) => b.dim(),
            StateJacobian::Dense(d) => d.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            StateJacobian::Banded(b) => b.dim(),
            StateJacobian::Dense(d) => d.cols(),
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            StateJacobian::Banded(b) => b.to_dense(),
            StateJacobian::Dense(d) => d.clone(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            StateJacobian::Banded(b) => b.mul_vec(x),
            StateJacobian::Dense(d) => d.mul_vec(x),
        }
    }

    /// Scale-aware pivot threshold, `1e-10 · max row sum`.
    pub fn default_pivot_tol(&self) -> f64 {
        match self {
            StateJacobian::Banded(b) => b.default_pivot_tol(),
            StateJacobian::Dense(d) => {
                let s = (0..d.rows())
                    .map(|i| d.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                if s > 0.0 {
                    1e-10 * s
                } else {
                    f64::MIN_POSITIVE
                }
            }
        }
    }

    pub fn factor(&self) -> Result<StateFactorization> {
        if !self.is_square() {
            return Err(ProblemError::NonSquare {
                equations: self.rows(),
                states: self.cols(),
            });
        }
        let tol = self.default_pivot_tol();
        Ok(match self {
            StateJacobian::Banded(b) => StateFactorization::Banded(banded_lu_factor(b, tol)?),
            StateJacobian::Dense(d) => StateFactorization::Dense(DenseLu::factor(d, tol)?),
        })
    }
}

#[derive(Debug, Clone)]
pub enum StateFactorization {
    Banded(BandedFactorization),
    Dense(DenseLu),
}

impl StateFactorization {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            StateFactorization::Banded(f) => f.solve(b)?,
            StateFactorization::Dense(f) => f.solve(b)?,
        })
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            StateFactorization::Banded(f) => f.solve_transpose(b)?,
            StateFactorization::Dense(f) => f.solve_transpose(b)?,
        })
    }

    pub fn min_pivot(&self) -> f64 {
        match self {
            StateFactorization::Banded(f) => f.min_pivot(),
            StateFactorization::Dense(f) => f.min_pivot(),
        }
    }
}

/// An equality-constrained control problem with box-bounded controls.
///
/// Implementations supply `c`, its Jacobians and the output map analytically.
/// The objective is always a [`TrackingObjective`], so convexity of `f` holds
/// by construction.
pub trait RmpcProblem: Send + Sync {
    fn name(&self) -> &str;

    /// `m`.
    fn state_dim(&self) -> usize;

    /// `n`.
    fn control_dim(&self) -> usize;

    /// Number of equality constraints; differs from `m` only for malformed problems.
    fn equation_dim(&self) -> usize {
        self.state_dim()
    }

    fn bounds(&self) -> &ControlBox;

    fn objective(&self) -> &TrackingObjective;

    fn residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;

    fn state_jacobian(&self, x: &[f64], u: &[f64]) -> Result<StateJacobian>;

    /// `∇ᵤc`, equations × controls.
    fn control_jacobian(&self, x: &[f64], u: &[f64]) -> Result<DenseMatrix>;

    fn output(&self, x: &[f64]) -> Vec<f64>;

    /// `∇ₓg`, outputs × states.
    fn output_jacobian(&self, x: &[f64]) -> DenseMatrix;

    /// Newton starting point for the given controls.
    fn initial_state(&self, u: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSolveResult {
    pub x: Vec<f64>,
    pub newton_iterations: usize,
    pub residual_norm: f64,
}

const BOX_SLACK: f64 = 1e-12;

/// Solves `c(x, u) = 0` for `x` from `x0`, with step halving on `‖c‖²`.
pub fn solve_states<P: RmpcProblem + ?Sized>(
    p: &P,
    u: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<StateSolveResult> {
    p.bounds().check(u, BOX_SLACK)?;
    newton(p, u, x0, tol, max_iter)
}

fn newton<P: RmpcProblem + ?Sized>(
    p: &P,
    u: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<StateSolveResult> {
    if !(tol > 0.0) {
        return Err(ProblemError::Configuration(format!(
            "Newton tolerance must be positive, got {tol}"
        )));
    }
    if p.equation_dim() != p.state_dim() {
        return Err(ProblemError::NonSquare {
            equations: p.equation_dim(),
            states: p.state_dim(),
        });
    }
    if x0.len() != p.state_dim() {
        return Err(ProblemError::DimensionMismatch {
            expected: p.state_dim(),
            got: x0.len(),
        });
    }
    let mut x = x0.to_vec();
    let mut r = p.residual(&x, u)?;
    let mut rnorm = norm_inf(&r);
    let mut phi: f64 = r.iter().map(|v| v * v).sum();
    for iter in 0..=max_iter {
        if rnorm <= tol {
            return Ok(StateSolveResult {
                x,
                newton_iterations: iter,
                residual_norm: rnorm,
            });
        }
        if iter == max_iter {
            break;
        }
        let jac = p.state_jacobian(&x, u)?;
        let step = jac.factor()?.solve(&r)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&step)
                .map(|(xi, di)| xi - alpha * di)
                .collect();
            if let Ok(rt) = p.residual(&trial, u) {
                let phi_t: f64 = rt.iter().map(|v| v * v).sum();
                if phi_t.is_finite() && phi_t <= (1.0 - 1e-4 * alpha) * phi {
                    x = trial;
                    rnorm = norm_inf(&rt);
                    r = rt;
                    phi = phi_t;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(ProblemError::NoConvergence {
        iterations: max_iter,
        residual: rnorm,
    })
}

/// Evaluation context for one problem with a single-entry state cache keyed by `u`.
///
/// Not meant to be shared between threads; create one per worker.
pub struct Evaluator<'p, P: RmpcProblem + ?Sized> {
    problem: &'p P,
    newton: NewtonSettings,
    check_box: bool,
    cache: Option<(Vec<f64>, StateSolveResult)>,
    state_solves: usize,
}

impl<'p, P: RmpcProblem + ?Sized> Evaluator<'p, P> {
    pub fn new(problem: &'p P) -> Self {
        Self::with_settings(problem, NewtonSettings::default())
    }

    pub fn with_settings(problem: &'p P, newton: NewtonSettings) -> Self {
        Self {
            problem,
            newton,
            check_box: true,
            cache: None,
            state_solves: 0,
        }
    }

    /// Allows evaluation outside the box (finite differences at bounds).
    pub fn unchecked(mut self) -> Self {
        self.check_box = false;
        self
    }

    pub fn problem(&self) -> &'p P {
        self.problem
    }

    pub fn state_solves(&self) -> usize {
        self.state_solves
    }

    pub fn states(&mut self, u: &[f64]) -> Result<&StateSolveResult> {
        let hit = matches!(&self.cache, Some((cu, _)) if cu.as_slice() == u);
        if !hit {
            if self.check_box {
                self.problem.bounds().check(u, BOX_SLACK)?;
            }
            let x0 = self.problem.initial_state(u)?;
            let sol = newton(self.problem, u, &x0, self.newton.tol, self.newton.max_iter)?;
            self.state_solves += 1;
            self.cache = Some((u.to_vec(), sol));
        }
        Ok(&self.cache.as_ref().expect("cache filled").1)
    }

    /// `T(u) = g(x(u))`.
    pub fn output(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        let p = self.problem;
        let x = &self.states(u)?.x;
        Ok(p.output(x))
    }

    pub fn objective(&mut self, u: &[f64]) -> Result<f64> {
        let y = self.output(u)?;
        Ok(self.problem.objective().value(&y))
    }

    pub fn gradient(&mut self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(u)?.1)
    }

    /// Reduced objective and its adjoint gradient.
    pub fn value_and_gradient(&mut self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.problem;
        let x = self.states(u)?.x.clone();
        let y = p.output(&x);
        let f = p.objective().value(&y);
        let dfdy = p.objective().gradient(&y);
        let rhs = p.output_jacobian(&x).tr_mul_vec(&dfdy);
        let fac = p.state_jacobian(&x, u)?.factor()?;
        let w = fac.solve_transpose(&rhs)?;
        let grad = p.control_jacobian(&x, u)?.tr_mul_vec(&w);
        Ok((f, grad.into_iter().map(|g| -g).collect()))
    }

    /// `D_u T(u) = −∇ₓg ∇ₓc⁻¹ ∇ᵤc`.
    pub fn output_controllability(&mut self, u: &[f64]) -> Result<DenseMatrix> {
        let x = self.states(u)?.x.clone();
        output_controllability_matrix(self.problem, &x, u)
    }
}

pub fn reduced_objective<P: RmpcProblem + ?Sized>(p: &P, u: &[f64]) -> Result<f64> {
    Evaluator::new(p).objective(u)
}

/// Adjoint gradient of `u ↦ f(g(x(u)))`: solve `∇ₓcᵀ w = ∇ₓgᵀ ∇f`, then `−∇ᵤcᵀ w`.
pub fn reduced_gradient<P: RmpcProblem + ?Sized>(p: &P, u: &[f64]) -> Result<Vec<f64>> {
    Evaluator::new(p).gradient(u)
}

/// The `n × n` matrix `−∇ₓg ∇ₓc⁻¹ ∇ᵤc` at a solved `(x, u)`, via `n` forward solves.
pub fn output_controllability_matrix<P: RmpcProblem + ?Sized>(
    p: &P,
    x: &[f64],
    u: &[f64],
) -> Result<DenseMatrix> {
    let fac = p.state_jacobian(x, u)?.factor()?;
    let cu = p.control_jacobian(x, u)?;
    let gx = p.output_jacobian(x);
    let n = p.control_dim();
    let mut out = DenseMatrix::zeros(gx.rows(), n);
    for j in 0..n {
        let dx = fac.solve(&cu.column(j))?;
        let col = gx.mul_vec(&dx);
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = -v;
        }
    }
    Ok(out)
}

/// Central differences of the reduced objective with step `h`.
pub fn finite_difference_gradient<P: RmpcProblem + ?Sized>(
    p: &P,
    u: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(ProblemError::InvalidStep(h));
    }
    let mut ev = Evaluator::new(p).unchecked();
    let mut up = u.to_vec();
    (0..u.len())
        .map(|i| {
            up[i] = u[i] + h;
            let fp = ev.objective(&up)?;
            up[i] = u[i] - h;
            let fm = ev.objective(&up)?;
            up[i] = u[i];
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error_inf(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / norm_inf(b).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_projection_and_check() {
        let b = ControlBox::uniform(3, 100.0, 200.0).unwrap();
        assert_eq!(b.project(&[250.0, 150.0, 50.0]), vec![200.0, 150.0, 100.0]);
        assert_eq!(b.project(&[100.0, 200.0, 120.0]), vec![100.0, 200.0, 120.0]);
        assert!(b.contains(&[200.0 + 1e-13, 100.0, 150.0], 1e-12));
        assert!(matches!(
            b.check(&[200.1, 100.0, 150.0], 1e-12),
            Err(ProblemError::OutOfBox { index: 0, .. })
        ));
        assert!(ControlBox::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn tracking_objective_values() {
        let f = TrackingObjective::new(vec![0.0; 72], 2.0).unwrap();
        assert_eq!(f.value(&[0.0; 72]), 0.0);
        let y = vec![0.1; 72];
        assert!((f.value(&y) - 0.72).abs() < 1e-12);
        let f4 = TrackingObjective::new(vec![1.0, -1.0], 4.0).unwrap();
        let g = f4.gradient(&[2.0, -3.0]);
        assert!((g[0] - 4.0).abs() < 1e-12 && (g[1] + 32.0).abs() < 1e-12);
        assert!(TrackingObjective::new(vec![0.0], 1.5).is_err());
    }

    #[test]
    fn singular_maps_to_singular_jacobian() {
        let e: ProblemError = LinalgError::Singular {
            column: 0,
            pivot: 0.0,
            tolerance: 1e-10,
        }
        .into();
        assert!(matches!(e, ProblemError::SingularJacobian { .. }));
    }
}
