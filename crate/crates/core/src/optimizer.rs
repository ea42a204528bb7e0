//! Bound-constrained minimisation of the reduced objective.
//!
//! Projected gradient with an L-BFGS direction on the coordinates that are
//! not pinned at a bound, and Armijo backtracking along the projected path.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm_inf};
use crate::problem::{ControlBox, Evaluator, ProblemError, Result, RmpcProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub max_iterations: usize,
    pub memory: usize,
    pub armijo: f64,
    pub backtrack: f64,
    /// Absolute distance below which a bound counts as active.
    pub activity_tol: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iterations: 500,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            activity_tol: 1e-8,
            max_backtracks: 60,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.max_iterations > 0
            && self.memory > 0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.activity_tol > 0.0
            && self.max_backtracks > 0;
        if ok {
            Ok(())
        } else {
            Err(ProblemError::Configuration(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveBound {
    pub index: usize,
    pub side: BoundSide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundMultipliers {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundMultipliers {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    /// `λᵀ ∇d` for `d(u) = (l − u, u − u_U)`: `−λ_lower + λ_upper`.
    pub fn constraint_gradient(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Line search could not make progress even along steepest descent.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub u_star: Vec<f64>,
    pub f_star: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub multipliers: BoundMultipliers,
    pub active_set: Vec<ActiveBound>,
    pub termination: Termination,
    /// Objective at every accepted iterate, starting with `u0`.
    pub objective_history: Vec<f64>,
    pub state_solves: usize,
}

impl OptimizationResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktInfo {
    pub residual: f64,
    pub multipliers: BoundMultipliers,
    pub active_set: Vec<ActiveBound>,
}

/// Componentwise clamp into the box.
pub fn project(u: &[f64], bounds: &ControlBox) -> Vec<f64> {
    bounds.project(u)
}

/// Active bounds, multipliers and stationarity residual from a gradient.
///
/// Multipliers are the gradient component with the sign of the bound side,
/// clipped at zero; the residual is `‖∇(f∘T) + λᵀ∇d‖∞`, which also picks up
/// any gradient component pointing out of an active bound.
pub fn kkt_from_gradient(
    u: &[f64],
    grad: &[f64],
    bounds: &ControlBox,
    activity_tol: f64,
) -> KktInfo {
    let n = u.len();
    let mut multipliers = BoundMultipliers::zeros(n);
    let mut active_set = Vec::new();
    for i in 0..n {
        let (lo, hi) = (bounds.lower()[i], bounds.upper()[i]);
        if u[i] - lo <= activity_tol {
            active_set.push(ActiveBound {
                index: i,
                side: BoundSide::Lower,
            });
            multipliers.lower[i] = grad[i].max(0.0);
        } else if hi - u[i] <= activity_tol {
            active_set.push(ActiveBound {
                index: i,
                side: BoundSide::Upper,
            });
            multipliers.upper[i] = (-grad[i]).max(0.0);
        }
    }
    let cg = multipliers.constraint_gradient();
    let residual = grad
        .iter()
        .zip(&cg)
        .fold(0.0f64, |m, (g, c)| m.max((g + c).abs()));
    KktInfo {
        residual,
        multipliers,
        active_set,
    }
}

pub fn kkt_residual<P: RmpcProblem + ?Sized>(
    p: &P,
    u: &[f64],
    activity_tol: f64,
) -> Result<KktInfo> {
    let grad = Evaluator::new(p).gradient(u)?;
    Ok(kkt_from_gradient(u, &grad, p.bounds(), activity_tol))
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn binding(u: &[f64], g: &[f64], bounds: &ControlBox, tol: f64) -> Vec<bool> {
    (0..u.len())
        .map(|i| {
            (u[i] - bounds.lower()[i] <= tol && g[i] > 0.0)
                || (bounds.upper()[i] - u[i] <= tol && g[i] < 0.0)
        })
        .collect()
}

fn projected_gradient_norm(u: &[f64], g: &[f64], bounds: &ControlBox, tol: f64) -> f64 {
    kkt_from_gradient(u, g, bounds, tol).residual
}

/// Two-loop recursion on the free coordinates.
fn lbfgs_direction(g: &[f64], free: &[bool], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let masked_dot = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(free)
            .filter(|(_, f)| **f)
            .map(|((x, y), _)| x * y)
            .sum()
    };
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(gi, f)| if *f { *gi } else { 0.0 })
        .collect();
    let usable: Vec<(&Vec<f64>, &Vec<f64>, f64)> = pairs
        .iter()
        .filter_map(|(s, y)| {
            let sy = masked_dot(s, y);
            let scale = masked_dot(s, s).sqrt() * masked_dot(y, y).sqrt();
            (sy > 1e-10 * scale && sy > 0.0).then(|| (s, y, 1.0 / sy))
        })
        .collect();
    let mut alphas = vec![0.0; usable.len()];
    for (k, (s, y, rho)) in usable.iter().enumerate().rev() {
        let a = rho * masked_dot(s, &q);
        alphas[k] = a;
        for i in 0..q.len() {
            if free[i] {
                q[i] -= a * y[i];
            }
        }
    }
    if let Some((s, y, _)) = usable.last() {
        let gamma = masked_dot(s, y) / masked_dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, (s, y, rho)) in usable.iter().enumerate() {
        let b = rho * masked_dot(y, &q);
        for i in 0..q.len() {
            if free[i] {
                q[i] += (alphas[k] - b) * s[i];
            }
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Minimises `f∘T` over the box starting from the projection of `u0`.
pub fn minimize<P: RmpcProblem + ?Sized>(
    p: &P,
    u0: &[f64],
    cfg: &OptimizerConfig,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    let bounds = p.bounds();
    if u0.len() != bounds.dim() {
        return Err(ProblemError::DimensionMismatch {
            expected: bounds.dim(),
            got: u0.len(),
        });
    }
    let width = bounds
        .lower()
        .iter()
        .zip(bounds.upper())
        .fold(0.0f64, |m, (l, u)| m.max(u - l));
    let mut ev = Evaluator::new(p);
    let mut u = project(u0, bounds);
    let (mut f, mut g) = ev.value_and_gradient(&u)?;
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        let pg = projected_gradient_norm(&u, &g, bounds, cfg.activity_tol);
        if pg <= cfg.grad_tol {
            termination = Termination::Converged;
            break;
        }
        let pinned = binding(&u, &g, bounds, cfg.activity_tol);
        let free: Vec<bool> = pinned.iter().map(|b| !b).collect();

        let mut accepted = None;
        // Quasi-Newton first; steepest descent with fresh memory as fallback.
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !pairs.is_empty();
            if attempt == 1 && accepted.is_none() {
                pairs.clear();
            }
            let mut d = if use_memory {
                lbfgs_direction(&g, &free, &pairs)
            } else {
                g.iter()
                    .zip(&free)
                    .map(|(gi, f)| if *f { -gi } else { 0.0 })
                    .collect()
            };
            if dot(&d, &g) >= 0.0 {
                if use_memory {
                    continue;
                }
                break;
            }
            if !use_memory {
                let dn = norm_inf(&d);
                // first trial moves the largest coordinate a tenth of the box
                if dn > 0.0 && width > 0.0 {
                    let scale = 0.1 * width / dn;
                    d.iter_mut().for_each(|v| *v *= scale);
                }
            }
            let mut alpha = 1.0;
            for _ in 0..cfg.max_backtracks {
                let trial: Vec<f64> = project(
                    &u.iter()
                        .zip(&d)
                        .map(|(a, b)| a + alpha * b)
                        .collect::<Vec<_>>(),
                    bounds,
                );
                if trial == u {
                    break;
                }
                if let Ok((ft, gt)) = ev.value_and_gradient(&trial) {
                    let step: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
                    let decrease = cfg.armijo * dot(&g, &step);
                    let sufficient = ft <= f + decrease;
                    // Within rounding of f, accept only if stationarity improves.
                    let noise = 10.0 * f64::EPSILON * f.abs().max(f64::MIN_POSITIVE);
                    let flat = ft <= f + noise
                        && projected_gradient_norm(&trial, &gt, bounds, cfg.activity_tol) < pg;
                    if ft.is_finite() && (sufficient || flat) {
                        accepted = Some((trial, ft, gt, step));
                        break;
                    }
                }
                alpha *= cfg.backtrack;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((trial, ft, gt, step)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        let ydiff: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&step, &ydiff) > 1e-12 * norm_inf(&step) * norm_inf(&ydiff) {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((step, ydiff));
        }
        u = trial;
        f = ft;
        g = gt;
        history.push(f);
        iterations += 1;
    }
    if termination == Termination::MaxIterations
        && projected_gradient_norm(&u, &g, bounds, cfg.activity_tol) <= cfg.grad_tol
    {
        termination = Termination::Converged;
    }

    let kkt = kkt_from_gradient(&u, &g, bounds, cfg.activity_tol);
    Ok(OptimizationResult {
        u_star: u,
        f_star: f,
        gradient: g,
        iterations,
        kkt_residual: kkt.residual,
        multipliers: kkt.multipliers,
        active_set: kkt.active_set,
        termination,
        objective_history: history,
        state_solves: ev.state_solves(),
    })
}
