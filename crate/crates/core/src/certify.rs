//! Numerical certificates: the eight regularity conditions, the invexity
//! witness, the KKT identity between control and output space, and the
//! classification of KKT points into interior and boundary guarantees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{dot, numerical_rank, DenseLu, DenseMatrix};
use crate::optimizer::{ActiveBound, BoundMultipliers, BoundSide, OptimizationResult};
use crate::par::{map_slice, Execution};
use crate::problem::{
    output_controllability_matrix, solve_states, Evaluator, NewtonSettings, ProblemError,
    RmpcProblem,
};
use crate::sampling::latin_hypercube;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifyError {
    #[error("not a KKT point: residual {residual:.3e} exceeds {tolerance:.3e}")]
    NotAKktPoint { residual: f64, tolerance: f64 },
    #[error("control {index} = {value} is not strictly inside the box")]
    NotInterior { index: usize, value: f64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

pub type Result<T> = std::result::Result<T, CertifyError>;

/// Relative pivot threshold for `D_u T`.
const CONTROLLABILITY_PIVOT: f64 = 1e-10;
/// Relative threshold on `|R_kk|` for the rank of `∇_u c`.
const RANK_TOL: f64 = 1e-10;
/// Scaled distance at which two converged state solves count as different.
const AGREEMENT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionStatus {
    Pass,
    Fail,
    ByConstruction,
    /// Sampled evidence only (state uniqueness).
    HeuristicPass,
    /// Every sample was blocked by an upstream failure.
    NotEvaluated,
}

impl ConditionStatus {
    pub fn is_pass(self) -> bool {
        matches!(
            self,
            ConditionStatus::Pass
                | ConditionStatus::ByConstruction
                | ConditionStatus::HeuristicPass
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub u: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub other_x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Diagnostic {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_pivot: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_found: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_required: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_disagreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged_guesses: Option<usize>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionEntry {
    pub status: ConditionStatus,
    pub samples_used: usize,
    /// Samples skipped because a prerequisite condition failed there.
    pub blocked: usize,
    pub diagnostic: Diagnostic,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

impl ConditionEntry {
    fn by_construction(note: &str) -> Self {
        Self {
            status: ConditionStatus::ByConstruction,
            samples_used: 0,
            blocked: 0,
            diagnostic: Diagnostic {
                note: note.into(),
                ..Default::default()
            },
            witness: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub problem: String,
    pub samples: usize,
    /// Entries for conditions 1–8, in order.
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn entry(&self, condition: u8) -> &ConditionEntry {
        &self.entries[condition as usize - 1]
    }

    pub fn failed(&self) -> Vec<u8> {
        (1..=8u8)
            .filter(|&c| self.entry(c).status == ConditionStatus::Fail)
            .collect()
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.status.is_pass())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("problem".into(), self.problem.clone().into());
        map.insert("samples".into(), self.samples.into());
        for (i, e) in self.entries.iter().enumerate() {
            map.insert(
                format!("condition_{}", i + 1),
                serde_json::to_value(e).expect("entry serialises"),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Outcome of the per-sample checks for conditions 3, 4, 6 and 7.
#[derive(Debug, Clone)]
enum Check {
    Pass(Diagnostic),
    Fail(Diagnostic, Witness),
    Blocked,
}

#[derive(Debug, Clone)]
struct SampleOutcome {
    c3: Check,
    c4: Check,
    c6: Check,
    c7: Check,
}

fn scaled_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / (1.0 + y.abs())))
}

fn check_sample<P: RmpcProblem + ?Sized>(p: &P, u: &[f64], seed: u64) -> SampleOutcome {
    let n = p.control_dim();
    let witness = |x: Option<Vec<f64>>| Witness {
        u: u.to_vec(),
        x,
        other_x: None,
    };
    let fail_all_downstream = |c3: Check, c4: Check| SampleOutcome {
        c3,
        c4,
        c6: Check::Blocked,
        c7: Check::Blocked,
    };

    // The designated state: Newton from the problem's own guess.
    let x_guess = p.initial_state(u).ok();
    let designated = Evaluator::new(p).states(u).map(|s| s.x.clone());

    // Condition 3: square, nonsingular ∇ₓc.
    let x_probe = designated.clone().ok().or_else(|| x_guess.clone());
    let Some(x_probe) = x_probe else {
        let d = Diagnostic {
            note: "no state available at this control".into(),
            ..Default::default()
        };
        return SampleOutcome {
            c3: Check::Blocked,
            c4: Check::Blocked,
            c6: Check::Fail(d, witness(None)),
            c7: Check::Blocked,
        };
    };
    let c3 = if p.equation_dim() != p.state_dim() {
        Check::Fail(
            Diagnostic {
                note: format!("∇ₓc is {}×{}, not square", p.equation_dim(), p.state_dim()),
                ..Default::default()
            },
            witness(Some(x_probe.clone())),
        )
    } else {
        match p.state_jacobian(&x_probe, u).and_then(|j| j.factor()) {
            Ok(f) => Check::Pass(Diagnostic {
                min_pivot: Some(f.min_pivot()),
                ..Default::default()
            }),
            Err(e) => Check::Fail(
                Diagnostic {
                    note: e.to_string(),
                    ..Default::default()
                },
                witness(Some(x_probe.clone())),
            ),
        }
    };

    // Condition 4: ∇ᵤc has full column rank n.
    let c4 = match p.control_jacobian(&x_probe, u) {
        Ok(cu) => {
            let rank = if cu.max_abs() == 0.0 {
                0
            } else {
                numerical_rank(&cu, RANK_TOL).unwrap_or(0)
            };
            let d = Diagnostic {
                rank_found: Some(rank),
                rank_required: Some(n),
                ..Default::default()
            };
            if rank == n {
                Check::Pass(d)
            } else {
                Check::Fail(d, witness(Some(x_probe.clone())))
            }
        }
        Err(e) => Check::Fail(
            Diagnostic {
                note: e.to_string(),
                ..Default::default()
            },
            witness(Some(x_probe.clone())),
        ),
    };

    if matches!(c3, Check::Fail(..)) || matches!(c4, Check::Fail(..)) {
        return fail_all_downstream(c3, c4);
    }

    let x = match designated {
        Ok(x) => x,
        Err(e) => {
            return SampleOutcome {
                c3,
                c4,
                c6: Check::Fail(
                    Diagnostic {
                        note: format!("designated state solve failed: {e}"),
                        ..Default::default()
                    },
                    witness(x_guess),
                ),
                c7: Check::Blocked,
            };
        }
    };

    // Condition 6: Newton from perturbed guesses must return the same state.
    let settings = NewtonSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut converged = 0;
    let mut worst = 0.0f64;
    let mut other = None;
    for scale in [1e-3, 1e-2, 1e-1, 1.0, 3.0, 10.0] {
        let guess: Vec<f64> = x
            .iter()
            .map(|v| v + scale * (1.0 + v.abs()) * rng.gen_range(-1.0..1.0))
            .collect();
        if let Ok(sol) = solve_states(p, u, &guess, settings.tol, settings.max_iter) {
            converged += 1;
            let d = scaled_distance(&sol.x, &x);
            if d > worst {
                worst = d;
                if d > AGREEMENT_TOL {
                    other = Some(sol.x);
                }
            }
        }
    }
    let d6 = Diagnostic {
        max_disagreement: Some(worst),
        converged_guesses: Some(converged),
        ..Default::default()
    };
    let c6 = match other {
        Some(ox) => Check::Fail(
            d6,
            Witness {
                u: u.to_vec(),
                x: Some(x.clone()),
                other_x: Some(ox),
            },
        ),
        None => Check::Pass(d6),
    };

    // Condition 7: D_uT nonsingular.
    let c7 = match output_controllability_matrix(p, &x, u) {
        Ok(d) => {
            let tol = CONTROLLABILITY_PIVOT * d.max_abs().max(f64::MIN_POSITIVE);
            match DenseLu::factor(&d, tol) {
                Ok(lu) => Check::Pass(Diagnostic {
                    min_pivot: Some(lu.min_pivot()),
                    ..Default::default()
                }),
                Err(e) => Check::Fail(
                    Diagnostic {
                        note: e.to_string(),
                        ..Default::default()
                    },
                    witness(Some(x.clone())),
                ),
            }
        }
        Err(e) => Check::Fail(
            Diagnostic {
                note: e.to_string(),
                ..Default::default()
            },
            witness(Some(x.clone())),
        ),
    };

    SampleOutcome { c3, c4, c6, c7 }
}

fn merge(checks: Vec<&Check>, heuristic: bool) -> ConditionEntry {
    let used = checks
        .iter()
        .filter(|c| !matches!(c, Check::Blocked))
        .count();
    let blocked = checks.len() - used;
    let first_fail = checks.iter().find_map(|c| match c {
        Check::Fail(d, w) => Some((d.clone(), w.clone())),
        _ => None,
    });
    if let Some((diagnostic, w)) = first_fail {
        return ConditionEntry {
            status: ConditionStatus::Fail,
            samples_used: used,
            blocked,
            diagnostic,
            witness: Some(w),
        };
    }
    if used == 0 {
        return ConditionEntry {
            status: ConditionStatus::NotEvaluated,
            samples_used: 0,
            blocked,
            diagnostic: Diagnostic {
                note: "blocked by an earlier failing condition at every sample".into(),
                ..Default::default()
            },
            witness: None,
        };
    }
    // Summarise the weakest sample.
    let mut diagnostic = Diagnostic::default();
    for c in &checks {
        if let Check::Pass(d) = c {
            if let Some(p) = d.min_pivot {
                diagnostic.min_pivot = Some(diagnostic.min_pivot.map_or(p, |q: f64| q.min(p)));
            }
            if let Some(r) = d.rank_found {
                diagnostic.rank_found = Some(diagnostic.rank_found.map_or(r, |q: usize| q.min(r)));
                diagnostic.rank_required = d.rank_required;
            }
            if let Some(m) = d.max_disagreement {
                diagnostic.max_disagreement =
                    Some(diagnostic.max_disagreement.map_or(m, |q: f64| q.max(m)));
            }
            if let Some(k) = d.converged_guesses {
                diagnostic.converged_guesses =
                    Some(diagnostic.converged_guesses.map_or(k, |q: usize| q.min(k)));
            }
        }
    }
    if blocked > 0 {
        diagnostic.note = format!("{blocked} sample(s) blocked by an earlier failing condition");
    }
    ConditionEntry {
        status: if heuristic {
            ConditionStatus::HeuristicPass
        } else {
            ConditionStatus::Pass
        },
        samples_used: used,
        blocked,
        diagnostic,
        witness: None,
    }
}

/// Samples the box corners plus `n_samples` Latin-hypercube points and
/// checks conditions 3, 4, 6 and 7 at each; 1, 2, 5 and 8 hold by the
/// problem's construction (box bounds only, convex tracking objective).
///
/// Condition 6 and 7 checks need a square, nonsingular `∇ₓc` and a
/// full-rank `∇ᵤc`; where those fail the sample is counted as blocked
/// rather than charged to the downstream condition.
pub fn check_conditions<P: RmpcProblem + ?Sized>(
    p: &P,
    n_samples: usize,
    seed: u64,
    exec: Execution,
) -> ConditionReport {
    let bounds = p.bounds();
    let mut samples = vec![bounds.lower().to_vec(), bounds.upper().to_vec()];
    if n_samples > 0 {
        samples.extend(latin_hypercube(n_samples, bounds, seed).expect("n_samples > 0"));
    }
    let indexed: Vec<(usize, Vec<f64>)> = samples.into_iter().enumerate().collect();
    let outcomes = map_slice(&indexed, exec, |(i, u)| {
        check_sample(p, u, seed ^ (*i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))
    });
    let entries = vec![
        ConditionEntry::by_construction("controls constrained by a box only"),
        ConditionEntry::by_construction("no constraints on states"),
        merge(outcomes.iter().map(|o| &o.c3).collect(), false),
        merge(outcomes.iter().map(|o| &o.c4).collect(), false),
        ConditionEntry::by_construction("box constraint gradients are distinct unit vectors"),
        merge(outcomes.iter().map(|o| &o.c6).collect(), true),
        merge(outcomes.iter().map(|o| &o.c7).collect(), false),
        ConditionEntry::by_construction("objective is a sum of |y − t|^p with p ≥ 2"),
    ];
    ConditionReport {
        problem: p.name().to_string(),
        samples: outcomes.len(),
        entries,
    }
}

fn require_interior<P: RmpcProblem + ?Sized>(p: &P, u: &[f64]) -> Result<()> {
    let b = p.bounds();
    b.check(u, 0.0)?;
    for (i, &v) in u.iter().enumerate() {
        if !(v > b.lower()[i] && v < b.upper()[i]) {
            return Err(CertifyError::NotInterior { index: i, value: v });
        }
    }
    Ok(())
}

fn controllability_lu(d: &DenseMatrix) -> Result<DenseLu> {
    let tol = CONTROLLABILITY_PIVOT * d.max_abs().max(f64::MIN_POSITIVE);
    DenseLu::factor(d, tol).map_err(|e| CertifyError::Problem(e.into()))
}

/// `η(u2, u1) = (D_uT(u1))⁻¹ (T(u2) − T(u1))`.
pub fn invexity_witness_eta<P: RmpcProblem + ?Sized>(
    p: &P,
    u1: &[f64],
    u2: &[f64],
) -> Result<Vec<f64>> {
    require_interior(p, u1)?;
    require_interior(p, u2)?;
    let mut ev = Evaluator::new(p);
    let y2 = ev.output(u2)?;
    let y1 = ev.output(u1)?;
    let d = ev.output_controllability(u1)?;
    let dy: Vec<f64> = y2.iter().zip(&y1).map(|(a, b)| a - b).collect();
    Ok(controllability_lu(&d)?
        .solve(&dy)
        .map_err(ProblemError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvexityViolation {
    pub pair: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvexityCheckResult {
    pub pairs_tested: usize,
    pub violations: Vec<InvexityViolation>,
    /// Largest `rhs − lhs` over all tested pairs (negative when all hold with margin).
    pub max_violation: f64,
    /// Pairs that could not be evaluated, with the error text.
    pub failures: Vec<(usize, String)>,
}

/// Checks `(f∘T)(u2) − (f∘T)(u1) ≥ ηᵀ ∇(f∘T)(u1) − tol` for every pair.
pub fn check_invexity_inequality<P: RmpcProblem + ?Sized>(
    p: &P,
    pairs: &[(Vec<f64>, Vec<f64>)],
    tol: f64,
    exec: Execution,
) -> InvexityCheckResult {
    let per_pair = map_slice(pairs, exec, |(u1, u2)| -> Result<(f64, f64)> {
        let eta = invexity_witness_eta(p, u1, u2)?;
        let mut ev = Evaluator::new(p);
        let (f1, g1) = ev.value_and_gradient(u1)?;
        let f2 = ev.objective(u2)?;
        Ok((f2 - f1, dot(&eta, &g1)))
    });
    let mut violations = Vec::new();
    let mut failures = Vec::new();
    let mut max_violation = f64::NEG_INFINITY;
    let mut tested = 0;
    for (i, r) in per_pair.into_iter().enumerate() {
        match r {
            Ok((lhs, rhs)) => {
                tested += 1;
                max_violation = max_violation.max(rhs - lhs);
                if lhs - rhs < -tol {
                    violations.push(InvexityViolation {
                        pair: i,
                        lhs,
                        rhs,
                        gap: lhs - rhs,
                    });
                }
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    InvexityCheckResult {
        pairs_tested: tested,
        violations,
        max_violation,
        failures,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktEquivalence {
    /// `D_u L^U = ∇(f∘T) + λᵀ∇d`, adjoint route.
    pub control_side: Vec<f64>,
    /// `D_y L^Y · D_u T`, assembled in output space.
    pub output_side: Vec<f64>,
    pub max_difference: f64,
    pub holds: bool,
}

/// Compares the control-space Lagrangian gradient with the output-space one
/// mapped back through `D_u T`.
pub fn kkt_equivalence_check<P: RmpcProblem + ?Sized>(
    p: &P,
    u_star: &[f64],
    lambda: &BoundMultipliers,
    tol: f64,
) -> Result<KktEquivalence> {
    let mut ev = Evaluator::new(p);
    let grad = ev.gradient(u_star)?;
    let y = ev.output(u_star)?;
    let d = ev.output_controllability(u_star)?;
    let cg = lambda.constraint_gradient();
    let control_side: Vec<f64> = grad.iter().zip(&cg).map(|(a, b)| a + b).collect();

    // D_y L^Y = ∇f(y) + D_uT⁻ᵀ (∇dᵀλ)
    let lu = controllability_lu(&d)?;
    let pulled = lu.solve_transpose(&cg).map_err(ProblemError::from)?;
    let dyl: Vec<f64> = p
        .objective()
        .gradient(&y)
        .iter()
        .zip(&pulled)
        .map(|(a, b)| a + b)
        .collect();
    let output_side = d.tr_mul_vec(&dyl);
    let max_difference = control_side
        .iter()
        .zip(&output_side)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(KktEquivalence {
        control_side,
        output_side,
        max_difference,
        holds: max_difference <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Interior,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeNormal {
    pub index: usize,
    pub side: BoundSide,
    /// Gradient of the bound constraint in output coordinates, `∇d_i · (D_uT)⁻¹`.
    pub normal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktCertificate {
    pub classification: Classification,
    pub active_set: Vec<ActiveBound>,
    /// Bounds met exactly, without the activity tolerance.
    pub strict_active_set: Vec<ActiveBound>,
    pub cone_normals: Vec<ConeNormal>,
    pub guarantee: String,
    pub u_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub f_star: f64,
    pub kkt_residual: f64,
}

impl KktCertificate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("certificate serialises")
    }
}

/// Interior points are global minima on the whole box; boundary points are
/// global on the set whose output displacement lies in the linearised
/// feasible cone at `y*`.
pub fn classify_kkt<P: RmpcProblem + ?Sized>(
    p: &P,
    result: &OptimizationResult,
    kkt_tol: f64,
) -> Result<KktCertificate> {
    if !(result.kkt_residual <= kkt_tol) {
        return Err(CertifyError::NotAKktPoint {
            residual: result.kkt_residual,
            tolerance: kkt_tol,
        });
    }
    let u = &result.u_star;
    let b = p.bounds();
    let strict_active_set = (0..u.len())
        .filter_map(|i| {
            if u[i] == b.lower()[i] {
                Some(ActiveBound {
                    index: i,
                    side: BoundSide::Lower,
                })
            } else if u[i] == b.upper()[i] {
                Some(ActiveBound {
                    index: i,
                    side: BoundSide::Upper,
                })
            } else {
                None
            }
        })
        .collect();
    let mut ev = Evaluator::new(p);
    let y_star = ev.output(u)?;
    let f_star = p.objective().value(&y_star);
    let active_set = result.active_set.clone();
    let cone_normals = if active_set.is_empty() {
        Vec::new()
    } else {
        let d = ev.output_controllability(u)?;
        let inv = controllability_lu(&d)?.inverse();
        active_set
            .iter()
            .map(|a| {
                let sign = match a.side {
                    BoundSide::Lower => -1.0,
                    BoundSide::Upper => 1.0,
                };
                ConeNormal {
                    index: a.index,
                    side: a.side,
                    normal: inv.row(a.index).iter().map(|v| sign * v).collect(),
                }
            })
            .collect()
    };
    let (classification, guarantee) = if active_set.is_empty() {
        (Classification::Interior, "global minimum on U".to_string())
    } else {
        (
            Classification::Boundary,
            format!(
                "global minimum on V(u*): controls whose output displacement T(u) − T(u*) \
                 has non-positive inner product with all {} cone normals",
                active_set.len()
            ),
        )
    };
    Ok(KktCertificate {
        classification,
        active_set,
        strict_active_set,
        cone_normals,
        guarantee,
        u_star: u.clone(),
        y_star,
        f_star,
        kkt_residual: result.kkt_residual,
    })
}

/// Whether `T(u) − T(u*)` lies in the linearised feasible cone at `T(u*)`.
pub fn membership_v<P: RmpcProblem + ?Sized>(
    p: &P,
    cert: &KktCertificate,
    u: &[f64],
    tol: f64,
) -> Result<bool> {
    if cert.cone_normals.is_empty() {
        p.bounds().check(u, 0.0)?;
        return Ok(true);
    }
    let y = Evaluator::new(p).output(u)?;
    let t: Vec<f64> = y.iter().zip(&cert.y_star).map(|(a, b)| a - b).collect();
    Ok(cert.cone_normals.iter().all(|n| dot(&n.normal, &t) <= tol))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalityCheck {
    pub sampled: usize,
    pub members: usize,
    /// Members with `f(u) < f* − tol`.
    pub counterexamples: Vec<Vec<f64>>,
    pub min_gap: f64,
    pub failures: usize,
}

/// Samples the box and verifies `f(u) ≥ f* − tol` on every sample inside
/// `V(u*)`; for interior certificates every sample qualifies.
pub fn check_global_on_v<P: RmpcProblem + ?Sized>(
    p: &P,
    cert: &KktCertificate,
    samples: &[Vec<f64>],
    tol: f64,
    exec: Execution,
) -> GlobalityCheck {
    let per = map_slice(samples, exec, |u| -> Result<Option<f64>> {
        if !membership_v(p, cert, u, 0.0)? {
            return Ok(None);
        }
        Ok(Some(Evaluator::new(p).objective(u)?))
    });
    let mut out = GlobalityCheck {
        sampled: samples.len(),
        members: 0,
        counterexamples: Vec::new(),
        min_gap: f64::INFINITY,
        failures: 0,
    };
    for (u, r) in samples.iter().zip(per) {
        match r {
            Ok(Some(f)) => {
                out.members += 1;
                let gap = f - cert.f_star;
                out.min_gap = out.min_gap.min(gap);
                if gap < -tol {
                    out.counterexamples.push(u.clone());
                }
            }
            Ok(None) => {}
            Err(_) => out.failures += 1,
        }
    }
    out
}
