//! Small analytic problems: regular ones that satisfy every regularity
//! condition, irregular ones that each break a specific condition, and an
//! exhaustive grid search used as a global-optimum oracle.

use std::f64::consts::PI;

use serde::Serialize;

use crate::linalg::{numerical_rank, DenseMatrix};
use crate::par::{map_indexed, Execution};
use crate::problem::{
    ControlBox, Evaluator, ProblemError, Result, RmpcProblem, StateJacobian, TrackingObjective,
};

const RANK_TOL: f64 = 1e-10;

/// `c(x, u) = A x + B u + b`, `y = C x + c`.
#[derive(Debug, Clone)]
pub struct LinearAffine {
    a: DenseMatrix,
    b: DenseMatrix,
    c: DenseMatrix,
    b_vec: Vec<f64>,
    c_vec: Vec<f64>,
    bounds: ControlBox,
    objective: TrackingObjective,
}

#[allow(clippy::too_many_arguments)]
pub fn make_linear_affine(
    a: DenseMatrix,
    b: DenseMatrix,
    c: DenseMatrix,
    b_vec: Vec<f64>,
    c_vec: Vec<f64>,
    target: Vec<f64>,
    p: f64,
    bounds: ControlBox,
) -> Result<LinearAffine> {
    let m = a.rows();
    let n = bounds.dim();
    let dims_ok = a.cols() == m
        && b.rows() == m
        && b.cols() == n
        && c.rows() == n
        && c.cols() == m
        && b_vec.len() == m
        && c_vec.len() == n
        && target.len() == n
        && m >= n;
    if !dims_ok {
        return Err(ProblemError::Configuration(
            "linear-affine dimensions are inconsistent".into(),
        ));
    }
    let full = |mat: &DenseMatrix, want: usize| -> Result<bool> {
        Ok(numerical_rank(mat, RANK_TOL).map_err(ProblemError::from)? == want)
    };
    if !full(&a, m)? {
        return Err(ProblemError::Configuration("A is singular".into()));
    }
    if !full(&b, n)? || !full(&c, n)? {
        return Err(ProblemError::Configuration(
            "B and C must have full rank".into(),
        ));
    }
    let a_inv_b = {
        let lu = a.lu(f64::MIN_POSITIVE)?;
        let mut z = DenseMatrix::zeros(m, n);
        for j in 0..n {
            for (i, v) in lu.solve(&b.column(j))?.into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        z
    };
    if !full(&c.mul(&a_inv_b), n)? {
        return Err(ProblemError::Configuration(
            "C A⁻¹ B must be invertible".into(),
        ));
    }
    Ok(LinearAffine {
        a,
        b,
        c,
        b_vec,
        c_vec,
        bounds,
        objective: TrackingObjective::new(target, p)?,
    })
}

impl RmpcProblem for LinearAffine {
    fn name(&self) -> &str {
        "linear_affine"
    }
    fn state_dim(&self) -> usize {
        self.a.rows()
    }
    fn control_dim(&self) -> usize {
        self.b.cols()
    }
    fn bounds(&self) -> &ControlBox {
        &self.bounds
    }
    fn objective(&self) -> &TrackingObjective {
        &self.objective
    }
    fn residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let ax = self.a.mul_vec(x);
        let bu = self.b.mul_vec(u);
        Ok(ax
            .iter()
            .zip(&bu)
            .zip(&self.b_vec)
            .map(|((p, q), r)| p + q + r)
            .collect())
    }
    fn state_jacobian(&self, _x: &[f64], _u: &[f64]) -> Result<StateJacobian> {
        Ok(StateJacobian::Dense(self.a.clone()))
    }
    fn control_jacobian(&self, _x: &[f64], _u: &[f64]) -> Result<DenseMatrix> {
        Ok(self.b.clone())
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        self.c
            .mul_vec(x)
            .iter()
            .zip(&self.c_vec)
            .map(|(p, q)| p + q)
            .collect()
    }
    fn output_jacobian(&self, _x: &[f64]) -> DenseMatrix {
        self.c.clone()
    }
    fn initial_state(&self, _u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.a.rows()])
    }
}

impl LinearAffine {
    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }
    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }
    pub fn c(&self) -> &DenseMatrix {
        &self.c
    }
}

/// `A = −I, B = I, C = I`, so the reduced objective is `Σ|uᵢ − tᵢ|ᵖ`.
pub fn identity_chain(
    n: usize,
    target: Vec<f64>,
    p: f64,
    bounds: ControlBox,
) -> Result<LinearAffine> {
    let mut neg = DenseMatrix::identity(n);
    for i in 0..n {
        neg[(i, i)] = -1.0;
    }
    make_linear_affine(
        neg,
        DenseMatrix::identity(n),
        DenseMatrix::identity(n),
        vec![0.0; n],
        vec![0.0; n],
        target,
        p,
        bounds,
    )
}

/// Well-conditioned 3-state, 3-control instance with coupled dynamics.
pub fn linear_affine_default() -> LinearAffine {
    let a = DenseMatrix::from_rows(&[
        vec![-2.0, 0.5, 0.0],
        vec![0.3, -1.5, 0.4],
        vec![0.0, 0.2, -1.0],
    ]);
    let b = DenseMatrix::from_rows(&[
        vec![1.0, 0.2, 0.0],
        vec![0.0, 1.0, -0.3],
        vec![0.1, 0.0, 0.8],
    ]);
    let c = DenseMatrix::from_rows(&[
        vec![1.0, 0.0, 0.5],
        vec![0.0, 2.0, 0.0],
        vec![0.2, 0.0, 1.0],
    ]);
    make_linear_affine(
        a,
        b,
        c,
        vec![0.1, -0.2, 0.05],
        vec![0.0, 0.1, -0.1],
        vec![0.4, -0.3, 0.6],
        2.0,
        ControlBox::uniform(3, -1.0, 1.0).expect("valid box"),
    )
    .expect("well-posed default")
}

/// Polar-to-Cartesian map: `x₁ = u₁ cos u₂`, `x₂ = u₁ sin u₂`, `y = x`.
#[derive(Debug, Clone)]
pub struct Trigonometric {
    bounds: ControlBox,
    objective: TrackingObjective,
}

pub fn make_trigonometric(
    u1_bounds: (f64, f64),
    u2_bounds: (f64, f64),
    target: [f64; 2],
    p: f64,
) -> Result<Trigonometric> {
    let (r_lo, r_hi) = u1_bounds;
    let (a_lo, a_hi) = u2_bounds;
    if !(r_lo > 0.0 && r_lo <= r_hi && a_lo >= 0.0 && a_lo <= a_hi && a_hi < 2.0 * PI) {
        return Err(ProblemError::Configuration(format!(
            "trigonometric bounds need 0 < u1 and [u2] within [0, 2π): got {u1_bounds:?}, {u2_bounds:?}"
        )));
    }
    Ok(Trigonometric {
        bounds: ControlBox::new(vec![r_lo, a_lo], vec![r_hi, a_hi])?,
        objective: TrackingObjective::new(target.to_vec(), p)?,
    })
}

pub fn trigonometric_default() -> Trigonometric {
    make_trigonometric((0.5, 2.0), (0.0, 6.0), [0.6, 0.8], 2.0).expect("valid default")
}

impl RmpcProblem for Trigonometric {
    fn name(&self) -> &str {
        "trigonometric"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn bounds(&self) -> &ControlBox {
        &self.bounds
    }
    fn objective(&self) -> &TrackingObjective {
        &self.objective
    }
    fn residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![x[0] - u[0] * u[1].cos(), x[1] - u[0] * u[1].sin()])
    }
    fn state_jacobian(&self, _x: &[f64], _u: &[f64]) -> Result<StateJacobian> {
        Ok(StateJacobian::Dense(DenseMatrix::identity(2)))
    }
    fn control_jacobian(&self, _x: &[f64], u: &[f64]) -> Result<DenseMatrix> {
        let (s, c) = u[1].sin_cos();
        Ok(DenseMatrix::from_rows(&[
            vec![-c, u[0] * s],
            vec![-s, -u[0] * c],
        ]))
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn output_jacobian(&self, _x: &[f64]) -> DenseMatrix {
        DenseMatrix::identity(2)
    }
    fn initial_state(&self, _u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0, 0.0])
    }
}

/// Two-stage bilinear cascade with states `(x₁, x₂, z₁, z₂)`:
/// `u₁ = x₁ z₀`, `x₁ = z₀ − z₁`, `u₂ = x₂ z₁`, `x₂ = z₁ − z₂`, output `y = (z₁, z₂)`.
#[derive(Debug, Clone)]
pub struct BilinearCascade {
    z0: f64,
    bounds: ControlBox,
    objective: TrackingObjective,
}

pub fn make_bilinear_cascade(
    z0: f64,
    bounds: ControlBox,
    target: [f64; 2],
    p: f64,
) -> Result<BilinearCascade> {
    if bounds.dim() != 2 {
        return Err(ProblemError::DimensionMismatch {
            expected: 2,
            got: bounds.dim(),
        });
    }
    if z0 == 0.0 || !z0.is_finite() {
        return Err(ProblemError::Configuration("z0 must be nonzero".into()));
    }
    // z₁ is monotone in u₁ and z₂ is monotone in both controls while z₁ keeps
    // its sign, so the corners bound both stages.
    let (l, h) = (bounds.lower(), bounds.upper());
    let z1s = [z0 - l[0] / z0, z0 - h[0] / z0];
    if z1s
        .iter()
        .any(|z| *z == 0.0 || z.signum() != z1s[0].signum())
    {
        return Err(ProblemError::Configuration(format!(
            "bounds admit z1 = 0 for z0 = {z0}"
        )));
    }
    let z2s: Vec<f64> = z1s
        .iter()
        .flat_map(|&z1| [l[1], h[1]].map(|u2| z1 - u2 / z1))
        .collect();
    if z2s
        .iter()
        .any(|z| *z == 0.0 || z.signum() != z2s[0].signum())
    {
        return Err(ProblemError::Configuration(format!(
            "bounds admit z2 = 0 for z0 = {z0}"
        )));
    }
    Ok(BilinearCascade {
        z0,
        bounds,
        objective: TrackingObjective::new(target.to_vec(), p)?,
    })
}

pub fn bilinear_cascade_default() -> BilinearCascade {
    make_bilinear_cascade(
        10.0,
        ControlBox::uniform(2, 0.0, 5.0).expect("valid box"),
        [9.8, 9.8 - 3.0 / 9.8],
        2.0,
    )
    .expect("valid default")
}

impl BilinearCascade {
    pub fn z0(&self) -> f64 {
        self.z0
    }
}

impl RmpcProblem for BilinearCascade {
    fn name(&self) -> &str {
        "bilinear_cascade"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn bounds(&self) -> &ControlBox {
        &self.bounds
    }
    fn objective(&self) -> &TrackingObjective {
        &self.objective
    }
    fn residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (x1, x2, z1, z2) = (x[0], x[1], x[2], x[3]);
        let z0 = self.z0;
        Ok(vec![
            x1 * z0 - u[0],
            x1 - z0 + z1,
            x2 * z1 - u[1],
            x2 - z1 + z2,
        ])
    }
    fn state_jacobian(&self, x: &[f64], _u: &[f64]) -> Result<StateJacobian> {
        let (x2, z1) = (x[1], x[2]);
        Ok(StateJacobian::Dense(DenseMatrix::from_rows(&[
            vec![self.z0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.0, z1, x2, 0.0],
            vec![0.0, 1.0, -1.0, 1.0],
        ])))
    }
    fn control_jacobian(&self, _x: &[f64], _u: &[f64]) -> Result<DenseMatrix> {
        Ok(DenseMatrix::from_rows(&[
            vec![-1.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, -1.0],
            vec![0.0, 0.0],
        ]))
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        vec![x[2], x[3]]
    }
    fn output_jacobian(&self, _x: &[f64]) -> DenseMatrix {
        DenseMatrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]])
    }
    fn initial_state(&self, _u: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0, 0.0, self.z0, self.z0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IrregularKind {
    /// `x(1 − x) = u(1 − u)` on `[0, 1]`: the binary restriction carried by a state.
    Binary,
    /// `u = sin x`.
    Sine,
    /// `u = x₁ x₂`: one equation for two states.
    BilinearState,
    /// `x₁ = u₁ u₂`, `x₂ = u₂`.
    BilinearControl,
}

impl IrregularKind {
    pub const ALL: [IrregularKind; 4] = [
        IrregularKind::Binary,
        IrregularKind::Sine,
        IrregularKind::BilinearState,
        IrregularKind::BilinearControl,
    ];

    /// The regularity condition this fixture is built to violate.
    pub fn violated_condition(self) -> u8 {
        match self {
            IrregularKind::Binary | IrregularKind::Sine => 6,
            IrregularKind::BilinearState => 3,
            IrregularKind::BilinearControl => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IrregularKind::Binary => "irregular_binary",
            IrregularKind::Sine => "irregular_sine",
            IrregularKind::BilinearState => "irregular_bilinear_state",
            IrregularKind::BilinearControl => "irregular_bilinear_control",
        }
    }
}

/// A negative-control fixture. States are evaluated on a designated branch so
/// the condition checks can run to completion.
#[derive(Debug, Clone)]
pub struct Irregular {
    kind: IrregularKind,
    bounds: ControlBox,
    objective: TrackingObjective,
}

pub fn make_irregular(kind: IrregularKind) -> Irregular {
    let (bounds, n) = match kind {
        IrregularKind::Binary | IrregularKind::BilinearState => {
            (ControlBox::uniform(1, 0.0, 1.0), 1)
        }
        IrregularKind::Sine => (ControlBox::uniform(1, -0.9, 0.9), 1),
        IrregularKind::BilinearControl => (ControlBox::uniform(2, 0.0, 1.0), 2),
    };
    Irregular {
        kind,
        bounds: bounds.expect("valid box"),
        objective: TrackingObjective::new(vec![0.0; n], 2.0).expect("valid objective"),
    }
}

impl Irregular {
    pub fn kind(&self) -> IrregularKind {
        self.kind
    }
}

impl RmpcProblem for Irregular {
    fn name(&self) -> &str {
        self.kind.name()
    }
    fn state_dim(&self) -> usize {
        match self.kind {
            IrregularKind::Binary | IrregularKind::Sine => 1,
            IrregularKind::BilinearState | IrregularKind::BilinearControl => 2,
        }
    }
    fn control_dim(&self) -> usize {
        self.bounds.dim()
    }
    fn equation_dim(&self) -> usize {
        match self.kind {
            IrregularKind::BilinearState => 1,
            _ => self.state_dim(),
        }
    }
    fn bounds(&self) -> &ControlBox {
        &self.bounds
    }
    fn objective(&self) -> &TrackingObjective {
        &self.objective
    }
    fn residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.kind {
            IrregularKind::Binary => vec![x[0] * (1.0 - x[0]) - u[0] * (1.0 - u[0])],
            IrregularKind::Sine => vec![x[0].sin() - u[0]],
            IrregularKind::BilinearState => vec![x[0] * x[1] - u[0]],
            IrregularKind::BilinearControl => vec![x[0] - u[0] * u[1], x[1] - u[1]],
        })
    }
    fn state_jacobian(&self, x: &[f64], _u: &[f64]) -> Result<StateJacobian> {
        let d = match self.kind {
            IrregularKind::Binary => DenseMatrix::from_rows(&[vec![1.0 - 2.0 * x[0]]]),
            IrregularKind::Sine => DenseMatrix::from_rows(&[vec![x[0].cos()]]),
            IrregularKind::BilinearState => DenseMatrix::from_rows(&[vec![x[1], x[0]]]),
            IrregularKind::BilinearControl => DenseMatrix::identity(2),
        };
        Ok(StateJacobian::Dense(d))
    }
    fn control_jacobian(&self, _x: &[f64], u: &[f64]) -> Result<DenseMatrix> {
        Ok(match self.kind {
            IrregularKind::Binary => DenseMatrix::from_rows(&[vec![-(1.0 - 2.0 * u[0])]]),
            IrregularKind::Sine | IrregularKind::BilinearState => {
                DenseMatrix::from_rows(&[vec![-1.0]])
            }
            IrregularKind::BilinearControl => {
                DenseMatrix::from_rows(&[vec![-u[1], -u[0]], vec![0.0, -1.0]])
            }
        })
    }
    fn output(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            IrregularKind::BilinearState => vec![x[0]],
            _ => x.to_vec(),
        }
    }
    fn output_jacobian(&self, _x: &[f64]) -> DenseMatrix {
        match self.kind {
            IrregularKind::BilinearState => DenseMatrix::from_rows(&[vec![1.0, 0.0]]),
            IrregularKind::BilinearControl => DenseMatrix::identity(2),
            _ => DenseMatrix::identity(1),
        }
    }
    fn initial_state(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.kind {
            IrregularKind::Binary => vec![u[0]],
            IrregularKind::Sine => vec![u[0].asin()],
            IrregularKind::BilinearState => vec![u[0], 1.0],
            IrregularKind::BilinearControl => vec![u[0] * u[1], u[1]],
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceResult {
    pub u_best: Vec<f64>,
    pub f_best: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// Largest objective change from the best grid point to an adjacent one.
    pub neighbor_variation: f64,
}

/// Exhaustive search over a uniform grid with `grid_per_dim` points per axis.
///
/// Ties go to the lowest linear grid index. Points whose state solve fails are
/// skipped and counted.
pub fn brute_force_global<P: RmpcProblem + ?Sized>(
    p: &P,
    grid_per_dim: usize,
    exec: Execution,
) -> Result<BruteForceResult> {
    let n = p.control_dim();
    if n == 0 || n > 3 {
        return Err(ProblemError::Configuration(format!(
            "brute force supports 1 to 3 controls, got {n}"
        )));
    }
    if grid_per_dim < 2 {
        return Err(ProblemError::Configuration(
            "grid_per_dim must be at least 2".into(),
        ));
    }
    let b = p.bounds();
    let total = grid_per_dim.pow(n as u32);
    let point = |idx: usize| -> Vec<f64> {
        let mut rem = idx;
        (0..n)
            .map(|d| {
                let k = rem % grid_per_dim;
                rem /= grid_per_dim;
                let t = k as f64 / (grid_per_dim - 1) as f64;
                if k == grid_per_dim - 1 {
                    b.upper()[d]
                } else {
                    b.lower()[d] + t * (b.upper()[d] - b.lower()[d])
                }
            })
            .collect()
    };
    // Chunked so each worker reuses one evaluator.
    let chunk = 256;
    let chunks = total.div_ceil(chunk);
    let values: Vec<Option<f64>> = map_indexed(chunks, exec, |c| {
        let mut ev = Evaluator::new(p);
        (c * chunk..((c + 1) * chunk).min(total))
            .map(|i| ev.objective(&point(i)).ok().filter(|f| f.is_finite()))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(f) = *v {
            if best.is_none_or(|(_, bf)| f < bf) {
                best = Some((i, f));
            }
        }
    }
    let skipped = values.iter().filter(|v| v.is_none()).count();
    let (bi, f_best) =
        best.ok_or_else(|| ProblemError::Evaluation("no grid point could be evaluated".into()))?;

    let mut neighbor_variation: f64 = 0.0;
    let mut stride = 1;
    for _ in 0..n {
        let k = (bi / stride) % grid_per_dim;
        if k > 0 {
            if let Some(f) = values[bi - stride] {
                neighbor_variation = neighbor_variation.max((f - f_best).abs());
            }
        }
        if k + 1 < grid_per_dim {
            if let Some(f) = values[bi + stride] {
                neighbor_variation = neighbor_variation.max((f - f_best).abs());
            }
        }
        stride *= grid_per_dim;
    }
    Ok(BruteForceResult {
        u_best: point(bi),
        f_best,
        evaluated: total - skipped,
        skipped,
        neighbor_variation,
    })
}

/// Catalog names accepted by [`regular_by_name`].
pub const REGULAR_FIXTURES: [&str; 3] = ["linear_affine", "trigonometric", "bilinear_cascade"];

pub fn regular_by_name(name: &str) -> Option<Box<dyn RmpcProblem>> {
    match name {
        "linear_affine" => Some(Box::new(linear_affine_default())),
        "trigonometric" => Some(Box::new(trigonometric_default())),
        "bilinear_cascade" => Some(Box::new(bilinear_cascade_default())),
        _ => None,
    }
}

pub fn irregular_by_name(name: &str) -> Option<Irregular> {
    IrregularKind::ALL
        .into_iter()
        .find(|k| k.name() == name || k.name().trim_start_matches("irregular_") == name)
        .map(make_irregular)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{
        finite_difference_gradient, output_controllability_matrix, reduced_gradient,
        reduced_objective, solve_states,
    };
    use approx::assert_relative_eq;

    /// Solves the cascade in the displayed order starting from z₀.
    fn cascade_substitution(z0: f64, u: [f64; 2]) -> [f64; 4] {
        let x1 = u[0] / z0;
        let z1 = z0 - x1;
        let x2 = u[1] / z1;
        let z2 = z1 - x2;
        [x1, x2, z1, z2]
    }

    #[test]
    fn cascade_states_match_substitution() {
        let p = bilinear_cascade_default();
        let oracle = cascade_substitution(10.0, [2.0, 3.0]);
        assert_relative_eq!(oracle[2], 9.8, epsilon = 1e-15);
        assert_relative_eq!(oracle[3], 9.493_877_551_020_408, epsilon = 1e-12);
        let sol = solve_states(
            &p,
            &[2.0, 3.0],
            &p.initial_state(&[2.0, 3.0]).unwrap(),
            1e-12,
            50,
        )
        .unwrap();
        for (a, b) in sol.x.iter().zip(&oracle) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        let sol0 = solve_states(&p, &[0.0, 0.0], &[0.0, 0.0, 10.0, 10.0], 1e-12, 50).unwrap();
        assert_eq!(sol0.x[2], 10.0);
        assert_eq!(sol0.x[3], 10.0);
    }

    #[test]
    fn cascade_rejects_zero_crossing_bounds() {
        let b = ControlBox::uniform(2, 0.0, 150.0).unwrap();
        assert!(make_bilinear_cascade(10.0, b, [1.0, 1.0], 2.0).is_err());
    }

    #[test]
    fn cascade_controllability_is_lower_triangular() {
        let p = bilinear_cascade_default();
        let u = [2.0, 3.0];
        let x = cascade_substitution(10.0, u);
        let m = output_controllability_matrix(&p, &x, &u).unwrap();
        // z₁ = z₀ − u₁/z₀, z₂ = z₁ − u₂/z₁
        let z1 = x[2];
        let dz1_du1 = -1.0 / 10.0;
        assert_relative_eq!(m[(0, 0)], dz1_du1, epsilon = 1e-14);
        assert_eq!(m[(0, 1)], 0.0);
        assert_relative_eq!(
            m[(1, 0)],
            dz1_du1 * (1.0 + u[1] / (z1 * z1)),
            epsilon = 1e-14
        );
        assert_relative_eq!(m[(1, 1)], -1.0 / z1, epsilon = 1e-14);
    }

    #[test]
    fn linear_affine_closed_forms() {
        let p = linear_affine_default();
        let u = [0.3, -0.2, 0.5];
        // x = −A⁻¹(Bu + b) in one Newton step
        let sol = solve_states(&p, &u, &[0.0; 3], 1e-12, 50).unwrap();
        assert_eq!(sol.newton_iterations, 1);
        let r = p.residual(&sol.x, &u).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-14));

        // gradient = (C A⁻¹ B)ᵀ... via explicit dense inverse
        let a_inv = p.a().lu(1e-14).unwrap().inverse();
        let dudt = p.c().mul(&a_inv).mul(p.b());
        let y = p.output(&sol.x);
        let fy = p.objective().gradient(&y);
        let expected: Vec<f64> = dudt.tr_mul_vec(&fy).into_iter().map(|v| -v).collect();
        let g = reduced_gradient(&p, &u).unwrap();
        for (a, b) in g.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
        // objective value by direct substitution
        let f = reduced_objective(&p, &u).unwrap();
        let direct: f64 = y
            .iter()
            .zip(p.objective().target())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert_relative_eq!(f, direct, epsilon = 1e-14);
    }

    #[test]
    fn identity_chain_is_unit() {
        let p = identity_chain(
            2,
            vec![0.0, 0.0],
            2.0,
            ControlBox::uniform(2, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        let m = output_controllability_matrix(&p, &[0.2, 0.3], &[0.2, 0.3]).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_relative_eq!(
            reduced_objective(&p, &[0.2, 0.3]).unwrap(),
            0.13,
            epsilon = 1e-15
        );
    }

    #[test]
    fn singular_a_rejected() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let r = make_linear_affine(
            a,
            DenseMatrix::identity(2),
            DenseMatrix::identity(2),
            vec![0.0; 2],
            vec![0.0; 2],
            vec![0.0; 2],
            2.0,
            ControlBox::uniform(2, -1.0, 1.0).unwrap(),
        );
        assert!(matches!(r, Err(ProblemError::Configuration(_))));
    }

    #[test]
    fn trigonometric_examples() {
        let p = make_trigonometric((0.5, 2.0), (0.0, 6.0), [1.0, 0.0], 2.0).unwrap();
        let sol = solve_states(&p, &[1.0, 0.0], &[0.0, 0.0], 1e-12, 50).unwrap();
        assert_eq!(sol.x, vec![1.0, 0.0]);
        assert_eq!(reduced_objective(&p, &[1.0, 0.0]).unwrap(), 0.0);
        let m = output_controllability_matrix(&p, &sol.x, &[1.0, 0.0]).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(make_trigonometric((0.0, 1.0), (0.0, 1.0), [0.0, 0.0], 2.0).is_err());
        assert!(make_trigonometric((0.5, 1.0), (0.0, 7.0), [0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn fd_step_must_be_positive() {
        let p = trigonometric_default();
        assert_eq!(
            finite_difference_gradient(&p, &[1.0, 1.0], 0.0),
            Err(ProblemError::InvalidStep(0.0))
        );
    }

    #[test]
    fn irregular_annotations() {
        let expected = [6, 6, 3, 4];
        for (k, e) in IrregularKind::ALL.iter().zip(expected) {
            assert_eq!(k.violated_condition(), e);
        }
        let p = make_irregular(IrregularKind::BilinearControl);
        let ju = p.control_jacobian(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(ju.row(0), &[0.0, 0.0]);
        assert_eq!(numerical_rank(&ju, 1e-10).unwrap(), 1);
        assert!(irregular_by_name("sine").is_some());
        assert!(irregular_by_name("irregular_binary").is_some());
    }

    #[test]
    fn brute_force_corners_and_quadratic() {
        let p = identity_chain(
            2,
            vec![0.3, -0.7],
            2.0,
            ControlBox::uniform(2, -1.0, 1.0).unwrap(),
        )
        .unwrap();
        let corners = brute_force_global(&p, 2, Execution::Sequential).unwrap();
        assert_eq!(corners.evaluated, 4);
        assert_eq!(corners.u_best, vec![1.0, -1.0]);

        let fine = brute_force_global(&p, 101, Execution::Parallel).unwrap();
        let cell = 2.0 / 100.0;
        assert!((fine.u_best[0] - 0.3).abs() <= cell);
        assert!((fine.u_best[1] + 0.7).abs() <= cell);
        assert!(brute_force_global(&p, 1, Execution::Sequential).is_err());
    }
}
