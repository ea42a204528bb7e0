//! Single-reach Saint-Venant model on a staggered grid.
//!
//! Water levels `H` live at cell centres and discharges `Q` at cell faces.
//! Face 0 carries the prescribed inflow and face `n` the controlled release;
//! the interior faces and all levels are unknowns. One time step solves
//!
//! ```text
//! continuity (cell i):  w·dx·(H'ᵢ − Hᵢ)/dt + Q'ᵢ₊₁ − Q'ᵢ = 0
//! momentum   (face k):  Q'ₖ − Qₖ + dt·[(Fₖ − Fₖ₋₁)/dx + g·A'ₖ·(H'ₖ − H'ₖ₋₁)/dx + g·Q'ₖ·Qₖ/(Aₖ·Rₖ·C²)] = 0
//! ```
//!
//! with `Fₖ = Qₖ²/Aₖ` upwinded at the old level (flow is assumed positive),
//! the level-gradient term and continuity fully implicit, and friction
//! linearised in `Q'` with area and hydraulic radius frozen at the old level.
//! Unknowns of one step are interleaved `[H₀, Q₁, H₁, …, Qₙ₋₁, Hₙ₋₁]`, which
//! makes the per-step Jacobian tridiagonal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{banded_lu_factor, norm_inf, BandedMatrix, DenseMatrix, LinalgError};
use crate::problem::{
    ControlBox, ProblemError, Result as ProblemResult, RmpcProblem, StateJacobian,
    TrackingObjective,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HydraulicsError {
    #[error("dry bed at node {node}: level {level} is not above bottom {bottom}")]
    DryBed {
        node: usize,
        level: f64,
        bottom: f64,
    },
    #[error("non-positive discharge {discharge} at face {face}")]
    ReverseFlow { face: usize, discharge: f64 },
    #[error("Newton did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular step Jacobian: pivot {pivot:.3e}")]
    SingularJacobian { pivot: f64 },
    #[error("configuration error: {0}")]
    Configuration(String),
}

impl From<LinalgError> for HydraulicsError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::Singular { pivot, .. } => HydraulicsError::SingularJacobian { pivot },
            other => HydraulicsError::Configuration(other.to_string()),
        }
    }
}

impl From<HydraulicsError> for ProblemError {
    fn from(e: HydraulicsError) -> Self {
        match e {
            HydraulicsError::SingularJacobian { pivot } => ProblemError::SingularJacobian {
                pivot,
                tolerance: f64::NAN,
            },
            HydraulicsError::NoConvergence {
                iterations,
                residual,
            } => ProblemError::NoConvergence {
                iterations,
                residual,
            },
            HydraulicsError::Configuration(msg) => ProblemError::Configuration(msg),
            other => ProblemError::Evaluation(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HydraulicsError>;

const STEP_TOL: f64 = 1e-10;
const STEP_MAX_ITER: usize = 50;

/// Channel geometry, friction and time discretisation. Lengths in m, time in s.
/// Missing fields deserialise to the [`ChannelModel::paper`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelModel {
    pub n_nodes: usize,
    pub width: f64,
    pub bottom_levels: Vec<f64>,
    /// Chézy coefficient per node, m^0.5/s. Infinite values switch friction off.
    pub chezy: Vec<f64>,
    pub length: f64,
    pub dt: f64,
    pub horizon: usize,
    pub gravity: f64,
    pub target_level: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::paper()
    }
}

impl ChannelModel {
    /// Ten nodes over 10 km, 50 m wide rectangular section, bottom falling
    /// linearly from −4.90 m to −5.10 m, Chézy 40, 72 steps of 600 s.
    pub fn paper() -> Self {
        let n = 10;
        let bottom_levels = (0..n)
            .map(|i| -4.90 - 0.20 * i as f64 / (n - 1) as f64)
            .collect();
        Self {
            n_nodes: n,
            width: 50.0,
            bottom_levels,
            chezy: vec![40.0; n],
            length: 10_000.0,
            dt: 600.0,
            horizon: 72,
            gravity: 9.81,
            target_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        let bad = |msg: String| Err(HydraulicsError::Configuration(msg));
        if n < 2 {
            return bad(format!("need at least 2 nodes, got {n}"));
        }
        if self.bottom_levels.len() != n || self.chezy.len() != n {
            return bad(format!(
                "bottom_levels ({}) and chezy ({}) must have one value per node ({n})",
                self.bottom_levels.len(),
                self.chezy.len()
            ));
        }
        for (name, v) in [
            ("width", self.width),
            ("length", self.length),
            ("dt", self.dt),
            ("gravity", self.gravity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.chezy.iter().any(|c| !(*c > 0.0)) {
            return bad("chezy coefficients must be positive".into());
        }
        if self.bottom_levels.iter().any(|b| !b.is_finite()) || !self.target_level.is_finite() {
            return bad("levels must be finite".into());
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_nodes as f64
    }

    /// Unknowns per time step: all levels plus interior discharges.
    pub fn block_size(&self) -> usize {
        2 * self.n_nodes - 1
    }

    /// Surface area of one cell.
    pub fn cell_area(&self) -> f64 {
        self.width * self.dx()
    }

    /// Stored water volume, m³.
    pub fn storage(&self, state: &HydraulicState) -> f64 {
        state
            .h
            .iter()
            .zip(&self.bottom_levels)
            .map(|(h, b)| self.cell_area() * (h - b))
            .sum()
    }

    fn face_chezy(&self, k: usize) -> f64 {
        let n = self.n_nodes;
        if k == 0 {
            self.chezy[0]
        } else if k >= n {
            self.chezy[n - 1]
        } else {
            0.5 * (self.chezy[k - 1] + self.chezy[k])
        }
    }
}

/// Rectangular wetted area `width · (H − Hb)`.
pub fn cross_section_area(h: f64, hb: f64, width: f64) -> Result<f64> {
    if !(h > hb) {
        return Err(HydraulicsError::DryBed {
            node: 0,
            level: h,
            bottom: hb,
        });
    }
    Ok(width * (h - hb))
}

/// `A / P` with `P = width + 2 (H − Hb)`.
pub fn hydraulic_radius(h: f64, hb: f64, width: f64) -> Result<f64> {
    let a = cross_section_area(h, hb, width)?;
    Ok(a / (width + 2.0 * (h - hb)))
}

/// Levels at the `n` cells and discharges at all `n + 1` faces (boundaries included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydraulicState {
    pub h: Vec<f64>,
    pub q: Vec<f64>,
}

impl HydraulicState {
    pub fn inflow(&self) -> f64 {
        self.q[0]
    }

    pub fn outflow(&self) -> f64 {
        self.q[self.q.len() - 1]
    }

    /// Interleaved unknowns `[H₀, Q₁, H₁, …, Hₙ₋₁]`.
    pub fn to_unknowns(&self) -> Vec<f64> {
        let n = self.h.len();
        let mut v = Vec::with_capacity(2 * n - 1);
        for i in 0..n {
            if i > 0 {
                v.push(self.q[i]);
            }
            v.push(self.h[i]);
        }
        v
    }

    pub fn from_unknowns(v: &[f64], inflow: f64, outflow: f64) -> Self {
        let n = v.len().div_ceil(2);
        let h = (0..n).map(|i| v[2 * i]).collect();
        let mut q = Vec::with_capacity(n + 1);
        q.push(inflow);
        q.extend((1..n).map(|k| v[2 * k - 1]));
        q.push(outflow);
        Self { h, q }
    }
}

/// Prescribed upstream discharge for steps `1..=T`, m³/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InflowSeries {
    values: Vec<f64>,
}

impl InflowSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((j, v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(HydraulicsError::Configuration(format!(
                "inflow must be positive, got {v} at step {}",
                j + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(value: f64, horizon: usize) -> Result<Self> {
        Self::new(vec![value; horizon])
    }

    /// Trapezoidal pulse over step indices `1..=horizon`: `base` up to
    /// `ramp_up.0`, linear rise to `peak` at `ramp_up.1`, hold until
    /// `ramp_down.0`, linear fall back to `base` at `ramp_down.1`.
    pub fn pulse(
        base: f64,
        peak: f64,
        ramp_up: (usize, usize),
        ramp_down: (usize, usize),
        horizon: usize,
    ) -> Result<Self> {
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let values = (1..=horizon)
            .map(|j| {
                if j <= ramp_up.0 {
                    base
                } else if j < ramp_up.1 {
                    let t = (j - ramp_up.0) as f64 / (ramp_up.1 - ramp_up.0) as f64;
                    lerp(base, peak, t)
                } else if j <= ramp_down.0 {
                    peak
                } else if j < ramp_down.1 {
                    let t = (j - ramp_down.0) as f64 / (ramp_down.1 - ramp_down.0) as f64;
                    lerp(peak, base, t)
                } else {
                    base
                }
            })
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HydraulicTrajectory {
    /// States at `t₀ … t_T`; `states[0]` is the initial condition.
    pub states: Vec<HydraulicState>,
    pub inflow: Vec<f64>,
    pub control: Vec<f64>,
}

impl HydraulicTrajectory {
    /// `H` at the last node for `t₁ … t_T`.
    pub fn downstream_levels(&self) -> Vec<f64> {
        self.states
            .iter()
            .skip(1)
            .map(|s| *s.h.last().expect("non-empty state"))
            .collect()
    }
}

/// Old-level quantities shared by every equation of one step.
struct OldLevel {
    q: Vec<f64>,
    depth: Vec<f64>,
    /// Face areas, faces `0..n`.
    area: Vec<f64>,
    /// Face wetted perimeters, faces `0..n`.
    perimeter: Vec<f64>,
    /// `Fₖ = Qₖ² / Aₖ`, faces `0..n`.
    flux: Vec<f64>,
    /// Friction coefficient `g·dt·Qₖ·Pₖ / (Aₖ² Cₖ²)` multiplying `Q'ₖ`.
    friction: Vec<f64>,
}

fn depths(model: &ChannelModel, h: &[f64]) -> Result<Vec<f64>> {
    h.iter()
        .zip(&model.bottom_levels)
        .enumerate()
        .map(|(i, (&hi, &bi))| {
            if hi > bi {
                Ok(hi - bi)
            } else {
                Err(HydraulicsError::DryBed {
                    node: i,
                    level: hi,
                    bottom: bi,
                })
            }
        })
        .collect()
}

impl OldLevel {
    fn new(model: &ChannelModel, s: &HydraulicState) -> Result<Self> {
        let n = model.n_nodes;
        let w = model.width;
        let depth = depths(model, &s.h)?;
        let mut area = Vec::with_capacity(n);
        let mut perimeter = Vec::with_capacity(n);
        for k in 0..n {
            let d = if k == 0 {
                depth[0]
            } else {
                0.5 * (depth[k - 1] + depth[k])
            };
            area.push(w * d);
            perimeter.push(w + 2.0 * d);
        }
        let flux = (0..n).map(|k| s.q[k] * s.q[k] / area[k]).collect();
        let friction = (0..n)
            .map(|k| {
                let c = model.face_chezy(k);
                model.gravity * model.dt * s.q[k] * perimeter[k] / (area[k] * area[k] * c * c)
            })
            .collect();
        Ok(Self {
            q: s.q.clone(),
            depth,
            area,
            perimeter,
            flux,
            friction,
        })
    }
}

/// The discrete equations of one step from a known old state.
struct StepEquations<'a> {
    model: &'a ChannelModel,
    prev: &'a HydraulicState,
    old: OldLevel,
    inflow_next: f64,
    control_next: f64,
}

impl<'a> StepEquations<'a> {
    fn new(
        model: &'a ChannelModel,
        prev: &'a HydraulicState,
        inflow_next: f64,
        control_next: f64,
    ) -> Result<Self> {
        Ok(Self {
            model,
            prev,
            old: OldLevel::new(model, prev)?,
            inflow_next,
            control_next,
        })
    }

    fn residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let n = m.n_nodes;
        let (w, dx, dt, g) = (m.width, m.dx(), m.dt, m.gravity);
        let storage = w * dx / dt;
        let h = |i: usize| v[2 * i];
        let q = |k: usize| {
            if k == 0 {
                self.inflow_next
            } else if k == n {
                self.control_next
            } else {
                v[2 * k - 1]
            }
        };
        let new_depth = depths(m, &(0..n).map(h).collect::<Vec<_>>())?;
        let mut r = vec![0.0; 2 * n - 1];
        for i in 0..n {
            r[2 * i] = storage * (h(i) - self.prev.h[i]) + q(i + 1) - q(i);
        }
        let old = &self.old;
        for k in 1..n {
            let area_new = 0.5 * w * (new_depth[k - 1] + new_depth[k]);
            r[2 * k - 1] = q(k) - old.q[k]
                + dt * (old.flux[k] - old.flux[k - 1]) / dx
                + dt * g * area_new * (h(k) - h(k - 1)) / dx
                + old.friction[k] * q(k);
        }
        Ok(r)
    }

    /// Derivative with respect to the new unknowns; tridiagonal.
    fn jacobian_new(&self, v: &[f64]) -> BandedMatrix {
        let m = self.model;
        let n = m.n_nodes;
        let (w, dx, dt, g) = (m.width, m.dx(), m.dt, m.gravity);
        let size = 2 * n - 1;
        let mut j = BandedMatrix::zeros(size, 1, 1).expect("n >= 2");
        for i in 0..n {
            let row = 2 * i;
            j.set(row, row, w * dx / dt);
            if i + 1 < n {
                j.set(row, row + 1, 1.0);
            }
            if i > 0 {
                j.set(row, row - 1, -1.0);
            }
        }
        for k in 1..n {
            let row = 2 * k - 1;
            let (hl, hr) = (v[2 * k - 2], v[2 * k]);
            let area_new = 0.5 * w * ((hl - m.bottom_levels[k - 1]) + (hr - m.bottom_levels[k]));
            let dh = hr - hl;
            let c = dt * g / dx;
            j.set(row, row, 1.0 + self.old.friction[k]);
            j.set(row, row + 1, c * (0.5 * w * dh + area_new));
            j.set(row, row - 1, c * (0.5 * w * dh - area_new));
        }
        j
    }

    /// Nonzero derivatives with respect to the old unknowns as
    /// `(row, old_unknown_index, value)`.
    fn jacobian_old(&self, v: &[f64]) -> Vec<(usize, usize, f64)> {
        let m = self.model;
        let n = m.n_nodes;
        let (w, dx, dt, g) = (m.width, m.dx(), m.dt, m.gravity);
        let old = &self.old;
        let mut out = Vec::with_capacity(8 * n);
        for i in 0..n {
            out.push((2 * i, 2 * i, -w * dx / dt));
        }
        for k in 1..n {
            let row = 2 * k - 1;
            let q_new = v[row];
            let c = m.face_chezy(k);
            let (qk, ak, pk) = (old.q[k], old.area[k], old.perimeter[k]);
            // Qₖ appears in the time derivative, the flux Fₖ and the friction coefficient.
            let dfric_dq = g * dt * pk / (ak * ak * c * c);
            out.push((row, row, -1.0 + dt / dx * 2.0 * qk / ak + dfric_dq * q_new));
            // Qₖ₋₁ through Fₖ₋₁ (face 0 is boundary data).
            if k >= 2 {
                let (qm, am) = (old.q[k - 1], old.area[k - 1]);
                out.push((row, 2 * (k - 1) - 1, -dt / dx * 2.0 * qm / am));
            }
            // Face area of k: cells k−1 and k, w/2 each.
            let dflux_da = -qk * qk / (ak * ak);
            let dfric_da_dp =
                g * dt * qk * q_new / (c * c) * (ak - 2.0 * pk * 0.5 * w) / (ak * ak * ak);
            for cell in [k - 1, k] {
                let val = dt / dx * dflux_da * 0.5 * w + dfric_da_dp;
                out.push((row, 2 * cell, val));
            }
            // Face area of k−1 through −Fₖ₋₁.
            let qm = old.q[k - 1];
            let am = old.area[k - 1];
            let d = -dt / dx * (-qm * qm / (am * am));
            if k == 1 {
                out.push((row, 0, d * w));
            } else {
                for cell in [k - 2, k - 1] {
                    out.push((row, 2 * cell, d * 0.5 * w));
                }
            }
        }
        let _ = &old.depth;
        out
    }
}

fn solve_step(eq: &StepEquations<'_>, guess: Vec<f64>) -> Result<Vec<f64>> {
    let mut v = guess;
    let mut r = eq.residual(&v)?;
    let mut phi: f64 = r.iter().map(|x| x * x).sum();
    for _ in 0..STEP_MAX_ITER {
        if norm_inf(&r) <= STEP_TOL {
            return Ok(v);
        }
        let jac = eq.jacobian_new(&v);
        let fac = banded_lu_factor(&jac, jac.default_pivot_tol())?;
        let dv = fac.solve(&r)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a - alpha * b).collect();
            if let Ok(rt) = eq.residual(&trial) {
                let phi_t: f64 = rt.iter().map(|x| x * x).sum();
                if phi_t.is_finite() && phi_t <= (1.0 - 1e-4 * alpha) * phi {
                    v = trial;
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
    if norm_inf(&r) <= STEP_TOL {
        return Ok(v);
    }
    Err(HydraulicsError::NoConvergence {
        iterations: STEP_MAX_ITER,
        residual: norm_inf(&r),
    })
}

fn check_positive_flow(s: &HydraulicState) -> Result<()> {
    match s.q.iter().enumerate().find(|(_, q)| !(**q > 0.0)) {
        Some((face, &discharge)) => Err(HydraulicsError::ReverseFlow { face, discharge }),
        None => Ok(()),
    }
}

/// Advances one time step.
pub fn step(
    model: &ChannelModel,
    s_t: &HydraulicState,
    inflow_next: f64,
    control_next: f64,
) -> Result<HydraulicState> {
    check_positive_flow(s_t)?;
    let eq = StepEquations::new(model, s_t, inflow_next, control_next)?;
    let v = solve_step(&eq, s_t.to_unknowns())?;
    let next = HydraulicState::from_unknowns(&v, inflow_next, control_next);
    check_positive_flow(&next)?;
    Ok(next)
}

/// Runs the model over the horizon from `initial`.
pub fn simulate(
    model: &ChannelModel,
    initial: &HydraulicState,
    inflow: &InflowSeries,
    control: &[f64],
) -> Result<HydraulicTrajectory> {
    if control.len() != inflow.len() {
        return Err(HydraulicsError::Configuration(format!(
            "control length {} does not match inflow length {}",
            control.len(),
            inflow.len()
        )));
    }
    if initial.h.len() != model.n_nodes || initial.q.len() != model.n_nodes + 1 {
        return Err(HydraulicsError::Configuration(
            "initial state does not match the grid".into(),
        ));
    }
    let mut states = Vec::with_capacity(control.len() + 1);
    states.push(initial.clone());
    for (&qin, &qout) in inflow.values().iter().zip(control) {
        let next = step(model, states.last().expect("non-empty"), qin, qout)?;
        states.push(next);
    }
    Ok(HydraulicTrajectory {
        states,
        inflow: inflow.values().to_vec(),
        control: control.to_vec(),
    })
}

/// Discrete backwater profile carrying a uniform discharge `q0` with the
/// downstream level fixed: the fixed point of [`step`] under `inflow = control = q0`.
pub fn steady_state(model: &ChannelModel, q0: f64, downstream_h: f64) -> Result<HydraulicState> {
    model.validate()?;
    if !(q0 > 0.0) {
        return Err(HydraulicsError::Configuration(format!(
            "steady discharge must be positive, got {q0}"
        )));
    }
    let n = model.n_nodes;
    let unknowns = n - 1;
    let state_of = |hu: &[f64]| -> HydraulicState {
        let mut h = hu.to_vec();
        h.push(downstream_h);
        HydraulicState {
            h,
            q: vec![q0; n + 1],
        }
    };
    // Momentum rows of the step residual with old = new.
    let residual = |hu: &[f64]| -> Result<Vec<f64>> {
        let s = state_of(hu);
        let eq = StepEquations::new(model, &s, q0, q0)?;
        let r = eq.residual(&s.to_unknowns())?;
        Ok((1..n).map(|k| r[2 * k - 1]).collect())
    };
    let jacobian = |hu: &[f64]| -> Result<BandedMatrix> {
        let s = state_of(hu);
        let eq = StepEquations::new(model, &s, q0, q0)?;
        let v = s.to_unknowns();
        let jn = eq.jacobian_new(&v);
        let bw = 1.min(unknowns - 1);
        let mut j = BandedMatrix::zeros(unknowns, bw, bw)?;
        for k in 1..n {
            for cell in [k.wrapping_sub(2), k - 1, k] {
                if cell < unknowns && j.in_band(k - 1, cell) {
                    j.add(k - 1, cell, jn.get(2 * k - 1, 2 * cell));
                }
            }
        }
        for (row, col, val) in eq.jacobian_old(&v) {
            if row % 2 == 1 && col % 2 == 0 && col / 2 < unknowns {
                let (r, c) = (row.div_ceil(2) - 1, col / 2);
                if j.in_band(r, c) {
                    j.add(r, c, val);
                }
            }
        }
        Ok(j)
    };

    // Uniform-flow slope at the downstream depth seeds the profile.
    let d = downstream_h - model.bottom_levels[n - 1];
    if !(d > 0.0) {
        return Err(HydraulicsError::DryBed {
            node: n - 1,
            level: downstream_h,
            bottom: model.bottom_levels[n - 1],
        });
    }
    let a = model.width * d;
    let r_h = a / (model.width + 2.0 * d);
    let c = model.chezy[n - 1];
    let slope = q0 * q0 / (a * a * c * c * r_h);
    let mut hu: Vec<f64> = (0..unknowns)
        .map(|i| downstream_h + slope * model.dx() * (n - 1 - i) as f64)
        .collect();

    let mut r = residual(&hu)?;
    let mut phi: f64 = r.iter().map(|x| x * x).sum();
    let scale = model.dt * q0.max(1.0);
    for _ in 0..STEP_MAX_ITER {
        if norm_inf(&r) <= 1e-13 * scale {
            return Ok(state_of(&hu));
        }
        let jac = jacobian(&hu)?;
        let step = banded_lu_factor(&jac, jac.default_pivot_tol())?.solve(&r)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = hu.iter().zip(&step).map(|(a, b)| a - alpha * b).collect();
            if let Ok(rt) = residual(&trial) {
                let phi_t: f64 = rt.iter().map(|x| x * x).sum();
                if phi_t <= (1.0 - 1e-4 * alpha) * phi {
                    hu = trial;
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
    if norm_inf(&r) <= 1e-10 {
        return Ok(state_of(&hu));
    }
    Err(HydraulicsError::NoConvergence {
        iterations: STEP_MAX_ITER,
        residual: norm_inf(&r),
    })
}

/// Steady profile whose upstream level equals `upstream_h`, found by a secant
/// search on the downstream level.
pub fn steady_state_for_upstream(
    model: &ChannelModel,
    q0: f64,
    upstream_h: f64,
) -> Result<HydraulicState> {
    let upstream_of = |hd: f64| -> Result<f64> { Ok(steady_state(model, q0, hd)?.h[0]) };
    let mut x0 = upstream_h;
    let mut f0 = upstream_of(x0)? - upstream_h;
    let mut x1 = x0 - f0;
    for _ in 0..60 {
        let f1 = upstream_of(x1)? - upstream_h;
        if f1.abs() <= 1e-13 {
            break;
        }
        let denom = f1 - f0;
        if denom == 0.0 {
            break;
        }
        let x2 = x1 - f1 * (x1 - x0) / denom;
        x0 = x1;
        f0 = f1;
        x1 = x2;
    }
    let s = steady_state(model, q0, x1)?;
    if (s.h[0] - upstream_h).abs() > 1e-9 {
        return Err(HydraulicsError::NoConvergence {
            iterations: 60,
            residual: (s.h[0] - upstream_h).abs(),
        });
    }
    Ok(s)
}

/// `Σ_{j=1..T} |H_last(t_j) − target|^p`; the initial state is excluded.
pub fn tracking_objective(traj: &HydraulicTrajectory, target: f64, p: f64) -> f64 {
    assert!(p >= 2.0, "objective exponent must be at least 2");
    traj.downstream_levels()
        .iter()
        .map(|h| (h - target).abs().powf(p))
        .sum()
}

/// `storage(T) − storage(0)` against `dt · Σ (inflow − release)`, relative to
/// the gross volume moved through the boundaries.
pub fn mass_balance_error(model: &ChannelModel, traj: &HydraulicTrajectory) -> f64 {
    let first = traj.states.first().expect("non-empty");
    let last = traj.states.last().expect("non-empty");
    let change = model.storage(last) - model.storage(first);
    let net: f64 = traj
        .inflow
        .iter()
        .zip(&traj.control)
        .map(|(i, o)| model.dt * (i - o))
        .sum();
    let gross: f64 = traj
        .inflow
        .iter()
        .zip(&traj.control)
        .map(|(i, o)| model.dt * (i.abs() + o.abs()))
        .sum();
    let scale = gross.max(model.storage(first)).max(f64::MIN_POSITIVE);
    (change - net).abs() / scale
}

/// The stacked control problem: states of all steps as unknowns, the
/// downstream release per step as control, and `H` at the last node per step
/// as output.
#[derive(Debug, Clone)]
pub struct HydraulicProblem {
    model: ChannelModel,
    initial: HydraulicState,
    inflow: InflowSeries,
    bounds: ControlBox,
    objective: TrackingObjective,
}

/// Builds the reduced-space problem; `m = T·(2·n_nodes − 1)`, `n = T`.
pub fn assemble_rmpc(
    model: ChannelModel,
    initial: HydraulicState,
    inflow: InflowSeries,
    bounds: ControlBox,
    exponent: f64,
) -> ProblemResult<HydraulicProblem> {
    model.validate()?;
    let t = model.horizon;
    if t == 0 {
        return Err(ProblemError::Configuration(
            "horizon must be positive".into(),
        ));
    }
    if inflow.len() != t || bounds.dim() != t {
        return Err(ProblemError::Configuration(format!(
            "horizon {t} needs {t} inflow values and {t} bounds, got {} and {}",
            inflow.len(),
            bounds.dim()
        )));
    }
    if initial.h.len() != model.n_nodes || initial.q.len() != model.n_nodes + 1 {
        return Err(ProblemError::Configuration(
            "initial state does not match the grid".into(),
        ));
    }
    let objective = TrackingObjective::new(vec![model.target_level; t], exponent)?;
    Ok(HydraulicProblem {
        model,
        initial,
        inflow,
        bounds,
        objective,
    })
}

impl HydraulicProblem {
    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    pub fn initial(&self) -> &HydraulicState {
        &self.initial
    }

    pub fn inflow(&self) -> &InflowSeries {
        &self.inflow
    }

    pub fn simulate(&self, control: &[f64]) -> Result<HydraulicTrajectory> {
        simulate(&self.model, &self.initial, &self.inflow, control)
    }

    fn block(&self) -> usize {
        self.model.block_size()
    }

    fn output_index(&self, step: usize) -> usize {
        step * self.block() + 2 * (self.model.n_nodes - 1)
    }

    /// Old state for step `s` (0-based): the initial state or the previous block.
    fn old_state(&self, x: &[f64], u: &[f64], s: usize) -> HydraulicState {
        if s == 0 {
            self.initial.clone()
        } else {
            let b = self.block();
            HydraulicState::from_unknowns(
                &x[(s - 1) * b..s * b],
                self.inflow.values()[s - 1],
                u[s - 1],
            )
        }
    }

    /// Reassembles a trajectory from stacked states.
    pub fn trajectory_from_states(&self, x: &[f64], u: &[f64]) -> HydraulicTrajectory {
        let b = self.block();
        let mut states = vec![self.initial.clone()];
        for s in 0..self.model.horizon {
            states.push(HydraulicState::from_unknowns(
                &x[s * b..(s + 1) * b],
                self.inflow.values()[s],
                u[s],
            ));
        }
        HydraulicTrajectory {
            states,
            inflow: self.inflow.values().to_vec(),
            control: u.to_vec(),
        }
    }
}

impl RmpcProblem for HydraulicProblem {
    fn name(&self) -> &str {
        "hydraulic"
    }

    fn state_dim(&self) -> usize {
        self.model.horizon * self.block()
    }

    fn control_dim(&self) -> usize {
        self.model.horizon
    }

    fn bounds(&self) -> &ControlBox {
        &self.bounds
    }

    fn objective(&self) -> &TrackingObjective {
        &self.objective
    }

    fn residual(&self, x: &[f64], u: &[f64]) -> ProblemResult<Vec<f64>> {
        let b = self.block();
        let mut out = Vec::with_capacity(x.len());
        for s in 0..self.model.horizon {
            let old = self.old_state(x, u, s);
            let eq = StepEquations::new(&self.model, &old, self.inflow.values()[s], u[s])?;
            out.extend(eq.residual(&x[s * b..(s + 1) * b])?);
        }
        Ok(out)
    }

    fn state_jacobian(&self, x: &[f64], u: &[f64]) -> ProblemResult<StateJacobian> {
        let b = self.block();
        let m = self.state_dim();
        let lower = (b + 3).min(m - 1);
        let upper = 1.min(m - 1);
        let mut jac = BandedMatrix::zeros(m, lower, upper)?;
        for s in 0..self.model.horizon {
            let old = self.old_state(x, u, s);
            let eq = StepEquations::new(&self.model, &old, self.inflow.values()[s], u[s])?;
            let v = &x[s * b..(s + 1) * b];
            let jn = eq.jacobian_new(v);
            for r in 0..b {
                for c in r.saturating_sub(1)..(r + 2).min(b) {
                    let val = jn.get(r, c);
                    if val != 0.0 {
                        jac.set(s * b + r, s * b + c, val);
                    }
                }
            }
            if s > 0 {
                for (r, c, val) in eq.jacobian_old(v) {
                    jac.add(s * b + r, (s - 1) * b + c, val);
                }
            }
        }
        Ok(StateJacobian::Banded(jac))
    }

    fn control_jacobian(&self, _x: &[f64], _u: &[f64]) -> ProblemResult<DenseMatrix> {
        let t = self.model.horizon;
        let mut j = DenseMatrix::zeros(self.state_dim(), t);
        for s in 0..t {
            j[(self.output_index(s), s)] = 1.0;
        }
        Ok(j)
    }

    fn output(&self, x: &[f64]) -> Vec<f64> {
        (0..self.model.horizon)
            .map(|s| x[self.output_index(s)])
            .collect()
    }

    fn output_jacobian(&self, _x: &[f64]) -> DenseMatrix {
        let t = self.model.horizon;
        let mut j = DenseMatrix::zeros(t, self.state_dim());
        for s in 0..t {
            j[(s, self.output_index(s))] = 1.0;
        }
        j
    }

    fn initial_state(&self, u: &[f64]) -> ProblemResult<Vec<f64>> {
        let traj = self.simulate(u)?;
        Ok(traj
            .states
            .iter()
            .skip(1)
            .flat_map(HydraulicState::to_unknowns)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_initial() -> (ChannelModel, HydraulicState) {
        let m = ChannelModel::paper();
        let s = steady_state_for_upstream(&m, 100.0, 0.0).unwrap();
        (m, s)
    }

    #[test]
    fn area_and_radius() {
        assert_relative_eq!(
            cross_section_area(0.0, -4.90, 50.0).unwrap(),
            245.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(cross_section_area(-3.0, -4.0, 50.0).unwrap(), 50.0);
        assert!(matches!(
            cross_section_area(-4.0, -4.0, 50.0),
            Err(HydraulicsError::DryBed { .. })
        ));
        let r = hydraulic_radius(0.0, -4.90, 50.0).unwrap();
        assert_relative_eq!(r, 245.0 / 59.8, epsilon = 1e-12);
        assert!((r - 4.09699).abs() < 1e-5);
        assert!(hydraulic_radius(-4.9 + 1e-9, -4.9, 50.0).unwrap() < 1e-8);
        let wide = hydraulic_radius(1.0, -1.0, 1e9).unwrap();
        assert!((wide - 2.0).abs() < 1e-8);
    }

    #[test]
    fn paper_bottom_levels() {
        let m = ChannelModel::paper();
        assert_eq!(m.bottom_levels.len(), 10);
        assert_relative_eq!(m.bottom_levels[0], -4.90);
        assert_relative_eq!(m.bottom_levels[9], -5.10, epsilon = 1e-12);
        assert_eq!(m.dx(), 1000.0);
        assert_eq!(m.block_size(), 19);
    }

    #[test]
    fn steady_profile_resembles_table() {
        let (_, s) = paper_initial();
        assert!(s.h[0].abs() < 1e-9);
        for w in s.h.windows(2) {
            assert!(w[1] < w[0]);
        }
        // Rounded table values run from 0.000 to −0.222 m.
        assert!((s.h[9] + 0.222).abs() < 0.01, "downstream level {}", s.h[9]);
        assert!((s.h[1] + 0.025).abs() < 0.005, "second level {}", s.h[1]);
    }

    #[test]
    fn steady_state_is_fixed_point() {
        let (m, s) = paper_initial();
        let next = step(&m, &s, 100.0, 100.0).unwrap();
        for (a, b) in next.h.iter().zip(&s.h) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in next.q.iter().zip(&s.q) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn frictionless_flat_bed_is_still() {
        let mut m = ChannelModel::paper();
        m.chezy = vec![f64::INFINITY; 10];
        m.bottom_levels = vec![-5.0; 10];
        let s = HydraulicState {
            h: vec![0.0; 10],
            q: vec![100.0; 11],
        };
        let next = step(&m, &s, 100.0, 100.0).unwrap();
        for (a, b) in next.h.iter().zip(&s.h) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = steady_state(&m, 100.0, 0.0).unwrap();
        assert!(flat.h.iter().all(|h| h.abs() < 1e-12));
    }

    #[test]
    fn stronger_friction_means_more_drawdown() {
        let m = ChannelModel::paper();
        let mut smooth = m.clone();
        smooth.chezy = vec![80.0; 10];
        let base = steady_state(&m, 100.0, -0.2).unwrap();
        let less = steady_state(&smooth, 100.0, -0.2).unwrap();
        let drop_base = base.h[0] - base.h[9];
        let drop_smooth = less.h[0] - less.h[9];
        assert!(drop_smooth < drop_base);
        // friction slope ∝ 1/C², so roughly a quarter of the drop remains
        assert!((drop_smooth / drop_base - 0.25).abs() < 0.05);
    }

    #[test]
    fn single_step_mass_audit() {
        let (m, s) = paper_initial();
        let next = step(&m, &s, 200.0, 100.0).unwrap();
        let rise: f64 = next.h.iter().zip(&s.h).map(|(a, b)| a - b).sum::<f64>() / 10.0;
        let expected = 100.0 * m.dt / (m.length * m.width);
        assert_relative_eq!(rise, expected, max_relative = 1e-10);
    }

    #[test]
    fn empty_horizon_has_initial_only() {
        let (m, s) = paper_initial();
        let traj = simulate(&m, &s, &InflowSeries::new(vec![]).unwrap(), &[]).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.states[0], s);
    }

    #[test]
    fn constant_flow_keeps_levels() {
        let (m, s) = paper_initial();
        let inflow = InflowSeries::constant(100.0, 72).unwrap();
        let traj = simulate(&m, &s, &inflow, &[100.0; 72]).unwrap();
        let h10 = traj.downstream_levels();
        assert!(h10.iter().all(|h| (h - s.h[9]).abs() < 1e-9));
        assert!(mass_balance_error(&m, &traj) < 1e-8);
    }

    #[test]
    fn tracking_objective_arithmetic() {
        let (m, s) = paper_initial();
        let mut shifted = s.clone();
        shifted.h[9] = 0.1;
        let traj = HydraulicTrajectory {
            states: vec![s.clone(); 1]
                .into_iter()
                .chain(vec![shifted; 72])
                .collect(),
            inflow: vec![100.0; 72],
            control: vec![100.0; 72],
        };
        assert_relative_eq!(tracking_objective(&traj, 0.0, 2.0), 0.72, epsilon = 1e-12);
        assert_eq!(tracking_objective(&traj, 0.1, 2.0), 0.0);
        let _ = m;
    }

    #[test]
    fn pulse_shape() {
        let p = InflowSeries::pulse(100.0, 180.0, (12, 18), (30, 36), 72).unwrap();
        let v = p.values();
        assert_eq!(v.len(), 72);
        assert_eq!(v[11], 100.0); // step 12
        assert_eq!(v[17], 180.0); // step 18
        assert_eq!(v[29], 180.0); // step 30
        assert_eq!(v[35], 100.0); // step 36
        assert!(v[14] > 100.0 && v[14] < 180.0);
        assert!(InflowSeries::new(vec![1.0, 0.0]).is_err());
    }

    /// Central differences of the step residual against the analytic blocks.
    #[test]
    fn step_jacobians_match_differences() {
        let (m, s) = paper_initial();
        let mut old = step(&m, &s, 160.0, 120.0).unwrap();
        old.h[3] += 0.05;
        old.q[4] += 7.0;
        let eq = StepEquations::new(&m, &old, 150.0, 130.0).unwrap();
        let mut v = old.to_unknowns();
        v[6] -= 0.03;
        v[5] += 4.0;
        let jn = eq.jacobian_new(&v).to_dense();
        let b = v.len();
        for c in 0..b {
            let h = 1e-6 * (1.0 + v[c].abs());
            let mut vp = v.clone();
            vp[c] += h;
            let mut vm = v.clone();
            vm[c] -= h;
            let rp = eq.residual(&vp).unwrap();
            let rm = eq.residual(&vm).unwrap();
            for r in 0..b {
                let fd = (rp[r] - rm[r]) / (2.0 * h);
                assert!(
                    (fd - jn[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "new ({r},{c}): fd {fd} vs {}",
                    jn[(r, c)]
                );
            }
        }
        let mut jo = DenseMatrix::zeros(b, b);
        for (r, c, val) in eq.jacobian_old(&v) {
            jo[(r, c)] += val;
        }
        let old_v = old.to_unknowns();
        for c in 0..b {
            let h = 1e-6 * (1.0 + old_v[c].abs());
            let perturbed = |delta: f64| {
                let mut ov = old_v.clone();
                ov[c] += delta;
                let o = HydraulicState::from_unknowns(&ov, old.q[0], old.q[10]);
                let e = StepEquations::new(&m, &o, 150.0, 130.0).unwrap();
                e.residual(&v).unwrap()
            };
            let rp = perturbed(h);
            let rm = perturbed(-h);
            for r in 0..b {
                let fd = (rp[r] - rm[r]) / (2.0 * h);
                assert!(
                    (fd - jo[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "old ({r},{c}): fd {fd} vs {}",
                    jo[(r, c)]
                );
            }
        }
    }

    #[test]
    fn stacked_dimensions_and_selector() {
        let (m, s) = paper_initial();
        let t = m.horizon;
        let p = assemble_rmpc(
            m,
            s,
            InflowSeries::constant(100.0, t).unwrap(),
            ControlBox::uniform(t, 100.0, 200.0).unwrap(),
            2.0,
        )
        .unwrap();
        assert_eq!(p.control_dim(), 72);
        assert_eq!(p.state_dim(), 72 * 19);
        let gx = p.output_jacobian(&vec![0.0; p.state_dim()]);
        let mut seen = std::collections::HashSet::new();
        for i in 0..gx.rows() {
            let ones: Vec<usize> = (0..gx.cols()).filter(|&j| gx[(i, j)] != 0.0).collect();
            assert_eq!(ones.len(), 1);
            assert_eq!(gx[(i, ones[0])], 1.0);
            assert!(seen.insert(ones[0]));
        }
        let bad = assemble_rmpc(
            ChannelModel::paper(),
            paper_initial().1,
            InflowSeries::constant(100.0, 10).unwrap(),
            ControlBox::uniform(72, 100.0, 200.0).unwrap(),
            2.0,
        );
        assert!(matches!(bad, Err(ProblemError::Configuration(_))));
    }
}
