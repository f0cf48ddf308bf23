//! Built-in example systems and their supporting linear algebra: a PID
//! regulator bench with a Francis-equation solver and gain extraction from
//! matrix exponentials, two textbook two-state systems, and a planar spiral
//! family whose members are robustly output stable yet have unbounded
//! output under the constant input 5.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::compfn::{ComparisonFunction, KlSurface};
use crate::sysmodel::{
    euclidean_norm, simulate, ControlSystem, InputSignal, SimError, SimOptions, Trajectory,
};

#[derive(Debug, Error)]
pub enum SystemsError {
    #[error("unknown system id {0:?}")]
    UnknownId(String),
    #[error("system {0:?} requires a constructed counterexample parameter set")]
    NeedsParams(String),
    #[error("matrix dimensions are inconsistent: {0}")]
    Dimensions(String),
    #[error("matrix A is not Hurwitz (eigenvalue with real part {0} >= 0)")]
    NotHurwitz(f64),
    #[error("gain horizon too short: |e^(tA)| envelope has not started decaying at t = {0}")]
    HorizonTooShort(f64),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("gain construction failed: {0}")]
    Gain(#[from] crate::compfn::CompFnError),
    #[error("trajectory loop did not return to the crossing line within {0}")]
    NoReturn(f64),
    #[error("loop return time {0} exceeds the 18*pi bound")]
    LoopTooSlow(f64),
    #[error("seed x = {0} is too small: first downward crossing has x = {1}, need x < -5")]
    SeedTooSmall(f64, f64),
    #[error("annulus {k}: loop min radius {min} does not clear previous outer radius {prev}")]
    AnnulusOverlap { k: usize, min: f64, prev: f64 },
    #[error("crossing measurement requires a 2-state trajectory, got n = {0}")]
    NotPlanar(usize),
}

// --- scalar profiles ---------------------------------------------------------

/// Saturation: -1 below -1, identity on [-1, 1], +1 above 1.
pub fn saturation(s: f64) -> f64 {
    s.clamp(-1.0, 1.0)
}

/// Quintic smoothstep rising 0 -> 1 over [-2, 0]; 1 for s >= 0, 0 for
/// s <= -2, strictly inside (0, 1) between.
pub fn smooth_transition(s: f64) -> f64 {
    if s >= 0.0 {
        1.0
    } else if s <= -2.0 {
        0.0
    } else {
        let w = (s + 2.0) / 2.0;
        ((6.0 * w - 15.0) * w + 10.0) * w * w * w
    }
}

/// The angular-speed switch of the spiral family:
/// `sigma(x, y) = s0 + (1 - s0) (1/pi + |y|) / max(1, |x|)` with
/// `s0 = smooth_transition(|y| - 4)`. Equal to 1 wherever `|y| >= 4`.
pub fn spiral_switch(x: f64, y: f64) -> f64 {
    let s0 = smooth_transition(y.abs() - 4.0);
    s0 + (1.0 - s0) * (1.0 / PI + y.abs()) / x.abs().max(1.0)
}

// --- textbook systems --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SystemId {
    Pid,
    Sys11,
    Sys12,
    Sys29,
    Sys31,
    Sys32,
    Sys33,
}

impl std::str::FromStr for SystemId {
    type Err = SystemsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pid" => Self::Pid,
            "sys11" => Self::Sys11,
            "sys12" => Self::Sys12,
            "sys29" => Self::Sys29,
            "sys31" => Self::Sys31,
            "sys32" => Self::Sys32,
            "sys33" => Self::Sys33,
            other => return Err(SystemsError::UnknownId(other.into())),
        })
    }
}

impl SystemId {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pid => "pid",
            Self::Sys11 => "sys11",
            Self::Sys12 => "sys12",
            Self::Sys29 => "sys29",
            Self::Sys31 => "sys31",
            Self::Sys32 => "sys32",
            Self::Sys33 => "sys33",
        }
    }
}

fn spiral_rhs(x: f64, y: f64, drive: f64, dx: &mut [f64]) {
    let rho = saturation(drive);
    let sw = spiral_switch(x, y);
    dx[0] = rho * x - y * sw;
    dx[1] = rho * y + x * sw;
}

/// Build one of the parameter-free example systems.
///
/// * `sys11` — stable linear rotation `x1' = -x1 + x2 + u`,
///   `x2' = -x1 - x2 + u`, output `x2`: IOS but not output-Lagrange.
/// * `sys12` — `x1' = 0`, `x2' = -(2 x2 + u) / (1 + x1^2)`, output `x2`:
///   output-Lagrange, but the decay rate depends on `x1(0)`.
/// * `sys29` — the planar spiral with input-controlled radial drive
///   `rho(|u| - 1 - |y|)` and switch-controlled rotation.
/// * `sys31` — `sys29` with the input pinned to 5 (input argument unused).
///
/// `sys32`/`sys33` live on [`CounterexampleParams`], which carries the
/// annulus-dependent amplitude profile they need.
pub fn build_textbook_system(id: SystemId) -> Result<ControlSystem, SystemsError> {
    let sys = match id {
        SystemId::Sys11 => ControlSystem::new(
            "sys11",
            2,
            1,
            1,
            Arc::new(|x: &[f64], u: &[f64], dx: &mut [f64]| {
                dx[0] = -x[0] + x[1] + u[0];
                dx[1] = -x[0] - x[1] + u[0];
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )?,
        SystemId::Sys12 => ControlSystem::new(
            "sys12",
            2,
            1,
            1,
            Arc::new(|x: &[f64], u: &[f64], dx: &mut [f64]| {
                dx[0] = 0.0;
                dx[1] = -(2.0 * x[1] + u[0]) / (1.0 + x[0] * x[0]);
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )?,
        SystemId::Sys29 => ControlSystem::new(
            "sys29",
            2,
            1,
            1,
            Arc::new(|x: &[f64], u: &[f64], dx: &mut [f64]| {
                spiral_rhs(x[0], x[1], u[0].abs() - 1.0 - x[1].abs(), dx);
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )?,
        SystemId::Sys31 => ControlSystem::new(
            "sys31",
            2,
            1,
            1,
            Arc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| {
                spiral_rhs(x[0], x[1], 4.0 - x[1].abs(), dx);
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )?,
        SystemId::Pid => build_pid_example().0,
        other => return Err(SystemsError::NeedsParams(other.name().into())),
    };
    Ok(sys)
}

// --- the PID regulator bench -------------------------------------------------

/// Data of a linear regulation problem
/// `z' = A z + P w, w' = S w, y = C z + Q w` together with the solved
/// decoupling matrix when available.
#[derive(Clone, Debug)]
pub struct LinearRegulatorProblem {
    pub a: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub pi: Option<DMatrix<f64>>,
}

impl LinearRegulatorProblem {
    pub fn new(
        a: DMatrix<f64>,
        p: DMatrix<f64>,
        s: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
    ) -> Result<Self, SystemsError> {
        let nz = a.nrows();
        let nw = s.nrows();
        if a.ncols() != nz || s.ncols() != nw {
            return Err(SystemsError::Dimensions("A and S must be square".into()));
        }
        if p.shape() != (nz, nw) {
            return Err(SystemsError::Dimensions(format!(
                "P must be {nz}x{nw}, got {:?}",
                p.shape()
            )));
        }
        if c.ncols() != nz || q.shape() != (c.nrows(), nw) {
            return Err(SystemsError::Dimensions("C / Q shapes inconsistent".into()));
        }
        Ok(Self { a, p, s, c, q, pi: None })
    }

    pub fn plant_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn exo_dim(&self) -> usize {
        self.s.nrows()
    }

    /// The decoupled variable `z - Pi w` for a stacked state `(z, w)`.
    pub fn hat_output(&self, pi: &DMatrix<f64>, state: &[f64]) -> Vec<f64> {
        let nz = self.plant_dim();
        let nw = self.exo_dim();
        let z = DVector::from_column_slice(&state[..nz]);
        let w = DVector::from_column_slice(&state[nz..nz + nw]);
        let hat = z - pi * w;
        hat.iter().copied().collect()
    }
}

/// Outcome of the Francis-equation solve.
#[derive(Clone, Debug)]
pub enum FrancisOutcome {
    /// Pi satisfies both `Pi S = A Pi + P` and `C Pi + Q = 0` to 1e-10.
    Solved { pi: DMatrix<f64>, sylvester_residual: f64, regulation_residual: f64 },
    /// The Sylvester operator is inconsistent with P: no Pi exists.
    NoSolution { residual: f64 },
    /// The Sylvester part is solvable but `C Pi + Q != 0`.
    RegulationConditionFails { pi: DMatrix<f64>, regulation_residual: f64 },
}

/// Solve `Pi S = A Pi + P` as a dense vectorized linear system and check
/// the regulation condition `C Pi + Q = 0`.
pub fn solve_francis(prob: &LinearRegulatorProblem) -> Result<FrancisOutcome, SystemsError> {
    let nz = prob.plant_dim();
    let nw = prob.exo_dim();
    // Column-stacked unknowns: vec(Pi S - A Pi) = (S^T (x) I - I (x) A) vec(Pi).
    let eye_z = DMatrix::<f64>::identity(nz, nz);
    let eye_w = DMatrix::<f64>::identity(nw, nw);
    let op = prob.s.transpose().kronecker(&eye_z) - eye_w.kronecker(&prob.a);
    let rhs = DVector::from_column_slice(prob.p.as_slice());

    let svd = op.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = (smax * 1e-13).max(f64::MIN_POSITIVE);
    let sol = svd
        .solve(&rhs, eps)
        .map_err(|e| SystemsError::Dimensions(e.to_string()))?;
    let residual = (&op * &sol - &rhs).norm();
    let scale = rhs.norm().max(1.0);
    if residual > 1e-8 * scale {
        return Ok(FrancisOutcome::NoSolution { residual });
    }
    let pi = DMatrix::from_column_slice(nz, nw, sol.as_slice());
    let sylvester_residual = (&pi * &prob.s - &prob.a * &pi - &prob.p).norm();
    let regulation_residual = (&prob.c * &pi + &prob.q).norm();
    if regulation_residual > 1e-10 {
        return Ok(FrancisOutcome::RegulationConditionFails { pi, regulation_residual });
    }
    Ok(FrancisOutcome::Solved { pi, sylvester_residual, regulation_residual })
}

/// The position-stabilization bench: a double integrator `y'' - y = u + w`
/// under PID feedback `u = -q - 2y - 2v` with constant disturbances
/// generated by `w' = 0`. The closed system is
/// `q' = y, y' = v, v' = -q - y - 2v + w, w' = 0` with output `y`; the
/// declared input is unused (the model is closed).
pub fn build_pid_example() -> (ControlSystem, LinearRegulatorProblem) {
    let sys = ControlSystem::new(
        "pid",
        4,
        1,
        1,
        Arc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| {
            dx[0] = x[1];
            dx[1] = x[2];
            dx[2] = -x[0] - x[1] - 2.0 * x[2] + x[3];
            dx[3] = 0.0;
        }),
        Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
    )
    .expect("pid bench registers");
    let prob = LinearRegulatorProblem::new(
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -1.0, -1.0, -2.0]),
        DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]),
        DMatrix::from_row_slice(1, 1, &[0.0]),
        DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]),
        DMatrix::from_row_slice(1, 1, &[0.0]),
    )
    .expect("pid regulator data is consistent");
    (sys, prob)
}

// --- linear gain extraction ---------------------------------------------------

/// Spectral norm by singular-value (power) iteration with a deterministic
/// start vector.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let cols = m.ncols();
    if cols == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(cols, |i, _| 1.0 + 1e-3 * i as f64);
    v /= v.norm();
    let mut sigma = 0.0f64;
    for _ in 0..500 {
        let w = m * &v;
        let s = w.norm();
        if s == 0.0 {
            return 0.0;
        }
        let z = m.transpose() * w;
        let zn = z.norm();
        if zn == 0.0 {
            return s;
        }
        v = z / zn;
        if (s - sigma).abs() <= 1e-13 * s {
            return s;
        }
        sigma = s;
    }
    sigma
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    a.complex_eigenvalues().iter().all(|ev| ev.re < 0.0)
}

/// Extract the regulator gain triple from a Hurwitz `A` and output row `C`:
/// `chi(r) = r / |C|`, the decay surface `beta(r, t) = r |e^(tA)| / |C|`
/// (stored as its monotone upper envelope on the sample grid), and
/// `sigma(r) = r sup_t |e^(tA)|`.
pub fn linear_gain_functions(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    horizon: f64,
    resolution: f64,
) -> Result<(ComparisonFunction, KlSurface, ComparisonFunction), SystemsError> {
    if a.nrows() != a.ncols() || c.ncols() != a.nrows() {
        return Err(SystemsError::Dimensions("need square A and C with matching columns".into()));
    }
    if let Some(ev) = a.complex_eigenvalues().iter().find(|ev| ev.re >= 0.0) {
        return Err(SystemsError::NotHurwitz(ev.re));
    }
    let c_norm = spectral_norm(c);
    if !(c_norm > 0.0) {
        return Err(SystemsError::Dimensions("C must be nonzero".into()));
    }
    let steps = (horizon / resolution).round().max(1.0) as usize;
    let e_step = (a * resolution).exp();
    let mut power = DMatrix::<f64>::identity(a.nrows(), a.ncols());
    let mut t_grid = Vec::with_capacity(steps + 1);
    let mut norms = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        t_grid.push(j as f64 * resolution);
        norms.push(spectral_norm(&power));
        if j < steps {
            power = &power * &e_step;
        }
    }
    // Envelope used downstream: the grid surface monotonizes to
    // sup_{tau >= t} |e^(tau A)|, so the decay must have set in before the
    // right edge for the geometric tail to remain an upper bound.
    let tail_env = norms[steps];
    let prev_env = norms[steps - 1].max(tail_env);
    if !(tail_env < prev_env) {
        return Err(SystemsError::HorizonTooShort(horizon));
    }
    let sup = norms.iter().copied().fold(0.0, f64::max);
    let beta = KlSurface::from_grid(
        vec![0.0, 1.0],
        t_grid,
        vec![vec![0.0; steps + 1], norms.iter().map(|m| m / c_norm).collect()],
        None,
    )?;
    let chi = ComparisonFunction::linear(1.0 / c_norm)?;
    let sigma = ComparisonFunction::linear(sup)?;
    Ok((chi, beta, sigma))
}

// --- spiral counterexample construction ---------------------------------------

pub const CROSSING_LINE_Y: f64 = 4.0;

/// One constructed annulus: the loop of the frozen-input spiral seeded at
/// `seed` stays inside `[inner_radius, outer_radius]` for its whole first
/// return, which takes `loop_time`.
#[derive(Clone, Debug)]
pub struct Annulus {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub seed: [f64; 2],
    pub loop_time: f64,
}

/// A radial profile interpolating between anchor levels with the quintic
/// smoothstep; constant wherever adjacent anchors share a level.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    anchors: Vec<(f64, f64)>,
}

impl RadialProfile {
    fn new(anchors: Vec<(f64, f64)>) -> Self {
        debug_assert!(anchors.windows(2).all(|w| w[1].0 > w[0].0));
        Self { anchors }
    }

    pub fn evaluate(&self, radius: f64) -> f64 {
        let a = &self.anchors;
        if radius <= a[0].0 {
            return a[0].1;
        }
        if radius >= a[a.len() - 1].0 {
            return a[a.len() - 1].1;
        }
        let i = a.partition_point(|(r, _)| *r <= radius);
        let (r0, v0) = a[i - 1];
        let (r1, v1) = a[i];
        if v0 == v1 {
            return v0;
        }
        let w = ((radius - r0) / (r1 - r0)).clamp(0.0, 1.0);
        let s = ((6.0 * w - 15.0) * w + 10.0) * w * w * w;
        v0 + (v1 - v0) * s
    }
}

/// Parameters of the bounded-state spiral variants: the annuli where the
/// input amplitude passes through at full strength, the radial amplitude
/// profile `phi`, and the named regions used in the loop analysis.
#[derive(Clone, Debug)]
pub struct CounterexampleParams {
    annuli: Vec<Annulus>,
    phi: Arc<RadialProfile>,
}

impl CounterexampleParams {
    pub fn annuli(&self) -> &[Annulus] {
        &self.annuli
    }

    pub fn phi(&self, x: f64, y: f64) -> f64 {
        self.phi.evaluate((x * x + y * y).sqrt())
    }

    /// Midpoint radius between annulus `k` and `k + 1`; the sphere of this
    /// radius is forward invariant for the amplitude-limited system.
    pub fn gap_midpoint_radius(&self, k: usize) -> Option<f64> {
        let a = self.annuli.get(k)?;
        let b = self.annuli.get(k + 1)?;
        Some(0.5 * (a.outer_radius + b.inner_radius))
    }

    pub fn on_line_c(&self, x: f64, y: f64, tol: f64) -> bool {
        x > 0.0 && (y - CROSSING_LINE_Y).abs() <= tol
    }

    pub fn in_d0(&self, _x: f64, y: f64) -> bool {
        y > CROSSING_LINE_Y
    }

    pub fn in_d1(&self, x: f64, y: f64) -> bool {
        x < -5.0 && y > 2.0 && y < 4.0
    }

    pub fn in_d2(&self, x: f64, y: f64) -> bool {
        x < -5.0 && y > 0.0 && y < 2.0
    }

    pub fn in_d3(&self, x: f64, y: f64) -> bool {
        x < -5.0 && y > -4.0 && y < 0.0
    }

    /// The amplitude-limited system: radial drive
    /// `rho(phi(x, y) |u| - 1 - |y|)`.
    pub fn system_with_input(&self) -> ControlSystem {
        let phi = Arc::clone(&self.phi);
        ControlSystem::new(
            "sys32",
            2,
            1,
            1,
            Arc::new(move |x: &[f64], u: &[f64], dx: &mut [f64]| {
                let amp = phi.evaluate(euclidean_norm(&x[..2]));
                spiral_rhs(x[0], x[1], amp * u[0].abs() - 1.0 - x[1].abs(), dx);
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )
        .expect("sys32 registers")
    }

    /// The amplitude-limited system with the input pinned to 5.
    pub fn system_frozen_input(&self) -> ControlSystem {
        let phi = Arc::clone(&self.phi);
        ControlSystem::new(
            "sys33",
            2,
            1,
            1,
            Arc::new(move |x: &[f64], _u: &[f64], dx: &mut [f64]| {
                let amp = phi.evaluate(euclidean_norm(&x[..2]));
                spiral_rhs(x[0], x[1], amp * 5.0 - 1.0 - x[1].abs(), dx);
            }),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[1]),
        )
        .expect("sys33 registers")
    }
}

/// A detected crossing of the line `{y = 4, x > 0}`.
#[derive(Clone, Debug)]
pub struct LineCrossing {
    pub time: f64,
    pub point: [f64; 2],
    pub radius: f64,
}

/// Crossings of `{y = 4, x > 0}` located by sign change of `y - 4` with
/// `x > 0` at both bracketing grid points and linear interpolation between.
pub fn measure_line_crossings(traj: &Trajectory) -> Result<Vec<LineCrossing>, SystemsError> {
    let n = traj.state(0).len();
    if n != 2 {
        return Err(SystemsError::NotPlanar(n));
    }
    let mut out = Vec::new();
    for k in 0..traj.len().saturating_sub(1) {
        let (x0, y0) = (traj.state(k)[0], traj.state(k)[1]);
        let (x1, y1) = (traj.state(k + 1)[0], traj.state(k + 1)[1]);
        if x0 > 0.0 && x1 > 0.0 && (y0 - CROSSING_LINE_Y) * (y1 - CROSSING_LINE_Y) < 0.0 {
            let w = (CROSSING_LINE_Y - y0) / (y1 - y0);
            let t = traj.times()[k] + w * (traj.times()[k + 1] - traj.times()[k]);
            let x = x0 + w * (x1 - x0);
            out.push(LineCrossing {
                time: t,
                point: [x, CROSSING_LINE_Y],
                radius: (x * x + CROSSING_LINE_Y * CROSSING_LINE_Y).sqrt(),
            });
        }
    }
    Ok(out)
}

/// Options for the annulus construction.
#[derive(Clone, Copy, Debug)]
pub struct CounterexampleOptions {
    pub step: f64,
    /// Radii in the construction reach ~1e17 for three annuli, so the loop
    /// simulations need a raised blow-up threshold.
    pub blowup_threshold: f64,
}

impl Default for CounterexampleOptions {
    fn default() -> Self {
        Self { step: 1e-4, blowup_threshold: 1e30 }
    }
}

struct LoopMeasurement {
    annulus: Annulus,
    downward_x: f64,
}

fn measure_loop(
    sys31: &ControlSystem,
    seed_x: f64,
    opts: &CounterexampleOptions,
) -> Result<LoopMeasurement, SystemsError> {
    let horizon = 18.0 * PI * 1.25;
    let seed = [seed_x, CROSSING_LINE_Y];
    let traj = simulate(
        sys31,
        &seed,
        &InputSignal::zero(1),
        horizon,
        opts.step,
        SimOptions { blowup_threshold: opts.blowup_threshold },
    )?;
    let crossings = measure_line_crossings(&traj)?;
    let first = crossings.first().ok_or(SystemsError::NoReturn(horizon))?;
    if first.time > 18.0 * PI * (1.0 + 1e-3) {
        return Err(SystemsError::LoopTooSlow(first.time));
    }
    // First downward crossing of the full line y = 4 (any x) locates the
    // point whose x-coordinate must already be left of -5.
    let mut downward_x = f64::NAN;
    for k in 0..traj.len() - 1 {
        let (y0, y1) = (traj.state(k)[1], traj.state(k + 1)[1]);
        if y0 > CROSSING_LINE_Y && y1 <= CROSSING_LINE_Y {
            let w = (CROSSING_LINE_Y - y0) / (y1 - y0);
            downward_x = traj.state(k)[0] + w * (traj.state(k + 1)[0] - traj.state(k)[0]);
            break;
        }
    }
    if !(downward_x < -5.0) {
        return Err(SystemsError::SeedTooSmall(seed_x, downward_x));
    }
    let mut min_r = f64::INFINITY;
    let mut max_r = 0.0f64;
    for k in 0..traj.len() {
        if traj.times()[k] > first.time {
            break;
        }
        let r = traj.state_norm(k);
        min_r = min_r.min(r);
        max_r = max_r.max(r);
    }
    max_r = max_r.max(first.radius);
    Ok(LoopMeasurement {
        annulus: Annulus {
            inner_radius: min_r,
            outer_radius: max_r,
            seed,
            loop_time: first.time,
        },
        downward_x,
    })
}

/// Construct `count` nested annuli for the bounded-state spiral variant by
/// seeding loops of the frozen-input spiral, recording each loop's radial
/// extent, and spacing successive seeds so the annuli stay disjoint. The
/// amplitude profile `phi` is 1 on every annulus, 0 on the gap-midpoint
/// spheres and inside half the first inner radius.
pub fn construct_counterexample_ubibs(
    seed_x: f64,
    count: usize,
    opts: &CounterexampleOptions,
) -> Result<(CounterexampleParams, ControlSystem), SystemsError> {
    assert!(count >= 1, "need at least one annulus");
    let sys31 = build_textbook_system(SystemId::Sys31)?;
    let mut annuli: Vec<Annulus> = Vec::with_capacity(count);
    let mut candidate_x = seed_x;
    while annuli.len() < count {
        let mut attempt = candidate_x;
        let mut placed = false;
        for _ in 0..4 {
            let m = measure_loop(&sys31, attempt, opts)?;
            match annuli.last() {
                Some(prev) if m.annulus.inner_radius <= prev.outer_radius => {
                    attempt *= 1.5;
                }
                _ => {
                    let _ = m.downward_x;
                    // Next seed must out-climb this loop's outer radius even
                    // after the initial dip above the line, which contracts
                    // by at most e^{-pi}.
                    candidate_x = m.annulus.outer_radius * PI.exp() * 1.1;
                    annuli.push(m.annulus);
                    placed = true;
                    break;
                }
            }
        }
        if !placed {
            let prev = annuli.last().expect("retry implies a previous annulus");
            return Err(SystemsError::AnnulusOverlap {
                k: annuli.len() + 1,
                min: 0.0,
                prev: prev.outer_radius,
            });
        }
    }

    let mut anchors = vec![(0.0, 0.0), (annuli[0].inner_radius / 2.0, 0.0)];
    for k in 0..annuli.len() {
        anchors.push((annuli[k].inner_radius, 1.0));
        anchors.push((annuli[k].outer_radius, 1.0));
        if k + 1 < annuli.len() {
            let mid = 0.5 * (annuli[k].outer_radius + annuli[k + 1].inner_radius);
            anchors.push((mid, 0.0));
        }
    }
    let last_outer = annuli.last().expect("count >= 1").outer_radius;
    anchors.push((2.0 * last_outer, 0.0));
    let params = CounterexampleParams {
        annuli,
        phi: Arc::new(RadialProfile::new(anchors)),
    };
    let sys32 = params.system_with_input();
    Ok((params, sys32))
}
