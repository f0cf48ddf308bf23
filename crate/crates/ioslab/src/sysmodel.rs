//! System definitions, piecewise-constant input signals, fixed-step
//! trajectory integration and output-feedback closed loops.
//!
//! Integration is classical fixed-step 4th order. Inputs are held constant
//! over each step cell; breakpoints are aligned to the grid by refining the
//! step when necessary and snapping otherwise. Reproducibility is favored
//! over adaptivity throughout: the same call always produces the same grid
//! and the same bytes.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compfn::ComparisonFunction;
use crate::jsonio::fmt_f64;

/// Default blow-up threshold on the state norm.
pub const DEFAULT_BLOWUP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("system registration failed: {0}")]
    Definition(String),
    #[error("invalid input signal: {0}")]
    Signal(String),
    #[error("invalid step or horizon: {0}")]
    Grid(String),
    #[error("non-finite state at t = {last_valid}: integration aborted")]
    NonFinite { last_valid: f64 },
    #[error("gain error: {0}")]
    Gain(#[from] crate::compfn::CompFnError),
}

pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type OutputFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A finite-dimensional control system `ẋ = f(x, u), y = h(x)` with
/// `f(0, 0) = 0` and `h(0) = 0` (checked at registration). The maps are
/// assumed locally Lipschitz; that is not checked.
#[derive(Clone)]
pub struct ControlSystem {
    name: String,
    n: usize,
    m: usize,
    p: usize,
    f: DynamicsFn,
    h: OutputFn,
}

impl std::fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .finish()
    }
}

pub fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        m: usize,
        p: usize,
        f: DynamicsFn,
        h: OutputFn,
    ) -> Result<Self, SimError> {
        if n == 0 || m == 0 || p == 0 {
            return Err(SimError::Definition("dimensions must be positive".into()));
        }
        let sys = Self { name: name.into(), n, m, p, f, h };
        let mut dx = vec![0.0; n];
        (sys.f)(&vec![0.0; n], &vec![0.0; m], &mut dx);
        if euclidean_norm(&dx) > 1e-12 {
            return Err(SimError::Definition(format!(
                "f(0, 0) = {dx:?} is not the origin"
            )));
        }
        let mut y = vec![0.0; p];
        (sys.h)(&vec![0.0; n], &mut y);
        if euclidean_norm(&y) > 1e-12 {
            return Err(SimError::Definition(format!("h(0) = {y:?} is not zero")));
        }
        Ok(sys)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn input_dim(&self) -> usize {
        self.m
    }
    pub fn output_dim(&self) -> usize {
        self.p
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (self.f)(x, u, dx);
    }

    pub fn output(&self, x: &[f64], y: &mut [f64]) {
        (self.h)(x, y);
    }

    pub fn output_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.p];
        (self.h)(x, &mut y);
        y
    }

    pub fn output_norm(&self, x: &[f64]) -> f64 {
        euclidean_norm(&self.output_vec(x))
    }
}

/// A piecewise-constant input signal on right-open intervals
/// `[b_k, b_{k+1})`, with the last value held past the final breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSignal {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    dim: usize,
    domain_end: Option<f64>,
    unit_ball: bool,
}

#[derive(Serialize, Deserialize)]
struct InputSignalDoc {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
    #[serde(default = "default_true")]
    hold_last: bool,
    #[serde(default)]
    domain_end: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl InputSignal {
    pub fn new(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, SimError> {
        if breakpoints.is_empty() || breakpoints[0] != 0.0 {
            return Err(SimError::Signal("breakpoints must start at 0".into()));
        }
        for w in breakpoints.windows(2) {
            if !(w[1] > w[0]) {
                return Err(SimError::Signal(format!(
                    "breakpoints must strictly increase: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if values.len() != breakpoints.len() {
            return Err(SimError::Signal(format!(
                "need one value per interval: {} breakpoints vs {} values",
                breakpoints.len(),
                values.len()
            )));
        }
        let dim = values.first().map(|v| v.len()).unwrap_or(0);
        if dim == 0 || values.iter().any(|v| v.len() != dim) {
            return Err(SimError::Signal("inconsistent value dimensions".into()));
        }
        if values.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SimError::Signal("values must be finite".into()));
        }
        Ok(Self { breakpoints, values, dim, domain_end: None, unit_ball: false })
    }

    pub fn constant(value: Vec<f64>) -> Result<Self, SimError> {
        Self::new(vec![0.0], vec![value])
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![0.0], vec![vec![0.0; dim]]).expect("zero signal is valid")
    }

    pub fn with_domain_end(mut self, end: f64) -> Self {
        self.domain_end = Some(end);
        self
    }

    /// Mark as a unit-ball disturbance; every value must have norm <= 1.
    pub fn tag_unit_ball(mut self) -> Result<Self, SimError> {
        for v in &self.values {
            if euclidean_norm(v) > 1.0 + 1e-12 {
                return Err(SimError::Signal(format!(
                    "unit-ball tag rejected: value {v:?} has norm {} > 1",
                    euclidean_norm(v)
                )));
            }
        }
        self.unit_ball = true;
        Ok(self)
    }

    pub fn is_unit_ball(&self) -> bool {
        self.unit_ball
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        let i = self.breakpoints.partition_point(|b| *b <= t);
        &self.values[i.saturating_sub(1).min(self.values.len() - 1)]
    }

    /// Essential sup of the Euclidean norm over `[0, t]` (or the whole
    /// domain when no interval is given). An empty interval (`t <= 0`)
    /// yields 0 by convention, matching the ess-sup over a null set.
    pub fn sup_norm(&self, upto: Option<f64>) -> f64 {
        match upto {
            None => self.values.iter().map(|v| euclidean_norm(v)).fold(0.0, f64::max),
            Some(t) => {
                if t <= 0.0 {
                    return 0.0;
                }
                let cnt = self.breakpoints.partition_point(|b| *b < t);
                self.values[..cnt.max(1)]
                    .iter()
                    .map(|v| euclidean_norm(v))
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Concatenation: this signal on `[0, tau)`, then `u(t - tau)` after.
    pub fn concat(&self, tau: f64, u: &InputSignal) -> Result<InputSignal, SimError> {
        if !(tau >= 0.0) {
            return Err(SimError::Signal(format!("tau must be nonnegative, got {tau}")));
        }
        if self.dim != u.dim {
            return Err(SimError::Signal("concatenation dimension mismatch".into()));
        }
        if tau == 0.0 {
            return Ok(u.clone());
        }
        let cnt = self.breakpoints.partition_point(|b| *b < tau);
        let mut breakpoints: Vec<f64> = self.breakpoints[..cnt].to_vec();
        let mut values: Vec<Vec<f64>> = self.values[..cnt].to_vec();
        for (b, v) in u.breakpoints.iter().zip(&u.values) {
            breakpoints.push(b + tau);
            values.push(v.clone());
        }
        let mut out = InputSignal::new(breakpoints, values)?;
        out.domain_end = u.domain_end.map(|e| e + tau);
        out.unit_ball = self.unit_ball && u.unit_ball;
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let doc: InputSignalDoc =
            serde_json::from_str(text).map_err(|e| SimError::Signal(e.to_string()))?;
        let mut sig = Self::new(doc.breakpoints, doc.values)?;
        if !doc.hold_last {
            match doc.domain_end {
                Some(end) => sig.domain_end = Some(end),
                None => {
                    return Err(SimError::Signal(
                        "hold_last = false requires domain_end".into(),
                    ))
                }
            }
        }
        Ok(sig)
    }

    pub fn to_json_doc(&self) -> serde_json::Value {
        serde_json::json!({
            "breakpoints": self.breakpoints,
            "values": self.values,
            "hold_last": self.domain_end.is_none(),
            "domain_end": self.domain_end,
        })
    }
}

/// Completion status of an integrated trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryStatus {
    Complete { horizon: f64 },
    Incomplete { blowup_time: f64, blowup_norm: f64 },
}

/// A time-gridded state/output/input path. Outputs are exactly
/// `h(states[k])` as evaluated at recording time.
#[derive(Clone, Debug)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<f64>,
    outputs: Vec<f64>,
    inputs: Vec<f64>,
    n: usize,
    m: usize,
    p: usize,
    status: TrajectoryStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn step(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn output(&self, k: usize) -> &[f64] {
        &self.outputs[k * self.p..(k + 1) * self.p]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.m..(k + 1) * self.m]
    }

    pub fn status(&self) -> &TrajectoryStatus {
        &self.status
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.status, TrajectoryStatus::Complete { .. })
    }

    pub fn output_norm(&self, k: usize) -> f64 {
        euclidean_norm(self.output(k))
    }

    pub fn state_norm(&self, k: usize) -> f64 {
        euclidean_norm(self.state(k))
    }

    pub fn max_output_norm(&self) -> f64 {
        (0..self.len()).map(|k| self.output_norm(k)).fold(0.0, f64::max)
    }

    pub fn max_state_norm(&self) -> f64 {
        (0..self.len()).map(|k| self.state_norm(k)).fold(0.0, f64::max)
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// The applied input as a piecewise-constant signal on the grid,
    /// suitable for replaying through the open-loop integrator.
    pub fn applied_input_signal(&self) -> Result<InputSignal, SimError> {
        let k = self.len().saturating_sub(1).max(1);
        let mut breakpoints = Vec::with_capacity(k);
        let mut values = Vec::with_capacity(k);
        for i in 0..k {
            breakpoints.push(self.times[i]);
            values.push(self.input(i).to_vec());
        }
        InputSignal::new(breakpoints, values)
    }

    /// CSV with header `t,x1..xn,y1..yp,u1..um`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for i in 1..=self.n {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=self.p {
            let _ = write!(out, ",y{i}");
        }
        for i in 1..=self.m {
            let _ = write!(out, ",u{i}");
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&fmt_f64(self.times[k]));
            for x in self.state(k) {
                out.push(',');
                out.push_str(&fmt_f64(*x));
            }
            for y in self.output(k) {
                out.push(',');
                out.push_str(&fmt_f64(*y));
            }
            for u in self.input(k) {
                out.push(',');
                out.push_str(&fmt_f64(*u));
            }
            out.push('\n');
        }
        out
    }
}

/// Integration options beyond the (horizon, step) pair.
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// State-norm threshold past which the run is marked incomplete.
    pub blowup_threshold: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { blowup_threshold: DEFAULT_BLOWUP }
    }
}

/// Refine the step by an integer factor (up to 64) so that every input
/// breakpoint within the horizon falls on a grid point; breakpoints that
/// still miss are snapped to the nearest grid time.
fn aligned_step(step: f64, breakpoints: &[f64], horizon: f64) -> f64 {
    let relevant: Vec<f64> =
        breakpoints.iter().copied().filter(|b| *b > 0.0 && *b < horizon).collect();
    if relevant.is_empty() {
        return step;
    }
    for factor in 1..=64u32 {
        let h = step / factor as f64;
        let aligned = relevant.iter().all(|b| {
            let k = (b / h).round();
            (b - k * h).abs() <= 1e-9 * b.max(1.0)
        });
        if aligned {
            return h;
        }
    }
    step
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn rk4_step(sys: &ControlSystem, x: &mut [f64], u: &[f64], h: f64, ws: &mut Rk4Workspace) {
    let n = x.len();
    sys.dynamics(x, u, &mut ws.k1);
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * ws.k1[i];
    }
    sys.dynamics(&ws.tmp, u, &mut ws.k2);
    for i in 0..n {
        ws.tmp[i] = x[i] + 0.5 * h * ws.k2[i];
    }
    sys.dynamics(&ws.tmp, u, &mut ws.k3);
    for i in 0..n {
        ws.tmp[i] = x[i] + h * ws.k3[i];
    }
    sys.dynamics(&ws.tmp, u, &mut ws.k4);
    for i in 0..n {
        x[i] += h / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
}

/// Core stepping loop shared by the trajectory integrators and the lean
/// peak-output scan. `input_for` receives the cell start time and current
/// output and returns the input held over that cell.
fn drive<F>(
    sys: &ControlSystem,
    xi: &[f64],
    horizon: f64,
    step: f64,
    opts: SimOptions,
    mut input_for: F,
    mut record: impl FnMut(usize, f64, &[f64], &[f64], &[f64]),
) -> Result<TrajectoryStatus, SimError>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(SimError::Grid(format!("step must be positive, got {step}")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(SimError::Grid(format!("horizon must be nonnegative, got {horizon}")));
    }
    if xi.len() != sys.state_dim() {
        return Err(SimError::Dimension(format!(
            "initial state has length {}, system {} expects {}",
            xi.len(),
            sys.name(),
            sys.state_dim()
        )));
    }
    let steps = (horizon / step).round().max(0.0) as usize;
    let steps = if (steps as f64) * step < horizon - 0.5 * step { steps + 1 } else { steps };
    let mut x = xi.to_vec();
    let mut y = vec![0.0; sys.output_dim()];
    let mut ws = Rk4Workspace::new(sys.state_dim());
    for k in 0..=steps {
        let t = k as f64 * step;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { last_valid: (k.saturating_sub(1)) as f64 * step });
        }
        sys.output(&x, &mut y);
        let u = input_for(t, &y);
        if u.len() != sys.input_dim() {
            return Err(SimError::Dimension(format!(
                "input value has length {}, system {} expects {}",
                u.len(),
                sys.name(),
                sys.input_dim()
            )));
        }
        record(k, t, &x, &y, &u);
        let norm = euclidean_norm(&x);
        if norm > opts.blowup_threshold {
            return Ok(TrajectoryStatus::Incomplete { blowup_time: t, blowup_norm: norm });
        }
        if k < steps {
            rk4_step(sys, &mut x, &u, step, &mut ws);
        }
    }
    Ok(TrajectoryStatus::Complete { horizon: steps as f64 * step })
}

fn collect_trajectory(
    sys: &ControlSystem,
    xi: &[f64],
    horizon: f64,
    step: f64,
    opts: SimOptions,
    input_for: impl FnMut(f64, &[f64]) -> Vec<f64>,
) -> Result<Trajectory, SimError> {
    let (n, m, p) = (sys.state_dim(), sys.input_dim(), sys.output_dim());
    let cap = (horizon / step) as usize + 2;
    let mut times = Vec::with_capacity(cap);
    let mut states = Vec::with_capacity(cap * n);
    let mut outputs = Vec::with_capacity(cap * p);
    let mut inputs = Vec::with_capacity(cap * m);
    let status = drive(sys, xi, horizon, step, opts, input_for, |_, t, x, y, u| {
        times.push(t);
        states.extend_from_slice(x);
        outputs.extend_from_slice(y);
        inputs.extend_from_slice(u);
    })?;
    Ok(Trajectory { times, states, outputs, inputs, n, m, p, status })
}

/// Integrate the open-loop system under a piecewise-constant input.
pub fn simulate(
    sys: &ControlSystem,
    xi: &[f64],
    u: &InputSignal,
    horizon: f64,
    step: f64,
    opts: SimOptions,
) -> Result<Trajectory, SimError> {
    if u.dim() != sys.input_dim() {
        return Err(SimError::Dimension(format!(
            "input signal has dimension {}, system {} expects {}",
            u.dim(),
            sys.name(),
            sys.input_dim()
        )));
    }
    let h = aligned_step(step, u.breakpoints(), horizon);
    collect_trajectory(sys, xi, horizon, h, opts, |t, _| u.value_at(t + 0.5 * h).to_vec())
}

/// The output-feedback closed loop `ẋ = f(x, d λ(|y|))` for a unit-ball
/// disturbance `d`. The feedback magnitude is held over each step cell
/// (sample-and-hold), and the recorded input is the effective
/// `u(t) = d(t) λ(|y(t)|)`, so replaying it through [`simulate`]
/// reproduces the closed-loop trajectory.
#[derive(Clone, Debug)]
pub struct FeedbackLoop {
    base: ControlSystem,
    lambda: ComparisonFunction,
}

impl FeedbackLoop {
    pub fn new(base: ControlSystem, lambda: ComparisonFunction) -> Self {
        Self { base, lambda }
    }

    pub fn base(&self) -> &ControlSystem {
        &self.base
    }

    pub fn lambda(&self) -> &ComparisonFunction {
        &self.lambda
    }
}

pub fn simulate_closed_loop(
    loop_: &FeedbackLoop,
    xi: &[f64],
    d: &InputSignal,
    horizon: f64,
    step: f64,
    opts: SimOptions,
) -> Result<Trajectory, SimError> {
    if !d.is_unit_ball() {
        return Err(SimError::Signal(
            "closed-loop disturbances must carry the unit-ball tag".into(),
        ));
    }
    let sys = &loop_.base;
    if d.dim() != sys.input_dim() {
        return Err(SimError::Dimension(format!(
            "disturbance has dimension {}, system {} expects {}",
            d.dim(),
            sys.name(),
            sys.input_dim()
        )));
    }
    let h = aligned_step(step, d.breakpoints(), horizon);
    let lambda = loop_.lambda.clone();
    collect_trajectory(sys, xi, horizon, h, opts, move |t, y| {
        let gain = lambda
            .evaluate(euclidean_norm(y))
            .expect("lambda evaluated at a nonnegative output norm");
        d.value_at(t + 0.5 * h).iter().map(|di| di * gain).collect()
    })
}

/// Lean scan returning `(sup |y(t)|, completed)` without storing the path.
pub fn peak_output_norm(
    sys: &ControlSystem,
    xi: &[f64],
    u: &InputSignal,
    horizon: f64,
    step: f64,
    opts: SimOptions,
) -> Result<(f64, bool), SimError> {
    let h = aligned_step(step, u.breakpoints(), horizon);
    let mut peak: f64 = 0.0;
    let status = drive(
        sys,
        xi,
        horizon,
        h,
        opts,
        |t, _| u.value_at(t + 0.5 * h).to_vec(),
        |_, _, _, y, _| {
            peak = peak.max(euclidean_norm(y));
        },
    )?;
    Ok((peak, matches!(status, TrajectoryStatus::Complete { .. })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{build_textbook_system, SystemId};
    use approx::assert_relative_eq;

    fn sys12() -> ControlSystem {
        build_textbook_system(SystemId::Sys12).unwrap()
    }

    #[test]
    fn zero_state_zero_input_stays_at_origin() {
        let sys = build_textbook_system(SystemId::Sys11).unwrap();
        let traj =
            simulate(&sys, &[0.0, 0.0], &InputSignal::zero(1), 5.0, 1e-3, SimOptions::default())
                .unwrap();
        assert!(traj.is_complete());
        assert_eq!(traj.max_state_norm(), 0.0);
    }

    #[test]
    fn sys12_scalar_linear_decay_closed_form() {
        // From (3, 1) with u = 0 the output obeys x2' = -2 x2 / 10.
        let sys = sys12();
        let traj =
            simulate(&sys, &[3.0, 1.0], &InputSignal::zero(1), 10.0, 1e-3, SimOptions::default())
                .unwrap();
        for k in 0..traj.len() {
            let t = traj.times()[k];
            let expected = (-2.0 * t / 10.0).exp();
            assert!(
                (traj.state(k)[1] - expected).abs() < 1e-6,
                "t = {t}: {} vs {expected}",
                traj.state(k)[1]
            );
        }
    }

    #[test]
    fn outputs_match_output_map_exactly() {
        let sys = sys12();
        let traj =
            simulate(&sys, &[1.0, 2.0], &InputSignal::zero(1), 1.0, 1e-2, SimOptions::default())
                .unwrap();
        for k in 0..traj.len() {
            let y = sys.output_vec(traj.state(k));
            assert_eq!(traj.output(k), &y[..]);
        }
    }

    #[test]
    fn step_halving_shows_fourth_order_convergence() {
        let sys = sys12();
        let xi = [1.0, 1.0];
        let u = InputSignal::constant(vec![0.5]).unwrap();
        let end = |step: f64| {
            simulate(&sys, &xi, &u, 2.0, step, SimOptions::default())
                .unwrap()
                .final_state()
                .to_vec()
        };
        let (a, b, c) = (end(0.04), end(0.02), end(0.01));
        let d1 = euclidean_norm(&[a[0] - b[0], a[1] - b[1]]);
        let d2 = euclidean_norm(&[b[0] - c[0], b[1] - c[1]]);
        assert!(d1 / d2 >= 8.0, "4th-order ratio was {}", d1 / d2);
    }

    #[test]
    fn semigroup_property_on_grid() {
        let sys = sys12();
        let u = InputSignal::new(vec![0.0, 1.0], vec![vec![0.4], vec![-0.6]]).unwrap();
        let full = simulate(&sys, &[2.0, 1.0], &u, 3.0, 1e-3, SimOptions::default()).unwrap();
        let first = simulate(&sys, &[2.0, 1.0], &u, 1.5, 1e-3, SimOptions::default()).unwrap();
        // Restart with the tail of the input shifted to time 0.
        let tail = InputSignal::new(vec![0.0], vec![vec![-0.6]]).unwrap();
        let second =
            simulate(&sys, first.final_state(), &tail, 1.5, 1e-3, SimOptions::default()).unwrap();
        let end_full = full.final_state();
        let end_two = second.final_state();
        for i in 0..2 {
            assert!(
                (end_full[i] - end_two[i]).abs() < 1e-8,
                "semigroup mismatch in coordinate {i}"
            );
        }
    }

    #[test]
    fn closed_loop_matches_replayed_effective_input() {
        let sys = sys12();
        let lambda = ComparisonFunction::identity();
        let loop_ = FeedbackLoop::new(sys.clone(), lambda);
        let d = InputSignal::constant(vec![1.0]).unwrap().tag_unit_ball().unwrap();
        let closed =
            simulate_closed_loop(&loop_, &[0.0, 1.0], &d, 4.0, 1e-3, SimOptions::default())
                .unwrap();
        let replay = simulate(
            &sys,
            &[0.0, 1.0],
            &closed.applied_input_signal().unwrap(),
            4.0,
            1e-3,
            SimOptions::default(),
        )
        .unwrap();
        for k in 0..closed.len() {
            let dx = closed.state(k)[0] - replay.state(k)[0];
            let dy = closed.state(k)[1] - replay.state(k)[1];
            assert!(dx.abs() < 1e-9 && dy.abs() < 1e-9, "per-step mismatch at k = {k}");
        }
    }

    #[test]
    fn closed_loop_equilibrium_at_origin() {
        let sys = build_textbook_system(SystemId::Sys29).unwrap();
        let loop_ = FeedbackLoop::new(sys, ComparisonFunction::identity());
        let d = InputSignal::constant(vec![-1.0]).unwrap().tag_unit_ball().unwrap();
        let traj = simulate_closed_loop(&loop_, &[0.0, 0.0], &d, 2.0, 1e-3, SimOptions::default())
            .unwrap();
        assert_eq!(traj.max_state_norm(), 0.0);
    }

    #[test]
    fn blowup_marks_incomplete() {
        let sys = ControlSystem::new(
            "expander",
            1,
            1,
            1,
            Arc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = x[0]),
            Arc::new(|x: &[f64], y: &mut [f64]| y[0] = x[0]),
        )
        .unwrap();
        let opts = SimOptions { blowup_threshold: 1e3 };
        let traj = simulate(&sys, &[1.0], &InputSignal::zero(1), 20.0, 1e-2, opts).unwrap();
        match traj.status() {
            TrajectoryStatus::Incomplete { blowup_norm, .. } => {
                assert!(*blowup_norm > 1e3);
                assert!(traj.state_norm(traj.len() - 1) > 1e3);
            }
            other => panic!("expected incomplete, got {other:?}"),
        }
    }

    #[test]
    fn concat_and_sup_norm() {
        let v = InputSignal::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let u = InputSignal::new(vec![0.0], vec![vec![3.0]]).unwrap();
        let c = v.concat(2.0, &u).unwrap();
        assert_eq!(c.value_at(1.0), &[1.0]);
        assert_eq!(c.value_at(2.5), &[3.0]);
        let c0 = v.concat(0.0, &u).unwrap();
        assert_eq!(c0.value_at(0.0), &[3.0]);
        assert_eq!(c0.value_at(7.0), &[3.0]);

        assert_eq!(InputSignal::constant(vec![5.0]).unwrap().sup_norm(None), 5.0);
        let s = InputSignal::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![1.0], vec![-3.0], vec![2.0]],
        )
        .unwrap();
        assert_eq!(s.sup_norm(None), 3.0);
        let two_piece =
            InputSignal::new(vec![0.0, 1.0], vec![vec![1.0], vec![9.0]]).unwrap();
        assert_eq!(two_piece.sup_norm(Some(0.5)), 1.0);
        assert_eq!(two_piece.sup_norm(Some(0.0)), 0.0);
    }

    #[test]
    fn csv_header_and_formatting() {
        let sys = sys12();
        let traj =
            simulate(&sys, &[1.0, 1.0], &InputSignal::zero(1), 0.2, 0.1, SimOptions::default())
                .unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,y1,u1");
        assert!(lines.next().unwrap().starts_with("0.0000000000000000e0,1.0000000000000000e0"));
    }

    #[test]
    fn input_signal_json_round_trip() {
        let text = r#"{"breakpoints": [0.0, 1.5], "values": [[1.0], [2.0]], "hold_last": true}"#;
        let sig = InputSignal::from_json(text).unwrap();
        assert_eq!(sig.value_at(1.0), &[1.0]);
        assert_eq!(sig.value_at(10.0), &[2.0]);
        let doc = sig.to_json_doc();
        assert_eq!(doc["hold_last"], serde_json::Value::Bool(true));
    }

    #[test]
    fn unit_ball_tag_rejects_large_values() {
        let sig = InputSignal::constant(vec![1.5]).unwrap();
        assert!(sig.tag_unit_ball().is_err());
    }

    #[test]
    fn breakpoint_alignment_refines_step() {
        // A breakpoint at 0.05 is off the 0.1 grid but on the 0.05 one.
        let sys = sys12();
        let u = InputSignal::new(vec![0.0, 0.05], vec![vec![0.0], vec![1.0]]).unwrap();
        let traj = simulate(&sys, &[0.0, 0.0], &u, 1.0, 0.1, SimOptions::default()).unwrap();
        assert_relative_eq!(traj.step(), 0.05);
    }
}
