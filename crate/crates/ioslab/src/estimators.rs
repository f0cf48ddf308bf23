//! Grid-and-sample verification and refutation of output-stability
//! estimates.
//!
//! Verification here is falsification-oriented: a `holds-on-grid` verdict
//! is never a proof, only the statement that no sampled trajectory violated
//! the inequality; every report carries the grid description that produced
//! it. All sampling is seeded and batches reduce in a fixed order, so a
//! report is a deterministic function of (system, gains, grid).
//!
//! All estimate checks use the max form of the bounds: a sum
//! `beta + gamma` is covered by `max(2 beta, 2 gamma)`, so callers supply
//! gains already scaled for the max form.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::compfn::{CompFnError, ComparisonFunction, KlSurface, SettlingTimeMap};
use crate::exec;
use crate::sysmodel::{
    euclidean_norm, simulate, simulate_closed_loop, ControlSystem, FeedbackLoop, InputSignal,
    SimError, SimOptions, Trajectory,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(
        "forward completeness failed for {system}: trajectory from {xi:?} exceeded the \
         blow-up threshold (norm {norm:.3e} at t = {time})"
    )]
    ForwardCompleteness { system: String, xi: Vec<f64>, time: f64, norm: f64 },
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("gain error: {0}")]
    Gain(#[from] CompFnError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("empirical fit aborted: trajectory from {xi:?} was incomplete")]
    FitAborted { xi: Vec<f64> },
    #[error(
        "supplied gradient disagrees with central differences at {xi:?}: \
         |supplied - fd| = {diff:.3e} exceeds 1e-4 relative"
    )]
    GradientMismatch { xi: Vec<f64>, diff: f64 },
}

// --- sampling ----------------------------------------------------------------

/// Family of test inputs, either explicit signals or a generated default:
/// the zero signal, signed constants at each amplitude level, and seeded
/// piecewise-constant signals whose segment values are drawn from the
/// signed levels.
#[derive(Clone, Debug)]
pub enum InputFamily {
    Explicit(Vec<InputSignal>),
    Generated { amplitude_levels: Vec<f64>, segments: usize, random_signals: usize },
}

impl Default for InputFamily {
    fn default() -> Self {
        Self::Generated {
            amplitude_levels: vec![0.25, 0.5, 1.0, 2.0, 5.0],
            segments: 4,
            random_signals: 16,
        }
    }
}

/// Deterministic sample plan: states on spheres of the given radii (axis
/// directions first, then seeded random directions), an input family, the
/// integration window, and the seed that fixes everything.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub state_radii: Vec<f64>,
    pub states_per_radius: usize,
    pub input_family: InputFamily,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
    /// Extra probe states appended after the sphere samples.
    pub extra_states: Vec<Vec<f64>>,
}

impl SampleGrid {
    pub fn new(
        radii: Vec<f64>,
        states_per_radius: usize,
        horizon: f64,
        step: f64,
        seed: u64,
    ) -> Self {
        Self {
            state_radii: radii,
            states_per_radius,
            horizon,
            step,
            seed,
            input_family: InputFamily::default(),
            extra_states: Vec::new(),
        }
    }

    pub fn with_inputs(mut self, family: InputFamily) -> Self {
        self.input_family = family;
        self
    }

    pub fn with_extra_states(mut self, states: Vec<Vec<f64>>) -> Self {
        self.extra_states = states;
        self
    }

    /// Sampled initial states: for each radius the signed axis directions,
    /// then seeded random directions up to `states_per_radius`, then the
    /// extra probes.
    pub fn sample_states(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let mut states = Vec::new();
        for &r in &self.state_radii {
            if r == 0.0 {
                states.push(vec![0.0; n]);
                continue;
            }
            let mut count = 0;
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    if count >= self.states_per_radius {
                        break;
                    }
                    let mut s = vec![0.0; n];
                    s[i] = sign * r;
                    states.push(s);
                    count += 1;
                }
            }
            while count < self.states_per_radius {
                states.push(random_direction(&mut rng, n, r));
                count += 1;
            }
        }
        states.extend(self.extra_states.iter().cloned());
        states
    }

    /// The input signals of the family, instantiated for dimension `m` on
    /// `[0, horizon]`. Generated families are seeded from the grid seed;
    /// growing `random_signals` extends the family without reshuffling it.
    pub fn build_inputs(&self, m: usize) -> Result<Vec<InputSignal>, SimError> {
        match &self.input_family {
            InputFamily::Explicit(signals) => Ok(signals.clone()),
            InputFamily::Generated { amplitude_levels, segments, random_signals } => {
                let mut out = vec![InputSignal::zero(m)];
                for &level in amplitude_levels {
                    for axis in 0..m {
                        for sign in [1.0, -1.0] {
                            let mut v = vec![0.0; m];
                            v[axis] = sign * level;
                            out.push(InputSignal::constant(v)?);
                        }
                    }
              }
                let mut rng = ChaCha20Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
                let seg = (*segments).max(1);
                let breakpoints: Vec<f64> =
                    (0..seg).map(|i| i as f64 * self.horizon / seg as f64).collect();
                for _ in 0..*random_signals {
                    let mut values = Vec::with_capacity(seg);
                    for _ in 0..seg {
                        let mut v = vec![0.0; m];
                        for item in v.iter_mut() {
                            let level =
                                amplitude_levels[rng.gen_range(0..amplitude_levels.len())];
                            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                            *item = sign * level;
                        }
                        values.push(v);
                    }
                    out.push(InputSignal::new(breakpoints.clone(), values)?);
                }
                Ok(out)
            }
        }
    }

    pub fn descriptor(&self, context: &str) -> GridDescriptor {
        GridDescriptor {
            state_radii: self.state_radii.clone(),
            states_per_radius: self.states_per_radius,
            extra_states: self.extra_states.len(),
            input_family: match &self.input_family {
                InputFamily::Explicit(sigs) => format!("explicit({})", sigs.len()),
                InputFamily::Generated { amplitude_levels, segments, random_signals } => format!(
                    "generated(levels={amplitude_levels:?}, segments={segments}, random={random_signals})"
                ),
            },
            horizon: self.horizon,
            step: self.step,
            seed: self.seed,
            context: context.to_string(),
            skipped_samples: 0,
        }
    }
}

fn random_direction(rng: &mut ChaCha20Rng, n: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        let norm = euclidean_norm(&v);
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm * radius).collect();
        }
    }
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller from two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// --- reports -----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PropertyKind {
    #[serde(rename = "IOS")]
    Ios,
    #[serde(rename = "OLIOS_ol_part")]
    OliosOlPart,
    #[serde(rename = "SIOS")]
    Sios,
    #[serde(rename = "ROS")]
    Ros,
    #[serde(rename = "UBIBS")]
    Ubibs,
    #[serde(rename = "REMARK23_P1")]
    Remark23P1,
    #[serde(rename = "REMARK23_P2")]
    Remark23P2,
    #[serde(rename = "LYAP_DECREASE")]
    LyapDecrease,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "holds-on-grid")]
    HoldsOnGrid,
    #[serde(rename = "violated")]
    Violated,
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub xi: Vec<f64>,
    pub input: serde_json::Value,
    pub t: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridDescriptor {
    pub state_radii: Vec<f64>,
    pub states_per_radius: usize,
    pub extra_states: usize,
    pub input_family: String,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
    pub context: String,
    pub skipped_samples: usize,
}

/// Verdict + worst margin + witness for one estimate check.
///
/// `worst_margin` is the minimum over every checked point of
/// `bound - observed`; the verdict is `violated` exactly when it is
/// negative, in which case the first violation in deterministic order is
/// the witness.
#[derive(Clone, Debug, Serialize)]
pub struct EstimateReport {
    pub property: PropertyKind,
    pub verdict: Verdict,
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub grid: GridDescriptor,
}

impl EstimateReport {
    fn from_outcomes(
        property: PropertyKind,
        grid: GridDescriptor,
        outcomes: Vec<PairOutcome>,
    ) -> Self {
        let mut worst = f64::INFINITY;
        let mut witness = None;
        for o in outcomes {
            worst = worst.min(o.min_margin);
            if witness.is_none() {
                witness = o.first_violation;
            }
        }
        if worst == f64::INFINITY {
            worst = 0.0; // nothing checked; vacuous but not a violation
        }
        let verdict = if worst < 0.0 { Verdict::Violated } else { Verdict::HoldsOnGrid };
        let witness = if verdict == Verdict::Violated { witness } else { None };
        EstimateReport { property, verdict, worst_margin: worst, witness, grid }
    }

    pub fn holds(&self) -> bool {
        self.verdict == Verdict::HoldsOnGrid
    }
}

struct PairOutcome {
    min_margin: f64,
    first_violation: Option<Witness>,
}

fn scan_margins(
    traj: &Trajectory,
    xi: &[f64],
    input_doc: &serde_json::Value,
    mut bound_minus_observed: impl FnMut(usize, f64) -> f64,
) -> PairOutcome {
    let mut min_margin = f64::INFINITY;
    let mut first_violation = None;
    for k in 0..traj.len() {
        let t = traj.times()[k];
        let margin = bound_minus_observed(k, t);
        if margin < min_margin {
            min_margin = margin;
        }
        if margin < 0.0 && first_violation.is_none() {
            first_violation = Some(Witness { xi: xi.to_vec(), input: input_doc.clone(), t });
        }
    }
    PairOutcome { min_margin, first_violation }
}

// --- estimate verification ----------------------------------------------------

/// Which estimate to check, together with the gains it needs.
#[derive(Clone, Debug)]
pub enum EstimateKind {
    /// `|y(t)| <= max(beta(|xi|, t), gamma(||u||))`
    Ios { beta: KlSurface, gamma: ComparisonFunction },
    /// `|y(t)| <= max(sigma1(|h(xi)|), sigma2(||u||))`
    OutputLagrange { sigma1: ComparisonFunction, sigma2: ComparisonFunction },
    /// `|y(t)| <= max(beta(|h(xi)|, t), gamma(||u||))`
    Sios { beta: KlSurface, gamma: ComparisonFunction },
    /// `|x(t)| <= max(sigma(|xi|), sigma(||u||))`
    Ubibs { sigma: ComparisonFunction },
}

impl EstimateKind {
    pub fn property(&self) -> PropertyKind {
        match self {
            Self::Ios { .. } => PropertyKind::Ios,
            Self::OutputLagrange { .. } => PropertyKind::OliosOlPart,
            Self::Sios { .. } => PropertyKind::Sios,
            Self::Ubibs { .. } => PropertyKind::Ubibs,
        }
    }
}

/// Check the chosen estimate over every sampled (state, input) pair and
/// every grid time. An incomplete trajectory is a forward-completeness
/// failure, reported as an error distinct from an estimate violation.
pub fn verify_estimate(
    sys: &ControlSystem,
    kind: &EstimateKind,
    grid: &SampleGrid,
) -> Result<EstimateReport, EstimatorError> {
    let states = grid.sample_states(sys.state_dim());
    let inputs = grid.build_inputs(sys.input_dim())?;
    if states.is_empty() || inputs.is_empty() {
        return Err(EstimatorError::Usage("empty sample grid".into()));
    }
    let opts = SimOptions::default();
    let pairs: Vec<(usize, usize)> = (0..states.len())
        .flat_map(|i| (0..inputs.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<Result<PairOutcome, EstimatorError>> = exec::run(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| -> Result<PairOutcome, EstimatorError> {
                let xi = &states[i];
                let u = &inputs[j];
                let traj = simulate(sys, xi, u, grid.horizon, grid.step, opts)?;
                match traj.status() {
                    crate::sysmodel::TrajectoryStatus::Incomplete { blowup_time, blowup_norm } => {
                        return Err(EstimatorError::ForwardCompleteness {
                            system: sys.name().to_string(),
                            xi: xi.clone(),
                            time: *blowup_time,
                            norm: *blowup_norm,
                        })
                    }
                    crate::sysmodel::TrajectoryStatus::Complete { .. } => {}
                }
                let u_norm = u.sup_norm(Some(grid.horizon));
                let doc = u.to_json_doc();
                let outcome = match kind {
                    EstimateKind::Ios { beta, gamma } => {
                        let xi_norm = euclidean_norm(xi);
                        let gain = gamma.evaluate(u_norm)?;
                        let mut err = None;
                        let o = scan_margins(&traj, xi, &doc, |k, t| {
                            let b = match beta.evaluate(xi_norm, t) {
                                Ok(b) => b,
                                Err(e) => {
                                    err = Some(e);
                                    f64::INFINITY
                                }
                            };
                            b.max(gain) - traj.output_norm(k)
                        });
                        if let Some(e) = err {
                            return Err(e.into());
                        }
                        o
                    }
                    EstimateKind::OutputLagrange { sigma1, sigma2 } => {
                        let h0 = traj.output_norm(0);
                        let bound = sigma1.evaluate(h0)?.max(sigma2.evaluate(u_norm)?);
                        scan_margins(&traj, xi, &doc, |k, _| bound - traj.output_norm(k))
                    }
                    EstimateKind::Sios { beta, gamma } => {
                        let h0 = traj.output_norm(0);
                        let gain = gamma.evaluate(u_norm)?;
                        let mut err = None;
                        let o = scan_margins(&traj, xi, &doc, |k, t| {
                            let b = match beta.evaluate(h0, t) {
                                Ok(b) => b,
                                Err(e) => {
                                    err = Some(e);
                                    f64::INFINITY
                                }
                            };
                            b.max(gain) - traj.output_norm(k)
                        });
                        if let Some(e) = err {
                            return Err(e.into());
                        }
                        o
                    }
                    EstimateKind::Ubibs { sigma } => {
                        let bound =
                            sigma.evaluate(euclidean_norm(xi))?.max(sigma.evaluate(u_norm)?);
                        scan_margins(&traj, xi, &doc, |k, _| bound - traj.state_norm(k))
                    }
                };
                Ok(outcome)
            })
            .collect()
    });
    let mut collected = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        collected.push(o?);
    }
    Ok(EstimateReport::from_outcomes(
        kind.property(),
        grid.descriptor(&format!("{}:{:?}", sys.name(), kind.property())),
        collected,
    ))
}

// --- robust output stability ----------------------------------------------------

/// Tolerance lists for the two asymptotic-gain properties checked next to
/// the main decay estimate.
#[derive(Clone, Debug)]
pub struct RemarkProbe {
    pub epsilons: Vec<f64>,
}

impl Default for RemarkProbe {
    fn default() -> Self {
        Self { epsilons: vec![0.1, 1.0, 10.0] }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RosReport {
    pub ros: EstimateReport,
    pub p1: EstimateReport,
    pub p2: EstimateReport,
}

/// Largest radius whose initial overshoot stays below `eps`, located by
/// bisection on the monotone `beta0`.
fn overshoot_inverse(beta: &KlSurface, eps: f64) -> Result<f64, CompFnError> {
    if beta.beta0(0.0)? > eps {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let cap = 1e12;
    while beta.beta0(hi)? <= eps {
        hi *= 2.0;
        if hi > cap {
            return Ok(cap);
        }
    }
    let mut lo = hi / 2.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta.beta0(mid)? <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(lo)
}

/// Verify the closed-loop decay estimate `|y_lambda(t)| <= beta(|xi|, t)`
/// over sampled states and unit-ball disturbances, and empirically check
/// the two equivalent asymptotic-gain properties: small initial states keep
/// outputs under each `eps` forever, and outputs from radius-`r` states
/// drop under `eps` after the settling time of `beta`.
pub fn verify_ros(
    sys: &ControlSystem,
    lambda: &ComparisonFunction,
    beta: &KlSurface,
    grid: &SampleGrid,
    probe: &RemarkProbe,
) -> Result<RosReport, EstimatorError> {
    let loop_ = FeedbackLoop::new(sys.clone(), lambda.clone());
    let mut disturbances = Vec::new();
    for d in grid.build_inputs(sys.input_dim())? {
        disturbances.push(d.tag_unit_ball().map_err(|e| {
            EstimatorError::Usage(format!("disturbance family must lie in the unit ball: {e}"))
        })?);
    }
    let states = grid.sample_states(sys.state_dim());
    let opts = SimOptions::default();

    let run_closed =
        |xi: &[f64], d: &InputSignal, horizon: f64| -> Result<Trajectory, EstimatorError> {
            let traj = simulate_closed_loop(&loop_, xi, d, horizon, grid.step, opts)?;
            if let crate::sysmodel::TrajectoryStatus::Incomplete { blowup_time, blowup_norm } =
                traj.status()
            {
                return Err(EstimatorError::ForwardCompleteness {
                    system: sys.name().to_string(),
                    xi: xi.to_vec(),
                    time: *blowup_time,
                    norm: *blowup_norm,
                });
            }
            Ok(traj)
        };

    // Main decay estimate.
    let pairs: Vec<(usize, usize)> = (0..states.len())
        .flat_map(|i| (0..disturbances.len()).map(move |j| (i, j)))
        .collect();
    let outcomes: Vec<Result<PairOutcome, EstimatorError>> = exec::run(|| {
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let xi = &states[i];
                let d = &disturbances[j];
                let traj = run_closed(xi, d, grid.horizon)?;
                let xi_norm = euclidean_norm(xi);
                let doc = d.to_json_doc();
                let mut err = None;
                let o = scan_margins(&traj, xi, &doc, |k, t| {
                    let b = match beta.evaluate(xi_norm, t) {
                        Ok(b) => b,
                        Err(e) => {
                            err = Some(e);
                            f64::INFINITY
                        }
                    };
                    b - traj.output_norm(k)
                });
                if let Some(e) = err {
                    return Err(e.into());
                }
                Ok(o)
            })
            .collect()
    });
    let mut collected = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        collected.push(o?);
    }
    let ros = EstimateReport::from_outcomes(
        PropertyKind::Ros,
        grid.descriptor(&format!("{}:ROS", sys.name())),
        collected,
    );

    // Property 1: |xi| <= delta(eps) keeps outputs under eps for all d.
    let directions: Vec<Vec<f64>> = {
        let mut rng = ChaCha20Rng::seed_from_u64(grid.seed ^ 0x5bf0_3635);
        let n = sys.state_dim();
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut v = vec![0.0; n];
                v[i] = sign;
                dirs.push(v);
            }
        }
        for _ in 0..grid.states_per_radius.max(4) {
            dirs.push(random_direction(&mut rng, n, 1.0));
        }
        dirs
    };
    let mut p1_outcomes = Vec::new();
    for &eps in &probe.epsilons {
        let delta = overshoot_inverse(beta, eps)?;
        if delta <= 0.0 {
            continue;
        }
        let cases: Vec<(usize, usize)> = (0..directions.len())
            .flat_map(|i| (0..disturbances.len()).map(move |j| (i, j)))
            .collect();
        let batch: Vec<Result<PairOutcome, EstimatorError>> = exec::run(|| {
            cases
                .par_iter()
                .map(|&(i, j)| {
                    let xi: Vec<f64> = directions[i].iter().map(|v| v * delta).collect();
                    let traj = run_closed(&xi, &disturbances[j], grid.horizon)?;
                    let doc = disturbances[j].to_json_doc();
                    Ok(scan_margins(&traj, &xi, &doc, |k, _| eps - traj.output_norm(k)))
                })
                .collect()
        });
        for o in batch {
            p1_outcomes.push(o?);
        }
    }
    let p1 = EstimateReport::from_outcomes(
        PropertyKind::Remark23P1,
        grid.descriptor(&format!("{}:REMARK23_P1 eps={:?}", sys.name(), probe.epsilons)),
        p1_outcomes,
    );

    // Property 2: after T_{r, eps} every output from |xi| <= r is under eps.
    let settling = SettlingTimeMap::new(beta.clone());
    let mut p2_outcomes = Vec::new();
    for &r in &grid.state_radii {
        if r <= 0.0 {
            continue;
        }
        for &eps in &probe.epsilons {
            let t_re = settling.evaluate(r, eps)?;
            let horizon = grid.horizon.max(t_re * 1.1 + 1.0);
            let cases: Vec<(usize, usize)> = (0..directions.len())
                .flat_map(|i| (0..disturbances.len()).map(move |j| (i, j)))
                .collect();
            let batch: Vec<Result<PairOutcome, EstimatorError>> = exec::run(|| {
                cases
                    .par_iter()
                    .map(|&(i, j)| {
                        let xi: Vec<f64> = directions[i].iter().map(|v| v * r).collect();
                        let traj = run_closed(&xi, &disturbances[j], horizon)?;
                        let doc = disturbances[j].to_json_doc();
                        Ok(scan_margins(&traj, &xi, &doc, |k, t| {
                            if t >= t_re {
                                eps - traj.output_norm(k)
                            } else {
                                f64::INFINITY
                            }
                        }))
                    })
                    .collect()
            });
            for o in batch {
                p2_outcomes.push(o?);
            }
        }
    }
    let p2 = EstimateReport::from_outcomes(
        PropertyKind::Remark23P2,
        grid.descriptor(&format!("{}:REMARK23_P2 eps={:?}", sys.name(), probe.epsilons)),
        p2_outcomes,
    );

    Ok(RosReport { ros, p1, p2 })
}

// --- empirical decay envelope ---------------------------------------------------

/// Fit a candidate KL envelope from zero-input trajectories: for each
/// radius the pointwise max of `|y(t)|` over samples started inside that
/// radius, monotonized on ingestion (running max upward in r, suffix max
/// in t).
pub fn fit_empirical_beta(
    sys: &ControlSystem,
    grid: &SampleGrid,
) -> Result<KlSurface, EstimatorError> {
    let u = InputSignal::zero(sys.input_dim());
    let opts = SimOptions::default();
    let mut radii = grid.state_radii.clone();
    radii.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    radii.dedup();
    if radii.is_empty() {
        return Err(EstimatorError::Usage("empirical fit needs at least one radius".into()));
    }

    let ncols = 257usize;
    let t_grid: Vec<f64> =
        (0..ncols).map(|j| grid.horizon * j as f64 / (ncols - 1) as f64).collect();

    let mut r_grid = vec![0.0];
    let mut values = vec![vec![0.0; ncols]];
    for &r in &radii {
        if r == 0.0 {
            continue;
        }
        let sub = SampleGrid { state_radii: vec![r], ..grid.clone() };
        let states = sub.sample_states(sys.state_dim());
        let rows: Vec<Result<Vec<f64>, EstimatorError>> = exec::run(|| {
            states
                .par_iter()
                .map(|xi| {
                    let traj = simulate(sys, xi, &u, grid.horizon, grid.step, opts)?;
                    if !traj.is_complete() {
                        return Err(EstimatorError::FitAborted { xi: xi.clone() });
                    }
                    // Column j holds the max of |y| over the window starting
                    // at t_grid[j], so the grid value dominates the path.
                    let mut row = vec![0.0f64; ncols];
                    for k in 0..traj.len() {
                        let t = traj.times()[k];
                        let j = ((t / grid.horizon) * (ncols - 1) as f64).floor() as usize;
                        let j = j.min(ncols - 1);
                        row[j] = row[j].max(traj.output_norm(k));
                    }
                    Ok(row)
                })
                .collect()
        });
        let mut envelope = vec![0.0f64; ncols];
        for row in rows {
            let row = row?;
            for (e, v) in envelope.iter_mut().zip(row) {
                *e = e.max(v);
            }
        }
        r_grid.push(r);
        values.push(envelope);
    }
    Ok(KlSurface::from_grid(r_grid, t_grid, values, None)?)
}

// --- structural violation searches ------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum ViolationKind {
    /// States with zero initial output whose output later grows.
    OutputLagrange,
    /// Pairs with equal initial output magnitude but very different
    /// output half-times.
    Sios,
}

#[derive(Clone, Debug, Serialize)]
pub enum ViolationWitness {
    OutputLagrange {
        xi: Vec<f64>,
        peak_output: f64,
        time: f64,
    },
    Sios {
        xi_slow: Vec<f64>,
        xi_fast: Vec<f64>,
        half_time_slow: f64,
        half_time_fast: f64,
        factor: f64,
    },
}

/// Half-time threshold factor for the SIOS refutation: far above
/// integration noise, well below the analytic factor-10 witnesses.
pub const SIOS_HALF_TIME_FACTOR: f64 = 4.0;

/// Output level past which a zero-output start counts as a violation.
pub const OL_PEAK_THRESHOLD: f64 = 1e-6;

/// Search the grid for structural refutations under zero input. Absence of
/// a witness is not a proof; it only means none was found on this grid.
pub fn find_estimate_violation(
    sys: &ControlSystem,
    kind: ViolationKind,
    grid: &SampleGrid,
) -> Result<Option<ViolationWitness>, EstimatorError> {
    let states = grid.sample_states(sys.state_dim());
    let u = InputSignal::zero(sys.input_dim());
    let opts = SimOptions::default();
    match kind {
        ViolationKind::OutputLagrange => {
            let mut best: Option<ViolationWitness> = None;
            for xi in &states {
                if sys.output_norm(xi) > 1e-9 {
                    continue;
                }
                let traj = simulate(sys, xi, &u, grid.horizon, grid.step, opts)?;
                let mut peak = 0.0f64;
                let mut at = 0.0;
                for k in 0..traj.len() {
                    let v = traj.output_norm(k);
                    if v > peak {
                        peak = v;
                        at = traj.times()[k];
                    }
                }
                if peak > OL_PEAK_THRESHOLD {
                    let better = match &best {
                        Some(ViolationWitness::OutputLagrange { peak_output, .. }) => {
                            peak > *peak_output
                        }
                        _ => true,
                    };
                    if better {
                        best = Some(ViolationWitness::OutputLagrange {
                            xi: xi.clone(),
                            peak_output: peak,
                            time: at,
                        });
                    }
                }
            }
            Ok(best)
        }
        ViolationKind::Sios => {
            let mut measured: Vec<(Vec<f64>, f64, f64)> = Vec::new(); // (xi, |h|, half time)
            for xi in &states {
                let h0 = sys.output_norm(xi);
                if h0 <= 1e-9 {
                    continue;
                }
                let traj = simulate(sys, xi, &u, grid.horizon, grid.step, opts)?;
                if let Some(ht) = half_time(&traj, h0) {
                    measured.push((xi.clone(), h0, ht));
                }
            }
            let mut best: Option<ViolationWitness> = None;
            for i in 0..measured.len() {
                for j in (i + 1)..measured.len() {
                    let (ref xi_a, ha, ta) = measured[i];
                    let (ref xi_b, hb, tb) = measured[j];
                    if (ha - hb).abs() > 1e-6 * ha.max(hb).max(1e-12) {
                        continue;
                    }
                    let (xa, xb, ts, tf) =
                        if ta >= tb { (xi_a, xi_b, ta, tb) } else { (xi_b, xi_a, tb, ta) };
                    if tf <= 0.0 {
                        continue;
                    }
                    let factor = ts / tf;
                    if factor > SIOS_HALF_TIME_FACTOR {
                        let better = match &best {
                            Some(ViolationWitness::Sios { factor: f, .. }) => factor > *f,
                            _ => true,
                        };
                        if better {
                            best = Some(ViolationWitness::Sios {
                                xi_slow: xa.clone(),
                                xi_fast: xb.clone(),
                                half_time_slow: ts,
                                half_time_fast: tf,
                                factor,
                            });
                        }
                    }
                }
            }
            Ok(best)
        }
    }
}

/// First time the output norm falls to half its initial value, linearly
/// interpolated between grid points; `None` if it never halves on the grid.
pub fn half_time(traj: &Trajectory, initial: f64) -> Option<f64> {
    let target = initial / 2.0;
    for k in 1..traj.len() {
        let (prev, cur) = (traj.output_norm(k - 1), traj.output_norm(k));
        if cur <= target {
            if prev <= target {
                return Some(traj.times()[k - 1]);
            }
            let w = (prev - target) / (prev - cur);
            return Some(traj.times()[k - 1] + w * (traj.times()[k] - traj.times()[k - 1]));
        }
    }
    None
}

// --- Lyapunov decrease ----------------------------------------------------------

/// A scalar field with an optional analytic gradient.
#[derive(Clone)]
pub struct ScalarField {
    value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    gradient: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
}

impl ScalarField {
    pub fn new(value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>) -> Self {
        Self { value, gradient: None }
    }

    pub fn with_gradient(
        value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        gradient: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    ) -> Self {
        Self { value, gradient: Some(gradient) }
    }

    /// The quadratic form `x^T Q x` with analytic gradient `(Q + Q^T) x`.
    pub fn quadratic(q: nalgebra::DMatrix<f64>) -> Self {
        let qt = &q + q.transpose();
        let qv = q.clone();
        Self::with_gradient(
            Arc::new(move |x: &[f64]| {
                let v = nalgebra::DVector::from_column_slice(x);
                (v.transpose() * &qv * &v)[(0, 0)]
            }),
            Arc::new(move |x: &[f64]| {
                let v = nalgebra::DVector::from_column_slice(x);
                (&qt * v).iter().copied().collect()
            }),
        )
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn fd_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let fp = self.value(&probe);
            probe[i] = x[i] - h;
            let fm = self.value(&probe);
            probe[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => self.fd_gradient(x),
        }
    }
}

/// Check `DV(xi) . f(xi, mu) < 0` wherever `V(xi) >= chi(|mu|)` and
/// `xi != 0`, over grid states and constant input values. A supplied
/// gradient is spot-checked against central differences first.
pub fn lyapunov_decrease_check(
    sys: &ControlSystem,
    v: &ScalarField,
    chi: &ComparisonFunction,
    grid: &SampleGrid,
) -> Result<EstimateReport, EstimatorError> {
    if v.value(&vec![0.0; sys.state_dim()]).abs() > 1e-12 {
        return Err(EstimatorError::Usage("V(0) must be 0".into()));
    }
    let states = grid.sample_states(sys.state_dim());
    for xi in &states {
        if v.value(xi) < 0.0 {
            return Err(EstimatorError::Usage(format!("V({xi:?}) is negative")));
        }
    }
    if v.gradient.is_some() {
        for xi in states.iter().take(16) {
            if euclidean_norm(xi) == 0.0 {
                continue;
            }
            let supplied = v.gradient_at(xi);
            let fd = v.fd_gradient(xi);
            let diff: f64 = supplied
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale = euclidean_norm(&fd).max(1.0);
            if diff > 1e-4 * scale {
                return Err(EstimatorError::GradientMismatch { xi: xi.clone(), diff });
            }
        }
    }

    // Constant input values: zero plus the initial value of every family
    // member (deduplicated).
    let mut mus: Vec<Vec<f64>> = vec![vec![0.0; sys.input_dim()]];
    for sig in grid.build_inputs(sys.input_dim())? {
        let val = sig.value_at(0.0).to_vec();
        if !mus.iter().any(|m| m == &val) {
            mus.push(val);
        }
    }

    let mut outcomes = Vec::new();
    let mut fbuf = vec![0.0; sys.state_dim()];
    for xi in &states {
        if euclidean_norm(xi) == 0.0 {
            continue;
        }
        let vx = v.value(xi);
        let gradient = v.gradient_at(xi);
        for mu in &mus {
            if vx < chi.evaluate(euclidean_norm(mu))? {
                continue;
            }
            sys.dynamics(xi, mu, &mut fbuf);
            let derivative: f64 = gradient.iter().zip(fbuf.iter()).map(|(g, f)| g * f).sum();
            let margin = -derivative;
            let witness = if margin < 0.0 {
                Some(Witness {
                    xi: xi.clone(),
                    input: InputSignal::constant(mu.clone())
                        .expect("constant value signal")
                        .to_json_doc(),
                    t: 0.0,
                })
            } else {
                None
            };
            outcomes.push(PairOutcome { min_margin: margin, first_violation: witness });
        }
    }
    Ok(EstimateReport::from_outcomes(
        PropertyKind::LyapDecrease,
        grid.descriptor(&format!("{}:LYAP_DECREASE", sys.name())),
        outcomes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{build_textbook_system, SystemId};
    use std::sync::Arc as StdArc;

    fn sqrt2() -> f64 {
        std::f64::consts::SQRT_2
    }

    fn small_grid(seed: u64) -> SampleGrid {
        SampleGrid::new(vec![1.0, 3.0], 6, 8.0, 1e-3, seed)
    }

    #[test]
    fn sys12_output_lagrange_holds() {
        let sys = build_textbook_system(SystemId::Sys12).unwrap();
        let kind = EstimateKind::OutputLagrange {
            sigma1: ComparisonFunction::identity(),
            sigma2: ComparisonFunction::linear(sqrt2()).unwrap(),
        };
        let report = verify_estimate(&sys, &kind, &small_grid(11)).unwrap();
        assert!(report.holds(), "margin {}", report.worst_margin);
        assert!(report.worst_margin >= 0.0);
        assert!(report.witness.is_none());
    }

    #[test]
    fn sys11_output_lagrange_violated_with_witness() {
        let sys = build_textbook_system(SystemId::Sys11).unwrap();
        let kind = EstimateKind::OutputLagrange {
            sigma1: ComparisonFunction::identity(),
            sigma2: ComparisonFunction::identity(),
        };
        let report = verify_estimate(&sys, &kind, &small_grid(11)).unwrap();
        assert_eq!(report.verdict, Verdict::Violated);
        assert!(report.worst_margin < 0.0);
        let witness = report.witness.expect("violation carries a witness");
        // Soundness: replaying the witness violates the bound by at least
        // the recorded margin (up to step tolerance).
        let traj = simulate(
            &sys,
            &witness.xi,
            &InputSignal::from_json(&witness.input.to_string()).unwrap(),
            8.0,
            1e-3,
            SimOptions::default(),
        )
        .unwrap();
        let h0 = traj.output_norm(0);
        let u_norm =
            InputSignal::from_json(&witness.input.to_string()).unwrap().sup_norm(Some(8.0));
        let bound = h0.max(u_norm);
        let peak = traj.max_output_norm();
        assert!(peak - bound >= -report.worst_margin - 1e-9);
    }

    #[test]
    fn zero_system_satisfies_everything() {
        let sys = ControlSystem::new(
            "zero",
            2,
            1,
            1,
            StdArc::new(|_x: &[f64], _u: &[f64], dx: &mut [f64]| {
                dx[0] = 0.0;
                dx[1] = 0.0;
            }),
            StdArc::new(|_x: &[f64], y: &mut [f64]| y[0] = 0.0),
        )
        .unwrap();
        let grid = small_grid(3);
        let kinds = [
            EstimateKind::Ios {
                beta: KlSurface::exponential(1.0, 1.0).unwrap(),
                gamma: ComparisonFunction::identity(),
            },
            EstimateKind::OutputLagrange {
                sigma1: ComparisonFunction::identity(),
                sigma2: ComparisonFunction::identity(),
            },
            EstimateKind::Ubibs { sigma: ComparisonFunction::linear(2.0).unwrap() },
        ];
        for kind in kinds {
            let report = verify_estimate(&sys, &kind, &grid).unwrap();
            assert!(report.holds());
            assert!(report.worst_margin >= 0.0);
        }
    }

    #[test]
    fn determinism_bit_for_bit() {
        let sys = build_textbook_system(SystemId::Sys12).unwrap();
        let kind = EstimateKind::OutputLagrange {
            sigma1: ComparisonFunction::identity(),
            sigma2: ComparisonFunction::linear(sqrt2()).unwrap(),
        };
        let a = verify_estimate(&sys, &kind, &small_grid(99)).unwrap();
        let b = verify_estimate(&sys, &kind, &small_grid(99)).unwrap();
        assert_eq!(
            crate::jsonio::canonical_json(&a).unwrap(),
            crate::jsonio::canonical_json(&b).unwrap()
        );
    }

    #[test]
    fn larger_input_family_never_raises_margin() {
        let sys = build_textbook_system(SystemId::Sys12).unwrap();
        let kind = EstimateKind::OutputLagrange {
            sigma1: ComparisonFunction::identity(),
            sigma2: ComparisonFunction::linear(sqrt2()).unwrap(),
        };
        let small = small_grid(5).with_inputs(InputFamily::Generated {
            amplitude_levels: vec![0.5, 1.0],
            segments: 4,
            random_signals: 4,
        });
        let large = small_grid(5).with_inputs(InputFamily::Generated {
            amplitude_levels: vec![0.5, 1.0],
            segments: 4,
            random_signals: 12, // same stream, extended
        });
        let ra = verify_estimate(&sys, &kind, &small).unwrap();
        let rb = verify_estimate(&sys, &kind, &large).unwrap();
        assert!(rb.worst_margin <= ra.worst_margin + 1e-15);
    }

    #[test]
    fn ros_holds_for_contracting_spiral() {
        let sys = build_textbook_system(SystemId::Sys29).unwrap();
        let beta = KlSurface::exponential(1.0, 0.5).unwrap();
        let grid = SampleGrid::new(vec![1.0, 10.0], 4, 10.0, 1e-3, 7).with_inputs(
            InputFamily::Generated {
                amplitude_levels: vec![1.0],
                segments: 4,
                random_signals: 3,
            },
        );
        let report = verify_ros(
            &sys,
            &ComparisonFunction::identity(),
            &beta,
            &grid,
            &RemarkProbe::default(),
        )
        .unwrap();
        assert!(report.ros.holds(), "ros margin {}", report.ros.worst_margin);
        assert!(report.p1.holds(), "p1 margin {}", report.p1.worst_margin);
        assert!(report.p2.holds(), "p2 margin {}", report.p2.worst_margin);
    }

    #[test]
    fn ros_zero_state_margin_zero_never_violated() {
        let sys = build_textbook_system(SystemId::Sys29).unwrap();
        let beta = KlSurface::exponential(1.0, 0.5).unwrap();
        let grid = SampleGrid::new(vec![0.0], 1, 3.0, 1e-3, 7).with_inputs(
            InputFamily::Generated { amplitude_levels: vec![1.0], segments: 2, random_signals: 1 },
        );
        let report = verify_ros(
            &sys,
            &ComparisonFunction::identity(),
            &beta,
            &grid,
            &RemarkProbe { epsilons: vec![] },
        )
        .unwrap();
        assert!(report.ros.holds());
        assert_eq!(report.ros.worst_margin, 0.0);
    }

    #[test]
    fn ros_reports_incompleteness_for_expander() {
        let sys = ControlSystem::new(
            "expander",
            1,
            1,
            1,
            StdArc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = x[0]),
            StdArc::new(|x: &[f64], y: &mut [f64]| y[0] = x[0]),
        )
        .unwrap();
        let beta = KlSurface::exponential(1.0, 1.0).unwrap();
        let grid = SampleGrid::new(vec![1.0], 2, 40.0, 1e-2, 1).with_inputs(
            InputFamily::Generated { amplitude_levels: vec![1.0], segments: 2, random_signals: 0 },
        );
        match verify_ros(
            &sys,
            &ComparisonFunction::identity(),
            &beta,
            &grid,
            &RemarkProbe { epsilons: vec![] },
        ) {
            Err(EstimatorError::ForwardCompleteness { .. }) => {}
            other => panic!("expected forward-completeness failure, got {other:?}"),
        }
    }

    #[test]
    fn empirical_beta_zero_system_is_zero() {
        let sys = ControlSystem::new(
            "zero",
            1,
            1,
            1,
            StdArc::new(|_x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = 0.0),
            StdArc::new(|_x: &[f64], y: &mut [f64]| y[0] = 0.0),
        )
        .unwrap();
        let beta = fit_empirical_beta(&sys, &small_grid(2)).unwrap();
        assert_eq!(beta.evaluate(3.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn empirical_beta_dominates_known_solution() {
        // The rotation system's zero-input output from (1, 0) is
        // e^{-t} |sin t|; the unit-radius envelope must dominate it.
        let sys = build_textbook_system(SystemId::Sys11).unwrap();
        let grid = SampleGrid::new(vec![1.0], 6, 8.0, 1e-3, 4);
        let beta = fit_empirical_beta(&sys, &grid).unwrap();
        for j in 0..40 {
            let t = 8.0 * j as f64 / 40.0;
            let known = (-t).exp() * t.sin().abs();
            let env = beta.evaluate(1.0, t).unwrap();
            assert!(env >= known - 1e-9, "envelope {env} < closed form {known} at t = {t}");
        }
        // Nondecreasing in r by construction.
        assert!(beta.evaluate(0.5, 1.0).unwrap() <= beta.evaluate(1.0, 1.0).unwrap() + 1e-15);
    }

    #[test]
    fn empirical_beta_passes_its_own_ios_check() {
        let sys = build_textbook_system(SystemId::Sys11).unwrap();
        let grid = SampleGrid::new(vec![1.0, 2.0], 6, 8.0, 1e-3, 4)
            .with_inputs(InputFamily::Explicit(vec![InputSignal::zero(1)]));
        let beta = fit_empirical_beta(&sys, &grid).unwrap();
        let kind = EstimateKind::Ios { beta, gamma: ComparisonFunction::identity() };
        let report = verify_estimate(&sys, &kind, &grid).unwrap();
        assert!(report.holds(), "margin {}", report.worst_margin);
        assert!(report.worst_margin >= 0.0);
    }

    #[test]
    fn ol_violation_search_finds_rotation_witness() {
        let sys = build_textbook_system(SystemId::Sys11).unwrap();
        let grid = SampleGrid::new(vec![1.0], 6, 8.0, 1e-3, 4);
        match find_estimate_violation(&sys, ViolationKind::OutputLagrange, &grid).unwrap() {
            Some(ViolationWitness::OutputLagrange { xi, peak_output, .. }) => {
                assert_eq!(xi, vec![1.0, 0.0]);
                // max_t e^{-t} |sin t| = e^{-pi/4} / sqrt(2)
                let expected = (-std::f64::consts::FRAC_PI_4).exp() / sqrt2();
                assert!(
                    (peak_output - expected).abs() < 1e-4,
                    "peak {peak_output} vs {expected}"
                );
            }
            other => panic!("expected an output-Lagrange witness, got {other:?}"),
        }
    }

    #[test]
    fn sios_violation_search_finds_half_time_spread() {
        let sys = build_textbook_system(SystemId::Sys12).unwrap();
        let grid = SampleGrid::new(vec![1.0], 4, 40.0, 1e-3, 4)
            .with_extra_states(vec![vec![0.0, 1.0], vec![3.0, 1.0], vec![10.0, 1.0]]);
        match find_estimate_violation(&sys, ViolationKind::Sios, &grid).unwrap() {
            Some(ViolationWitness::Sios { half_time_slow, half_time_fast, factor, .. }) => {
                // Half-times are (1 + a^2) ln 2 / 2.
                let ln2half = std::f64::consts::LN_2 / 2.0;
                assert!((half_time_fast - ln2half).abs() < 0.01 * ln2half);
                assert!(
                    (half_time_slow - 101.0 * ln2half).abs() < 0.01 * (101.0 * ln2half),
                    "slow half-time {half_time_slow}"
                );
                assert!(factor > 4.0);
            }
            other => panic!("expected a SIOS witness, got {other:?}"),
        }
    }

    #[test]
    fn stable_scalar_system_has_no_witnesses() {
        let sys = ControlSystem::new(
            "decay",
            1,
            1,
            1,
            StdArc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = -x[0]),
            StdArc::new(|x: &[f64], y: &mut [f64]| y[0] = x[0]),
        )
        .unwrap();
        let grid = SampleGrid::new(vec![1.0, 2.0], 4, 10.0, 1e-3, 4);
        assert!(find_estimate_violation(&sys, ViolationKind::OutputLagrange, &grid)
            .unwrap()
            .is_none());
        assert!(find_estimate_violation(&sys, ViolationKind::Sios, &grid).unwrap().is_none());
    }

    #[test]
    fn lyapunov_checks() {
        use nalgebra::DMatrix;
        let grid = small_grid(6);

        // x2^2 / 2 decreases for the state-dependent-rate system whenever
        // chi(|mu|) = mu^2 is below it.
        let sys12 = build_textbook_system(SystemId::Sys12).unwrap();
        let v = ScalarField::quadratic(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]));
        let chi = ComparisonFunction::new(
            (0..=40)
                .map(|i| {
                    let s = i as f64 * 0.25;
                    (s, s * s)
                })
                .collect(),
            crate::compfn::FunctionClass::KInfinity,
            "square",
        )
        .unwrap();
        let report = lyapunov_decrease_check(&sys12, &v, &chi, &grid).unwrap();
        assert!(report.holds(), "margin {}", report.worst_margin);

        // Scalar stable system with V = x^2.
        let stable = ControlSystem::new(
            "stable",
            1,
            1,
            1,
            StdArc::new(|x: &[f64], u: &[f64], dx: &mut [f64]| dx[0] = -x[0] + u[0]),
            StdArc::new(|x: &[f64], y: &mut [f64]| y[0] = x[0]),
        )
        .unwrap();
        let v1 = ScalarField::quadratic(DMatrix::from_row_slice(1, 1, &[1.0]));
        let report = lyapunov_decrease_check(&stable, &v1, &chi, &grid).unwrap();
        assert!(report.holds(), "margin {}", report.worst_margin);

        // Expanding system is always violated.
        let unstable = ControlSystem::new(
            "unstable",
            1,
            1,
            1,
            StdArc::new(|x: &[f64], _u: &[f64], dx: &mut [f64]| dx[0] = x[0]),
            StdArc::new(|x: &[f64], y: &mut [f64]| y[0] = x[0]),
        )
        .unwrap();
        let report = lyapunov_decrease_check(&unstable, &v1, &chi, &grid).unwrap();
        assert_eq!(report.verdict, Verdict::Violated);
        assert!(report.witness.is_some());
    }

    #[test]
    fn lyapunov_gradient_mismatch_detected() {
        let sys = build_textbook_system(SystemId::Sys12).unwrap();
        let v = ScalarField::with_gradient(
            Arc::new(|x: &[f64]| x[1] * x[1] / 2.0),
            Arc::new(|x: &[f64]| vec![0.0, 2.0 * x[1]]), // wrong by a factor 2
        );
        let chi = ComparisonFunction::identity();
        match lyapunov_decrease_check(&sys, &v, &chi, &small_grid(6)) {
            Err(EstimatorError::GradientMismatch { .. }) => {}
            other => panic!("expected gradient mismatch, got {other:?}"),
        }
    }
}
