//! Comparison-function algebra: class-K / class-K∞ gains, KL decay
//! surfaces, settling-time maps and the time-dilation construction.
//!
//! Gains are piecewise-linear monotone tables rather than symbolic
//! expressions. Smoothness requirements from the underlying theory are
//! relaxed to local Lipschitz continuity, which is all that evaluation
//! inside integrators and grid verifiers needs. Strictness of the
//! monotone data is checked at the knots on ingestion; a table with a
//! repeated value at adjacent knots is rejected rather than repaired.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Relative tolerance used when deduplicating knot arguments.
const KNOT_DEDUP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CompFnError {
    #[error("comparison function needs at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("first knot must be exactly (0, 0), got ({0}, {1})")]
    NonzeroOrigin(f64, f64),
    #[error("knot arguments must be strictly increasing: args[{0}] = {1} >= args[{2}] = {3}")]
    ArgsNotIncreasing(usize, f64, usize, f64),
    #[error("knot values must be strictly increasing: values[{0}] = {1} >= values[{2}] = {3}")]
    ValuesNotIncreasing(usize, f64, usize, f64),
    #[error("non-finite or negative knot entry ({0}, {1})")]
    BadKnot(f64, f64),
    #[error("argument must be nonnegative, got {0}")]
    NegativeArgument(f64),
    #[error("value {value} is above the range of this bounded class-K function (sup = {sup})")]
    AboveRange { value: f64, sup: f64 },
    #[error("KL surface: {0}")]
    Surface(String),
    #[error(
        "beta({r}, t) never drops strictly below {s} within horizon {horizon}; cannot settle"
    )]
    Horizon { r: f64, s: f64, horizon: f64 },
    #[error("settling time needs r >= 0 and s > 0, got r = {0}, s = {1}")]
    BadSettlingQuery(f64, f64),
    #[error(
        "time-dilation construction violated at (s, r, t) = ({s}, {r}, {t}): \
         min(sigma(s), beta(r, t)) = {lhs} > beta_hat = {rhs}"
    )]
    DilationViolated { s: f64, r: f64, t: f64, lhs: f64, rhs: f64 },
}

/// Tag distinguishing bounded class-K tables from unbounded class-K∞ ones.
///
/// A `K` table saturates at its last knot value (bounded range); a `KInfinity`
/// table extrapolates past the last knot with the final segment slope, which
/// strict monotonicity keeps positive, so the function is onto `[0, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FunctionClass {
    K,
    KInfinity,
}

/// A class-K comparison function as a strictly increasing piecewise-linear
/// knot table anchored at (0, 0).
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonFunction {
    args: Vec<f64>,
    values: Vec<f64>,
    class: FunctionClass,
    description: String,
}

impl ComparisonFunction {
    pub fn new(
        knots: Vec<(f64, f64)>,
        class: FunctionClass,
        description: impl Into<String>,
    ) -> Result<Self, CompFnError> {
        if knots.len() < 2 {
            return Err(CompFnError::TooFewKnots(knots.len()));
        }
        if knots[0].0 != 0.0 || knots[0].1 != 0.0 {
            return Err(CompFnError::NonzeroOrigin(knots[0].0, knots[0].1));
        }
        for &(a, v) in &knots {
            if !a.is_finite() || !v.is_finite() || a < 0.0 || v < 0.0 {
                return Err(CompFnError::BadKnot(a, v));
            }
        }
        for i in 1..knots.len() {
            if knots[i].0 <= knots[i - 1].0 {
                return Err(CompFnError::ArgsNotIncreasing(
                    i - 1,
                    knots[i - 1].0,
                    i,
                    knots[i].0,
                ));
            }
            if knots[i].1 <= knots[i - 1].1 {
                return Err(CompFnError::ValuesNotIncreasing(
                    i - 1,
                    knots[i - 1].1,
                    i,
                    knots[i].1,
                ));
            }
        }
        let (args, values) = knots.into_iter().unzip();
        Ok(Self { args, values, class, description: description.into() })
    }

    /// The identity gain, exact for every argument.
    pub fn identity() -> Self {
        Self::new(vec![(0.0, 0.0), (1.0, 1.0)], FunctionClass::KInfinity, "identity")
            .expect("identity table is valid")
    }

    /// The linear gain `s -> c * s` for `c > 0`, exact for every argument.
    pub fn linear(c: f64) -> Result<Self, CompFnError> {
        Self::new(
            vec![(0.0, 0.0), (1.0, c)],
            FunctionClass::KInfinity,
            format!("linear gain {c}"),
        )
    }

    pub fn class(&self) -> FunctionClass {
        self.class
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.args.iter().copied().zip(self.values.iter().copied())
    }

    pub fn knot_args(&self) -> &[f64] {
        &self.args
    }

    /// Retag as class K∞, turning on linear extrapolation past the last knot.
    pub fn promote_to_k_infinity(mut self) -> Self {
        self.class = FunctionClass::KInfinity;
        self
    }

    /// Largest attained value; the supremum for bounded class-K tables.
    pub fn sup(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }

    fn last_slope(&self) -> f64 {
        let n = self.args.len();
        (self.values[n - 1] - self.values[n - 2]) / (self.args[n - 1] - self.args[n - 2])
    }

    /// Piecewise-linear evaluation; exactly 0 at 0.
    pub fn evaluate(&self, s: f64) -> Result<f64, CompFnError> {
        if !(s >= 0.0) {
            return Err(CompFnError::NegativeArgument(s));
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        let last = *self.args.last().expect("nonempty");
        if s >= last {
            return Ok(match self.class {
                FunctionClass::K => self.sup(),
                FunctionClass::KInfinity => self.sup() + self.last_slope() * (s - last),
            });
        }
        let i = match self.args.binary_search_by(|a| a.partial_cmp(&s).expect("finite")) {
            Ok(i) => return Ok(self.values[i]),
            Err(i) => i, // s lies in (args[i-1], args[i])
        };
        let (a0, a1) = (self.args[i - 1], self.args[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        Ok(v0 + (v1 - v0) * (s - a0) / (a1 - a0))
    }

    /// Inverse by linear inverse interpolation; `inverse(evaluate(s)) = s`
    /// at the knots up to rounding.
    pub fn inverse(&self, v: f64) -> Result<f64, CompFnError> {
        if !(v >= 0.0) {
            return Err(CompFnError::NegativeArgument(v));
        }
        if v == 0.0 {
            return Ok(0.0);
        }
        let sup = self.sup();
        if v >= sup {
            return match self.class {
                FunctionClass::K => {
                    if v > sup {
                        Err(CompFnError::AboveRange { value: v, sup })
                    } else {
                        Ok(*self.args.last().expect("nonempty"))
                    }
                }
                FunctionClass::KInfinity => {
                    Ok(self.args.last().expect("nonempty") + (v - sup) / self.last_slope())
                }
            };
        }
        let i = match self.values.binary_search_by(|x| x.partial_cmp(&v).expect("finite")) {
            Ok(i) => return Ok(self.args[i]),
            Err(i) => i,
        };
        let (a0, a1) = (self.args[i - 1], self.args[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        Ok(a0 + (a1 - a0) * (v - v0) / (v1 - v0))
    }

    /// Composition `outer ∘ inner` with an exact knot set: the result breaks
    /// only at inner's knot arguments and at preimages of outer's knot
    /// arguments, so the composition of the two tables is represented
    /// without interpolation error.
    pub fn compose(outer: &Self, inner: &Self) -> Result<Self, CompFnError> {
        let mut args: Vec<f64> = inner.args.clone();
        for &a in &outer.args {
            if a == 0.0 {
                continue;
            }
            match inner.class {
                FunctionClass::KInfinity => args.push(inner.inverse(a)?),
                FunctionClass::K => {
                    if a <= inner.sup() {
                        args.push(inner.inverse(a)?);
                    }
                }
            }
        }
        args.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        args.dedup_by(|a, b| (*a - *b).abs() <= KNOT_DEDUP_TOL * a.abs().max(b.abs()).max(1.0));
        let mut knots = Vec::with_capacity(args.len());
        for s in args {
            knots.push((s, outer.evaluate(inner.evaluate(s)?)?));
        }
        let class = match (outer.class, inner.class) {
            (FunctionClass::KInfinity, FunctionClass::KInfinity) => FunctionClass::KInfinity,
            _ => FunctionClass::K,
        };
        Self::new(
            knots,
            class,
            format!("({}) o ({})", outer.description, inner.description),
        )
    }

    /// Pointwise maximum of two tables, with crossing points inserted so the
    /// result is exact. Used for the `max(sigma1, identity)` normalization.
    pub fn pointwise_max(f: &Self, g: &Self) -> Result<Self, CompFnError> {
        let horizon = {
            let fa = *f.args.last().expect("nonempty");
            let ga = *g.args.last().expect("nonempty");
            10.0 * fa.max(ga).max(1.0)
        };
        let mut args: Vec<f64> = f.args.iter().chain(g.args.iter()).copied().collect();
        args.push(horizon);
        args.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        args.dedup_by(|a, b| (*a - *b).abs() <= KNOT_DEDUP_TOL * a.abs().max(b.abs()).max(1.0));
        // Insert crossings of the two piecewise-linear graphs.
        let mut all = Vec::new();
        for w in args.windows(2) {
            let (a, b) = (w[0], w[1]);
            all.push(a);
            let da = f.evaluate(a)? - g.evaluate(a)?;
            let db = f.evaluate(b)? - g.evaluate(b)?;
            if da * db < 0.0 {
                let t = da / (da - db);
                all.push(a + t * (b - a));
            }
        }
        all.push(*args.last().expect("nonempty"));
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        all.dedup_by(|a, b| (*a - *b).abs() <= KNOT_DEDUP_TOL * a.abs().max(b.abs()).max(1.0));
        let mut knots = Vec::with_capacity(all.len());
        for s in all {
            knots.push((s, f.evaluate(s)?.max(g.evaluate(s)?)));
        }
        let class = match (f.class, g.class) {
            (FunctionClass::K, FunctionClass::K) => FunctionClass::K,
            _ => FunctionClass::KInfinity,
        };
        Self::new(knots, class, format!("max({}, {})", f.description, g.description))
    }
}

fn check_grid_axis(name: &str, axis: &[f64]) -> Result<(), CompFnError> {
    if axis.is_empty() {
        return Err(CompFnError::Surface(format!("{name} grid is empty")));
    }
    for w in axis.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CompFnError::Surface(format!(
                "{name} grid must strictly increase: {} then {}",
                w[0], w[1]
            )));
        }
    }
    if axis[0] < 0.0 || !axis.iter().all(|x| x.is_finite()) {
        return Err(CompFnError::Surface(format!("{name} grid must be finite and nonnegative")));
    }
    Ok(())
}

/// A class-KL decay surface `beta(r, t)`: nondecreasing in the size argument
/// `r`, nonincreasing in time and decaying toward 0.
///
/// Two representations are supported: the exponential family
/// `beta(r, t) = r * a * exp(-b t)` and a rectangular grid with bilinear
/// interpolation, monotonized on ingestion. Grid surfaces extrapolate
/// linearly in `r` and decay geometrically past the last time column.
#[derive(Clone, Debug, PartialEq)]
pub enum KlSurface {
    Exponential { a: f64, b: f64 },
    Grid(KlGrid),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlGrid {
    r_grid: Vec<f64>,
    t_grid: Vec<f64>,
    /// `values[i][j] = beta(r_grid[i], t_grid[j])`, row-major in r.
    values: Vec<Vec<f64>>,
    /// Decay level certified at the last time column.
    floor: f64,
    /// Geometric tail rate per unit time past the last column.
    tail_rate: f64,
}

impl KlSurface {
    pub fn exponential(a: f64, b: f64) -> Result<Self, CompFnError> {
        if !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(CompFnError::Surface(format!(
                "exponential family needs a > 0 and b > 0, got a = {a}, b = {b}"
            )));
        }
        Ok(Self::Exponential { a, b })
    }

    /// Ingest a rectangular grid, monotonizing along both axes: a running
    /// max from the right in `t` (upper envelope, nonincreasing) and a
    /// running max upward in `r` (nondecreasing).
    pub fn from_grid(
        r_grid: Vec<f64>,
        t_grid: Vec<f64>,
        mut values: Vec<Vec<f64>>,
        floor: Option<f64>,
    ) -> Result<Self, CompFnError> {
        check_grid_axis("r", &r_grid)?;
        check_grid_axis("t", &t_grid)?;
        if t_grid[0] != 0.0 {
            return Err(CompFnError::Surface("t grid must start at 0".into()));
        }
        if values.len() != r_grid.len() || values.iter().any(|row| row.len() != t_grid.len()) {
            return Err(CompFnError::Surface("value matrix shape mismatch".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CompFnError::Surface("values must be finite and nonnegative".into()));
        }
        for row in values.iter_mut() {
            for j in (0..row.len().saturating_sub(1)).rev() {
                row[j] = row[j].max(row[j + 1]);
            }
        }
        for i in 1..values.len() {
            for j in 0..t_grid.len() {
                values[i][j] = values[i][j].max(values[i - 1][j]);
            }
        }
        if r_grid[0] == 0.0 && values[0].iter().any(|v| *v != 0.0) {
            return Err(CompFnError::Surface("row at r = 0 must be identically 0".into()));
        }
        let last = t_grid.len() - 1;
        let observed_floor = values.iter().map(|row| row[last]).fold(0.0, f64::max);
        let floor = match floor {
            Some(fl) => {
                if observed_floor > fl {
                    return Err(CompFnError::Surface(format!(
                        "last column max {observed_floor} exceeds requested floor {fl}"
                    )));
                }
                fl
            }
            None => observed_floor,
        };
        // Geometric tail: the slowest decay rate observed across the last
        // two columns keeps the extrapolation an upper envelope.
        let tail_rate = if t_grid.len() >= 2 {
            let dt = t_grid[last] - t_grid[last - 1];
            let mut rate = f64::INFINITY;
            for row in &values {
                if row[last] > 0.0 && row[last - 1] > row[last] {
                    rate = rate.min((row[last - 1] / row[last]).ln() / dt);
                }
            }
            if rate.is_finite() {
                rate
            } else {
                std::f64::consts::LN_2 / dt.max(f64::MIN_POSITIVE)
            }
        } else {
            std::f64::consts::LN_2
        };
        Ok(Self::Grid(KlGrid { r_grid, t_grid, values, floor, tail_rate }))
    }

    pub fn floor(&self) -> f64 {
        match self {
            Self::Exponential { .. } => 0.0,
            Self::Grid(g) => g.floor,
        }
    }

    /// `beta(r, t)`; `beta(0, t) = 0` for all `t`.
    pub fn evaluate(&self, r: f64, t: f64) -> Result<f64, CompFnError> {
        if !(r >= 0.0) {
            return Err(CompFnError::NegativeArgument(r));
        }
        if !(t >= 0.0) {
            return Err(CompFnError::NegativeArgument(t));
        }
        match self {
            Self::Exponential { a, b } => Ok(r * a * (-b * t).exp()),
            Self::Grid(g) => Ok(g.evaluate(r, t)),
        }
    }

    /// The initial-overshoot gain `beta0(r) = beta(r, 0)`.
    pub fn beta0(&self, r: f64) -> Result<f64, CompFnError> {
        self.evaluate(r, 0.0)
    }
}

impl KlGrid {
    fn column_value(&self, row: &[f64], t: f64) -> f64 {
        let tg = &self.t_grid;
        let last = tg.len() - 1;
        if t >= tg[last] {
            return row[last] * (-(t - tg[last]) * self.tail_rate).exp();
        }
        let j = tg.partition_point(|x| *x <= t);
        // t in [tg[j-1], tg[j])
        let (t0, t1) = (tg[j - 1], tg[j]);
        let w = (t - t0) / (t1 - t0);
        row[j - 1] + (row[j] - row[j - 1]) * w
    }

    fn evaluate(&self, r: f64, t: f64) -> f64 {
        let rg = &self.r_grid;
        let n = rg.len();
        let row_at = |i: usize| self.column_value(&self.values[i], t);
        if n == 1 {
            // Single row: linear in r through the origin.
            let base = row_at(0);
            return if rg[0] == 0.0 {
                if r == 0.0 {
                    0.0
                } else {
                    base.max(0.0) // row at 0 is all zeros by validation
                }
            } else {
                base * (r / rg[0])
            };
        }
        if r <= rg[0] {
            if rg[0] == 0.0 {
                return row_at(0);
            }
            // Linear ramp from beta(0, t) = 0 up to the first row.
            return row_at(0) * (r / rg[0]);
        }
        if r >= rg[n - 1] {
            let slope = (row_at(n - 1) - row_at(n - 2)) / (rg[n - 1] - rg[n - 2]);
            return row_at(n - 1) + slope.max(0.0) * (r - rg[n - 1]);
        }
        let i = rg.partition_point(|x| *x <= r);
        let (r0, r1) = (rg[i - 1], rg[i]);
        let w = (r - r0) / (r1 - r0);
        let (v0, v1) = (row_at(i - 1), row_at(i));
        v0 + (v1 - v0) * w
    }

    pub fn r_grid(&self) -> &[f64] {
        &self.r_grid
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// The settling-time map `T_r(s)` attached to a KL surface: past `T_r(s)`
/// the surface stays strictly below `s`.
///
/// `T_hat(r, s) = inf { t : beta(r, t) < s }` is located by exponential
/// bracketing plus bisection (absolute tolerance in t), returning the
/// strict side of the bracket so that `beta(r, T_hat) < s` already holds;
/// the final map adds `r / (1 + s)`, which makes it strictly decreasing
/// in `s`, strictly increasing in `r` and keeps the strict bound.
#[derive(Clone, Debug)]
pub struct SettlingTimeMap {
    beta: KlSurface,
    max_horizon: f64,
    tol: f64,
}

impl SettlingTimeMap {
    pub fn new(beta: KlSurface) -> Self {
        Self { beta, max_horizon: 1e9, tol: 1e-9 }
    }

    pub fn with_horizon(mut self, max_horizon: f64) -> Self {
        self.max_horizon = max_horizon;
        self
    }

    pub fn beta(&self) -> &KlSurface {
        &self.beta
    }

    /// `T_hat_r(s)` by bisection on `beta(r, t) < s`.
    pub fn t_hat(&self, r: f64, s: f64) -> Result<f64, CompFnError> {
        if !(r >= 0.0) || !(s > 0.0) {
            return Err(CompFnError::BadSettlingQuery(r, s));
        }
        if self.beta.evaluate(r, 0.0)? < s {
            return Ok(0.0);
        }
        let mut hi = self.tol.max(1e-6);
        while self.beta.evaluate(r, hi)? >= s {
            hi *= 2.0;
            if hi > self.max_horizon {
                return Err(CompFnError::Horizon { r, s, horizon: self.max_horizon });
            }
        }
        let mut lo = hi / 2.0;
        while hi - lo > self.tol {
            let mid = 0.5 * (lo + hi);
            if self.beta.evaluate(r, mid)? < s {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    /// `T_r(s) = T_hat_r(s) + r / (1 + s)`; `T_0(s) = 0`.
    pub fn evaluate(&self, r: f64, s: f64) -> Result<f64, CompFnError> {
        Ok(self.t_hat(r, s)? + r / (1.0 + s))
    }

    /// Evaluate on a rectangular query grid with monotone regularization:
    /// a running min along increasing `s` and a running max along
    /// increasing `r` applied to `T_hat` before the `r / (1 + s)` term is
    /// added. Both sweeps preserve the strict settling bound.
    pub fn evaluate_grid(&self, rs: &[f64], ss: &[f64]) -> Result<Vec<Vec<f64>>, CompFnError> {
        check_grid_axis("r", rs)?;
        check_grid_axis("s", ss)?;
        let mut t_hat = Vec::with_capacity(rs.len());
        for &r in rs {
            let mut row = Vec::with_capacity(ss.len());
            for &s in ss {
                row.push(self.t_hat(r, s)?);
            }
            for j in 1..row.len() {
                row[j] = row[j].min(row[j - 1]);
            }
            t_hat.push(row);
        }
        for i in 1..rs.len() {
            for j in 0..ss.len() {
                t_hat[i][j] = t_hat[i][j].max(t_hat[i - 1][j]);
            }
        }
        for (i, &r) in rs.iter().enumerate() {
            for (j, &s) in ss.iter().enumerate() {
                t_hat[i][j] += r / (1.0 + s);
            }
        }
        Ok(t_hat)
    }
}

/// Options for [`kl_time_dilation`].
#[derive(Clone, Debug)]
pub struct DilationOptions {
    /// Radii used both to build the sup and to verify the inequality.
    pub r_grid: Vec<f64>,
    /// Output-size samples added to the constructed surface's s-axis.
    pub s_grid: Vec<f64>,
    /// Dilated-time knots of the constructed surface.
    pub tau_grid: Vec<f64>,
    /// Verification grid sizes over (s, r, t).
    pub verify_dims: (usize, usize, usize),
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

impl Default for DilationOptions {
    fn default() -> Self {
        Self {
            r_grid: log_spaced(1e-6, 1e6, 37),
            s_grid: log_spaced(1e-6, 1e6, 25),
            tau_grid: Vec::new(), // derived from the surface when empty
            verify_dims: (20, 20, 20),
        }
    }
}

/// Build `(beta_hat, gamma_hat)` with
/// `min(sigma(s), beta(r, t)) <= beta_hat(s, t / (1 + gamma_hat(r)))`
/// verified on a grid over `(s, r, t)`.
///
/// `gamma_hat(r) = T_r(1 / (1 + r))` comes from the settling-time map, and
/// `beta_hat(s, tau)` is the grid sup of `min(sigma(s), beta(r, t))` over
/// `t >= tau (1 + gamma_hat(r))`, which for a monotone surface reduces to
/// `max_r min(sigma(s), beta(r, tau (1 + gamma_hat(r))))`. Surface columns
/// are lagged by one tau knot so bilinear interpolation stays an upper
/// envelope of the continuous sup between knots.
pub fn kl_time_dilation(
    sigma: &ComparisonFunction,
    beta: &KlSurface,
    opts: &DilationOptions,
) -> Result<(KlSurface, ComparisonFunction), CompFnError> {
    let settling = SettlingTimeMap::new(beta.clone());
    let rs = &opts.r_grid;
    check_grid_axis("r", rs)?;

    // gamma_hat tabulated on the r grid.
    let mut gamma_knots = vec![(0.0, 0.0)];
    for &r in rs {
        gamma_knots.push((r, settling.evaluate(r, 1.0 / (1.0 + r))?));
    }
    let gamma_hat = ComparisonFunction::new(
        gamma_knots,
        FunctionClass::KInfinity,
        "time-dilation gamma_hat",
    )?;

    // Dilated-time knots: deep enough that every row has decayed to the
    // stored floor by the right edge.
    let tau_grid: Vec<f64> = if opts.tau_grid.is_empty() {
        let mut tau_max: f64 = 1.0;
        let target = 1e-6;
        for &r in rs {
            match settling.t_hat(r, target) {
                Ok(t) => tau_max = tau_max.max(t),
                Err(CompFnError::Horizon { .. }) => {
                    return Err(CompFnError::Surface(
                        "surface decays too slowly for default dilation tau grid".into(),
                    ))
                }
                Err(e) => return Err(e),
            }
        }
        let mut g = vec![0.0];
        g.extend(log_spaced(1e-4, tau_max.max(1e-3), 79));
        g
    } else {
        opts.tau_grid.clone()
    };

    // G(tau) = max_r beta(r, tau (1 + gamma_hat(r))), then lag by one knot.
    let mut g_vals = Vec::with_capacity(tau_grid.len());
    for &tau in &tau_grid {
        let mut g: f64 = 0.0;
        for &r in rs {
            g = g.max(beta.evaluate(r, tau * (1.0 + gamma_hat.evaluate(r)?))?);
        }
        g_vals.push(g);
    }
    let g_lagged: Vec<f64> = (0..g_vals.len())
        .map(|j| g_vals[j.saturating_sub(1)])
        .collect();

    // s-axis: requested samples, sigma's own knots, and the preimages of the
    // lagged sup levels so min(sigma(s), G) is piecewise linear on the grid.
    let mut s_axis = vec![0.0];
    s_axis.extend_from_slice(&opts.s_grid);
    s_axis.extend(sigma.knot_args().iter().copied());
    for &g in &g_lagged {
        if g > 0.0 {
            match sigma.class() {
                FunctionClass::KInfinity => s_axis.push(sigma.inverse(g)?),
                FunctionClass::K => {
                    if g <= sigma.sup() {
                        s_axis.push(sigma.inverse(g)?);
                    }
                }
            }
        }
    }
    s_axis.retain(|s| s.is_finite() && *s >= 0.0);
    s_axis.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    s_axis.dedup_by(|a, b| (*a - *b).abs() <= KNOT_DEDUP_TOL * a.abs().max(b.abs()).max(1.0));

    let mut values = Vec::with_capacity(s_axis.len());
    for &s in &s_axis {
        let sig = sigma.evaluate(s)?;
        values.push(g_lagged.iter().map(|&g| sig.min(g)).collect::<Vec<f64>>());
    }
    let beta_hat = KlSurface::from_grid(s_axis, tau_grid, values, None)?;

    // Verify the defining inequality on the requested grid.
    let (ns, nr, nt) = opts.verify_dims;
    let sv = log_spaced(1e-3, 1e3, ns.max(2));
    let rv: Vec<f64> = (0..nr.max(2))
        .map(|i| rs[i * (rs.len() - 1) / (nr.max(2) - 1)])
        .collect();
    let t_hi = *match &beta_hat {
        KlSurface::Grid(g) => g.t_grid.last().expect("nonempty"),
        KlSurface::Exponential { .. } => unreachable!("constructed as grid"),
    };
    let mut tv = vec![0.0];
    tv.extend(log_spaced(1e-3, t_hi, nt.max(2) - 1));
    for &s in &sv {
        let sig = sigma.evaluate(s)?;
        for &r in &rv {
            let dil = 1.0 + gamma_hat.evaluate(r)?;
            for &t in &tv {
                let lhs = sig.min(beta.evaluate(r, t)?);
                let rhs = beta_hat.evaluate(s, t / dil)?;
                if lhs > rhs * (1.0 + 1e-12) + 1e-300 {
                    return Err(CompFnError::DilationViolated { s, r, t, lhs, rhs });
                }
            }
        }
    }
    Ok((beta_hat, gamma_hat))
}

// --- JSON serialization -----------------------------------------------------
//
// Comparison functions: {"class": "K" | "Kinf", "knots": [[s, v], ...]}
// KL surfaces:          {"class": "KL", "r_grid": [...], "t_grid": [...],
//                        "values": [[...], ...]}
//                 or    {"class": "KL", "a": ..., "b": ...}

impl Serialize for ComparisonFunction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(3))?;
        map.serialize_entry(
            "class",
            match self.class {
                FunctionClass::K => "K",
                FunctionClass::KInfinity => "Kinf",
            },
        )?;
        let knots: Vec<[f64; 2]> = self.knots().map(|(a, v)| [a, v]).collect();
        map.serialize_entry("knots", &knots)?;
        map.serialize_entry("description", &self.description)?;
        map.end()
    }
}

#[derive(Deserialize)]
struct CompFnDoc {
    class: String,
    #[serde(default)]
    knots: Vec<[f64; 2]>,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    r_grid: Option<Vec<f64>>,
    #[serde(default)]
    t_grid: Option<Vec<f64>>,
    #[serde(default)]
    values: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    a: Option<f64>,
    #[serde(default)]
    b: Option<f64>,
}

impl<'de> Deserialize<'de> for ComparisonFunction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = CompFnDoc::deserialize(deserializer)?;
        let class = match doc.class.as_str() {
            "K" => FunctionClass::K,
            "Kinf" => FunctionClass::KInfinity,
            other => return Err(D::Error::custom(format!("unknown class tag {other:?}"))),
        };
        ComparisonFunction::new(
            doc.knots.into_iter().map(|[a, v]| (a, v)).collect(),
            class,
            doc.description.unwrap_or_default(),
        )
        .map_err(D::Error::custom)
    }
}

impl Serialize for KlSurface {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        match self {
            Self::Exponential { a, b } => {
                let mut map = serializer.serialize_map(Some(3))?;
                map.serialize_entry("class", "KL")?;
                map.serialize_entry("a", a)?;
                map.serialize_entry("b", b)?;
                map.end()
            }
            Self::Grid(g) => {
                let mut map = serializer.serialize_map(Some(4))?;
                map.serialize_entry("class", "KL")?;
                map.serialize_entry("r_grid", &g.r_grid)?;
                map.serialize_entry("t_grid", &g.t_grid)?;
                map.serialize_entry("values", &g.values)?;
                map.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for KlSurface {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = CompFnDoc::deserialize(deserializer)?;
        if doc.class != "KL" {
            return Err(D::Error::custom(format!(
                "expected class \"KL\", got {:?}",
                doc.class
            )));
        }
        match (doc.a, doc.b, doc.r_grid, doc.t_grid, doc.values) {
            (Some(a), Some(b), None, None, None) => {
                KlSurface::exponential(a, b).map_err(D::Error::custom)
            }
            (None, None, Some(r), Some(t), Some(v)) => {
                KlSurface::from_grid(r, t, v, None).map_err(D::Error::custom)
            }
            _ => Err(D::Error::custom(
                "KL document needs either {a, b} or {r_grid, t_grid, values}",
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table(knots: &[(f64, f64)]) -> ComparisonFunction {
        ComparisonFunction::new(knots.to_vec(), FunctionClass::KInfinity, "test").unwrap()
    }

    #[test]
    fn evaluate_identity_and_interpolation() {
        let id = ComparisonFunction::identity();
        assert_eq!(id.evaluate(0.0).unwrap(), 0.0);
        assert_eq!(id.evaluate(5.0).unwrap(), 5.0);
        let g = table(&[(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]);
        assert_relative_eq!(g.evaluate(1.5).unwrap(), 2.5);
        assert!(g.evaluate(-0.1).is_err());
    }

    #[test]
    fn inverse_cases() {
        let double = ComparisonFunction::linear(2.0).unwrap();
        assert_relative_eq!(double.inverse(4.0).unwrap(), 2.0);
        assert_eq!(ComparisonFunction::identity().inverse(0.0).unwrap(), 0.0);
        let g = table(&[(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]);
        assert_relative_eq!(g.inverse(2.5).unwrap(), 1.5);
        let bounded =
            ComparisonFunction::new(vec![(0.0, 0.0), (1.0, 1.0)], FunctionClass::K, "sat")
                .unwrap();
        assert!(matches!(bounded.inverse(2.0), Err(CompFnError::AboveRange { .. })));
        assert_eq!(bounded.evaluate(9.0).unwrap(), 1.0); // saturates
    }

    #[test]
    fn inverse_of_evaluate_is_identity_on_knots() {
        let g = table(&[(0.0, 0.0), (0.5, 0.1), (1.0, 2.0), (3.5, 9.0), (7.0, 11.0)]);
        for (a, _) in g.knots() {
            let v = g.evaluate(a).unwrap();
            assert_relative_eq!(g.inverse(v).unwrap(), a, max_relative = 1e-12);
        }
    }

    #[test]
    fn strictness_is_enforced() {
        let err = ComparisonFunction::new(
            vec![(0.0, 0.0), (1.0, 1.0), (2.0, 1.0)],
            FunctionClass::K,
            "flat",
        );
        assert!(matches!(err, Err(CompFnError::ValuesNotIncreasing(..))));
        let err = ComparisonFunction::new(
            vec![(0.0, 0.1), (1.0, 1.0)],
            FunctionClass::K,
            "offset",
        );
        assert!(matches!(err, Err(CompFnError::NonzeroOrigin(..))));
    }

    #[test]
    fn compose_squares_example() {
        // outer(s) = s^2 on [0, 10] via integer knots, inner(s) = 2s.
        let outer = ComparisonFunction::new(
            (0..=10).map(|i| (i as f64, (i * i) as f64)).collect(),
            FunctionClass::KInfinity,
            "square",
        )
        .unwrap();
        let inner = ComparisonFunction::new(
            vec![(0.0, 0.0), (10.0, 20.0)],
            FunctionClass::KInfinity,
            "double",
        )
        .unwrap();
        let comp = ComparisonFunction::compose(&outer, &inner).unwrap();
        // 3 is the preimage of outer's knot 6 under the inner map, so the
        // composition is exact there: (2 * 3)^2 = 36.
        assert_relative_eq!(comp.evaluate(3.0).unwrap(), 36.0, max_relative = 1e-12);
    }

    #[test]
    fn compose_identity_preserves_table() {
        let g = table(&[(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]);
        let comp = ComparisonFunction::compose(&ComparisonFunction::identity(), &g).unwrap();
        for (a, v) in g.knots() {
            assert_relative_eq!(comp.evaluate(a).unwrap(), v, max_relative = 1e-12);
        }
        // Monotone on every knot pair.
        let knots: Vec<_> = comp.knots().collect();
        for w in knots.windows(2) {
            assert!(w[1].1 > w[0].1);
        }
    }

    #[test]
    fn settling_map_exponential_closed_form() {
        let beta = KlSurface::exponential(1.0, 1.0).unwrap();
        let map = SettlingTimeMap::new(beta.clone());
        // T_hat = ln(r/s) for r e^{-t} and the +r/(1+s) term on top.
        let t = map.evaluate(2.0, 0.5).unwrap();
        let expected = (2.0f64 / 0.5).ln() + 2.0 / 1.5;
        assert_relative_eq!(t, expected, epsilon = 1e-6);
        assert!((t - 2.719627694453224).abs() < 1e-6);
        let val = beta.evaluate(2.0, t).unwrap();
        assert!(val < 0.5);
        assert_relative_eq!(val, 0.1318, epsilon = 1e-3);

        assert_eq!(map.evaluate(0.0, 0.25).unwrap(), 0.0);
        assert_eq!(map.evaluate(0.0, 123.0).unwrap(), 0.0);

        // beta(1, 0) = 1 < 10 already, so T_hat = 0 and T = 1/11.
        assert_relative_eq!(map.evaluate(1.0, 10.0).unwrap(), 1.0 / 11.0, epsilon = 1e-9);
    }

    #[test]
    fn settling_grid_monotone_and_strict() {
        let beta = KlSurface::exponential(1.0, 1.0).unwrap();
        let map = SettlingTimeMap::new(beta.clone());
        let rs = log_spaced(1e-3, 1e3, 20);
        let ss = log_spaced(1e-3, 1e3, 20);
        let grid = map.evaluate_grid(&rs, &ss).unwrap();
        for (i, &r) in rs.iter().enumerate() {
            for (j, &s) in ss.iter().enumerate() {
                assert!(beta.evaluate(r, grid[i][j]).unwrap() < s, "strict bound at ({r}, {s})");
                if j > 0 {
                    assert!(grid[i][j] <= grid[i][j - 1], "nonincreasing in s");
                }
                if i > 0 {
                    assert!(grid[i][j] >= grid[i - 1][j], "nondecreasing in r");
                }
            }
        }
    }

    #[test]
    fn settling_horizon_error() {
        // Flat-then-slow grid surface that never drops below s = 1e-12 within
        // a tiny horizon budget.
        let beta = KlSurface::from_grid(
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![vec![0.0, 0.0], vec![1.0, 0.9]],
            None,
        )
        .unwrap();
        let map = SettlingTimeMap::new(beta).with_horizon(10.0);
        match map.t_hat(1.0, 1e-12) {
            Err(CompFnError::Horizon { horizon, .. }) => assert_eq!(horizon, 10.0),
            other => panic!("expected horizon error, got {other:?}"),
        }
    }

    #[test]
    fn grid_surface_monotonized_and_zero_row() {
        let beta = KlSurface::from_grid(
            vec![0.0, 1.0, 2.0],
            vec![0.0, 1.0, 2.0],
            vec![
                vec![0.0, 0.0, 0.0],
                vec![1.0, 1.2, 0.3], // bump gets flattened from the right
                vec![0.9, 0.8, 0.2], // raised to dominate the row below
            ],
            None,
        )
        .unwrap();
        let g = match &beta {
            KlSurface::Grid(g) => g,
            _ => unreachable!(),
        };
        for row in g.values() {
            for w in row.windows(2) {
                assert!(w[1] <= w[0], "nonincreasing in t");
            }
        }
        for j in 0..3 {
            assert!(g.values()[2][j] >= g.values()[1][j], "nondecreasing in r");
        }
        assert_eq!(beta.evaluate(0.0, 0.7).unwrap(), 0.0);
        // Geometric tail decays.
        let v2 = beta.evaluate(1.0, 2.0).unwrap();
        let v4 = beta.evaluate(1.0, 4.0).unwrap();
        assert!(v4 < v2);
    }

    #[test]
    fn time_dilation_default_grid() {
        let sigma = ComparisonFunction::identity();
        let beta = KlSurface::exponential(1.0, 1.0).unwrap();
        let (beta_hat, gamma_hat) =
            kl_time_dilation(&sigma, &beta, &DilationOptions::default()).unwrap();

        // Defining inequality spot-checked at (s, r, t) = (1, 10, 5).
        let dil = 1.0 + gamma_hat.evaluate(10.0).unwrap();
        let lhs = sigma.evaluate(1.0).unwrap().min(beta.evaluate(10.0, 5.0).unwrap());
        assert!(lhs <= beta_hat.evaluate(1.0, 5.0 / dil).unwrap() + 1e-12);

        // tau = 0 dominates sigma on grid s (t = 0 is feasible for every r).
        for &s in &log_spaced(1e-3, 1e3, 9) {
            assert!(
                beta_hat.evaluate(s, 0.0).unwrap() >= sigma.evaluate(s).unwrap() - 1e-9,
                "beta_hat(s, 0) >= sigma(s) at s = {s}"
            );
        }
        assert_eq!(beta_hat.evaluate(0.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn json_round_trip() {
        let g = table(&[(0.0, 0.0), (1.0, 2.0), (2.0, 3.0)]);
        let doc = serde_json::to_string(&g).unwrap();
        assert!(doc.contains("\"class\":\"Kinf\""));
        let back: ComparisonFunction = serde_json::from_str(&doc).unwrap();
        assert_eq!(back.evaluate(1.5).unwrap(), 2.5);

        let beta = KlSurface::exponential(2.0, 0.5).unwrap();
        let doc = serde_json::to_string(&beta).unwrap();
        let back: KlSurface = serde_json::from_str(&doc).unwrap();
        assert_eq!(back.evaluate(3.0, 0.0).unwrap(), 6.0);

        let grid = KlSurface::from_grid(
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![vec![0.0, 0.0], vec![1.0, 0.5]],
            None,
        )
        .unwrap();
        let doc = serde_json::to_string(&grid).unwrap();
        let back: KlSurface = serde_json::from_str(&doc).unwrap();
        assert_eq!(back.evaluate(1.0, 1.0).unwrap(), 0.5);
    }
}
