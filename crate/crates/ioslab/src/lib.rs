//! Numerical toolkit for output-stability analysis of nonlinear control
//! systems `ẋ = f(x, u), y = h(x)`.
//!
//! The crate turns the classical comparison-function estimates of
//! input-to-output stability theory into executable checks:
//!
//! * [`compfn`] — class-K / class-K∞ gains and KL decay surfaces as
//!   piecewise-linear monotone tables, with composition, inversion,
//!   settling-time maps and time-dilation constructions.
//! * [`sysmodel`] — system definitions, piecewise-constant input signals,
//!   fixed-step trajectory integration and output-feedback closed loops.
//! * [`estimators`] — grid-and-sample verification / refutation of IOS,
//!   output-Lagrange, state-independent IOS, robust output stability,
//!   UBIBS and Lyapunov decrease conditions.
//! * [`redefine`] — brute-force computation of the redefined output `h0`
//!   (the value of an L∞ differential game) and verification of its
//!   decay and output-Lagrange properties.
//! * [`smallgain`] — construction of robust output-gain margins `λ` with
//!   certificate checking of the defining inequality and of the closed loop.
//! * [`systems`] — the built-in example systems (a PID regulator bench,
//!   two textbook two-state systems and a family of spiral counterexamples)
//!   together with a Francis-equation solver and linear gain extraction.
//! * [`cli`] — the `ioslab` command-line front end.
//!
//! Everything is deterministic: sampling is seeded, batches reduce in a
//! fixed order and emitted artifacts are canonical JSON / CSV, so re-running
//! a scenario reproduces identical bytes.

pub mod cli;
pub mod compfn;
pub mod estimators;
pub mod exec;
pub mod jsonio;
pub mod redefine;
pub mod smallgain;
pub mod sysmodel;
pub mod systems;

pub use compfn::{ComparisonFunction, FunctionClass, KlSurface, SettlingTimeMap};
pub use estimators::{EstimateKind, EstimateReport, SampleGrid, Verdict};
pub use sysmodel::{ControlSystem, FeedbackLoop, InputSignal, Trajectory};
