//! Classification of control-system trajectory candidates.
//!
//! A [`ControlSystem`] is a frame of vector fields spanning a distribution,
//! with a fiber metric expressed in frame coordinates. A [`Candidate`] pairs
//! time-dependent frame coefficients with an initial point and a horizon;
//! [`prepare`] integrates it into a trajectory and validates it. Two
//! independent tests classify a prepared candidate:
//!
//! * [`abnormal_test`] — transports the distribution along the candidate's
//!   flow and pools the pullbacks; a pooled rank below the ambient dimension
//!   certifies an abnormal extremal.
//! * [`normal_test`] — transports the metric-orthogonal complement of the
//!   velocity inside the distribution; the candidate is a normal extremal
//!   exactly when the pooled span never contains the velocity.
//!
//! Both have smooth-field variants ([`abnormal_test_smooth`],
//! [`normal_test_smooth`]) that replace flow transport with iterated-bracket
//! spans when the candidate is an integral curve of a single smooth field.
//! [`integrate_normal_geodesic`] solves the Hamiltonian system of the reduced
//! quadratic Hamiltonian, [`match_initial_covector`] recovers its initial
//! momentum from a candidate's jet, [`geodesic_residual`] measures the
//! covariant acceleration in the full-tangent-space case, and
//! [`paraboloid_tangent`] exposes the cost-extended tangent data used by the
//! cone constructions.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bracket::{ad_infinity_span, BracketError};
use crate::distribution::{transport_closure, DistributionError, FrameAlongCurve, Provenance};
use crate::expr::{CoordSystem, EvalError, ScalarExpr, Var, VectorFieldExpr};
use crate::flow::{
    integrate_flow, integrate_ode, FlowError, IntegrateOptions, TimeDependentField, Trajectory,
};
use crate::linalg::{covector_kernel, numerical_rank, span_residual, AMBIGUITY_BAND};

/// Absolute tolerance on `|speed − 1|` for unit-speed enforcement.
pub const TOL_UNIT_SPEED: f64 = 1e-8;
/// Relative residual above which a trajectory is rejected as not being an
/// integral curve of its declared velocity field.
pub const TOL_INTEGRAL_CURVE: f64 = 1e-6;
/// Velocity-jump threshold (relative) that classifies a switching time as a
/// genuine corner.
pub const TOL_CORNER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExtremalError {
    #[error("flow integration failed: {0}")]
    Flow(#[from] FlowError),
    #[error("distribution computation failed: {0}")]
    Distribution(#[from] DistributionError),
    #[error("bracket computation failed: {0}")]
    Bracket(#[from] BracketError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("metric matrix is not symmetric (asymmetry {asym:.3e} at a sampled point)")]
    MetricNotSymmetric { asym: f64 },
    #[error("metric matrix is not positive definite at a sampled point")]
    MetricNotPositive,
    #[error("candidate is not unit speed (max |speed - 1| = {max_dev:.3e}); prepare it with prepare_unit_speed first")]
    NotUnitSpeed { max_dev: f64 },
    #[error("candidate speed varies over [{min:.6}, {max:.6}]; arc-length reparametrization is only available for constant-speed controls")]
    NonConstantSpeed { min: f64, max: f64 },
    #[error("{0}")]
    BadInput(String),
}

// ---------------------------------------------------------------------------
// control systems
// ---------------------------------------------------------------------------

/// A distribution spanned by a frame of vector fields, with a fiber metric
/// given as a matrix of scalar expressions in frame coordinates. Controls are
/// frame coefficients: the velocity of a candidate with controls `u` is
/// `f_u = Σ u_i f_i`.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub coords: CoordSystem,
    pub frame: Vec<VectorFieldExpr>,
    /// `d×d` symmetric positive-definite matrix; entry `(i,j)` is the inner
    /// product of frame fields `i` and `j`.
    pub metric: Vec<Vec<ScalarExpr>>,
}

impl ControlSystem {
    /// Builds a system from a frame and an optional metric (identity when
    /// omitted, i.e. the frame is declared orthonormal). The frame must be
    /// autonomous, nonempty, no larger than the ambient dimension, and match
    /// the coordinate count; the metric must be `d×d` and autonomous.
    pub fn new(
        coords: CoordSystem,
        frame: Vec<VectorFieldExpr>,
        metric: Option<Vec<Vec<ScalarExpr>>>,
    ) -> Result<Self, ExtremalError> {
        let n = coords.dim();
        let d = frame.len();
        if d == 0 {
            return Err(ExtremalError::BadInput("empty frame".into()));
        }
        if d > n {
            return Err(ExtremalError::BadInput(format!(
                "{d} frame fields in dimension {n}: they cannot be linearly independent"
            )));
        }
        for (i, f) in frame.iter().enumerate() {
            if f.dim() != n {
                return Err(ExtremalError::BadInput(format!(
                    "frame field {i} has {} components, expected {n}",
                    f.dim()
                )));
            }
            if f.uses_time() {
                return Err(ExtremalError::BadInput(format!(
                    "frame field {i} depends on t; frames must be autonomous"
                )));
            }
        }
        let metric = metric.unwrap_or_else(|| identity_metric(d));
        if metric.len() != d || metric.iter().any(|row| row.len() != d) {
            return Err(ExtremalError::BadInput(format!(
                "metric must be {d}x{d} to match the frame"
            )));
        }
        for row in &metric {
            for e in row {
                if e.uses_time() {
                    return Err(ExtremalError::BadInput(
                        "metric entries must not depend on t".into(),
                    ));
                }
            }
        }
        Ok(ControlSystem { coords, frame, metric })
    }

    pub fn dim(&self) -> usize {
        self.coords.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.frame.len()
    }

    /// `n×d` matrix whose columns are the frame fields evaluated at `q`.
    pub fn frame_matrix_at(&self, q: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let cols: Vec<DVector<f64>> = self
            .frame
            .iter()
            .map(|f| f.eval(q, 0.0))
            .collect::<Result<_, _>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// Metric matrix at `q`, validated symmetric and positive definite.
    pub fn metric_at(&self, q: &[f64]) -> Result<DMatrix<f64>, ExtremalError> {
        Ok(self.metric_chol_at(q)?.0)
    }

    /// Metric matrix together with its Cholesky factorization.
    pub fn metric_chol_at(
        &self,
        q: &[f64],
    ) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>), ExtremalError> {
        let d = self.control_dim();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] = self.metric[i][j].eval(q, 0.0)?;
            }
        }
        let asym = (&g - g.transpose()).norm();
        if asym > 1e-9 * g.norm().max(1.0) {
            return Err(ExtremalError::MetricNotSymmetric { asym });
        }
        let chol = Cholesky::new(g.clone()).ok_or(ExtremalError::MetricNotPositive)?;
        Ok((g, chol))
    }

    /// The velocity field `f_u = Σ u_i f_i` for given control expressions.
    pub fn control_field(&self, controls: &[ScalarExpr]) -> Result<VectorFieldExpr, ExtremalError> {
        if controls.len() != self.control_dim() {
            return Err(ExtremalError::BadInput(format!(
                "{} controls for a frame of {} fields",
                controls.len(),
                self.control_dim()
            )));
        }
        Ok(VectorFieldExpr::linear_combination(controls, &self.frame))
    }

    /// `∂(metric)/∂q_l` for every coordinate, indexed `[l][i][j]`.
    fn metric_derivatives(&self) -> Vec<Vec<Vec<ScalarExpr>>> {
        let d = self.control_dim();
        (0..self.dim())
            .map(|l| {
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| self.metric[i][j].derivative(Var::Coord(l)))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

fn identity_metric(d: usize) -> Vec<Vec<ScalarExpr>> {
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| ScalarExpr::constant(if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// candidates
// ---------------------------------------------------------------------------

/// An unintegrated trajectory candidate: control expressions in `t` alone,
/// switching times, an initial point, and a time horizon.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub controls: Vec<ScalarExpr>,
    /// Times where the controls may jump, strictly inside `(t0, t1)`.
    pub breakpoints: Vec<f64>,
    pub q0: DVector<f64>,
    pub t0: f64,
    pub t1: f64,
}

impl Candidate {
    pub fn new(
        controls: Vec<ScalarExpr>,
        breakpoints: Vec<f64>,
        q0: DVector<f64>,
        t0: f64,
        t1: f64,
    ) -> Result<Self, ExtremalError> {
        if !(t1 > t0) {
            return Err(ExtremalError::BadInput(format!(
                "empty or reversed horizon [{t0}, {t1}]"
            )));
        }
        for (i, u) in controls.iter().enumerate() {
            if u.max_coord().is_some() {
                return Err(ExtremalError::BadInput(format!(
                    "control {i} references state coordinates; controls must be functions of t only"
                )));
            }
        }
        for &b in &breakpoints {
            if !(b > t0 && b < t1) {
                return Err(ExtremalError::BadInput(format!(
                    "switching time {b} outside the open horizon ({t0}, {t1})"
                )));
            }
        }
        Ok(Candidate { controls, breakpoints, q0, t0, t1 })
    }
}

/// A candidate integrated into a trajectory, with its velocity field, speed
/// profile, and integral-curve residual.
#[derive(Debug, Clone)]
pub struct PreparedCandidate {
    /// The velocity field `f_{u(t)}` with its switching times.
    pub field: TimeDependentField,
    pub traj: Trajectory,
    pub controls: Vec<ScalarExpr>,
    pub breakpoints: Vec<f64>,
    /// `sqrt(g(f_u, f_u))` at each grid time.
    pub speeds: Vec<f64>,
    pub unit_speed: bool,
    /// True when the candidate was reparametrized by arc length.
    pub rescaled: bool,
    /// Worst relative mismatch between the trajectory's interpolated velocity
    /// and the field, sampled between grid points.
    pub velocity_residual: f64,
}

impl PreparedCandidate {
    /// Control vector at time `t`.
    pub fn controls_at(&self, t: f64) -> Result<DVector<f64>, EvalError> {
        let vals: Vec<f64> = self
            .controls
            .iter()
            .map(|u| u.eval(&[], t))
            .collect::<Result<_, _>>()?;
        Ok(DVector::from_vec(vals))
    }

    pub fn max_speed_deviation(&self) -> f64 {
        self.speeds.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Integrates a candidate into a [`PreparedCandidate`], verifying that the
/// result is an integral curve of the declared velocity field and recording
/// the speed profile.
pub fn prepare(
    sys: &ControlSystem,
    cand: &Candidate,
    opts: &IntegrateOptions,
) -> Result<PreparedCandidate, ExtremalError> {
    if cand.q0.len() != sys.dim() {
        return Err(ExtremalError::BadInput(format!(
            "initial point has {} components in dimension {}",
            cand.q0.len(),
            sys.dim()
        )));
    }
    let field = sys.control_field(&cand.controls)?;
    let tdf = TimeDependentField::new(field, cand.breakpoints.clone());
    let traj = integrate_flow(&tdf, &cand.q0, cand.t0, cand.t1, opts)?;

    // integral-curve residual at interval midpoints (never switching times,
    // since those are pinned to the grid)
    let mut residual = 0.0_f64;
    let stride = (traj.grid.len() / 200).max(1);
    for w in traj.grid.windows(2).step_by(stride) {
        let tm = 0.5 * (w[0] + w[1]);
        let (y, yp, _) = traj.sample_with_derivatives(tm);
        let f = tdf.field.eval(y.as_slice(), tm)?;
        residual = residual.max((&yp - &f).norm() / f.norm().max(1.0));
    }
    if residual > TOL_INTEGRAL_CURVE {
        return Err(ExtremalError::BadInput(format!(
            "integrated trajectory deviates from its velocity field (residual {residual:.3e})"
        )));
    }

    let mut speeds = Vec::with_capacity(traj.grid.len());
    for (t, x) in traj.grid.iter().zip(&traj.states) {
        let u = eval_controls(&cand.controls, *t)?;
        let g = sys.metric_at(x.as_slice())?;
        speeds.push((u.dot(&(&g * &u))).max(0.0).sqrt());
    }
    let unit_speed = speeds.iter().all(|s| (s - 1.0).abs() <= TOL_UNIT_SPEED);
    Ok(PreparedCandidate {
        field: tdf,
        traj,
        controls: cand.controls.clone(),
        breakpoints: cand.breakpoints.clone(),
        speeds,
        unit_speed,
        rescaled: false,
        velocity_residual: residual,
    })
}

/// Like [`prepare`], but reparametrizes constant-speed candidates by arc
/// length so the result is unit speed. Candidates whose speed genuinely
/// varies are rejected: rescaling them would change the control expressions
/// non-uniformly.
pub fn prepare_unit_speed(
    sys: &ControlSystem,
    cand: &Candidate,
    opts: &IntegrateOptions,
) -> Result<PreparedCandidate, ExtremalError> {
    let p = prepare(sys, cand, opts)?;
    if p.unit_speed {
        return Ok(p);
    }
    let mean = p.speeds.iter().sum::<f64>() / p.speeds.len() as f64;
    let (lo, hi) = p
        .speeds
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if hi - lo > 1e-8 * mean.max(1.0) {
        return Err(ExtremalError::NonConstantSpeed { min: lo, max: hi });
    }
    if mean <= 1e-12 {
        return Err(ExtremalError::BadInput(
            "candidate has zero speed; arc-length reparametrization impossible".into(),
        ));
    }
    // speed c: the unit-speed curve is s ↦ q(t0 + s/c) on [0, c·(t1−t0)],
    // with controls u(t0 + s/c)/c and switching times c·(b − t0)
    let c = mean;
    let repl = ScalarExpr::add(
        ScalarExpr::constant(cand.t0),
        ScalarExpr::div(ScalarExpr::time(), ScalarExpr::constant(c)),
    );
    let controls: Vec<ScalarExpr> = cand
        .controls
        .iter()
        .map(|u| ScalarExpr::div(u.substitute_time(&repl), ScalarExpr::constant(c)))
        .collect();
    let breakpoints: Vec<f64> = cand.breakpoints.iter().map(|b| c * (b - cand.t0)).collect();
    let rescaled = Candidate::new(
        controls,
        breakpoints,
        cand.q0.clone(),
        0.0,
        c * (cand.t1 - cand.t0),
    )?;
    let mut p = prepare(sys, &rescaled, opts)?;
    if !p.unit_speed {
        return Err(ExtremalError::NotUnitSpeed { max_dev: p.max_speed_deviation() });
    }
    p.rescaled = true;
    Ok(p)
}

fn eval_controls(controls: &[ScalarExpr], t: f64) -> Result<DVector<f64>, EvalError> {
    let vals: Vec<f64> = controls.iter().map(|u| u.eval(&[], t)).collect::<Result<_, _>>()?;
    Ok(DVector::from_vec(vals))
}

// ---------------------------------------------------------------------------
// verdicts and evidence
// ---------------------------------------------------------------------------

/// Outcome of a classification test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// The candidate is an abnormal extremal, with rank margin.
    AbnormalCertified,
    /// The candidate is a normal extremal, with membership margin.
    NormalCertified,
    /// The abnormality criterion fails decisively.
    NotAbnormal,
    /// The normality criterion fails decisively.
    NotNormal,
    /// Margins too thin, rank not constant, or the computation was truncated:
    /// no certificate either way.
    Ambiguous,
}

impl Verdict {
    pub fn code(&self) -> &'static str {
        match self {
            Verdict::AbnormalCertified => "ABNORMAL_CERTIFIED",
            Verdict::NormalCertified => "NORMAL_CERTIFIED",
            Verdict::NotAbnormal => "NOT_ABNORMAL",
            Verdict::NotNormal => "NOT_NORMAL",
            Verdict::Ambiguous => "AMBIGUOUS",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Numerical data backing a verdict: enough to recompute the decision.
#[derive(Debug, Clone)]
pub struct Evidence {
    pub dim: usize,
    /// Probe times of the per-time rank profile.
    pub times: Vec<f64>,
    /// Per-time ranks of the tested distribution (or bracket span).
    pub ranks: Vec<usize>,
    /// Rank of the pooled/stabilized span the verdict is based on.
    pub closure_rank: Option<usize>,
    /// Smallest singular value kept, relative to the rank threshold.
    pub rank_margin_above: Option<f64>,
    /// Largest singular value dropped, relative to the rank threshold.
    pub rank_margin_below: Option<f64>,
    pub rank_ambiguous: bool,
    /// Per-time relative residuals of the velocity against the tested span
    /// (normality tests only).
    pub membership_residuals: Vec<f64>,
    pub min_membership_residual: Option<f64>,
    /// Present when a bracket span was cut off before stabilizing.
    pub truncation: Option<String>,
    pub notes: Vec<String>,
    pub tol_rank: f64,
    pub tol_membership: f64,
}

impl Evidence {
    /// Empty evidence shell for the given ambient dimension and tolerances.
    pub fn new(dim: usize, tol_rank: f64, tol_membership: f64) -> Self {
        Evidence {
            dim,
            times: vec![],
            ranks: vec![],
            closure_rank: None,
            rank_margin_above: None,
            rank_margin_below: None,
            rank_ambiguous: false,
            membership_residuals: vec![],
            min_membership_residual: None,
            truncation: None,
            notes: vec![],
            tol_rank,
            tol_membership,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "dim": self.dim,
            "times": self.times,
            "ranks": self.ranks,
            "closure_rank": self.closure_rank,
            "rank_margin_above": self.rank_margin_above,
            "rank_margin_below": self.rank_margin_below,
            "rank_ambiguous": self.rank_ambiguous,
            "membership_residuals": self.membership_residuals,
            "min_membership_residual": self.min_membership_residual,
            "truncation": self.truncation,
            "notes": self.notes,
            "tol_rank": self.tol_rank,
            "tol_membership": self.tol_membership,
        })
    }
}

/// A verdict with its supporting evidence.
#[derive(Debug, Clone)]
pub struct TestReport {
    pub verdict: Verdict,
    pub evidence: Evidence,
}

impl TestReport {
    pub fn to_json(&self) -> Value {
        json!({ "verdict": self.verdict.code(), "evidence": self.evidence.to_json() })
    }

    /// One-line human-readable summary.
    pub fn summary(&self) -> String {
        let e = &self.evidence;
        let mut s = format!("{}", self.verdict);
        if let Some(r) = e.closure_rank {
            s.push_str(&format!(" (span rank {r} of {})", e.dim));
        }
        if let Some(m) = e.min_membership_residual {
            s.push_str(&format!(", min membership residual {m:.3e}"));
        }
        if let Some(t) = &e.truncation {
            s.push_str(&format!(", truncated: {t}"));
        }
        s
    }
}

/// Both classification tests run on the same candidate.
#[derive(Debug, Clone)]
pub struct ClassifyReport {
    pub abnormal: TestReport,
    pub normal: TestReport,
}

impl ClassifyReport {
    /// Single headline verdict: an abnormality certificate wins, then a
    /// normality certificate, then any decisive negative, then ambiguity.
    pub fn overall(&self) -> Verdict {
        if self.abnormal.verdict == Verdict::AbnormalCertified {
            return Verdict::AbnormalCertified;
        }
        if self.normal.verdict == Verdict::NormalCertified {
            return Verdict::NormalCertified;
        }
        if self.abnormal.verdict == Verdict::Ambiguous || self.normal.verdict == Verdict::Ambiguous
        {
            return Verdict::Ambiguous;
        }
        if self.normal.verdict == Verdict::NotNormal {
            return Verdict::NotNormal;
        }
        Verdict::NotAbnormal
    }

    pub fn to_json(&self) -> Value {
        json!({
            "overall": self.overall().code(),
            "abnormal": self.abnormal.to_json(),
            "normal": self.normal.to_json(),
        })
    }
}

// ---------------------------------------------------------------------------
// abnormal tests
// ---------------------------------------------------------------------------

/// Flow-transport abnormality test. The distribution is restricted to the
/// candidate's trajectory, every fiber is pulled back to the start time with
/// the tangent transport of the velocity field, and the pooled span is
/// rank-tested: a rank below the ambient dimension certifies an abnormal
/// extremal, full rank refutes one, and a thin singular-value margin yields
/// [`Verdict::Ambiguous`].
///
/// `tau_samples = 0` pools every grid time.
pub fn abnormal_test(
    sys: &ControlSystem,
    p: &PreparedCandidate,
    tau_samples: usize,
    tol_rank: f64,
    opts: &IntegrateOptions,
) -> Result<TestReport, ExtremalError> {
    let n = sys.dim();
    let b = FrameAlongCurve::from_fields(&sys.frame, &p.traj, tol_rank)?;
    let cl = transport_closure(&p.field, &p.traj, &b, tau_samples, tol_rank, opts)?;

    let mut ev = Evidence::new(n, tol_rank, 0.0);
    ev.times = b.times.clone();
    ev.ranks = b.ranks.clone();
    ev.closure_rank = Some(cl.rank);
    ev.rank_margin_above = Some(cl.rank_detail.margin_above);
    ev.rank_margin_below = Some(cl.rank_detail.margin_below);
    ev.rank_ambiguous = cl.rank_detail.ambiguous;
    ev.notes.push(format!(
        "containment defect of the distribution in the transported span: {:.3e}",
        cl.containment_defect
    ));
    if let Some(r) = cl.frame.constant_rank() {
        ev.notes.push(format!("transported span keeps rank {r} at every grid time"));
    }

    let verdict = if cl.rank_detail.ambiguous {
        ev.notes.push("singular-value margins too thin to trust the rank".into());
        Verdict::Ambiguous
    } else if cl.rank < n {
        Verdict::AbnormalCertified
    } else {
        Verdict::NotAbnormal
    };
    Ok(TestReport { verdict, evidence: ev })
}

/// Iterated-bracket abnormality test for candidates that are integral curves
/// of one smooth field `x`. The span of all iterated brackets of `x` against
/// the frame is evaluated along the trajectory:
///
/// * constant rank `< dim`, stabilized: certified abnormal;
/// * rank `= dim` anywhere-constant: refuted (sound even when the span was
///   truncated, since truncation only underestimates it);
/// * non-constant rank or a truncated sub-full span: ambiguous — the
///   flow-transport test [`abnormal_test`] stays decisive in those cases.
pub fn abnormal_test_smooth(
    sys: &ControlSystem,
    x: &VectorFieldExpr,
    traj: &Trajectory,
    depth_cap: usize,
    node_limit: usize,
    tol_rank: f64,
) -> Result<TestReport, ExtremalError> {
    let n = sys.dim();
    check_field_in_distribution(sys, x, traj, tol_rank)?;
    let ad = ad_infinity_span(x, &sys.frame, traj, tol_rank, depth_cap, node_limit)?;
    let prof = &ad.profile;

    let mut ev = Evidence::new(n, tol_rank, 0.0);
    ev.times = prof.times.clone();
    ev.ranks = prof.ranks.clone();
    ev.closure_rank = prof.rank;
    ev.rank_ambiguous = prof.ambiguous;
    ev.truncation = prof.truncation.clone();
    if let Some(d) = prof.stabilized_depth {
        ev.notes.push(format!("bracket span stabilized at depth {d}"));
    }

    let verdict = if !prof.constant_rank {
        ev.notes.push(
            "span rank varies along the curve; the flow-transport test remains decisive".into(),
        );
        Verdict::Ambiguous
    } else {
        let r = prof.rank.expect("constant rank implies a rank value");
        if r == n {
            if prof.truncation.is_some() {
                ev.notes.push("span already full despite truncation; refutation sound".into());
            }
            Verdict::NotAbnormal
        } else if prof.truncation.is_some() {
            ev.notes.push(
                "truncated span is only a lower bound, so a sub-full rank certifies nothing"
                    .into(),
            );
            Verdict::Ambiguous
        } else if prof.ambiguous {
            ev.notes.push("singular-value margins too thin to trust the rank".into());
            Verdict::Ambiguous
        } else {
            Verdict::AbnormalCertified
        }
    };
    Ok(TestReport { verdict, evidence: ev })
}

/// Errors unless `x` stays inside the span of the frame along the trajectory.
fn check_field_in_distribution(
    sys: &ControlSystem,
    x: &VectorFieldExpr,
    traj: &Trajectory,
    tol_rank: f64,
) -> Result<(), ExtremalError> {
    if x.dim() != sys.dim() {
        return Err(ExtremalError::BadInput(format!(
            "field has {} components in dimension {}",
            x.dim(),
            sys.dim()
        )));
    }
    let stride = (traj.grid.len() / 33).max(1);
    let mut worst = 0.0_f64;
    for (t, q) in traj.grid.iter().zip(&traj.states).step_by(stride) {
        let b = sys.frame_matrix_at(q.as_slice())?;
        let basis = numerical_rank(&b, tol_rank).basis;
        let v = x.eval(q.as_slice(), *t)?;
        worst = worst.max(span_residual(&basis, &v));
    }
    if worst > TOL_INTEGRAL_CURVE {
        return Err(ExtremalError::BadInput(format!(
            "field leaves the distribution along the curve (residual {worst:.3e})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// perpendicular distribution and normal tests
// ---------------------------------------------------------------------------

/// The metric-orthogonal complement of the velocity inside the distribution,
/// along a unit-speed candidate: a `(d−1)`-column frame at each grid time
/// whose columns are metric-orthonormal and metric-orthogonal to `f_u`.
pub fn perp_distribution(
    sys: &ControlSystem,
    p: &PreparedCandidate,
) -> Result<FrameAlongCurve, ExtremalError> {
    if !p.unit_speed {
        return Err(ExtremalError::NotUnitSpeed { max_dev: p.max_speed_deviation() });
    }
    let d = sys.control_dim();
    let traj = &p.traj;
    let mut frames = Vec::with_capacity(traj.grid.len());
    let mut ranks = Vec::with_capacity(traj.grid.len());
    for (t, q) in traj.grid.iter().zip(&traj.states) {
        if d == 1 {
            frames.push(DMatrix::zeros(sys.dim(), 0));
            ranks.push(0);
            continue;
        }
        let u = p.controls_at(*t)?;
        let (g, chol) = sys.metric_chol_at(q.as_slice())?;
        let m = &g * &u; // covector of the velocity in frame coordinates
        let kern = covector_kernel(&m); // d×(d−1), spans {a : aᵀ m = 0}
        // metric-orthonormalize inside the kernel: with g = LLᵀ, QR-reduce
        // LᵀK and pull the orthonormal factor back through Lᵀ
        let lt = chol.l().transpose();
        let y = &lt * &kern;
        let qfac = y.qr().q();
        let a = lt
            .solve_upper_triangular(&qfac)
            .ok_or(ExtremalError::MetricNotPositive)?;
        // defensive: columns must be metric-orthogonal to the velocity
        let defect = (a.transpose() * &m).amax();
        if defect > 1e-10 {
            return Err(ExtremalError::BadInput(format!(
                "orthogonal-complement construction failed (defect {defect:.3e})"
            )));
        }
        let b = sys.frame_matrix_at(q.as_slice())?;
        let w = &b * &a;
        ranks.push(numerical_rank(&w, crate::linalg::DEFAULT_TOL_RANK).rank);
        frames.push(w);
    }
    Ok(FrameAlongCurve {
        times: traj.grid.clone(),
        states: traj.states.clone(),
        frames,
        ranks,
        provenance: Provenance::Samples,
        sections: None,
    })
}

/// The candidate's velocity field rescaled to unit metric length on a whole
/// neighborhood, not just along its own curve:
/// `X̂(q,t) = f_{u(t)}(q) / √(Σ_{ij} u_i(t) u_j(t) g_ij(q))`.
///
/// The normality test transports the orthogonal complement with the flow of
/// this field. On the curve itself `X̂` agrees with the raw control field (the
/// candidate is unit speed there), so the trajectory is unchanged — but the
/// tangent transport differs whenever the metric varies with position, and it
/// is the normalized field's transport that the certification criterion is
/// stated for. When every metric entry is constant the normalizing factor has
/// zero gradient, the two transports coincide exactly, and the raw field is
/// returned unscaled.
pub fn normalized_transport_field(
    sys: &ControlSystem,
    p: &PreparedCandidate,
) -> Result<TimeDependentField, ExtremalError> {
    let metric_is_constant = sys
        .metric
        .iter()
        .all(|row| row.iter().all(|e| e.as_const().is_some()));
    if metric_is_constant {
        return Ok(p.field.clone());
    }
    let d = sys.control_dim();
    let mut speed2 = ScalarExpr::constant(0.0);
    for i in 0..d {
        for j in 0..d {
            speed2 = ScalarExpr::add(
                speed2,
                ScalarExpr::mul(
                    p.controls[i].clone(),
                    ScalarExpr::mul(p.controls[j].clone(), sys.metric[i][j].clone()),
                ),
            );
        }
    }
    let factor = ScalarExpr::div(ScalarExpr::constant(1.0), ScalarExpr::sqrt(speed2));
    Ok(TimeDependentField::new(
        p.field.field.scale(&factor),
        p.breakpoints.clone(),
    ))
}

/// Flow-transport normality test on a unit-speed candidate. The orthogonal
/// complement of the velocity is transported along the flow and pooled; the
/// candidate is certified normal when the velocity stays outside the pooled
/// span at every time (relative residual above the ambiguity band), and
/// refuted when it falls inside somewhere (residual at or below
/// `tol_membership`). Corner-type velocity jumps at switching times refute
/// normality outright. The transport uses the neighborhood-normalized
/// velocity field (see [`normalized_transport_field`]).
pub fn normal_test(
    sys: &ControlSystem,
    p: &PreparedCandidate,
    tau_samples: usize,
    tol_rank: f64,
    tol_membership: f64,
    opts: &IntegrateOptions,
) -> Result<TestReport, ExtremalError> {
    let n = sys.dim();
    if !p.unit_speed {
        return Err(ExtremalError::NotUnitSpeed { max_dev: p.max_speed_deviation() });
    }
    let mut ev = Evidence::new(n, tol_rank, tol_membership);

    // corner check: a normal extremal's velocity along the curve is
    // absolutely continuous, so a genuine jump at a switching time refutes it
    let span = p.traj.t1 - p.traj.t0;
    for &b in &p.breakpoints {
        let delta = 1e-9 * span.abs().max(1.0);
        let q = p.traj.sample(b);
        let u_minus = p.controls_at(b - delta)?;
        let u_plus = p.controls_at(b + delta)?;
        let bmat = sys.frame_matrix_at(q.as_slice())?;
        let jump = (&bmat * (&u_plus - &u_minus)).norm();
        let scale = (&bmat * &u_plus).norm().max(1.0);
        if jump > TOL_CORNER * scale {
            ev.notes.push(format!(
                "velocity jumps by {jump:.3e} at switching time t = {b}; corners cannot be normal"
            ));
            return Ok(TestReport { verdict: Verdict::NotNormal, evidence: ev });
        }
    }

    if sys.control_dim() == 1 {
        ev.closure_rank = Some(0);
        ev.min_membership_residual = Some(1.0);
        ev.notes.push(
            "single-field system: the orthogonal complement is zero, so the velocity trivially stays outside it".into(),
        );
        return Ok(TestReport { verdict: Verdict::NormalCertified, evidence: ev });
    }

    let perp = perp_distribution(sys, p)?;
    let transport_field = normalized_transport_field(sys, p)?;
    let cl = transport_closure(&transport_field, &p.traj, &perp, tau_samples, tol_rank, opts)?;
    ev.times = cl.frame.times.clone();
    ev.ranks = perp.ranks.clone();
    ev.closure_rank = Some(cl.rank);
    ev.rank_margin_above = Some(cl.rank_detail.margin_above);
    ev.rank_margin_below = Some(cl.rank_detail.margin_below);
    ev.rank_ambiguous = cl.rank_detail.ambiguous;

    let mut residuals = Vec::with_capacity(cl.frame.len());
    for k in 0..cl.frame.len() {
        let basis = numerical_rank(&cl.frame.frames[k], tol_rank).basis;
        let f = p
            .field
            .field
            .eval(cl.frame.states[k].as_slice(), cl.frame.times[k])?;
        residuals.push(span_residual(&basis, &f));
    }
    let min_res = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    ev.membership_residuals = residuals;
    ev.min_membership_residual = Some(min_res);

    let verdict = if cl.rank == n {
        ev.notes.push("transported span fills the whole space".into());
        Verdict::NotNormal
    } else if min_res <= tol_membership {
        Verdict::NotNormal
    } else if min_res <= AMBIGUITY_BAND * tol_membership || cl.rank_detail.ambiguous {
        ev.notes.push("membership margin inside the ambiguity band".into());
        Verdict::Ambiguous
    } else {
        Verdict::NormalCertified
    };
    Ok(TestReport { verdict, evidence: ev })
}

/// Iterated-bracket normality test for a unit field `x = Σ coeffs_i f_i`.
/// The orthogonal complement is built symbolically as
/// `W_j = f_j − (Σ_i coeffs_i g_ij) x`, its iterated-bracket span along the
/// trajectory is stabilized, and the verdict follows from whether `x` stays
/// outside that span. Membership refutes normality even under truncation (a
/// truncated span only grows); exclusion requires the untruncated span and
/// constant rank.
pub fn normal_test_smooth(
    sys: &ControlSystem,
    x: &VectorFieldExpr,
    coeffs: &[ScalarExpr],
    traj: &Trajectory,
    depth_cap: usize,
    node_limit: usize,
    tol_rank: f64,
    tol_membership: f64,
) -> Result<TestReport, ExtremalError> {
    let n = sys.dim();
    let d = sys.control_dim();
    if coeffs.len() != d {
        return Err(ExtremalError::BadInput(format!(
            "{} coefficients for a frame of {d} fields",
            coeffs.len()
        )));
    }
    let mut ev = Evidence::new(n, tol_rank, tol_membership);

    // the coefficients must reproduce x on the curve, and x must be unit
    let recon = VectorFieldExpr::linear_combination(coeffs, &sys.frame);
    let stride = (traj.grid.len() / 33).max(1);
    let mut max_dev = 0.0_f64;
    for (t, q) in traj.grid.iter().zip(&traj.states).step_by(stride) {
        let xv = x.eval(q.as_slice(), *t)?;
        let rv = recon.eval(q.as_slice(), *t)?;
        if (&xv - &rv).norm() > 1e-8 * xv.norm().max(1.0) {
            return Err(ExtremalError::BadInput(
                "coefficients do not reproduce the field along the curve".into(),
            ));
        }
        let a = DVector::from_vec(
            coeffs
                .iter()
                .map(|c| c.eval(q.as_slice(), *t))
                .collect::<Result<Vec<_>, _>>()?,
        );
        let g = sys.metric_at(q.as_slice())?;
        max_dev = max_dev.max(((a.dot(&(&g * &a))).max(0.0).sqrt() - 1.0).abs());
    }
    if max_dev > TOL_UNIT_SPEED {
        return Err(ExtremalError::NotUnitSpeed { max_dev });
    }

    if d == 1 {
        ev.closure_rank = Some(0);
        ev.min_membership_residual = Some(1.0);
        ev.notes.push("single-field system: zero orthogonal complement".into());
        return Ok(TestReport { verdict: Verdict::NormalCertified, evidence: ev });
    }

    // W_j = f_j − (Σ_i a_i g_ij)·x, metric-orthogonal to x since g(x,x) = 1
    let mut sections = Vec::with_capacity(d);
    for j in 0..d {
        let mut cj = ScalarExpr::constant(0.0);
        for (i, a) in coeffs.iter().enumerate() {
            cj = ScalarExpr::add(cj, ScalarExpr::mul(a.clone(), sys.metric[i][j].clone()));
        }
        let w = VectorFieldExpr::linear_combination(
            &[ScalarExpr::constant(1.0), ScalarExpr::neg(cj)],
            &[sys.frame[j].clone(), x.clone()],
        );
        if !w.is_identically_zero() {
            sections.push(w);
        }
    }
    if sections.is_empty() {
        ev.closure_rank = Some(0);
        ev.min_membership_residual = Some(1.0);
        ev.notes.push("orthogonal complement vanished identically".into());
        return Ok(TestReport { verdict: Verdict::NormalCertified, evidence: ev });
    }

    let ad = ad_infinity_span(x, &sections, traj, tol_rank, depth_cap, node_limit)?;
    let prof = &ad.profile;
    ev.times = prof.times.clone();
    ev.ranks = prof.ranks.clone();
    ev.closure_rank = prof.rank;
    ev.rank_ambiguous = prof.ambiguous;
    ev.truncation = prof.truncation.clone();
    if let Some(dep) = prof.stabilized_depth {
        ev.notes.push(format!("bracket span stabilized at depth {dep}"));
    }

    let mut residuals = Vec::with_capacity(ad.frame.len());
    for k in 0..ad.frame.len() {
        let basis = numerical_rank(&ad.frame.frames[k], tol_rank).basis;
        let xv = x.eval(ad.frame.states[k].as_slice(), ad.frame.times[k])?;
        residuals.push(span_residual(&basis, &xv));
    }
    let min_res = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    ev.membership_residuals = residuals;
    ev.min_membership_residual = Some(min_res);

    let verdict = if !prof.constant_rank {
        ev.notes.push(
            "span rank varies along the curve; the flow-transport test remains decisive".into(),
        );
        Verdict::Ambiguous
    } else if min_res <= tol_membership {
        Verdict::NotNormal
    } else if prof.truncation.is_some() {
        ev.notes
            .push("truncated span cannot certify exclusion: the full span may be larger".into());
        Verdict::Ambiguous
    } else if min_res <= AMBIGUITY_BAND * tol_membership || prof.ambiguous {
        ev.notes.push("membership margin inside the ambiguity band".into());
        Verdict::Ambiguous
    } else {
        Verdict::NormalCertified
    };
    Ok(TestReport { verdict, evidence: ev })
}

/// Runs both classification tests on a candidate. The abnormal test uses the
/// candidate as given; the normal test uses its arc-length reparametrization,
/// and reports [`Verdict::Ambiguous`] when the speed is non-constant (our
/// reparametrization only handles constant speeds).
pub fn classify(
    sys: &ControlSystem,
    cand: &Candidate,
    tau_samples: usize,
    tol_rank: f64,
    tol_membership: f64,
    opts: &IntegrateOptions,
) -> Result<ClassifyReport, ExtremalError> {
    let p = prepare(sys, cand, opts)?;
    let abnormal = abnormal_test(sys, &p, tau_samples, tol_rank, opts)?;
    let normal = if p.unit_speed {
        normal_test(sys, &p, tau_samples, tol_rank, tol_membership, opts)?
    } else {
        match prepare_unit_speed(sys, cand, opts) {
            Ok(pu) => normal_test(sys, &pu, tau_samples, tol_rank, tol_membership, opts)?,
            Err(ExtremalError::NonConstantSpeed { min, max }) => {
                let mut ev = Evidence::new(sys.dim(), tol_rank, tol_membership);
                ev.notes.push(format!(
                    "speed varies over [{min:.6}, {max:.6}]; normality undecided without arc-length reparametrization"
                ));
                TestReport { verdict: Verdict::Ambiguous, evidence: ev }
            }
            Err(e) => return Err(e),
        }
    };
    Ok(ClassifyReport { abnormal, normal })
}

// ---------------------------------------------------------------------------
// normal geodesics
// ---------------------------------------------------------------------------

/// A solved normal-geodesic initial value problem.
#[derive(Debug, Clone)]
pub struct NormalGeodesic {
    /// Full phase-space solution `(q, p)` in `2n` dimensions.
    pub phase: Trajectory,
    /// Base trajectory `q(t)`.
    pub traj: Trajectory,
    /// Momentum at each grid time.
    pub momenta: Vec<DVector<f64>>,
    /// Maximizing control `u = g^{-1} (f_i·p)_i` at each grid time.
    pub controls: Vec<DVector<f64>>,
    /// Hamiltonian at the start.
    pub energy0: f64,
    /// Worst relative drift `|H(t) − H(0)| / max(|H(0)|, ε)` over the grid.
    pub energy_drift: f64,
}

/// The reduced quadratic Hamiltonian `½ Σ g^{ij} (f_i·p)(f_j·p)` at `(q, p)`.
pub fn hamiltonian(sys: &ControlSystem, q: &[f64], p: &DVector<f64>) -> Result<f64, ExtremalError> {
    let b = sys.frame_matrix_at(q)?;
    let (_, chol) = sys.metric_chol_at(q)?;
    let m = b.transpose() * p;
    let u = chol.solve(&m);
    Ok(0.5 * m.dot(&u))
}

/// Integrates the Hamiltonian system of the reduced quadratic Hamiltonian
/// from `(q0, p0)`:
///
/// ```text
/// q̇ = Σ u_i f_i,           u = g^{-1} m,   m_i = f_i·p,
/// ṗ_l = −Σ_i u_i (p·∂f_i/∂q_l) + ½ Σ_ij u_i u_j ∂g_ij/∂q_l.
/// ```
///
/// The Hamiltonian is a first integral; its relative drift over the grid is
/// reported in the result.
pub fn integrate_normal_geodesic(
    sys: &ControlSystem,
    q0: &DVector<f64>,
    p0: &DVector<f64>,
    t0: f64,
    t1: f64,
    opts: &IntegrateOptions,
) -> Result<NormalGeodesic, ExtremalError> {
    let n = sys.dim();
    let d = sys.control_dim();
    if q0.len() != n || p0.len() != n {
        return Err(ExtremalError::BadInput(format!(
            "initial point and momentum must both have {n} components"
        )));
    }
    // validate the metric once up front so a bad metric surfaces as a typed
    // error instead of an integration failure
    sys.metric_chol_at(q0.as_slice())?;

    let jacs: Vec<_> = sys.frame.iter().map(|f| f.jacobian()).collect();
    let dg = sys.metric_derivatives();

    let rhs = move |t: f64, y: &DVector<f64>| -> Result<DVector<f64>, EvalError> {
        let qs = &y.as_slice()[..n];
        let p = DVector::from_column_slice(&y.as_slice()[n..]);
        let b = sys.frame_matrix_at(qs)?;
        let mut g = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                g[(i, j)] = sys.metric[i][j].eval(qs, t)?;
            }
        }
        let chol =
            Cholesky::new(g).ok_or(EvalError::NonFinite { op: "metric factorization" })?;
        let m = b.transpose() * &p;
        let u = chol.solve(&m);
        let qdot = &b * &u;
        let jmats: Vec<DMatrix<f64>> =
            jacs.iter().map(|j| j.eval(qs, t)).collect::<Result<_, _>>()?;
        let mut pdot = DVector::zeros(n);
        for l in 0..n {
            let mut s = 0.0;
            for (i, jm) in jmats.iter().enumerate() {
                s -= u[i] * p.dot(&jm.column(l).into_owned());
            }
            for i in 0..d {
                for j in 0..d {
                    s += 0.5 * u[i] * u[j] * dg[l][i][j].eval(qs, t)?;
                }
            }
            pdot[l] = s;
        }
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qdot);
        out.rows_mut(n, n).copy_from(&pdot);
        Ok(out)
    };

    let mut y0 = DVector::zeros(2 * n);
    y0.rows_mut(0, n).copy_from(q0);
    y0.rows_mut(n, n).copy_from(p0);
    let phase = integrate_ode(&rhs, &y0, t0, t1, &[], opts)?;

    let mut momenta = Vec::with_capacity(phase.grid.len());
    let mut controls = Vec::with_capacity(phase.grid.len());
    let mut energy0 = 0.0;
    let mut drift = 0.0_f64;
    for (k, y) in phase.states.iter().enumerate() {
        let qs = &y.as_slice()[..n];
        let p = DVector::from_column_slice(&y.as_slice()[n..]);
        let b = sys.frame_matrix_at(qs)?;
        let (_, chol) = sys.metric_chol_at(qs)?;
        let m = b.transpose() * &p;
        let u = chol.solve(&m);
        let h = 0.5 * m.dot(&u);
        if k == 0 {
            energy0 = h;
        } else {
            drift = drift.max((h - energy0).abs() / energy0.abs().max(1e-300));
        }
        momenta.push(p);
        controls.push(u);
    }
    Ok(NormalGeodesic {
        traj: phase.project(0, n),
        phase,
        momenta,
        controls,
        energy0,
        energy_drift: drift,
    })
}

/// Recovers an initial momentum consistent with a candidate's initial jet,
/// assuming the candidate is a normal geodesic. Two layers of conditions are
/// matched at `t0`: the pairings `f_i·p = (g u)_i` and their first time
/// derivatives, which involve the bracket directions `Σ_j u_j [f_j, f_i]`.
/// The minimum-norm least-squares solution is returned along with the fit's
/// relative residual (a genuinely normal candidate yields a tiny residual).
pub fn match_initial_covector(
    sys: &ControlSystem,
    p: &PreparedCandidate,
) -> Result<(DVector<f64>, f64), ExtremalError> {
    let n = sys.dim();
    let d = sys.control_dim();
    let t0 = p.traj.t0;
    let q0 = p.traj.states[0].clone();
    let qs = q0.as_slice();

    let u0 = p.controls_at(t0)?;
    let udot0 = DVector::from_vec(
        p.controls
            .iter()
            .map(|u| u.derivative(Var::Time).eval(qs, t0))
            .collect::<Result<Vec<_>, _>>()?,
    );
    let b0 = sys.frame_matrix_at(qs)?;
    let g0 = sys.metric_at(qs)?;
    let dg = sys.metric_derivatives();
    let jmats: Vec<DMatrix<f64>> = sys
        .frame
        .iter()
        .map(|f| f.jacobian().eval(qs, t0))
        .collect::<Result<_, _>>()?;
    let qdot0 = &b0 * &u0;

    // d/dt of m = g(q(t)) u(t) at t0
    let mut gdot = DMatrix::zeros(d, d);
    for l in 0..n {
        for i in 0..d {
            for j in 0..d {
                gdot[(i, j)] += qdot0[l] * dg[l][i][j].eval(qs, t0)?;
            }
        }
    }
    let mdot = &gdot * &u0 + &g0 * &udot0;

    // Σ_j u_j J_j, used in the bracket rows
    let mut s = DMatrix::zeros(n, n);
    for (j, jm) in jmats.iter().enumerate() {
        s += u0[j] * jm;
    }

    let m0 = &g0 * &u0;
    let mut a = DMatrix::zeros(2 * d, n);
    let mut rhs = DVector::zeros(2 * d);
    for i in 0..d {
        a.row_mut(i).copy_from(&b0.column(i).transpose());
        rhs[i] = m0[i];
        // Σ_j u_j [f_j, f_i] = J_i q̇ − (Σ_j u_j J_j) f_i
        let brk = &jmats[i] * &qdot0 - &s * b0.column(i);
        a.row_mut(d + i).copy_from(&brk.transpose());
        let mut corr = 0.0;
        for l in 0..n {
            let mut quad = 0.0;
            for ii in 0..d {
                for jj in 0..d {
                    quad += u0[ii] * u0[jj] * dg[l][ii][jj].eval(qs, t0)?;
                }
            }
            corr += 0.5 * b0[(l, i)] * quad;
        }
        rhs[d + i] = mdot[i] - corr;
    }

    let svd = a.clone().svd(true, true);
    let p0 = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| ExtremalError::BadInput(format!("momentum fit failed: {e}")))?;
    let residual = (&a * &p0 - &rhs).norm() / rhs.norm().max(1.0);
    Ok((p0, residual))
}

// ---------------------------------------------------------------------------
// covariant acceleration
// ---------------------------------------------------------------------------

/// Per-time covariant acceleration of a trajectory, for systems whose frame
/// is the full coordinate basis (the metric is then a metric on the whole
/// space and has a Levi-Civita connection).
#[derive(Debug, Clone)]
pub struct GeodesicResidual {
    pub times: Vec<f64>,
    /// Norm of the covariant acceleration in a metric-orthonormal frame.
    pub residuals: Vec<f64>,
    /// Metric-orthonormal components of the covariant acceleration.
    pub components: Vec<DVector<f64>>,
    /// Metric speed at each sample.
    pub speeds: Vec<f64>,
    pub unit_speed: bool,
    pub max_residual: f64,
    /// Set when the curve is not unit speed: the residual then mixes genuine
    /// curvature with reparametrization acceleration.
    pub note: Option<String>,
}

/// Evaluates `∇_γ̇ γ̇` along a trajectory for a full-rank coordinate-frame
/// system, in metric-orthonormal components. Christoffel symbols come from
/// symbolic derivatives of the metric; velocities and accelerations from the
/// trajectory's interpolant. `samples = 0` picks 101 uniform times.
pub fn geodesic_residual(
    sys: &ControlSystem,
    traj: &Trajectory,
    samples: usize,
) -> Result<GeodesicResidual, ExtremalError> {
    let n = sys.dim();
    if sys.control_dim() != n {
        return Err(ExtremalError::BadInput(format!(
            "covariant acceleration needs a frame spanning the whole space ({} fields in dimension {n})",
            sys.control_dim()
        )));
    }
    for (i, f) in sys.frame.iter().enumerate() {
        for (k, comp) in f.components.iter().enumerate() {
            let expected = if k == i { 1.0 } else { 0.0 };
            if comp.as_const() != Some(expected) {
                return Err(ExtremalError::BadInput(
                    "covariant acceleration requires the coordinate frame, so the metric entries are metric components in coordinates".into(),
                ));
            }
        }
    }
    let dg = sys.metric_derivatives();
    let samples = if samples == 0 { 101 } else { samples };
    let mut times = Vec::with_capacity(samples);
    let mut residuals = Vec::with_capacity(samples);
    let mut components = Vec::with_capacity(samples);
    let mut speeds = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = traj.t0 + (traj.t1 - traj.t0) * (k as f64) / ((samples - 1).max(1) as f64);
        let (y, v, acc) = traj.sample_with_derivatives(t);
        let qs = y.as_slice();
        let (mmat, chol) = sys.metric_chol_at(qs)?;
        // lowered Christoffel contraction: w_k = ½(∂_i g_jk + ∂_j g_ik − ∂_k g_ij) v_i v_j
        let mut w = DVector::zeros(n);
        for kk in 0..n {
            let mut acc_w = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let gamma = 0.5
                        * (dg[i][j][kk].eval(qs, t)? + dg[j][i][kk].eval(qs, t)?
                            - dg[kk][i][j].eval(qs, t)?);
                    acc_w += gamma * v[i] * v[j];
                }
            }
            w[kk] = acc_w;
        }
        // orthonormal components of a + Γ(v,v): solve L c = M a + w
        let target = &mmat * &acc + &w;
        let c = chol
            .l()
            .solve_lower_triangular(&target)
            .ok_or(ExtremalError::MetricNotPositive)?;
        speeds.push(v.dot(&(&mmat * &v)).max(0.0).sqrt());
        residuals.push(c.norm());
        components.push(c);
        times.push(t);
    }
    let unit_speed = speeds.iter().all(|s| (s - 1.0).abs() <= TOL_UNIT_SPEED);
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let note = (!unit_speed).then(|| {
        "curve is not unit speed: the residual includes reparametrization acceleration".to_string()
    });
    Ok(GeodesicResidual {
        times,
        residuals,
        components,
        speeds,
        unit_speed,
        max_residual,
        note,
    })
}

// ---------------------------------------------------------------------------
// cost-extended tangent data
// ---------------------------------------------------------------------------

/// Tangent directions of the cost graph over the distribution at `(q, u)`:
/// an `(n+1)×d` matrix whose column `i` is the frame field `f_i(q)` extended
/// by the cost rate `g(f_u, f_i)(q)` in the last row (the cost coordinate is
/// always appended last).
pub fn paraboloid_tangent(
    sys: &ControlSystem,
    q: &[f64],
    u: &DVector<f64>,
) -> Result<DMatrix<f64>, ExtremalError> {
    let n = sys.dim();
    let d = sys.control_dim();
    if u.len() != d {
        return Err(ExtremalError::BadInput(format!(
            "control has {} components for a frame of {d} fields",
            u.len()
        )));
    }
    let b = sys.frame_matrix_at(q)?;
    let g = sys.metric_at(q)?;
    let m = &g * u;
    let mut out = DMatrix::zeros(n + 1, d);
    out.view_mut((0, 0), (n, d)).copy_from(&b);
    for i in 0..d {
        out[(n, i)] = m[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_scalar, parse_vector_field};
    use crate::linalg::{DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL};

    fn opts() -> IntegrateOptions {
        IntegrateOptions::default()
    }

    fn system(names: &[&str], fields: &[&[&str]], metric: Option<&[&[&str]]>) -> ControlSystem {
        let c = CoordSystem::new(names).unwrap();
        let frame: Vec<_> = fields
            .iter()
            .map(|f| parse_vector_field(f, &c).unwrap())
            .collect();
        let metric = metric.map(|rows| {
            rows.iter()
                .map(|row| row.iter().map(|e| parse_scalar(e, &c).unwrap()).collect())
                .collect()
        });
        ControlSystem::new(c, frame, metric).unwrap()
    }

    fn heisenberg() -> ControlSystem {
        system(
            &["x", "y", "z"],
            &[&["1", "0", "-y"], &["0", "1", "x"]],
            None,
        )
    }

    fn candidate(sys: &ControlSystem, controls: &[&str], q0: &[f64], t0: f64, t1: f64) -> Candidate {
        let u: Vec<_> = controls
            .iter()
            .map(|s| parse_scalar(s, &sys.coords).unwrap())
            .collect();
        Candidate::new(u, vec![], DVector::from_column_slice(q0), t0, t1).unwrap()
    }

    #[test]
    fn metric_validation_catches_bad_matrices() {
        let asym = system(
            &["x", "y"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "x"], &["0", "1"]]),
        );
        match asym.metric_at(&[3.0, 0.0]) {
            Err(ExtremalError::MetricNotSymmetric { asym }) => assert!(asym > 1.0),
            other => panic!("expected asymmetry error, got {other:?}"),
        }
        let indef = system(
            &["x", "y"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "0"], &["0", "-1"]]),
        );
        assert!(matches!(
            indef.metric_at(&[0.0, 0.0]),
            Err(ExtremalError::MetricNotPositive)
        ));
    }

    #[test]
    fn candidate_controls_must_not_touch_state() {
        let sys = heisenberg();
        let bad = parse_scalar("x + 1", &sys.coords).unwrap();
        let err = Candidate::new(
            vec![bad, ScalarExpr::constant(0.0)],
            vec![],
            DVector::zeros(3),
            0.0,
            1.0,
        );
        assert!(matches!(err, Err(ExtremalError::BadInput(_))));
    }

    #[test]
    fn straight_curve_through_a_rank_drop_is_abnormal() {
        // distribution spanned by ∂x and ∂y + x²∂z: along x = 0 the span and
        // all its transports miss ∂z
        let sys = system(
            &["x", "y", "z"],
            &[&["1", "0", "0"], &["0", "1", "x^2"]],
            None,
        );
        let cand = candidate(&sys, &["0", "1"], &[0.0, 0.0, 0.0], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        assert!(p.unit_speed);
        assert!(p.velocity_residual < 1e-8);
        let rep = abnormal_test(&sys, &p, 0, DEFAULT_TOL_RANK, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::AbnormalCertified);
        assert_eq!(rep.evidence.closure_rank, Some(2));
        assert_eq!(rep.evidence.dim, 3);
    }

    #[test]
    fn bracket_generating_frames_are_never_abnormal() {
        let sys = heisenberg();
        for u in [["0.6", "0.8"], ["1", "0"], ["-0.28", "0.96"]] {
            let cand = candidate(&sys, &[u[0], u[1]], &[0.2, -0.1, 0.4], 0.0, 1.0);
            let p = prepare(&sys, &cand, &opts()).unwrap();
            let rep = abnormal_test(&sys, &p, 0, DEFAULT_TOL_RANK, &opts()).unwrap();
            assert_eq!(rep.verdict, Verdict::NotAbnormal, "controls {u:?}");
            assert_eq!(rep.evidence.closure_rank, Some(3));
        }
    }

    #[test]
    fn characteristic_curve_of_the_rank_two_growth_vector_system() {
        // frame ∂x and ∂y + x∂z + ½x²∂w: the second field is characteristic
        // (all its iterated brackets against the frame stay rank 3)
        let sys = system(
            &["x", "y", "z", "w"],
            &[&["1", "0", "0", "0"], &["0", "1", "x", "x^2/2"]],
            None,
        );
        let cand = candidate(&sys, &["0", "1"], &[0.0; 4], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let rep = abnormal_test(&sys, &p, 0, DEFAULT_TOL_RANK, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::AbnormalCertified);
        assert_eq!(rep.evidence.closure_rank, Some(3));

        // the smooth bracket test agrees and stabilizes
        let rep2 = abnormal_test_smooth(
            &sys,
            &sys.frame[1].clone(),
            &p.traj,
            0,
            0,
            DEFAULT_TOL_RANK,
        )
        .unwrap();
        assert_eq!(rep2.verdict, Verdict::AbnormalCertified);
        assert_eq!(rep2.evidence.closure_rank, Some(3));
        assert!(rep2.evidence.truncation.is_none());
    }

    #[test]
    fn smooth_bracket_test_sees_full_span() {
        let sys = heisenberg();
        let cand = candidate(&sys, &["0.6", "0.8"], &[0.0; 3], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let x = sys.control_field(&p.controls).unwrap();
        let rep = abnormal_test_smooth(&sys, &x, &p.traj, 0, 0, DEFAULT_TOL_RANK).unwrap();
        assert_eq!(rep.verdict, Verdict::NotAbnormal);
        assert_eq!(rep.evidence.closure_rank, Some(3));
    }

    #[test]
    fn smooth_test_rejects_fields_outside_the_distribution() {
        let sys = system(
            &["x", "y", "z"],
            &[&["1", "0", "0"], &["0", "1", "x^2"]],
            None,
        );
        let cand = candidate(&sys, &["0", "1"], &[0.0; 3], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let outside = parse_vector_field(&["0", "0", "1"], &sys.coords).unwrap();
        assert!(matches!(
            abnormal_test_smooth(&sys, &outside, &p.traj, 0, 0, DEFAULT_TOL_RANK),
            Err(ExtremalError::BadInput(_))
        ));
    }

    #[test]
    fn perpendicular_frame_is_metric_orthogonal_to_the_velocity() {
        let sys = heisenberg();
        let cand = candidate(&sys, &["0.6", "0.8"], &[0.1, 0.2, 0.0], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let perp = perp_distribution(&sys, &p).unwrap();
        assert_eq!(perp.frames[0].ncols(), 1);
        // expected direction: 0.8·f1 − 0.6·f2 up to sign and scale
        for (k, q) in perp.states.iter().enumerate() {
            let w = perp.frames[k].column(0).into_owned();
            let b = sys.frame_matrix_at(q.as_slice()).unwrap();
            let expect = &b * DVector::from_column_slice(&[0.8, -0.6]);
            let wn = &w / w.norm();
            let en = &expect / expect.norm();
            let dist = ((&wn - &en).norm()).min((&wn + &en).norm());
            assert!(dist < 1e-9, "misaligned at index {k}: {dist:.3e}");
        }
    }

    #[test]
    fn perpendicular_frame_of_a_single_field_is_empty() {
        let sys = system(&["x", "y"], &[&["1", "0"]], None);
        let cand = candidate(&sys, &["1"], &[0.0, 0.0], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let perp = perp_distribution(&sys, &p).unwrap();
        assert!(perp.frames.iter().all(|f| f.ncols() == 0));
        let rep = normal_test(&sys, &p, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::NormalCertified);
    }

    #[test]
    fn straight_lines_in_the_flat_plane_are_normal() {
        let sys = system(&["x", "y"], &[&["1", "0"], &["0", "1"]], None);
        let cand = candidate(&sys, &["1", "0"], &[0.0, 0.0], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let rep = normal_test(&sys, &p, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::NormalCertified);
        assert_eq!(rep.evidence.closure_rank, Some(1));
        assert!(rep.evidence.min_membership_residual.unwrap() > 0.9);
    }

    #[test]
    fn constant_and_rotating_controls_are_normal() {
        let sys = heisenberg();
        for u in [["0.6", "0.8"], ["cos(t)", "sin(t)"], ["cos(2*t + 0.3)", "sin(2*t + 0.3)"]] {
            let cand = candidate(&sys, &[u[0], u[1]], &[0.0; 3], 0.0, 1.5);
            let p = prepare(&sys, &cand, &opts()).unwrap();
            assert!(p.unit_speed);
            let rep =
                normal_test(&sys, &p, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
            assert_eq!(rep.verdict, Verdict::NormalCertified, "controls {u:?}");
        }
    }

    #[test]
    fn accelerating_rotation_is_not_normal() {
        // turning rate grows linearly in t: the transported complement sweeps
        // enough directions that the velocity falls inside it
        let sys = heisenberg();
        let cand = candidate(&sys, &["cos(t^2)", "sin(t^2)"], &[0.0; 3], 0.0, 1.5);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        assert!(p.unit_speed);
        let rep = normal_test(&sys, &p, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::NotNormal);
    }

    #[test]
    fn corner_controls_are_not_normal() {
        let sys = heisenberg();
        let u1 = parse_scalar("piecewise(0.5 >= t, 1, 0)", &sys.coords).unwrap();
        let u2 = parse_scalar("piecewise(0.5 >= t, 0, 1)", &sys.coords).unwrap();
        let cand = Candidate::new(vec![u1, u2], vec![0.5], DVector::zeros(3), 0.0, 1.0).unwrap();
        let p = prepare(&sys, &cand, &opts()).unwrap();
        assert!(p.unit_speed);
        let rep = normal_test(&sys, &p, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep.verdict, Verdict::NotNormal);
        assert!(rep.evidence.notes.iter().any(|n| n.contains("switching time")));
    }

    #[test]
    fn smooth_normal_test_certifies_plane_and_rejects_latitude() {
        // flat plane, straight unit field
        let plane = system(&["x", "y"], &[&["1", "0"], &["0", "1"]], None);
        let x = parse_vector_field(&["1", "0"], &plane.coords).unwrap();
        let coeffs = [ScalarExpr::constant(1.0), ScalarExpr::constant(0.0)];
        let traj = integrate_flow(
            &TimeDependentField::smooth(x.clone()),
            &DVector::zeros(2),
            0.0,
            1.0,
            &opts(),
        )
        .unwrap();
        let rep = normal_test_smooth(
            &plane, &x, &coeffs, &traj, 0, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL,
        )
        .unwrap();
        assert_eq!(rep.verdict, Verdict::NormalCertified);

        // round-sphere chart: a non-equatorial latitude circle is not a
        // geodesic — the bracket span reaches the velocity
        let sphere = system(
            &["th", "ph"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "0"], &["0", "sin(th)^2"]]),
        );
        let xlat = parse_vector_field(&["0", "1/sin(th)"], &sphere.coords).unwrap();
        let clat = [
            ScalarExpr::constant(0.0),
            parse_scalar("1/sin(th)", &sphere.coords).unwrap(),
        ];
        let start = DVector::from_column_slice(&[std::f64::consts::FRAC_PI_4, 0.0]);
        let tlat = integrate_flow(
            &TimeDependentField::smooth(xlat.clone()),
            &start,
            0.0,
            1.0,
            &opts(),
        )
        .unwrap();
        let rep2 = normal_test_smooth(
            &sphere, &xlat, &clat, &tlat, 0, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL,
        )
        .unwrap();
        assert_eq!(rep2.verdict, Verdict::NotNormal);
    }

    #[test]
    fn flow_normal_test_rejects_latitude_and_certifies_equator() {
        // same round-sphere chart, but through the flow-transport test on
        // candidates; this exercises the neighborhood normalization of the
        // transport field — with the raw control field (constant in these
        // coordinates) the transport would be the identity and the latitude
        // would be falsely certified
        let sphere = system(
            &["th", "ph"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "0"], &["0", "sin(th)^2"]]),
        );
        let lat = Candidate::new(
            vec![
                ScalarExpr::constant(0.0),
                ScalarExpr::constant(std::f64::consts::SQRT_2),
            ],
            vec![],
            DVector::from_column_slice(&[std::f64::consts::FRAC_PI_4, 0.0]),
            0.0,
            1.5,
        )
        .unwrap();
        let p = prepare_unit_speed(&sphere, &lat, &opts()).unwrap();
        let rep = normal_test(&sphere, &p, 41, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts())
            .unwrap();
        assert_eq!(rep.verdict, Verdict::NotNormal);

        let eq = Candidate::new(
            vec![ScalarExpr::constant(0.0), ScalarExpr::constant(1.0)],
            vec![],
            DVector::from_column_slice(&[std::f64::consts::FRAC_PI_2, 0.0]),
            0.0,
            1.5,
        )
        .unwrap();
        let pe = prepare_unit_speed(&sphere, &eq, &opts()).unwrap();
        let rep2 = normal_test(&sphere, &pe, 41, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts())
            .unwrap();
        assert_eq!(rep2.verdict, Verdict::NormalCertified);
    }

    #[test]
    fn smooth_normal_test_on_constant_heisenberg_field() {
        let sys = heisenberg();
        let x = sys
            .control_field(&[ScalarExpr::constant(0.6), ScalarExpr::constant(0.8)])
            .unwrap();
        let traj = integrate_flow(
            &TimeDependentField::smooth(x.clone()),
            &DVector::zeros(3),
            0.0,
            1.0,
            &opts(),
        )
        .unwrap();
        let coeffs = [ScalarExpr::constant(0.6), ScalarExpr::constant(0.8)];
        let rep = normal_test_smooth(
            &sys, &x, &coeffs, &traj, 0, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL,
        )
        .unwrap();
        assert_eq!(rep.verdict, Verdict::NormalCertified);
        // complement plus one bracket: rank 2 of 3, velocity outside
        assert_eq!(rep.evidence.closure_rank, Some(2));
    }

    #[test]
    fn geodesic_flow_closes_the_expected_circle() {
        // with momentum (1, 0, ½) the base curve is the unit circle through
        // the origin: x = sin t, y = 1 − cos t, z = t − sin t
        let sys = heisenberg();
        let q0 = DVector::zeros(3);
        let p0 = DVector::from_column_slice(&[1.0, 0.0, 0.5]);
        let two_pi = 2.0 * std::f64::consts::PI;
        let geo = integrate_normal_geodesic(&sys, &q0, &p0, 0.0, two_pi, &opts()).unwrap();
        assert!(geo.energy_drift < 1e-8, "energy drift {:.3e}", geo.energy_drift);
        assert!((geo.energy0 - 0.5).abs() < 1e-12);
        for k in 0..=50 {
            let t = two_pi * (k as f64) / 50.0;
            let q = geo.traj.sample(t);
            assert!((q[0] - t.sin()).abs() < 1e-6, "x at t={t}");
            assert!((q[1] - (1.0 - t.cos())).abs() < 1e-6, "y at t={t}");
            assert!((q[2] - (t - t.sin())).abs() < 1e-6, "z at t={t}");
        }
        // controls stay unit: g is the identity on this frame
        for u in &geo.controls {
            assert!((u.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn geodesic_flow_in_the_flat_plane_is_straight() {
        let sys = system(&["x", "y"], &[&["1", "0"], &["0", "1"]], None);
        let q0 = DVector::zeros(2);
        let p0 = DVector::from_column_slice(&[0.6, 0.8]);
        let geo = integrate_normal_geodesic(&sys, &q0, &p0, 0.0, 2.0, &opts()).unwrap();
        for k in 0..=10 {
            let t = 2.0 * (k as f64) / 10.0;
            let q = geo.traj.sample(t);
            assert!((q[0] - 0.6 * t).abs() < 1e-9);
            assert!((q[1] - 0.8 * t).abs() < 1e-9);
        }
        assert!(geo.energy_drift < 1e-10);
    }

    #[test]
    fn matched_covector_reproduces_the_circle_candidate() {
        let sys = heisenberg();
        let cand = candidate(&sys, &["cos(t)", "sin(t)"], &[0.0; 3], 0.0, 2.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        let (p0, fit) = match_initial_covector(&sys, &p).unwrap();
        assert!(fit < 1e-10, "fit residual {fit:.3e}");
        assert!((p0[0] - 1.0).abs() < 1e-9);
        assert!(p0[1].abs() < 1e-9);
        assert!((p0[2] - 0.5).abs() < 1e-9);
        // the geodesic from the matched momentum retraces the candidate
        let geo = integrate_normal_geodesic(&sys, &p.traj.states[0], &p0, 0.0, 2.0, &opts()).unwrap();
        for k in 0..=20 {
            let t = 2.0 * (k as f64) / 20.0;
            let err = (geo.traj.sample(t) - p.traj.sample(t)).norm();
            assert!(err < 1e-5, "deviation {err:.3e} at t={t}");
        }
    }

    #[test]
    fn covariant_acceleration_vanishes_on_lines_and_measures_parabolas() {
        let sys = system(&["x", "y"], &[&["1", "0"], &["0", "1"]], None);
        let line = |_t: f64, _y: &DVector<f64>| Ok(DVector::from_column_slice(&[0.6, 0.8]));
        let traj = integrate_ode(&line, &DVector::zeros(2), 0.0, 1.0, &[], &opts()).unwrap();
        let res = geodesic_residual(&sys, &traj, 0).unwrap();
        assert!(res.max_residual < 1e-10);
        assert!(res.unit_speed);
        assert!(res.note.is_none());

        // x = t, y = t²: coordinate acceleration (0, 2), flat metric, so the
        // covariant residual is exactly 2 while the speed varies
        let parab = |t: f64, _y: &DVector<f64>| Ok(DVector::from_column_slice(&[1.0, 2.0 * t]));
        let traj2 = integrate_ode(&parab, &DVector::zeros(2), 0.0, 1.0, &[], &opts()).unwrap();
        let res2 = geodesic_residual(&sys, &traj2, 0).unwrap();
        assert!((res2.max_residual - 2.0).abs() < 1e-6);
        assert!(!res2.unit_speed);
        assert!(res2.note.is_some());
    }

    #[test]
    fn covariant_acceleration_of_integrated_geodesics_is_tiny() {
        // non-flat diagonal metric: the two modules must agree that the
        // Hamiltonian flow produces zero covariant acceleration
        let sys = system(
            &["x", "y"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "0"], &["0", "1 + x^2"]]),
        );
        let q0 = DVector::zeros(2);
        let p0 = DVector::from_column_slice(&[0.3, 0.9]);
        // the residual reads second derivatives off the interpolant, whose
        // accuracy drops two orders below the value's; a capped step keeps
        // that reading error under the assertion
        let mut o = opts();
        o.max_step = Some(0.05);
        let geo = integrate_normal_geodesic(&sys, &q0, &p0, 0.0, 1.5, &o).unwrap();
        let res = geodesic_residual(&sys, &geo.traj, 0).unwrap();
        assert!(res.max_residual < 1e-6, "residual {:.3e}", res.max_residual);
    }

    #[test]
    fn covariant_acceleration_rejects_non_coordinate_frames() {
        let sys = heisenberg();
        let cand = candidate(&sys, &["1", "0"], &[0.0; 3], 0.0, 1.0);
        let p = prepare(&sys, &cand, &opts()).unwrap();
        assert!(matches!(
            geodesic_residual(&sys, &p.traj, 0),
            Err(ExtremalError::BadInput(_))
        ));
    }

    #[test]
    fn cost_extended_tangent_columns() {
        let sys = heisenberg();
        let q = [0.0, 0.0, 0.0];
        let zero = paraboloid_tangent(&sys, &q, &DVector::from_column_slice(&[0.0, 0.0])).unwrap();
        assert_eq!(zero.nrows(), 4);
        assert_eq!(zero.ncols(), 2);
        assert_eq!(zero.row(3).iter().copied().fold(0.0, f64::max), 0.0);
        let one = paraboloid_tangent(&sys, &q, &DVector::from_column_slice(&[1.0, 0.0])).unwrap();
        assert_eq!(one[(0, 0)], 1.0);
        assert_eq!(one[(3, 0)], 1.0); // cost rate against the first field
        assert_eq!(one[(3, 1)], 0.0);
    }

    #[test]
    fn arc_length_reparametrization_of_constant_speed() {
        let sys = system(&["x", "y"], &[&["1", "0"], &["0", "1"]], None);
        let cand = candidate(&sys, &["2", "0"], &[0.0, 0.0], 0.0, 1.0);
        let p = prepare_unit_speed(&sys, &cand, &opts()).unwrap();
        assert!(p.rescaled);
        assert!(p.unit_speed);
        assert!((p.traj.t1 - 2.0).abs() < 1e-12);
        // same endpoint, twice the time
        let end = p.traj.end();
        assert!((end[0] - 2.0).abs() < 1e-9);

        let varying = candidate(&sys, &["t + 1", "0"], &[0.0, 0.0], 0.0, 1.0);
        assert!(matches!(
            prepare_unit_speed(&sys, &varying, &opts()),
            Err(ExtremalError::NonConstantSpeed { .. })
        ));
    }

    #[test]
    fn classify_combines_both_tests() {
        let sys = system(
            &["x", "y", "z"],
            &[&["1", "0", "0"], &["0", "1", "x^2"]],
            None,
        );
        let cand = candidate(&sys, &["0", "1"], &[0.0; 3], 0.0, 1.0);
        let rep = classify(&sys, &cand, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep.abnormal.verdict, Verdict::AbnormalCertified);
        assert_eq!(rep.overall(), Verdict::AbnormalCertified);
        let doc = rep.to_json();
        assert_eq!(doc["overall"], "ABNORMAL_CERTIFIED");

        let h = heisenberg();
        let line = candidate(&h, &["0.6", "0.8"], &[0.0; 3], 0.0, 1.0);
        let rep2 = classify(&h, &line, 0, DEFAULT_TOL_RANK, DEFAULT_TOL_RESIDUAL, &opts()).unwrap();
        assert_eq!(rep2.abnormal.verdict, Verdict::NotAbnormal);
        assert_eq!(rep2.normal.verdict, Verdict::NormalCertified);
        assert_eq!(rep2.overall(), Verdict::NormalCertified);
    }

    #[test]
    fn riemannian_systems_are_never_abnormal() {
        // full-rank frames: the distribution is the whole tangent space, so
        // the transported span is always full
        let sys = system(
            &["x", "y"],
            &[&["1", "0"], &["0", "1"]],
            Some(&[&["1", "0"], &["0", "1 + x^2"]]),
        );
        for u in [["1", "0"], ["0.3", "0.7"], ["cos(t)", "sin(t)"]] {
            let cand = candidate(&sys, &[u[0], u[1]], &[0.1, -0.2], 0.0, 1.0);
            let p = prepare(&sys, &cand, &opts()).unwrap();
            let rep = abnormal_test(&sys, &p, 0, DEFAULT_TOL_RANK, &opts()).unwrap();
            assert_eq!(rep.verdict, Verdict::NotAbnormal, "controls {u:?}");
        }
    }
}
