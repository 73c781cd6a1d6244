//! Flows of time-dependent vector fields: adaptive embedded Runge–Kutta 5(4)
//! integration with dense output, plus the tangent (variational) and adjoint
//! (covector) transports along a trajectory.
//!
//! Conventions used throughout the crate:
//! * the tangent transport `V(t)` solves `V̇ = (∂X/∂x)(x(t), t) · V`,
//!   `V(t0) = I`, so `V(t)` is the derivative of the `t0 → t` flow map at the
//!   initial point and `V(t) V(τ)^{-1}` is the derivative of the `τ → t` map
//!   along the trajectory;
//! * the adjoint transport solves `λ̇ = −(∂X/∂x)ᵀ λ`, which conserves the
//!   pairing `⟨λ(t), V(t) v⟩` for every fixed `v`;
//! * integration grids contain every control breakpoint that lies in the
//!   window, and no accepted step straddles one.

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use thiserror::Error;

use crate::expr::{CoordSystem, EvalError, JacobianExpr, VectorFieldExpr};

/// A vector field whose components may mention `t`, together with the times
/// where it may switch discontinuously (control breakpoints).
#[derive(Debug, Clone)]
pub struct TimeDependentField {
    pub field: VectorFieldExpr,
    /// Sorted times where the field may be discontinuous in `t`.
    pub breakpoints: Vec<f64>,
}

impl TimeDependentField {
    pub fn new(field: VectorFieldExpr, mut breakpoints: Vec<f64>) -> Self {
        breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breakpoints.dedup();
        TimeDependentField { field, breakpoints }
    }

    /// A field with no switching times (it may still mention `t` smoothly).
    pub fn smooth(field: VectorFieldExpr) -> Self {
        TimeDependentField {
            field,
            breakpoints: vec![],
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }
}

/// Integration controls. `tol` is used as both absolute and relative local
/// error tolerance per step.
#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    pub tol: f64,
    pub max_step: Option<f64>,
    pub max_steps: usize,
    /// Hard bound on `‖x‖_∞`; exceeding it aborts with [`FlowError::Blowup`].
    pub blowup: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            tol: 1e-10,
            max_step: None,
            max_steps: 1_000_000,
            blowup: 1e9,
        }
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("evaluation failed at t = {t}: {source}")]
    Eval { t: f64, source: EvalError },
    #[error("solution norm {norm:.3e} exceeded the blow-up bound at t = {t}")]
    Blowup { t: f64, norm: f64 },
    #[error("step size underflow at t = {t} (stiffness or a non-integrable singularity)")]
    StepSizeUnderflow { t: f64 },
    #[error("exceeded the step budget at t = {t}")]
    MaxStepsExceeded { t: f64 },
    #[error("{0}")]
    BadInput(String),
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
// embedded error coefficients (5th order minus 4th order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// dense-output coefficients
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step's quartic interpolant: evaluate with [`DenseSegment::at`].
#[derive(Debug, Clone)]
struct DenseSegment {
    t_left: f64,
    h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseSegment {
    fn at(&self, t: f64) -> DVector<f64> {
        let theta = (t - self.t_left) / self.h;
        let theta1 = 1.0 - theta;
        &self.cont[0]
            + theta
                * (&self.cont[1]
                    + theta1 * (&self.cont[2] + theta * (&self.cont[3] + theta1 * &self.cont[4])))
    }

    /// Value plus exact first and second t-derivatives of the interpolation
    /// polynomial (the derivatives approximate those of the true solution one
    /// and two orders below the value's accuracy).
    fn with_derivatives(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let theta = (t - self.t_left) / self.h;
        let theta1 = 1.0 - theta;
        // y = c0 + θ·A with A = c1 + (1−θ)·B, B = c2 + θ·C, C = c3 + (1−θ)·c4
        let c = &self.cont;
        let cc = &c[3] + theta1 * &c[4];
        let b = &c[2] + theta * &cc;
        let a = &c[1] + theta1 * &b;
        let bp = &cc - theta * &c[4];
        let ap = theta1 * &bp - &b;
        let app = -2.0 * &bp + theta1 * (-2.0 * &c[4]);
        let y = &c[0] + theta * &a;
        let yp = (&a + theta * &ap) / self.h;
        let ypp = (2.0 * ap + theta * app) / (self.h * self.h);
        (y, yp, ypp)
    }
}

/// A solved initial value problem: states on the accepted-step grid plus a
/// dense interpolant for off-grid sampling.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub t0: f64,
    pub t1: f64,
    /// Accepted step times from `t0` to `t1` in integration order.
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    segments: Vec<DenseSegment>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// State at any `t` in the integration window (5th-order interpolant on
    /// accepted steps, exact at grid points).
    pub fn sample(&self, t: f64) -> DVector<f64> {
        match self.segment_index(t) {
            Some(pos) => self.segments[pos].at(t),
            None => self.states[0].clone(),
        }
    }

    /// State together with its first and second time derivatives at `t`,
    /// obtained by differentiating the interpolation polynomial exactly. The
    /// derivatives lose one and two orders of accuracy relative to the value
    /// but stay smooth within each accepted step, which beats finite
    /// differences whenever the stencil would straddle a step boundary.
    pub fn sample_with_derivatives(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        match self.segment_index(t) {
            Some(pos) => self.segments[pos].with_derivatives(t),
            None => {
                let n = self.dim();
                (self.states[0].clone(), DVector::zeros(n), DVector::zeros(n))
            }
        }
    }

    /// Restriction to the coordinate block `[offset, offset+len)`: the same
    /// time grid and interpolants, keeping only those state components. Useful
    /// for extracting the base-point part of a phase-space solution.
    pub fn project(&self, offset: usize, len: usize) -> Trajectory {
        assert!(
            offset + len <= self.dim(),
            "projection window {offset}..{} exceeds state dimension {}",
            offset + len,
            self.dim()
        );
        Trajectory {
            t0: self.t0,
            t1: self.t1,
            grid: self.grid.clone(),
            states: self.states.iter().map(|x| x.rows(offset, len).into_owned()).collect(),
            segments: self
                .segments
                .iter()
                .map(|s| DenseSegment {
                    t_left: s.t_left,
                    h: s.h,
                    cont: std::array::from_fn(|i| s.cont[i].rows(offset, len).into_owned()),
                })
                .collect(),
        }
    }

    fn segment_index(&self, t: f64) -> Option<usize> {
        let dir = (self.t1 - self.t0).signum();
        let span = (self.t1 - self.t0).abs().max(1.0);
        debug_assert!(
            (t - self.t0) * dir >= -1e-9 * span && (t - self.t1) * dir <= 1e-9 * span,
            "sample time {t} outside [{}, {}]",
            self.t0,
            self.t1
        );
        if self.segments.is_empty() {
            return None;
        }
        // binary search for the segment whose [t_left, t_left+h] contains t
        Some(
            self.segments
                .partition_point(|s| (t - (s.t_left + s.h)) * dir > 0.0)
                .min(self.segments.len() - 1),
        )
    }

    /// CSV rows `t, x_1..x_n[, u_1..u_d]` on the grid. The control sampler, if
    /// given, is evaluated at each grid time.
    pub fn to_csv(
        &self,
        coords: &CoordSystem,
        controls: Option<(&[String], &dyn Fn(f64) -> Vec<f64>)>,
    ) -> String {
        let mut out = String::from("t");
        for n in coords.names() {
            out.push(',');
            out.push_str(n);
        }
        if let Some((names, _)) = controls {
            for n in names {
                out.push(',');
                out.push_str(n);
            }
        }
        out.push('\n');
        for (t, x) in self.grid.iter().zip(&self.states) {
            out.push_str(&format!("{t:.17e}"));
            for v in x.iter() {
                out.push_str(&format!(",{v:.17e}"));
            }
            if let Some((_, f)) = controls {
                for v in f(*t) {
                    out.push_str(&format!(",{v:.17e}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// JSON document with the grid, states, and optional control samples.
    pub fn to_json(
        &self,
        coords: &CoordSystem,
        controls: Option<(&[String], &dyn Fn(f64) -> Vec<f64>)>,
    ) -> serde_json::Value {
        let states: Vec<Vec<f64>> = self.states.iter().map(|x| x.iter().copied().collect()).collect();
        let mut doc = json!({
            "t0": self.t0,
            "t1": self.t1,
            "coords": coords.names(),
            "grid": self.grid,
            "states": states,
        });
        if let Some((names, f)) = controls {
            let samples: Vec<Vec<f64>> = self.grid.iter().map(|t| f(*t)).collect();
            doc["control_names"] = json!(names);
            doc["controls"] = json!(samples);
        }
        doc
    }
}

/// Right-hand side abstraction for the raw integrator.
pub type Rhs<'a> = dyn Fn(f64, &DVector<f64>) -> Result<DVector<f64>, EvalError> + 'a;

/// Integrates an arbitrary closure right-hand side with the adaptive stepper,
/// splitting at the interior `breakpoints` so no step straddles one. This is
/// the escape hatch for systems assembled at runtime (phase-space lifts,
/// augmented costs) that have no symbolic vector-field form.
pub fn integrate_ode(
    rhs: &Rhs,
    y0: &DVector<f64>,
    t0: f64,
    t1: f64,
    breakpoints: &[f64],
    opts: &IntegrateOptions,
) -> Result<Trajectory, FlowError> {
    let raw = integrate_raw(rhs, y0, t0, t1, breakpoints, opts)?;
    Ok(Trajectory { t0, t1, grid: raw.grid, states: raw.states, segments: raw.segments })
}

struct RawSolution {
    grid: Vec<f64>,
    states: Vec<DVector<f64>>,
    segments: Vec<DenseSegment>,
}

/// Integrates `rhs` from `t0` to `t1` (either direction), splitting at the
/// given interior breakpoints so no step straddles a switching time.
fn integrate_raw(
    rhs: &Rhs,
    y0: &DVector<f64>,
    t0: f64,
    t1: f64,
    breakpoints: &[f64],
    opts: &IntegrateOptions,
) -> Result<RawSolution, FlowError> {
    let mut grid = vec![t0];
    let mut states = vec![y0.clone()];
    let mut segments = Vec::new();
    if t0 == t1 {
        return Ok(RawSolution { grid, states, segments });
    }
    let dir = (t1 - t0).signum();
    // interior breakpoints in integration order
    let mut stops: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|b| (b - t0) * dir > 1e-14 * (t1 - t0).abs() && (t1 - b) * dir > 1e-14 * (t1 - t0).abs())
        .collect();
    stops.sort_by(|a, b| ((a - t0) * dir).partial_cmp(&((b - t0) * dir)).unwrap());
    stops.dedup();
    stops.push(t1);

    let mut y = y0.clone();
    let mut t = t0;
    let mut steps_used = 0usize;
    for stop in stops {
        // A time guard switches branch exactly at a breakpoint (on whichever
        // side its inequality favors), so stage evaluations at a span
        // boundary that is a switching time must be pulled one-sided into
        // the span: left limit at the upper boundary, right limit at the
        // lower one. Each span then sees a field smooth in time.
        let hi = t.max(stop);
        let lo = t.min(stop);
        let is_break = |v: f64| {
            breakpoints
                .iter()
                .any(|b| (b - v).abs() <= 1e-12 * v.abs().max(1.0))
        };
        let hi_is_break = is_break(hi);
        let lo_is_break = is_break(lo);
        let delta_hi = 1e-13 * hi.abs().max(1.0);
        let delta_lo = 1e-13 * lo.abs().max(1.0);
        let span_rhs = move |tt: f64, yy: &DVector<f64>| -> Result<DVector<f64>, EvalError> {
            let te = if hi_is_break && (tt - hi).abs() <= delta_hi {
                hi - delta_hi
            } else if lo_is_break && (tt - lo).abs() <= delta_lo {
                lo + delta_lo
            } else {
                tt
            };
            rhs(te, yy)
        };
        integrate_span(
            &span_rhs, &mut y, &mut t, stop, dir, opts, &mut steps_used, &mut grid, &mut states,
            &mut segments,
        )?;
    }
    Ok(RawSolution { grid, states, segments })
}

/// Integrates one smooth span `[*t, stop]`, appending to the output arrays.
#[allow(clippy::too_many_arguments)]
fn integrate_span(
    rhs: &Rhs,
    y: &mut DVector<f64>,
    t: &mut f64,
    stop: f64,
    dir: f64,
    opts: &IntegrateOptions,
    steps_used: &mut usize,
    grid: &mut Vec<f64>,
    states: &mut Vec<DVector<f64>>,
    segments: &mut Vec<DenseSegment>,
) -> Result<(), FlowError> {
    let n = y.len();
    let tol = opts.tol.max(1e-15);
    let eval = |tt: f64, yy: &DVector<f64>| -> Result<DVector<f64>, FlowError> {
        rhs(tt, yy).map_err(|source| FlowError::Eval { t: tt, source })
    };

    let mut k1 = eval(*t, y)?;
    // initial step size: small trial based on the first derivative's scale
    let mut h = {
        let sc = |v: &DVector<f64>, w: &DVector<f64>| -> f64 {
            (0..n)
                .map(|i| (v[i] / (tol + tol * w[i].abs())).powi(2))
                .sum::<f64>()
                .sqrt()
                / (n as f64).sqrt()
        };
        let d0 = sc(y, y);
        let d1 = sc(&k1, y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        h0 = h0.min((stop - *t).abs());
        let y1 = &*y + dir * h0 * &k1;
        let k2 = eval(*t + dir * h0, &y1)?;
        let d2 = sc(&(&k2 - &k1), y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min((stop - *t).abs())
    };
    if let Some(ms) = opts.max_step {
        h = h.min(ms);
    }

    let mut fresh_k1 = false; // k1 currently valid at (t, y)
    let mut k1_valid = true;
    loop {
        if (stop - *t) * dir <= 1e-14 * stop.abs().max(1.0) {
            // snap the endpoint exactly
            *grid.last_mut().unwrap() = stop;
            *t = stop;
            return Ok(());
        }
        if *steps_used >= opts.max_steps {
            return Err(FlowError::MaxStepsExceeded { t: *t });
        }
        *steps_used += 1;
        let remaining = (stop - *t).abs();
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(FlowError::StepSizeUnderflow { t: *t });
        }
        let mut hh = h.min(remaining);
        // stretch the final step slightly instead of leaving a sliver
        if remaining - hh < 0.05 * hh {
            hh = remaining;
        }
        let hs = dir * hh; // signed step

        if !k1_valid {
            k1 = eval(*t, y)?;
            k1_valid = true;
        }
        let _ = fresh_k1;

        // the seven stages; an evaluation failure rejects the step and halves h
        let stages = (|| -> Result<_, FlowError> {
            let y2 = &*y + hs * A21 * &k1;
            let k2 = eval(*t + C2 * hs, &y2)?;
            let y3 = &*y + hs * (A31 * &k1 + A32 * &k2);
            let k3 = eval(*t + C3 * hs, &y3)?;
            let y4 = &*y + hs * (A41 * &k1 + A42 * &k2 + A43 * &k3);
            let k4 = eval(*t + C4 * hs, &y4)?;
            let y5 = &*y + hs * (A51 * &k1 + A52 * &k2 + A53 * &k3 + A54 * &k4);
            let k5 = eval(*t + C5 * hs, &y5)?;
            let y6 = &*y + hs * (A61 * &k1 + A62 * &k2 + A63 * &k3 + A64 * &k4 + A65 * &k5);
            let k6 = eval(*t + hs, &y6)?;
            let ynew = &*y + hs * (B1 * &k1 + B3 * &k3 + B4 * &k4 + B5 * &k5 + B6 * &k6);
            let k7 = eval(*t + hs, &ynew)?;
            Ok((k3, k4, k5, k6, k7, ynew))
        })();
        let (k3, k4, k5, k6, k7, ynew) = match stages {
            Ok(v) => v,
            Err(e) => {
                // a domain error inside the trial step: treat as a rejection
                h = hh * 0.5;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(e);
                }
                continue;
            }
        };

        // scaled error estimate
        let errvec = hs * (E1 * &k1 + E3 * &k3 + E4 * &k4 + E5 * &k5 + E6 * &k6 + E7 * &k7);
        let mut err = 0.0;
        for i in 0..n {
            let sc = tol + tol * y[i].abs().max(ynew[i].abs());
            err += (errvec[i] / sc).powi(2);
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() {
            h = hh * 0.25;
            continue;
        }
        if err <= 1.0 {
            // accept
            let tnew = *t + hs;
            let norm = ynew.amax();
            if norm > opts.blowup {
                return Err(FlowError::Blowup { t: tnew, norm });
            }
            let ydiff = &ynew - &*y;
            let bspl = hs * &k1 - &ydiff;
            let cont4 = &ydiff - hs * &k7 - &bspl;
            let cont5 =
                hs * (D1 * &k1 + D3 * &k3 + D4 * &k4 + D5 * &k5 + D6 * &k6 + D7 * &k7);
            segments.push(DenseSegment {
                t_left: *t,
                h: hs,
                cont: [y.clone(), ydiff, bspl, cont4, cont5],
            });
            *y = ynew;
            *t = tnew;
            grid.push(tnew);
            states.push(y.clone());
            k1 = k7; // first-same-as-last
            fresh_k1 = true;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 10.0);
            h = hh * fac;
            if let Some(ms) = opts.max_step {
                h = h.min(ms);
            }
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            h = hh * fac;
        }
    }
}

/// Integrates the flow of `f` from `x0` over `[t0, t1]` (either direction).
pub fn integrate_flow(
    f: &TimeDependentField,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory, FlowError> {
    if x0.len() != f.dim() {
        return Err(FlowError::BadInput(format!(
            "initial state has dimension {}, field has {}",
            x0.len(),
            f.dim()
        )));
    }
    let rhs = |t: f64, y: &DVector<f64>| f.field.eval(y.as_slice(), t);
    let raw = integrate_raw(&rhs, x0, t0, t1, &f.breakpoints, opts)?;
    Ok(Trajectory {
        t0,
        t1,
        grid: raw.grid,
        states: raw.states,
        segments: raw.segments,
    })
}

/// End state of the `t0 → t1` flow from `x0`.
pub fn flow_map(
    f: &TimeDependentField,
    x0: &DVector<f64>,
    t0: f64,
    t1: f64,
    opts: &IntegrateOptions,
) -> Result<DVector<f64>, FlowError> {
    Ok(integrate_flow(f, x0, t0, t1, opts)?.end().clone())
}

/// Tangent transport `V(t)` along a trajectory: solution of the variational
/// equation `V̇ = (∂X/∂x) V`, `V(t0) = I`, integrated jointly with the base
/// state as one augmented system.
#[derive(Debug, Clone)]
pub struct TangentTransport {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub mats: Vec<DMatrix<f64>>,
    dim: usize,
    aug: Trajectory,
}

impl TangentTransport {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.aug.t0
    }

    pub fn t1(&self) -> f64 {
        self.aug.t1
    }

    /// `V(t)` anywhere in the window.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let n = self.dim;
        let y = self.aug.sample(t);
        mat_from_aug(&y, n)
    }

    /// Base state anywhere in the window.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let y = self.aug.sample(t);
        DVector::from_column_slice(&y.as_slice()[..self.dim])
    }

    /// `V(t) V(τ)^{-1}`: the derivative of the `τ → t` flow map along the
    /// trajectory.
    pub fn between(&self, t: f64, tau: f64) -> DMatrix<f64> {
        let vt = self.at(t);
        let vtau = self.at(tau);
        let lu = vtau.transpose().lu();
        lu.solve(&vt.transpose())
            .expect("tangent transport became singular")
            .transpose()
    }

    /// Pushes `v` from the fiber over `x(τ)` to the fiber over `x(t)`.
    pub fn transport(&self, tau: f64, t: f64, v: &DVector<f64>) -> DVector<f64> {
        let vtau = self.at(tau);
        let w = vtau
            .lu()
            .solve(v)
            .expect("tangent transport became singular");
        self.at(t) * w
    }

    /// `det V(t)` on the grid — a quick invertibility diagnostic.
    pub fn det_profile(&self) -> Vec<f64> {
        self.mats.iter().map(|m| m.clone().lu().determinant()).collect()
    }
}

fn mat_from_aug(y: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] = y[n + j * n + i];
        }
    }
    m
}

/// Integrates the variational equation along (a re-integration of) `traj`,
/// returning matrices aligned with `traj.grid`.
pub fn integrate_tangent(
    f: &TimeDependentField,
    traj: &Trajectory,
    opts: &IntegrateOptions,
) -> Result<TangentTransport, FlowError> {
    let n = f.dim();
    if traj.dim() != n {
        return Err(FlowError::BadInput(
            "trajectory dimension does not match the field".into(),
        ));
    }
    let jac = f.field.jacobian();
    let rhs = make_tangent_rhs(&f.field, &jac, n);
    let mut y0 = DVector::zeros(n + n * n);
    y0.rows_mut(0, n).copy_from(traj.start());
    for i in 0..n {
        y0[n + i * n + i] = 1.0;
    }
    let raw = integrate_raw(&rhs, &y0, traj.t0, traj.t1, &f.breakpoints, opts)?;
    let aug = Trajectory {
        t0: traj.t0,
        t1: traj.t1,
        grid: raw.grid,
        states: raw.states,
        segments: raw.segments,
    };
    let grid = traj.grid.clone();
    let mut states = Vec::with_capacity(grid.len());
    let mut mats = Vec::with_capacity(grid.len());
    for &t in &grid {
        let y = aug.sample(t);
        states.push(DVector::from_column_slice(&y.as_slice()[..n]));
        mats.push(mat_from_aug(&y, n));
    }
    Ok(TangentTransport {
        grid,
        states,
        mats,
        dim: n,
        aug,
    })
}

fn make_tangent_rhs<'a>(
    field: &'a VectorFieldExpr,
    jac: &'a JacobianExpr,
    n: usize,
) -> impl Fn(f64, &DVector<f64>) -> Result<DVector<f64>, EvalError> + 'a {
    move |t: f64, y: &DVector<f64>| {
        let x = &y.as_slice()[..n];
        let fx = field.eval(x, t)?;
        let j = jac.eval(x, t)?;
        let mut dy = DVector::zeros(n + n * n);
        dy.rows_mut(0, n).copy_from(&fx);
        // V̇ = J V, column by column
        for col in 0..n {
            let v = DVector::from_column_slice(&y.as_slice()[n + col * n..n + (col + 1) * n]);
            let jv = &j * v;
            dy.rows_mut(n + col * n, n).copy_from(&jv);
        }
        Ok(dy)
    }
}

/// Adjoint (covector) transport along a trajectory: `λ̇ = −(∂X/∂x)ᵀ λ`,
/// integrated jointly with the base state. Conserves `⟨λ(t), V(t)v⟩`.
#[derive(Debug, Clone)]
pub struct CovectorTransport {
    pub grid: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub covectors: Vec<DVector<f64>>,
    dim: usize,
    aug: Trajectory,
}

impl CovectorTransport {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `λ(t)` anywhere in the window.
    pub fn at(&self, t: f64) -> DVector<f64> {
        let y = self.aug.sample(t);
        DVector::from_column_slice(&y.as_slice()[self.dim..])
    }

    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let y = self.aug.sample(t);
        DVector::from_column_slice(&y.as_slice()[..self.dim])
    }
}

/// Integrates the adjoint equation along `traj` from the covector `lam` given
/// at time `at` (which must be one of the trajectory's endpoints). The result
/// is aligned with `traj.grid` regardless of the integration direction.
pub fn integrate_adjoint(
    f: &TimeDependentField,
    traj: &Trajectory,
    lam: &DVector<f64>,
    at: f64,
    opts: &IntegrateOptions,
) -> Result<CovectorTransport, FlowError> {
    let n = f.dim();
    if traj.dim() != n || lam.len() != n {
        return Err(FlowError::BadInput(
            "dimension mismatch between field, trajectory, and covector".into(),
        ));
    }
    let span = (traj.t1 - traj.t0).abs().max(1.0);
    let (from, to, x_from) = if (at - traj.t0).abs() <= 1e-9 * span {
        (traj.t0, traj.t1, traj.start().clone())
    } else if (at - traj.t1).abs() <= 1e-9 * span {
        (traj.t1, traj.t0, traj.end().clone())
    } else {
        return Err(FlowError::BadInput(format!(
            "covector must be given at an endpoint; got t = {at}"
        )));
    };
    let jac = f.field.jacobian();
    let rhs = move |t: f64, y: &DVector<f64>| -> Result<DVector<f64>, EvalError> {
        let x = &y.as_slice()[..n];
        let fx = f.field.eval(x, t)?;
        let j = jac.eval(x, t)?;
        let l = DVector::from_column_slice(&y.as_slice()[n..]);
        let dl = -(j.transpose() * l);
        let mut dy = DVector::zeros(2 * n);
        dy.rows_mut(0, n).copy_from(&fx);
        dy.rows_mut(n, n).copy_from(&dl);
        Ok(dy)
    };
    let mut y0 = DVector::zeros(2 * n);
    y0.rows_mut(0, n).copy_from(&x_from);
    y0.rows_mut(n, n).copy_from(lam);
    let raw = integrate_raw(&rhs, &y0, from, to, &f.breakpoints, opts)?;
    let aug = Trajectory {
        t0: from,
        t1: to,
        grid: raw.grid,
        states: raw.states,
        segments: raw.segments,
    };
    let grid = traj.grid.clone();
    let mut states = Vec::with_capacity(grid.len());
    let mut covectors = Vec::with_capacity(grid.len());
    for &t in &grid {
        let y = aug.sample(t);
        states.push(DVector::from_column_slice(&y.as_slice()[..n]));
        covectors.push(DVector::from_column_slice(&y.as_slice()[n..]));
    }
    Ok(CovectorTransport {
        grid,
        states,
        covectors,
        dim: n,
        aug,
    })
}
