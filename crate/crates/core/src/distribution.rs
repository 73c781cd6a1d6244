//! Distributions along a curve: per-time spanning frames over a trajectory,
//! their transport by the flow, the minimal flow-invariant closure, the
//! flow-vs-bracket invariance tests, and metric orthonormalization.

use nalgebra::{DMatrix, DVector};
use serde_json::json;
use thiserror::Error;

use crate::bracket::{ad_td, bracket_along_curve, BracketError, CurveSection};
use crate::expr::{EvalError, VectorFieldExpr};
use crate::flow::{
    integrate_tangent, FlowError, IntegrateOptions, TangentTransport, TimeDependentField,
    Trajectory,
};
use crate::linalg::{numerical_rank, span_residual, RankResult};

/// How a frame's per-time spanning vectors were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Pointwise restriction of symbolic vector fields to the curve.
    SymbolicRestriction,
    /// A fixed basis pushed along the curve by the tangent transport.
    FlowTransport,
    /// Span of iterated brackets.
    BracketClosure,
    /// Raw per-time samples with no extra structure.
    Samples,
}

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("this operation requires constant rank, but per-time ranks range over {min}..={max}")]
    NonConstantRank { min: usize, max: usize },
    #[error("singular tangent transport at t = {t}")]
    SingularTransport { t: f64 },
    #[error("dependent input at time index {time_index}: column {column} lies in the span of its predecessors")]
    GramDependence { time_index: usize, column: usize },
    #[error("flow integration failed: {0}")]
    Flow(#[from] FlowError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("bracket computation failed: {0}")]
    Bracket(#[from] BracketError),
    #[error("{0}")]
    BadInput(String),
}

/// A distribution along a curve, stored as one spanning matrix per grid time.
#[derive(Debug, Clone)]
pub struct FrameAlongCurve {
    pub times: Vec<f64>,
    /// Base points `x(t_k)`.
    pub states: Vec<DVector<f64>>,
    /// `dim × r_k` matrices whose columns span the fiber at `x(t_k)`.
    pub frames: Vec<DMatrix<f64>>,
    /// Numerical rank of each frame matrix.
    pub ranks: Vec<usize>,
    pub provenance: Provenance,
    /// Symbolic generators when the frame is a restriction of vector fields;
    /// they enable exact bracket computations.
    pub sections: Option<Vec<VectorFieldExpr>>,
}

impl FrameAlongCurve {
    /// Restriction of symbolic fields to the trajectory, one frame per grid
    /// time.
    pub fn from_fields(
        fields: &[VectorFieldExpr],
        traj: &Trajectory,
        tol_rank: f64,
    ) -> Result<Self, EvalError> {
        let mut frames = Vec::with_capacity(traj.grid.len());
        let mut ranks = Vec::with_capacity(traj.grid.len());
        for (t, x) in traj.grid.iter().zip(&traj.states) {
            let cols: Vec<DVector<f64>> = fields
                .iter()
                .map(|f| f.eval(x.as_slice(), *t))
                .collect::<Result<_, _>>()?;
            let m = DMatrix::from_columns(&cols);
            ranks.push(numerical_rank(&m, tol_rank).rank);
            frames.push(m);
        }
        Ok(FrameAlongCurve {
            times: traj.grid.clone(),
            states: traj.states.clone(),
            frames,
            ranks,
            provenance: Provenance::SymbolicRestriction,
            sections: Some(fields.to_vec()),
        })
    }

    /// A fixed basis at the start time pushed along the curve by the tangent
    /// transport: frames at different times are related by the transport
    /// matrices exactly.
    pub fn from_transport(
        tt: &TangentTransport,
        basis0: &DMatrix<f64>,
        tol_rank: f64,
    ) -> Self {
        let mut frames = Vec::with_capacity(tt.grid.len());
        let mut ranks = Vec::with_capacity(tt.grid.len());
        for v in &tt.mats {
            let m = v * basis0;
            ranks.push(numerical_rank(&m, tol_rank).rank);
            frames.push(m);
        }
        FrameAlongCurve {
            times: tt.grid.clone(),
            states: tt.states.clone(),
            frames,
            ranks,
            provenance: Provenance::FlowTransport,
            sections: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The common rank, if the per-time ranks are all equal.
    pub fn constant_rank(&self) -> Option<usize> {
        let r = *self.ranks.first()?;
        self.ranks.iter().all(|x| *x == r).then_some(r)
    }

    /// Time-indexed frames as a JSON document (one matrix per grid time,
    /// column vectors as rows of numbers).
    pub fn to_json(&self) -> serde_json::Value {
        let frames: Vec<Vec<Vec<f64>>> = self
            .frames
            .iter()
            .map(|m| {
                (0..m.ncols())
                    .map(|j| m.column(j).iter().copied().collect())
                    .collect()
            })
            .collect();
        let states: Vec<Vec<f64>> = self
            .states
            .iter()
            .map(|x| x.iter().copied().collect())
            .collect();
        json!({
            "times": self.times,
            "states": states,
            "ranks": self.ranks,
            "frames": frames,
        })
    }
}

/// Result of [`transport_closure`]: the smallest flow-invariant distribution
/// along the curve containing the input.
#[derive(Debug)]
pub struct ClosureResult {
    pub frame: FrameAlongCurve,
    pub rank: usize,
    /// Rank decision for the pooled pulled-back spanning set.
    pub rank_detail: RankResult,
    /// Worst relative residual of an input vector against the closure.
    pub containment_defect: f64,
}

/// Smallest flow-invariant distribution along the curve that contains `b`:
/// the span over sample times `τ` of the input fibers transported to each
/// time. Every fiber of `b(τ)` is pulled back to the start time with
/// `V(τ)^{-1}`, the pool is compressed to an orthonormal basis by SVD (rank
/// decided by `tol_rank`), and that basis is pushed to every grid time.
///
/// `tau_samples` = 0 pools every grid time; a positive value subsamples that
/// many times uniformly (which can only under-approximate the closure).
pub fn transport_closure(
    x: &TimeDependentField,
    traj: &Trajectory,
    b: &FrameAlongCurve,
    tau_samples: usize,
    tol_rank: f64,
    opts: &IntegrateOptions,
) -> Result<ClosureResult, DistributionError> {
    let n = x.dim();
    check_alignment(traj, b)?;
    let tt = integrate_tangent(x, traj, opts)?;
    let nt = traj.grid.len();
    let taus: Vec<usize> = if tau_samples == 0 || tau_samples >= nt {
        (0..nt).collect()
    } else {
        (0..tau_samples)
            .map(|i| (i * (nt - 1)) / (tau_samples - 1).max(1))
            .collect()
    };
    let mut pool: Vec<DVector<f64>> = Vec::new();
    for &k in &taus {
        let lu = tt.mats[k].clone().lu();
        for j in 0..b.frames[k].ncols() {
            let col = b.frames[k].column(j).into_owned();
            let u = lu
                .solve(&col)
                .ok_or(DistributionError::SingularTransport { t: traj.grid[k] })?;
            let nrm = u.norm();
            if nrm > 1e-150 {
                pool.push(u / nrm);
            }
        }
    }
    let pool_mat = if pool.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&pool)
    };
    let rank_detail = numerical_rank(&pool_mat, tol_rank);
    let rank = rank_detail.rank;
    let basis0 = rank_detail.basis.clone();
    let frame = FrameAlongCurve::from_transport(&tt, &basis0, tol_rank);

    // the closure must contain the input at every time
    let mut containment_defect: f64 = 0.0;
    for k in 0..nt {
        let q = numerical_rank(&frame.frames[k], tol_rank).basis;
        for j in 0..b.frames[k].ncols() {
            let col = b.frames[k].column(j).into_owned();
            containment_defect = containment_defect.max(span_residual(&q, &col));
        }
    }
    Ok(ClosureResult {
        frame,
        rank,
        rank_detail,
        containment_defect,
    })
}

/// Report of [`invariance_check`]: the flow criterion and the bracket
/// criterion, which agree for constant-rank distributions.
#[derive(Debug, Clone)]
pub struct InvarianceReport {
    pub flow_invariant: bool,
    pub bracket_invariant: bool,
    pub max_flow_defect: f64,
    pub max_bracket_defect: f64,
    pub rank: usize,
}

/// Tests whether the distribution `b` along the curve is respected by the
/// flow of `x` (transported fibers stay inside `b`) and whether it absorbs
/// brackets with `x` (for spanning sections `s` of `b`, `[X_t, s] ∈ b` along
/// the curve). For constant-rank distributions the two verdicts agree; the
/// input must have constant rank (refused otherwise, since the equivalence
/// fails at rank drops).
///
/// Defects are relative residuals; `tol_membership` (typically 1e-6) converts
/// them to booleans.
pub fn invariance_check(
    x: &TimeDependentField,
    traj: &Trajectory,
    b: &FrameAlongCurve,
    tol_membership: f64,
    opts: &IntegrateOptions,
) -> Result<InvarianceReport, DistributionError> {
    check_alignment(traj, b)?;
    let rank = b.constant_rank().ok_or(DistributionError::NonConstantRank {
        min: *b.ranks.iter().min().unwrap_or(&0),
        max: *b.ranks.iter().max().unwrap_or(&0),
    })?;
    if rank == 0 {
        return Err(DistributionError::BadInput(
            "the zero distribution is trivially invariant; nothing to test".into(),
        ));
    }
    let nt = b.times.len();
    let bases: Vec<DMatrix<f64>> = b
        .frames
        .iter()
        .map(|m| numerical_rank(m, crate::linalg::DEFAULT_TOL_RANK).basis)
        .collect();

    // flow criterion: transported fibers stay in the span
    let tt = integrate_tangent(x, traj, opts)?;
    let tau_count = nt.min(24);
    let taus: Vec<usize> = (0..tau_count)
        .map(|i| (i * (nt - 1)) / (tau_count - 1).max(1))
        .collect();
    let mut max_flow_defect: f64 = 0.0;
    for &tau in &taus {
        let lu = tt.mats[tau].clone().lu();
        let pulled = lu
            .solve(&bases[tau])
            .ok_or(DistributionError::SingularTransport { t: b.times[tau] })?;
        for k in 0..nt {
            let w = &tt.mats[k] * &pulled;
            for j in 0..w.ncols() {
                let col = w.column(j).into_owned();
                max_flow_defect = max_flow_defect.max(span_residual(&bases[k], &col));
            }
        }
    }

    // bracket criterion: [X_t, s] stays in the span for spanning sections s
    let max_bracket_defect = match (&b.sections, b.provenance) {
        (Some(sections), _) => {
            // exact symbolic brackets of the generating sections
            let mut worst: f64 = 0.0;
            for g in sections {
                let d = ad_td(&x.field, g)?;
                let scale = (0..nt)
                    .map(|k| g.eval(b.states[k].as_slice(), b.times[k]).map(|v| v.norm()))
                    .collect::<Result<Vec<_>, _>>()?
                    .into_iter()
                    .fold(0.0f64, f64::max)
                    .max(1e-12);
                for k in 0..nt {
                    let v = d.eval(b.states[k].as_slice(), b.times[k])?;
                    let resid = &v - &bases[k] * (bases[k].transpose() * &v);
                    worst = worst.max(resid.norm() / v.norm().max(scale));
                }
            }
            worst
        }
        (None, Provenance::FlowTransport) => {
            // sections rebuilt by transporting the initial fiber, sampled on
            // a fine grid and differentiated numerically
            let lo = traj.t0.min(traj.t1);
            let hi = traj.t0.max(traj.t1);
            let count = (4 * nt).max(401);
            let mut times: Vec<f64> = (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect();
            for bp in &x.breakpoints {
                if *bp > lo && *bp < hi {
                    times.push(*bp);
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (hi - lo).max(1.0));
            let mut worst: f64 = 0.0;
            for j in 0..b.frames[0].ncols() {
                let c = b.frames[0].column(j).into_owned();
                let values: Vec<DVector<f64>> =
                    times.iter().map(|t| tt.at(*t) * &c).collect();
                let scale = values.iter().map(|v| v.norm()).fold(0.0f64, f64::max).max(1e-12);
                let samples = bracket_along_curve(
                    x,
                    traj,
                    &CurveSection::Samples {
                        times: &times,
                        values: &values,
                    },
                    0,
                )?;
                for s in &samples {
                    let q = numerical_rank(
                        &(tt.at(s.t) * &b.frames[0]),
                        crate::linalg::DEFAULT_TOL_RANK,
                    )
                    .basis;
                    let resid = &s.value - &q * (q.transpose() * &s.value);
                    worst = worst.max(resid.norm() / s.value.norm().max(scale));
                }
            }
            worst
        }
        (None, _) => {
            // raw samples: build quasi-continuous sections by rotation-aligning
            // consecutive orthonormal bases, then differentiate on the frame's
            // own grid (accuracy is limited by that grid's spacing)
            let mut aligned: Vec<DMatrix<f64>> = Vec::with_capacity(nt);
            aligned.push(bases[0].clone());
            for k in 1..nt {
                let m = bases[k].transpose() * &aligned[k - 1];
                let svd = m.svd(true, true);
                let r = svd.u.unwrap() * svd.v_t.unwrap();
                aligned.push(&bases[k] * r);
            }
            let mut worst: f64 = 0.0;
            for j in 0..rank {
                let values: Vec<DVector<f64>> =
                    aligned.iter().map(|m| m.column(j).into_owned()).collect();
                let samples = bracket_along_curve(
                    x,
                    traj,
                    &CurveSection::Samples {
                        times: &b.times,
                        values: &values,
                    },
                    0,
                )?;
                for s in &samples {
                    let k = nearest_index(&b.times, s.t);
                    let resid = &s.value - &bases[k] * (bases[k].transpose() * &s.value);
                    worst = worst.max(resid.norm() / s.value.norm().max(1.0));
                }
            }
            worst
        }
    };

    Ok(InvarianceReport {
        flow_invariant: max_flow_defect <= tol_membership,
        bracket_invariant: max_bracket_defect <= tol_membership,
        max_flow_defect,
        max_bracket_defect,
        rank,
    })
}

/// Orthonormalizes each per-time frame against the given per-time metric
/// (modified Gram–Schmidt with a re-orthogonalization pass): the output `G`
/// satisfies `Gᵀ M G = I` at each time. Fails on dependent columns.
pub fn gram_schmidt_along(
    b: &FrameAlongCurve,
    metrics: &[DMatrix<f64>],
) -> Result<FrameAlongCurve, DistributionError> {
    if metrics.len() != b.times.len() {
        return Err(DistributionError::BadInput(format!(
            "{} metric matrices for {} grid times",
            metrics.len(),
            b.times.len()
        )));
    }
    let mut frames = Vec::with_capacity(b.frames.len());
    for (k, (a, m)) in b.frames.iter().zip(metrics).enumerate() {
        let asym = (m - m.transpose()).norm();
        if asym > 1e-9 * m.norm().max(1.0) {
            return Err(DistributionError::BadInput(format!(
                "metric at time index {k} is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        let cols = a.ncols();
        let mut q = a.clone();
        for i in 0..cols {
            let orig = q.column(i).into_owned();
            let orig_norm2 = (orig.transpose() * m * &orig)[(0, 0)];
            for _pass in 0..2 {
                for j in 0..i {
                    let qj = q.column(j).into_owned();
                    let qi = q.column(i).into_owned();
                    let c = (qj.transpose() * m * &qi)[(0, 0)];
                    let new_col = qi - c * &qj;
                    q.set_column(i, &new_col);
                }
            }
            let qi = q.column(i).into_owned();
            let nrm2 = (qi.transpose() * m * &qi)[(0, 0)];
            if !(nrm2 > (1e-10 * orig_norm2.abs().sqrt().max(1e-30)).powi(2) && nrm2.is_finite()) {
                return Err(DistributionError::GramDependence {
                    time_index: k,
                    column: i,
                });
            }
            q.set_column(i, &(qi / nrm2.sqrt()));
        }
        frames.push(q);
    }
    Ok(FrameAlongCurve {
        times: b.times.clone(),
        states: b.states.clone(),
        frames,
        ranks: b.frames.iter().map(|f| f.ncols()).collect(),
        provenance: b.provenance,
        sections: None,
    })
}

fn check_alignment(traj: &Trajectory, b: &FrameAlongCurve) -> Result<(), DistributionError> {
    if b.times.len() != traj.grid.len() {
        return Err(DistributionError::BadInput(format!(
            "frame has {} times, trajectory grid has {}",
            b.times.len(),
            traj.grid.len()
        )));
    }
    let span = (traj.t1 - traj.t0).abs().max(1.0);
    for (a, g) in b.times.iter().zip(&traj.grid) {
        if (a - g).abs() > 1e-9 * span {
            return Err(DistributionError::BadInput(
                "frame times do not match the trajectory grid".into(),
            ));
        }
    }
    Ok(())
}

fn nearest_index(times: &[f64], t: f64) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for (i, x) in times.iter().enumerate() {
        let d = (x - t).abs();
        if d < dist {
            dist = d;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_vector_field, CoordSystem};
    use crate::flow::integrate_flow;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vf(components: &[&str], names: &[&str]) -> VectorFieldExpr {
        let c = CoordSystem::new(names).unwrap();
        parse_vector_field(components, &c).unwrap()
    }

    fn opts() -> IntegrateOptions {
        IntegrateOptions::default()
    }

    fn heisenberg() -> (VectorFieldExpr, VectorFieldExpr) {
        (
            vf(&["1", "0", "-y"], &["x", "y", "z"]),
            vf(&["0", "1", "x"], &["x", "y", "z"]),
        )
    }

    #[test]
    fn planar_flat_frame_closure_stays_rank_two() {
        // frame (∂x, ∂y + x²∂z) flowed along its second member through x = 0:
        // the transported spans never pick up the third direction
        let f1 = vf(&["1", "0", "0"], &["x", "y", "z"]);
        let f2 = vf(&["0", "1", "x^2"], &["x", "y", "z"]);
        let x = TimeDependentField::smooth(f2.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[f1, f2], &traj, 1e-8).unwrap();
        let res = transport_closure(&x, &traj, &b, 0, 1e-8, &opts()).unwrap();
        assert_eq!(res.rank, 2);
        assert!(res.containment_defect < 1e-6, "{}", res.containment_defect);
        assert!(!res.rank_detail.ambiguous);
    }

    #[test]
    fn bracket_generating_frame_closure_fills_space() {
        let (y, z) = heisenberg();
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.2, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[y, z], &traj, 1e-8).unwrap();
        let res = transport_closure(&x, &traj, &b, 0, 1e-8, &opts()).unwrap();
        assert_eq!(res.rank, 3);
        assert!(res.containment_defect < 1e-6);
    }

    #[test]
    fn closure_of_an_invariant_frame_is_itself() {
        let (y, _) = heisenberg();
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let tt = integrate_tangent(&x, &traj, &opts()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis0 = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let b = FrameAlongCurve::from_transport(&tt, &basis0, 1e-8);
        let res = transport_closure(&x, &traj, &b, 0, 1e-8, &opts()).unwrap();
        assert_eq!(res.rank, 2);
        // same span both ways at several times
        for k in [0, b.len() / 2, b.len() - 1] {
            let qb = numerical_rank(&b.frames[k], 1e-8).basis;
            let qc = numerical_rank(&res.frame.frames[k], 1e-8).basis;
            for j in 0..2 {
                assert!(span_residual(&qb, &qc.column(j).into_owned()) < 1e-6);
                assert!(span_residual(&qc, &qb.column(j).into_owned()) < 1e-6);
            }
        }
    }

    #[test]
    fn closure_is_idempotent() {
        let (y, z) = heisenberg();
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(
            &x,
            &DVector::from_column_slice(&[0.1, 0.2, -0.3]),
            0.0,
            1.0,
            &opts(),
        )
        .unwrap();
        let b = FrameAlongCurve::from_fields(&[y, z], &traj, 1e-8).unwrap();
        let once = transport_closure(&x, &traj, &b, 0, 1e-8, &opts()).unwrap();
        let twice = transport_closure(&x, &traj, &once.frame, 0, 1e-8, &opts()).unwrap();
        assert_eq!(once.rank, twice.rank);
        for k in [0, traj.grid.len() - 1] {
            let q1 = numerical_rank(&once.frame.frames[k], 1e-8).basis;
            let q2 = numerical_rank(&twice.frame.frames[k], 1e-8).basis;
            for j in 0..once.rank {
                assert!(span_residual(&q1, &q2.column(j).into_owned()) < 1e-6);
            }
        }
    }

    #[test]
    fn closure_is_contained_in_any_invariant_superset() {
        // the 2-frame (∂x, ∂y) is invariant along the curve x = 0 of the
        // planar flat frame's second member and contains the input frame
        let f1 = vf(&["1", "0", "0"], &["x", "y", "z"]);
        let f2 = vf(&["0", "1", "x^2"], &["x", "y", "z"]);
        let e2 = vf(&["0", "1", "0"], &["x", "y", "z"]);
        let x = TimeDependentField::smooth(f2.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[f1.clone(), f2], &traj, 1e-8).unwrap();
        let closure = transport_closure(&x, &traj, &b, 0, 1e-8, &opts()).unwrap();
        let superset = FrameAlongCurve::from_fields(&[f1, e2], &traj, 1e-8).unwrap();
        for k in 0..traj.grid.len() {
            let qs = numerical_rank(&superset.frames[k], 1e-8).basis;
            for j in 0..closure.rank {
                let col = closure.frame.frames[k].column(j).into_owned();
                assert!(span_residual(&qs, &col) < 1e-6);
            }
        }
    }

    #[test]
    fn full_tangent_space_is_invariant() {
        let (y, _) = heisenberg();
        let x = TimeDependentField::smooth(y);
        let traj = integrate_flow(
            &x,
            &DVector::from_column_slice(&[0.2, -0.1, 0.4]),
            0.0,
            1.5,
            &opts(),
        )
        .unwrap();
        let frame = FrameAlongCurve::from_fields(
            &[
                VectorFieldExpr::coordinate(3, 0),
                VectorFieldExpr::coordinate(3, 1),
                VectorFieldExpr::coordinate(3, 2),
            ],
            &traj,
            1e-8,
        )
        .unwrap();
        let rep = invariance_check(&x, &traj, &frame, 1e-6, &opts()).unwrap();
        assert!(rep.flow_invariant);
        assert!(rep.bracket_invariant);
        assert!(rep.max_flow_defect <= 1e-8);
        assert!(rep.max_bracket_defect <= 1e-8);
    }

    #[test]
    fn coordinate_plane_is_invariant_along_flat_curve() {
        let f2 = vf(&["0", "1", "x^2"], &["x", "y", "z"]);
        let x = TimeDependentField::smooth(f2);
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let frame = FrameAlongCurve::from_fields(
            &[
                VectorFieldExpr::coordinate(3, 0),
                VectorFieldExpr::coordinate(3, 1),
            ],
            &traj,
            1e-8,
        )
        .unwrap();
        let rep = invariance_check(&x, &traj, &frame, 1e-6, &opts()).unwrap();
        assert!(rep.flow_invariant, "defect {}", rep.max_flow_defect);
        assert!(rep.bracket_invariant, "defect {}", rep.max_bracket_defect);
    }

    #[test]
    fn bracket_generating_plane_is_not_invariant() {
        let (y, z) = heisenberg();
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.2, &opts()).unwrap();
        let frame = FrameAlongCurve::from_fields(&[y, z], &traj, 1e-8).unwrap();
        let rep = invariance_check(&x, &traj, &frame, 1e-6, &opts()).unwrap();
        assert!(!rep.flow_invariant);
        assert!(!rep.bracket_invariant);
        assert!(rep.max_flow_defect > 0.5, "{}", rep.max_flow_defect);
        assert!(rep.max_bracket_defect > 0.5, "{}", rep.max_bracket_defect);
    }

    #[test]
    fn both_criteria_agree_for_transported_frames() {
        // a transported frame is flow-invariant by construction; the bracket
        // criterion must agree through the purely numerical route
        let (y, _) = heisenberg();
        let x = TimeDependentField::smooth(y);
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let tt = integrate_tangent(&x, &traj, &opts()).unwrap();
        let basis0 =
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.5, 0.0, 1.0, -0.3]);
        let frame = FrameAlongCurve::from_transport(&tt, &basis0, 1e-8);
        let rep = invariance_check(&x, &traj, &frame, 1e-6, &opts()).unwrap();
        assert!(rep.flow_invariant, "defect {}", rep.max_flow_defect);
        assert!(rep.bracket_invariant, "defect {}", rep.max_bracket_defect);
    }

    #[test]
    fn varying_rank_is_refused() {
        // the second field vanishes at x = 0, so the rank jumps along a curve
        // crossing it
        let e1 = vf(&["1", "0"], &["x", "y"]);
        let xe2 = vf(&["0", "x"], &["x", "y"]);
        // a breakpoint pins t = 0.5 (where x = 0) as an exact grid point
        let x = TimeDependentField::new(e1.clone(), vec![0.5]);
        let traj = integrate_flow(
            &x,
            &DVector::from_column_slice(&[-0.5, 0.0]),
            0.0,
            1.0,
            &opts(),
        )
        .unwrap();
        let frame = FrameAlongCurve::from_fields(&[e1, xe2], &traj, 1e-8).unwrap();
        let err = invariance_check(&x, &traj, &frame, 1e-6, &opts()).unwrap_err();
        assert!(matches!(err, DistributionError::NonConstantRank { .. }));
    }

    #[test]
    fn orthonormal_input_is_unchanged() {
        let e1 = vf(&["1", "0"], &["x", "y"]);
        let e2 = vf(&["0", "1"], &["x", "y"]);
        let x = TimeDependentField::smooth(e1.clone());
        let traj = integrate_flow(&x, &DVector::zeros(2), 0.0, 1.0, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[e1, e2], &traj, 1e-8).unwrap();
        let metrics: Vec<DMatrix<f64>> =
            traj.grid.iter().map(|_| DMatrix::identity(2, 2)).collect();
        let g = gram_schmidt_along(&b, &metrics).unwrap();
        for k in 0..b.len() {
            assert!((&g.frames[k] - &b.frames[k]).norm() < 1e-14);
        }
    }

    #[test]
    fn textbook_euclidean_pair() {
        let a = vf(&["1", "0"], &["x", "y"]);
        let b = vf(&["1", "1"], &["x", "y"]);
        let x = TimeDependentField::smooth(a.clone());
        let traj = integrate_flow(&x, &DVector::zeros(2), 0.0, 0.5, &opts()).unwrap();
        let frame = FrameAlongCurve::from_fields(&[a, b], &traj, 1e-8).unwrap();
        let metrics: Vec<DMatrix<f64>> =
            traj.grid.iter().map(|_| DMatrix::identity(2, 2)).collect();
        let g = gram_schmidt_along(&frame, &metrics).unwrap();
        for k in 0..frame.len() {
            assert!((g.frames[k].column(0) - DVector::from_column_slice(&[1.0, 0.0])).norm() < 1e-12);
            assert!((g.frames[k].column(1) - DVector::from_column_slice(&[0.0, 1.0])).norm() < 1e-12);
        }
    }

    #[test]
    fn metric_orthonormalization_recovers_the_orthogonal_complement() {
        // under the metric that makes (Y, Z, e3) orthonormal, the frame
        // {Y, Y+Z} orthonormalizes to {Y, Z}
        let (y, z) = heisenberg();
        let ypz = vf(&["1", "1", "x - y"], &["x", "y", "z"]);
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 1.0, &opts()).unwrap();
        let frame = FrameAlongCurve::from_fields(&[y.clone(), ypz], &traj, 1e-8).unwrap();
        let metrics: Vec<DMatrix<f64>> = traj
            .grid
            .iter()
            .zip(&traj.states)
            .map(|(t, xs)| {
                let yv = y.eval(xs.as_slice(), *t).unwrap();
                let zv = z.eval(xs.as_slice(), *t).unwrap();
                let e3 = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
                let b = DMatrix::from_columns(&[yv, zv, e3]);
                (&b * b.transpose()).try_inverse().unwrap()
            })
            .collect();
        let g = gram_schmidt_along(&frame, &metrics).unwrap();
        for (k, (t, xs)) in traj.grid.iter().zip(&traj.states).enumerate() {
            let zv = z.eval(xs.as_slice(), *t).unwrap();
            assert!(
                (g.frames[k].column(1).into_owned() - &zv).norm() < 1e-9,
                "column at t = {t}"
            );
            // G^T M G = I to 1e-12
            let gram = g.frames[k].transpose() * &metrics[k] * &g.frames[k];
            assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
        }
    }

    #[test]
    fn random_frames_orthonormalize_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e1 = vf(&["1", "0", "0", "0"], &["x", "y", "z", "w"]);
        let x = TimeDependentField::smooth(e1);
        let traj = integrate_flow(&x, &DVector::zeros(4), 0.0, 1.0, &opts()).unwrap();
        for _ in 0..5 {
            let a = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
            let frames: Vec<DMatrix<f64>> = traj.grid.iter().map(|_| a.clone()).collect();
            let b = FrameAlongCurve {
                times: traj.grid.clone(),
                states: traj.states.clone(),
                frames,
                ranks: vec![3; traj.grid.len()],
                provenance: Provenance::Samples,
                sections: None,
            };
            let m0 = DMatrix::from_fn(4, 4, |i, j| rng.gen_range(-0.5..0.5) + if i == j { 2.0 } else { 0.0 });
            let spd = &m0 * m0.transpose();
            let metrics: Vec<DMatrix<f64>> = traj.grid.iter().map(|_| spd.clone()).collect();
            let g = gram_schmidt_along(&b, &metrics).unwrap();
            for k in [0usize, traj.grid.len() - 1] {
                let gram = g.frames[k].transpose() * &metrics[k] * &g.frames[k];
                assert!((gram - DMatrix::identity(3, 3)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn dependent_columns_are_named() {
        let e1 = vf(&["1", "0"], &["x", "y"]);
        let also_e1 = vf(&["2", "0"], &["x", "y"]);
        let x = TimeDependentField::smooth(e1.clone());
        let traj = integrate_flow(&x, &DVector::zeros(2), 0.0, 0.5, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[e1, also_e1], &traj, 1e-8).unwrap();
        let metrics: Vec<DMatrix<f64>> =
            traj.grid.iter().map(|_| DMatrix::identity(2, 2)).collect();
        let err = gram_schmidt_along(&b, &metrics).unwrap_err();
        match err {
            DistributionError::GramDependence { column, .. } => assert_eq!(column, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn frame_json_shape() {
        let (y, z) = heisenberg();
        let x = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(&x, &DVector::zeros(3), 0.0, 0.5, &opts()).unwrap();
        let b = FrameAlongCurve::from_fields(&[y, z], &traj, 1e-8).unwrap();
        let doc = b.to_json();
        assert_eq!(doc["times"].as_array().unwrap().len(), b.len());
        assert_eq!(doc["frames"][0].as_array().unwrap().len(), 2);
        assert_eq!(doc["ranks"][0], 2);
    }
}
