//! Separating-hyperplane machinery on the cost-extended space.
//!
//! Optimality certificates here take the form of a moving hyperplane: a unit
//! covector [`ProjectiveCovector`] at each time whose kernel contains the
//! reachable variations. [`contact_lift_flow`] evolves a hyperplane along a
//! flow by adjoint transport (the pushforward of its kernel),
//! [`contact_tangency_check`] re-verifies that evolution, [`needle_cone`]
//! assembles the cone of transported needle variations on the cost-extended
//! space (cost coordinate appended last), and [`separation_certificate`]
//! decides whether a hyperplane separates that cone from the
//! direction of decreasing cost.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use thiserror::Error;

use crate::expr::{CoordSystem, EvalError, ScalarExpr, VectorFieldExpr};
use crate::extremal::{ControlSystem, ExtremalError, PreparedCandidate};
use crate::flow::{
    integrate_adjoint, integrate_flow, integrate_tangent, FlowError, IntegrateOptions,
    TimeDependentField, Trajectory,
};
use crate::linalg::{cone_membership, covector_kernel};

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("flow integration failed: {0}")]
    Flow(#[from] FlowError),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    System(#[from] ExtremalError),
    #[error("zero covector does not define a hyperplane")]
    ZeroCovector,
    #[error("covector is not transversal to the reference direction (pairing {pairing:.3e})")]
    NotTransversal { pairing: f64 },
    #[error("{0}")]
    BadInput(String),
}

// ---------------------------------------------------------------------------
// projective covectors and hyperplane curves
// ---------------------------------------------------------------------------

/// A hyperplane through a point, stored as its defining covector normalized
/// to unit Euclidean norm with the first non-negligible entry positive. Two
/// inputs that differ by a nonzero scale produce identical stored data, so
/// equality and pairing checks are plain vector operations.
#[derive(Debug, Clone)]
pub struct ProjectiveCovector {
    pub base: DVector<f64>,
    covector: DVector<f64>,
}

impl ProjectiveCovector {
    pub fn new(base: DVector<f64>, covector: DVector<f64>) -> Result<Self, ContactError> {
        let norm = covector.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(ContactError::ZeroCovector);
        }
        let mut c = covector / norm;
        if let Some(first) = c.iter().find(|e| e.abs() > 1e-12) {
            if *first < 0.0 {
                c = -c;
            }
        }
        Ok(ProjectiveCovector { base, covector: c })
    }

    /// The stored unit-norm, sign-canonical covector.
    pub fn covector(&self) -> &DVector<f64> {
        &self.covector
    }

    pub fn dim(&self) -> usize {
        self.covector.len()
    }

    /// `⟨λ, v⟩` with the normalized representative.
    pub fn pairing(&self, v: &DVector<f64>) -> f64 {
        self.covector.dot(v)
    }

    /// Orthonormal basis of the hyperplane `ker λ` (`dim × (dim−1)`).
    pub fn kernel_basis(&self) -> DMatrix<f64> {
        covector_kernel(&self.covector)
    }

    /// Whether both points define the same hyperplane to tolerance `tol`
    /// (sign-insensitive, so near-tie canonicalization cannot flip the answer).
    pub fn same_hyperplane(&self, other: &ProjectiveCovector, tol: f64) -> bool {
        let d = (&self.covector - &other.covector).norm();
        let s = (&self.covector + &other.covector).norm();
        d.min(s) <= tol
    }
}

/// A hyperplane at every grid time of a trajectory, evolving with the flow.
#[derive(Debug, Clone)]
pub struct HyperplaneCurve {
    /// The carrying trajectory.
    pub base: Trajectory,
    pub times: Vec<f64>,
    pub points: Vec<ProjectiveCovector>,
}

/// Evolves the hyperplane `h0` given at the start of `traj` along the flow of
/// `x`: the defining covector is transported by the adjoint equation (so the
/// kernel is pushed forward by the tangent flow) and renormalized at each
/// grid time.
pub fn contact_lift_flow(
    x: &TimeDependentField,
    traj: &Trajectory,
    h0: &ProjectiveCovector,
    opts: &IntegrateOptions,
) -> Result<HyperplaneCurve, ContactError> {
    let scale = traj.start().norm().max(1.0);
    if (&h0.base - traj.start()).norm() > 1e-9 * scale {
        return Err(ContactError::BadInput(
            "hyperplane base point does not match the trajectory start".into(),
        ));
    }
    let ct = integrate_adjoint(x, traj, h0.covector(), traj.t0, opts)?;
    let mut points = Vec::with_capacity(ct.grid.len());
    for (state, lam) in ct.states.iter().zip(&ct.covectors) {
        points.push(ProjectiveCovector::new(state.clone(), lam.clone())?);
    }
    Ok(HyperplaneCurve { base: traj.clone(), times: ct.grid.clone(), points })
}

/// Per-time defect of a hyperplane curve against the flow of `x`.
#[derive(Debug, Clone)]
pub struct TangencyReport {
    pub times: Vec<f64>,
    /// Worst relative pairing `|λ(t)·V(t)w|` over a basis `w` of the initial
    /// hyperplane, per time.
    pub defects: Vec<f64>,
    pub max_defect: f64,
}

impl TangencyReport {
    pub fn to_json(&self) -> Value {
        json!({ "times": self.times, "defects": self.defects, "max_defect": self.max_defect })
    }
}

/// Verifies that a hyperplane curve actually evolves by the flow of `x`: the
/// tangent transport of any vector in the initial hyperplane must stay inside
/// the hyperplane at every later time. The defect is the worst relative
/// pairing over an orthonormal basis of the initial kernel; a genuine
/// flow-evolved curve keeps it at integration-accuracy level, while a
/// hyperplane curve violating the evolution law shows an order-one defect.
pub fn contact_tangency_check(
    x: &TimeDependentField,
    lifted: &HyperplaneCurve,
    opts: &IntegrateOptions,
) -> Result<TangencyReport, ContactError> {
    if lifted.points.is_empty() {
        return Err(ContactError::BadInput("empty hyperplane curve".into()));
    }
    let tt = integrate_tangent(x, &lifted.base, opts)?;
    let k0 = lifted.points[0].kernel_basis();
    let mut defects = Vec::with_capacity(lifted.times.len());
    let mut max_defect = 0.0_f64;
    for (k, t) in lifted.times.iter().enumerate() {
        let v = tt.at(*t);
        let moved = &v * &k0;
        let mut worst = 0.0_f64;
        for j in 0..moved.ncols() {
            let col = moved.column(j);
            let p = lifted.points[k].pairing(&col.into_owned());
            worst = worst.max(p.abs() / col.norm().max(1e-300));
        }
        defects.push(worst);
        max_defect = max_defect.max(worst);
    }
    Ok(TangencyReport { times: lifted.times.clone(), defects, max_defect })
}

/// The value of the hyperplane's normalized representative on `x`, using the
/// reference direction `r` for the normalization: `⟨λ, x⟩ / ⟨λ, r⟩`. The
/// result is invariant under rescaling the covector; it requires `λ` to be
/// transversal to `r`.
pub fn generating_function(
    h: &ProjectiveCovector,
    x: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<f64, ContactError> {
    let denom = h.pairing(r);
    if denom.abs() <= 1e-12 * r.norm().max(1e-300) {
        return Err(ContactError::NotTransversal { pairing: denom });
    }
    Ok(h.pairing(x) / denom)
}

// ---------------------------------------------------------------------------
// cost extension and needle cones
// ---------------------------------------------------------------------------

/// Coordinates of the cost-extended space: the system's coordinates plus the
/// accumulated-cost coordinate appended last.
pub fn extended_coords(sys: &ControlSystem) -> Result<CoordSystem, ContactError> {
    sys.coords.extended("cost").map_err(ContactError::BadInput)
}

/// The candidate's velocity field on the cost-extended space: the base
/// components are `Σ u_i f_i`, and the appended last component is the cost
/// rate `½ Σ u_i u_j g_ij`.
pub fn extended_velocity(
    sys: &ControlSystem,
    controls: &[ScalarExpr],
) -> Result<VectorFieldExpr, ContactError> {
    let d = sys.control_dim();
    if controls.len() != d {
        return Err(ContactError::BadInput(format!(
            "{} controls for a frame of {d} fields",
            controls.len()
        )));
    }
    let base = sys.control_field(controls)?;
    let mut rate = ScalarExpr::constant(0.0);
    for i in 0..d {
        for j in 0..d {
            rate = ScalarExpr::add(
                rate,
                ScalarExpr::mul(
                    ScalarExpr::constant(0.5),
                    ScalarExpr::mul(
                        controls[i].clone(),
                        ScalarExpr::mul(controls[j].clone(), sys.metric[i][j].clone()),
                    ),
                ),
            );
        }
    }
    let mut components = base.components;
    components.push(rate);
    Ok(VectorFieldExpr::new(components))
}

/// One needle variation: at time `t`, replace the control by `v` for an
/// infinitesimal duration weighted `dt`.
#[derive(Debug, Clone)]
pub struct NeedleSpec {
    pub t: f64,
    pub v: DVector<f64>,
    pub dt: f64,
}

/// A finitely generated cone of transported needle variations at a point of
/// the cost-extended space.
#[derive(Debug, Clone)]
pub struct NeedleCone {
    /// The cost-extended state the cone lives at.
    pub base: DVector<f64>,
    /// One generating ray per needle (zero rays are kept).
    pub rays: Vec<DVector<f64>>,
    pub provenance: Vec<NeedleSpec>,
}

impl NeedleCone {
    /// The rays as matrix columns (possibly zero columns included).
    pub fn rays_matrix(&self) -> DMatrix<f64> {
        let n = self.base.len();
        if self.rays.is_empty() {
            return DMatrix::zeros(n, 0);
        }
        DMatrix::from_columns(&self.rays)
    }

    /// Whether `v` lies in the conic hull of the rays, to tolerance `tol`.
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        cone_membership(&self.rays_matrix(), v, tol).member
    }
}

/// Builds the needle-variation cone of a candidate at time `t_end` on the
/// cost-extended space. Each needle `(t_i, v_i, δ_i)` contributes the ray
///
/// ```text
/// Ṽ(t_end) Ṽ(t_i)^{-1} · [f̃_v(q̃(t_i)) − f̃_û(q̃(t_i))] · δ_i,
/// ```
///
/// where `f̃` is the cost-extended velocity and `Ṽ` its tangent transport.
/// Needle times must be continuity points of the control: switching times are
/// rejected.
pub fn needle_cone(
    sys: &ControlSystem,
    p: &PreparedCandidate,
    t_end: f64,
    spec: &[NeedleSpec],
    opts: &IntegrateOptions,
) -> Result<NeedleCone, ContactError> {
    let t0 = p.traj.t0;
    let span = (p.traj.t1 - t0).abs().max(1.0);
    if !(t_end > t0) || t_end > p.traj.t1 + 1e-9 * span {
        return Err(ContactError::BadInput(format!(
            "cone time {t_end} outside the candidate horizon ({t0}, {}]",
            p.traj.t1
        )));
    }
    let d = sys.control_dim();
    for s in spec {
        if s.t < t0 - 1e-9 * span || s.t > t_end + 1e-9 * span {
            return Err(ContactError::BadInput(format!(
                "needle time {} outside [{t0}, {t_end}]",
                s.t
            )));
        }
        if p.breakpoints.iter().any(|b| (b - s.t).abs() <= 1e-9 * span) {
            return Err(ContactError::BadInput(format!(
                "needle time {} is a switching time of the control; needles need continuity points",
                s.t
            )));
        }
        if s.v.len() != d {
            return Err(ContactError::BadInput(format!(
                "needle control has {} components for a frame of {d} fields",
                s.v.len()
            )));
        }
        if s.dt < 0.0 {
            return Err(ContactError::BadInput("needle durations must be nonnegative".into()));
        }
    }

    let f_ext = extended_velocity(sys, &p.controls)?;
    let tdf = TimeDependentField::new(f_ext, p.breakpoints.clone());
    let mut q0_ext = DVector::zeros(sys.dim() + 1);
    q0_ext.rows_mut(0, sys.dim()).copy_from(&p.traj.states[0]);
    let ext_traj = integrate_flow(&tdf, &q0_ext, t0, t_end, opts)?;
    let tt = integrate_tangent(&tdf, &ext_traj, opts)?;

    let mut rays = Vec::with_capacity(spec.len());
    for s in spec {
        let qt = ext_traj.sample(s.t);
        let qs = &qt.as_slice()[..sys.dim()];
        let u = p.controls_at(s.t)?;
        let b = sys.frame_matrix_at(qs)?;
        let g = sys.metric_at(qs)?;
        let dv = &s.v - &u;
        let dcost = 0.5 * (s.v.dot(&(&g * &s.v)) - u.dot(&(&g * &u)));
        let mut w = DVector::zeros(sys.dim() + 1);
        w.rows_mut(0, sys.dim()).copy_from(&(&b * dv));
        w[sys.dim()] = dcost;
        rays.push(tt.transport(s.t, t_end, &w) * s.dt);
    }
    Ok(NeedleCone { base: ext_traj.end().clone(), rays, provenance: spec.to_vec() })
}

// ---------------------------------------------------------------------------
// separation certificates
// ---------------------------------------------------------------------------

/// Outcome of testing a hyperplane against a needle cone.
#[derive(Debug, Clone)]
pub struct SeparationReport {
    /// Every ray pairs nonpositively with the covector (oriented so the
    /// direction of decreasing cost pairs nonnegatively).
    pub separates: bool,
    /// The decreasing-cost direction pairs strictly positively: the covector
    /// has a genuine cost component.
    pub strict: bool,
    /// The cost direction lies inside the hyperplane (zero cost component).
    pub ray_in_plane: bool,
    /// Pairing of the oriented covector with each ray.
    pub pairings: Vec<f64>,
    /// Largest relative positive pairing (0 when all are nonpositive).
    pub max_violation: f64,
    pub tol: f64,
}

impl SeparationReport {
    pub fn to_json(&self) -> Value {
        json!({
            "separates": self.separates,
            "strict": self.strict,
            "ray_in_plane": self.ray_in_plane,
            "pairings": self.pairings,
            "max_violation": self.max_violation,
            "tol": self.tol,
        })
    }
}

/// Tests whether the hyperplane separates the needle cone from the direction
/// of decreasing cost (−∂cost, the negative unit vector of the last
/// coordinate). The covector is re-oriented so its pairing with −∂cost is
/// nonnegative; separation then requires every ray to pair `≤ tol` relative
/// to its length. `strict` reports a genuinely negative cost component
/// (the normalized case), `ray_in_plane` a vanishing one (the degenerate
/// indicator).
pub fn separation_certificate(
    cone: &NeedleCone,
    h: &ProjectiveCovector,
    tol: f64,
) -> Result<SeparationReport, ContactError> {
    let n_ext = cone.base.len();
    if h.dim() != n_ext {
        return Err(ContactError::BadInput(format!(
            "covector has {} components, cone lives in dimension {n_ext}",
            h.dim()
        )));
    }
    if (&h.base - &cone.base).norm() > 1e-6 * cone.base.norm().max(1.0) {
        return Err(ContactError::BadInput(
            "hyperplane and cone are based at different points".into(),
        ));
    }
    let mut lam = h.covector().clone();
    // orient so that ⟨λ, −∂cost⟩ = −λ_last ≥ 0
    if lam[n_ext - 1] > 0.0 {
        lam = -lam;
    }
    let mut pairings = Vec::with_capacity(cone.rays.len());
    let mut max_violation = 0.0_f64;
    let mut separates = true;
    for ray in &cone.rays {
        let p = lam.dot(ray);
        let rel = p / ray.norm().max(1.0);
        if rel > tol {
            separates = false;
            max_violation = max_violation.max(rel);
        }
        pairings.push(p);
    }
    let cost_component = -lam[n_ext - 1]; // = ⟨λ, −∂cost⟩ ≥ 0
    Ok(SeparationReport {
        separates,
        strict: cost_component > tol,
        ray_in_plane: cost_component.abs() <= tol,
        pairings,
        max_violation,
        tol,
    })
}
