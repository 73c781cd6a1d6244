//! Lie brackets: symbolic, iterated, and along curves, plus the span of all
//! iterated brackets evaluated along a trajectory.
//!
//! For time-dependent fields the bracket that matters along flows is the
//! covariant one, `[X_t, Z] + ∂Z/∂t`: it vanishes exactly when `Z` is carried
//! by the flow of `X_t` ([`ad_td`]). For autonomous fields it reduces to the
//! ordinary Lie bracket.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::distribution::{FrameAlongCurve, Provenance};
use crate::expr::{EvalError, ScalarExpr, VectorFieldExpr};
use crate::flow::{TimeDependentField, Trajectory};
use crate::linalg::numerical_rank;

#[derive(Debug, Error)]
pub enum BracketError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("expression grew to {nodes} nodes (limit {limit})")]
    NodeLimit { nodes: usize, limit: usize },
    #[error("sample grid too coarse: a smooth segment has {points} points, need at least 4")]
    GridTooCoarse { points: usize },
    #[error("non-finite derivative estimate at t = {t}")]
    NonFinite { t: f64 },
    #[error("trajectory is not an integral curve of the field: velocity residual {residual:.3e} at t = {t}")]
    NotIntegralCurve { t: f64, residual: f64 },
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    BadInput(String),
}

/// Symbolic Lie bracket `[X, Y] = (∂Y/∂x)·X − (∂X/∂x)·Y`.
pub fn lie_bracket(
    x: &VectorFieldExpr,
    y: &VectorFieldExpr,
) -> Result<VectorFieldExpr, BracketError> {
    let n = x.dim();
    if y.dim() != n {
        return Err(BracketError::Dimension(n, y.dim()));
    }
    let jx = x.jacobian();
    let jy = y.jacobian();
    let mut comps = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = ScalarExpr::constant(0.0);
        for j in 0..n {
            acc = ScalarExpr::add(
                acc,
                ScalarExpr::sub(
                    ScalarExpr::mul(jy.entries[i][j].clone(), x.components[j].clone()),
                    ScalarExpr::mul(jx.entries[i][j].clone(), y.components[j].clone()),
                ),
            );
        }
        comps.push(acc);
    }
    Ok(VectorFieldExpr::new(comps))
}

/// Bracket of a (possibly time-dependent) field `X_t` with a time-dependent
/// section `Z`: `[X, Z] + ∂Z/∂t`. This is the quantity that vanishes exactly
/// when `Z` is carried by the flow of `X_t`; for autonomous `Z` it is the
/// plain Lie bracket.
pub fn ad_td(x: &VectorFieldExpr, z: &VectorFieldExpr) -> Result<VectorFieldExpr, BracketError> {
    let lb = lie_bracket(x, z)?;
    let dz = z.time_derivative();
    let comps = lb
        .components
        .into_iter()
        .zip(dz.components)
        .map(|(a, b)| ScalarExpr::add(a, b))
        .collect();
    Ok(VectorFieldExpr::new(comps))
}

/// Iterated bracket `ad_X^k(Z)`: `ad_X^0(Z) = Z`, `ad_X^k(Z) = [X, ad_X^{k-1}(Z)]`
/// (with the `∂/∂t` term of [`ad_td`] for time-dependent data). Fails if any
/// intermediate expression exceeds `node_limit` nodes.
pub fn ad_power(
    x: &VectorFieldExpr,
    z: &VectorFieldExpr,
    k: usize,
    node_limit: usize,
) -> Result<VectorFieldExpr, BracketError> {
    let mut cur = z.clone();
    for _ in 0..k {
        cur = ad_td(x, &cur)?;
        let nodes = cur.node_count();
        if nodes > node_limit {
            return Err(BracketError::NodeLimit {
                nodes,
                limit: node_limit,
            });
        }
    }
    Ok(cur)
}

/// Table of left-nested iterated brackets of a set of generators, keyed by
/// bracket words over 1-based generator indices (e.g. `"[1,[1,2]]"`).
/// `depth` 1 means the generators themselves; each further level brackets
/// every generator with every word of the previous level.
#[derive(Debug, Clone)]
pub struct BracketTable {
    pub generators: Vec<VectorFieldExpr>,
    pub products: BTreeMap<String, VectorFieldExpr>,
    pub depth: usize,
}

impl BracketTable {
    pub fn build(
        generators: &[VectorFieldExpr],
        depth: usize,
        node_limit: usize,
    ) -> Result<Self, BracketError> {
        let mut products = BTreeMap::new();
        let mut prev: Vec<(String, VectorFieldExpr)> = generators
            .iter()
            .enumerate()
            .map(|(i, g)| ((i + 1).to_string(), g.clone()))
            .collect();
        for _ in 2..=depth {
            let mut next = Vec::new();
            for (i, g) in generators.iter().enumerate() {
                for (word, expr) in &prev {
                    let key = format!("[{},{}]", i + 1, word);
                    let b = lie_bracket(g, expr)?;
                    let nodes = b.node_count();
                    if nodes > node_limit {
                        return Err(BracketError::NodeLimit {
                            nodes,
                            limit: node_limit,
                        });
                    }
                    products.insert(key.clone(), b.clone());
                    next.push((key, b));
                }
            }
            prev = next;
        }
        Ok(BracketTable {
            generators: generators.to_vec(),
            products,
            depth,
        })
    }

    /// Looks up a bracket word such as `"[1,[1,2]]"`; generator words (`"1"`)
    /// resolve to the generators themselves.
    pub fn get(&self, word: &str) -> Option<&VectorFieldExpr> {
        if let Ok(i) = word.parse::<usize>() {
            return self.generators.get(i.wrapping_sub(1));
        }
        self.products.get(word)
    }
}

/// A section along a curve: either a symbolic field restricted to it, or raw
/// per-time samples (strictly increasing times).
pub enum CurveSection<'a> {
    Symbolic(&'a VectorFieldExpr),
    Samples {
        times: &'a [f64],
        values: &'a [DVector<f64>],
    },
}

/// Which data a derivative stencil used: both sides (interior point), or only
/// one side (segment edges, where the field may switch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Central,
    FromLeft,
    FromRight,
}

#[derive(Debug, Clone)]
pub struct BracketSample {
    pub t: f64,
    pub value: DVector<f64>,
    pub side: Side,
}

/// Derivative at `s` of the interpolating polynomial through
/// `(times[i], values[i])`.
fn lagrange_derivative(times: &[f64], values: &[DVector<f64>], s: f64) -> DVector<f64> {
    let m = times.len();
    let n = values[0].len();
    let mut out = DVector::zeros(n);
    for i in 0..m {
        let denom: f64 = (0..m).filter(|j| *j != i).map(|j| times[i] - times[j]).product();
        let mut num_sum = 0.0;
        for k in 0..m {
            if k == i {
                continue;
            }
            let num: f64 = (0..m)
                .filter(|j| *j != i && *j != k)
                .map(|j| s - times[j])
                .product();
            num_sum += num;
        }
        out += (num_sum / denom) * &values[i];
    }
    out
}

/// Bracket of `X_t` with a section `Z` along the trajectory, computed from the
/// section's values: `[X_t, Z](x(t)) = d/dt[Z(x(t))] − (∂X_t/∂x)(x(t))·Z(x(t))`.
///
/// Symbolic sections are sampled on a uniform grid of `n_points` (plus the
/// exact switching times of `X`); sampled sections are differentiated on their
/// own grid. Stencils never straddle a switching time; at a switching time
/// that carries a sample, two one-sided values are returned, flagged
/// [`Side::FromLeft`] and [`Side::FromRight`].
pub fn bracket_along_curve(
    x: &TimeDependentField,
    traj: &Trajectory,
    z: &CurveSection,
    n_points: usize,
) -> Result<Vec<BracketSample>, BracketError> {
    let n = x.dim();
    if traj.dim() != n {
        return Err(BracketError::Dimension(n, traj.dim()));
    }
    let lo = traj.t0.min(traj.t1);
    let hi = traj.t0.max(traj.t1);
    let span = (hi - lo).max(f64::MIN_POSITIVE);

    // sample times and section values, ascending
    let (times, values): (Vec<f64>, Vec<DVector<f64>>) = match z {
        CurveSection::Symbolic(w) => {
            if w.dim() != n {
                return Err(BracketError::Dimension(n, w.dim()));
            }
            let count = n_points.max(8);
            let mut ts: Vec<f64> = (0..count)
                .map(|i| lo + span * i as f64 / (count - 1) as f64)
                .collect();
            for b in &x.breakpoints {
                if *b > lo && *b < hi {
                    ts.push(*b);
                }
            }
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * span);
            let mut vs = Vec::with_capacity(ts.len());
            for t in &ts {
                let xt = traj.sample(*t);
                vs.push(w.eval(xt.as_slice(), *t)?);
            }
            (ts, vs)
        }
        CurveSection::Samples { times, values } => {
            if times.len() != values.len() {
                return Err(BracketError::BadInput(
                    "sample times and values have different lengths".into(),
                ));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(BracketError::BadInput(
                    "sample times must be strictly increasing".into(),
                ));
            }
            if values.iter().any(|v| v.len() != n) {
                return Err(BracketError::BadInput(
                    "sample values have the wrong dimension".into(),
                ));
            }
            (times.to_vec(), values.to_vec())
        }
    };

    // segment edges: window endpoints plus interior switching times
    let mut edges = vec![times[0]];
    for b in &x.breakpoints {
        if *b > times[0] + 1e-12 * span && *b < *times.last().unwrap() - 1e-12 * span {
            edges.push(*b);
        }
    }
    edges.push(*times.last().unwrap());

    let jac = x.field.jacobian();
    let mut out = Vec::new();
    for seg in edges.windows(2) {
        let (el, er) = (seg[0], seg[1]);
        let tol = 1e-12 * span;
        let idx: Vec<usize> = (0..times.len())
            .filter(|&i| times[i] >= el - tol && times[i] <= er + tol)
            .collect();
        if idx.len() < 4 {
            return Err(BracketError::GridTooCoarse { points: idx.len() });
        }
        let seg_times: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let seg_vals: Vec<DVector<f64>> = idx.iter().map(|&i| values[i].clone()).collect();
        for (pos, &i) in idx.iter().enumerate() {
            let t = times[i];
            let side = if (t - el).abs() <= tol {
                Side::FromRight
            } else if (t - er).abs() <= tol {
                Side::FromLeft
            } else {
                Side::Central
            };
            // stencil of up to 5 points inside this segment, centered at pos
            let m = seg_times.len().min(5);
            let start = pos.saturating_sub(m / 2).min(seg_times.len() - m);
            let st = &seg_times[start..start + m];
            let sv = &seg_vals[start..start + m];
            let dz = lagrange_derivative(st, sv, t);
            // a left-limit value must sample the field strictly before the
            // switch (guards of the form `t >= b` flip exactly at `b`)
            let t_eval = if side == Side::FromLeft {
                t - 1e-9 * t.abs().max(1.0)
            } else {
                t
            };
            let xt = traj.sample(t);
            let j = jac.eval(xt.as_slice(), t_eval)?;
            let val = dz - j * &values[i];
            if !val.iter().all(|v| v.is_finite()) {
                return Err(BracketError::NonFinite { t });
            }
            out.push(BracketSample { t, value: val, side });
        }
    }
    Ok(out)
}

/// Per-point rank data for the span of iterated brackets along a curve.
#[derive(Debug, Clone)]
pub struct SpanProfile {
    pub times: Vec<f64>,
    pub ranks: Vec<usize>,
    pub singular_values: Vec<Vec<f64>>,
    /// Extra probe times: three per grid interval.
    pub refined_times: Vec<f64>,
    pub refined_ranks: Vec<usize>,
    /// True only if the rank is identical at every grid point AND every
    /// refined probe point.
    pub constant_rank: bool,
    /// The common rank when `constant_rank`.
    pub rank: Option<usize>,
    /// True if any rank decision had a singular-value margin under 10×.
    pub ambiguous: bool,
    /// Smallest depth `K` such that adding brackets of depth `K+1` changed no
    /// rank at any probe point; `None` if the iteration was cut off first.
    pub stabilized_depth: Option<usize>,
    /// Set when the iteration stopped before stabilizing (depth cap or
    /// expression-size limit).
    pub truncation: Option<String>,
}

impl SpanProfile {
    /// CSV rows `t,rank,sigma_1..sigma_n` over the grid probes.
    pub fn to_csv(&self, dim: usize) -> String {
        let mut out = String::from("t,rank");
        for i in 1..=dim {
            out.push_str(&format!(",sigma_{i}"));
        }
        out.push('\n');
        for ((t, r), sv) in self.times.iter().zip(&self.ranks).zip(&self.singular_values) {
            out.push_str(&format!("{t:.17e},{r}"));
            for i in 0..dim {
                out.push_str(&format!(",{:.17e}", sv.get(i).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }
}

/// Result of [`ad_infinity_span`]: the evaluated frame along the curve, the
/// rank profile, and the symbolic sections that span it.
#[derive(Debug, Clone)]
pub struct AdSpanResult {
    pub frame: FrameAlongCurve,
    pub profile: SpanProfile,
    pub sections: Vec<VectorFieldExpr>,
}

/// Span of all iterated brackets `ad_X^k(Z_j)` (`Z_j` ranging over `b`,
/// `k = 0, 1, 2, …`) evaluated along an integral curve of `x`.
///
/// Generation `k` adds the brackets of depth `k`; the iteration stops as soon
/// as one whole generation changes no rank at any probe point (grid and
/// refined), or at `depth_cap` (0 means twice the dimension), or when an
/// expression exceeds `node_limit` nodes (0 means 200 000). The last two are
/// reported via `profile.truncation` rather than an error.
///
/// For rank decisions (and in the returned frames) each evaluated section is
/// rescaled to at most unit length: the span is unchanged, and an iterated
/// bracket with a huge value can then never push the relative SVD threshold
/// above the order-one sections. Sections far below unit length are kept
/// as-is and act as numerical zeros.
///
/// Fails if the trajectory is not an integral curve of `x` (velocity residual
/// above 1e-6 relative).
pub fn ad_infinity_span(
    x: &VectorFieldExpr,
    b: &[VectorFieldExpr],
    traj: &Trajectory,
    tol_rank: f64,
    depth_cap: usize,
    node_limit: usize,
) -> Result<AdSpanResult, BracketError> {
    let n = x.dim();
    if traj.dim() != n {
        return Err(BracketError::Dimension(n, traj.dim()));
    }
    for z in b {
        if z.dim() != n {
            return Err(BracketError::Dimension(n, z.dim()));
        }
    }
    if b.is_empty() {
        return Err(BracketError::BadInput("empty generating set".into()));
    }
    verify_integral_curve(x, traj)?;
    let depth_cap = if depth_cap == 0 { 2 * n } else { depth_cap };
    let node_limit = if node_limit == 0 { 200_000 } else { node_limit };

    // probe times: the trajectory grid plus three points per interval
    let grid = traj.grid.clone();
    let mut refined = Vec::new();
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        for f in [0.25, 0.5, 0.75] {
            refined.push(w[0] + f * h);
        }
    }

    let ranks_at = |sections: &[VectorFieldExpr],
                    times: &[f64]|
     -> Result<(Vec<usize>, Vec<Vec<f64>>, bool), BracketError> {
        let mut ranks = Vec::with_capacity(times.len());
        let mut svs = Vec::with_capacity(times.len());
        let mut ambiguous = false;
        for &t in times {
            let xt = traj.sample(t);
            let mut cols: Vec<DVector<f64>> = Vec::new();
            for s in sections {
                let v = s.eval(xt.as_slice(), t)?;
                let norm = v.norm();
                if norm > 1e-150 {
                    // scaling a column never changes the span; capping large
                    // columns at unit length keeps the relative SVD threshold
                    // anchored to the order-one sections, so a bracket with a
                    // huge value cannot mask independent order-one directions.
                    // columns below unit length are kept as-is: amplifying a
                    // near-zero section would manufacture rank out of noise
                    cols.push(if norm > 1.0 { v / norm } else { v });
                }
            }
            let mat = if cols.is_empty() {
                DMatrix::zeros(n, 0)
            } else {
                DMatrix::from_columns(&cols)
            };
            let rr = numerical_rank(&mat, tol_rank);
            ambiguous |= rr.ambiguous;
            ranks.push(rr.rank);
            svs.push(rr.singular_values);
        }
        Ok((ranks, svs, ambiguous))
    };

    let mut sections: Vec<VectorFieldExpr> = b.to_vec();
    let mut frontier: Vec<VectorFieldExpr> = b.to_vec();
    let (mut grid_ranks, mut grid_svs, mut amb) = ranks_at(&sections, &grid)?;
    let (mut ref_ranks, _, amb_r) = ranks_at(&sections, &refined)?;
    amb |= amb_r;
    let mut stabilized_depth = None;
    let mut truncation = None;

    'outer: for depth in 1..=depth_cap {
        let mut next = Vec::new();
        for s in &frontier {
            let a = ad_td(x, s)?;
            if a.is_identically_zero() {
                continue;
            }
            let nodes = a.node_count();
            if nodes > node_limit {
                truncation = Some(format!(
                    "stopped at depth {depth}: an expression reached {nodes} nodes (limit {node_limit})"
                ));
                break 'outer;
            }
            next.push(a);
        }
        if next.is_empty() {
            // nothing new symbolically: spans cannot change any further
            stabilized_depth = Some(depth - 1);
            break;
        }
        let mut candidate = sections.clone();
        candidate.extend(next.iter().cloned());
        let (g_ranks, g_svs, a1) = ranks_at(&candidate, &grid)?;
        let (r_ranks, _, a2) = ranks_at(&candidate, &refined)?;
        if g_ranks == grid_ranks && r_ranks == ref_ranks {
            // one whole generation added nothing: stabilized (equal rank with
            // a superset of sections means equal span pointwise)
            stabilized_depth = Some(depth - 1);
            break;
        }
        sections = candidate;
        frontier = next;
        grid_ranks = g_ranks;
        grid_svs = g_svs;
        ref_ranks = r_ranks;
        amb |= a1 | a2;
    }
    if stabilized_depth.is_none() && truncation.is_none() {
        truncation = Some(format!(
            "depth cap {depth_cap} reached without stabilization"
        ));
    }

    let constant_rank = grid_ranks.windows(2).all(|w| w[0] == w[1])
        && ref_ranks.iter().all(|r| *r == grid_ranks[0]);
    let rank = if constant_rank { Some(grid_ranks[0]) } else { None };

    // frame along the trajectory grid
    let mut states = Vec::with_capacity(grid.len());
    let mut frames = Vec::with_capacity(grid.len());
    for &t in &grid {
        let xt = traj.sample(t);
        let mut cols = Vec::new();
        for s in &sections {
            let v = s.eval(xt.as_slice(), t)?;
            let norm = v.norm();
            if norm > 1e-150 {
                // same unit-length cap as the rank probes, so the stored
                // frames match the rank decisions made from them
                cols.push(if norm > 1.0 { v / norm } else { v });
            }
        }
        let mat = if cols.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        frames.push(mat);
        states.push(xt);
    }
    let frame = FrameAlongCurve {
        times: grid.clone(),
        states,
        frames,
        ranks: grid_ranks.clone(),
        provenance: Provenance::BracketClosure,
        sections: Some(sections.clone()),
    };
    let profile = SpanProfile {
        times: grid,
        ranks: grid_ranks,
        singular_values: grid_svs,
        refined_times: refined,
        refined_ranks: ref_ranks,
        constant_rank,
        rank,
        ambiguous: amb,
        stabilized_depth,
        truncation,
    };
    Ok(AdSpanResult {
        frame,
        profile,
        sections,
    })
}

/// Checks that the trajectory's velocity matches `x` to 1e-6 (relative),
/// sampling its dense output with a five-point stencil at probe times that
/// avoid switching kinks.
fn verify_integral_curve(x: &VectorFieldExpr, traj: &Trajectory) -> Result<(), BracketError> {
    let lo = traj.t0.min(traj.t1);
    let hi = traj.t0.max(traj.t1);
    let span = hi - lo;
    if span == 0.0 {
        return Ok(());
    }
    let h = span / 100.0;
    let kinks = &traj.grid; // accepted steps are smooth inside; only probe well inside the window
    let _ = kinks;
    'probe: for i in 0..17 {
        let mut t = lo + span * (i as f64 + 0.382) / 17.0;
        // keep the whole stencil inside the window
        t = t.clamp(lo + 2.5 * h, hi - 2.5 * h);
        // five-point central derivative of the dense output
        let mut fd = DVector::zeros(traj.dim());
        for (c, k) in [(1.0, -2.0), (-8.0, -1.0), (8.0, 1.0), (-1.0, 2.0)] {
            fd += c * traj.sample(t + k * h);
        }
        fd /= 12.0 * h;
        let xt = traj.sample(t);
        let v = x.eval(xt.as_slice(), t)?;
        let residual = (&fd - &v).norm() / (1.0 + v.norm());
        if residual > 1e-6 {
            // a switching kink inside the stencil produces a false alarm;
            // retry once just beside it
            let shifted = t + 5.0 * h;
            if shifted < hi - 2.5 * h {
                let mut fd2 = DVector::zeros(traj.dim());
                for (c, k) in [(1.0, -2.0), (-8.0, -1.0), (8.0, 1.0), (-1.0, 2.0)] {
                    fd2 += c * traj.sample(shifted + k * h);
                }
                fd2 /= 12.0 * h;
                let xt2 = traj.sample(shifted);
                let v2 = x.eval(xt2.as_slice(), shifted)?;
                if (&fd2 - &v2).norm() / (1.0 + v2.norm()) <= 1e-6 {
                    continue 'probe;
                }
            }
            return Err(BracketError::NotIntegralCurve { t, residual });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_vector_field, CoordSystem};
    use crate::flow::{integrate_flow, integrate_tangent, IntegrateOptions};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vf(components: &[&str], names: &[&str]) -> VectorFieldExpr {
        let c = CoordSystem::new(names).unwrap();
        parse_vector_field(components, &c).unwrap()
    }

    fn assert_fields_match(
        a: &VectorFieldExpr,
        b: &dyn Fn(&[f64]) -> Vec<f64>,
        dim: usize,
        tol: f64,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = a.eval(&x, 0.0).unwrap();
            let want = b(&x);
            for i in 0..dim {
                assert!(
                    (got[i] - want[i]).abs() <= tol,
                    "component {i} at {x:?}: {} vs {}",
                    got[i],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn heisenberg_pair_brackets_to_twice_the_vertical_field() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let b = lie_bracket(&y, &z).unwrap();
        assert_fields_match(&b, &|_| vec![0.0, 0.0, 2.0], 3, 1e-14, 1);
    }

    #[test]
    fn coordinate_fields_commute() {
        let ex = VectorFieldExpr::coordinate(3, 0);
        let ey = VectorFieldExpr::coordinate(3, 1);
        assert!(lie_bracket(&ex, &ey).unwrap().is_identically_zero());
    }

    #[test]
    fn crossed_linear_pair() {
        // [x∂y, y∂x] = x∂x − y∂y
        let a = vf(&["0", "x"], &["x", "y"]);
        let b = vf(&["y", "0"], &["x", "y"]);
        let c = lie_bracket(&a, &b).unwrap();
        assert_fields_match(&c, &|x| vec![x[0], -x[1]], 2, 1e-14, 2);
    }

    #[test]
    fn antisymmetry_and_jacobi_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_field = |dim: usize| -> VectorFieldExpr {
            // quadratic polynomial components with random coefficients
            let comps: Vec<ScalarExpr> = (0..dim)
                .map(|_| {
                    let mut e = ScalarExpr::constant(rng.gen_range(-1.0..1.0));
                    for i in 0..dim {
                        e = ScalarExpr::add(
                            e,
                            ScalarExpr::mul(
                                ScalarExpr::constant(rng.gen_range(-1.0..1.0)),
                                ScalarExpr::coord(i),
                            ),
                        );
                        for j in i..dim {
                            e = ScalarExpr::add(
                                e,
                                ScalarExpr::mul(
                                    ScalarExpr::constant(rng.gen_range(-0.5..0.5)),
                                    ScalarExpr::mul(ScalarExpr::coord(i), ScalarExpr::coord(j)),
                                ),
                            );
                        }
                    }
                    e
                })
                .collect();
            VectorFieldExpr::new(comps)
        };
        let (x, y, z) = (rand_field(3), rand_field(3), rand_field(3));
        let xy = lie_bracket(&x, &y).unwrap();
        let yx = lie_bracket(&y, &x).unwrap();
        let jac1 = lie_bracket(&lie_bracket(&x, &y).unwrap(), &z).unwrap();
        let jac2 = lie_bracket(&lie_bracket(&y, &z).unwrap(), &x).unwrap();
        let jac3 = lie_bracket(&lie_bracket(&z, &x).unwrap(), &y).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p: Vec<f64> = (0..3).map(|_| rng2.gen_range(-1.0..1.0)).collect();
            let anti = xy.eval(&p, 0.0).unwrap() + yx.eval(&p, 0.0).unwrap();
            assert!(anti.norm() < 1e-12, "antisymmetry at {p:?}");
            let jacobi = jac1.eval(&p, 0.0).unwrap()
                + jac2.eval(&p, 0.0).unwrap()
                + jac3.eval(&p, 0.0).unwrap();
            assert!(jacobi.norm() < 1e-9, "Jacobi at {p:?}: {}", jacobi.norm());
        }
    }

    #[test]
    fn iterated_brackets() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        // power zero is the field itself
        let p0 = ad_power(&y, &z, 0, 10_000).unwrap();
        assert_fields_match(&p0, &|x| vec![0.0, 1.0, x[0]], 3, 0.0, 5);
        let p1 = ad_power(&y, &z, 1, 10_000).unwrap();
        assert_fields_match(&p1, &|_| vec![0.0, 0.0, 2.0], 3, 1e-14, 6);
        let p2 = ad_power(&y, &z, 2, 10_000).unwrap();
        assert!(p2.is_identically_zero());
    }

    #[test]
    fn linear_fields_bracket_to_the_matrix_commutator() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let linear_field = |m: &DMatrix<f64>| -> VectorFieldExpr {
            let comps = (0..3)
                .map(|i| {
                    let mut e = ScalarExpr::constant(0.0);
                    for j in 0..3 {
                        e = ScalarExpr::add(
                            e,
                            ScalarExpr::mul(ScalarExpr::constant(m[(i, j)]), ScalarExpr::coord(j)),
                        );
                    }
                    e
                })
                .collect();
            VectorFieldExpr::new(comps)
        };
        let xf = linear_field(&a);
        let zf = linear_field(&b);
        let br = lie_bracket(&xf, &zf).unwrap();
        let comm = &b * &a - &a * &b;
        assert_fields_match(
            &br,
            &|x| {
                let v = &comm * DVector::from_column_slice(x);
                v.iter().copied().collect()
            },
            3,
            1e-12,
            10,
        );
    }

    #[test]
    fn bracket_table_words_and_degeneracies() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let table = BracketTable::build(&[y, z], 3, 100_000).unwrap();
        let b12 = table.get("[1,2]").unwrap();
        assert_fields_match(b12, &|_| vec![0.0, 0.0, 2.0], 3, 1e-14, 11);
        assert!(table.get("[1,[1,2]]").unwrap().is_identically_zero());
        assert!(table.get("[1,1]").unwrap().is_identically_zero());
        assert!(table.get("[2,2]").unwrap().is_identically_zero());
        assert!(table.get("2").is_some());
        assert!(table.get("[3,1]").is_none());
    }

    #[test]
    fn bracket_along_curve_matches_symbolic() {
        let c = CoordSystem::new(&["x", "y", "z"]).unwrap();
        let xt = parse_vector_field(
            &["cos(t)", "sin(t)", "-y*cos(t) + x*sin(t)"],
            &c,
        )
        .unwrap();
        let f = TimeDependentField::smooth(xt.clone());
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let traj = integrate_flow(
            &f,
            &DVector::zeros(3),
            0.0,
            2.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let samples =
            bracket_along_curve(&f, &traj, &CurveSection::Symbolic(&z), 400).unwrap();
        let exact = ad_td(&xt, &z).unwrap();
        for s in &samples {
            let xt_pt = traj.sample(s.t);
            let want = exact.eval(xt_pt.as_slice(), s.t).unwrap();
            assert!(
                (&s.value - &want).norm() < 1e-6,
                "at t = {}: {:?} vs {:?}",
                s.t,
                s.value,
                want
            );
        }
    }

    #[test]
    fn bracket_of_transported_section_vanishes() {
        let c = CoordSystem::new(&["x", "y", "z"]).unwrap();
        let xt = parse_vector_field(
            &["cos(t)", "sin(t)", "-y*cos(t) + x*sin(t)"],
            &c,
        )
        .unwrap();
        let f = TimeDependentField::smooth(xt);
        let opts = IntegrateOptions::default();
        let traj = integrate_flow(&f, &DVector::zeros(3), 0.0, 2.0, &opts).unwrap();
        let tt = integrate_tangent(&f, &traj, &opts).unwrap();
        let z0 = DVector::from_column_slice(&[0.3, -1.0, 0.7]);
        let times: Vec<f64> = (0..401).map(|i| 2.0 * i as f64 / 400.0).collect();
        let values: Vec<DVector<f64>> = times.iter().map(|t| tt.at(*t) * &z0).collect();
        let samples = bracket_along_curve(
            &f,
            &traj,
            &CurveSection::Samples {
                times: &times,
                values: &values,
            },
            0,
        )
        .unwrap();
        for s in &samples {
            assert!(
                s.value.norm() < 1e-6,
                "bracket of a transported section should vanish; {} at t = {}",
                s.value.norm(),
                s.t
            );
        }
    }

    #[test]
    fn bracket_of_field_with_itself_along_curve_vanishes() {
        let x = vf(&["y", "-sin(x)"], &["x", "y"]);
        let f = TimeDependentField::smooth(x.clone());
        let traj = integrate_flow(
            &f,
            &DVector::from_column_slice(&[0.5, 0.1]),
            0.0,
            2.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let samples =
            bracket_along_curve(&f, &traj, &CurveSection::Symbolic(&x), 300).unwrap();
        for s in &samples {
            assert!(s.value.norm() < 1e-6, "{} at t = {}", s.value.norm(), s.t);
        }
    }

    #[test]
    fn switching_time_yields_two_one_sided_values() {
        // field switches from ∂x to ∂y at t = 0.5; the section (x, y) has a
        // velocity jump there, and the bracket equals the active field on
        // each side
        let c = CoordSystem::new(&["x", "y"]).unwrap();
        let xt = parse_vector_field(
            &["piecewise(t >= 0.5, 0, 1)", "piecewise(t >= 0.5, 1, 0)"],
            &c,
        )
        .unwrap();
        let f = TimeDependentField::new(xt, vec![0.5]);
        let z = vf(&["x", "y"], &["x", "y"]);
        let traj = integrate_flow(
            &f,
            &DVector::from_column_slice(&[0.2, 0.1]),
            0.0,
            1.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let samples =
            bracket_along_curve(&f, &traj, &CurveSection::Symbolic(&z), 200).unwrap();
        let at_switch: Vec<&BracketSample> =
            samples.iter().filter(|s| (s.t - 0.5).abs() < 1e-12).collect();
        assert_eq!(at_switch.len(), 2);
        let left = at_switch.iter().find(|s| s.side == Side::FromLeft).unwrap();
        let right = at_switch.iter().find(|s| s.side == Side::FromRight).unwrap();
        // [X, Z] for Z = x∂x + y∂y, X constant-in-x: dZ/dt = ẋ = X, J_X = 0
        assert!((left.value[0] - 1.0).abs() < 1e-6, "{:?}", left.value);
        assert!(left.value[1].abs() < 1e-6);
        assert!((right.value[1] - 1.0).abs() < 1e-6, "{:?}", right.value);
        assert!(right.value[0].abs() < 1e-6);
        // interior points are flagged central
        assert!(samples
            .iter()
            .any(|s| s.side == Side::Central && (s.t - 0.25).abs() < 0.01));
    }

    #[test]
    fn iterated_span_fills_the_heisenberg_tangent_space() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let f = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(
            &f,
            &DVector::zeros(3),
            0.0,
            1.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let res = ad_infinity_span(&y, &[y.clone(), z], &traj, 1e-8, 0, 0).unwrap();
        assert!(res.profile.constant_rank);
        assert_eq!(res.profile.rank, Some(3));
        assert_eq!(res.profile.stabilized_depth, Some(1));
        assert!(!res.profile.ambiguous);
    }

    #[test]
    fn iterated_span_of_the_planar_growth_frame() {
        // frame (Y, Z) with Z the characteristic direction: the span along an
        // integral curve of Z stays three-dimensional in a 4-dimensional space
        let y = vf(&["1", "0", "0", "0"], &["x", "y", "z", "w"]);
        let z = vf(&["0", "1", "x", "x^2/2"], &["x", "y", "z", "w"]);
        let f = TimeDependentField::smooth(z.clone());
        let traj = integrate_flow(
            &f,
            &DVector::zeros(4),
            0.0,
            1.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let res = ad_infinity_span(&z, &[y.clone(), z.clone()], &traj, 1e-8, 0, 0).unwrap();
        assert!(res.profile.constant_rank, "ranks: {:?}", res.profile.ranks);
        assert_eq!(res.profile.rank, Some(3));
    }

    #[test]
    fn iterated_span_rank_is_invariant_under_frame_recombination() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let f = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(
            &f,
            &DVector::from_column_slice(&[0.1, -0.2, 0.3]),
            0.0,
            1.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let base = ad_infinity_span(&y, &[y.clone(), z.clone()], &traj, 1e-8, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            // well-conditioned random 2×2 recombination
            let (a, b, c, d) = loop {
                let (a, b, c, d): (f64, f64, f64, f64) = (
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                if (a * d - b * c).abs() > 0.3 {
                    break (a, b, c, d);
                }
            };
            let mix = |p: f64, q: f64| -> VectorFieldExpr {
                VectorFieldExpr::new(
                    (0..3)
                        .map(|i| {
                            ScalarExpr::add(
                                ScalarExpr::mul(
                                    ScalarExpr::constant(p),
                                    y.components[i].clone(),
                                ),
                                ScalarExpr::mul(
                                    ScalarExpr::constant(q),
                                    z.components[i].clone(),
                                ),
                            )
                        })
                        .collect(),
                )
            };
            let res =
                ad_infinity_span(&y, &[mix(a, b), mix(c, d)], &traj, 1e-8, 0, 0).unwrap();
            assert_eq!(res.profile.ranks, base.profile.ranks);
            assert_eq!(res.profile.refined_ranks, base.profile.refined_ranks);
        }
    }

    #[test]
    fn flat_bump_frame_has_an_isolated_rank_drop() {
        // two-generator frame in dimension five whose iterated-bracket span
        // has rank 4 everywhere except a single point where it drops to 3 —
        // the case where a constant-rank verdict must come back false.
        // exp(-1/sqrt(x)) is flat at x = 0 (every derivative tends to 0)
        // while its derivatives stay inside f64 range at all probe points
        let names = ["x", "y", "z", "w", "v"];
        let f1 = vf(&["1", "0", "0", "0", "0"], &names);
        let f2 = vf(
            &[
                "0",
                "1",
                "x",
                "x*y + piecewise(0 >= x, 0, exp(-1/sqrt(x)))",
                "x*y^2 + piecewise(x >= 0, 0, exp(-1/sqrt(0 - x)))",
            ],
            &names,
        );
        // the right bump's second derivative has an isolated zero where
        // sqrt(x) = 1/3; pinning t = 1 (where x = 0) and t = 1 + 1/9 as
        // exact grid points, with steps capped at 0.05 so no probe skips
        // the drop zone
        let t_dd_zero = 1.0 + 1.0 / 9.0;
        let f = TimeDependentField::new(f1.clone(), vec![1.0, t_dd_zero]);
        let mut opts = IntegrateOptions::default();
        opts.max_step = Some(0.05);
        let x0 = DVector::from_column_slice(&[-1.0, 0.0, 0.0, 0.0, 0.0]);
        let traj = integrate_flow(&f, &x0, 0.0, 2.0, &opts).unwrap();
        let res =
            ad_infinity_span(&f1, &[f1.clone(), f2.clone()], &traj, 1e-8, 0, 0).unwrap();
        assert!(!res.profile.constant_rank);
        assert_eq!(res.profile.rank, None);
        // away from the flat point x = 0 (t = 1) the span has rank 4, at
        // every grid and refined probe alike
        for (t, r) in res
            .profile
            .times
            .iter()
            .zip(&res.profile.ranks)
            .chain(res.profile.refined_times.iter().zip(&res.profile.refined_ranks))
        {
            if (t - 1.0).abs() >= 0.05 {
                assert_eq!(*r, 4, "rank at t = {t}");
            }
        }
        // at x = 0 every bump derivative vanishes: rank 3 exactly there
        let k0 = res
            .profile
            .times
            .iter()
            .position(|t| (*t - 1.0).abs() < 1e-9)
            .unwrap();
        assert_eq!(res.profile.ranks[k0], 3);
        // the isolated second-derivative zero at x = 1/9 is bridged by a
        // deeper bracket, not mistaken for a drop
        let k = res
            .profile
            .times
            .iter()
            .position(|t| (*t - t_dd_zero).abs() < 1e-9)
            .unwrap();
        assert_eq!(res.profile.ranks[k], 4);
        assert!(res.profile.stabilized_depth.is_some());
        // CSV profile has one row per grid probe
        let csv = res.profile.to_csv(5);
        assert_eq!(csv.lines().count(), res.profile.times.len() + 1);
        assert!(csv.starts_with("t,rank,sigma_1"));
    }

    #[test]
    fn mismatched_curve_is_rejected() {
        let y = vf(&["1", "0", "-y"], &["x", "y", "z"]);
        let z = vf(&["0", "1", "x"], &["x", "y", "z"]);
        let f = TimeDependentField::smooth(y.clone());
        let traj = integrate_flow(
            &f,
            &DVector::zeros(3),
            0.0,
            1.0,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let err = ad_infinity_span(&z, &[y, z.clone()], &traj, 1e-8, 0, 0).unwrap_err();
        assert!(matches!(err, BracketError::NotIntegralCurve { .. }));
    }
}
