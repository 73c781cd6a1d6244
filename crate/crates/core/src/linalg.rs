//! Numerical rank, span membership, and nonnegative least squares — the
//! shared decision kernel for every rank profile, span test, and cone
//! membership query in the toolkit.

use nalgebra::{DMatrix, DVector};

/// Default relative singular-value cutoff for numerical rank.
pub const DEFAULT_TOL_RANK: f64 = 1e-8;
/// Default relative residual below which a vector counts as lying in a span.
pub const DEFAULT_TOL_RESIDUAL: f64 = 1e-6;
/// Rank decisions whose decisive singular value sits within this factor of
/// the cutoff are flagged ambiguous rather than forced either way.
pub const AMBIGUITY_BAND: f64 = 10.0;

/// Outcome of a numerical rank computation, with margin diagnostics.
#[derive(Debug, Clone)]
pub struct RankResult {
    pub rank: usize,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    /// Absolute cutoff used: `tol_rank * σ_max`.
    pub threshold: f64,
    /// `σ_rank / threshold` — how comfortably the last kept value clears the
    /// cutoff (`inf` when rank is 0).
    pub margin_above: f64,
    /// `threshold / σ_{rank+1}` — how comfortably the first dropped value
    /// stays below it (`inf` when nothing is dropped or it is exactly 0).
    pub margin_below: f64,
    /// True when either margin is within [`AMBIGUITY_BAND`].
    pub ambiguous: bool,
    /// Orthonormal basis of the column span (`nrows × rank`).
    pub basis: DMatrix<f64>,
}

/// Rank of the column span of `m` with relative cutoff `tol_rank`.
pub fn numerical_rank(m: &DMatrix<f64>, tol_rank: f64) -> RankResult {
    let nrows = m.nrows();
    if m.ncols() == 0 || nrows == 0 {
        return RankResult {
            rank: 0,
            singular_values: vec![],
            threshold: 0.0,
            margin_above: f64::INFINITY,
            margin_below: f64::INFINITY,
            ambiguous: false,
            basis: DMatrix::zeros(nrows, 0),
        };
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("SVD with U requested");
    let mut pairs: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let sigmas: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
    let sigma_max = sigmas[0];
    if sigma_max == 0.0 {
        return RankResult {
            rank: 0,
            singular_values: sigmas,
            threshold: 0.0,
            margin_above: f64::INFINITY,
            margin_below: f64::INFINITY,
            ambiguous: false,
            basis: DMatrix::zeros(nrows, 0),
        };
    }
    let threshold = tol_rank * sigma_max;
    let rank = sigmas.iter().filter(|s| **s > threshold).count();
    let margin_above = if rank == 0 {
        f64::INFINITY
    } else {
        sigmas[rank - 1] / threshold
    };
    let margin_below = match sigmas.get(rank) {
        Some(s) if *s > 0.0 => threshold / s,
        _ => f64::INFINITY,
    };
    let ambiguous = margin_above < AMBIGUITY_BAND || margin_below < AMBIGUITY_BAND;
    let mut basis = DMatrix::zeros(nrows, rank);
    for (k, (_, orig)) in pairs.iter().take(rank).enumerate() {
        basis.set_column(k, &u.column(*orig));
    }
    RankResult {
        rank,
        singular_values: sigmas,
        threshold,
        margin_above,
        margin_below,
        ambiguous,
        basis,
    }
}

/// Relative distance from `v` to the span of the orthonormal columns of
/// `basis`: `‖v − B Bᵀ v‖ / ‖v‖`, or 0 for (near-)zero `v`.
pub fn span_residual(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let norm = v.norm();
    if norm <= f64::MIN_POSITIVE.sqrt() {
        return 0.0;
    }
    if basis.ncols() == 0 {
        return 1.0;
    }
    let proj = basis * (basis.transpose() * v);
    (v - proj).norm() / norm
}

/// Largest [`span_residual`] over the columns of `vectors`.
pub fn subspace_defect(basis: &DMatrix<f64>, vectors: &DMatrix<f64>) -> f64 {
    (0..vectors.ncols())
        .map(|j| span_residual(basis, &vectors.column(j).into_owned()))
        .fold(0.0, f64::max)
}

/// Orthonormal basis of the kernel of a nonzero covector `lam` (as a row
/// functional on R^n): `n × (n−1)` columns `w` with `⟨lam, w⟩ = 0`.
pub fn covector_kernel(lam: &DVector<f64>) -> DMatrix<f64> {
    let n = lam.len();
    let norm = lam.norm();
    assert!(norm > 0.0, "kernel of the zero covector is everything");
    // Householder reflector H = I − 2vvᵀ/(vᵀv) sending lam/‖lam‖ to ∓e1;
    // its remaining columns are an orthonormal basis of the kernel.
    let u = lam / norm;
    let mut v = u.clone();
    v[0] += if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let vn2 = v.norm_squared();
    let mut basis = DMatrix::zeros(n, n - 1);
    for k in 1..n {
        let coef = 2.0 * v[k] / vn2;
        let mut col = -coef * &v;
        col[k] += 1.0;
        basis.set_column(k - 1, &col);
    }
    basis
}

/// Nonnegative least squares via the Lawson–Hanson active-set method:
/// minimizes `‖A c − b‖` subject to `c ≥ 0`.
///
/// Returns the coefficients and the residual norm. Problem sizes here are a
/// handful of columns (cone rays), so the dense re-factorization per active
/// set change is irrelevant.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    if n == 0 {
        return (x, b.norm());
    }
    let scale = a.norm().max(b.norm()).max(1.0);
    let tol = 1e-13 * scale;
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 30;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !passive[i] && w[i] > tol {
                if best.map(|(_, bw)| w[i] > bw).unwrap_or(true) {
                    best = Some((i, w[i]));
                }
            }
        }
        let Some((j, _)) = best else { break };
        passive[j] = true;

        // inner loop: restore feasibility of the passive-set LS solution
        loop {
            let idx: Vec<usize> = (0..n).filter(|i| passive[*i]).collect();
            let sub = a.select_columns(idx.iter());
            let z_sub = lstsq(&sub, b);
            if z_sub.iter().all(|v| *v > tol) {
                x.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = z_sub[k];
                }
                break;
            }
            // step from x toward z until the first passive coefficient hits 0
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if z_sub[k] <= tol {
                    let denom = x[i] - z_sub[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z_sub[k] - x[i]);
            }
            for i in 0..n {
                if passive[i] && x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }
    let residual = (b - a * &x).norm();
    (x, residual)
}

/// Minimum-norm least squares solve via SVD.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-13 * a.norm().max(1.0))
        .expect("SVD solve requested U and V")
}

/// Membership of `v` in the convex cone generated by the columns of `rays`,
/// decided by relative NNLS residual against `tol`.
#[derive(Debug, Clone)]
pub struct ConeMembership {
    pub member: bool,
    /// `‖R c − v‖ / ‖v‖` at the NNLS optimum.
    pub residual: f64,
    pub coefficients: Vec<f64>,
}

pub fn cone_membership(rays: &DMatrix<f64>, v: &DVector<f64>, tol: f64) -> ConeMembership {
    let vnorm = v.norm();
    if vnorm <= f64::MIN_POSITIVE.sqrt() {
        return ConeMembership {
            member: true,
            residual: 0.0,
            coefficients: vec![0.0; rays.ncols()],
        };
    }
    // normalize ray columns so the NNLS scale matches the query
    let mut r = rays.clone();
    for mut col in r.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let (c, res) = nnls(&r, v);
    ConeMembership {
        member: res / vnorm <= tol,
        residual: res / vnorm,
        coefficients: c.iter().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_of_known_matrices() {
        let m = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let r = numerical_rank(&m, DEFAULT_TOL_RANK);
        assert_eq!(r.rank, 2);
        assert!(!r.ambiguous);
        assert!(r.margin_above > 1e6);
        // basis spans the same plane
        let v = DVector::from_column_slice(&[2.0, -3.0, 0.0]);
        assert!(span_residual(&r.basis, &v) < 1e-12);
        let w = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        assert!(span_residual(&r.basis, &w) > 0.99);
    }

    #[test]
    fn rank_margins_flag_borderline() {
        // second singular value right at 3x the cutoff -> ambiguous
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 3.0e-8]);
        let r = numerical_rank(&m, 1e-8);
        assert!(r.ambiguous);
        // comfortably separated -> not ambiguous
        let m = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0e-3]);
        let r = numerical_rank(&m, 1e-8);
        assert_eq!(r.rank, 2);
        assert!(!r.ambiguous);
    }

    #[test]
    fn empty_and_zero_matrices() {
        let m = DMatrix::<f64>::zeros(3, 0);
        assert_eq!(numerical_rank(&m, 1e-8).rank, 0);
        let m = DMatrix::<f64>::zeros(3, 2);
        let r = numerical_rank(&m, 1e-8);
        assert_eq!(r.rank, 0);
        assert!(!r.ambiguous);
    }

    #[test]
    fn covector_kernel_is_orthogonal() {
        let lam = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let k = covector_kernel(&lam);
        assert_eq!(k.ncols(), 3);
        for j in 0..3 {
            assert!(lam.dot(&k.column(j).into_owned()).abs() < 1e-12);
            assert!((k.column(j).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nnls_recovers_nonnegative_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let a = DMatrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
            let c_true = DVector::from_fn(5, |i, _| {
                if i % 2 == 0 {
                    rng.gen_range(0.0..2.0)
                } else {
                    0.0
                }
            });
            let b = &a * &c_true;
            let (c, res) = nnls(&a, &b);
            assert!(res < 1e-9, "residual {res}");
            assert!(c.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn nnls_rejects_exterior_points() {
        // cone spanned by e1, e2 in R^3; query with a -e3 component
        let a = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let b = DVector::from_column_slice(&[1.0, 1.0, -2.0]);
        let (_, res) = nnls(&a, &b);
        assert!((res - 2.0).abs() < 1e-12);
        let m = cone_membership(&a, &b, 1e-6);
        assert!(!m.member);
        let inside = DVector::from_column_slice(&[0.3, 2.0, 0.0]);
        let m = cone_membership(&a, &inside, 1e-6);
        assert!(m.member);
        assert!(m.residual < 1e-12);
    }

    #[test]
    fn nnls_negative_coefficient_required_means_outside() {
        // b = r1 - r2 needs a negative weight; NNLS must not return it
        let a = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[0.0, -1.0]);
        let (c, res) = nnls(&a, &b);
        assert!(c.iter().all(|v| *v >= 0.0));
        assert!(res > 0.5);
    }
}
