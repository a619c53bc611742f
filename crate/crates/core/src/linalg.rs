//! Dense symmetric linear algebra on top of `nalgebra` storage.
//!
//! Everything downstream (Gram matrices, predictive covariance blocks,
//! criterion evaluation) goes through the types here so that symmetry and
//! jitter handling live in one place.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Multipliers applied to `base_jitter * mean(diag)` on successive attempts.
const JITTER_LADDER: [f64; 5] = [0.0, 1.0, 10.0, 100.0, 1000.0];

const EIGEN_MAX_ITER: usize = 10_000;

/// Square symmetric matrix. Symmetry is enforced on construction by
/// averaging with the transpose, so stored entries are exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::DegenerateData("empty matrix".into()));
        }
        Ok(Self::symmetrize(m))
    }

    /// Caller guarantees the matrix is square and non-empty.
    pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        SymMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(diag),
        ))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Self::new(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.trace() / self.dim() as f64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Leading principal submatrix of size `k`.
    pub fn leading(&self, k: usize) -> SymMatrix {
        SymMatrix(self.0.view((0, 0), (k, k)).into_owned())
    }

    /// Principal submatrix on the given index set, in the given order.
    pub fn select(&self, idx: &[usize]) -> SymMatrix {
        let k = idx.len();
        SymMatrix(DMatrix::from_fn(k, k, |i, j| self.0[(idx[i], idx[j])]))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(SymMatrix(&self.0 - &other.0))
    }

    pub fn add_diagonal(&self, value: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += value;
        }
        SymMatrix(m)
    }
}

/// Lower-triangular Cholesky factor of `m + jitter_used * I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(b.nrows())?;
        Ok(self
            .lower
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is strictly positive"))
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: rows,
            });
        }
        Ok(())
    }
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Rungs are `{0, j, 10j, 100j, 1000j}` with `j = base_jitter * mean(diag)`;
/// the first rung that factors is kept.
pub fn cholesky_psd(m: &SymMatrix, base_jitter: f64) -> Result<CholFactor> {
    let scale = base_jitter.max(0.0) * m.mean_diagonal().abs();
    let mut last = 0.0;
    for (rung, mult) in JITTER_LADDER.iter().enumerate() {
        let jitter = scale * mult;
        if rung > 0 && jitter == last {
            continue;
        }
        last = jitter;
        if let Some(lower) = try_cholesky(m.as_matrix(), jitter) {
            return Ok(CholFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

fn try_cholesky(m: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut a = m.clone();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    let chol = nalgebra::Cholesky::new(a)?;
    let lower = chol.unpack();
    if lower.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(lower)
    } else {
        None
    }
}

/// Solves `(L L^T) X = b`.
pub fn solve_with_factor(f: &CholFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    f.check_rows(b.nrows())?;
    let y = f
        .lower
        .solve_lower_triangular(b)
        .expect("cholesky diagonal is strictly positive");
    Ok(f.lower
        .tr_solve_lower_triangular(&y)
        .expect("cholesky diagonal is strictly positive"))
}

pub fn log_det_from_factor(f: &CholFactor) -> f64 {
    2.0 * f.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Full spectrum, sorted in descending order.
pub fn sym_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    if m.dim() == 1 {
        return Ok(vec![m.get(0, 0)]);
    }
    let eig = SymmetricEigen::try_new(m.as_matrix().clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::ConvergenceFailure)?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(*sym_eigenvalues(m)?.last().expect("dim >= 1"))
}

pub fn max_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(sym_eigenvalues(m)?[0])
}

pub fn is_psd(m: &SymMatrix, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(m)? >= -tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
        SymMatrix::new(m).unwrap()
    }

    #[test]
    fn cholesky_of_identity() {
        let f = cholesky_psd(&SymMatrix::identity(3), 0.0).unwrap();
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn cholesky_two_by_two_by_hand() {
        let m = SymMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap();
        let f = cholesky_psd(&m, 0.0).unwrap();
        let l = f.lower();
        assert_abs_diff_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(0, 1)], 0.0);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn indefinite_exhausts_ladder() {
        let m = SymMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_psd(&m, 1e-8),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn jitter_rescues_singular() {
        let m = SymMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]).unwrap();
        let f = cholesky_psd(&m, 1e-8).unwrap();
        assert!(f.jitter_used() > 0.0);
    }

    #[test]
    fn solve_identity_and_hand_case() {
        let b = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let f = cholesky_psd(&SymMatrix::identity(3), 0.0).unwrap();
        assert_eq!(solve_with_factor(&f, &b).unwrap(), b);

        let m = SymMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap();
        let f = cholesky_psd(&m, 0.0).unwrap();
        let x = solve_with_factor(&f, &DMatrix::from_column_slice(2, 1, &[4.0, 2.0])).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn solve_rejects_bad_rows() {
        let f = cholesky_psd(&SymMatrix::identity(3), 0.0).unwrap();
        assert!(matches!(
            solve_with_factor(&f, &DMatrix::zeros(2, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solve_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(5, &mut rng);
        let b = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let f = cholesky_psd(&m, 0.0).unwrap();
        let x = solve_with_factor(&f, &b).unwrap();
        let back = m.as_matrix() * x;
        assert!((back - &b).norm() <= 1e-8 * b.norm());
    }

    #[test]
    fn log_det_cases() {
        let f = cholesky_psd(&SymMatrix::identity(4), 0.0).unwrap();
        assert_eq!(log_det_from_factor(&f), 0.0);
        let f = cholesky_psd(&SymMatrix::from_diagonal(&[2.0, 0.5]), 0.0).unwrap();
        assert_abs_diff_eq!(log_det_from_factor(&f), 0.0, epsilon = 1e-15);
        let e = std::f64::consts::E;
        let f = cholesky_psd(&SymMatrix::from_diagonal(&[e, e]), 0.0).unwrap();
        assert_abs_diff_eq!(log_det_from_factor(&f), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn eigenvalue_cases() {
        let v = sym_eigenvalues(&SymMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(v, vec![3.0, 2.0, 1.0]);
        let m = SymMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let v = sym_eigenvalues(&m).unwrap();
        assert_abs_diff_eq!(v[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
        assert_eq!(
            sym_eigenvalues(&SymMatrix::from_rows(&[&[7.5]]).unwrap()).unwrap(),
            vec![7.5]
        );
    }

    #[test]
    fn psd_cases() {
        let zero = SymMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        assert!(is_psd(&zero, 0.0).unwrap());
        assert!(!is_psd(&SymMatrix::from_diagonal(&[1.0, -1e-3]), 1e-8).unwrap());
        assert!(is_psd(&SymMatrix::from_diagonal(&[1.0, -1e-9]), 1e-8).unwrap());
    }

    #[test]
    fn construction_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s.get(0, 1), 3.0);
        assert_eq!(s.get(1, 0), 3.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn factor_reconstructs(seed in any::<u64>(), n in 1usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(n, &mut rng);
                let f = cholesky_psd(&m, 1e-10).unwrap();
                prop_assert!(f.lower().diagonal().iter().all(|d| *d > 0.0));
                let rec = f.lower() * f.lower().transpose();
                let target = m.add_diagonal(f.jitter_used());
                let err = (rec - target.as_matrix()).norm() / target.as_matrix().norm();
                prop_assert!(err <= 1e-10, "relative error {err}");
            }

            #[test]
            fn log_det_matches_spectrum(seed in any::<u64>(), n in 1usize..=20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(n, &mut rng);
                let f = cholesky_psd(&m, 0.0).unwrap();
                let ld = log_det_from_factor(&f);
                let eig: f64 = sym_eigenvalues(&m).unwrap().iter().map(|v| v.ln()).sum();
                prop_assert!((ld - eig).abs() <= 1e-8 * eig.abs().max(1.0));
            }

            #[test]
            fn spectrum_sums_to_trace(seed in any::<u64>(), n in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-3.0..3.0));
                let m = SymMatrix::new(a).unwrap();
                let v = sym_eigenvalues(&m).unwrap();
                prop_assert!(v.windows(2).all(|w| w[0] >= w[1]));
                let maxabs = m.as_matrix().amax();
                prop_assert!((v.iter().sum::<f64>() - m.trace()).abs() <= 1e-9 * n as f64 * maxabs.max(1e-300));
            }

            #[test]
            fn psd_iff_cholesky_away_from_boundary(seed in any::<u64>(), n in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
                let m = SymMatrix::new(a).unwrap();
                let min = min_eigenvalue(&m).unwrap();
                prop_assume!(min.abs() > 1e-6);
                prop_assert_eq!(is_psd(&m, 0.0).unwrap(), cholesky_psd(&m, 0.0).is_ok());
            }
        }
    }
}
