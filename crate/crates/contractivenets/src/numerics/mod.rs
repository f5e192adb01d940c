//! Dense linear-algebra kernel.
//!
//! Everything here operates on `f64` matrices; certification code never runs
//! at lower precision. All operations are pure functions on immutable inputs.

mod expm;
mod lyapunov;

pub use expm::{matrix_exp, matrix_exp_frechet};
pub use lyapunov::solve_lyapunov;

use nalgebra::{DMatrix, DVector};

/// Dense real matrix, the universal currency of this crate.
pub type Matrix = DMatrix<f64>;
/// Dense real vector.
pub type Vector = DVector<f64>;

/// Relative symmetry tolerance accepted by [`max_eig_sym`].
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix not symmetric: |A - A^T| = {asym:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { asym: f64, tol: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("eigensolver failed to converge")]
    EigenFailed,
    #[error("matrix is not Hurwitz (Lyapunov solution min eigenvalue {0:.6e})")]
    NotHurwitz(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.6e})")]
    NotPositiveSemidefinite(f64),
    #[error("matrix is not positive definite (min eigenvalue {0:.6e})")]
    NotPositiveDefinite(f64),
    #[error("diagonal entries must be {expected}, got {got}")]
    BadDiagonal { expected: &'static str, got: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("linear solve failed: {0}")]
    SolveFailed(&'static str),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Diagonal matrix stored as its diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagonal {
    entries: Vector,
}

impl Diagonal {
    pub fn new(entries: Vector) -> Result<Self> {
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite("diagonal entries"));
        }
        Ok(Self { entries })
    }

    pub fn from_slice(entries: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(entries))
    }

    /// Like [`Diagonal::new`] but additionally requires every entry > 0.
    pub fn positive(entries: Vector) -> Result<Self> {
        let d = Self::new(entries)?;
        match d.entries.iter().cloned().fold(f64::INFINITY, f64::min) {
            m if m > 0.0 => Ok(d),
            m => Err(NumericsError::BadDiagonal {
                expected: "strictly positive",
                got: m,
            }),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Vector::from_element(n, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &Vector {
        &self.entries
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix::from_diagonal(&self.entries)
    }

    pub fn inverse(&self) -> Result<Diagonal> {
        if self.entries.iter().any(|&v| v == 0.0) {
            return Err(NumericsError::BadDiagonal {
                expected: "nonzero",
                got: 0.0,
            });
        }
        Ok(Self {
            entries: self.entries.map(|v| 1.0 / v),
        })
    }

    pub fn is_positive(&self) -> bool {
        self.entries.iter().all(|&v| v > 0.0)
    }
}

fn require_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Frobenius norm.
pub fn fro_norm(a: &Matrix) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric part (A + Aᵀ)/2.
pub fn sym_part(a: &Matrix) -> Result<Matrix> {
    require_square(a)?;
    let mut s = a.clone();
    s += a.transpose();
    s *= 0.5;
    Ok(s)
}

/// Largest eigenvalue of a symmetric matrix.
///
/// The input must be symmetric to within `SYMMETRY_TOL·‖S‖`; the symmetrized
/// matrix is what gets decomposed, so roundoff-level asymmetry is harmless.
pub fn max_eig_sym(s: &Matrix) -> Result<f64> {
    symmetric_eigenvalues(s).map(|ev| ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(s: &Matrix) -> Result<f64> {
    symmetric_eigenvalues(s).map(|ev| ev.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// All eigenvalues of a symmetric matrix (unordered).
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vector> {
    require_square(s)?;
    let norm = fro_norm(s);
    let asym = fro_norm(&(s - s.transpose()));
    let tol = SYMMETRY_TOL * norm.max(1.0);
    if asym > tol {
        return Err(NumericsError::NotSymmetric { asym, tol });
    }
    let sym = sym_part(s)?;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("symmetric eigenproblem input"));
    }
    Ok(sym.symmetric_eigenvalues())
}

/// Maximum real part over the eigenvalues of a general square matrix.
/// The QR iteration is capped; matrices it cannot settle within the cap
/// surface as an eigensolver failure rather than a hang.
pub fn max_real_eig(a: &Matrix) -> Result<f64> {
    let n = require_square(a)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("eigenproblem input"));
    }
    let max_iterations = 100 * n.max(10);
    let schur = nalgebra::linalg::Schur::try_new(a.clone(), 1e-13, max_iterations)
        .ok_or(NumericsError::EigenFailed)?;
    let eigs = schur.complex_eigenvalues();
    Ok(eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// True iff every eigenvalue of `A` has real part < −tol.
pub fn is_hurwitz(a: &Matrix, tol: f64) -> Result<bool> {
    Ok(max_real_eig(a)? < -tol)
}

/// Hurwitz test specialized to Metzler matrices (nonnegative off-diagonal):
/// A is Hurwitz with margin tol iff −A − tol·I is a nonsingular M-matrix,
/// i.e. every leading principal minor is positive — read off the pivots of
/// an unpivoted elimination in n³/3 flops instead of a full eigensolve.
/// Agreement with [`is_hurwitz`] on Metzler inputs is exact in real
/// arithmetic; a breakdown (nonpositive pivot) means "not Hurwitz".
pub fn is_hurwitz_metzler(a: &Matrix, tol: f64) -> Result<bool> {
    let n = require_square(a)?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite("is_hurwitz_metzler input"));
    }
    let mut b = -a.clone();
    for i in 0..n {
        b[(i, i)] -= tol;
    }
    for k in 0..n {
        let pivot = b[(k, k)];
        if !(pivot > 0.0 && pivot.is_finite()) {
            return Ok(false);
        }
        for i in (k + 1)..n {
            let factor = b[(i, k)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                let upd = factor * b[(k, j)];
                b[(i, j)] -= upd;
            }
        }
    }
    Ok(true)
}

/// Symmetric square root of a symmetric positive semidefinite matrix,
/// computed as V√Λ Vᵀ. Eigenvalues below −tol·‖S‖ are an error; small
/// negative roundoff is clamped to zero.
pub fn symmetric_sqrt(s: &Matrix) -> Result<Matrix> {
    let n = require_square(s)?;
    let norm = fro_norm(s);
    let asym = fro_norm(&(s - s.transpose()));
    let tol = SYMMETRY_TOL * norm.max(1.0);
    if asym > tol {
        return Err(NumericsError::NotSymmetric { asym, tol });
    }
    let eig = sym_part(s)?.symmetric_eigen();
    let clamp_tol = 1e-10 * norm.max(1.0);
    let mut roots = Vector::zeros(n);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -clamp_tol {
            return Err(NumericsError::NotPositiveSemidefinite(lam));
        }
        roots[k] = lam.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * Matrix::from_diagonal(&roots) * v.transpose())
}

/// Build a matrix from row-major entries.
pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Matrix> {
    if entries.len() != rows * cols {
        return Err(NumericsError::DimensionMismatch(format!(
            "expected {} entries for {rows}x{cols}, got {}",
            rows * cols,
            entries.len()
        )));
    }
    Ok(Matrix::from_row_slice(rows, cols, entries))
}

/// Row-major copy of the entries.
pub fn to_row_major(a: &Matrix) -> Vec<f64> {
    let (r, c) = a.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(a[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m2(entries: [f64; 4]) -> Matrix {
        from_row_major(2, 2, &entries).unwrap()
    }

    #[test]
    fn sym_part_examples() {
        // skew input maps to zero
        let s = sym_part(&m2([0.0, -2.0, 2.0, 0.0])).unwrap();
        assert_eq!(s, m2([0.0, 0.0, 0.0, 0.0]));
        // identity is a fixed point
        let i = Matrix::identity(3, 3);
        assert_eq!(sym_part(&i).unwrap(), i);
        // direct arithmetic
        assert_eq!(
            sym_part(&m2([1.0, 4.0, 0.0, 1.0])).unwrap(),
            m2([1.0, 2.0, 2.0, 1.0])
        );
        // idempotent
        let a = from_row_major(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let s1 = sym_part(&a).unwrap();
        assert_eq!(sym_part(&s1).unwrap(), s1);
    }

    #[test]
    fn sym_part_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            sym_part(&a),
            Err(NumericsError::NotSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn max_eig_sym_examples() {
        assert_abs_diff_eq!(
            max_eig_sym(&m2([-1.0, 1.25, 1.25, -1.0])).unwrap(),
            0.25,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            max_eig_sym(&(-Matrix::identity(2, 2))).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            max_eig_sym(&m2([2.0, 0.0, 0.0, -3.0])).unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn max_eig_sym_rejects_asymmetric() {
        let a = m2([0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(
            max_eig_sym(&a),
            Err(NumericsError::NotSymmetric { .. })
        ));
    }

    /// Brute-force oracle: eigenvalues of a symmetric 2x2 / 3x3 from the
    /// characteristic polynomial, independent of the library eigensolver.
    fn charpoly_max_eig(s: &Matrix) -> f64 {
        match s.nrows() {
            2 => {
                let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
                let tr = a + c;
                let det = a * c - b * b;
                let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
                0.5 * (tr + disc)
            }
            3 => {
                // roots of λ³ - c2λ² + c1λ - c0 via the trigonometric method
                let c2 = s.trace();
                let c1 = 0.5 * (s.trace() * s.trace() - (s * s).trace());
                let c0 = s.determinant();
                let p = c1 - c2 * c2 / 3.0;
                let q = 2.0 * c2.powi(3) / 27.0 - c2 * c1 / 3.0 + c0;
                // λ = t + c2/3 with t³ + pt + q·(-1)... (sign convention below)
                let q = -q;
                if p.abs() < 1e-300 {
                    return q.cbrt() + c2 / 3.0;
                }
                let m = 2.0 * (-p / 3.0).sqrt();
                let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
                let theta = arg.acos() / 3.0;
                (0..3)
                    .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos())
                    .fold(f64::NEG_INFINITY, f64::max)
                    + c2 / 3.0
            }
            _ => panic!("oracle only supports n=2,3"),
        }
    }

    #[test]
    fn max_eig_sym_matches_charpoly_oracle() {
        let fixtures2 = [
            m2([-1.0, 1.25, 1.25, -1.0]),
            m2([2.0, 0.0, 0.0, -3.0]),
            m2([0.5, 0.25, 0.25, -0.75]),
            m2([4.0, -1.5, -1.5, 1.0]),
        ];
        for s in &fixtures2 {
            assert_abs_diff_eq!(
                max_eig_sym(s).unwrap(),
                charpoly_max_eig(s),
                epsilon = 1e-9 * fro_norm(s).max(1.0)
            );
        }
        let fixtures3 = [
            from_row_major(3, 3, &[2., 1., 0., 1., 3., -1., 0., -1., 1.]).unwrap(),
            from_row_major(3, 3, &[-1., 0.5, 0.2, 0.5, -2., 0., 0.2, 0., -0.5]).unwrap(),
            Matrix::identity(3, 3),
        ];
        for s in &fixtures3 {
            assert_abs_diff_eq!(
                max_eig_sym(s).unwrap(),
                charpoly_max_eig(s),
                epsilon = 1e-9 * fro_norm(s).max(1.0)
            );
        }
    }

    #[test]
    fn metzler_hurwitz_agrees_with_eigensolve() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(23);
        let mut hits = 0;
        for trial in 0..400 {
            let n = rng.gen_range(2..10);
            // Metzler candidate: |entries| off-diagonal, shifted diagonal
            let mut a = Matrix::from_fn(n, n, |_, _| rng.gen_range(0.0..0.5));
            for i in 0..n {
                a[(i, i)] = rng.gen_range(-2.0..0.5);
            }
            let fast = is_hurwitz_metzler(&a, 0.0).unwrap();
            let slow = is_hurwitz(&a, 0.0).unwrap();
            assert_eq!(fast, slow, "trial {trial} disagreed");
            hits += fast as usize;
        }
        assert!(hits > 20, "degenerate fixture mix ({hits} Hurwitz)");
    }

    #[test]
    fn hurwitz_examples() {
        // |W| - I for W = [[0, 0.3], [-0.3, 0]]: eigenvalues -0.7, -1.3
        let w_abs_minus_i = m2([-1.0, 0.3, 0.3, -1.0]);
        assert!(is_hurwitz(&w_abs_minus_i, 0.0).unwrap());
        assert!(!is_hurwitz(&Matrix::zeros(2, 2), 0.0).unwrap());
        assert!(is_hurwitz(&(-Matrix::identity(4, 4)), 0.0).unwrap());
        // rotation: eigenvalues ±i, max real part 0
        let rot = m2([0.0, -1.0, 1.0, 0.0]);
        assert!(!is_hurwitz(&rot, 0.0).unwrap());
        assert_abs_diff_eq!(max_real_eig(&rot).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn symmetric_sqrt_examples() {
        let i = Matrix::identity(3, 3);
        assert_abs_diff_eq!(
            fro_norm(&(symmetric_sqrt(&i).unwrap() - &i)),
            0.0,
            epsilon = 1e-12
        );
        let r = symmetric_sqrt(&m2([4.0, 0.0, 0.0, 9.0])).unwrap();
        assert_abs_diff_eq!(fro_norm(&(&r - m2([2.0, 0.0, 0.0, 3.0]))), 0.0, epsilon = 1e-12);
        // Gram matrix residual oracle
        let g = from_row_major(
            5,
            5,
            &(0..25).map(|k| ((k * 37 + 11) % 17) as f64 / 7.0 - 1.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let s = g.transpose() * &g;
        let r = symmetric_sqrt(&s).unwrap();
        assert!(fro_norm(&(&r * &r - &s)) <= 1e-9 * fro_norm(&s).max(1.0));
        assert!(fro_norm(&(&r - r.transpose())) <= 1e-12 * fro_norm(&r).max(1.0));
    }

    #[test]
    fn symmetric_sqrt_rejects_indefinite() {
        let s = m2([1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            symmetric_sqrt(&s),
            Err(NumericsError::NotPositiveSemidefinite(_))
        ));
    }

    #[test]
    fn diagonal_positive_guard() {
        assert!(Diagonal::positive(Vector::from_column_slice(&[1.0, 2.0])).is_ok());
        assert!(Diagonal::positive(Vector::from_column_slice(&[1.0, 0.0])).is_err());
        assert!(Diagonal::new(Vector::from_column_slice(&[f64::NAN])).is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let a = from_row_major(2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a[(0, 1)], 2.0);
        assert_eq!(a[(1, 0)], 4.0);
        assert_eq!(to_row_major(&a), vec![1., 2., 3., 4., 5., 6.]);
    }
}
