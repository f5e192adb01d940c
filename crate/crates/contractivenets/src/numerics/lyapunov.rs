//! Continuous Lyapunov equation AᵀM + MA = −Q, solved as a dense linear
//! system over the n(n+1)/2 free entries of the symmetric unknown M.

use super::{fro_norm, min_eig_sym, Matrix, NumericsError, Result, SYMMETRY_TOL};

/// Solve AᵀM + MA = −Q for symmetric M ≻ 0.
///
/// Requires A Hurwitz and Q symmetric positive definite (which together
/// guarantee a unique positive-definite solution). Non-Hurwitz inputs are
/// detected from the solve itself rather than an up-front eigensolve: a
/// singular system means some λᵢ + λⱼ = 0 (impossible for Hurwitz A), and a
/// unique solution that is not positive definite certifies non-Hurwitz-ness
/// by the converse Lyapunov theorem. The returned solution is checked:
/// residual ‖AᵀM + MA + Q‖ ≤ 1e-8·‖Q‖ and min eigenvalue of M > 0.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if q.shape() != (n, n) {
        return Err(NumericsError::DimensionMismatch(format!(
            "Q is {:?}, expected {n}x{n}",
            q.shape()
        )));
    }
    let q_asym = fro_norm(&(q - q.transpose()));
    if q_asym > SYMMETRY_TOL * fro_norm(q).max(1.0) {
        return Err(NumericsError::NotSymmetric {
            asym: q_asym,
            tol: SYMMETRY_TOL * fro_norm(q).max(1.0),
        });
    }
    let q_min = min_eig_sym(q)?;
    if q_min <= 0.0 {
        return Err(NumericsError::NotPositiveDefinite(q_min));
    }

    // Unknowns m_{ij} for i ≤ j, indexed column-major over the upper triangle.
    let unknowns = n * (n + 1) / 2;
    let idx = |i: usize, j: usize| -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        j * (j + 1) / 2 + i
    };
    let mut sys = Matrix::zeros(unknowns, unknowns);
    let mut rhs = nalgebra::DVector::<f64>::zeros(unknowns);
    // Equation (i,j), i ≤ j:  Σ_k A_{ki} m_{kj} + Σ_k m_{ik} A_{kj} = -Q_{ij}
    let mut row = 0;
    for j in 0..n {
        for i in 0..=j {
            for k in 0..n {
                sys[(row, idx(k, j))] += a[(k, i)];
                sys[(row, idx(i, k))] += a[(k, j)];
            }
            rhs[row] = -q[(i, j)];
            row += 1;
        }
    }
    // singular ⟺ some λᵢ(A) + λⱼ(A) = 0, which cannot happen for Hurwitz A
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or(NumericsError::NotHurwitz(f64::NAN))?;
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            m[(i, j)] = sol[idx(i, j)];
            m[(j, i)] = sol[idx(i, j)];
        }
    }

    // scale-aware residual: relative to the terms that form it, so solutions
    // with large transient energy (‖M‖ ≫ ‖Q‖) are judged by backward error
    let atm = a.transpose() * &m;
    let ma = &m * a;
    let residual = fro_norm(&(&atm + &ma + q));
    let scale = fro_norm(q) + fro_norm(&atm) + fro_norm(&ma);
    if residual > 1e-8 * scale.max(f64::MIN_POSITIVE) {
        return Err(NumericsError::SolveFailed("Lyapunov residual too large"));
    }
    let m_min = min_eig_sym(&m)?;
    if m_min <= 0.0 {
        return Err(NumericsError::NotHurwitz(m_min));
    }
    Ok(m)
}
