use super::{inf_norm, LuFactor, Matrix, NumericsError, Result};

const MAX_ITERATIONS: usize = 10_000;
const STEP_TOL: f64 = 1e-12;
/// Refinement target once `STEP_TOL` is met; iteration also stops when the
/// step stagnates at roundoff level.
const REFINE_TOL: f64 = 1e-15;
/// Iterations without a new smallest step before roundoff stagnation is declared.
const STALL_LIMIT: usize = 1000;

fn check_dims(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(NumericsError::Dimension(format!(
            "DARE operands A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    Ok(())
}

fn symmetrize(p: &Matrix) -> Matrix {
    (p + p.transpose()) * 0.5
}

/// One application of the Riccati map.
fn riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let at = a.transpose();
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let btpa = pb.transpose() * a;
    let gain = LuFactor::new(&s)?.solve_matrix(&btpa)?;
    let next = &at * p * a - btpa.transpose() * gain + q;
    Ok(symmetrize(&next))
}

/// Stabilizing solution of `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q = 0`.
///
/// Fixed-point iteration of the Riccati map from `P₀ = Q`. Converged once
/// `‖P_{k+1} − P_k‖_∞ ≤ 1e-12 (1 + ‖P_k‖_∞)`; the iteration then continues
/// until the step reaches roundoff level or stops shrinking. Exhausting the iteration
/// cap usually means `(A, B)` is not stabilizable.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    check_dims(a, b, q, r)?;
    let mut p = symmetrize(q);
    let mut last_step = f64::INFINITY;
    let mut best_step = f64::INFINITY;
    let mut stalled = 0;
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let next = riccati_map(a, b, q, r, &p)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite("riccati iteration"));
        }
        let step = inf_norm(&(&next - &p));
        let scale = 1.0 + inf_norm(&p);
        converged |= step <= STEP_TOL * scale;
        if step < best_step {
            best_step = step;
            stalled = 0;
        } else {
            stalled += 1;
        }
        last_step = step;
        p = next;
        if converged && (step <= REFINE_TOL * scale || stalled >= STALL_LIMIT) {
            return Ok(p);
        }
    }
    if converged {
        return Ok(p);
    }
    Err(NumericsError::NoConvergence {
        iterations: MAX_ITERATIONS,
        last_step,
    })
}

/// `‖AᵀPA − P − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q‖_∞`.
pub fn riccati_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64> {
    check_dims(a, b, q, r)?;
    let mapped = riccati_map(a, b, q, r, p)?;
    Ok(inf_norm(&(mapped - p)))
}

/// `K = −(R + BᵀPB)⁻¹BᵀPA`, so that `u = K x`.
pub fn lqr_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n || p.shape() != (n, n) || r.shape() != (m, m) {
        return Err(NumericsError::Dimension("LQR gain operands".into()));
    }
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let rhs = pb.transpose() * a;
    Ok(-LuFactor::new(&s)?.solve_matrix(&rhs)?)
}

/// Largest eigenvalue of `AclᵀPAcl − P + Q + KᵀRK`.
///
/// A value at or below zero certifies that `xᵀPx` bounds the infinite-horizon
/// cost of the closed loop `x⁺ = Acl x` under stage cost `xᵀQx + uᵀRu`.
pub fn lyapunov_residual(acl: &Matrix, p: &Matrix, q: &Matrix, r: &Matrix, k: &Matrix) -> Result<f64> {
    let n = acl.nrows();
    if !acl.is_square()
        || p.shape() != (n, n)
        || q.shape() != (n, n)
        || k.ncols() != n
        || r.shape() != (k.nrows(), k.nrows())
    {
        return Err(NumericsError::Dimension("Lyapunov operands".into()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let m = acl.transpose() * p * acl - p + q + k.transpose() * r * k;
    let eig = nalgebra::SymmetricEigen::new(symmetrize(&m));
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::spectral_radius;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_golden_ratio() {
        let p = solve_dare(&scalar(1.0), &scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        // p² − p − 1 = 0
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(p[(0, 0)], golden, epsilon = 1e-10);
        let k = lqr_gain(&scalar(1.0), &scalar(1.0), &scalar(1.0), &p).unwrap();
        assert_relative_eq!(k[(0, 0)], -(5f64.sqrt() - 1.0) / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_dynamics_gives_q() {
        let q = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = Matrix::from_row_slice(2, 1, &[1.0, -3.0]);
        let p = solve_dare(&Matrix::zeros(2, 2), &b, &q, &scalar(0.7)).unwrap();
        assert!((p - q).amax() < 1e-14);
    }

    #[test]
    fn no_actuation_gives_zero_gain() {
        let a = Matrix::identity(2, 2);
        let p = Matrix::identity(2, 2) * 3.0;
        let k = lqr_gain(&a, &Matrix::zeros(2, 1), &scalar(1.0), &p).unwrap();
        assert_eq!(k, Matrix::zeros(1, 2));
    }

    #[test]
    fn trivial_certificate_is_zero() {
        let i = Matrix::identity(2, 2);
        let v = lyapunov_residual(&Matrix::zeros(2, 2), &i, &i, &scalar(1.0), &Matrix::zeros(1, 2)).unwrap();
        assert_relative_eq!(v, 0.0);
    }

    #[test]
    fn double_integrator_certificate() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let r = scalar(10.0);
        let p = solve_dare(&a, &b, &q, &r).unwrap();
        assert!(riccati_residual(&a, &b, &q, &r, &p).unwrap() <= 1e-8 * (1.0 + inf_norm(&p)));
        let k = lqr_gain(&a, &b, &r, &p).unwrap();
        let acl = &a + &b * &k;
        assert!(spectral_radius(&acl) < 1.0);
        assert!(lyapunov_residual(&acl, &p, &q, &r, &k).unwrap().abs() <= 1e-8);
        let perturbed = &p - Matrix::identity(2, 2) * 0.1;
        assert!(lyapunov_residual(&acl, &perturbed, &q, &r, &k).unwrap() > 0.0);
    }

    #[test]
    fn unstabilizable_does_not_converge() {
        let a = scalar(1.5);
        let err = solve_dare(&a, &scalar(0.0), &scalar(1.0), &scalar(1.0)).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::NonFinite(_) | NumericsError::NoConvergence { .. }
        ));
    }
}
