//! Small dense linear algebra helpers.
//!
//! Symmetric eigenvalues come from a cyclic Jacobi sweep. The matrices that
//! show up in certification are at most a few dozen rows, where Jacobi is
//! accurate to working precision and needs no pivoting logic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Off-diagonal Frobenius norm at which the sweep stops.
pub const JACOBI_OFF_DIAGONAL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Largest entrywise asymmetry |a_ij - a_ji| scaled by max(1, max |a_ij|).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let scale = a.amax().max(1.0);
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn ensure_square(name: &str, a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(
            name,
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(())
}

pub fn ensure_symmetric(name: &str, a: &DMatrix<f64>, tol: f64) -> Result<()> {
    ensure_square(name, a)?;
    let deviation = asymmetry(a);
    if deviation > tol {
        return Err(Error::Asymmetric {
            name: name.to_string(),
            deviation,
        });
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix in ascending order.
///
/// Only the upper triangle is trusted; the input is symmetrized first so
/// that rounding noise in assembled matrices does not bias the result.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_square("symmetric_eigenvalues", a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = (a + a.transpose()) * 0.5;
    let scale = m.amax().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off <= JACOBI_OFF_DIAGONAL_TOL * scale.max(1.0) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, p, q, c, s);
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|a, b| a.total_cmp(b));
    Ok(eig)
}

fn off_diagonal_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += m[(i, j)] * m[(i, j)];
            }
        }
    }
    sum.sqrt()
}

// Applies J^T M J for the plane rotation J(p, q, c, s).
fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = m.nrows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(a)?.first().copied().unwrap_or(0.0))
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_radius(eigs: &[f64]) -> f64 {
    eigs.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Moore-Penrose pseudo-inverse via SVD, used to re-derive interface matrices
/// from structural equalities and to reconstruct noise from observed states.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    svd.pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))
}

/// Column rank with relative singular value cutoff 1e-10.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|v| **v > 1e-10 * top).count()
}

pub fn check_vector(operand: &str, v: &DVector<f64>, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dim(operand, expected, v.len()));
    }
    Ok(())
}

pub fn check_shape(operand: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dim(
            operand,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation; all blocks must share a row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let rows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for (i, b) in blocks.iter().enumerate() {
        if b.nrows() != rows {
            return Err(Error::dim(&format!("hstack block {i}"), rows, b.nrows()));
        }
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    Ok(out)
}
