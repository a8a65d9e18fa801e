//! Polynomials stored constant-first, and ordinary least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value floor below which a design is rank deficient.
pub const RANK_TOL: f64 = 1e-13;

/// Horner evaluation of `Σ c[n] x^n`.
pub fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Coefficients of the derivative polynomial.
pub fn polyder(coeffs: &[f64]) -> Vec<f64> {
    if coeffs.len() <= 1 {
        return vec![0.0];
    }
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(n, &c)| n as f64 * c)
        .collect()
}

/// Solves `min ||A x - b||` by Householder QR, refusing rank-deficient designs.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() < a.ncols() {
        return Err(Error::Conditioning { sv_ratio: 0.0 });
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let sv = r.singular_values();
    let max = sv.max();
    let min = sv.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio > RANK_TOL) {
        return Err(Error::Conditioning { sv_ratio: ratio });
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or(Error::Conditioning { sv_ratio: ratio })
}

/// Least-squares polynomial of the given degree through `(x, y)`,
/// constant-first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(Error::Conditioning { sv_ratio: 0.0 });
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    Ok(lstsq(&a, &b)?.iter().copied().collect())
}
