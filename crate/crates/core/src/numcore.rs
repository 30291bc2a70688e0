//! Dense linear-algebra substrate.
//!
//! Everything is `f64`: the contrastive logits are divided by temperatures
//! as small as 0.07 before exponentiation, which leaves too little headroom
//! in single precision.
//!
//! Besides [`Vector`] and [`Matrix`] this module hosts the two numerically
//! guarded primitives the rest of the crate leans on ([`l2_normalize`] and
//! [`stable_arccos`]) and the central-difference gradient oracle
//! [`finite_diff_grad`] used by every gradient test.

use std::ops::Deref;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// Half-width of the band around ±1 that `stable_arccos` clamps away.
pub const ARCCOS_EPS: f64 = 1e-7;

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("vector entries"));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim.max(1)])
    }

    /// Wraps values the caller already knows to be finite.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Vector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                context: "matrix",
                expected: "positive rows and cols".into(),
                got: format!("{rows}x{cols}"),
            });
        }
        if rows * cols != values.len() {
            return Err(Error::ShapeMismatch {
                context: "matrix",
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("matrix entries"));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, scale²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let values = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        Ok(out)
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != 0.0 {
                let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
                axpy(s, b, row);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale_in_place(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

/// Projects `v` onto the unit sphere.
pub fn l2_normalize(v: &[f64]) -> Result<Vector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("l2_normalize input"));
    }
    let n = norm(v);
    if n < ZERO_NORM_TOL {
        return Err(Error::ZeroNorm { norm: n });
    }
    Vector::new(v.iter().map(|x| x / n).collect())
}

/// `arccos` with its argument clamped to `[-1 + ε, 1 - ε]`, so the result
/// lies strictly inside `(0, π)` and `d/ds` stays bounded.
pub fn stable_arccos(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::non_finite("stable_arccos input"));
    }
    Ok(s.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos())
}

/// True when `s` falls where `stable_arccos` is flat.
pub fn in_clamp_region(s: f64) -> bool {
    s.abs() > 1.0 - ARCCOS_EPS
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let plus = f(&probe);
        probe[k] = x[k] - h;
        let minus = f(&probe);
        probe[k] = x[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::non_finite(format!("finite difference along coordinate {k}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Vector::new(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the comparison used by every gradient check.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let v = l2_normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_tiny() {
        assert!(matches!(l2_normalize(&[1e-20, 0.0]), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn arccos_values() {
        assert!((stable_arccos(0.0).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        // arccos(1 - 1e-7) from a 40-digit mpmath evaluation
        let edge = 4.472_135_992_267_38e-4;
        assert!((stable_arccos(1.0).unwrap() - edge).abs() < 1e-12);
        let far = 3.141_145_439_990_566_5;
        assert!((stable_arccos(-1.0).unwrap() - far).abs() < 1e-12);
        assert!(stable_arccos(f64::NAN).is_err());
        assert!(stable_arccos(f64::INFINITY).is_err());
    }

    #[test]
    fn arccos_monotone_after_clamp() {
        let mut prev = f64::INFINITY;
        for k in 0..=2000 {
            let s = -1.0 + k as f64 * 1e-3;
            let a = stable_arccos(s).unwrap();
            assert!(a <= prev);
            assert!(a > 0.0 && a < std::f64::consts::PI);
            prev = a;
        }
    }

    #[test]
    fn fd_quadratic() {
        let g = finite_diff_grad(|x| dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() <= 1e-8);
        assert!((g[1] - 4.0).abs() <= 1e-8);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_diff_grad(|_| 3.5, &[0.3, -1.0, 2.0], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_rejects_nonfinite() {
        let r = finite_diff_grad(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn matrix_ops() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert!(m.matvec(&[1.0]).is_err());
        let mut z = Matrix::zeros(2, 2);
        z.add_outer(2.0, &[1.0, 0.0], &[0.5, 1.0]);
        assert_eq!(z.values(), &[1.0, 2.0, 0.0, 0.0]);
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn vector_validation() {
        assert!(Vector::new(vec![]).is_err());
        assert!(Vector::new(vec![1.0, f64::INFINITY]).is_err());
        let v: Vector = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(v.dim(), 2);
    }
}
