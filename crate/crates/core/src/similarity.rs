//! Cosine and angular similarity with analytic gradients.
//!
//! The angular similarity is `θ = π/2 − arccos(cos(u, v))`, a signed angle in
//! `(−π/2, π/2)`. Its gradient with respect to a unit vector has norm 1 at
//! every angle outside the clamp band, whereas the cosine gradient has norm
//! `sin φ` and vanishes as the pair becomes parallel.
//!
//! Gradients are taken with respect to the raw (unnormalized) inputs through
//! the full quotient rule, so callers can chain them through a normalizing
//! layer without special cases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, dot, in_clamp_region, stable_arccos, Matrix, Vector, ZERO_NORM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Angular,
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityKind::Cosine => write!(f, "cosine"),
            SimilarityKind::Angular => write!(f, "angular"),
        }
    }
}

fn checked_norm(v: &[f64]) -> Result<f64> {
    let n = numcore::norm(v);
    if !n.is_finite() {
        return Err(Error::non_finite("similarity input"));
    }
    if n < ZERO_NORM_TOL {
        return Err(Error::ZeroNorm { norm: n });
    }
    Ok(n)
}

/// Cosine similarity, computed on normalized copies and clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = checked_norm(u)?;
    let nv = checked_norm(v)?;
    let s: f64 = u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum();
    Ok(s.clamp(-1.0, 1.0))
}

/// Angular similarity `π/2 − stable_arccos(cosine_sim(u, v))`, in radians.
pub fn angular_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    let s = cosine_sim(u, v)?;
    Ok(std::f64::consts::FRAC_PI_2 - stable_arccos(s)?)
}

pub fn similarity(kind: SimilarityKind, u: &[f64], v: &[f64]) -> Result<f64> {
    match kind {
        SimilarityKind::Cosine => cosine_sim(u, v),
        SimilarityKind::Angular => angular_sim(u, v),
    }
}

/// Value and gradients of a similarity with respect to both raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGrad {
    pub value: f64,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    /// Set when the pair sits inside the arccos clamp band; the angular
    /// gradient is then reported as zero.
    pub clamped: bool,
}

impl SimGrad {
    /// Rejects gradients that were zeroed by the clamp.
    pub fn strict(self) -> Result<(Vector, Vector)> {
        if self.clamped {
            return Err(Error::ClampRegion {
                cosine: (std::f64::consts::FRAC_PI_2 - self.value).cos(),
            });
        }
        Ok((Vector::from_raw(self.du), Vector::from_raw(self.dv)))
    }
}

/// Cosine similarity together with `∂s/∂u = v/(‖u‖‖v‖) − s·u/‖u‖²` and its mirror.
pub fn cosine_sim_grad(u: &[f64], v: &[f64]) -> Result<SimGrad> {
    let s = cosine_sim(u, v)?;
    let nu = numcore::norm(u);
    let nv = numcore::norm(v);
    let inv = 1.0 / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b * inv - s * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a * inv - s * b / (nv * nv))
        .collect();
    Ok(SimGrad {
        value: s,
        du,
        dv,
        clamped: false,
    })
}

/// Angular similarity with gradients from `∂θ/∂s = 1/√(1 − s²)` chained onto
/// the cosine gradient. Inside the clamp band the gradient is zero and
/// `clamped` is set.
pub fn angular_sim_grad(u: &[f64], v: &[f64]) -> Result<SimGrad> {
    let cos = cosine_sim_grad(u, v)?;
    let s = cos.value;
    let value = std::f64::consts::FRAC_PI_2 - stable_arccos(s)?;
    if in_clamp_region(s) {
        return Ok(SimGrad {
            value,
            du: vec![0.0; u.len()],
            dv: vec![0.0; v.len()],
            clamped: true,
        });
    }
    let ds = 1.0 / (1.0 - s * s).sqrt();
    Ok(SimGrad {
        value,
        du: cos.du.iter().map(|g| g * ds).collect(),
        dv: cos.dv.iter().map(|g| g * ds).collect(),
        clamped: false,
    })
}

pub fn similarity_grad(kind: SimilarityKind, u: &[f64], v: &[f64]) -> Result<SimGrad> {
    match kind {
        SimilarityKind::Cosine => cosine_sim_grad(u, v),
        SimilarityKind::Angular => angular_sim_grad(u, v),
    }
}

/// Symmetric matrix of pairwise similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All pairwise similarities of `z`. Rows are computed in parallel; every
/// entry is an independent pure computation, so the result does not depend
/// on scheduling.
pub fn pairwise_matrix<V: AsRef<[f64]> + Sync>(z: &[V], kind: SimilarityKind) -> Result<SimilarityMatrix> {
    let n = z.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let dim = z[0].as_ref().len();
    let mut unit = Vec::with_capacity(n);
    for v in z {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let nv = checked_norm(v)?;
        unit.push(v.iter().map(|x| x / nv).collect::<Vec<_>>());
    }
    let rows: Vec<Vec<f64>> = unit
        .par_iter()
        .map(|ui| {
            unit.iter()
                .map(|uj| {
                    let s = dot(ui, uj).clamp(-1.0, 1.0);
                    match kind {
                        SimilarityKind::Cosine => s,
                        SimilarityKind::Angular => {
                            std::f64::consts::FRAC_PI_2 - s.clamp(-1.0 + numcore::ARCCOS_EPS, 1.0 - numcore::ARCCOS_EPS).acos()
                        }
                    }
                })
                .collect()
        })
        .collect();
    let values = Matrix::new(n, n, rows.into_iter().flatten().collect())?;
    Ok(SimilarityMatrix { values, kind })
}
