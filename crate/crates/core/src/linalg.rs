//! Dense vector helpers shared by every module.
//!
//! Everything is `f64`. Vectors are `nalgebra::DVector`, matrices are
//! `nalgebra::DMatrix`; basis-like matrices store one direction per row.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DscaError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(DscaError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

pub fn ensure_finite(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DscaError::NonFinite(what.to_string()))
    }
}

pub fn cosine(a: &Vector, b: &Vector) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(b) / (na * nb))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Vector {
    Vector::from_iterator(
        dim,
        (0..dim).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        }),
    )
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    // Row-major fill order keeps streams stable if the layout ever changes.
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = z * std;
        }
    }
    m
}

/// Modified Gram-Schmidt with one re-orthogonalisation pass over the rows.
/// Returns `None` when a row is (numerically) dependent on the earlier ones.
pub fn orthonormalize_rows(m: &Matrix) -> Option<Matrix> {
    let (rows, cols) = m.shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut v: Vector = m.row(i).transpose();
        let original = v.norm();
        if original == 0.0 {
            return None;
        }
        for _ in 0..2 {
            for j in 0..i {
                let q = out.row(j).transpose();
                let c = q.dot(&v);
                v.axpy(-c, &q, 1.0);
            }
        }
        let n = v.norm();
        if n <= 1e-12 * original {
            return None;
        }
        out.set_row(i, &(v / n).transpose());
    }
    Some(out)
}

pub fn random_orthonormal_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    loop {
        let g = gaussian_matrix(rng, rows, cols, 1.0);
        if let Some(q) = orthonormalize_rows(&g) {
            return q;
        }
    }
}

/// Largest principal angle (radians) between the row spaces of two
/// row-orthonormal matrices of equal rank.
///
/// Computed from the spectral norm of `B - B Aᵀ A`, which is `sin θ_max`;
/// this stays accurate for tiny angles where `acos` of the cosines does not.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    if a.nrows() < b.nrows() {
        return std::f64::consts::FRAC_PI_2;
    }
    let residual = b - (b * a.transpose()) * a;
    let s = residual.singular_values().max();
    s.clamp(0.0, 1.0).asin()
}

/// Frobenius distance of `M Mᵀ` from the identity.
pub fn orthonormality_error(m: &Matrix) -> f64 {
    let g = m * m.transpose();
    (g - Matrix::identity(m.nrows(), m.nrows())).norm()
}

/// Serde adapters so vectors and matrices appear as plain JSON arrays
/// (matrices as row-major nested arrays).
pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(data))
    }
}

pub mod serde_vecs {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}

pub mod serde_mat {
    use super::Matrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let (cols, rows) = <(usize, Vec<Vec<f64>>)>::deserialize(d)?;
        if rows.iter().any(|r| r.len() != cols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }
}
