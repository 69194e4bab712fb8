//! Per-concept semantic bases: PCA initialization, residualized incremental
//! refinement, projectors and overlap diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, orthonormalize_rows, serde_mat, serde_vec, Matrix, Vector};

/// Row-orthonormal `r × d` basis of a concept's principal subspace.
///
/// `components` are the principal directions (sign-normalized); together
/// with the running mean, singular values and sample count they are the
/// incremental update state. `rows` span the same subspace: equal to the
/// components at initialization, and after each refinement the orthonormal
/// frame of the new subspace closest to the previous rows, so module
/// coordinates stay continuous. `version` counts refinements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    pub concept_id: usize,
    #[serde(with = "serde_mat")]
    rows: Matrix,
    #[serde(with = "serde_mat")]
    components: Matrix,
    #[serde(with = "serde_vec")]
    mean: Vector,
    singular_values: Vec<f64>,
    n_seen: usize,
    version: u64,
}

impl SubspaceBasis {
    /// Wraps explicit rows (orthonormalized) with a zero mean and unit
    /// spectrum. Used for constructed bases in tests and the dense reference.
    pub fn from_rows(concept_id: usize, rows: &Matrix) -> Result<Self> {
        let q = orthonormalize_rows(rows).ok_or(DscaError::DegenerateCovariance {
            requested: rows.nrows(),
            achievable: rank_estimate(rows),
        })?;
        let r = q.nrows();
        let d = q.ncols();
        Ok(Self {
            concept_id,
            components: q.clone(),
            rows: q,
            mean: Vector::zeros(d),
            singular_values: vec![1.0; r],
            n_seen: 0,
            version: 0,
        })
    }

    /// Rebuilds a basis from checkpointed parts without re-orthonormalizing.
    pub fn from_parts(
        concept_id: usize,
        rows: Matrix,
        components: Matrix,
        mean: Vector,
        singular_values: Vec<f64>,
        n_seen: usize,
        version: u64,
    ) -> Result<Self> {
        check_dim("basis mean", rows.ncols(), mean.len())?;
        check_dim("basis spectrum", rows.nrows(), singular_values.len())?;
        if components.shape() != rows.shape() {
            return Err(DscaError::DimensionMismatch {
                context: "basis components",
                expected: rows.nrows() * rows.ncols(),
                found: components.nrows() * components.ncols(),
            });
        }
        Ok(Self {
            concept_id,
            rows,
            components,
            mean,
            singular_values,
            n_seen,
            version,
        })
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    /// Principal directions, largest variance first.
    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn rank(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Subspace coordinates `R h`.
    pub fn coords(&self, h: &Vector) -> Result<Vector> {
        check_dim("basis coords", self.dim(), h.len())?;
        Ok(&self.rows * h)
    }

    /// `Rᵀ R h`.
    pub fn project(&self, h: &Vector) -> Result<Vector> {
        Ok(self.rows.tr_mul(&self.coords(h)?))
    }

    /// Dense projector `Rᵀ R`.
    pub fn projector(&self) -> Matrix {
        self.rows.tr_mul(&self.rows)
    }
}

fn rank_estimate(m: &Matrix) -> usize {
    let s = m.clone().singular_values();
    let top = s.max();
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > 1e-10 * top).count()
}

/// `h − Σ_j R_jᵀ R_j h` over the given bases.
pub fn residualize(h: &Vector, earlier: &[&SubspaceBasis]) -> Vector {
    let mut out = h.clone();
    for b in earlier {
        let c = &b.rows * h;
        out -= b.rows.tr_mul(&c);
    }
    out
}

/// Flip each row so its largest-magnitude entry (first on ties) is positive.
fn apply_sign_convention(rows: &mut Matrix) {
    for i in 0..rows.nrows() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for j in 0..rows.ncols() {
            let a = rows[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = j;
            }
        }
        if rows[(i, best)] < 0.0 {
            rows.row_mut(i).neg_mut();
        }
    }
}

/// Thin SVD of `m` with right singular vectors sorted by descending
/// singular value. Returns `(singular_values, vt)`.
fn sorted_right_singular(m: Matrix) -> (Vec<f64>, Matrix) {
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let sorted_s = order.iter().map(|&i| s[i]).collect();
    let sorted_vt = Matrix::from_fn(order.len(), vt.ncols(), |i, j| vt[(order[i], j)]);
    (sorted_s, sorted_vt)
}

fn stack_rows(samples: &[Vector], d: usize) -> Matrix {
    Matrix::from_fn(samples.len(), d, |i, j| samples[i][j])
}

fn column_mean(samples: &[Vector], d: usize) -> Vector {
    let mut m = Vector::zeros(d);
    for s in samples {
        m += s;
    }
    m / samples.len() as f64
}

fn achievable_rank(s: &[f64]) -> usize {
    let top = s.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > 1e-8 * top).count()
}

/// Top-`r` principal directions of the mean-centered buffer.
pub fn pca_init(concept_id: usize, buffer: &[Vector], r: usize, n_min: usize) -> Result<SubspaceBasis> {
    if r == 0 {
        return Err(DscaError::config("subspace rank must be at least 1"));
    }
    let needed = r.max(n_min);
    if buffer.len() < needed {
        return Err(DscaError::InsufficientSamples {
            needed,
            found: buffer.len(),
        });
    }
    let d = buffer[0].len();
    for s in buffer {
        check_dim("pca_init sample", d, s.len())?;
    }
    if r > d {
        return Err(DscaError::DegenerateCovariance {
            requested: r,
            achievable: d,
        });
    }
    let mean = column_mean(buffer, d);
    let mut x = stack_rows(buffer, d);
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let (s, vt) = sorted_right_singular(x);
    let achievable = achievable_rank(&s);
    if achievable < r {
        return Err(DscaError::DegenerateCovariance {
            requested: r,
            achievable,
        });
    }
    let mut rows = vt.rows(0, r).into_owned();
    apply_sign_convention(&mut rows);
    Ok(SubspaceBasis {
        concept_id,
        components: rows.clone(),
        rows,
        mean,
        singular_values: s[..r].to_vec(),
        n_seen: buffer.len(),
        version: 0,
    })
}

/// Removes any leakage of the rows into the earlier subspaces and restores
/// orthonormality.
fn clean_rows(rows: &Matrix, earlier: &[&SubspaceBasis]) -> Result<Matrix> {
    if earlier.is_empty() {
        return Ok(rows.clone());
    }
    let mut cleaned = rows.clone();
    for i in 0..rows.nrows() {
        let row: Vector = rows.row(i).transpose();
        let once = residualize(&row, earlier);
        let twice = residualize(&once, earlier);
        cleaned.set_row(i, &twice.transpose());
    }
    let mut q = orthonormalize_rows(&cleaned).ok_or(DscaError::DegenerateCovariance {
        requested: rows.nrows(),
        achievable: rank_estimate(&cleaned),
    })?;
    apply_sign_convention(&mut q);
    Ok(q)
}

/// PCA of the buffer after removing its projection onto the earlier
/// subspaces; the resulting rows are orthogonal to them.
pub fn residualized_pca_init(
    concept_id: usize,
    buffer: &[Vector],
    r: usize,
    n_min: usize,
    earlier: &[&SubspaceBasis],
) -> Result<SubspaceBasis> {
    let residuals: Vec<Vector> = buffer.iter().map(|h| residualize(h, earlier)).collect();
    let mut basis = pca_init(concept_id, &residuals, r, n_min)?;
    basis.rows = clean_rows(&basis.rows, earlier)?;
    basis.components = basis.rows.clone();
    Ok(basis)
}

/// One incremental PCA update with the new samples residualized against
/// `earlier`. An empty batch is a no-op.
pub fn ipca_refine(basis: &SubspaceBasis, new_samples: &[Vector], earlier: &[&SubspaceBasis]) -> Result<SubspaceBasis> {
    if new_samples.is_empty() {
        return Ok(basis.clone());
    }
    let d = basis.dim();
    let r = basis.rank();
    for s in new_samples {
        check_dim("ipca_refine sample", d, s.len())?;
    }
    let residuals: Vec<Vector> = new_samples.iter().map(|h| residualize(h, earlier)).collect();
    let m = residuals.len();
    let n_old = basis.n_seen;
    let n_total = n_old + m;
    let batch_mean = column_mean(&residuals, d);
    let new_mean = (&basis.mean * n_old as f64 + &batch_mean * m as f64) / n_total as f64;

    let with_correction = n_old > 0;
    let total_rows = r + m + usize::from(with_correction);
    let mut stacked = Matrix::zeros(total_rows, d);
    for i in 0..r {
        let row = basis.components.row(i) * basis.singular_values[i];
        stacked.set_row(i, &row);
    }
    for (k, x) in residuals.iter().enumerate() {
        stacked.set_row(r + k, &(x - &batch_mean).transpose());
    }
    if with_correction {
        let scale = ((n_old * m) as f64 / n_total as f64).sqrt();
        stacked.set_row(r + m, &((&basis.mean - &batch_mean) * scale).transpose());
    }

    let (s, vt) = sorted_right_singular(stacked);
    if achievable_rank(&s) < r {
        return Err(DscaError::DegenerateCovariance {
            requested: r,
            achievable: achievable_rank(&s),
        });
    }
    let mut rows = vt.rows(0, r).into_owned();
    apply_sign_convention(&mut rows);
    let components = clean_rows(&rows, earlier)?;
    let rows = align_frame(&components, &basis.rows);
    Ok(SubspaceBasis {
        concept_id: basis.concept_id,
        rows,
        components,
        mean: new_mean,
        singular_values: s[..r].to_vec(),
        n_seen: n_total,
        version: basis.version + 1,
    })
}

/// The orthonormal frame `Q C` of `C`'s row space closest in Frobenius norm
/// to `previous` (orthogonal Procrustes: `C Pᵀ = U Σ Vᵀ`, `Q = V Uᵀ`).
fn align_frame(components: &Matrix, previous: &Matrix) -> Matrix {
    let m = components * previous.transpose();
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let q = v_t.transpose() * u.transpose();
    q * components
}

/// `‖R_a R_bᵀ‖_F²`.
pub fn overlap(a: &SubspaceBasis, b: &SubspaceBasis) -> Result<f64> {
    check_dim("overlap", a.dim(), b.dim())?;
    Ok((&a.rows * b.rows.transpose()).norm_squared())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub concept_ids: Vec<usize>,
    #[serde(with = "serde_mat")]
    pub pairwise: Matrix,
    pub mean_overlap: f64,
    pub max_overlap: f64,
}

pub fn mean_overlap(all: &[&SubspaceBasis]) -> Result<OverlapReport> {
    let k = all.len();
    if k < 2 {
        return Err(DscaError::Undefined(format!("mean overlap needs K >= 2, have K = {k}")));
    }
    let mut pairwise = Matrix::zeros(k, k);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for i in 0..k {
        pairwise[(i, i)] = overlap(all[i], all[i])?;
        for j in i + 1..k {
            let o = overlap(all[i], all[j])?;
            pairwise[(i, j)] = o;
            pairwise[(j, i)] = o;
            sum += 2.0 * o;
            max = max.max(o);
        }
    }
    Ok(OverlapReport {
        concept_ids: all.iter().map(|b| b.concept_id).collect(),
        pairwise,
        mean_overlap: sum / (k * (k - 1)) as f64,
        max_overlap: max,
    })
}
