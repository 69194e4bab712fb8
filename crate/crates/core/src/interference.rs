//! Randomized checks of cross-concept interference between module updates:
//! exact non-interference for orthogonal subspaces and the `Γ_max·√ε` bound
//! for subspaces with measured overlap `ε`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsam::{raw_update, DsamParams};
use crate::error::{DscaError, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, orthonormalize_rows, random_orthonormal_rows, softmax, Matrix};
use crate::subspace::SubspaceBasis;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialShape {
    pub modules: usize,
    pub dim: usize,
    pub rank: usize,
    pub trials: usize,
}

impl Default for TrialShape {
    fn default() -> Self {
        Self {
            modules: 8,
            dim: 64,
            rank: 8,
            trials: 1000,
        }
    }
}

impl TrialShape {
    fn validate(&self) -> Result<()> {
        if self.modules < 2 || self.rank == 0 {
            return Err(DscaError::config("interference trials need at least 2 modules of rank ≥ 1"));
        }
        if self.modules * self.rank > self.dim {
            return Err(DscaError::config("modules × rank exceeds the dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    /// Largest `‖P_i Δh_j‖ / (‖Δh_j‖ + 1e-30)` seen.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub target_overlap: f64,
    /// Max pairwise `‖R_i R_jᵀ‖_F²` of the perturbed bases.
    pub measured_overlap: f64,
    pub trials: usize,
    pub checks: usize,
    pub violations: usize,
    /// Largest interference / (Γ_max·√ε) seen.
    pub worst_ratio: f64,
}

fn random_params<R: Rng + ?Sized>(rng: &mut R, id: usize, rank: usize, dim: usize) -> DsamParams {
    DsamParams {
        concept_id: id,
        w: gaussian_matrix(rng, rank, dim, 1.0 / (dim as f64).sqrt()),
        b: gaussian_vector(rng, rank, 1.0),
        gate_u: Matrix::zeros(dim, 1),
        gate_v: Matrix::zeros(1, dim),
        gate_b: gaussian_vector(rng, dim, 0.0),
        basis_residual: true,
    }
}

fn bases_from(rows: &[Matrix]) -> Result<Vec<SubspaceBasis>> {
    rows.iter().enumerate().map(|(k, r)| SubspaceBasis::from_rows(k, r)).collect()
}

fn max_overlap(rows: &[Matrix]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i != j {
                worst = worst.max((&rows[i] * rows[j].transpose()).norm_squared());
            }
        }
    }
    worst
}

/// Exactly orthogonal bases: every un-gated update of module `j` must vanish
/// in the projection onto every other subspace. Fresh parameters and input
/// per trial.
pub fn lemma_trials<R: Rng + ?Sized>(shape: TrialShape, tolerance: f64, rng: &mut R) -> Result<LemmaReport> {
    shape.validate()?;
    let all = random_orthonormal_rows(rng, shape.modules * shape.rank, shape.dim);
    let rows: Vec<Matrix> = (0..shape.modules)
        .map(|k| all.rows(k * shape.rank, shape.rank).into_owned())
        .collect();
    let bases = bases_from(&rows)?;
    let mut report = LemmaReport {
        trials: shape.trials,
        checks: 0,
        violations: 0,
        worst_ratio: 0.0,
    };
    for _ in 0..shape.trials {
        let h = gaussian_vector(rng, shape.dim, 1.0);
        for (j, bj) in bases.iter().enumerate() {
            let p = random_params(rng, j, shape.rank, shape.dim);
            let delta = raw_update(&p, bj, &h)?;
            let scale = delta.norm() + 1e-30;
            for (i, bi) in bases.iter().enumerate() {
                if i == j {
                    continue;
                }
                let leak = bi.project(&delta)?.norm();
                report.checks += 1;
                report.worst_ratio = report.worst_ratio.max(leak / scale);
                if leak > tolerance * scale {
                    report.violations += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Orthonormal bases, each perturbed by `delta`-scaled Gaussian noise and
/// re-orthonormalized.
fn perturbed(base: &[Matrix], noise: &[Matrix], delta: f64) -> Option<Vec<Matrix>> {
    base.iter()
        .zip(noise)
        .map(|(b, n)| orthonormalize_rows(&(b + n * delta)))
        .collect()
}

/// Finds a perturbation size whose max overlap is within 1% of `target`
/// (bisection on a log scale).
fn calibrate(base: &[Matrix], noise: &[Matrix], target: f64) -> Result<Vec<Matrix>> {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let eps_at = |d: f64| perturbed(base, noise, d).map(|r| (max_overlap(&r), r));
    while eps_at(hi).is_some_and(|(e, _)| e < target) {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(DscaError::config(format!("overlap {target} is not reachable by perturbation")));
        }
    }
    let mut best = None;
    for _ in 0..200 {
        let mid = if lo == 0.0 { hi / 2.0 } else { (lo * hi).sqrt() };
        let Some((e, r)) = eps_at(mid) else {
            hi = mid;
            continue;
        };
        if (e - target).abs() <= 0.01 * target {
            best = Some(r);
            break;
        }
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
        best = Some(r);
    }
    best.ok_or_else(|| DscaError::config("overlap calibration failed"))
}

/// For each target overlap, perturbs orthogonal bases to that measured max
/// overlap and checks `‖P_i(h'−h) − w_i P_i Ψ_i(h)‖ ≤ Γ_max·√ε` for every
/// module `i`, with `Γ_max = Σ_k |w_k|·‖Δ_k(h)‖` measured per trial and
/// un-gated updates.
pub fn corollary_trials<R: Rng + ?Sized>(
    shape: TrialShape,
    targets: &[f64],
    rng: &mut R,
) -> Result<Vec<CorollaryReport>> {
    shape.validate()?;
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        if !(target > 0.0 && target < shape.rank as f64) {
            return Err(DscaError::config(format!("target overlap {target} must lie in (0, r)")));
        }
        let all = random_orthonormal_rows(rng, shape.modules * shape.rank, shape.dim);
        let base: Vec<Matrix> = (0..shape.modules)
            .map(|k| all.rows(k * shape.rank, shape.rank).into_owned())
            .collect();
        let noise: Vec<Matrix> = (0..shape.modules)
            .map(|_| gaussian_matrix(rng, shape.rank, shape.dim, 1.0))
            .collect();
        let rows = calibrate(&base, &noise, target)?;
        let eps = max_overlap(&rows);
        let bases = bases_from(&rows)?;
        let mut report = CorollaryReport {
            target_overlap: target,
            measured_overlap: eps,
            trials: shape.trials,
            checks: 0,
            violations: 0,
            worst_ratio: 0.0,
        };
        for _ in 0..shape.trials {
            let h = gaussian_vector(rng, shape.dim, 1.0);
            let logits: Vec<f64> = (0..shape.modules).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w = softmax(&logits);
            let mut updates = Vec::with_capacity(shape.modules);
            let mut gamma_max = 0.0;
            for (k, b) in bases.iter().enumerate() {
                let p = random_params(rng, k, shape.rank, shape.dim);
                let psi = raw_update(&p, b, &h)?;
                // Ψ_k = R_kᵀ Δ_k with orthonormal rows, so ‖Δ_k‖ = ‖Ψ_k‖.
                gamma_max += w[k].abs() * psi.norm();
                updates.push(psi);
            }
            let mut total = h.clone() * 0.0;
            for (k, u) in updates.iter().enumerate() {
                total.axpy(w[k], u, 1.0);
            }
            let bound = gamma_max * eps.sqrt();
            for (i, b) in bases.iter().enumerate() {
                let own = b.project(&updates[i])? * w[i];
                let interference = (b.project(&total)? - own).norm();
                report.checks += 1;
                if bound > 0.0 {
                    report.worst_ratio = report.worst_ratio.max(interference / bound);
                }
                if interference > bound * (1.0 + 1e-9) + 1e-12 {
                    report.violations += 1;
                }
            }
        }
        out.push(report);
    }
    Ok(out)
}
