//! Per-concept alignment module: a learnable map inside the concept subspace
//! plus a low-rank sigmoid gate over the full space.
//!
//! Forward for input `h` with basis `R` (r × d):
//!
//! ```text
//! c = W h + b − R h          (r)     [or W h + b without the basis residual]
//! u = Rᵀ c                   (d)     raw update
//! γ = σ(U (V h) + g_b)       (d)     gate
//! Ψ = γ ⊙ u
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, ensure_finite, gaussian_matrix, serde_mat, serde_vec, sigmoid, Matrix, Vector};
use crate::subspace::SubspaceBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsamParams {
    pub concept_id: usize,
    #[serde(with = "serde_mat")]
    pub w: Matrix,
    #[serde(with = "serde_vec")]
    pub b: Vector,
    #[serde(with = "serde_mat")]
    pub gate_u: Matrix,
    #[serde(with = "serde_mat")]
    pub gate_v: Matrix,
    #[serde(with = "serde_vec")]
    pub gate_b: Vector,
    /// Subtract `R h` inside the subspace (the default form).
    pub basis_residual: bool,
}

/// Names of the trainable tensors, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tensor {
    W,
    B,
    GateU,
    GateV,
    GateB,
}

impl Tensor {
    pub const ALL: [Tensor; 5] = [Tensor::W, Tensor::B, Tensor::GateU, Tensor::GateV, Tensor::GateB];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::W => "W",
            Tensor::B => "b",
            Tensor::GateU => "gate_U",
            Tensor::GateV => "gate_V",
            Tensor::GateB => "gate_b",
        }
    }
}

impl DsamParams {
    /// Fresh parameters whose intervention is exactly zero: `W = R` (or `0`
    /// without the basis residual), `b = 0`, `g_b = 0`, small random gate
    /// factors.
    pub fn new_noop<R: Rng + ?Sized>(
        concept_id: usize,
        basis: &SubspaceBasis,
        bottleneck: usize,
        basis_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = basis.dim();
        let r = basis.rank();
        if bottleneck == 0 || bottleneck * 4 > d {
            return Err(DscaError::config(format!(
                "gate bottleneck must satisfy 1 <= b <= d_f/4 (b = {bottleneck}, d_f = {d})"
            )));
        }
        let std = 0.01 / (d as f64).sqrt();
        let w = if basis_residual {
            basis.rows().clone()
        } else {
            Matrix::zeros(r, d)
        };
        Ok(Self {
            concept_id,
            w,
            b: Vector::zeros(r),
            gate_u: gaussian_matrix(rng, d, bottleneck, std),
            gate_v: gaussian_matrix(rng, bottleneck, d, std),
            gate_b: Vector::zeros(d),
            basis_residual,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn rank(&self) -> usize {
        self.w.nrows()
    }

    pub fn bottleneck(&self) -> usize {
        self.gate_v.nrows()
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        match t {
            Tensor::W => self.w.as_slice(),
            Tensor::B => self.b.as_slice(),
            Tensor::GateU => self.gate_u.as_slice(),
            Tensor::GateV => self.gate_v.as_slice(),
            Tensor::GateB => self.gate_b.as_slice(),
        }
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        match t {
            Tensor::W => self.w.as_mut_slice(),
            Tensor::B => self.b.as_mut_slice(),
            Tensor::GateU => self.gate_u.as_mut_slice(),
            Tensor::GateV => self.gate_v.as_mut_slice(),
            Tensor::GateB => self.gate_b.as_mut_slice(),
        }
    }

    pub fn is_finite(&self) -> bool {
        Tensor::ALL
            .iter()
            .all(|&t| self.tensor(t).iter().all(|x| x.is_finite()))
    }

    fn check_compatible(&self, basis: &SubspaceBasis, h: &Vector) -> Result<()> {
        check_dim("dsam input", self.dim(), h.len())?;
        check_dim("dsam basis dim", self.dim(), basis.dim())?;
        check_dim("dsam basis rank", self.rank(), basis.rank())?;
        if basis.concept_id != self.concept_id {
            return Err(DscaError::UnknownConcept(basis.concept_id));
        }
        Ok(())
    }
}

pub fn gate(params: &DsamParams, h: &Vector) -> Result<Vector> {
    check_dim("gate input", params.dim(), h.len())?;
    ensure_finite(h, "gate input")?;
    let a = &params.gate_v * h;
    let pre = &params.gate_u * a + &params.gate_b;
    Ok(pre.map(sigmoid))
}

/// Subspace coordinates of the un-gated update: `W h + b − R h`.
fn residual_coords(params: &DsamParams, basis: &SubspaceBasis, h: &Vector) -> Vector {
    let mut c = &params.w * h + &params.b;
    if params.basis_residual {
        c -= basis.rows() * h;
    }
    c
}

/// `Rᵀ((W h + b) − R h)`.
pub fn raw_update(params: &DsamParams, basis: &SubspaceBasis, h: &Vector) -> Result<Vector> {
    params.check_compatible(basis, h)?;
    Ok(basis.rows().tr_mul(&residual_coords(params, basis, h)))
}

/// Gated intervention `γ(h) ⊙ raw_update(h)`.
pub fn intervene(params: &DsamParams, basis: &SubspaceBasis, h: &Vector) -> Result<Vector> {
    Ok(forward(params, basis, h)?.psi)
}

/// `R · Ψ(h)`.
pub fn effective_subspace_coords(params: &DsamParams, basis: &SubspaceBasis, h: &Vector) -> Result<Vector> {
    let psi = intervene(params, basis, h)?;
    Ok(basis.rows() * psi)
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DsamForward {
    pub bottleneck_act: Vector,
    pub gamma: Vector,
    pub raw: Vector,
    pub psi: Vector,
}

pub fn forward(params: &DsamParams, basis: &SubspaceBasis, h: &Vector) -> Result<DsamForward> {
    params.check_compatible(basis, h)?;
    ensure_finite(h, "dsam input")?;
    let a = &params.gate_v * h;
    let gamma = (&params.gate_u * &a + &params.gate_b).map(sigmoid);
    let raw = basis.rows().tr_mul(&residual_coords(params, basis, h));
    let psi = gamma.component_mul(&raw);
    Ok(DsamForward {
        bottleneck_act: a,
        gamma,
        raw,
        psi,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsamGrads {
    pub w: Matrix,
    pub b: Vector,
    pub gate_u: Matrix,
    pub gate_v: Matrix,
    pub gate_b: Vector,
}

impl DsamGrads {
    pub fn zeros_like(p: &DsamParams) -> Self {
        Self {
            w: Matrix::zeros(p.w.nrows(), p.w.ncols()),
            b: Vector::zeros(p.b.len()),
            gate_u: Matrix::zeros(p.gate_u.nrows(), p.gate_u.ncols()),
            gate_v: Matrix::zeros(p.gate_v.nrows(), p.gate_v.ncols()),
            gate_b: Vector::zeros(p.gate_b.len()),
        }
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        match t {
            Tensor::W => self.w.as_slice(),
            Tensor::B => self.b.as_slice(),
            Tensor::GateU => self.gate_u.as_slice(),
            Tensor::GateV => self.gate_v.as_slice(),
            Tensor::GateB => self.gate_b.as_slice(),
        }
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        match t {
            Tensor::W => self.w.as_mut_slice(),
            Tensor::B => self.b.as_mut_slice(),
            Tensor::GateU => self.gate_u.as_mut_slice(),
            Tensor::GateV => self.gate_v.as_mut_slice(),
            Tensor::GateB => self.gate_b.as_mut_slice(),
        }
    }

    pub fn norm(&self) -> f64 {
        Tensor::ALL
            .iter()
            .map(|&t| self.tensor(t).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in Tensor::ALL {
            for x in self.tensor_mut(t) {
                *x *= s;
            }
        }
    }
}

/// Accumulates `∂L/∂θ` for one input given `upstream = ∂L/∂h'` and the
/// routing weight of this module (constant w.r.t. the parameters).
pub fn accumulate_backward(
    params: &DsamParams,
    basis: &SubspaceBasis,
    h: &Vector,
    fwd: &DsamForward,
    weight: f64,
    upstream: &Vector,
    grads: &mut DsamGrads,
) {
    let g = upstream * weight;
    let d_raw = g.component_mul(&fwd.gamma);
    let d_gamma = g.component_mul(&fwd.raw);
    let d_pre = d_gamma.zip_map(&fwd.gamma, |dg, s| dg * s * (1.0 - s));

    grads.gate_b += &d_pre;
    grads.gate_u.ger(1.0, &d_pre, &fwd.bottleneck_act, 1.0);
    let d_a = params.gate_u.tr_mul(&d_pre);
    grads.gate_v.ger(1.0, &d_a, h, 1.0);

    let d_c = basis.rows() * d_raw;
    grads.b += &d_c;
    grads.w.ger(1.0, &d_c, h, 1.0);
}

/// SGD with optional heavy-ball momentum: `v ← μ v + g`, `θ ← θ − lr v`.
///
/// Every gradient entry is checked before anything is written, so a
/// non-finite gradient leaves both parameters and velocity untouched.
pub fn sgd_step(
    params: &mut DsamParams,
    grads: &DsamGrads,
    lr: f64,
    momentum: f64,
    velocity: Option<&mut DsamGrads>,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DscaError::config("learning rate must be positive"));
    }
    for t in Tensor::ALL {
        if let Some(index) = grads.tensor(t).iter().position(|x| !x.is_finite()) {
            return Err(DscaError::NonFiniteGradient {
                concept: params.concept_id,
                tensor: t.name(),
                index,
            });
        }
    }
    match velocity {
        Some(vel) if momentum > 0.0 => {
            for t in Tensor::ALL {
                let v = vel.tensor_mut(t);
                for (vi, gi) in v.iter_mut().zip(grads.tensor(t)) {
                    *vi = momentum * *vi + gi;
                }
                let v = vel.tensor(t).to_vec();
                for (p, vi) in params.tensor_mut(t).iter_mut().zip(&v) {
                    *p -= lr * vi;
                }
            }
        }
        _ => {
            for t in Tensor::ALL {
                for (p, gi) in params.tensor_mut(t).iter_mut().zip(grads.tensor(t)) {
                    *p -= lr * gi;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_vector, random_orthonormal_rows};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (DsamParams, SubspaceBasis, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = SubspaceBasis::from_rows(3, &random_orthonormal_rows(&mut rng, 4, 16)).unwrap();
        let p = DsamParams::new_noop(3, &basis, 4, true, &mut rng).unwrap();
        (p, basis, rng)
    }

    #[test]
    fn fresh_module_is_a_no_op() {
        let (p, basis, mut rng) = setup(1);
        for _ in 0..20 {
            let h = gaussian_vector(&mut rng, 16, 3.0);
            assert!(raw_update(&p, &basis, &h).unwrap().iter().all(|&x| x == 0.0 || x.abs() < 1e-15));
        }
    }

    #[test]
    fn uniform_gate_halves_raw_update() {
        let (mut p, basis, mut rng) = setup(2);
        p.gate_u.fill(0.0);
        p.b = gaussian_vector(&mut rng, 4, 1.0);
        let h = gaussian_vector(&mut rng, 16, 1.0);
        let g = gate(&p, &h).unwrap();
        assert!(g.iter().all(|&x| x == 0.5));
        let raw = raw_update(&p, &basis, &h).unwrap();
        assert_eq!(intervene(&p, &basis, &h).unwrap(), raw * 0.5);
    }

    #[test]
    fn oversized_bottleneck_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let basis = SubspaceBasis::from_rows(0, &random_orthonormal_rows(&mut rng, 2, 8)).unwrap();
        assert!(DsamParams::new_noop(0, &basis, 3, true, &mut rng).is_err());
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_without_mutation() {
        let (mut p, _, _) = setup(4);
        let before = p.clone();
        let mut g = DsamGrads::zeros_like(&p);
        g.gate_v[(1, 2)] = f64::NAN;
        let err = sgd_step(&mut p, &g, 0.1, 0.0, None).unwrap_err();
        assert!(matches!(err, DscaError::NonFiniteGradient { concept: 3, tensor: "gate_V", .. }));
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_unit_step_on_params_zeroes_them() {
        let (mut p, _, _) = setup(5);
        let mut g = DsamGrads::zeros_like(&p);
        for t in Tensor::ALL {
            g.tensor_mut(t).copy_from_slice(p.tensor(t));
        }
        sgd_step(&mut p, &g, 1.0, 0.0, None).unwrap();
        for t in Tensor::ALL {
            assert!(p.tensor(t).iter().all(|&x| x == 0.0));
        }
    }
}
