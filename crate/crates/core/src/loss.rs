//! Training objective: task cross-entropy and alignment on edit samples,
//! contrastive distillation and routing sparsity on replay samples, with
//! analytic gradients for every module's trainable tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsam::{accumulate_backward, forward, DsamForward, DsamGrads, DsamParams};
use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, log_sum_exp, softmax, Vector};
use crate::router::RoutingDecision;
use crate::subspace::SubspaceBasis;
use crate::world::TaskHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignForm {
    /// `1 − cos(h'_f, h_t)`.
    #[default]
    Fused,
    /// `1 − cos(h_v + Δh_f, h_t)`.
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparseForm {
    /// Mean of `Σ_k |w_k|`.
    #[default]
    Weights,
    /// Mean of `Σ_k |z_k|`.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_distill: f64,
    pub lambda_sparse: f64,
    pub tau_distill: f64,
    pub align_form: AlignForm,
    pub sparse_form: SparseForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 0.5,
            lambda_distill: 1.0,
            lambda_sparse: 1e-2,
            tau_distill: 0.07,
            align_form: AlignForm::Fused,
            sparse_form: SparseForm::Weights,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_distill", self.lambda_distill),
            ("lambda_sparse", self.lambda_sparse),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DscaError::config(format!("{name} must be a nonnegative number")));
            }
        }
        if !(self.tau_distill > 0.0 && self.tau_distill.is_finite()) {
            return Err(DscaError::config("tau_distill must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub task: f64,
    pub align: f64,
    pub cdistill: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(task: f64, align: f64, cdistill: f64, sparse: f64, w: &LossWeights) -> Self {
        Self {
            task,
            align,
            cdistill,
            sparse,
            total: task + w.lambda_align * align + w.lambda_distill * cdistill + w.lambda_sparse * sparse,
        }
    }
}

fn check_class(class: usize, head: &TaskHead) -> Result<()> {
    if class >= head.num_classes() {
        return Err(DscaError::InvalidClass {
            class,
            num_classes: head.num_classes(),
        });
    }
    Ok(())
}

pub fn loss_task(edited: &Vector, target_class: usize, head: &TaskHead) -> Result<f64> {
    check_class(target_class, head)?;
    let logits = head.logits(edited)?;
    let z = logits.as_slice();
    Ok(log_sum_exp(z) - z[target_class])
}

/// `Hᵀ(softmax(H h) − e_y)`.
pub fn grad_task(edited: &Vector, target_class: usize, head: &TaskHead) -> Result<Vector> {
    check_class(target_class, head)?;
    let logits = head.logits(edited)?;
    let mut p = Vector::from_vec(softmax(logits.as_slice()));
    p[target_class] -= 1.0;
    Ok(head.weights().tr_mul(&p))
}

fn norms(a: &Vector, b: &Vector, what: &str) -> Result<(f64, f64)> {
    check_dim("cosine", a.len(), b.len())?;
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(DscaError::ZeroNorm(what.to_string()));
    }
    Ok((na, nb))
}

pub fn loss_align(edited: &Vector, text: &Vector) -> Result<f64> {
    let (ne, nt) = norms(edited, text, "alignment pair")?;
    Ok(1.0 - edited.dot(text) / (ne * nt))
}

/// `∂cos(x, t)/∂x = t/(|x||t|) − cos·x/|x|²`.
fn grad_cosine(x: &Vector, t: &Vector) -> Result<Vector> {
    let (nx, nt) = norms(x, t, "cosine pair")?;
    let cos = x.dot(t) / (nx * nt);
    Ok(t / (nx * nt) - x * (cos / (nx * nx)))
}

pub fn grad_align(edited: &Vector, text: &Vector) -> Result<Vector> {
    Ok(-grad_cosine(edited, text)?)
}

fn similarity_matrix(edited: &[Vector], teacher: &[Vector], tau: f64) -> Result<Vec<Vec<f64>>> {
    if edited.len() != teacher.len() {
        return Err(DscaError::DimensionMismatch {
            context: "cdistill batch",
            expected: teacher.len(),
            found: edited.len(),
        });
    }
    if edited.len() < 2 {
        return Err(DscaError::BatchTooSmall {
            context: "contrastive distillation",
            needed: 2,
            found: edited.len(),
        });
    }
    if !(tau > 0.0) {
        return Err(DscaError::config("tau_distill must be positive"));
    }
    let mut s = Vec::with_capacity(edited.len());
    for e in edited {
        let mut row = Vec::with_capacity(teacher.len());
        for t in teacher {
            let (ne, nt) = norms(e, t, "distillation pair")?;
            row.push(e.dot(t) / (ne * nt) / tau);
        }
        s.push(row);
    }
    Ok(s)
}

/// InfoNCE with cosine similarity: each edited vector's own teacher is the
/// positive, all teachers in the batch are candidates.
pub fn loss_cdistill(edited: &[Vector], teacher: &[Vector], tau: f64) -> Result<f64> {
    let s = similarity_matrix(edited, teacher, tau)?;
    let b = s.len() as f64;
    Ok(s.iter().enumerate().map(|(i, row)| log_sum_exp(row) - row[i]).sum::<f64>() / b)
}

pub fn grad_cdistill(edited: &[Vector], teacher: &[Vector], tau: f64) -> Result<Vec<Vector>> {
    let s = similarity_matrix(edited, teacher, tau)?;
    let b = s.len() as f64;
    let mut out = Vec::with_capacity(edited.len());
    for (i, row) in s.iter().enumerate() {
        let p = softmax(row);
        let mut g = Vector::zeros(edited[i].len());
        for (j, t) in teacher.iter().enumerate() {
            let coeff = (p[j] - if i == j { 1.0 } else { 0.0 }) / (tau * b);
            if coeff != 0.0 {
                g.axpy(coeff, &grad_cosine(&edited[i], t)?, 1.0);
            }
        }
        out.push(g);
    }
    Ok(out)
}

pub fn loss_sparse(decisions: &[RoutingDecision], form: SparseForm) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    let sum: f64 = decisions
        .iter()
        .map(|d| match form {
            SparseForm::Weights => d.weights.iter().map(|w| w.abs()).sum::<f64>(),
            SparseForm::Logits => d.logits.iter().map(|z| z.abs()).sum::<f64>(),
        })
        .sum();
    sum / decisions.len() as f64
}

/// An edit-batch element with its (fixed) routing decision.
#[derive(Debug, Clone)]
pub struct EditInput {
    pub fused: Vector,
    pub visual: Vector,
    pub text: Vector,
    pub target_class: usize,
    pub decision: RoutingDecision,
}

/// A replay-batch element with its teacher vector and routing decision.
#[derive(Debug, Clone)]
pub struct ReplayInput {
    pub fused: Vector,
    pub teacher: Vector,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, Default)]
pub struct BatchInputs {
    pub edit: Vec<EditInput>,
    pub replay: Vec<ReplayInput>,
}

struct Edited {
    output: Vector,
    cache: Vec<(usize, f64, DsamForward)>,
}

fn edit_forward(
    h: &Vector,
    decision: &RoutingDecision,
    dsams: &BTreeMap<usize, DsamParams>,
    bases: &BTreeMap<usize, SubspaceBasis>,
) -> Result<Edited> {
    let mut output = h.clone();
    let mut cache = Vec::new();
    for (id, w) in decision.active() {
        let (Some(p), Some(b)) = (dsams.get(&id), bases.get(&id)) else {
            continue;
        };
        let fwd = forward(p, b, h)?;
        output.axpy(w, &fwd.psi, 1.0);
        cache.push((id, w, fwd));
    }
    Ok(Edited { output, cache })
}

fn backprop(
    h: &Vector,
    edited: &Edited,
    upstream: &Vector,
    dsams: &BTreeMap<usize, DsamParams>,
    bases: &BTreeMap<usize, SubspaceBasis>,
    grads: &mut BTreeMap<usize, DsamGrads>,
) {
    for (id, w, fwd) in &edited.cache {
        let p = &dsams[id];
        let g = grads.entry(*id).or_insert_with(|| DsamGrads::zeros_like(p));
        accumulate_backward(p, &bases[id], h, fwd, *w, upstream, g);
    }
}

/// Full objective over one step's batches. With `with_grads`, also returns
/// the gradient of `total` for every module that received any signal.
pub fn objective(
    batch: &BatchInputs,
    dsams: &BTreeMap<usize, DsamParams>,
    bases: &BTreeMap<usize, SubspaceBasis>,
    head: &TaskHead,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<(LossBreakdown, BTreeMap<usize, DsamGrads>)> {
    let mut grads = BTreeMap::new();

    let (mut task, mut align) = (0.0, 0.0);
    if !batch.edit.is_empty() {
        let n = batch.edit.len() as f64;
        for e in &batch.edit {
            let ed = edit_forward(&e.fused, &e.decision, dsams, bases)?;
            let align_input = match weights.align_form {
                AlignForm::Fused => ed.output.clone(),
                AlignForm::Visual => &e.visual + (&ed.output - &e.fused),
            };
            task += loss_task(&ed.output, e.target_class, head)?;
            align += loss_align(&align_input, &e.text)?;
            if with_grads && !ed.cache.is_empty() {
                let mut up = grad_task(&ed.output, e.target_class, head)?;
                if weights.lambda_align != 0.0 {
                    up.axpy(weights.lambda_align, &grad_align(&align_input, &e.text)?, 1.0);
                }
                up /= n;
                backprop(&e.fused, &ed, &up, dsams, bases, &mut grads);
            }
        }
        task /= n;
        align /= n;
    }

    let mut cdistill = 0.0;
    let mut sparse = 0.0;
    if !batch.replay.is_empty() {
        let mut outs = Vec::with_capacity(batch.replay.len());
        let mut eds = Vec::with_capacity(batch.replay.len());
        for r in &batch.replay {
            let ed = edit_forward(&r.fused, &r.decision, dsams, bases)?;
            outs.push(ed.output.clone());
            eds.push(ed);
        }
        let teachers: Vec<Vector> = batch.replay.iter().map(|r| r.teacher.clone()).collect();
        cdistill = loss_cdistill(&outs, &teachers, weights.tau_distill)?;
        let decisions: Vec<RoutingDecision> = batch.replay.iter().map(|r| r.decision.clone()).collect();
        sparse = loss_sparse(&decisions, weights.sparse_form);
        if with_grads && weights.lambda_distill != 0.0 && eds.iter().any(|e| !e.cache.is_empty()) {
            let g = grad_cdistill(&outs, &teachers, weights.tau_distill)?;
            for ((r, ed), gi) in batch.replay.iter().zip(&eds).zip(g) {
                backprop(&r.fused, ed, &(gi * weights.lambda_distill), dsams, bases, &mut grads);
            }
        }
    }

    Ok((LossBreakdown::combine(task, align, cdistill, sparse, weights), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn uniform_logits_give_log_classes() {
        let head = TaskHead::new(Matrix::zeros(5, 3));
        let l = loss_task(&Vector::from_vec(vec![1.0, 2.0, 3.0]), 2, &head).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        assert!(matches!(
            loss_task(&Vector::zeros(3), 5, &head),
            Err(DscaError::InvalidClass { class: 5, num_classes: 5 })
        ));
    }

    #[test]
    fn alignment_extremes() {
        let t = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        assert!(loss_align(&t, &t).unwrap().abs() < 1e-15);
        assert!((loss_align(&(-&t), &t).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(loss_align(&Vector::zeros(3), &t), Err(DscaError::ZeroNorm(_))));
    }

    #[test]
    fn identical_pairs_give_log_two() {
        let x = Vector::from_vec(vec![0.3, 0.4]);
        let v = vec![x.clone(), x.clone()];
        let l = loss_cdistill(&v, &v, 0.07).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss_cdistill(&v[..1], &v[..1], 0.07),
            Err(DscaError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn sparse_of_empty_and_simplex_decisions() {
        let empty = vec![RoutingDecision::empty(3); 4];
        assert_eq!(loss_sparse(&empty, SparseForm::Weights), 0.0);
        let single = vec![RoutingDecision::single(3, 1); 4];
        assert_eq!(loss_sparse(&single, SparseForm::Weights), 1.0);
        assert_eq!(loss_sparse(&[], SparseForm::Weights), 0.0);
    }
}
