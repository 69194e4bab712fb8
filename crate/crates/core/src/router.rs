//! Two-stage routing: a cosine filter on visual prototypes, then a
//! temperature softmax over fused-prototype similarities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsam::{intervene, DsamParams};
use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, cosine, softmax, Vector};
use crate::partition::ConceptSet;
use crate::subspace::SubspaceBasis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub tau_visual: f64,
    pub tau: f64,
    /// Skip the visual filter and treat every concept as a candidate.
    pub single_stage: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau_visual: 0.3,
            tau: 0.07,
            single_stage: false,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DscaError::config("routing temperature tau must be positive"));
        }
        if !(self.tau_visual > -1.0 && self.tau_visual < 1.0) {
            return Err(DscaError::config("tau_visual must lie in (-1, 1)"));
        }
        Ok(())
    }
}

/// Candidate set with per-candidate scores, logits and weights, aligned by
/// position with `candidates`. Concepts outside the set have logit and
/// weight exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub num_concepts: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn empty(num_concepts: usize) -> Self {
        Self {
            num_concepts,
            candidates: Vec::new(),
            scores: Vec::new(),
            logits: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Everything routed to one module with weight 1.
    pub fn single(num_concepts: usize, id: usize) -> Self {
        Self {
            num_concepts,
            candidates: vec![id],
            scores: vec![1.0],
            logits: vec![0.0],
            weights: vec![1.0],
        }
    }

    pub fn weight_of(&self, id: usize) -> f64 {
        self.candidates
            .iter()
            .position(|&c| c == id)
            .map_or(0.0, |i| self.weights[i])
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weights over all concepts, zeros for non-candidates.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_concepts];
        for (&id, &w) in self.candidates.iter().zip(&self.weights) {
            if id < out.len() {
                out[id] = w;
            }
        }
        out
    }

    /// Candidate ids with nonzero weight, with their weights.
    pub fn active(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.candidates
            .iter()
            .copied()
            .zip(self.weights.iter().copied())
            .filter(|&(_, w)| w > 0.0)
    }
}

/// Concepts whose visual prototype has cosine similarity strictly above
/// `tau_visual` with `h_v`, ascending by id.
pub fn coarse_filter(h_v: &Vector, concepts: &ConceptSet, cfg: &RouterConfig) -> Result<Vec<usize>> {
    if h_v.norm() == 0.0 {
        return Err(DscaError::ZeroNorm("visual query".into()));
    }
    let mut out = Vec::new();
    for c in concepts.iter() {
        check_dim("coarse_filter", c.proto_visual.len(), h_v.len())?;
        let s = cosine(h_v, &c.proto_visual).ok_or_else(|| DscaError::ZeroNorm(format!("visual prototype {}", c.id)))?;
        if s > cfg.tau_visual {
            out.push(c.id);
        }
    }
    Ok(out)
}

/// Softmax of `s_k / τ` over all candidates. A candidate whose module is
/// not active yet keeps its weight but contributes no update.
pub fn route(h_f: &Vector, candidates: &[usize], concepts: &ConceptSet, cfg: &RouterConfig) -> Result<RoutingDecision> {
    if !(cfg.tau > 0.0) {
        return Err(DscaError::config("routing temperature tau must be positive"));
    }
    let mut decision = RoutingDecision::empty(concepts.len());
    if candidates.is_empty() {
        return Ok(decision);
    }
    for &id in candidates {
        let c = concepts.get(id).ok_or(DscaError::UnknownConcept(id))?;
        check_dim("route", c.proto_fused.len(), h_f.len())?;
        let s = cosine(h_f, &c.proto_fused).ok_or_else(|| DscaError::ZeroNorm("fused query or prototype".into()))?;
        decision.candidates.push(id);
        decision.scores.push(s);
        decision.logits.push(s / cfg.tau);
    }
    decision.weights = softmax(&decision.logits);
    Ok(decision)
}

/// `h_f + Σ_k w_k Ψ_k(h_f)` over candidates with a module and basis.
pub fn apply_edit(
    h_f: &Vector,
    decision: &RoutingDecision,
    dsams: &BTreeMap<usize, DsamParams>,
    bases: &BTreeMap<usize, SubspaceBasis>,
) -> Result<Vector> {
    let mut out = h_f.clone();
    for (id, w) in decision.active() {
        let (Some(params), Some(basis)) = (dsams.get(&id), bases.get(&id)) else {
            continue;
        };
        out.axpy(w, &intervene(params, basis, h_f)?, 1.0);
    }
    Ok(out)
}
