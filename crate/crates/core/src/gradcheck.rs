//! Central finite-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsam::{DsamGrads, DsamParams, Tensor};
use crate::error::{DscaError, Result};
use crate::linalg::{gaussian_matrix, gaussian_vector, random_orthonormal_rows, softmax};
use crate::loss::{objective, BatchInputs, EditInput, LossWeights, ReplayInput};
use crate::router::RoutingDecision;
use crate::subspace::SubspaceBasis;
use crate::world::{teacher_fused, Split, TaskHead, WorldModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub num_states: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 100,
            abs_floor: 1e-5,
            num_states: 10,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(DscaError::config("gradcheck step must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.abs_floor >= 0.0) {
            return Err(DscaError::config("gradcheck tolerance must be positive and abs_floor nonnegative"));
        }
        if self.coords_per_tensor == 0 || self.num_states == 0 {
            return Err(DscaError::config("gradcheck needs at least one state and one coordinate per tensor"));
        }
        Ok(())
    }
}

/// Everything the objective needs, with parameters the checker may perturb.
#[derive(Debug, Clone)]
pub struct Problem {
    pub batch: BatchInputs,
    pub dsams: BTreeMap<usize, DsamParams>,
    pub bases: BTreeMap<usize, SubspaceBasis>,
    pub head: TaskHead,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordFailure {
    pub concept: usize,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub concept: usize,
    pub tensor: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
    pub failures: Vec<CoordFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.worst_rel_err).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.tensors.extend(other.tensors);
        self.failures.extend(other.failures);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn total(problem: &Problem) -> Result<f64> {
    Ok(objective(&problem.batch, &problem.dsams, &problem.bases, &problem.head, &problem.weights, false)?
        .0
        .total)
}

/// Compares analytic and numeric gradients on a random subset of each
/// tensor's coordinates. `corrupt` adds a constant to every analytic entry
/// (a negative control).
pub fn check_gradients<R: Rng + ?Sized>(
    problem: &Problem,
    cfg: &GradcheckConfig,
    rng: &mut R,
    corrupt: Option<f64>,
) -> Result<GradcheckReport> {
    let (_, mut grads) = objective(&problem.batch, &problem.dsams, &problem.bases, &problem.head, &problem.weights, true)?;
    let mut work = problem.clone();
    let mut report = GradcheckReport::default();
    let ids: Vec<usize> = problem.dsams.keys().copied().collect();
    for id in ids {
        let zero = DsamGrads::zeros_like(&problem.dsams[&id]);
        let analytic = grads.remove(&id).unwrap_or(zero);
        for t in Tensor::ALL {
            let len = analytic.tensor(t).len();
            let n = cfg.coords_per_tensor.min(len);
            let mut picks: Vec<usize> = sample_indices(rng, len, n).into_vec();
            picks.sort_unstable();
            let mut worst = (0.0f64, 0usize);
            for &i in &picks {
                let original = work.dsams[&id].tensor(t)[i];
                work.dsams.get_mut(&id).expect("id present").tensor_mut(t)[i] = original + cfg.step;
                let plus = total(&work)?;
                work.dsams.get_mut(&id).expect("id present").tensor_mut(t)[i] = original - cfg.step;
                let minus = total(&work)?;
                work.dsams.get_mut(&id).expect("id present").tensor_mut(t)[i] = original;
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = analytic.tensor(t)[i] + corrupt.unwrap_or(0.0);
                let err = relative_error(a, numeric, cfg.abs_floor);
                if !err.is_finite() {
                    return Err(DscaError::NonFiniteGradient {
                        concept: id,
                        tensor: t.name(),
                        index: i,
                    });
                }
                if err > worst.0 {
                    worst = (err, i);
                }
                if err > cfg.tolerance {
                    report.failures.push(CoordFailure {
                        concept: id,
                        tensor: t.name().to_string(),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_err: err,
                    });
                }
            }
            report.tensors.push(TensorReport {
                concept: id,
                tensor: t.name().to_string(),
                checked: picks.len(),
                worst_rel_err: worst.0,
                worst_index: worst.1,
            });
        }
    }
    Ok(report)
}

/// Runs `cfg.num_states` independent random states and merges their reports.
pub fn check_random_states<R: Rng + ?Sized>(
    world: &WorldModel,
    shape: ProblemShape,
    weights: &LossWeights,
    cfg: &GradcheckConfig,
    rng: &mut R,
    corrupt: Option<f64>,
) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for _ in 0..cfg.num_states {
        let problem = random_problem(world, shape, weights, rng)?;
        report.merge(check_gradients(&problem, cfg, rng, corrupt)?);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemShape {
    pub rank: usize,
    pub bottleneck: usize,
    pub modules: usize,
    pub batch_edit: usize,
    pub batch_replay: usize,
}

fn random_decision<R: Rng + ?Sized>(rng: &mut R, modules: usize) -> RoutingDecision {
    let count = rng.random_range(1..=modules);
    let mut candidates: Vec<usize> = sample_indices(rng, modules, count).into_vec();
    candidates.sort_unstable();
    let scores: Vec<f64> = candidates.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits: Vec<f64> = scores.iter().map(|s| s / 0.5).collect();
    let weights = softmax(&logits);
    RoutingDecision {
        num_concepts: modules,
        candidates,
        scores,
        logits,
        weights,
    }
}

/// A random state over world samples: mutually orthogonal random bases,
/// generic (non-initial) module parameters and random routing decisions.
pub fn random_problem<R: Rng + ?Sized>(
    world: &WorldModel,
    shape: ProblemShape,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<Problem> {
    let d = world.dim();
    if shape.modules * shape.rank > d {
        return Err(DscaError::config("modules × rank exceeds the feature dimension"));
    }
    if shape.batch_replay < 2 {
        return Err(DscaError::BatchTooSmall {
            context: "gradient check replay batch",
            needed: 2,
            found: shape.batch_replay,
        });
    }
    let all_rows = random_orthonormal_rows(rng, shape.modules * shape.rank, d);
    let mut bases = BTreeMap::new();
    let mut dsams = BTreeMap::new();
    let scale = 1.0 / (d as f64).sqrt();
    for k in 0..shape.modules {
        let rows = all_rows.rows(k * shape.rank, shape.rank).into_owned();
        let basis = SubspaceBasis::from_rows(k, &rows)?;
        let mut p = DsamParams::new_noop(k, &basis, shape.bottleneck, true, rng)?;
        p.w += gaussian_matrix(rng, shape.rank, d, 0.5 * scale);
        p.b = gaussian_vector(rng, shape.rank, 0.5);
        p.gate_u = gaussian_matrix(rng, d, shape.bottleneck, 1.0 / (shape.bottleneck as f64).sqrt());
        p.gate_v = gaussian_matrix(rng, shape.bottleneck, d, scale);
        p.gate_b = gaussian_vector(rng, d, 0.5);
        bases.insert(k, basis);
        dsams.insert(k, p);
    }
    let n = world.num_concepts();
    let mut batch = BatchInputs::default();
    for _ in 0..shape.batch_edit {
        let concept = rng.random_range(0..n);
        let s = world.draw(concept, Split::Edit, rng)?;
        batch.edit.push(EditInput {
            fused: s.fused.clone(),
            visual: s.visual.clone(),
            text: s.text.clone(),
            target_class: s.target_class,
            decision: random_decision(rng, shape.modules),
        });
    }
    for _ in 0..shape.batch_replay {
        let concept = rng.random_range(0..n);
        let s = world.draw(concept, Split::Replay, rng)?;
        batch.replay.push(ReplayInput {
            fused: s.fused.clone(),
            teacher: teacher_fused(&s),
            decision: random_decision(rng, shape.modules),
        });
    }
    Ok(Problem {
        batch,
        dsams,
        bases,
        head: world.head().clone(),
        weights: weights.clone(),
    })
}
