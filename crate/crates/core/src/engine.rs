//! The continual editing loop: partition edit samples, route, intervene,
//! take a gradient step on the module parameters, and periodically refine
//! the concept subspaces.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsam::{sgd_step, DsamGrads, DsamParams};
use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, ensure_finite, Matrix, Vector};
use crate::loss::{objective, BatchInputs, EditInput, LossBreakdown, LossWeights, ReplayInput};
use crate::partition::{ConceptSet, PartitionerConfig};
use crate::router::{apply_edit, coarse_filter, route, RouterConfig, RoutingDecision};
use crate::subspace::{ipca_refine, mean_overlap, residualized_pca_init, OverlapReport, SubspaceBasis};
use crate::world::{teacher_fused, Sample, TaskHead, WorldModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub r: usize,
    pub bottleneck: usize,
    pub n_min: usize,
    pub n_refine: usize,
    pub alpha: f64,
    pub ema_rate: f64,
    pub buffer_capacity: usize,
    pub init_std_factor: f64,
    pub first_init_std: f64,
    pub tau: f64,
    pub tau_visual: f64,
    pub single_stage: bool,
    pub loss_weights: LossWeights,
    pub lr: f64,
    pub momentum: f64,
    pub batch_edit: usize,
    pub batch_replay: usize,
    pub steps_per_edit: usize,
    /// Residualize against the other active subspaces during PCA.
    pub orthogonalize: bool,
    pub basis_residual: bool,
    /// One full-rank module that sees every input, no routing.
    pub dense_reference: bool,
    /// Fill the edit batch with earlier edits drawn at random instead of
    /// the most recent ones.
    pub edit_rehearsal: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            r: 8,
            bottleneck: 8,
            n_min: 32,
            n_refine: 100,
            alpha: 2.0,
            ema_rate: 0.05,
            buffer_capacity: 512,
            init_std_factor: 0.25,
            first_init_std: 1.0,
            tau: 0.07,
            tau_visual: 0.3,
            single_stage: false,
            loss_weights: LossWeights::default(),
            lr: 1e-2,
            momentum: 0.9,
            batch_edit: 4,
            batch_replay: 8,
            steps_per_edit: 20,
            orthogonalize: true,
            basis_residual: true,
            dense_reference: false,
            edit_rehearsal: false,
        }
    }
}

impl EngineConfig {
    /// Large-scale profile: rank 128, N_min 32, refinement every 500 steps,
    /// τ = 0.07, λ = (0.5, 1.0, 1e-2), bottleneck 16.
    pub fn paper_profile() -> Self {
        Self {
            r: 128,
            bottleneck: 16,
            n_min: 32,
            n_refine: 500,
            tau: 0.07,
            loss_weights: LossWeights {
                lambda_align: 0.5,
                lambda_distill: 1.0,
                lambda_sparse: 1e-2,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    pub fn partitioner(&self) -> PartitionerConfig {
        PartitionerConfig {
            alpha: self.alpha,
            ema_rate: self.ema_rate,
            buffer_capacity: self.buffer_capacity,
            init_std_factor: self.init_std_factor,
            first_init_std: self.first_init_std,
        }
    }

    pub fn router(&self) -> RouterConfig {
        RouterConfig {
            tau_visual: self.tau_visual,
            tau: self.tau,
            single_stage: self.single_stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(DscaError::config("r must be at least 1"));
        }
        if self.bottleneck == 0 {
            return Err(DscaError::config("bottleneck must be at least 1"));
        }
        if self.n_min == 0 {
            return Err(DscaError::config("n_min must be at least 1"));
        }
        if self.n_refine == 0 {
            return Err(DscaError::config("n_refine must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DscaError::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DscaError::config("momentum must lie in [0, 1)"));
        }
        if self.batch_edit == 0 || self.steps_per_edit == 0 {
            return Err(DscaError::config("batch_edit and steps_per_edit must be at least 1"));
        }
        if self.batch_replay == 1 {
            return Err(DscaError::config("batch_replay must be 0 or at least 2 (distillation needs negatives)"));
        }
        self.partitioner().validate()?;
        self.router().validate()?;
        self.loss_weights.validate()?;
        if self.n_min <= self.r {
            warn!(
                "n_min = {} does not exceed r = {}; activation waits until more than r samples are buffered",
                self.n_min, self.r
            );
        }
        Ok(())
    }

    pub fn validate_for_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        if self.r > d {
            return Err(DscaError::config(format!("r = {} exceeds the feature dimension {d}", self.r)));
        }
        if self.bottleneck * 4 > d {
            return Err(DscaError::config(format!(
                "bottleneck = {} exceeds d_f/4 = {}",
                self.bottleneck,
                d / 4
            )));
        }
        Ok(())
    }
}

/// One engine configuration per component toggle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    Full,
    NoOrthogonality,
    NoGateSparsity,
    SingleStageRouting,
    NoBasisResidual,
    HalfSubspaces,
    HalfRank,
    DenseReference,
}

impl Variant {
    pub const ABLATIONS: [Variant; 7] = [
        Variant::Full,
        Variant::NoOrthogonality,
        Variant::NoGateSparsity,
        Variant::SingleStageRouting,
        Variant::NoBasisResidual,
        Variant::HalfSubspaces,
        Variant::HalfRank,
    ];

    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoOrthogonality,
        Variant::NoGateSparsity,
        Variant::SingleStageRouting,
        Variant::NoBasisResidual,
        Variant::HalfSubspaces,
        Variant::HalfRank,
        Variant::DenseReference,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoOrthogonality => "no-orthogonality",
            Variant::NoGateSparsity => "no-gate-sparsity",
            Variant::SingleStageRouting => "single-stage-routing",
            Variant::NoBasisResidual => "no-basis-residual",
            Variant::HalfSubspaces => "half-subspaces",
            Variant::HalfRank => "half-rank",
            Variant::DenseReference => "dense-reference",
        }
    }

    /// The base configuration with exactly this variant's toggle applied.
    pub fn apply(self, base: &EngineConfig) -> EngineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoOrthogonality => c.orthogonalize = false,
            Variant::NoGateSparsity => c.loss_weights.lambda_sparse = 0.0,
            Variant::SingleStageRouting => c.single_stage = true,
            Variant::NoBasisResidual => c.basis_residual = false,
            Variant::HalfSubspaces => c.alpha *= 2.0,
            Variant::HalfRank => c.r = (c.r / 2).max(1),
            Variant::DenseReference => c.dense_reference = true,
        }
        c
    }

    fn valid_ids() -> String {
        Variant::ALL.iter().map(|v| v.id()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = DscaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace("w/o", "no").replace([' ', '_'], "-");
        let norm = norm.replace("no--", "no-");
        let v = match norm.as_str() {
            "full" => Variant::Full,
            "no-orthogonality" => Variant::NoOrthogonality,
            "no-gate-sparsity" => Variant::NoGateSparsity,
            "single-stage-routing" | "single-stage" => Variant::SingleStageRouting,
            "no-basis-residual" => Variant::NoBasisResidual,
            "half-subspaces" | "k/2" => Variant::HalfSubspaces,
            "half-rank" | "r/2" => Variant::HalfRank,
            "dense-reference" | "dense" => Variant::DenseReference,
            _ => {
                return Err(DscaError::UnknownVariant {
                    given: s.to_string(),
                    valid: Variant::valid_ids(),
                })
            }
        };
        Ok(v)
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.id().to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = DscaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Counts of every mutation of the non-gradient state and of the gradient
/// state, by the code path that performed it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationAudit {
    pub prototype_updates: u64,
    pub basis_inits: u64,
    pub basis_refines: u64,
    pub dsam_steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub activated: Vec<usize>,
    pub refined: Vec<usize>,
    /// Concepts left inactive because their buffer was degenerate.
    pub deferred: Vec<usize>,
}

/// Deterministic generator position, enough to resume the stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    world_fingerprint: u64,
    head: TaskHead,
    concepts: ConceptSet,
    bases: BTreeMap<usize, SubspaceBasis>,
    dsams: BTreeMap<usize, DsamParams>,
    velocity: BTreeMap<usize, DsamGrads>,
    step: u64,
    rng: ChaCha8Rng,
    audit: MutationAudit,
}

/// Parts of an engine as stored in a checkpoint.
#[derive(Debug, Clone)]
pub struct EngineParts {
    pub config: EngineConfig,
    pub world_fingerprint: u64,
    pub head: TaskHead,
    pub concepts: ConceptSet,
    pub bases: BTreeMap<usize, SubspaceBasis>,
    pub dsams: BTreeMap<usize, DsamParams>,
    pub velocity: BTreeMap<usize, DsamGrads>,
    pub step: u64,
    pub rng: RngState,
    pub audit: MutationAudit,
}

impl Engine {
    pub fn new(config: EngineConfig, world: &WorldModel, seed: u64) -> Result<Self> {
        let d = world.dim();
        config.validate_for_dim(d)?;
        let mut engine = Self {
            config,
            world_fingerprint: world.fingerprint(),
            head: world.head().clone(),
            concepts: ConceptSet::new(),
            bases: BTreeMap::new(),
            dsams: BTreeMap::new(),
            velocity: BTreeMap::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: MutationAudit::default(),
        };
        if engine.config.dense_reference {
            let basis = SubspaceBasis::from_rows(0, &Matrix::identity(d, d))?;
            let params = DsamParams::new_noop(0, &basis, engine.config.bottleneck, true, &mut engine.rng)?;
            engine.bases.insert(0, basis);
            engine.dsams.insert(0, params);
        }
        Ok(engine)
    }

    pub fn from_parts(parts: EngineParts) -> Result<Self> {
        for (id, p) in &parts.dsams {
            let b = parts.bases.get(id).ok_or(DscaError::InactiveBasis(*id))?;
            check_dim("module rank", b.rank(), p.rank())?;
            if !p.is_finite() {
                return Err(DscaError::NonFinite(format!("module {id} parameters")));
            }
        }
        Ok(Self {
            config: parts.config,
            world_fingerprint: parts.world_fingerprint,
            head: parts.head,
            concepts: parts.concepts,
            bases: parts.bases,
            dsams: parts.dsams,
            velocity: parts.velocity,
            step: parts.step,
            rng: parts.rng.restore(),
            audit: parts.audit,
        })
    }

    pub fn to_parts(&self) -> EngineParts {
        EngineParts {
            config: self.config.clone(),
            world_fingerprint: self.world_fingerprint,
            head: self.head.clone(),
            concepts: self.concepts.clone(),
            bases: self.bases.clone(),
            dsams: self.dsams.clone(),
            velocity: self.velocity.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            audit: self.audit,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn world_fingerprint(&self) -> u64 {
        self.world_fingerprint
    }

    pub fn head(&self) -> &TaskHead {
        &self.head
    }

    pub fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    pub fn bases(&self) -> &BTreeMap<usize, SubspaceBasis> {
        &self.bases
    }

    pub fn dsams(&self) -> &BTreeMap<usize, DsamParams> {
        &self.dsams
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn audit(&self) -> MutationAudit {
        self.audit
    }

    pub fn dim(&self) -> usize {
        self.head.dim()
    }

    pub fn active_dsams(&self) -> usize {
        self.dsams.len()
    }

    /// Overlap report over the active subspaces; `None` when fewer than two.
    pub fn overlap_report(&self) -> Option<OverlapReport> {
        if self.config.dense_reference {
            return None;
        }
        let all: Vec<&SubspaceBasis> = self.bases.values().collect();
        mean_overlap(&all).ok()
    }

    /// Routing decision for one sample against the given concept set.
    fn decide(&self, concepts: &ConceptSet, sample: &Sample) -> Result<RoutingDecision> {
        if self.config.dense_reference {
            return Ok(RoutingDecision::single(1, 0));
        }
        if concepts.is_empty() {
            return Ok(RoutingDecision::empty(0));
        }
        let cfg = self.config.router();
        let candidates: Vec<usize> = if cfg.single_stage {
            concepts.iter().map(|c| c.id).collect()
        } else {
            coarse_filter(&sample.visual, concepts, &cfg)?
        };
        route(&sample.fused, &candidates, concepts, &cfg)
    }

    /// Edited fused vector and routing decision; never mutates the engine.
    pub fn edit_inference(&self, sample: &Sample) -> Result<(Vector, RoutingDecision)> {
        check_dim("edit_inference", self.dim(), sample.fused.len())?;
        let decision = self.decide(&self.concepts, sample)?;
        let edited = apply_edit(&sample.fused, &decision, &self.dsams, &self.bases)?;
        Ok((edited, decision))
    }

    fn validate_samples(&self, samples: &[Sample], what: &str) -> Result<()> {
        let d = self.dim();
        for s in samples {
            check_dim("training sample", d, s.fused.len())?;
            check_dim("training sample", d, s.visual.len())?;
            check_dim("training sample", d, s.text.len())?;
            ensure_finite(&s.fused, what)?;
            ensure_finite(&s.visual, what)?;
            ensure_finite(&s.text, what)?;
            if s.target_class >= self.head.num_classes() {
                return Err(DscaError::InvalidClass {
                    class: s.target_class,
                    num_classes: self.head.num_classes(),
                });
            }
        }
        Ok(())
    }

    /// One step in which every edit sample is also fed to the partitioner.
    pub fn train_step(&mut self, edit: &[Sample], replay: &[Sample]) -> Result<LossBreakdown> {
        let all: Vec<usize> = (0..edit.len()).collect();
        self.train_step_with(edit, replay, &all)
    }

    /// One step in which only the edit samples at `fresh` update the concept
    /// set. Either the whole step succeeds or the engine is left unchanged.
    pub fn train_step_with(&mut self, edit: &[Sample], replay: &[Sample], fresh: &[usize]) -> Result<LossBreakdown> {
        self.validate_samples(edit, "edit sample")?;
        self.validate_samples(replay, "replay sample")?;
        if replay.len() == 1 {
            return Err(DscaError::BatchTooSmall {
                context: "replay batch",
                needed: 2,
                found: 1,
            });
        }
        if let Some(&bad) = fresh.iter().find(|&&i| i >= edit.len()) {
            return Err(DscaError::config(format!("fresh index {bad} outside the edit batch")));
        }

        let mut grown = None;
        let mut proto_updates = 0;
        if !fresh.is_empty() && !self.config.dense_reference {
            let mut set = self.concepts.clone();
            let pcfg = self.config.partitioner();
            for &i in fresh {
                let a = set.assign_or_spawn(&edit[i].fused, &edit[i].visual, &pcfg)?;
                proto_updates += 1;
                if a.spawned {
                    debug!("step {}: spawned concept {}", self.step, a.id);
                }
            }
            grown = Some(set);
        }
        let concepts = grown.as_ref().unwrap_or(&self.concepts);

        let mut batch = BatchInputs::default();
        for s in edit {
            batch.edit.push(EditInput {
                fused: s.fused.clone(),
                visual: s.visual.clone(),
                text: s.text.clone(),
                target_class: s.target_class,
                decision: self.decide(concepts, s)?,
            });
        }
        for s in replay {
            batch.replay.push(ReplayInput {
                fused: s.fused.clone(),
                teacher: teacher_fused(s),
                decision: self.decide(concepts, s)?,
            });
        }
        let (breakdown, grads) = objective(&batch, &self.dsams, &self.bases, &self.head, &self.config.loss_weights, true)?;

        let mut updated = Vec::new();
        for (&id, params) in &self.dsams {
            let grad = grads.get(&id);
            let has_velocity = self.velocity.get(&id).is_some_and(|v| v.norm() > 0.0);
            if grad.is_none() && !has_velocity {
                continue;
            }
            let zero;
            let grad = match grad {
                Some(g) => g,
                None => {
                    zero = DsamGrads::zeros_like(params);
                    &zero
                }
            };
            let mut p = params.clone();
            let mut v = self
                .velocity
                .get(&id)
                .cloned()
                .unwrap_or_else(|| DsamGrads::zeros_like(params));
            sgd_step(&mut p, grad, self.config.lr, self.config.momentum, Some(&mut v))?;
            if !p.is_finite() {
                return Err(DscaError::NonFinite(format!("module {id} parameters after update")));
            }
            updated.push((id, p, v));
        }

        if let Some(set) = grown {
            self.concepts = set;
            self.audit.prototype_updates += proto_updates;
        }
        for (id, p, v) in updated {
            self.dsams.insert(id, p);
            self.velocity.insert(id, v);
            self.audit.dsam_steps += 1;
        }
        self.step += 1;
        if self.step.is_multiple_of(self.config.n_refine as u64) {
            self.refine_subspaces();
        }
        Ok(breakdown)
    }

    /// Refines active subspaces from their buffers and activates inactive
    /// concepts whose buffers reached `n_min`. Degenerate buffers leave the
    /// concept untouched (buffer kept) and are reported as deferred.
    pub fn refine_subspaces(&mut self) -> RefineReport {
        let mut report = RefineReport::default();
        if self.config.dense_reference {
            return report;
        }
        let r = self.config.r;
        let ids: Vec<usize> = self.concepts.iter().map(|c| c.id).collect();
        for id in ids {
            let concept = self.concepts.get(id).expect("id from iteration");
            if concept.buffer.is_empty() {
                continue;
            }
            let buffer: Vec<Vector> = concept.buffer.iter().cloned().collect();
            let active = concept.dsam_active;
            if !active && buffer.len() < self.config.n_min {
                continue;
            }
            let others: Vec<&SubspaceBasis> = if self.config.orthogonalize {
                self.bases.iter().filter(|(&k, _)| k != id).map(|(_, b)| b).collect()
            } else {
                Vec::new()
            };
            let result = if active {
                ipca_refine(&self.bases[&id], &buffer, &others)
            } else {
                residualized_pca_init(id, &buffer, r, self.config.n_min, &others)
            };
            match result {
                Ok(basis) => {
                    if active {
                        self.audit.basis_refines += 1;
                        report.refined.push(id);
                    } else {
                        let params = match DsamParams::new_noop(
                            id,
                            &basis,
                            self.config.bottleneck,
                            self.config.basis_residual,
                            &mut self.rng,
                        ) {
                            Ok(p) => p,
                            Err(e) => {
                                warn!("concept {id}: module construction failed: {e}");
                                report.deferred.push(id);
                                continue;
                            }
                        };
                        self.dsams.insert(id, params);
                        self.audit.basis_inits += 1;
                        report.activated.push(id);
                    }
                    self.bases.insert(id, basis);
                    let c = self.concepts.get_mut(id).expect("id from iteration");
                    c.dsam_active = true;
                    c.buffer.clear();
                }
                Err(e) => {
                    warn!("concept {id}: subspace update deferred: {e}");
                    report.deferred.push(id);
                }
            }
        }
        report
    }

    /// Draws a replay batch uniformly without replacement.
    fn replay_batch<'a>(&mut self, pool: &'a [Sample]) -> Vec<&'a Sample> {
        let n = self.config.batch_replay.min(pool.len());
        if n < 2 {
            return Vec::new();
        }
        let mut idx = sample_indices(&mut self.rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &pool[i]).collect()
    }

    /// Edit batch for edit `i`: the edit itself (last) plus up to
    /// `batch_edit − 1` earlier edits, either the most recent ones or, with
    /// `edit_rehearsal`, a uniform draw without replacement.
    fn edit_batch(&mut self, edits: &[Sample], i: usize) -> Vec<Sample> {
        let extra = self.config.batch_edit.saturating_sub(1).min(i);
        let mut idx: Vec<usize> = if self.config.edit_rehearsal {
            let mut v = sample_indices(&mut self.rng, i, extra).into_vec();
            v.sort_unstable();
            v
        } else {
            (i - extra..i).collect()
        };
        idx.push(i);
        idx.into_iter().map(|k| edits[k].clone()).collect()
    }

    /// Processes `edits_total` edits in order. Each edit is trained for
    /// `steps_per_edit` steps on an edit batch ending with it plus a fresh
    /// replay batch; the newest edit updates the concept set on its first
    /// step. `on_checkpoint` runs every `checkpoint_every`
    /// edits (0 disables) with the number of edits processed so far.
    pub fn run_lifelong(
        &mut self,
        edits: &[Sample],
        replay_pool: &[Sample],
        edits_total: usize,
        checkpoint_every: usize,
        on_checkpoint: &mut dyn FnMut(&Engine, usize) -> Result<()>,
    ) -> Result<RunReport> {
        if edits.len() < edits_total {
            return Err(DscaError::InsufficientSamples {
                needed: edits_total,
                found: edits.len(),
            });
        }
        let mut report = RunReport::default();
        report.push_overlap(self, 0);
        on_checkpoint(self, 0)?;
        for i in 0..edits_total {
            let mut window = self.edit_batch(edits, i);
            let newest = window.len() - 1;
            for s in 0..self.config.steps_per_edit {
                if s > 0 && self.config.edit_rehearsal {
                    window = self.edit_batch(edits, i);
                }
                let replay: Vec<Sample> = self.replay_batch(replay_pool).into_iter().cloned().collect();
                let fresh: &[usize] = if s == 0 { std::slice::from_ref(&newest) } else { &[] };
                let before = self.audit.basis_inits + self.audit.basis_refines;
                let loss = self.train_step_with(&window, &replay, fresh)?;
                let changed = self.audit.basis_inits + self.audit.basis_refines != before;
                if changed {
                    report.push_overlap(self, i + 1);
                }
                let active_per_input = self.mean_active_per_input(&window, &replay)?;
                report.steps.push(StepRecord {
                    step: self.step,
                    edits_done: i + 1,
                    loss,
                    mean_overlap: report.last_mean_overlap,
                    max_overlap: report.last_max_overlap,
                    num_concepts: self.concepts.len(),
                    active_dsams: self.active_dsams(),
                    active_per_input,
                });
            }
            if checkpoint_every > 0 && (i + 1) % checkpoint_every == 0 {
                on_checkpoint(self, i + 1)?;
            }
        }
        report.edits_processed = edits_total;
        report.final_mean_overlap = report.last_mean_overlap;
        report.final_max_overlap = report.last_max_overlap;
        report.num_concepts = self.concepts.len();
        report.active_dsams = self.active_dsams();
        Ok(report)
    }

    fn mean_active_per_input(&self, edit: &[Sample], replay: &[Sample]) -> Result<f64> {
        let mut total = 0usize;
        let mut n = 0usize;
        for s in edit.iter().chain(replay) {
            let d = self.decide(&self.concepts, s)?;
            total += d.weights.iter().filter(|&&w| w > ACTIVE_WEIGHT).count();
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { total as f64 / n as f64 })
    }
}

/// Weight above which a module counts as active for an input.
pub const ACTIVE_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub edits_done: usize,
    pub loss: LossBreakdown,
    pub mean_overlap: Option<f64>,
    pub max_overlap: Option<f64>,
    pub num_concepts: usize,
    pub active_dsams: usize,
    pub active_per_input: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub step: u64,
    pub edits_done: usize,
    pub active_dsams: usize,
    pub mean_overlap: Option<f64>,
    pub max_overlap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub edits_processed: usize,
    pub num_concepts: usize,
    pub active_dsams: usize,
    pub final_mean_overlap: Option<f64>,
    pub final_max_overlap: Option<f64>,
    pub overlap_trajectory: Vec<OverlapPoint>,
    #[serde(skip)]
    pub steps: Vec<StepRecord>,
    #[serde(skip)]
    last_mean_overlap: Option<f64>,
    #[serde(skip)]
    last_max_overlap: Option<f64>,
}

impl RunReport {
    fn push_overlap(&mut self, engine: &Engine, edits_done: usize) {
        let rep = engine.overlap_report();
        self.last_mean_overlap = rep.as_ref().map(|r| r.mean_overlap);
        self.last_max_overlap = rep.as_ref().map(|r| r.max_overlap);
        self.overlap_trajectory.push(OverlapPoint {
            step: engine.step(),
            edits_done,
            active_dsams: engine.active_dsams(),
            mean_overlap: self.last_mean_overlap,
            max_overlap: self.last_max_overlap,
        });
    }
}
