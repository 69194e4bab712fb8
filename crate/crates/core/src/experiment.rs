//! End-to-end experiment: stream generation, lifelong run, and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, RunReport, Variant};
use crate::error::{DscaError, Result};
use crate::linalg::{Matrix, Vector};
use crate::metrics::{
    cl_metrics, edit_metrics, reliability, sparsity_report, AccuracyMatrix, Baseline, ClMetrics, EditEvalSet,
    EditMetrics, EvalSetShape, MetricRecord, SparsityReport,
};
use crate::world::{generate_stream, Sample, Split, WorldModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub edits_total: usize,
    /// Number of evenly spaced metric checkpoints (0 = final only).
    pub checkpoints: usize,
    pub seed: u64,
    pub variant: Variant,
    pub replay_pool: usize,
    pub eval_cases_per_concept: usize,
    pub neighbors_per_case: usize,
    pub unrelated: usize,
    /// RMS norm of neighbor perturbations; defaults to half the world noise.
    pub perturbation: Option<f64>,
    pub sparsity_probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            edits_total: 200,
            checkpoints: 4,
            seed: 0,
            variant: Variant::Full,
            replay_pool: 512,
            eval_cases_per_concept: 50,
            neighbors_per_case: 2,
            unrelated: 400,
            perturbation: None,
            sparsity_probes: 512,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replay_pool < 2 {
            return Err(DscaError::config("replay_pool must hold at least 2 samples"));
        }
        if self.eval_cases_per_concept == 0 || self.neighbors_per_case == 0 || self.unrelated == 0 {
            return Err(DscaError::config("evaluation set sizes must be positive"));
        }
        if let Some(p) = self.perturbation {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(DscaError::config("perturbation must be a nonnegative number"));
            }
        }
        Ok(())
    }
}

/// Independent sub-seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub report: RunReport,
    pub edited_concepts: Vec<usize>,
    pub final_metrics: Option<EditMetrics>,
    pub accuracy: Option<AccuracyMatrix>,
    pub cl: Option<ClMetrics>,
    pub sparsity: SparsityReport,
    pub records: Vec<MetricRecord>,
}

impl ExperimentResult {
    pub fn locality_drop(&self) -> Option<f64> {
        self.final_metrics.map(|m| 1.0 - m.multimodal_locality)
    }

    pub fn generalization(&self) -> Option<f64> {
        self.final_metrics
            .map(|m| 0.5 * (m.text_generalization + m.visual_generalization))
    }
}

fn records(metrics: &EditMetrics, step: u64, variant: Variant) -> Vec<MetricRecord> {
    [
        ("reliability", metrics.reliability),
        ("text_generalization", metrics.text_generalization),
        ("visual_generalization", metrics.visual_generalization),
        ("text_locality", metrics.text_locality),
        ("multimodal_locality", metrics.multimodal_locality),
    ]
    .into_iter()
    .map(|(m, v)| MetricRecord {
        metric: m.to_string(),
        value: v,
        checkpoint_step: step,
        variant: variant.id().to_string(),
    })
    .collect()
}

/// Runs `run.variant` of `engine_cfg` on `world`. `on_checkpoint` is called
/// at every metric checkpoint (after the built-in evaluation).
pub fn run_experiment(
    world: &WorldModel,
    engine_cfg: &EngineConfig,
    run: &RunConfig,
    on_checkpoint: &mut dyn FnMut(&Engine, usize) -> Result<()>,
) -> Result<(Engine, ExperimentResult)> {
    run.validate()?;
    let cfg = run.variant.apply(engine_cfg);
    let stream = generate_stream(world, run.edits_total, run.replay_pool, derive_seed(run.seed, 1))?;
    let (edits, replay_pool) = stream.split_at(run.edits_total);

    let mut edited: Vec<usize> = Vec::new();
    for s in edits {
        if !edited.contains(&s.ground_concept) {
            edited.push(s.ground_concept);
        }
    }
    let perturbation = run.perturbation.unwrap_or(0.5 * world.config().noise_scale);
    let eval = EditEvalSet::build(
        world,
        &edited,
        EvalSetShape {
            cases_per_concept: run.eval_cases_per_concept,
            neighbors_per_case: run.neighbors_per_case,
            unrelated: run.unrelated,
            perturbation,
        },
        derive_seed(run.seed, 2),
    )?;
    let task_sets: Vec<EditEvalSet> = edited.iter().map(|&c| eval.for_concept(c)).collect();
    let baseline = Baseline::new(world);

    let t = edited.len();
    let mut acc = Matrix::zeros(t, t);
    let mut zero_shot = Vector::zeros(t);
    let mut all_records = Vec::new();
    let every = run.edits_total.checked_div(run.checkpoints).map_or(0, |e| e.max(1));

    let mut engine = Engine::new(cfg, world, derive_seed(run.seed, 3))?;
    let report = {
        let mut hook = |e: &Engine, done: usize| -> Result<()> {
            if done == 0 {
                for (i, ts) in task_sets.iter().enumerate() {
                    zero_shot[i] = reliability(e, &ts.edit_cases)?;
                }
            }
            // Task boundary: the last edit of a concept block.
            if done > 0 && (done == edits.len() || edits[done].ground_concept != edits[done - 1].ground_concept) {
                let task = edited
                    .iter()
                    .position(|&c| c == edits[done - 1].ground_concept)
                    .expect("edit concept is in the edited list");
                for (i, ts) in task_sets.iter().enumerate() {
                    acc[(task, i)] = reliability(e, &ts.edit_cases)?;
                }
            }
            let at_checkpoint = every > 0 && done > 0 && (done.is_multiple_of(every) || done == run.edits_total);
            if t > 0 && at_checkpoint {
                let m = edit_metrics(e, &baseline, &eval)?;
                all_records.extend(records(&m, e.step(), run.variant));
                on_checkpoint(e, done)?;
            }
            Ok(())
        };
        engine.run_lifelong(edits, replay_pool, run.edits_total, 1, &mut hook)?
    };

    let final_metrics = if t > 0 {
        let m = edit_metrics(&engine, &baseline, &eval)?;
        if every == 0 {
            all_records.extend(records(&m, engine.step(), run.variant));
        }
        Some(m)
    } else {
        None
    };
    let accuracy = if t > 0 {
        Some(AccuracyMatrix::new(acc, zero_shot)?)
    } else {
        None
    };
    let cl = match &accuracy {
        Some(a) if a.tasks() >= 2 => Some(cl_metrics(a)?),
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 4));
    let old: Vec<usize> = world.old_concepts().collect();
    let mut decisions = Vec::with_capacity(run.sparsity_probes);
    if !old.is_empty() {
        for i in 0..run.sparsity_probes {
            let s: Sample = world.draw(old[i % old.len()], Split::Replay, &mut rng)?;
            decisions.push(engine.edit_inference(&s)?.1);
        }
    }
    let sparsity = sparsity_report(&decisions);

    Ok((
        engine,
        ExperimentResult {
            variant: run.variant,
            report,
            edited_concepts: edited,
            final_metrics,
            accuracy,
            cl,
            sparsity,
            records: all_records,
        },
    ))
}
