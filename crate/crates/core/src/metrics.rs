//! Editing metrics (reliability, generalization, locality), continual
//! learning statistics over an accuracy matrix, and routing sparsity.
//!
//! Model outputs are compared as task-head argmax decisions. Evaluation runs
//! on a rayon pool capped by `DSCA_THREADS`, with results gathered in input
//! order.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, ACTIVE_WEIGHT};
use crate::error::{DscaError, Result};
use crate::linalg::{Matrix, Vector};
use crate::router::RoutingDecision;
use crate::world::{Sample, Split, TaskHead, WorldModel};

/// Anything that maps a sample to an (edited) fused vector under a head.
pub trait Editor: Sync {
    fn edit(&self, sample: &Sample) -> Result<Vector>;
    fn head(&self) -> &TaskHead;
    fn world_fingerprint(&self) -> u64;

    fn predict(&self, sample: &Sample) -> Result<usize> {
        self.head().predict(&self.edit(sample)?)
    }
}

impl Editor for Engine {
    fn edit(&self, sample: &Sample) -> Result<Vector> {
        Ok(self.edit_inference(sample)?.0)
    }

    fn head(&self) -> &TaskHead {
        Engine::head(self)
    }

    fn world_fingerprint(&self) -> u64 {
        Engine::world_fingerprint(self)
    }
}

/// The frozen, un-edited model.
#[derive(Debug, Clone)]
pub struct Baseline {
    head: TaskHead,
    fingerprint: u64,
}

impl Baseline {
    pub fn new(world: &WorldModel) -> Self {
        Self {
            head: world.head().clone(),
            fingerprint: world.fingerprint(),
        }
    }
}

impl Editor for Baseline {
    fn edit(&self, sample: &Sample) -> Result<Vector> {
        Ok(sample.fused.clone())
    }

    fn head(&self) -> &TaskHead {
        &self.head
    }

    fn world_fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("DSCA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

/// Fraction of items for which `hit` is true, evaluated in parallel.
fn fraction<T: Sync>(items: &[T], hit: impl Fn(&T) -> Result<bool> + Sync) -> Result<f64> {
    if items.is_empty() {
        return Err(DscaError::Undefined("metric over an empty set".into()));
    }
    let results: Vec<Result<bool>> = pool().install(|| items.par_iter().map(&hit).collect());
    let mut count = 0usize;
    for r in results {
        if r? {
            count += 1;
        }
    }
    Ok(count as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub sample: Sample,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborKind {
    Text,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalityKind {
    Text,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvalSet {
    pub edit_cases: Vec<EditCase>,
    pub paraphrase_neighbors: Vec<Vec<Sample>>,
    pub visual_neighbors: Vec<Vec<Sample>>,
    pub unrelated_text: Vec<Sample>,
    pub unrelated_multimodal: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSetShape {
    pub cases_per_concept: usize,
    pub neighbors_per_case: usize,
    pub unrelated: usize,
    /// RMS norm of the text / visual perturbations.
    pub perturbation: f64,
}

impl EditEvalSet {
    /// Fresh cases from the given edited concepts, perturbed neighbors for
    /// each, and unrelated inputs from the world's old concepts.
    pub fn build(world: &WorldModel, edited: &[usize], shape: EvalSetShape, seed: u64) -> Result<Self> {
        if shape.neighbors_per_case == 0 {
            return Err(DscaError::config("neighbors_per_case must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = EditEvalSet {
            edit_cases: Vec::new(),
            paraphrase_neighbors: Vec::new(),
            visual_neighbors: Vec::new(),
            unrelated_text: Vec::new(),
            unrelated_multimodal: Vec::new(),
        };
        for &c in edited {
            for _ in 0..shape.cases_per_concept {
                let s = world.draw(c, Split::Edit, &mut rng)?;
                let mut text = Vec::new();
                let mut visual = Vec::new();
                for _ in 0..shape.neighbors_per_case {
                    text.push(world.perturb_text(&s, shape.perturbation, &mut rng)?);
                    visual.push(world.perturb_visual(&s, shape.perturbation, &mut rng)?);
                }
                set.edit_cases.push(EditCase {
                    target: s.target_class,
                    sample: s,
                });
                set.paraphrase_neighbors.push(text);
                set.visual_neighbors.push(visual);
            }
        }
        let old: Vec<usize> = world.old_concepts().filter(|c| !edited.contains(c)).collect();
        if shape.unrelated > 0 {
            if old.is_empty() {
                return Err(DscaError::config("no unrelated concepts available for locality"));
            }
            for i in 0..shape.unrelated {
                let c = old[i % old.len()];
                let s = world.draw(c, Split::Replay, &mut rng)?;
                set.unrelated_text.push(world.text_only(&s)?);
                set.unrelated_multimodal.push(s);
            }
        }
        Ok(set)
    }

    /// Restriction to the cases of a single ground concept.
    pub fn for_concept(&self, concept: usize) -> EditEvalSet {
        let keep: Vec<usize> = (0..self.edit_cases.len())
            .filter(|&i| self.edit_cases[i].sample.ground_concept == concept)
            .collect();
        EditEvalSet {
            edit_cases: keep.iter().map(|&i| self.edit_cases[i].clone()).collect(),
            paraphrase_neighbors: keep.iter().map(|&i| self.paraphrase_neighbors[i].clone()).collect(),
            visual_neighbors: keep.iter().map(|&i| self.visual_neighbors[i].clone()).collect(),
            unrelated_text: self.unrelated_text.clone(),
            unrelated_multimodal: self.unrelated_multimodal.clone(),
        }
    }
}

pub fn reliability(editor: &dyn Editor, cases: &[EditCase]) -> Result<f64> {
    fraction(cases, |c| Ok(editor.predict(&c.sample)? == c.target))
}

pub fn generalization(editor: &dyn Editor, set: &EditEvalSet, kind: NeighborKind) -> Result<f64> {
    let neighbors = match kind {
        NeighborKind::Text => &set.paraphrase_neighbors,
        NeighborKind::Visual => &set.visual_neighbors,
    };
    if neighbors.len() != set.edit_cases.len() || neighbors.iter().any(|n| n.is_empty()) {
        return Err(DscaError::Undefined("generalization needs neighbors for every case".into()));
    }
    let pairs: Vec<(&Sample, usize)> = set
        .edit_cases
        .iter()
        .zip(neighbors)
        .flat_map(|(c, ns)| ns.iter().map(move |s| (s, c.target)))
        .collect();
    fraction(&pairs, |(s, target)| Ok(editor.predict(s)? == *target))
}

pub fn locality(editor: &dyn Editor, baseline: &dyn Editor, unrelated: &[Sample]) -> Result<f64> {
    if editor.world_fingerprint() != baseline.world_fingerprint() {
        return Err(DscaError::WorldMismatch("editor and baseline come from different worlds".into()));
    }
    fraction(unrelated, |s| Ok(editor.predict(s)? == baseline.predict(s)?))
}

pub fn locality_of(editor: &dyn Editor, baseline: &dyn Editor, set: &EditEvalSet, kind: LocalityKind) -> Result<f64> {
    match kind {
        LocalityKind::Text => locality(editor, baseline, &set.unrelated_text),
        LocalityKind::Multimodal => locality(editor, baseline, &set.unrelated_multimodal),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub reliability: f64,
    pub text_generalization: f64,
    pub visual_generalization: f64,
    pub text_locality: f64,
    pub multimodal_locality: f64,
}

pub fn edit_metrics(editor: &dyn Editor, baseline: &dyn Editor, set: &EditEvalSet) -> Result<EditMetrics> {
    Ok(EditMetrics {
        reliability: reliability(editor, &set.edit_cases)?,
        text_generalization: generalization(editor, set, NeighborKind::Text)?,
        visual_generalization: generalization(editor, set, NeighborKind::Visual)?,
        text_locality: locality_of(editor, baseline, set, LocalityKind::Text)?,
        multimodal_locality: locality_of(editor, baseline, set, LocalityKind::Multimodal)?,
    })
}

/// `a[(t, i)]` is the accuracy on task `i` after training through task `t`;
/// `zero_shot[i]` is the accuracy on task `i` before any training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    #[serde(with = "crate::linalg::serde_mat")]
    pub a: Matrix,
    #[serde(with = "crate::linalg::serde_vec")]
    pub zero_shot: Vector,
}

impl AccuracyMatrix {
    pub fn new(a: Matrix, zero_shot: Vector) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != zero_shot.len() {
            return Err(DscaError::DimensionMismatch {
                context: "accuracy matrix",
                expected: a.nrows(),
                found: zero_shot.len(),
            });
        }
        if a.iter().chain(zero_shot.iter()).any(|x| !(0.0..=1.0).contains(x)) {
            return Err(DscaError::config("accuracies must lie in [0, 1]"));
        }
        Ok(Self { a, zero_shot })
    }

    pub fn tasks(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("after_task");
        for i in 0..t {
            out.push_str(&format!(",task_{}", i + 1));
        }
        out.push('\n');
        out.push_str("zero_shot");
        for i in 0..t {
            out.push_str(&format!(",{}", self.zero_shot[i]));
        }
        out.push('\n');
        for r in 0..t {
            out.push_str(&format!("{}", r + 1));
            for i in 0..t {
                out.push_str(&format!(",{}", self.a[(r, i)]));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub a_t: f64,
}

pub fn cl_metrics(m: &AccuracyMatrix) -> Result<ClMetrics> {
    let t = m.tasks();
    if t < 2 {
        return Err(DscaError::Undefined(format!(
            "backward/forward transfer need at least 2 tasks, have {t}"
        )));
    }
    let a = &m.a;
    let last = t - 1;
    let acc = (0..t).map(|i| a[(last, i)]).sum::<f64>() / t as f64;
    let bwt = (0..last).map(|i| a[(last, i)] - a[(i, i)]).sum::<f64>() / last as f64;
    let fwt = (1..t).map(|i| a[(i - 1, i)] - m.zero_shot[i]).sum::<f64>() / last as f64;
    let a_t = (0..t).map(|i| a[(i, i)]).sum::<f64>() / t as f64;
    Ok(ClMetrics { acc, bwt, fwt, a_t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    /// Bin edges `0, 0.05, …, 1.0`; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total_weights: usize,
    pub fraction_negligible: f64,
    pub mean_active: f64,
}

pub const SPARSITY_BINS: usize = 20;

pub fn sparsity_report(decisions: &[RoutingDecision]) -> SparsityReport {
    let edges: Vec<f64> = (0..=SPARSITY_BINS).map(|i| i as f64 / SPARSITY_BINS as f64).collect();
    let mut counts = vec![0usize; SPARSITY_BINS];
    let mut total = 0usize;
    let mut negligible = 0usize;
    let mut active = 0usize;
    for d in decisions {
        for w in d.dense_weights() {
            let bin = ((w * SPARSITY_BINS as f64).floor() as usize).min(SPARSITY_BINS - 1);
            counts[bin] += 1;
            total += 1;
            if w < ACTIVE_WEIGHT {
                negligible += 1;
            }
            if w > ACTIVE_WEIGHT {
                active += 1;
            }
        }
    }
    SparsityReport {
        edges,
        counts,
        total_weights: total,
        fraction_negligible: if total == 0 { 1.0 } else { negligible as f64 / total as f64 },
        mean_active: if decisions.is_empty() {
            0.0
        } else {
            active as f64 / decisions.len() as f64
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub checkpoint_step: u64,
    pub variant: String,
}
