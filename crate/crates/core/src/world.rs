//! Synthetic stand-in for a frozen vision-language backbone.
//!
//! A [`WorldModel`] holds per-concept visual and text means plus a shared and
//! a per-concept set of variation directions. Samples are drawn as
//! `mean + structured factors + isotropic noise` in each modality and fused by
//! averaging. A frozen linear [`TaskHead`] turns fused vectors into class
//! logits. Nothing here changes after construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DscaError, Result};
use crate::linalg::{
    check_dim, ensure_finite, gaussian_matrix, gaussian_vector, random_orthonormal_rows,
    serde_vec, Matrix, Vector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_concepts: usize,
    /// Concepts `0..num_new` supply edit samples; the rest supply replay and
    /// unrelated samples.
    pub num_new: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_f: usize,
    pub num_classes: usize,
    /// Root-mean-square norm of the per-modality sample noise.
    pub noise_scale: f64,
    /// Per-component standard deviation of the concept means.
    pub mean_scale: f64,
    /// Fraction of each concept mean's energy along a direction common to
    /// all concepts (per modality). 0 gives isotropic, nearly orthogonal means.
    pub mean_shared: f64,
    /// Like `mean_shared`, applied on top to the edited concepts only
    /// (a family of related concepts).
    pub new_shared: f64,
    pub shared_factors: usize,
    pub concept_factors: usize,
    /// Fraction of the noise energy carried by the structured factors.
    pub factor_fraction: f64,
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_concepts: 16,
            num_new: 4,
            d_v: 64,
            d_t: 64,
            d_f: 64,
            num_classes: 8,
            noise_scale: 1.0,
            mean_scale: 1.0,
            mean_shared: 0.0,
            new_shared: 0.0,
            shared_factors: 4,
            concept_factors: 4,
            factor_fraction: 0.6,
            head_scale: 2.0,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v != self.d_f || self.d_t != self.d_f {
            return Err(DscaError::config(format!(
                "world dimensions must agree (d_v={}, d_t={}, d_f={})",
                self.d_v, self.d_t, self.d_f
            )));
        }
        if self.d_f == 0 {
            return Err(DscaError::config("d_f must be positive"));
        }
        if self.num_concepts == 0 {
            return Err(DscaError::config("num_concepts must be positive"));
        }
        if self.num_new > self.num_concepts {
            return Err(DscaError::config("num_new exceeds num_concepts"));
        }
        if self.num_classes < 2 {
            return Err(DscaError::config("num_classes must be at least 2"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(DscaError::config("noise_scale must be finite and nonnegative"));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(DscaError::config("mean_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.mean_shared) || !(0.0..1.0).contains(&self.new_shared) {
            return Err(DscaError::config("mean_shared and new_shared must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.factor_fraction) {
            return Err(DscaError::config("factor_fraction must lie in [0, 1]"));
        }
        if self.shared_factors + self.concept_factors > self.d_f {
            return Err(DscaError::config("more variation factors than dimensions"));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return Err(DscaError::config("head_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Edit,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(with = "serde_vec")]
    pub visual: Vector,
    #[serde(with = "serde_vec")]
    pub text: Vector,
    #[serde(with = "serde_vec")]
    pub fused: Vector,
    pub ground_concept: usize,
    pub target_class: usize,
    pub split: Split,
}

impl Sample {
    pub fn new(
        visual: Vector,
        text: Vector,
        ground_concept: usize,
        target_class: usize,
        split: Split,
    ) -> Result<Self> {
        let fused = fuse(&visual, &text)?;
        Ok(Self {
            visual,
            text,
            fused,
            ground_concept,
            target_class,
            split,
        })
    }
}

/// `(v + t) / 2`.
pub fn fuse(v: &Vector, t: &Vector) -> Result<Vector> {
    check_dim("fuse", v.len(), t.len())?;
    Ok((v + t) * 0.5)
}

/// The un-intervened fused vector. The backbone is frozen, so this is the
/// sample's own fused vector.
pub fn teacher_fused(sample: &Sample) -> Vector {
    sample.fused.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    #[serde(with = "crate::linalg::serde_mat")]
    weights: Matrix,
}

impl TaskHead {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, h: &Vector) -> Result<Vector> {
        check_dim("head_logits", self.weights.ncols(), h.len())?;
        Ok(&self.weights * h)
    }

    /// Index of the largest logit; ties go to the lowest class.
    pub fn predict(&self, h: &Vector) -> Result<usize> {
        let z = self.logits(h)?;
        Ok(argmax(z.as_slice()))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    config: WorldConfig,
    #[serde(with = "crate::linalg::serde_vecs")]
    concept_means_v: Vec<Vector>,
    #[serde(with = "crate::linalg::serde_vecs")]
    concept_means_t: Vec<Vector>,
    #[serde(with = "crate::linalg::serde_mat")]
    shared_directions: Matrix,
    concept_directions: Vec<SerdeMatrix>,
    factor_weights_shared: Vec<f64>,
    factor_weights_concept: Vec<f64>,
    #[serde(with = "serde_vec")]
    blank_visual: Vector,
    head: TaskHead,
    original_class: Vec<usize>,
    edit_target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
struct SerdeMatrix(#[serde(with = "crate::linalg::serde_mat")] Matrix);

fn factor_weights(n: usize) -> Vec<f64> {
    // Geometric decay keeps the principal directions well separated.
    let raw: Vec<f64> = (0..n).map(|a| 0.85f64.powi(a as i32)).collect();
    let norm = raw.iter().map(|w| w * w).sum::<f64>().sqrt();
    raw.into_iter().map(|w| w / norm).collect()
}

impl WorldModel {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_f;
        let k = config.num_concepts;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut means_v: Vec<Vector> = (0..k)
            .map(|_| gaussian_vector(&mut rng, d, config.mean_scale))
            .collect();
        let mut means_t: Vec<Vector> = (0..k)
            .map(|_| gaussian_vector(&mut rng, d, config.mean_scale))
            .collect();
        for (share, count) in [(config.mean_shared, k), (config.new_shared, config.num_new)] {
            if share > 0.0 {
                let own = (1.0 - share).sqrt();
                let common = share.sqrt();
                for means in [&mut means_v, &mut means_t] {
                    let c = gaussian_vector(&mut rng, d, config.mean_scale);
                    for m in means.iter_mut().take(count) {
                        *m = &*m * own + &c * common;
                    }
                }
            }
        }

        // Rescale so every pair of means (in each modality and fused) is at
        // least 4 noise scales apart.
        if k >= 2 && config.noise_scale > 0.0 {
            let fused: Vec<Vector> = means_v
                .iter()
                .zip(&means_t)
                .map(|(v, t)| (v + t) * 0.5)
                .collect();
            let min_dist = [&means_v, &means_t, &fused]
                .iter()
                .map(|set| min_pairwise_distance(set))
                .fold(f64::INFINITY, f64::min);
            let required = 4.0 * config.noise_scale;
            if min_dist < required {
                let factor = required / min_dist.max(1e-300);
                for m in means_v.iter_mut().chain(means_t.iter_mut()) {
                    *m *= factor;
                }
            }
        }

        let total_factors = config.shared_factors + config.concept_factors;
        let shared_directions = if config.shared_factors > 0 {
            random_orthonormal_rows(&mut rng, config.shared_factors, d)
        } else {
            Matrix::zeros(0, d)
        };
        let concept_directions = (0..k)
            .map(|_| {
                if config.concept_factors == 0 {
                    return SerdeMatrix(Matrix::zeros(0, d));
                }
                // Concept-specific directions are drawn orthogonal to the
                // shared ones when there is room.
                let raw = random_orthonormal_rows(&mut rng, total_factors, d);
                let mut stacked = Matrix::zeros(total_factors, d);
                stacked
                    .rows_mut(0, config.shared_factors)
                    .copy_from(&shared_directions);
                stacked
                    .rows_mut(config.shared_factors, config.concept_factors)
                    .copy_from(&raw.rows(0, config.concept_factors));
                let q = crate::linalg::orthonormalize_rows(&stacked)
                    .unwrap_or_else(|| stacked.clone());
                SerdeMatrix(q.rows(config.shared_factors, config.concept_factors).into_owned())
            })
            .collect();

        let blank_visual = gaussian_vector(&mut rng, d, config.mean_scale * 0.5);
        let head = TaskHead::new(gaussian_matrix(
            &mut rng,
            config.num_classes,
            d,
            config.head_scale / (d as f64).sqrt(),
        ));

        let original_class: Vec<usize> = means_v
            .iter()
            .zip(&means_t)
            .map(|(v, t)| head.predict(&((v + t) * 0.5)).expect("dims checked"))
            .collect();
        let edit_target = original_class
            .iter()
            .map(|&orig| {
                let offset = rng.random_range(1..config.num_classes);
                (orig + offset) % config.num_classes
            })
            .collect();

        Ok(Self {
            factor_weights_shared: factor_weights(config.shared_factors),
            factor_weights_concept: factor_weights(config.concept_factors),
            config,
            concept_means_v: means_v,
            concept_means_t: means_t,
            shared_directions,
            concept_directions,
            blank_visual,
            head,
            original_class,
            edit_target,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.d_f
    }

    pub fn num_concepts(&self) -> usize {
        self.config.num_concepts
    }

    pub fn head(&self) -> &TaskHead {
        &self.head
    }

    pub fn mean_visual(&self, concept: usize) -> &Vector {
        &self.concept_means_v[concept]
    }

    pub fn mean_text(&self, concept: usize) -> &Vector {
        &self.concept_means_t[concept]
    }

    pub fn mean_fused(&self, concept: usize) -> Vector {
        (&self.concept_means_v[concept] + &self.concept_means_t[concept]) * 0.5
    }

    pub fn shared_directions(&self) -> &Matrix {
        &self.shared_directions
    }

    pub fn concept_directions(&self, concept: usize) -> &Matrix {
        &self.concept_directions[concept].0
    }

    pub fn blank_visual(&self) -> &Vector {
        &self.blank_visual
    }

    pub fn original_class(&self, concept: usize) -> usize {
        self.original_class[concept]
    }

    pub fn edit_target(&self, concept: usize) -> usize {
        self.edit_target[concept]
    }

    pub fn new_concepts(&self) -> std::ops::Range<usize> {
        0..self.config.num_new
    }

    pub fn old_concepts(&self) -> std::ops::Range<usize> {
        self.config.num_new..self.config.num_concepts
    }

    /// Stable identifier of this world, used to reject cross-world comparisons.
    pub fn fingerprint(&self) -> u64 {
        let text = serde_json::to_string(&self.config).expect("config serialises");
        fnv1a(text.as_bytes())
    }

    fn noise<R: Rng + ?Sized>(&self, concept: usize, rng: &mut R) -> Vector {
        let d = self.dim();
        let cfg = &self.config;
        let mut n = Vector::zeros(d);
        if cfg.noise_scale == 0.0 {
            return n;
        }
        let structured = cfg.factor_fraction;
        let groups = usize::from(cfg.shared_factors > 0) + usize::from(cfg.concept_factors > 0);
        let per_group = if groups > 0 { structured / groups as f64 } else { 0.0 };
        let iso = if groups > 0 { 1.0 - structured } else { 1.0 };

        for (a, w) in self.factor_weights_shared.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            n.axpy(z * w * per_group.sqrt(), &self.shared_directions.row(a).transpose(), 1.0);
        }
        let own = &self.concept_directions[concept].0;
        for (a, w) in self.factor_weights_concept.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            n.axpy(z * w * per_group.sqrt(), &own.row(a).transpose(), 1.0);
        }
        n += gaussian_vector(rng, d, (iso / d as f64).sqrt());
        n * cfg.noise_scale
    }

    /// Draws one sample of `concept`; the target is the edit target for new
    /// concepts in the edit split and the original class otherwise.
    pub fn draw<R: Rng + ?Sized>(&self, concept: usize, split: Split, rng: &mut R) -> Result<Sample> {
        if concept >= self.num_concepts() {
            return Err(DscaError::UnknownConcept(concept));
        }
        let visual = &self.concept_means_v[concept] + self.noise(concept, rng);
        let text = &self.concept_means_t[concept] + self.noise(concept, rng);
        let target = match split {
            Split::Edit => self.edit_target[concept],
            Split::Replay => self.original_class[concept],
        };
        Sample::new(visual, text, concept, target, split)
    }

    /// Text-only variant of a sample: the visual channel is the fixed blank
    /// visual vector.
    pub fn text_only(&self, sample: &Sample) -> Result<Sample> {
        Sample::new(
            self.blank_visual.clone(),
            sample.text.clone(),
            sample.ground_concept,
            sample.target_class,
            sample.split,
        )
    }

    /// Same sample with Gaussian noise of RMS norm `magnitude` on the text.
    pub fn perturb_text<R: Rng + ?Sized>(&self, sample: &Sample, magnitude: f64, rng: &mut R) -> Result<Sample> {
        let d = self.dim();
        let text = &sample.text + gaussian_vector(rng, d, magnitude / (d as f64).sqrt());
        Sample::new(sample.visual.clone(), text, sample.ground_concept, sample.target_class, sample.split)
    }

    pub fn perturb_visual<R: Rng + ?Sized>(&self, sample: &Sample, magnitude: f64, rng: &mut R) -> Result<Sample> {
        let d = self.dim();
        let visual = &sample.visual + gaussian_vector(rng, d, magnitude / (d as f64).sqrt());
        Sample::new(visual, sample.text.clone(), sample.ground_concept, sample.target_class, sample.split)
    }
}

fn min_pairwise_distance(set: &[Vector]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            best = best.min((&set[i] - &set[j]).norm());
        }
    }
    best
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Generates `n_edit` edit samples followed by `n_replay` replay samples.
///
/// Edit samples walk the new concepts in contiguous blocks (concept 0 first),
/// which is the sequential-editing order. Replay samples are drawn uniformly
/// from the old concepts.
pub fn generate_stream(world: &WorldModel, n_edit: usize, n_replay: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let new = world.new_concepts();
    let old = world.old_concepts();
    if n_edit > 0 && new.is_empty() {
        return Err(DscaError::config("edit samples requested but the world has no new concepts"));
    }
    if n_replay > 0 && old.is_empty() {
        return Err(DscaError::config("replay samples requested but the world has no old concepts"));
    }
    let mut out = Vec::with_capacity(n_edit + n_replay);
    let blocks = new.len().max(1);
    for i in 0..n_edit {
        // Block b covers edits [b*n/blocks, (b+1)*n/blocks).
        let concept = new.start + (i * blocks) / n_edit.max(1);
        out.push(world.draw(concept, Split::Edit, &mut rng)?);
    }
    for _ in 0..n_replay {
        let concept = rng.random_range(old.clone());
        out.push(world.draw(concept, Split::Replay, &mut rng)?);
    }
    for s in &out {
        ensure_finite(&s.fused, "generated sample")?;
    }
    Ok(out)
}

pub fn write_jsonl<W: std::io::Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
