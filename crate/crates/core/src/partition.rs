//! Online partitioning of fused space into concept clusters.
//!
//! Each incoming fused vector is matched to its nearest fused prototype. It
//! opens a new concept when its distance exceeds the cluster's dynamic
//! threshold `μ + α·σ`; otherwise the prototypes and distance statistics
//! drift toward it by an exponential moving average and the vector is
//! buffered for later PCA.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DscaError, Result};
use crate::linalg::{check_dim, ensure_finite, serde_vec, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionerConfig {
    pub alpha: f64,
    pub ema_rate: f64,
    pub buffer_capacity: usize,
    /// A fresh cluster's σ is this fraction of the median inter-prototype
    /// distance at spawn time.
    pub init_std_factor: f64,
    /// σ of the very first cluster, when no distances exist yet.
    pub first_init_std: f64,
}

impl Default for PartitionerConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            ema_rate: 0.05,
            buffer_capacity: 512,
            init_std_factor: 0.25,
            first_init_std: 1.0,
        }
    }
}

impl PartitionerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DscaError::config("alpha must be positive"));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(DscaError::config("ema_rate must lie in (0, 1)"));
        }
        if self.buffer_capacity == 0 {
            return Err(DscaError::config("buffer_capacity must be positive"));
        }
        if !(self.init_std_factor > 0.0 && self.first_init_std > 0.0) {
            return Err(DscaError::config("fresh-cluster spread must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: usize,
    #[serde(with = "serde_vec")]
    pub proto_fused: Vector,
    #[serde(with = "serde_vec")]
    pub proto_visual: Vector,
    pub dist_mean: f64,
    pub dist_std: f64,
    pub assign_count: usize,
    #[serde(skip)]
    pub buffer: VecDeque<Vector>,
    pub dsam_active: bool,
}

impl Concept {
    pub fn new(id: usize, proto_fused: Vector, proto_visual: Vector, dist_mean: f64, dist_std: f64) -> Self {
        Self {
            id,
            proto_fused,
            proto_visual,
            dist_mean,
            dist_std,
            assign_count: 1,
            buffer: VecDeque::new(),
            dsam_active: false,
        }
    }

    pub fn threshold(&self, alpha: f64) -> f64 {
        self.dist_mean + alpha * self.dist_std
    }

    fn push_buffer(&mut self, h: Vector, capacity: usize) {
        if self.buffer.len() == capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(h);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub id: usize,
    pub spawned: bool,
}

/// `(1 - rate)·old + rate·new`.
pub fn ema_update(old: &Vector, new: &Vector, rate: f64) -> Result<Vector> {
    check_dim("ema_update", old.len(), new.len())?;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(DscaError::config("ema rate must lie in (0, 1)"));
    }
    Ok(old * (1.0 - rate) + new * rate)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    concepts: Vec<Concept>,
    frozen: bool,
    /// Number of prototype/statistics mutations ever applied.
    #[serde(default)]
    prototype_updates: u64,
}

impl ConceptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_concepts(concepts: Vec<Concept>) -> Self {
        Self {
            concepts,
            frozen: false,
            prototype_updates: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn prototype_updates(&self) -> u64 {
        self.prototype_updates
    }

    pub fn iter(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter()
    }

    pub fn get(&self, id: usize) -> Option<&Concept> {
        self.concepts.get(id)
    }

    /// Mutable access for the subspace lifecycle (buffers and the active
    /// flag). Prototypes must only change through [`Self::assign_or_spawn`].
    pub(crate) fn get_mut(&mut self, id: usize) -> Option<&mut Concept> {
        self.concepts.get_mut(id)
    }

    /// Nearest fused prototype by Euclidean distance; ties go to the lowest id.
    pub fn nearest(&self, h: &Vector) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for c in &self.concepts {
            check_dim("nearest", c.proto_fused.len(), h.len())?;
            let d = (h - &c.proto_fused).norm();
            match best {
                Some((_, bd)) if d >= bd => {}
                _ => best = Some((c.id, d)),
            }
        }
        best.ok_or(DscaError::EmptyConceptSet)
    }

    fn median_prototype_distance(&self, extra: &Vector) -> Option<f64> {
        let mut protos: Vec<&Vector> = self.concepts.iter().map(|c| &c.proto_fused).collect();
        protos.push(extra);
        let mut dists = Vec::new();
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                dists.push((protos[i] - protos[j]).norm());
            }
        }
        if dists.is_empty() {
            return None;
        }
        dists.sort_by(|a, b| a.total_cmp(b));
        let n = dists.len();
        Some(if n % 2 == 1 {
            dists[n / 2]
        } else {
            0.5 * (dists[n / 2 - 1] + dists[n / 2])
        })
    }

    pub fn assign_or_spawn(&mut self, h_f: &Vector, h_v: &Vector, cfg: &PartitionerConfig) -> Result<Assignment> {
        if self.frozen {
            return Err(DscaError::Frozen);
        }
        ensure_finite(h_f, "fused input")?;
        ensure_finite(h_v, "visual input")?;

        let nearest = if self.concepts.is_empty() {
            None
        } else {
            Some(self.nearest(h_f)?)
        };
        let novel = match nearest {
            None => true,
            Some((j, dist)) => dist > self.concepts[j].threshold(cfg.alpha),
        };
        self.prototype_updates += 1;

        if novel {
            let id = self.concepts.len();
            let init_std = match self.median_prototype_distance(h_f) {
                Some(median) => cfg.init_std_factor * median,
                None => cfg.first_init_std,
            };
            let mut c = Concept::new(id, h_f.clone(), h_v.clone(), 0.0, init_std);
            c.push_buffer(h_f.clone(), cfg.buffer_capacity);
            self.concepts.push(c);
            return Ok(Assignment { id, spawned: true });
        }

        let (j, dist) = nearest.expect("non-novel implies a nearest concept");
        let rate = cfg.ema_rate;
        let c = &mut self.concepts[j];
        // The novelty test used the pre-update statistics.
        c.dist_mean = (1.0 - rate) * c.dist_mean + rate * dist;
        let dev = dist - c.dist_mean;
        c.dist_std = ((1.0 - rate) * c.dist_std * c.dist_std + rate * dev * dev).sqrt();
        c.proto_fused = ema_update(&c.proto_fused, h_f, rate)?;
        c.proto_visual = ema_update(&c.proto_visual, h_v, rate)?;
        c.assign_count += 1;
        c.push_buffer(h_f.clone(), cfg.buffer_capacity);
        Ok(Assignment { id: j, spawned: false })
    }

    /// Immutable routing view: identical prototypes and flags, no buffers,
    /// and every later assignment is rejected.
    pub fn freeze(&self) -> ConceptSet {
        let concepts = self
            .concepts
            .iter()
            .map(|c| Concept {
                buffer: VecDeque::new(),
                ..c.clone()
            })
            .collect();
        ConceptSet {
            concepts,
            frozen: true,
            prototype_updates: self.prototype_updates,
        }
    }
}
