//! Engine checkpoints.
//!
//! A checkpoint is a directory:
//!
//! - `engine.json`: engine config, world config and fingerprint, step,
//!   generator position, audit counters
//! - `concepts.json`: prototypes, statistics and flags (buffers excluded)
//! - `bases.bin`, `dsams.bin`: `u64` little-endian header length, a JSON
//!   header, then the float64 little-endian payload described by it
//!
//! The task head is rebuilt from the stored world config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dsam::{DsamGrads, DsamParams, Tensor};
use crate::engine::{Engine, EngineConfig, EngineParts, MutationAudit, RngState};
use crate::error::{DscaError, Result};
use crate::linalg::{Matrix, Vector};
use crate::partition::ConceptSet;
use crate::subspace::SubspaceBasis;
use crate::world::{WorldConfig, WorldModel};

const FORMAT_VERSION: u32 = 2;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineMeta {
    format_version: u32,
    engine: EngineConfig,
    world: WorldConfig,
    world_fingerprint: u64,
    step: u64,
    rng: RngState,
    audit: MutationAudit,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisHeader {
    concept_id: usize,
    rank: usize,
    dim: usize,
    version: u64,
    n_seen: usize,
    singular_values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DsamHeader {
    concept_id: usize,
    rank: usize,
    dim: usize,
    bottleneck: usize,
    basis_residual: bool,
    has_velocity: bool,
}

fn push_matrix(out: &mut Vec<f64>, m: &Matrix) {
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
}

struct Reader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(DscaError::Checkpoint("payload shorter than its header describes".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_row_slice(rows, cols, self.take(rows * cols)?))
    }

    fn vector(&mut self, n: usize) -> Result<Vector> {
        Ok(Vector::from_column_slice(self.take(n)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(DscaError::Checkpoint("trailing payload data".into()));
        }
        Ok(())
    }
}

fn write_blob<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len() * 8);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for x in payload {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let corrupt = |m: &str| DscaError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(corrupt("missing header length"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
    let rest = &bytes[8..];
    if len > rest.len() {
        return Err(corrupt("header length exceeds file size"));
    }
    let header: H = serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let body = &rest[len..];
    if body.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of float64 values"));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Ok((header, payload))
}

pub fn save_checkpoint(engine: &Engine, world: &WorldModel, dir: &Path) -> Result<()> {
    if engine.world_fingerprint() != world.fingerprint() {
        return Err(DscaError::WorldMismatch("engine was built for a different world".into()));
    }
    fs::create_dir_all(dir)?;
    let parts = engine.to_parts();
    let meta = EngineMeta {
        format_version: FORMAT_VERSION,
        engine: parts.config.clone(),
        world: world.config().clone(),
        world_fingerprint: parts.world_fingerprint,
        step: parts.step,
        rng: parts.rng.clone(),
        audit: parts.audit,
    };
    fs::write(dir.join("engine.json"), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(dir.join("concepts.json"), serde_json::to_vec_pretty(&parts.concepts)?)?;

    let mut headers = Vec::new();
    let mut payload = Vec::new();
    for b in parts.bases.values() {
        headers.push(BasisHeader {
            concept_id: b.concept_id,
            rank: b.rank(),
            dim: b.dim(),
            version: b.version(),
            n_seen: b.n_seen(),
            singular_values: b.singular_values().to_vec(),
        });
        push_matrix(&mut payload, b.rows());
        push_matrix(&mut payload, b.components());
        payload.extend(b.mean().iter());
    }
    write_blob(&dir.join("bases.bin"), &headers, &payload)?;

    let mut headers = Vec::new();
    let mut payload = Vec::new();
    for p in parts.dsams.values() {
        let vel = parts.velocity.get(&p.concept_id);
        headers.push(DsamHeader {
            concept_id: p.concept_id,
            rank: p.rank(),
            dim: p.dim(),
            bottleneck: p.bottleneck(),
            basis_residual: p.basis_residual,
            has_velocity: vel.is_some(),
        });
        push_matrix(&mut payload, &p.w);
        payload.extend(p.b.iter());
        push_matrix(&mut payload, &p.gate_u);
        push_matrix(&mut payload, &p.gate_v);
        payload.extend(p.gate_b.iter());
        if let Some(v) = vel {
            push_matrix(&mut payload, &v.w);
            payload.extend(v.b.iter());
            push_matrix(&mut payload, &v.gate_u);
            push_matrix(&mut payload, &v.gate_v);
            payload.extend(v.gate_b.iter());
        }
    }
    write_blob(&dir.join("dsams.bin"), &headers, &payload)?;
    Ok(())
}

/// Loads a checkpoint and rebuilds its world.
pub fn load_checkpoint(dir: &Path) -> Result<(Engine, WorldModel)> {
    let meta_bytes = fs::read(dir.join("engine.json"))?;
    let meta: EngineMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| DscaError::Checkpoint(format!("engine.json: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DscaError::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let world = WorldModel::new(meta.world.clone())?;
    if world.fingerprint() != meta.world_fingerprint {
        return Err(DscaError::WorldMismatch("stored world config does not match its fingerprint".into()));
    }
    let concepts: ConceptSet = serde_json::from_slice(&fs::read(dir.join("concepts.json"))?)
        .map_err(|e| DscaError::Checkpoint(format!("concepts.json: {e}")))?;

    let (headers, payload): (Vec<BasisHeader>, Vec<f64>) = read_blob(&dir.join("bases.bin"))?;
    let mut reader = Reader { data: &payload, pos: 0 };
    let mut bases = BTreeMap::new();
    for h in headers {
        let rows = reader.matrix(h.rank, h.dim)?;
        let components = reader.matrix(h.rank, h.dim)?;
        let mean = reader.vector(h.dim)?;
        let b = SubspaceBasis::from_parts(h.concept_id, rows, components, mean, h.singular_values, h.n_seen, h.version)?;
        bases.insert(h.concept_id, b);
    }
    reader.finish()?;

    let (headers, payload): (Vec<DsamHeader>, Vec<f64>) = read_blob(&dir.join("dsams.bin"))?;
    let mut reader = Reader { data: &payload, pos: 0 };
    let mut dsams = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for h in headers {
        let (r, d, bn) = (h.rank, h.dim, h.bottleneck);
        let params = DsamParams {
            concept_id: h.concept_id,
            w: reader.matrix(r, d)?,
            b: reader.vector(r)?,
            gate_u: reader.matrix(d, bn)?,
            gate_v: reader.matrix(bn, d)?,
            gate_b: reader.vector(d)?,
            basis_residual: h.basis_residual,
        };
        if h.has_velocity {
            let mut v = DsamGrads::zeros_like(&params);
            v.w = reader.matrix(r, d)?;
            v.b = reader.vector(r)?;
            v.gate_u = reader.matrix(d, bn)?;
            v.gate_v = reader.matrix(bn, d)?;
            v.gate_b = reader.vector(d)?;
            debug_assert_eq!(v.tensor(Tensor::W).len(), r * d);
            velocity.insert(h.concept_id, v);
        }
        dsams.insert(h.concept_id, params);
    }
    reader.finish()?;

    let engine = Engine::from_parts(EngineParts {
        config: meta.engine,
        world_fingerprint: meta.world_fingerprint,
        head: world.head().clone(),
        concepts,
        bases,
        dsams,
        velocity,
        step: meta.step,
        rng: meta.rng,
        audit: meta.audit,
    })?;
    Ok((engine, world))
}
