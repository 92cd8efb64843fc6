//! Checkpoint container: named f32 tensors in a flat little-endian file.
//!
//! Layout: magic `UIR1`, tensor count (u64 LE), then per tensor — name
//! length (u64 LE), UTF-8 name, rank (u64 LE), dims (u64 LE each), data
//! (f32 LE, row-major). Values survive a save/load round trip bit-exactly.
//! The model's own tensors are the parameter groups; the trainer appends
//! optimizer state and the occupancy grid under their own names.

use super::SceneModel;
use crate::grad::{ParamGroup, ParamSet, PARAM_GROUPS};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn flat(name: &str, data: Vec<f32>) -> TensorRecord {
        TensorRecord { name: name.to_string(), dims: vec![data.len() as u64], data }
    }

    pub fn elem_count(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?} (expected \"UIR1\")")]
    BadMagic([u8; 4]),
    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: u64, what: String },
    #[error("checkpoint tensor '{name}' has a non-UTF-8 name or absurd size")]
    Malformed { name: String },
    #[error("checkpoint is missing tensor '{name}'")]
    Missing { name: String },
    #[error("checkpoint tensor '{name}' has shape {got:?}, model expects {want:?}")]
    ShapeMismatch { name: String, want: Vec<u64>, got: Vec<u64> },
}

const MAGIC: [u8; 4] = *b"UIR1";

pub fn write_records(path: &Path, records: &[TensorRecord]) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        debug_assert_eq!(r.elem_count(), r.data.len(), "tensor {} dims vs data", r.name);
        buf.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.extend_from_slice(&(r.dims.len() as u64).to_le_bytes());
        for d in &r.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::io::atomic_write(path, &buf)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TensorRecord>, CheckpointError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>, CheckpointError> {
        if *off + n > bytes.len() {
            return Err(CheckpointError::Truncated { offset: *off as u64, what: what.to_string() });
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };
    let magic = &bytes[take(&mut off, 4, "magic")?];
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let read_u64 = |off: &mut usize, what: &str| -> Result<u64, CheckpointError> {
        let r = take(off, 8, what)?;
        Ok(u64::from_le_bytes(bytes[r].try_into().unwrap()))
    };
    let count = read_u64(&mut off, "tensor count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let name_len = read_u64(&mut off, &format!("tensor {i} name length"))? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Malformed { name: format!("tensor {i}") });
        }
        let name_bytes = &bytes[take(&mut off, name_len, &format!("tensor {i} name"))?];
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed { name: format!("tensor {i}") })?
            .to_string();
        let rank = read_u64(&mut off, &format!("'{name}' rank"))? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed { name });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut off, &format!("'{name}' dims"))?);
        }
        let elems = dims.iter().try_fold(1u64, |a, d| a.checked_mul(*d)).unwrap_or(u64::MAX);
        if elems > (1 << 32) {
            return Err(CheckpointError::Malformed { name });
        }
        let data_range = take(&mut off, elems as usize * 4, &format!("'{name}' data"))?;
        let data = bytes[data_range]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, data });
    }
    Ok(records)
}

/// The model's parameter groups as named tensors (grids rank-3, heads and
/// lights flat).
pub fn model_records(model: &SceneModel) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    for g in PARAM_GROUPS {
        let data = model.params.group(g).to_vec();
        let dims = group_dims(model, g);
        out.push(TensorRecord { name: g.name().to_string(), dims, data });
    }
    out
}

fn group_dims(model: &SceneModel, g: ParamGroup) -> Vec<u64> {
    match g {
        ParamGroup::GeoGrid => {
            let c = model.cfg.geo_grid;
            vec![c.levels as u64, c.table_size as u64, c.features as u64]
        }
        ParamGroup::AppGrid => {
            let c = model.cfg.app_grid;
            vec![c.levels as u64, c.table_size as u64, c.features as u64]
        }
        _ => vec![model.params.group(g).len() as u64],
    }
}

/// Rebuild a model from records, validating every group's shape against the
/// config. Extra tensors (optimizer state, occupancy) are ignored here.
pub fn model_from_records(
    cfg: &super::ModelConfig,
    records: &[TensorRecord],
) -> Result<SceneModel, CheckpointError> {
    let mut params = ParamSet::with_sizes(cfg.group_sizes());
    let probe = SceneModel { cfg: cfg.clone(), params: params.clone() };
    for g in PARAM_GROUPS {
        let rec = records
            .iter()
            .find(|r| r.name == g.name())
            .ok_or_else(|| CheckpointError::Missing { name: g.name().to_string() })?;
        let want = group_dims(&probe, g);
        if rec.dims != want || rec.data.len() != params.group(g).len() {
            return Err(CheckpointError::ShapeMismatch {
                name: g.name().to_string(),
                want,
                got: rec.dims.clone(),
            });
        }
        params.group_mut(g).copy_from_slice(&rec.data);
    }
    Ok(SceneModel { cfg: cfg.clone(), params })
}
