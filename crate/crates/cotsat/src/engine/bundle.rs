//! On-disk weight bundles: `manifest.json` plus `weights.bin`.
//!
//! The blob holds every tensor of [`ModelWeights::tensors`] in manifest
//! order as little-endian floats of the declared width.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::weights::{Dims, HeadEntry, LaneEntry, ModelWeights};
use super::EngineError;
use crate::compiler::{CompilerConfig, FloatWidth};
use crate::vocab::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype_bits: u32,
    pub vocab: Vocabulary,
    pub dims: Dims,
    pub config: CompilerConfig,
    pub position_lane: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub lane_map: Vec<LaneEntry>,
    pub head_table: Vec<HeadEntry>,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

/// Writes `weights` into directory `dir`, creating it if needed.
pub fn save_bundle(weights: &ModelWeights, dir: &Path) -> Result<(), EngineError> {
    fs::create_dir_all(dir)?;
    let width = weights.config.float_width;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in weights.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape(),
            offset,
        });
        offset += t.len();
        for x in t.values() {
            match width {
                FloatWidth::F32 => {
                    let y = x as f32;
                    if y as f64 != x {
                        return Err(EngineError::Bundle(format!(
                            "value {x} is not representable in 32 bits"
                        )));
                    }
                    blob.extend_from_slice(&y.to_le_bytes());
                }
                FloatWidth::F64 => blob.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype_bits: width.bits(),
        vocab: weights.vocab.clone(),
        dims: weights.dims,
        config: weights.config,
        position_lane: weights.position_lane,
        tensors,
        lane_map: weights.lane_map.clone(),
        head_table: weights.head_table.clone(),
        tags: weights.tags.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| EngineError::Bundle(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, EngineError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| EngineError::Bundle(e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(EngineError::Bundle(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Reads a bundle written by [`save_bundle`]; the result compares equal
/// to the saved weights.
pub fn load_bundle(dir: &Path) -> Result<ModelWeights, EngineError> {
    let m = read_manifest(dir)?;
    let width = FloatWidth::from_bits(m.dtype_bits)
        .ok_or_else(|| EngineError::Bundle(format!("unsupported dtype width {}", m.dtype_bits)))?;
    if width != m.config.float_width {
        return Err(EngineError::Bundle("dtype does not match the config".into()));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let elem = (m.dtype_bits / 8) as usize;
    let read = |entry: &TensorEntry| -> Result<Vec<f64>, EngineError> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * elem;
        let end = start + n * elem;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| EngineError::Bundle(format!("tensor {} extends past the blob", entry.name)))?;
        Ok(bytes
            .chunks_exact(elem)
            .map(|c| match width {
                FloatWidth::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                FloatWidth::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect())
    };

    let mut w = ModelWeights::zeros(m.vocab.clone(), m.config, m.dims);
    w.position_lane = m.position_lane;
    w.lane_map = m.lane_map.clone();
    w.head_table = m.head_table.clone();
    w.tags = m.tags.clone();
    let expected: Vec<(String, Vec<usize>)> = w.tensors().iter().map(|(n, t)| (n.clone(), t.shape())).collect();
    if expected.len() != m.tensors.len() {
        return Err(EngineError::Bundle(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            m.tensors.len()
        )));
    }
    let total: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total * elem != blob.len() {
        return Err(EngineError::Bundle(format!(
            "blob has {} bytes, manifest needs {}",
            blob.len(),
            total * elem
        )));
    }
    let mut data = Vec::with_capacity(m.tensors.len());
    for ((name, shape), entry) in expected.iter().zip(&m.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(EngineError::Bundle(format!(
                "unexpected tensor {} {:?}",
                entry.name, entry.shape
            )));
        }
        data.push(read(entry)?);
    }
    let mut it = data.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    let matrix = |target: &mut Array2<f64>, values: Vec<f64>| {
        *target = Array2::from_shape_vec(target.dim(), values).expect("shape checked");
    };
    matrix(&mut w.token_embedding, next());
    for layer in &mut w.layers {
        for head in &mut layer.heads {
            matrix(&mut head.w_q, next());
            matrix(&mut head.w_k, next());
            matrix(&mut head.w_v, next());
        }
        matrix(&mut layer.w_o, next());
        matrix(&mut layer.mlp.w_1, next());
        layer.mlp.b_1 = Array1::from(next());
        matrix(&mut layer.mlp.w_2, next());
        layer.mlp.b_2 = Array1::from(next());
    }
    matrix(&mut w.w_out, next());
    w.b_out = Array1::from(next());
    Ok(w)
}
