//! Binary model container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic       8 bytes  "GAQPMODL"
//! version     u32
//! header_len  u32
//! header      JSON: schema, stats, n_total, hidden_sizes, degree_counts, layer shapes
//! per layer   weights as f32, row-major; hidden-to-hidden layers store only
//!             positions allowed by their fixed degree mask
//!             biases as f32
//! checksum    u64 FNV-1a over every preceding byte
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::masks::{hidden_mask, BlockIndexing};
use super::{DensityModel, ModelError};
use crate::dataset::{AttributeSchema, ContinuousStats};
use crate::nn::{Activation, MaskedLayer, Network};

pub const MAGIC: &[u8; 8] = b"GAQPMODL";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: AttributeSchema,
    stats: Vec<Option<ContinuousStats>>,
    n_total: u64,
    hidden_sizes: Vec<usize>,
    /// Neuron count per degree 1..=max_degree, per hidden layer.
    degree_counts: Vec<Vec<usize>>,
    layer_shapes: Vec<(usize, usize)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn degree_counts(indexing: &BlockIndexing) -> Vec<Vec<usize>> {
    indexing
        .hidden_degrees
        .iter()
        .map(|layer| {
            (1..=indexing.max_degree)
                .map(|d| layer.iter().filter(|&&x| x == d).count())
                .collect()
        })
        .collect()
}

/// Whether layer `k` is stored sparsely (hidden to hidden).
fn sparse_mask(indexing: &BlockIndexing, k: usize) -> Option<Array2<f64>> {
    if k == 0 || k >= indexing.hidden_degrees.len() {
        return None;
    }
    Some(hidden_mask(
        &indexing.hidden_degrees[k - 1],
        &indexing.hidden_degrees[k],
        indexing.block_count(),
    ))
}

pub fn serialize(model: &DensityModel) -> Result<Vec<u8>, ModelError> {
    let header = Header {
        schema: model.schema.clone(),
        stats: model.stats.clone(),
        n_total: model.n_total,
        hidden_sizes: model.hidden_sizes.clone(),
        degree_counts: degree_counts(&model.indexing),
        layer_shapes: model.network.layers.iter().map(|l| l.weights.dim()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Argument(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.parameter_count() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (k, layer) in model.network.layers.iter().enumerate() {
        let sparse = sparse_mask(&model.indexing, k);
        for (idx, &w) in layer.weights.indexed_iter() {
            if sparse.as_ref().is_none_or(|m| m[idx] == 1.0) {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
        for &b in &layer.bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f64, ModelError> {
        let offset = self.pos;
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as f64;
        if !v.is_finite() {
            return Err(ModelError::Format {
                offset,
                message: format!("non-finite {what}"),
            });
        }
        Ok(v)
    }
}

pub fn deserialize(bytes: &[u8]) -> Result<DensityModel, ModelError> {
    let fmt = |offset: usize, message: String| ModelError::Format { offset, message };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(fmt(0, "bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(fmt(8, format!("unsupported version {version}")));
    }
    if bytes.len() < 24 {
        return Err(fmt(bytes.len(), "truncated".into()));
    }
    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    if fnv1a(&bytes[..body_end]) != stored {
        return Err(fmt(body_end, "checksum mismatch".into()));
    }
    let body = Reader {
        bytes: &bytes[..body_end],
        pos: r.pos,
    };
    let mut r = body;
    let header_len = r.u32("header length")? as usize;
    let header_at = r.pos;
    let header: Header =
        serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| fmt(header_at, format!("header: {e}")))?;
    header.schema.validate().map_err(|e| fmt(header_at, e.to_string()))?;
    let (indexing, _) = BlockIndexing::new(&header.schema, &header.hidden_sizes).map_err(|e| fmt(header_at, e.to_string()))?;
    if degree_counts(&indexing) != header.degree_counts {
        return Err(fmt(header_at, "degree counts do not match the hidden sizes".into()));
    }
    let aux = indexing.block_count();
    let mut expected = Vec::new();
    let mut prev = indexing.input_width;
    for &h in &header.hidden_sizes {
        expected.push((h, prev + aux));
        prev = h;
    }
    expected.push((indexing.output_width, prev + aux));
    if expected != header.layer_shapes {
        return Err(fmt(header_at, "layer shapes do not match the schema".into()));
    }

    let mut layers = Vec::with_capacity(expected.len());
    for (k, &(rows, cols)) in expected.iter().enumerate() {
        let sparse = sparse_mask(&indexing, k);
        let mut weights = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                if sparse.as_ref().is_none_or(|m| m[[i, j]] == 1.0) {
                    weights[[i, j]] = r.f32("weight")?;
                }
            }
        }
        let mut bias = Array1::zeros(rows);
        for b in bias.iter_mut() {
            *b = r.f32("bias")?;
        }
        let activation = if k + 1 == expected.len() {
            Activation::Identity
        } else {
            Activation::Elu
        };
        let mask = sparse.unwrap_or_else(|| Array2::ones((rows, cols)));
        layers.push(MaskedLayer::new(weights, mask, bias, activation)?);
    }
    if r.pos != body_end {
        return Err(fmt(r.pos, format!("{} trailing bytes", body_end - r.pos)));
    }
    let network = Network::new(layers, aux)?;
    Ok(DensityModel {
        schema: header.schema,
        indexing,
        network,
        stats: header.stats,
        n_total: header.n_total,
        hidden_sizes: header.hidden_sizes,
    })
}

pub fn save(model: &DensityModel, path: impl AsRef<Path>) -> Result<usize, ModelError> {
    let bytes = serialize(model)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: impl AsRef<Path>) -> Result<DensityModel, ModelError> {
    deserialize(&std::fs::read(path)?)
}

/// Size in bytes [`serialize`] would produce, without encoding weights.
pub fn serialized_size(model: &DensityModel) -> Result<usize, ModelError> {
    let header = Header {
        schema: model.schema.clone(),
        stats: model.stats.clone(),
        n_total: model.n_total,
        hidden_sizes: model.hidden_sizes.clone(),
        degree_counts: degree_counts(&model.indexing),
        layer_shapes: model.network.layers.iter().map(|l| l.weights.dim()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Argument(e.to_string()))?;
    Ok(16 + json.len() + 4 * model.parameter_count() + 8)
}
