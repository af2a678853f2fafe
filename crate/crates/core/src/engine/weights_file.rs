// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary weights file.
//!
//! Layout:
//!
//! ```text
//! [u64 little-endian: header byte length N]
//! [N bytes: UTF-8 JSON header]
//! [blob: little-endian f32 values]
//! ```
//!
//! The header is `{"format", "version", "spec", "tensors"}` where each
//! tensor entry is `{"name", "shape": [rows, cols], "offset", "length"}` with
//! `offset`/`length` in bytes relative to the start of the blob. Tensors are
//! row-major. Expected names: `token_embedding`, `position_embedding`,
//! `unembedding`, and `layers.{l}.heads.{h}.{w_q,w_k,w_v,w_o}`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{LayerWeights, ModelSpec, ModelWeights};
use crate::error::{Error, Result};

/// Value of the header's `format` field.
pub const WEIGHTS_FORMAT: &str = "attn-steer-weights";
/// Header version written and accepted by this build.
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    length: usize,
}

fn tensor_list(w: &ModelWeights) -> Vec<(String, Array2<f64>)> {
    let spec = w.spec();
    let mut out = vec![
        ("token_embedding".to_string(), w.token_embedding().clone()),
        ("position_embedding".to_string(), w.position_embedding().clone()),
    ];
    for l in 0..spec.n_layers {
        for h in 0..spec.n_heads {
            let p = format!("layers.{l}.heads.{h}");
            out.push((format!("{p}.w_q"), w.w_q(l, h).to_owned()));
            out.push((format!("{p}.w_k"), w.w_k(l, h).to_owned()));
            out.push((format!("{p}.w_v"), w.w_v(l, h).to_owned()));
            out.push((format!("{p}.w_o"), w.w_o(l, h).to_owned()));
        }
    }
    out.push(("unembedding".to_string(), w.unembedding().clone()));
    out
}

/// Serializes weights into the binary file format.
pub fn encode_weights(w: &ModelWeights) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in tensor_list(w) {
        let offset = blob.len();
        for v in t.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: [t.nrows(), t.ncols()],
            offset,
            length: blob.len() - offset,
        });
    }
    let header = Header {
        format: WEIGHTS_FORMAT.to_string(),
        version: WEIGHTS_VERSION,
        spec: w.spec().clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses and validates the binary file format.
pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let bad = |m: String| Error::WeightsFormat(m);
    if bytes.len() < 8 {
        return Err(bad("file shorter than the length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let blob_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..blob_start])
        .map_err(|e| bad(format!("header: {e}")))?;
    if header.format != WEIGHTS_FORMAT {
        return Err(bad(format!("unexpected format tag '{}'", header.format)));
    }
    if header.version != WEIGHTS_VERSION {
        return Err(bad(format!(
            "unsupported version {} (expected {WEIGHTS_VERSION})",
            header.version
        )));
    }
    let spec = header.spec;
    spec.validate()?;
    let blob = &bytes[blob_start..];

    let mut table: HashMap<&str, &TensorEntry> = HashMap::new();
    let mut covered = 0usize;
    for t in &header.tensors {
        if table.insert(&t.name, t).is_some() {
            return Err(bad(format!("duplicate tensor '{}'", t.name)));
        }
        covered += t.length;
    }
    if covered != blob.len() {
        return Err(bad(format!(
            "tensor table covers {covered} bytes but blob has {}",
            blob.len()
        )));
    }

    let read = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
        let t = table
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor '{name}'")))?;
        if t.shape != [rows, cols] {
            return Err(Error::ShapeMismatch(format!(
                "{name}: expected [{rows}, {cols}], found {:?}",
                t.shape
            )));
        }
        if t.length != rows * cols * 4 {
            return Err(bad(format!("{name}: length {} does not match shape", t.length)));
        }
        let end = t
            .offset
            .checked_add(t.length)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| bad(format!("{name}: byte range out of bounds")))?;
        let values: Vec<f64> = blob[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} contains a non-finite entry")));
        }
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    };

    let expected = 3 + 4 * spec.n_layers * spec.n_heads;
    if table.len() != expected {
        return Err(bad(format!(
            "expected {expected} tensors, found {}",
            table.len()
        )));
    }
    let d = spec.d_model;
    let token_embedding = read("token_embedding", spec.vocab_size, d)?;
    let position_embedding = read("position_embedding", spec.max_positions, d)?;
    let unembedding = read("unembedding", d, spec.vocab_size)?;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let mut layer = LayerWeights::zeros(&spec);
        for h in 0..spec.n_heads {
            let p = format!("layers.{l}.heads.{h}");
            let cols = h * spec.d_k..(h + 1) * spec.d_k;
            layer
                .w_q
                .slice_mut(s![.., cols.clone()])
                .assign(&read(&format!("{p}.w_q"), d, spec.d_k)?);
            layer
                .w_k
                .slice_mut(s![.., cols.clone()])
                .assign(&read(&format!("{p}.w_k"), d, spec.d_k)?);
            layer
                .w_v
                .slice_mut(s![.., cols.clone()])
                .assign(&read(&format!("{p}.w_v"), d, spec.d_k)?);
            layer
                .w_o
                .slice_mut(s![cols, ..])
                .assign(&read(&format!("{p}.w_o"), spec.d_k, d)?);
        }
        layers.push(layer);
    }
    ModelWeights::from_parts(spec, token_embedding, position_embedding, layers, unembedding)
}

/// Writes `weights` to `path`.
pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(weights)?).map_err(|e| Error::io(path, e))
}

/// Reads and validates a weights file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelWeights {
        let spec = ModelSpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 6,
            d_k: 3,
            vocab_size: 5,
            max_positions: 9,
            max_tokens: 4,
        };
        ModelWeights::random(spec, 11, 2.0).unwrap()
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let w = small();
        let bytes = encode_weights(&w).unwrap();
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(w, back);
        assert_eq!(bytes, encode_weights(&back).unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = encode_weights(&small()).unwrap();
        assert!(decode_weights(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_weights(&bytes[..5]).is_err());
    }

    #[test]
    fn non_finite_entry_is_rejected() {
        let mut bytes = encode_weights(&small()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_weights(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_tampering_is_rejected() {
        let bytes = encode_weights(&small()).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + hlen]).unwrap();
        let tampered = header.replace("\"vocab_size\":5", "\"vocab_size\":4");
        let mut out = (tampered.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[8 + hlen..]);
        assert!(decode_weights(&out).is_err());
    }
}
