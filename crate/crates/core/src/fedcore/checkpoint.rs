//! Flat parameter-vector checkpoints: magic, a length-prefixed JSON layout
//! header, then little-endian f64 values.

use super::model::{ModelSpec, Segment};
use serde::{Deserialize, Serialize};
use std::io;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    layout: Vec<Segment>,
    len: usize,
}

pub fn encode_checkpoint(spec: &ModelSpec, theta: &[f64]) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        model: *spec,
        layout: spec.layout(),
        len: theta.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * theta.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> io::Result<(ModelSpec, Vec<f64>)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.len != header.model.param_count() || header.layout != header.model.layout() {
        return Err(bad("layout does not match model"));
    }
    let values = &bytes[8 + hlen..];
    if values.len() != 8 * header.len {
        return Err(bad("value count does not match header"));
    }
    let theta: Vec<f64> = values
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok((header.model, theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let spec = ModelSpec {
            inputs: 4,
            classes: 3,
            hidden: 2,
        };
        let theta: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.25 - 1.0).collect();
        let bytes = encode_checkpoint(&spec, &theta);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), (spec, theta));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
