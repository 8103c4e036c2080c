//! Binary parameter container.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8
//! JSON header, then the payload of little-endian `f32` values. Each
//! header group entry records its name, shape and byte offset into the
//! payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Params, Scalar, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "ndbench-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: Value,
    #[serde(default)]
    pub meta: Value,
    pub groups: Vec<GroupEntry>,
}

pub fn write_container<F: Scalar, W: Write>(
    mut w: W,
    config: Value,
    meta: Value,
    params: &Params<F>,
) -> Result<(), TensorError> {
    let mut offset = 0u64;
    let groups = params
        .groups()
        .iter()
        .map(|g| {
            let e = GroupEntry {
                name: g.name.clone(),
                shape: g.value.shape().to_vec(),
                offset,
            };
            offset += 4 * g.value.len() as u64;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config,
        meta,
        groups,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for g in params.groups() {
        for &x in g.value.data() {
            payload.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_container<F: Scalar, R: Read>(mut r: R) -> Result<(CheckpointHeader, Params<F>), TensorError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > (1 << 30) {
        return Err(TensorError::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {:?}",
            header.format
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut params = Params::new();
    for g in &header.groups {
        let n: usize = g.shape.iter().product();
        let start = g.offset as usize;
        let end = start + 4 * n;
        let bytes = payload.get(start..end).ok_or_else(|| {
            TensorError::Checkpoint(format!("group {} extends past payload", g.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| F::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])).unwrap())
            .collect();
        params.add(g.name.clone(), Tensor::from_vec(&g.shape, data)?);
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_bits() {
        let mut p = Params::<f32>::new();
        p.add("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.1, 3.5e-8, f32::MAX]).unwrap());
        p.add("b", Tensor::from_vec(&[3], vec![0.0, 2.0, -7.25]).unwrap());
        let mut buf = Vec::new();
        write_container(&mut buf, serde_json::json!({"kind": "gru"}), Value::Null, &p).unwrap();
        let (h, q) = read_container::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(h.format, CHECKPOINT_FORMAT);
        assert_eq!(h.groups[1].offset, 16);
        assert_eq!(p, q);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let header = serde_json::to_vec(&serde_json::json!({
            "format": "other", "config": {}, "groups": []
        }))
        .unwrap();
        let mut buf = (header.len() as u64).to_le_bytes().to_vec();
        buf.extend_from_slice(&header);
        assert!(read_container::<f32, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut p = Params::<f32>::new();
        p.add("a", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        write_container(&mut buf, Value::Null, Value::Null, &p).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_container::<f32, _>(buf.as_slice()).is_err());
    }
}
