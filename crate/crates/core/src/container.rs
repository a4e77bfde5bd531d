//! Binary container shared by zoo checkpoints and autoencoder weights:
//! `"WZOO"`, version `u32`, metadata length `u64`, UTF-8 JSON metadata,
//! then a raw `f32` payload. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, WslError};

pub const MAGIC: &[u8; 4] = b"WZOO";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<M: Serialize>(meta: &M, payload: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<f32>)> {
    let bad = |m: String| WslError::Format(m);
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a WZOO container".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported container version {version}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < meta_len || (body.len() - meta_len) % 4 != 0 {
        return Err(bad(format!("container body of {} bytes inconsistent with metadata length {meta_len}", body.len())));
    }
    let meta = serde_json::from_slice(&body[..meta_len])?;
    let payload = body[meta_len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((meta, payload))
}

pub fn write<M: Serialize>(path: &Path, meta: &M, payload: &[f32]) -> Result<()> {
    crate::io::write_atomic(path, &encode(meta, payload)?)
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<f32>)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| WslError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Meta {
        kind: String,
        epoch: u32,
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&Meta { kind: "ZOO".into(), epoch: 3 }, &[1.0, -2.5]).unwrap();
        assert_eq!(&bytes[..4], b"WZOO");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + meta_len], br#"{"kind":"ZOO","epoch":3}"#);
        assert_eq!(&bytes[16 + meta_len..16 + meta_len + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(decode::<Meta>(b"NOPE").is_err());
        let mut bytes = encode(&Meta { kind: "x".into(), epoch: 0 }, &[1.0]).unwrap();
        bytes.pop();
        assert!(decode::<Meta>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn payload_roundtrips_bit_exactly(payload in proptest::collection::vec(proptest::num::f32::ANY, 0..64), epoch in 0u32..100) {
            let meta = Meta { kind: "ZOO".into(), epoch };
            let (m, p): (Meta, Vec<f32>) = decode(&encode(&meta, &payload).unwrap()).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
