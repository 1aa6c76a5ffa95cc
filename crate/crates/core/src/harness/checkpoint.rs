//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "GLUEPK1\0"
//! header_len   u32 LE
//! header       header_len bytes of UTF-8 JSON
//! payload      param_count × f32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GlueError, Result};
use crate::nn::{ArchSpec, ParamVector};

pub const MAGIC: &[u8; 8] = b"GLUEPK1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Free-form tag, e.g. the method that produced a blended prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchSpec,
    param_count: usize,
    dtype: String,
    metadata: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: ParamVector,
    pub meta: CheckpointMeta,
}

/// Serialize to bytes. Parameters are stored as `f32`.
pub fn encode(arch: &ArchSpec, params: &ParamVector, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    arch.validate()?;
    arch.check_params(params)?;
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        arch: arch.clone(),
        param_count: params.len(),
        dtype: "f32".into(),
        metadata: meta.clone(),
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| GlueError::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for &v in params.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(GlueError::Format("bad magic".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(GlueError::Corruption("truncated header length".into()));
    }
    let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < header_len {
        return Err(GlueError::Corruption("truncated header".into()));
    }
    let raw: serde_json::Value = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| GlueError::Format(format!("header is not JSON: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| GlueError::Format("header lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(GlueError::Version(version.min(u32::MAX as u64) as u32));
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| GlueError::Format(format!("malformed header: {e}")))?;
    if header.dtype != "f32" {
        return Err(GlueError::Format(format!("unsupported dtype {}", header.dtype)));
    }
    header
        .arch
        .validate()
        .map_err(|e| GlueError::Format(format!("bad architecture: {e}")))?;
    if header.param_count != header.arch.param_count() {
        return Err(GlueError::Format(format!(
            "header param_count {} but architecture implies {}",
            header.param_count,
            header.arch.param_count()
        )));
    }
    let payload = &rest[header_len..];
    if payload.len() != 4 * header.param_count {
        return Err(GlueError::Corruption(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            4 * header.param_count
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Checkpoint {
        arch: header.arch,
        params: ParamVector::new(values),
        meta: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, arch: &ArchSpec, params: &ParamVector, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(arch, params, meta)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn sample() -> (ArchSpec, ParamVector) {
        let arch = ArchSpec::mlp(&[2, 3, 2], Activation::Relu).unwrap();
        let p = ParamVector::new((0..arch.param_count()).map(|i| i as f64 * 0.25 - 1.0).collect());
        (arch, p)
    }

    #[test]
    fn layout_starts_with_magic_and_length() {
        let (arch, p) = sample();
        let bytes = encode(&arch, &p, &CheckpointMeta::default()).unwrap();
        assert_eq!(&bytes[..8], b"GLUEPK1\0");
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + hl + 4 * arch.param_count());
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["param_count"], arch.param_count());
    }

    #[test]
    fn unknown_version_is_version_error() {
        let (arch, p) = sample();
        let bytes = encode(&arch, &p, &CheckpointMeta::default()).unwrap();
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hl].to_vec()).unwrap();
        let header = header.replace("\"format_version\":1", "\"format_version\":9");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[12 + hl..]);
        assert!(matches!(decode(&out), Err(GlueError::Version(9))));
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let (arch, p) = sample();
        let mut bytes = encode(&arch, &p, &CheckpointMeta::default()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(GlueError::Corruption(_))));
    }
}
