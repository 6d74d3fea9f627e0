//! `M2VF` pooled-feature cache: magic, u32 version, u32 tap id, u32 record
//! count, then per clip a u16 id length, the id, u32 dimension and the
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use super::ProbeError;

pub const FEATURE_MAGIC: &[u8; 4] = b"M2VF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub tap_id: u32,
    pub records: Vec<(String, Vec<f32>)>,
}

impl FeatureCache {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.tap_id.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (id, v) in &self.records {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProbeError> {
        let bad = |m: &str| ProbeError::Data(format!("feature cache: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ProbeError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
        if take(4)? != FEATURE_MAGIC {
            return Err(bad("missing M2VF magic"));
        }
        let version = u32_at(take(4)?);
        if version != FEATURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let tap_id = u32_at(take(4)?);
        let count = u32_at(take(4)?) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let l = take(2)?;
            let id_len = u16::from_le_bytes([l[0], l[1]]) as usize;
            let id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("clip id is not UTF-8"))?;
            let d = u32_at(take(4)?) as usize;
            let payload = take(d.checked_mul(4).ok_or_else(|| bad("dimension overflow"))?)?;
            records.push((id, payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(FeatureCache { tap_id, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        fs::write(path, self.to_bytes()).map_err(|source| ProbeError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let bytes = fs::read(path).map_err(|source| ProbeError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let c = FeatureCache { tap_id: 2, records: vec![("clip_00001".into(), vec![1.0, -2.5]), ("b".into(), vec![])] };
        let bytes = c.to_bytes();
        assert_eq!(FeatureCache::from_bytes(&bytes).unwrap(), c);
        assert!(FeatureCache::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
