//! `M2V1` checkpoint files.
//!
//! Layout: magic `M2V1`, u32 version, u64 header length, UTF-8 JSON header
//! (config snapshot and counters), u32 tensor count, then per tensor a u16
//! name length, the name, u8 dtype (0 = f32), u8 rank, u32 dims and the
//! little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, TrainConfig, TrainError, TrainState};
use crate::distiller::DistillState;
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2V1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const GROUPS: [&str; 4] = ["student", "teacher", "adam.m", "adam.v"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_state(cfg: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            config: cfg.clone(),
            step: state.step(),
            student: state.distill.student.clone(),
            teacher: state.distill.teacher.clone(),
            adam: state.adam.clone(),
        }
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            distill: DistillState { student: self.student, teacher: self.teacher, step: self.step },
            adam: self.adam,
        }
    }

    fn tables(&self) -> [&ParamStore<f32>; 4] {
        [&self.student, &self.teacher, &self.adam.m, &self.adam.v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { config: self.config.clone(), step: self.step, adam_step: self.adam.t };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let count: usize = self.tables().iter().map(|t| t.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (group, table) in GROUPS.iter().zip(self.tables()) {
            for (name, t) in table.iter() {
                let full = format!("{group}/{name}");
                out.extend_from_slice(&(full.len() as u16).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(DTYPE_F32);
                out.push(t.rank() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("missing M2V1 magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tables: [ParamStore<f32>; 4] = Default::default();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
            let (group, param) = name
                .split_once('/')
                .ok_or_else(|| TrainError::Checkpoint(format!("tensor `{name}` has no group prefix")))?;
            let slot = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| TrainError::Checkpoint(format!("unknown tensor group `{group}`")))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(TrainError::Checkpoint(format!("tensor `{name}`: unsupported dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("tensor too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::new(&dims, data).map_err(|e| TrainError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tables[slot].insert(param, tensor);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [student, teacher, m, v] = tables;
        header.config.encoder.check_params(&student)?;
        for (label, t) in [("teacher", &teacher), ("adam.m", &m), ("adam.v", &v)] {
            if !t.same_layout(&student) {
                return Err(TrainError::Checkpoint(format!("{label} table does not match the student")));
            }
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            student,
            teacher,
            adam: AdamState { m, v, t: header.adam_step },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("m2v.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TrainError::Checkpoint(m) => TrainError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// FNV-1a over names, shapes and value bits.
pub fn param_fingerprint(p: &ParamStore<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in p.iter() {
        eat(name.as_bytes());
        for &d in t.shape() {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}
