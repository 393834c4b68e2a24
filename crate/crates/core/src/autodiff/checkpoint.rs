//! "ACEGPRM1" parameter files: the magic followed by records of
//! `(u32 name length, name, u32 rank, u32 dims…, f32 payload)` until end of file.

use std::path::Path;

use super::tensor::Tensor;
use crate::binio::{FormatError, Reader, Writer};

pub const PARAM_MAGIC: &[u8; 8] = b"ACEGPRM1";

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedTensors {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_magic(PARAM_MAGIC);
        for (name, t) in &self.entries {
            w.str(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.f32s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::expect_magic(bytes, PARAM_MAGIC)?;
        let mut out = Self::new();
        while !r.at_end() {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(FormatError::Invalid(format!("rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| FormatError::Invalid(format!("shape overflow for {name}")))?;
            let data = r.f32s(n)?;
            let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
            out.entries.push((name, t));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
