//! Checkpoint container shared by models, mappers and policies.
//!
//! Layout: the 8 magic bytes `CRSCKPT1`, a little-endian `u64` header
//! length, the UTF-8 JSON header, then each array listed in
//! `header.arrays` as consecutive little-endian `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CRSCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: Value) -> Self {
        Checkpoint {
            header: Header {
                kind: kind.to_string(),
                meta,
                arrays: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) {
        assert_eq!(rows * cols, values.len(), "array {name} shape mismatch");
        self.header.arrays.push(ArraySpec {
            name: name.to_string(),
            rows,
            cols,
        });
        self.data.push(values.to_vec());
    }

    pub fn array(&self, name: &str) -> Result<(&ArraySpec, &[f64])> {
        self.header
            .arrays
            .iter()
            .zip(&self.data)
            .find(|(spec, _)| spec.name == name)
            .map(|(spec, data)| (spec, data.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let floats: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + floats * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for array in &self.data {
            for v in array {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        cursor.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&cursor[..len])?;
        cursor = &cursor[len..];
        let mut data = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let n = spec.rows * spec.cols;
            if cursor.len() < n * 8 {
                return Err(Error::Checkpoint(format!("array {} truncated", spec.name)));
            }
            let values = cursor[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            data.push(values);
            cursor = &cursor[n * 8..];
        }
        if !cursor.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cursor.len())));
        }
        Ok(Checkpoint { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..40), rows in 1usize..4) {
            let cols = values.len() / rows;
            let values = &values[..rows * cols];
            let mut ck = Checkpoint::new("test", serde_json::json!({"seed": 3}));
            ck.push("a", rows, cols, values);
            ck.push("b", 1, 2, &[1.5, -0.0]);
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.data[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut ck = Checkpoint::new("x", Value::Null);
        ck.push("a", 1, 3, &[1.0, 2.0, 3.0]);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
