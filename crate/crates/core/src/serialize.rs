//! Serialization helpers: row-major matrix encoding with explicit shapes,
//! canonical JSON bytes and content hashing for reproducible artifacts.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Row-major matrix payload used inside model files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().cloned().collect(),
        }
    }

    pub fn to_array(&self) -> crate::Result<Array2<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(crate::Error::Model(format!(
                "matrix payload length {} does not match shape {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| crate::Error::Model(e.to_string()))
    }
}

impl From<&Array2<f64>> for MatrixData {
    fn from(a: &Array2<f64>) -> Self {
        Self::from_array(a)
    }
}

/// Hex SHA-256 (truncated to 16 bytes) of the little-endian bytes of a matrix.
/// Used as the content hash of orthogonalization reference points.
pub fn matrix_content_hash(a: &ndarray::ArrayView2<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((a.nrows() as u64).to_le_bytes());
    hasher.update((a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex16(&hasher.finalize())
}

/// Canonical JSON: objects with keys sorted recursively, no whitespace.
pub fn canonical_json(value: &serde_json::Value) -> String {
    fn write(v: &serde_json::Value, out: &mut String) {
        match v {
            serde_json::Value::Object(map) => {
                out.push('{');
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&serde_json::to_string(k).unwrap());
                    out.push(':');
                    write(&map[*k], out);
                }
                out.push('}');
            }
            serde_json::Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            other => out.push_str(&serde_json::to_string(other).unwrap()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

/// Hash of the canonical JSON form of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> crate::Result<String> {
    let v = serde_json::to_value(value)?;
    let canon = canonical_json(&v);
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    Ok(hex16(&hasher.finalize()))
}

/// Derive a 64-bit RNG seed from a label and a user seed. Generators own
/// their stream: changing one generator never perturbs another's output.
pub fn derive_seed(label: &str, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(label.as_bytes());
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn hex16(digest: &[u8]) -> String {
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Serde helpers for `Array1<f64>` fields.
pub mod vec1 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.to_vec().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serde helpers for `Array2<f64>` fields via [`MatrixData`].
pub mod mat2 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixData::from_array(v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let m = MatrixData::deserialize(d)?;
        m.to_array().map_err(serde::de::Error::custom)
    }
}
