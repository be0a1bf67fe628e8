//! Pre-extracted encoder outputs and the `IHQF` feature file format.
//!
//! Layout (little-endian): magic `IHQF`, `u32` version (1), `u32` rows,
//! `u32` cols, then `rows × cols` `f32` values in row-major order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"IHQF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Video => 'v',
            Modality::Audio => 'a',
            Modality::Text => 't',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Token/segment embeddings of one modality of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality: Modality,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: Modality, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("feature_matrix", format!("empty {rows}×{cols} matrix")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "feature_matrix",
                format!("{rows}×{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self {
            modality,
            rows,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First row with zero L2 norm, if any.
    pub fn zero_norm_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| self.row(r).iter().all(|&v| v == 0.0))
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("validated shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], modality: Modality, origin: &str) -> Result<Self> {
        let fail = |detail: String| Error::Format {
            path: origin.to_string(),
            detail,
        };
        if bytes.len() < 16 {
            return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let expected = 16 + 4 * rows * cols;
        if bytes.len() != expected {
            return Err(fail(format!(
                "{rows}×{cols} payload needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(modality, rows, cols, data).map_err(|e| fail(e.to_string()))
    }
}

pub fn read_feature_file(path: &Path, modality: Modality) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, modality, &path.display().to_string())
}

pub fn write_feature_file(path: &Path, features: &FeatureMatrix) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, features.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = FeatureMatrix::new(Modality::Audio, 1, 2, vec![1.0, -2.5]).unwrap();
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"IHQF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let f = FeatureMatrix::new(Modality::Text, 1, 1, vec![1.0]).unwrap();
        let mut b = f.to_bytes();
        b[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&b, Modality::Text, "x").is_err());
        let mut b = f.to_bytes();
        b[4] = 2;
        let err = FeatureMatrix::from_bytes(&b, Modality::Text, "x").unwrap_err();
        assert!(err.to_string().contains("version"));
        let b = f.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1], Modality::Text, "x").is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f32 - 500.0) / 7.0)
                .collect();
            let f = FeatureMatrix::new(Modality::Video, rows, cols, data).unwrap();
            let back = FeatureMatrix::from_bytes(&f.to_bytes(), Modality::Video, "mem").unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
