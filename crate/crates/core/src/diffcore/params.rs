use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};

/// A named, contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedSlice {
    pub name: String,
    pub range: Range<usize>,
}

/// Flat parameter vector with named slices.
///
/// Every mutable access bumps [`ParamSet::version`], which lets tapes detect
/// that the weights they recorded have since changed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    data: Vec<f64>,
    slices: Vec<NamedSlice>,
    version: u64,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { data: Vec::new(), slices: Vec::new(), version: 0 }
    }

    /// Appends a zero-filled slice and returns its range.
    pub fn add_slice(&mut self, name: &str, len: usize) -> Range<usize> {
        let start = self.data.len();
        self.data.resize(start + len, 0.0);
        let range = start..start + len;
        self.slices.push(NamedSlice { name: name.to_string(), range: range.clone() });
        self.version += 1;
        range
    }

    pub fn slices(&self) -> &[NamedSlice] {
        &self.slices
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        self.slices.iter().find(|s| s.name == name).map(|s| s.range.clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.data
    }

    pub fn get(&self, index: usize) -> f64 {
        self.data[index]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        self.version += 1;
        self.data[index] = value;
    }

    /// Copies `src` onto `dst` (equal lengths).
    pub fn copy_range(&mut self, src: Range<usize>, dst: Range<usize>) {
        assert_eq!(src.len(), dst.len());
        self.version += 1;
        self.data.copy_within(src, dst.start);
    }

    /// `dst <- (1 - tau) * dst + tau * src`.
    pub fn soft_update(&mut self, src: Range<usize>, dst: Range<usize>, tau: f64) {
        assert_eq!(src.len(), dst.len());
        self.version += 1;
        for (s, d) in src.zip(dst) {
            self.data[d] = (1.0 - tau) * self.data[d] + tau * self.data[s];
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian `f64` dump of the flat vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Restores values written by [`ParamSet::to_bytes`] into a set with the
    /// same layout.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.data.len() * 8 {
            return Err(Error::Checkpoint(alloc::format!(
                "expected {} bytes, got {}",
                self.data.len() * 8,
                bytes.len()
            )));
        }
        let mut data = vec![0.0; self.data.len()];
        for (v, chunk) in data.iter_mut().zip(bytes.chunks_exact(8)) {
            let mut b = [0u8; 8];
            b.copy_from_slice(chunk);
            *v = f64::from_le_bytes(b);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        self.data = data;
        self.version += 1;
        Ok(())
    }
}
