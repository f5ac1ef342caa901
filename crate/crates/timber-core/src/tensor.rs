//! Tensor value types: storage dtypes, named weight matrices, and a plain
//! dense matrix used for intermediate compute.
//!
//! Checkpoint tensors are stored in half or single precision but all
//! arithmetic here runs on `f64` values (optionally `f32` for the spectral
//! fast path); the three storage dtypes upcast to `f64` losslessly. Casting
//! back rounds to nearest-even.

use crate::error::{Error, Result};
use half::{bf16, f16};

/// Storage precision of a checkpoint tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    Bf16,
    F16,
    F32,
}

impl Dtype {
    /// Parse a safetensors dtype tag. Unknown tags return `None`.
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "BF16" => Some(Dtype::Bf16),
            "F16" => Some(Dtype::F16),
            "F32" => Some(Dtype::F32),
            _ => None,
        }
    }

    /// The safetensors tag for this dtype.
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::Bf16 => "BF16",
            Dtype::F16 => "F16",
            Dtype::F32 => "F32",
        }
    }

    /// Bytes per element.
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::Bf16 | Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Arithmetic precision for spectral computation. Storage dtypes are
/// independent of this; `F64` is the default and what the documented
/// tolerances assume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// A named tensor from a checkpoint, upcast to `f64` values.
///
/// `dims` is the tensor's true shape; most consumers require exactly two
/// dimensions, but 1-D tensors (biases, norms) load fine and are simply
/// never selected for refinement. `dtype` records the storage precision the
/// values came from (or should be written back as).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    name: String,
    dims: Vec<usize>,
    dtype: Dtype,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(
        name: impl Into<String>,
        dims: Vec<usize>,
        dtype: Dtype,
        values: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let count: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Input(format!(
                "tensor {name}: dimensions must be positive, got {dims:?}"
            )));
        }
        if values.len() != count {
            return Err(Error::Input(format!(
                "tensor {name}: shape {dims:?} implies {count} values, got {}",
                values.len()
            )));
        }
        Ok(WeightMatrix {
            name,
            dims,
            dtype,
            values,
        })
    }

    /// Convenience constructor for a 2-D matrix with row-major values.
    pub fn matrix(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        dtype: Dtype,
        values: Vec<f64>,
    ) -> Result<Self> {
        Self::new(name, vec![rows, cols], dtype, values)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Retag the storage dtype without touching the values. Used by the
    /// pipeline's output-dtype policy before serialization.
    pub fn set_dtype(&mut self, dtype: Dtype) {
        self.dtype = dtype;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn element_count(&self) -> usize {
        self.values.len()
    }

    /// `(rows, cols)` if this tensor is exactly 2-D.
    pub fn shape_2d(&self) -> Option<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    /// Full algebraic rank bound `min(d_1, d_2)` for 2-D tensors.
    pub fn rank_bound(&self) -> Option<usize> {
        self.shape_2d().map(|(r, c)| r.min(c))
    }

    /// Decode little-endian storage bytes into a tensor.
    pub fn from_le_bytes(
        name: impl Into<String>,
        dims: Vec<usize>,
        dtype: Dtype,
        bytes: &[u8],
    ) -> Result<Self> {
        let name = name.into();
        let count: usize = dims.iter().product();
        if bytes.len() != count * dtype.byte_size() {
            return Err(Error::Integrity(format!(
                "tensor {name}: expected {} bytes for shape {dims:?} as {dtype}, got {}",
                count * dtype.byte_size(),
                bytes.len()
            )));
        }
        let values = match dtype {
            Dtype::Bf16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
        };
        Self::new(name, dims, dtype, values)
    }

    /// Cast values back to the storage dtype (round to nearest-even) and
    /// serialize little-endian.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self.dtype {
            Dtype::Bf16 => self
                .values
                .iter()
                .flat_map(|&v| bf16::from_f64(v).to_bits().to_le_bytes())
                .collect(),
            Dtype::F16 => self
                .values
                .iter()
                .flat_map(|&v| f16::from_f64(v).to_bits().to_le_bytes())
                .collect(),
            Dtype::F32 => self
                .values
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect(),
        }
    }
}

/// Plain row-major `f64` matrix for intermediate results (deltas, singular
/// vector blocks, reconstructions).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtype_tags_roundtrip() {
        for dt in [Dtype::Bf16, Dtype::F16, Dtype::F32] {
            assert_eq!(Dtype::parse(dt.as_str()), Some(dt));
        }
        assert_eq!(Dtype::parse("I64"), None);
        assert_eq!(Dtype::parse("F64"), None);
    }

    #[test]
    fn shape_validation() {
        assert!(WeightMatrix::matrix("w", 2, 3, Dtype::F32, vec![0.0; 6]).is_ok());
        assert!(WeightMatrix::matrix("w", 2, 3, Dtype::F32, vec![0.0; 5]).is_err());
        assert!(WeightMatrix::new("w", vec![2, 0], Dtype::F32, vec![]).is_err());
        assert!(WeightMatrix::new("w", vec![], Dtype::F32, vec![]).is_err());
    }

    #[test]
    fn upcast_is_lossless_for_all_storage_dtypes() {
        // Every representable bf16/f16/f32 value survives the f64 roundtrip.
        let vals = [-3.25, -0.0078125, 0.0, 1.0, 2.5, 1024.0];
        for dt in [Dtype::Bf16, Dtype::F16, Dtype::F32] {
            let w = WeightMatrix::new("w", vec![6], dt, vals.to_vec()).unwrap();
            let bytes = w.to_le_bytes();
            let back = WeightMatrix::from_le_bytes("w", vec![6], dt, &bytes).unwrap();
            assert_eq!(back.values(), w.values());
        }
    }

    #[test]
    fn cast_rounds_to_nearest_even() {
        // 1 + 2^-24 is exactly halfway between the two nearest f32 values;
        // nearest-even resolves down to 1.0.
        let w = WeightMatrix::new("w", vec![1], Dtype::F32, vec![1.0 + 2f64.powi(-24)]).unwrap();
        let bytes = w.to_le_bytes();
        assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 1.0);
    }

    #[test]
    fn one_d_tensor_is_not_2d() {
        let w = WeightMatrix::new("b", vec![8], Dtype::F32, vec![0.0; 8]).unwrap();
        assert_eq!(w.shape_2d(), None);
        assert_eq!(w.rank_bound(), None);
    }
}
