//! Dense row-major `f32` arrays.
//!
//! Storage is single precision; reductions accumulate in `f64`. Broadcasting
//! is limited to a rank-0 (scalar) right-hand operand.
//!
//! The binary file format (`ADT1`) is:
//!
//! ```text
//! b"ADT1" | ndim: u32 LE | dims: ndim x u32 LE | payload: f32 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADT_MAGIC: &[u8; 4] = b"ADT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl ElementwiseOp {
    #[inline]
    fn apply(self, x: f32, y: f32) -> f32 {
        match self {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Max => x.max(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()`, positive
    /// dimensions and finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape { shape, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f32) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(0.0))
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|v| v * factor)
    }

    /// Largest absolute entry, computed in `f64`.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: &Tensor) -> Result<Self> {
        elementwise(op, self, other)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        elementwise(ElementwiseOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        elementwise(ElementwiseOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        elementwise(ElementwiseOp::Mul, self, other)
    }

    /// Serializes to the `ADT1` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(ADT_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the `ADT1` byte layout. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::BadTensorFile {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != ADT_MAGIC {
            return Err(bad("missing ADT1 magic"));
        }
        let read_u32 = |at: usize| -> Option<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let ndim = read_u32(4).ok_or_else(|| bad("truncated header"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let d = read_u32(8 + 4 * i).ok_or_else(|| bad("truncated dims"))?;
            shape.push(d as usize);
        }
        let start = 8 + 4 * ndim;
        let count: usize = shape.iter().product();
        let payload = &bytes[start.min(bytes.len())..];
        if payload.len() != 4 * count {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * count
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }

    pub fn write_adt(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_adt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Applies `op` pairwise. `b` may be rank-0, in which case it is broadcast.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.is_scalar() {
        let s = b.data[0];
        return Ok(a.map(|x| op.apply(x, s)));
    }
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

/// Sums or averages over `axes`, removing them from the shape. An empty
/// `axes` slice reduces over every axis and yields a rank-0 tensor.
pub fn reduce(op: ReduceOp, a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut reduced = vec![false; rank];
    if axes.is_empty() {
        reduced.iter_mut().for_each(|r| *r = true);
    }
    for &axis in axes {
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        reduced[axis] = true;
    }

    let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| a.shape[i]).collect();
    let out_len: usize = out_shape.iter().product();
    let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| a.shape[i]).product();

    // Row-major strides of the output, indexed by input axis (0 for reduced axes).
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        if !reduced[i] {
            out_strides[i] = stride;
            stride *= a.shape[i];
        }
    }

    let mut acc = vec![0.0f64; out_len];
    let mut index = vec![0usize; rank];
    for &v in &a.data {
        let target: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        acc[target] += v as f64;
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < a.shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    let data = acc
        .into_iter()
        .map(|s| match op {
            ReduceOp::Sum => s as f32,
            ReduceOp::Mean => (s / count as f64) as f32,
        })
        .collect();
    Ok(Tensor::from_parts(out_shape, data))
}

/// Inner product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum())
}

/// Euclidean norm accumulated in `f64`.
pub fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_and_scalar_mul() {
        let s = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        let z = t(&[2], &[2.0, 2.0]).mul(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn reductions() {
        let m = reduce(ReduceOp::Mean, &Tensor::ones(&[2, 2]), &[]).unwrap();
        assert!(m.is_scalar());
        assert_eq!(m.data(), &[1.0]);
        assert_eq!(
            reduce(ReduceOp::Sum, &t(&[3], &[1.0, 2.0, 3.0]), &[0]).unwrap().data(),
            &[6.0]
        );
        assert_eq!(
            reduce(ReduceOp::Mean, &t(&[2], &[2.0, 4.0]), &[]).unwrap().data(),
            &[3.0]
        );
    }

    #[test]
    fn reduce_partial_axes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = reduce(ReduceOp::Sum, &a, &[1]).unwrap();
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = reduce(ReduceOp::Mean, &a, &[0]).unwrap();
        assert_eq!(cols.data(), &[2.5, 3.5, 4.5]);
        assert!(matches!(
            reduce(ReduceOp::Sum, &a, &[2]),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn dot_products() {
        assert_eq!(dot(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[0.25, -0.5], &[0.25, -0.5]).unwrap(), 0.3125);
        assert!(dot(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn adt_layout_is_exact() {
        let a = t(&[1, 2], &[1.0, -2.0]);
        let bytes = a.to_bytes();
        let mut expected = b"ADT1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn adt_rejects_truncation() {
        let mut bytes = t(&[2], &[1.0, 2.0]).to_bytes();
        bytes.pop();
        assert!(Tensor::from_bytes(&bytes, Path::new("x")).is_err());
        assert!(Tensor::from_bytes(b"NOPE0000", Path::new("x")).is_err());
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
        (1usize..32).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f32..10.0, n),
                proptest::collection::vec(-10.0f32..10.0, n),
                proptest::collection::vec(-10.0f32..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn add_mul_commute_and_associate((a, b, c) in vec_pair()) {
            let n = a.len();
            let (a, b, c) = (t(&[n], &a), t(&[n], &b), t(&[n], &c));
            for op in [ElementwiseOp::Add, ElementwiseOp::Mul] {
                let ab = elementwise(op, &a, &b).unwrap();
                let ba = elementwise(op, &b, &a).unwrap();
                prop_assert_eq!(ab.data(), ba.data());
                let left = elementwise(op, &ab, &c).unwrap();
                let right = elementwise(op, &a, &elementwise(op, &b, &c).unwrap()).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    let tol = 1e-6 * (1.0 + x.abs().max(y.abs()));
                    prop_assert!((x - y).abs() <= tol, "{} vs {}", x, y);
                }
            }
        }

        #[test]
        fn relu_nonnegative_and_idempotent(v in proptest::collection::vec(-100.0f32..100.0, 1..64)) {
            let x = t(&[v.len()], &v);
            let r = x.relu();
            prop_assert!(r.data().iter().all(|&e| e >= 0.0));
            prop_assert_eq!(r.relu(), r);
        }

        #[test]
        fn adt_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 + seed as f32).sin()).collect();
            let a = t(&[rows, cols], &data);
            let back = Tensor::from_bytes(&a.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
