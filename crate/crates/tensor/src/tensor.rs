//! Dense row-major `f64` arrays and the shape arithmetic shared by every op.

use rand::Rng;

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64` values.
///
/// Dimensions are strictly positive. A rank-0 tensor (empty shape) holds a
/// single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Values drawn uniformly from `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(low..high);
        }
        t
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every value.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the flat indices of a broadcast output map back onto one operand.
#[derive(Clone, Debug)]
pub(crate) enum BroadcastMap {
    Same,
    Scalar,
    /// Operand equals the trailing block of the output: index `i % n`.
    Suffix(usize),
    Gather(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        let src_n = numel(src);
        let trimmed: &[usize] = {
            let lead = src.iter().take_while(|&&d| d == 1).count();
            &src[lead..]
        };
        if src == out {
            return Self::Same;
        }
        if src_n == 1 {
            return Self::Scalar;
        }
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return Self::Suffix(src_n);
        }
        Self::Gather(gather_indices(src, out))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Suffix(n) => i % n,
            Self::Gather(idx) => idx[i],
        }
    }

    /// Source indices for output positions `0..n`, without per-element division.
    pub(crate) fn iter(&self, n: usize) -> BroadcastIter<'_> {
        BroadcastIter { map: self, pos: 0, wrap: 0, n }
    }
}

pub(crate) struct BroadcastIter<'a> {
    map: &'a BroadcastMap,
    pos: usize,
    wrap: usize,
    n: usize,
}

impl Iterator for BroadcastIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.pos == self.n {
            return None;
        }
        let i = self.pos;
        self.pos += 1;
        Some(match self.map {
            BroadcastMap::Same => i,
            BroadcastMap::Scalar => 0,
            BroadcastMap::Suffix(m) => {
                let j = self.wrap;
                self.wrap += 1;
                if self.wrap == *m {
                    self.wrap = 0;
                }
                j
            }
            BroadcastMap::Gather(idx) => idx[i],
        })
    }
}

/// Flat source index for every flat output index under trailing broadcast.
fn gather_indices(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    let mut aligned = vec![0usize; rank];
    for i in 0..rank {
        if i + src.len() >= rank {
            let j = i + src.len() - rank;
            if src[j] != 1 {
                aligned[i] = src_strides[j];
            }
        }
    }
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += aligned[d];
            if counter[d] < out[d] {
                break;
            }
            off -= aligned[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}
