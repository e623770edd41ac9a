//! Dense row-major `f64` tensors.
//!
//! Every value flowing through the detector (images, feature maps, weights,
//! gradients) is a [`Tensor`]. Feature maps use the `C×H×W` layout.

use std::io::{Read, Write};

use crate::error::{DesError, Result};

/// Magic prefix of the on-disk tensor record.
pub const TENSOR_MAGIC: &[u8; 8] = b"DESTNSR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DesError::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
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

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(DesError::shape(
                "chw",
                format!("expected rank-3 C×H×W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hh, ww) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * hh + h) * ww + w]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(DesError::shape(
                "item",
                format!("expected a scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(DesError::shape(
                op,
                format!("shape {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// Elementwise product. `other` either matches `self`'s shape or is a
    /// per-channel `C×1×1` gate against a `C×H×W` tensor.
    pub fn elementwise_mul(&self, other: &Tensor) -> Result<Tensor> {
        match broadcast_kind(&self.shape, &other.shape)? {
            Broadcast::Same => self.zip_map(other, "elementwise_mul", |a, b| a * b),
            Broadcast::PerChannel { plane } => {
                let data = self
                    .data
                    .chunks(plane)
                    .zip(&other.data)
                    .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| v * s))
                    .collect();
                Ok(Tensor {
                    shape: self.shape.clone(),
                    data,
                })
            }
        }
    }

    /// Sum over `axes`, keeping reduced axes with extent 1.
    pub fn reduce_sum(&self, axes: &[usize]) -> Result<Tensor> {
        let mask = axis_mask(&self.shape, axes, "reduce_sum")?;
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&mask)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut index = vec![0usize; self.shape.len()];
        for &v in &self.data {
            let mut o = 0;
            for (d, &i) in index.iter().enumerate() {
                if !mask[d] {
                    o += i * out_strides[d];
                }
            }
            out[o] += v;
            increment(&mut index, &self.shape);
        }
        Ok(Tensor {
            shape: out_shape,
            data: out,
        })
    }

    /// Arithmetic mean over `axes`, keeping reduced axes with extent 1.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Tensor> {
        let count: usize = {
            let mask = axis_mask(&self.shape, axes, "reduce_mean")?;
            self.shape
                .iter()
                .zip(&mask)
                .filter(|(_, &r)| r)
                .map(|(&e, _)| e)
                .product()
        };
        Ok(self.reduce_sum(axes)?.scale(1.0 / count as f64))
    }

    /// Writes one `DESTNSR1` record: magic, `u32` rank, `u32` extents, then
    /// little-endian `f64` payload.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            let e = u32::try_from(e)
                .map_err(|_| DesError::TensorFormat(format!("extent {e} exceeds u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(DesError::TensorFormat(format!("bad magic {magic:?}")));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(DesError::TensorFormat(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        check_shape(&shape).map_err(|e| DesError::TensorFormat(e.to_string()))?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 8 * self.data.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        Tensor::read_from(&mut cursor)
    }

    /// Size in bytes of this tensor's serialized record.
    pub fn encoded_len(&self) -> usize {
        12 + 4 * self.shape.len() + 8 * self.data.len()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(DesError::shape("tensor", "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(DesError::shape(
            "tensor",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}

pub(crate) enum Broadcast {
    Same,
    PerChannel { plane: usize },
}

pub(crate) fn broadcast_kind(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if let ([c, h, w], [bc, 1, 1]) = (a, b) {
        if c == bc {
            return Ok(Broadcast::PerChannel { plane: h * w });
        }
    }
    Err(DesError::shape(
        "elementwise_mul",
        format!("shape {a:?} cannot be multiplied by {b:?}"),
    ))
}

fn axis_mask(shape: &[usize], axes: &[usize], op: &'static str) -> Result<Vec<bool>> {
    if axes.is_empty() {
        return Err(DesError::shape(op, "empty reduction"));
    }
    let mut mask = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(DesError::shape(
                op,
                format!("axis {a} out of range for rank {}", shape.len()),
            ));
        }
        if mask[a] {
            return Err(DesError::shape(op, format!("axis {a} repeated")));
        }
        mask[a] = true;
    }
    Ok(mask)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        index[d] += 1;
        if index[d] < shape[d] {
            return;
        }
        index[d] = 0;
    }
}
