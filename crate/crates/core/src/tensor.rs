//! Dense 4-D tensors in `(n, c, h, w)` row-major layout.
//!
//! Fully connected activations are represented as `(n, c, 1, 1)`. There is no
//! broadcasting and there are no strided views: every tensor owns a flat
//! buffer whose element `(i, j, y, x)` lives at `((i*c + j)*h + y)*w + x`.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Element type stored in the on-disk tensor records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Scalar type a [`Tensor`] can hold. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions
    /// and strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le<W: Write>(self, out: &mut W) -> std::io::Result<()>;
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le<W: Write>(self, out: &mut W) -> std::io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le<W: Write>(self, out: &mut W) -> std::io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one sample, `c*h*w`.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements in one channel plane, `h*w`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_batch(&self, n: usize) -> Self {
        Shape { n, ..*self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

const TENSOR_MAGIC: &[u8; 4] = b"DSRT";

/// Size of the fixed header preceding the element data of a tensor record.
pub const TENSOR_HEADER_LEN: usize = 24;

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "buffer of {} elements does not fit shape {shape}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(i, j, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..shape.n {
            for j in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(lo + (hi - lo) * rng.uniform()))
            .collect();
        Tensor { shape, data }
    }

    /// He-normal weights for a conv/linear layer of shape `(out, in, kh, kw)`:
    /// samples from `Normal(0, sqrt(2 / (in*kh*kw)))`.
    pub fn he_normal(shape: Shape, rng: &mut Rng) -> Result<Self> {
        let fan_in = shape.c * shape.h * shape.w;
        if fan_in == 0 || shape.n == 0 {
            return Err(Error::invalid(
                "he_normal",
                format!("shape {shape} has zero fan-in or fan-out"),
            ));
        }
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(std * rng.standard_normal()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        debug_assert!(i < s.n && j < s.c && y < s.h && x < s.w);
        ((i * s.c + j) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.offset(i, j, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, y: usize, x: usize) -> &mut T {
        let o = self.offset(i, j, y, x);
        &mut self.data[o]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.shape.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Collapses everything into a `(1, numel, 1, 1)` vector.
    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor {
            shape: Shape::new(1, n, 1, 1),
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.check_same_shape("add", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.check_same_shape("sub", other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        self.check_same_shape("dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Copies the listed samples, in order, into a new batch.
    pub fn gather_samples(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.sample_len());
        for &i in indices {
            if i >= self.shape.n {
                return Err(Error::invalid(
                    "gather_samples",
                    format!("sample index {i} out of range for {}", self.shape),
                ));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Tensor {
            shape: self.shape.with_batch(indices.len()),
            data,
        })
    }

    /// Concatenates equally shaped batches along the sample axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.with_batch(1) != first.shape.with_batch(1) {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape,
                    right: p.shape,
                });
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: first.shape.with_batch(n),
            data,
        })
    }

    /// Writes one tensor record: `"DSRT"`, dtype code, four dimensions (all
    /// `u32` little-endian), then the elements in little-endian order.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&T::DTYPE.code().to_le_bytes())?;
        for d in self.shape.dims() {
            let d = u32::try_from(d).map_err(|_| {
                Error::Checkpoint(format!("dimension {d} does not fit in 32 bits"))
            })?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in &self.data {
            v.write_le(out)?;
        }
        Ok(())
    }

    /// Reads one tensor record, converting from the stored dtype if needed.
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut header = [0u8; TENSOR_HEADER_LEN];
        input.read_exact(&mut header)?;
        if &header[0..4] != TENSOR_MAGIC {
            return Err(Error::Checkpoint("bad tensor magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
        let dtype = DType::from_code(word(1))
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {}", word(1))))?;
        let shape = Shape::new(
            word(2) as usize,
            word(3) as usize,
            word(4) as usize,
            word(5) as usize,
        );
        let mut raw = vec![0u8; shape.numel() * dtype.size_of()];
        input.read_exact(&mut raw)?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| T::from_f64_lossy(f64::read_le(b)))
                .collect(),
        };
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
