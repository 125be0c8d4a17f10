//! Dense row-major tensors and the `CMTT` binary format.
//!
//! Values are held as `f64`. The [`Precision`] tag records the storage
//! precision used on disk; an `F32` tensor only ever holds values that are
//! exactly representable as `f32`, so serialization is lossless in both modes.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim, format, param, Error, Result};
use crate::rng::seeded;

pub const TENSOR_MAGIC: &[u8; 4] = b"CMTT";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Byte width, which is also the format's precision code.
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        self.bytes() as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(format(format!("unknown precision code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(dim("tensor needs at least one dimension"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(dim(format!("zero extent in dims {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| dim(format!("element count of {dims:?} overflows")))
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(dim(format!(
                "dims {dims:?} need {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data,
            precision: Precision::F64,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = check_dims(&dims)?;
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn from_f32(dims: Vec<usize>, data: &[f32]) -> Result<Self> {
        let t = Tensor::new(dims, data.iter().map(|&v| v as f64).collect())?;
        Ok(Tensor {
            precision: Precision::F32,
            ..t
        })
    }

    /// Retags the tensor; converting to `F32` rounds every value to the
    /// nearest `f32`.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        if precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.precision = precision;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Writing non-`f32` values into an `F32`
    /// tensor is the caller's responsibility to avoid.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        let precision = self.precision;
        let mut t = Tensor::new(dims, self.data)?;
        t.precision = precision;
        Ok(t)
    }

    /// Same dims and precision, new values.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            precision: self.precision,
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Data(format!(
                "non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Elements per index of dimension 0 (one batch sample for `[N, ...]`).
    pub fn sample_len(&self) -> usize {
        self.data.len() / self.dims[0]
    }
}

/// How [`make_tensor`] fills values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillSpec {
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
    /// Exactly `round(sparsity * n)` zeros at random positions, the rest
    /// strictly positive half-normal values.
    ReluSparse { sparsity: f64, seed: u64 },
}

pub fn make_tensor(dims: &[usize], fill: FillSpec) -> Result<Tensor> {
    let n = check_dims(dims)?;
    let data = match fill {
        FillSpec::Constant(v) => vec![v; n],
        FillSpec::Uniform { lo, hi, seed } => {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(param(format!("bad uniform range [{lo}, {hi}]")));
            }
            let mut rng = seeded(seed);
            (0..n)
                .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
                .collect()
        }
        FillSpec::Gaussian { mean, std, seed } => {
            let normal = Normal::new(mean, std)
                .map_err(|e| param(format!("bad gaussian parameters: {e}")))?;
            let mut rng = seeded(seed);
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        FillSpec::ReluSparse { sparsity, seed } => {
            if !(0.0..=1.0).contains(&sparsity) {
                return Err(param(format!("sparsity {sparsity} outside [0, 1]")));
            }
            let mut rng = seeded(seed);
            let zeros = (sparsity * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut data = vec![0.0; n];
            for &i in &order[zeros..] {
                let v: f64 = normal.sample(&mut rng);
                data[i] = v.abs().max(f64::MIN_POSITIVE);
            }
            data
        }
    };
    Tensor::new(dims.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorStats {
    pub nonzero_ratio: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// One entry per index of the batch dimension; empty when none was given.
    pub per_sample_max_abs: Vec<f64>,
}

pub fn compute_stats(t: &Tensor, batch_dim: Option<usize>) -> Result<TensorStats> {
    t.ensure_finite()?;
    let n = t.len();
    let mut nonzero = 0usize;
    let mut sum_abs = 0.0;
    let mut max_abs = 0.0f64;
    for &v in t.data() {
        if v != 0.0 {
            nonzero += 1;
        }
        sum_abs += v.abs();
        max_abs = max_abs.max(v.abs());
    }
    let per_sample_max_abs = match batch_dim {
        None => Vec::new(),
        Some(d) if d >= t.rank() => {
            return Err(dim(format!(
                "batch dim {d} out of range for rank {}",
                t.rank()
            )))
        }
        Some(d) => {
            let extent = t.dims()[d];
            let inner: usize = t.dims()[d + 1..].iter().product();
            let mut maxima = vec![0.0f64; extent];
            for (i, &v) in t.data().iter().enumerate() {
                let b = (i / inner) % extent;
                maxima[b] = maxima[b].max(v.abs());
            }
            maxima
        }
    };
    Ok(TensorStats {
        nonzero_ratio: nonzero as f64 / n as f64,
        mean_abs: sum_abs / n as f64,
        max_abs,
        per_sample_max_abs,
    })
}

pub(crate) fn write_dims<W: Write>(sink: &mut W, precision: Precision, dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(dim("cannot serialize a tensor without dimensions"));
    }
    let rank = u8::try_from(dims.len()).map_err(|_| dim("rank exceeds 255"))?;
    sink.write_all(&[precision.code(), rank])?;
    for &d in dims {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(2 + 8 * dims.len())
}

fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        format("truncated stream")
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_dims<R: Read>(source: &mut R) -> Result<(Precision, Vec<usize>)> {
    let mut head = [0u8; 2];
    source.read_exact(&mut head).map_err(eof_as_format)?;
    let precision = Precision::from_code(head[0])?;
    if head[1] == 0 {
        return Err(format("rank 0"));
    }
    let mut dims = Vec::with_capacity(head[1] as usize);
    for _ in 0..head[1] {
        let mut b = [0u8; 8];
        source.read_exact(&mut b).map_err(eof_as_format)?;
        let d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| format("extent exceeds usize"))?;
        dims.push(d);
    }
    check_dims(&dims).map_err(|e| format(e.to_string()))?;
    Ok((precision, dims))
}

/// Writes `t` in `CMTT` layout and returns the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<usize> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + t.len() * t.precision.bytes());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    write_dims(&mut buf, t.precision, &t.dims)?;
    match t.precision {
        Precision::F32 => {
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

/// Reads one `CMTT` tensor. Nothing is returned unless the whole record,
/// payload included, was read.
pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 5];
    source.read_exact(&mut head).map_err(eof_as_format)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(format("bad magic, expected CMTT"));
    }
    if head[4] != TENSOR_VERSION {
        return Err(format(format!("unsupported CMTT version {}", head[4])));
    }
    let (precision, dims) = read_dims(source)?;
    let n: usize = dims.iter().product();
    let width = precision.bytes();
    let byte_len = n
        .checked_mul(width)
        .ok_or_else(|| format("payload size overflows"))?;
    let mut payload = Vec::new();
    let got = source
        .take(byte_len as u64)
        .read_to_end(&mut payload)
        .map_err(Error::Io)?;
    if got != byte_len {
        return Err(format(format!(
            "truncated payload: expected {byte_len} bytes, got {got}"
        )));
    }
    let data = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor {
        dims,
        data,
        precision,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    /// Count of `|a_i - b_i| > eb`.
    pub count_exceeding: usize,
    /// Count of exceedances at positions that were not flushed to zero.
    pub count_exceeding_unflushed: usize,
    /// Positions where `a_i != 0` but `b_i == 0`.
    pub flushed_zeros: usize,
}

pub fn compare(a: &Tensor, b: &Tensor, eb: f64) -> Result<ErrorReport> {
    if a.dims() != b.dims() {
        return Err(dim(format!(
            "shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut max_abs_diff = 0.0f64;
    let mut sum = 0.0;
    let mut count_exceeding = 0;
    let mut count_exceeding_unflushed = 0;
    let mut flushed_zeros = 0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = (x - y).abs();
        max_abs_diff = max_abs_diff.max(d);
        sum += d;
        let flushed = y == 0.0 && x != 0.0;
        if flushed {
            flushed_zeros += 1;
        }
        if d > eb {
            count_exceeding += 1;
            if !flushed {
                count_exceeding_unflushed += 1;
            }
        }
    }
    Ok(ErrorReport {
        max_abs_diff,
        mean_abs_diff: sum / a.len() as f64,
        count_exceeding,
        count_exceeding_unflushed,
        flushed_zeros,
    })
}
