//! Python bindings: tensors, the error-bounded codec and the gradient-error
//! model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use comet::codec::{self, CodecParams, CompressedActivation, DEFAULT_RADIUS};
use comet::errprop::{self, calibrate_a, EbEstimate, LayerShape, ProbeConfig};
use comet::tensor::{self, FillSpec};
use comet::{Error, Precision};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        Error::Dimension(_) | Error::Parameter(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "comet_py")]
struct PyTensor {
    inner: comet::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (dims, data, precision = "f32"))]
    fn new(dims: Vec<usize>, data: Vec<f64>, precision: &str) -> PyResult<Self> {
        let p = parse_precision(precision)?;
        let inner = comet::Tensor::new(dims, data).map_err(py_err)?.with_precision(p);
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: comet::Tensor::zeros(dims).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let inner = tensor::read_tensor(&mut BufReader::new(f)).map_err(py_err)?;
        Ok(PyTensor { inner })
    }

    fn save(&self, path: &str) -> PyResult<usize> {
        let f = File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let mut w = BufWriter::new(f);
        let n = tensor::write_tensor(&self.inner, &mut w).map_err(py_err)?;
        w.flush().map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(n)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn precision(&self) -> &'static str {
        match self.inner.precision() {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?}, precision={})", self.inner.dims(), self.precision())
    }

    /// Returns nonzero_ratio, mean_abs, max_abs and, with a batch dimension,
    /// per_sample_max_abs.
    #[pyo3(signature = (batch_dim = None))]
    fn stats<'py>(&self, py: Python<'py>, batch_dim: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
        let s = tensor::compute_stats(&self.inner, batch_dim).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("nonzero_ratio", s.nonzero_ratio)?;
        d.set_item("mean_abs", s.mean_abs)?;
        d.set_item("max_abs", s.max_abs)?;
        d.set_item("per_sample_max_abs", s.per_sample_max_abs)?;
        Ok(d)
    }
}

fn parse_precision(p: &str) -> PyResult<Precision> {
    match p {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(PyValueError::new_err(format!("precision must be f32 or f64, got {other:?}"))),
    }
}

#[pyfunction]
#[pyo3(signature = (dims, fill = "relu-sparse", seed = 0, sparsity = 0.5, value = 0.0, lo = -1.0, hi = 1.0, mean = 0.0, std = 1.0))]
#[allow(clippy::too_many_arguments)]
fn make_tensor(
    dims: Vec<usize>,
    fill: &str,
    seed: u64,
    sparsity: f64,
    value: f64,
    lo: f64,
    hi: f64,
    mean: f64,
    std: f64,
) -> PyResult<PyTensor> {
    let spec = match fill {
        "constant" => FillSpec::Constant(value),
        "uniform" => FillSpec::Uniform { lo, hi, seed },
        "gaussian" => FillSpec::Gaussian { mean, std, seed },
        "relu-sparse" => FillSpec::ReluSparse { sparsity, seed },
        other => return Err(PyValueError::new_err(format!("unknown fill {other:?}"))),
    };
    Ok(PyTensor {
        inner: tensor::make_tensor(&dims, spec).map_err(py_err)?,
    })
}

/// Compresses `t` and returns `(stream_bytes, report)`.
#[pyfunction]
#[pyo3(signature = (t, eb, radius = DEFAULT_RADIUS, preserve_zeros = true))]
fn compress<'py>(py: Python<'py>, t: &PyTensor, eb: f64, radius: u32, preserve_zeros: bool) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyDict>)> {
    let params = CodecParams::new(eb).with_radius(radius).with_preserve_zeros(preserve_zeros);
    let (c, r) = codec::compress(&t.inner, params).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("original_bytes", r.original_bytes)?;
    d.set_item("compressed_bytes", r.compressed_bytes)?;
    d.set_item("ratio", r.ratio)?;
    d.set_item("outlier_fraction", r.outlier_fraction)?;
    d.set_item("entropy_bits_per_symbol", r.codes_entropy_bits_per_symbol)?;
    Ok((PyBytes::new(py, &c.to_bytes()), d))
}

#[pyfunction]
fn decompress(stream: &[u8]) -> PyResult<PyTensor> {
    let c = CompressedActivation::from_bytes(stream).map_err(py_err)?;
    Ok(PyTensor {
        inner: codec::decompress(&c).map_err(py_err)?,
    })
}

#[pyfunction]
fn compare<'py>(py: Python<'py>, a: &PyTensor, b: &PyTensor, eb: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = tensor::compare(&a.inner, &b.inner, eb).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("max_abs_diff", r.max_abs_diff)?;
    d.set_item("mean_abs_diff", r.mean_abs_diff)?;
    d.set_item("count_exceeding", r.count_exceeding)?;
    d.set_item("flushed_zeros", r.flushed_zeros)?;
    Ok(d)
}

#[pyfunction]
fn predict_sigma(a: f64, l_bar: f64, n: usize, r: f64, eb: f64) -> PyResult<f64> {
    errprop::predict_sigma(a, l_bar, n, r, eb).map_err(py_err)
}

/// Error bound for a target sigma, or `None` when the layer should be
/// skipped.
#[pyfunction]
fn estimate_eb(sigma_target: f64, a: f64, l_bar: f64, n: usize, r: f64) -> PyResult<Option<f64>> {
    Ok(match errprop::estimate_eb(sigma_target, a, l_bar, n, r).map_err(py_err)? {
        EbEstimate::Bound(eb) => Some(eb),
        EbEstimate::Skip(_) => None,
    })
}

#[pyfunction]
#[pyo3(signature = (t, eb, preserve_zeros = true, seed = 0))]
fn inject_uniform_error(t: &PyTensor, eb: f64, preserve_zeros: bool, seed: u64) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: errprop::inject_uniform_error(&t.inner, eb, preserve_zeros, seed).map_err(py_err)?,
    })
}

/// Monte Carlo estimate of the coefficient; returns `(a_hat, ci95_half_width)`.
#[pyfunction]
#[pyo3(signature = (layer_shape = "3x8x8,k3x3,s1,o16", batch = 64, eb = 1e-3, nonzero_ratio = 0.5, trials = 30, seed = 0, draws = 32))]
fn calibrate(layer_shape: &str, batch: usize, eb: f64, nonzero_ratio: f64, trials: usize, seed: u64, draws: usize) -> PyResult<(f64, f64)> {
    let shape: LayerShape = layer_shape.parse().map_err(py_err)?;
    let mut cfg = ProbeConfig::new(shape, batch, eb);
    cfg.nonzero_ratio = nonzero_ratio;
    cfg.draws = draws;
    let c = calibrate_a(&cfg, trials, seed).map_err(py_err)?;
    Ok((c.a_hat, c.half_width))
}

#[pymodule]
fn comet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(make_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(decompress, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(predict_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_eb, m)?)?;
    m.add_function(wrap_pyfunction!(inject_uniform_error, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add("DEFAULT_RADIUS", DEFAULT_RADIUS)?;
    Ok(())
}
