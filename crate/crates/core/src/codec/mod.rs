//! Error-bounded lossy codec for activation tensors.
//!
//! Pipeline: values are rounded to `f32`, mapped onto the `2 * eb` lattice
//! (dual quantization), predicted with a 1-D Lorenzo predictor, and the
//! resulting codes are Huffman coded. Elements the lattice cannot carry are
//! stored verbatim as outliers. The Huffman payload is optionally deflated
//! when that makes it smaller.
//!
//! On decompression, the zero-preserving filter sets every reconstructed
//! value with `|v| <= eb` to exactly zero. It runs after the whole
//! prediction chain has been rebuilt, so the chain never sees filtered values.

mod format;
pub mod huffman;
pub mod lorenzo;
pub mod quantize;

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

pub use format::{COMPRESSED_MAGIC, COMPRESSED_VERSION};
pub use huffman::{entropy_bits, huffman_decode, huffman_encode, BitStream};
pub use lorenzo::{lorenzo_decode, lorenzo_encode, LorenzoCodes};
pub use quantize::prequantize;

use crate::error::{format as format_err, Result};
use crate::tensor::{Precision, Tensor};

pub const DEFAULT_RADIUS: u32 = 1 << 15;

/// Outlier fraction above which [`CompressionReport::outlier_warning`] is set.
pub const OUTLIER_WARNING_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Lorenzo1d,
}

impl Predictor {
    pub fn id(self) -> u8 {
        match self {
            Predictor::Lorenzo1d => 0,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Predictor::Lorenzo1d),
            other => Err(format_err(format!("unknown predictor id {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecParams {
    pub eb: f64,
    pub radius: u32,
    pub predictor: Predictor,
    pub preserve_zeros: bool,
}

impl CodecParams {
    pub fn new(eb: f64) -> Self {
        CodecParams {
            eb,
            radius: DEFAULT_RADIUS,
            predictor: Predictor::Lorenzo1d,
            preserve_zeros: true,
        }
    }

    pub fn with_radius(mut self, radius: u32) -> Self {
        self.radius = radius;
        self
    }

    pub fn with_preserve_zeros(mut self, on: bool) -> Self {
        self.preserve_zeros = on;
        self
    }

    pub fn alphabet_size(&self) -> usize {
        2 * self.radius as usize
    }

    pub fn validate(&self) -> Result<()> {
        quantize::check_eb(self.eb)?;
        lorenzo::check_radius(self.radius)
    }
}

/// Self-describing compressed tensor. See [`CompressedActivation::to_bytes`]
/// for the byte layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedActivation {
    pub params: CodecParams,
    pub dims: Vec<usize>,
    pub precision: Precision,
    /// `(flat index, value)` pairs, ascending by index.
    pub outliers: Vec<(u64, f32)>,
    pub symbol_count: u64,
    /// Code length per alphabet symbol.
    pub code_lengths: Vec<u16>,
    pub payload_bits: u64,
    /// Whether `payload` holds a deflated Huffman bitstream.
    pub deflated: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    pub ratio: f64,
    pub outlier_fraction: f64,
    pub codes_entropy_bits_per_symbol: f64,
    /// Huffman payload bits per symbol, before any deflate pass.
    pub payload_bits_per_symbol: f64,
    pub outlier_warning: bool,
}

pub fn compress(t: &Tensor, params: CodecParams) -> Result<(CompressedActivation, CompressionReport)> {
    params.validate()?;
    let lattice = prequantize(t, params.eb)?;
    let codes = lorenzo_encode(&lattice, params.radius)?;
    let outliers: Vec<(u64, f32)> = codes
        .outliers
        .iter()
        .map(|&i| (i as u64, t.data()[i] as f32))
        .collect();
    let alphabet = params.alphabet_size();
    let (code_lengths, bits) = huffman_encode(&codes.symbols, alphabet)?;
    let entropy = entropy_bits(&codes.symbols, alphabet);

    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&bits.bytes)?;
    let packed = enc.finish()?;
    let (deflated, payload) = if packed.len() < bits.bytes.len() {
        (true, packed)
    } else {
        (false, bits.bytes)
    };

    let compressed = CompressedActivation {
        params,
        dims: t.dims().to_vec(),
        precision: t.precision(),
        outliers,
        symbol_count: codes.symbols.len() as u64,
        code_lengths,
        payload_bits: bits.bit_len,
        deflated,
        payload,
    };
    let n = t.len();
    let original_bytes = n * t.precision().bytes();
    let compressed_bytes = compressed.encoded_len();
    let outlier_fraction = compressed.outliers.len() as f64 / n as f64;
    let report = CompressionReport {
        original_bytes,
        compressed_bytes,
        ratio: original_bytes as f64 / compressed_bytes as f64,
        outlier_fraction,
        codes_entropy_bits_per_symbol: entropy,
        payload_bits_per_symbol: bits.bit_len as f64 / n as f64,
        outlier_warning: outlier_fraction > OUTLIER_WARNING_FRACTION,
    };
    Ok((compressed, report))
}

pub fn decompress(c: &CompressedActivation) -> Result<Tensor> {
    c.params.validate()?;
    let n: usize = crate::tensor::check_dims(&c.dims).map_err(|e| format_err(e.to_string()))?;
    if c.symbol_count != n as u64 {
        return Err(format_err("symbol count does not match dims"));
    }
    if c.code_lengths.len() != c.params.alphabet_size() {
        return Err(format_err("code-length table does not match the alphabet"));
    }
    let bytes = if c.deflated {
        let mut out = Vec::new();
        DeflateDecoder::new(&c.payload[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(format!("corrupt deflate payload: {e}")))?;
        out
    } else {
        c.payload.clone()
    };
    let bits = BitStream {
        bytes,
        bit_len: c.payload_bits,
    };
    let symbols = huffman_decode(&c.code_lengths, &bits, n)?;

    let eb = c.params.eb;
    let mut next_outlier = c.outliers.iter().peekable();
    let mut mismatch = false;
    let lattice = lorenzo_decode(&symbols, c.params.radius, |i| match next_outlier.next() {
        Some(&(idx, v)) if idx == i as u64 => quantize::lattice_index(v as f64, eb),
        _ => {
            mismatch = true;
            None
        }
    })?;
    if mismatch || next_outlier.next().is_some() {
        return Err(format_err("outlier list inconsistent with code stream"));
    }

    let mut values: Vec<f64> = lattice
        .iter()
        .map(|q| q.map_or(0.0, |q| quantize::reconstruct(q, eb)))
        .collect();
    for &(idx, v) in &c.outliers {
        values[idx as usize] = v as f64;
    }
    if c.params.preserve_zeros {
        for v in &mut values {
            if v.abs() <= eb {
                *v = 0.0;
            }
        }
    }
    let t = Tensor::new(c.dims.clone(), values)?;
    Ok(t.with_precision(c.precision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{compare, make_tensor, FillSpec};

    fn activation_like(n: usize, seed: u64) -> Tensor {
        make_tensor(&[n], FillSpec::ReluSparse { sparsity: 0.5, seed })
            .unwrap()
            .with_precision(Precision::F32)
    }

    fn assert_bound(x: &Tensor, y: &Tensor, eb: f64, preserve: bool) {
        for (&a, &b) in x.data().iter().zip(y.data()) {
            let ok = (a - b).abs() <= eb || (preserve && b == 0.0 && a.abs() <= 2.0 * eb);
            assert!(ok, "x={a} x_hat={b} eb={eb}");
            if preserve && a == 0.0 {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn all_zero_tensor_compresses_far() {
        let t = Tensor::zeros(vec![10_000]).unwrap().with_precision(Precision::F32);
        let (c, report) = compress(&t, CodecParams::new(1e-3)).unwrap();
        assert!(report.ratio > 100.0, "ratio {}", report.ratio);
        assert_eq!(c.payload_bits, 10_000);
        assert_eq!(report.codes_entropy_bits_per_symbol, 0.0);
        let back = decompress(&c).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
    }

    #[test]
    fn activation_like_round_trip_at_1e4() {
        let t = activation_like(50_000, 11);
        let eb = 1e-4;
        let (c, report) = compress(&t, CodecParams::new(eb)).unwrap();
        let back = decompress(&c).unwrap();
        assert_bound(&t, &back, eb, true);
        assert!(report.ratio > 1.0);
        let r = compare(&t, &back, eb).unwrap();
        assert_eq!(r.count_exceeding_unflushed, 0);
    }

    #[test]
    fn deterministic_bytes() {
        let t = activation_like(5_000, 3);
        let p = CodecParams::new(1e-3);
        let a = compress(&t, p).unwrap().0.to_bytes();
        let b = compress(&t, p).unwrap().0.to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn plain_bound_without_filter() {
        let t = make_tensor(&[20_000], FillSpec::Gaussian { mean: 0.0, std: 0.01, seed: 5 })
            .unwrap()
            .with_precision(Precision::F32);
        let eb = 1e-3;
        let (c, _) = compress(&t, CodecParams::new(eb).with_preserve_zeros(false)).unwrap();
        let back = decompress(&c).unwrap();
        let r = compare(&t, &back, eb).unwrap();
        assert_eq!(r.count_exceeding, 0);
    }

    #[test]
    fn filter_flushes_small_outliers() {
        // A tiny value after a huge one is an outlier stored exactly; the
        // filter still zeroes it because |v| <= eb.
        let t = Tensor::from_f32(vec![3], &[1.0e6, 4.0e-4, 0.0]).unwrap();
        let eb = 1e-3;
        let (c, _) = compress(&t, CodecParams::new(eb).with_radius(4)).unwrap();
        assert!(c.outliers.iter().any(|&(i, _)| i == 1));
        let back = decompress(&c).unwrap();
        assert_eq!(back.data()[1], 0.0);
        assert_eq!(back.data()[0], 1.0e6);
        let (c, _) = compress(&t, CodecParams::new(eb).with_radius(4).with_preserve_zeros(false)).unwrap();
        assert_eq!(decompress(&c).unwrap().data()[1], 4.0e-4f32 as f64);
    }

    #[test]
    fn large_values_beyond_two_eb_stay_in_bound() {
        let t = make_tensor(&[30_000], FillSpec::Uniform { lo: -50.0, hi: 50.0, seed: 9 })
            .unwrap()
            .with_precision(Precision::F32);
        let eb = 1e-2;
        let (c, report) = compress(&t, CodecParams::new(eb)).unwrap();
        let back = decompress(&c).unwrap();
        for (&a, &b) in t.data().iter().zip(back.data()) {
            if a.abs() > 2.0 * eb {
                assert!((a - b).abs() <= eb);
            }
        }
        assert!(!report.outlier_warning);
    }

    #[test]
    fn outlier_heavy_input_warns() {
        // Alternating huge swings with radius 2 make nearly everything an outlier.
        let data: Vec<f32> = (0..1000).map(|i| if i % 2 == 0 { 100.0 } else { -100.0 }).collect();
        let t = Tensor::from_f32(vec![1000], &data).unwrap();
        let (c, report) = compress(&t, CodecParams::new(1e-3).with_radius(2)).unwrap();
        assert!(report.outlier_warning);
        assert_eq!(decompress(&c).unwrap().data(), t.data());
    }

    #[test]
    fn rejects_bad_params_and_nan() {
        let t = Tensor::zeros(vec![4]).unwrap();
        assert!(compress(&t, CodecParams::new(0.0)).is_err());
        assert!(compress(&t, CodecParams::new(1e-3).with_radius(1)).is_err());
        let t = Tensor::new(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(compress(&t, CodecParams::new(1e-3)).is_err());
    }

    #[test]
    fn entropy_sanity() {
        let t = activation_like(40_000, 21);
        let (_, report) = compress(&t, CodecParams::new(1e-3)).unwrap();
        assert!(report.payload_bits_per_symbol <= report.codes_entropy_bits_per_symbol + 1.0);
    }
}
