//! `CMTZ` container layout, all integers little-endian:
//!
//! ```text
//! "CMTZ" | version u8 = 1
//! eb f64 | radius u32 | predictor u8 | flags u8 (bit0 preserve_zeros, bit1 deflated payload)
//! precision u8 | rank u8 | rank x u64 extents
//! outlier count u64 | count x (index u64, value f32)
//! symbol count u64
//! code-length table: run count u32 | runs x (run length u32, code length u16)
//! payload bit length u64
//! [payload byte length u64, only when deflated]
//! payload bytes (ceil(bits / 8) when not deflated)
//! CRC32 of all preceding bytes, u32
//! ```

use crate::error::{format as format_err, Result};
use crate::tensor::{read_dims, write_dims};

use super::{CodecParams, CompressedActivation, Predictor};

pub const COMPRESSED_MAGIC: &[u8; 4] = b"CMTZ";
pub const COMPRESSED_VERSION: u8 = 1;

const FLAG_PRESERVE_ZEROS: u8 = 1;
const FLAG_DEFLATED: u8 = 2;

fn rle(lengths: &[u16]) -> Vec<(u32, u16)> {
    let mut runs: Vec<(u32, u16)> = Vec::new();
    for &l in lengths {
        match runs.last_mut() {
            Some((n, v)) if *v == l => *n += 1,
            _ => runs.push((1, l)),
        }
    }
    runs
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err("truncated CMTZ stream"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| format_err("length exceeds usize"))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl CompressedActivation {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(COMPRESSED_MAGIC);
        out.push(COMPRESSED_VERSION);
        out.extend_from_slice(&self.params.eb.to_le_bytes());
        out.extend_from_slice(&self.params.radius.to_le_bytes());
        out.push(self.params.predictor.id());
        let mut flags = 0;
        if self.params.preserve_zeros {
            flags |= FLAG_PRESERVE_ZEROS;
        }
        if self.deflated {
            flags |= FLAG_DEFLATED;
        }
        out.push(flags);
        write_dims(&mut out, self.precision, &self.dims).expect("dims validated at construction");
        out.extend_from_slice(&(self.outliers.len() as u64).to_le_bytes());
        for &(i, v) in &self.outliers {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        let runs = rle(&self.code_lengths);
        out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for (n, l) in runs {
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.payload_bits.to_le_bytes());
        if self.deflated {
            out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        let runs = rle(&self.code_lengths).len();
        4 + 1
            + 8 + 4 + 1 + 1
            + 2 + 8 * self.dims.len()
            + 8 + 12 * self.outliers.len()
            + 8
            + 4 + 6 * runs
            + 8
            + if self.deflated { 8 } else { 0 }
            + self.payload.len()
            + 4
    }

    /// Parses and validates a `CMTZ` buffer. The checksum is verified before
    /// any field is interpreted.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 9 {
            return Err(format_err("truncated CMTZ stream"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if &body[..4] != COMPRESSED_MAGIC {
            return Err(format_err("bad magic, expected CMTZ"));
        }
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(format_err("checksum mismatch"));
        }
        let mut c = Cursor { buf: body, pos: 4 };
        let version = c.u8()?;
        if version != COMPRESSED_VERSION {
            return Err(format_err(format!("unsupported CMTZ version {version}")));
        }
        let eb = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
        let radius = c.u32()?;
        let predictor = Predictor::from_id(c.u8()?)?;
        let flags = c.u8()?;
        if flags & !(FLAG_PRESERVE_ZEROS | FLAG_DEFLATED) != 0 {
            return Err(format_err(format!("unknown flags {flags:#04x}")));
        }
        let params = CodecParams {
            eb,
            radius,
            predictor,
            preserve_zeros: flags & FLAG_PRESERVE_ZEROS != 0,
        };
        params.validate().map_err(|e| format_err(e.to_string()))?;
        let deflated = flags & FLAG_DEFLATED != 0;

        let mut dims_reader = &body[c.pos..];
        let before = dims_reader.len();
        let (precision, dims) = read_dims(&mut dims_reader)?;
        c.pos += before - dims_reader.len();

        let n_outliers = c.len()?;
        if n_outliers > c.remaining() / 12 {
            return Err(format_err("outlier count exceeds stream"));
        }
        let mut outliers = Vec::with_capacity(n_outliers);
        let mut last: Option<u64> = None;
        for _ in 0..n_outliers {
            let i = c.u64()?;
            let v = f32::from_le_bytes(c.take(4)?.try_into().unwrap());
            if last.is_some_and(|l| l >= i) {
                return Err(format_err("outlier indices not ascending"));
            }
            last = Some(i);
            outliers.push((i, v));
        }
        let symbol_count = c.u64()?;

        let alphabet = params.alphabet_size();
        let n_runs = c.u32()? as usize;
        if n_runs > c.remaining() / 6 {
            return Err(format_err("code-length run count exceeds stream"));
        }
        let mut code_lengths = Vec::with_capacity(alphabet);
        for _ in 0..n_runs {
            let n = c.u32()? as usize;
            let l = c.u16()?;
            if code_lengths.len() + n > alphabet {
                return Err(format_err("code-length table longer than alphabet"));
            }
            code_lengths.resize(code_lengths.len() + n, l);
        }
        if code_lengths.len() != alphabet {
            return Err(format_err("code-length table shorter than alphabet"));
        }

        let payload_bits = c.u64()?;
        let payload_len = if deflated {
            c.len()?
        } else {
            usize::try_from(payload_bits.div_ceil(8)).map_err(|_| format_err("payload too large"))?
        };
        let payload = c.take(payload_len)?.to_vec();
        if c.remaining() != 0 {
            return Err(format_err("trailing bytes before checksum"));
        }
        Ok(CompressedActivation {
            params,
            dims,
            precision,
            outliers,
            symbol_count,
            code_lengths,
            payload_bits,
            deflated,
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{compress, decompress, CodecParams};
    use super::*;
    use crate::tensor::{make_tensor, FillSpec, Precision, Tensor};
    use proptest::prelude::*;

    #[test]
    fn encoded_len_matches() {
        for seed in 0..4 {
            let t = make_tensor(&[3, 50], FillSpec::ReluSparse { sparsity: 0.4, seed })
                .unwrap()
                .with_precision(Precision::F32);
            let (c, report) = compress(&t, CodecParams::new(1e-2).with_radius(8)).unwrap();
            assert_eq!(c.to_bytes().len(), c.encoded_len());
            assert_eq!(report.compressed_bytes, c.encoded_len());
        }
    }

    #[test]
    fn header_prefix() {
        let t = Tensor::from_f32(vec![2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let (c, _) = compress(&t, CodecParams::new(0.25)).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"CMTZ");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..13], &0.25f64.to_le_bytes());
        assert_eq!(&b[13..17], &(1u32 << 15).to_le_bytes());
        assert_eq!(b[17], 0);
        assert_eq!(b[18] & 1, 1);
        assert_eq!(&b[19..21], &[4, 2]);
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let t = make_tensor(&[200], FillSpec::Uniform { lo: -1.0, hi: 1.0, seed: 2 })
            .unwrap()
            .with_precision(Precision::F32);
        let (c, _) = compress(&t, CodecParams::new(1e-3)).unwrap();
        let b = c.to_bytes();
        for cut in [0, 5, 20, b.len() / 2, b.len() - 1] {
            assert!(CompressedActivation::from_bytes(&b[..cut]).is_err());
        }
        let mut bad = b.clone();
        bad[30] ^= 0x10;
        assert!(CompressedActivation::from_bytes(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn container_round_trip(
            n in 1usize..600,
            seed in any::<u64>(),
            eb_exp in 1i32..6,
            radius in 2u32..70_000,
            preserve in any::<bool>(),
        ) {
            let t = make_tensor(&[n], FillSpec::Gaussian { mean: 0.0, std: 1.0, seed })
                .unwrap()
                .with_precision(Precision::F32);
            let params = CodecParams::new(10f64.powi(-eb_exp)).with_radius(radius).with_preserve_zeros(preserve);
            let (c, _) = compress(&t, params).unwrap();
            let back = CompressedActivation::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(decompress(&back).unwrap(), decompress(&c).unwrap());
        }
    }
}
