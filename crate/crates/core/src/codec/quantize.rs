//! Dual quantization onto the `2 * eb` lattice.

use crate::error::{param, Result};
use crate::tensor::Tensor;

/// Largest lattice index accepted; anything larger is stored as an outlier.
const LATTICE_LIMIT: f64 = (1u64 << 62) as f64;

pub(crate) fn check_eb(eb: f64) -> Result<()> {
    if eb > 0.0 && eb.is_finite() {
        Ok(())
    } else {
        Err(param(format!("error bound must be positive and finite, got {eb}")))
    }
}

/// Value the decompressor produces for lattice index `q`.
#[inline]
pub(crate) fn reconstruct(q: i64, eb: f64) -> f64 {
    ((q as f64) * (2.0 * eb)) as f32 as f64
}

/// Lattice index of a single payload value, or `None` when the value cannot
/// be represented within `eb` (too large, or floating-point rounding pushed
/// the reconstruction past the bound). Compressor and decompressor both call
/// this, so outlier chaining stays in sync.
#[inline]
pub(crate) fn lattice_index(v: f64, eb: f64) -> Option<i64> {
    let scaled = (v / (2.0 * eb)).round();
    if !scaled.is_finite() || scaled.abs() >= LATTICE_LIMIT {
        return None;
    }
    let q = scaled as i64;
    if (v - reconstruct(q, eb)).abs() <= eb {
        Some(q)
    } else {
        None
    }
}

/// Rounds each value to the 32-bit payload precision and maps it to
/// `round(v / (2 * eb))`, half away from zero.
pub fn prequantize(t: &Tensor, eb: f64) -> Result<Vec<Option<i64>>> {
    check_eb(eb)?;
    t.ensure_finite()?;
    Ok(t.data()
        .iter()
        .map(|&x| lattice_index(x as f32 as f64, eb))
        .collect())
}
