//! 1-D Lorenzo prediction over the flattened lattice.
//!
//! The prediction for element `i` is the lattice value of element `i - 1`
//! (0 for the first element). Predictable elements emit `delta + radius`;
//! symbol 0 is reserved to mark an outlier in the code stream.

use crate::error::{format, param, Result};

pub const OUTLIER_SYMBOL: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LorenzoCodes {
    /// One symbol per element, each in `[0, 2 * radius)`.
    pub symbols: Vec<u32>,
    /// Flat indices of outlier elements, ascending.
    pub outliers: Vec<usize>,
}

pub(crate) fn check_radius(radius: u32) -> Result<()> {
    if (2..=(1 << 30)).contains(&radius) {
        Ok(())
    } else {
        Err(param(format!("radius must be in [2, 2^30], got {radius}")))
    }
}

/// `None` entries (off-lattice values) always become outliers and leave the
/// prediction chain unchanged. An on-lattice outlier (delta too large)
/// continues the chain with its own lattice value.
pub fn lorenzo_encode(lattice: &[Option<i64>], radius: u32) -> Result<LorenzoCodes> {
    check_radius(radius)?;
    let r = radius as i128;
    let mut symbols = Vec::with_capacity(lattice.len());
    let mut outliers = Vec::new();
    let mut pred: i64 = 0;
    for (i, q) in lattice.iter().enumerate() {
        match *q {
            Some(q) => {
                let delta = q as i128 - pred as i128;
                if delta.abs() < r {
                    symbols.push((delta + r) as u32);
                } else {
                    symbols.push(OUTLIER_SYMBOL);
                    outliers.push(i);
                }
                pred = q;
            }
            None => {
                symbols.push(OUTLIER_SYMBOL);
                outliers.push(i);
            }
        }
    }
    Ok(LorenzoCodes { symbols, outliers })
}

/// Inverse of [`lorenzo_encode`]. `outlier_lattice` yields, for each outlier
/// in order, the lattice value it contributes to the chain (`None` keeps the
/// previous prediction). Returned entries for outliers are `None`.
pub fn lorenzo_decode(
    symbols: &[u32],
    radius: u32,
    mut outlier_lattice: impl FnMut(usize) -> Option<i64>,
) -> Result<Vec<Option<i64>>> {
    check_radius(radius)?;
    let r = radius as i64;
    let mut out = Vec::with_capacity(symbols.len());
    let mut pred: i64 = 0;
    for (i, &s) in symbols.iter().enumerate() {
        if s == OUTLIER_SYMBOL {
            if let Some(q) = outlier_lattice(i) {
                pred = q;
            }
            out.push(None);
        } else {
            if s >= 2 * radius {
                return Err(format(format!("symbol {s} outside alphabet")));
            }
            let q = pred
                .checked_add(s as i64 - r)
                .ok_or_else(|| format("lattice overflow while decoding"))?;
            out.push(Some(q));
            pred = q;
        }
    }
    Ok(out)
}
