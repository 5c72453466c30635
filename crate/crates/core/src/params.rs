//! Parameter boxes and the affine normalizations shared by dataset,
//! surrogate and inversion.

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

/// Axis-aligned admissible box `𝒫 = Π [lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("parameter box bounds must be non-empty and equal length"));
        }
        for (k, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::invalid(format!("empty admissible interval on axis {k}: [{l}, {h}]")));
            }
        }
        Ok(ParamBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(&self.lo).zip(&self.hi).all(|((x, l), h)| x >= l && x <= h)
    }

    /// Coordinate-wise clamp (the Euclidean projection onto the box).
    pub fn project(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.lo).zip(&self.hi).map(|((x, l), h)| x.clamp(*l, *h)).collect()
    }

    pub(crate) fn write(&self, w: &mut BinWriter) {
        w.u64(self.dim() as u64).f64s(&self.lo).f64s(&self.hi);
    }

    pub(crate) fn read(r: &mut BinReader) -> Result<Self> {
        let d = r.count(16)?;
        let lo = r.f64s(d)?;
        let hi = r.f64s(d)?;
        ParamBox::new(lo, hi).map_err(|e| Error::corrupt(e.to_string()))
    }
}

/// Per-coordinate affine map of `[lo, hi]` onto `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNorm {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamNorm {
    /// Fitted to the coordinate-wise min/max of `samples`.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let d = samples.first().ok_or_else(|| Error::invalid("cannot fit normalization to no samples"))?.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in samples {
            for k in 0..d {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(h > l)) {
            return Err(Error::invalid("degenerate parameter range in training split"));
        }
        Ok(ParamNorm { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.lo).zip(&self.hi).map(|((x, l), h)| 2.0 * (x - l) / (h - l) - 1.0).collect()
    }

    pub fn denormalize(&self, q: &[f64]) -> Vec<f64> {
        q.iter().zip(&self.lo).zip(&self.hi).map(|((x, l), h)| l + 0.5 * (x + 1.0) * (h - l)).collect()
    }

    /// `dp/dq` per coordinate.
    pub fn scale(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    /// Image of a physical box in normalized coordinates.
    pub fn normalize_box(&self, b: &ParamBox) -> ParamBox {
        ParamBox {
            lo: self.normalize(&b.lo),
            hi: self.normalize(&b.hi),
        }
    }

    pub(crate) fn write(&self, w: &mut BinWriter) {
        w.u64(self.dim() as u64).f64s(&self.lo).f64s(&self.hi);
    }

    pub(crate) fn read(r: &mut BinReader) -> Result<Self> {
        let d = r.count(16)?;
        let n = ParamNorm { lo: r.f64s(d)?, hi: r.f64s(d)? };
        if n.lo.iter().zip(&n.hi).any(|(l, h)| !(h > l)) {
            return Err(Error::corrupt("degenerate parameter normalization"));
        }
        Ok(n)
    }
}

/// Global affine map of signal values: `(x − center) / halfrange`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalNorm {
    pub center: f64,
    pub halfrange: f64,
}

impl SignalNorm {
    /// Maps the min/max over all values onto `[−1, 1]`.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) || !(hi - lo).is_finite() {
            return Err(Error::invalid("training signals are constant or empty"));
        }
        Ok(SignalNorm {
            center: 0.5 * (lo + hi),
            halfrange: 0.5 * (hi - lo),
        })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.center) / self.halfrange
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.center + self.halfrange * y
    }
}
