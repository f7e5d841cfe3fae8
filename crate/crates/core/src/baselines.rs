//! Non-learned baselines: persistence nowcasting and Z-R rain-rate estimation.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dataset::{PrecipClass, LEADS};
use crate::grid::RadarGrid;

/// Rain rates below this (mm/hr) are excluded from Z-R fitting.
pub const FIT_FLOOR_MM_HR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("Z-R parameters must be positive, got a={a}, b={b}")]
    InvalidParams { a: f64, b: f64 },
    #[error("need at least 2 pairs with rate >= {FIT_FLOOR_MM_HR} mm/hr, got {0}")]
    InsufficientData(usize),
    #[error("all usable rates are equal; slope is undetermined")]
    Degenerate,
    #[error("malformed Z-R parameter file: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("pixel ({row}, {col}) outside {height}x{width} frame")]
    Pixel {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

/// `Z = a · R^b` with linear reflectivity Z (mm⁶/m³) and rate R (mm/hr).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZrParams {
    pub a: f64,
    pub b: f64,
}

impl ZrParams {
    /// The widely used Marshall-Palmer-like law fitted to summer data.
    pub const FITTED: ZrParams = ZrParams { a: 200.0, b: 1.49 };

    pub fn new(a: f64, b: f64) -> Result<Self, BaselineError> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(BaselineError::InvalidParams { a, b });
        }
        Ok(Self { a, b })
    }

    /// Reflectivity (dBZ) producing rate `r`.
    pub fn dbz_for_rate(&self, r: f64) -> f64 {
        10.0 * (self.a * r.powf(self.b)).log10()
    }

    pub fn to_text(&self) -> String {
        format!("a={:?}\nb={:?}\n", self.a, self.b)
    }

    pub fn from_text(text: &str) -> Result<Self, BaselineError> {
        let (mut a, mut b) = (None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BaselineError::Parse(format!("expected key=value, got {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| BaselineError::Parse(format!("{k}: {e}")))?;
            match k.trim() {
                "a" => a = Some(v),
                "b" => b = Some(v),
                other => return Err(BaselineError::Parse(format!("unknown key {other:?}"))),
            }
        }
        match (a, b) {
            (Some(a), Some(b)) => Self::new(a, b),
            _ => Err(BaselineError::Parse("both a and b are required".into())),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BaselineError> {
        fs::write(path, self.to_text()).map_err(|e| BaselineError::Io(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, BaselineError> {
        let text = fs::read_to_string(path).map_err(|e| BaselineError::Io(e.to_string()))?;
        Self::from_text(&text)
    }
}

/// Rain rate (mm/hr) from reflectivity: `R = (10^(dBZ/10) / a)^(1/b)`; NaN → 0.
pub fn zr_rate(dbz: f64, params: ZrParams) -> f64 {
    if dbz.is_nan() {
        return 0.0;
    }
    (10f64.powf(dbz / 10.0) / params.a).powf(1.0 / params.b)
}

/// Least-squares fit of `dBZ/10 = log₁₀ a + b · log₁₀ R` over pairs with R ≥ 0.1 mm/hr.
pub fn fit_zr(pairs: &[(f64, f64)]) -> Result<ZrParams, BaselineError> {
    let usable: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(d, r)| d.is_finite() && r.is_finite() && *r >= FIT_FLOOR_MM_HR)
        .map(|&(d, r)| (r.log10(), d / 10.0))
        .collect();
    if usable.len() < 2 {
        return Err(BaselineError::InsufficientData(usable.len()));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= f64::EPSILON * n {
        return Err(BaselineError::Degenerate);
    }
    let b = sxy / sxx;
    let a = 10f64.powf(my - b * mx);
    ZrParams::new(a, b)
}

/// Hourly accumulation estimate at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlyEstimate {
    pub accum_mm: f64,
    /// Every frame was missing at the pixel.
    pub all_missing: bool,
}

/// Mean Z-R rate over the frames at `pixel`, read as millimetres over one hour.
pub fn zr_hourly_estimate(
    frames: &[impl AsRef<RadarGrid>],
    params: ZrParams,
    pixel: (usize, usize),
) -> Result<HourlyEstimate, BaselineError> {
    let (row, col) = pixel;
    let mut total = 0.0;
    let mut missing = 0;
    for f in frames {
        let f = f.as_ref();
        if row >= f.height() || col >= f.width() {
            return Err(BaselineError::Pixel {
                row,
                col,
                height: f.height(),
                width: f.width(),
            });
        }
        let v = f.get(row, col);
        if v.is_nan() {
            missing += 1;
        }
        total += zr_rate(v as f64, params);
    }
    let all_missing = missing == frames.len();
    Ok(HourlyEstimate {
        accum_mm: if frames.is_empty() { 0.0 } else { total / frames.len() as f64 },
        all_missing,
    })
}

/// Predicts each station's current class at every lead time.
pub fn persistence_nowcast(current: &[PrecipClass]) -> Vec<[PrecipClass; LEADS]> {
    current.iter().map(|&c| [c; LEADS]).collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fit_recovers_generating_law(a in 20.0f64..2000.0, b in 0.8f64..3.0, r0 in 0.1f64..2.0) {
            let law = ZrParams::new(a, b).unwrap();
            let pairs: Vec<(f64, f64)> = (0..12).map(|i| r0 * 1.6f64.powi(i)).map(|r| (law.dbz_for_rate(r), r)).collect();
            let fit = fit_zr(&pairs).unwrap();
            prop_assert!((fit.a - a).abs() / a < 1e-8 && (fit.b - b).abs() / b < 1e-10, "{:?}", fit);
        }

        #[test]
        fn zr_rate_is_monotone(d1 in -20.0f64..80.0, d2 in -20.0f64..80.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(zr_rate(lo, ZrParams::FITTED) <= zr_rate(hi, ZrParams::FITTED));
        }
    }
}
