//! Noise factors k_j: how much the reference-dose noise image is scaled to
//! hit each lower dose level.

use crate::error::{Error, Result};

/// Dose levels as either tube currents (reference = highest current first)
/// or measured noise indices (reference = lowest index first).
#[derive(Debug, Clone, PartialEq)]
pub enum DoseLevels {
    TubeCurrents(Vec<f64>),
    NoiseIndices(Vec<f64>),
}

/// Factors for the lower-dose levels, one per non-reference entry. Lower
/// current means noisier, so current ratios invert; noise indices are
/// already "noisier is bigger" and divide directly. One-decimal rounding
/// mimics clinical protocol tables when requested.
pub fn set_noise_factors(levels: &DoseLevels, round_to_tenth: bool) -> Result<Vec<f64>> {
    let (values, invert) = match levels {
        DoseLevels::TubeCurrents(v) => (v, true),
        DoseLevels::NoiseIndices(v) => (v, false),
    };
    if values.is_empty() {
        return Err(Error::Invalid("no dose levels given".into()));
    }
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invalid(format!(
            "dose levels must be positive and finite: {values:?}"
        )));
    }
    let reference = values[0];
    for pair in values.windows(2) {
        let ordered = if invert {
            pair[0] > pair[1]
        } else {
            pair[0] < pair[1]
        };
        if !ordered {
            return Err(Error::Invalid(format!(
                "dose levels must start at the reference and grow strictly noisier: {values:?}"
            )));
        }
    }
    Ok(values[1..]
        .iter()
        .map(|&v| {
            let k = if invert { reference / v } else { v / reference };
            if round_to_tenth {
                (k * 10.0).round() / 10.0
            } else {
                k
            }
        })
        .collect())
}
