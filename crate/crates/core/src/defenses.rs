//! Embedding-level defenses applied by the active party to a received embedding before
//! aggregation.

use rand_distr::{Distribution, Normal};

use crate::matrix::Matrix;
use crate::rng::Rng64;
use crate::{Error, Result};

/// Per-dimension `(min, max)` ranges for discretization.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteCalibration {
    PerDimension(Vec<(f64, f64)>),
    Shared(f64, f64),
}

impl DiscreteCalibration {
    pub fn per_dimension(embeddings: &Matrix) -> Self {
        DiscreteCalibration::PerDimension(crate::data::column_bounds(embeddings))
    }

    pub fn shared(embeddings: &Matrix) -> Self {
        let s = embeddings.as_slice();
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        DiscreteCalibration::Shared(lo, hi)
    }

    fn range(&self, dim: usize) -> Result<(f64, f64)> {
        match self {
            DiscreteCalibration::Shared(lo, hi) => Ok((*lo, *hi)),
            DiscreteCalibration::PerDimension(r) => r
                .get(dim)
                .copied()
                .ok_or_else(|| Error::shape(format!("no calibration range for dimension {dim}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum DefenseSpec {
    #[default]
    None,
    Noisy {
        sigma: f64,
        seed: u64,
    },
    Discrete {
        bins: usize,
        calibration: DiscreteCalibration,
    },
    Compressed {
        ratio: f64,
    },
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseSpec::None => Ok(()),
            DefenseSpec::Noisy { sigma, .. } if !(*sigma >= 0.0 && sigma.is_finite()) => Err(Error::config(format!("noise sigma {sigma} must be >= 0"))),
            DefenseSpec::Discrete { bins: 0, .. } => Err(Error::config("bins must be >= 1")),
            DefenseSpec::Compressed { ratio } if !(*ratio > 0.0 && *ratio <= 1.0) => Err(Error::config(format!("preserved ratio {ratio} must lie in (0, 1]"))),
            _ => Ok(()),
        }
    }

    /// Applies the defense. `rng` is only drawn from by the noisy defense.
    pub fn apply(&self, e: &[f64], rng: &mut Rng64) -> Result<Vec<f64>> {
        match self {
            DefenseSpec::None => Ok(e.to_vec()),
            DefenseSpec::Noisy { sigma, .. } => apply_noisy(e, *sigma, rng),
            DefenseSpec::Discrete { bins, calibration } => apply_discrete(e, *bins, calibration),
            DefenseSpec::Compressed { ratio } => apply_compressed(e, *ratio),
        }
    }
}

pub fn apply_noisy(e: &[f64], sigma: f64, rng: &mut Rng64) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(e.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|err| Error::config(format!("noise sigma: {err}")))?;
    Ok(e.iter().map(|v| v + normal.sample(rng)).collect())
}

/// Clamps each value to its range and snaps it to the nearer endpoint of the bin that
/// contains it; endpoints are `min + i (max - min) / bins`. Ties go to the lower endpoint.
pub fn apply_discrete(e: &[f64], bins: usize, calibration: &DiscreteCalibration) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(Error::config("bins must be >= 1"));
    }
    e.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (lo, hi) = calibration.range(i)?;
            if hi <= lo {
                return Ok(lo);
            }
            let width = (hi - lo) / bins as f64;
            let v = v.clamp(lo, hi);
            let k = (((v - lo) / width).floor() as usize).min(bins - 1);
            let left = lo + k as f64 * width;
            let right = if k + 1 == bins { hi } else { lo + (k + 1) as f64 * width };
            Ok(if v - left <= right - v { left } else { right })
        })
        .collect()
}

/// Keeps the `ceil(ratio * dim)` largest-magnitude coordinates and zeroes the rest.
pub fn apply_compressed(e: &[f64], ratio: f64) -> Result<Vec<f64>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("preserved ratio {ratio} must lie in (0, 1]")));
    }
    let keep = ((ratio * e.len() as f64).ceil() as usize).min(e.len());
    let mut order: Vec<usize> = (0..e.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    order.sort_by(|&a, &b| e[b].abs().total_cmp(&e[a].abs()));
    let mut out = vec![0.0; e.len()];
    for &i in &order[..keep] {
        out[i] = e[i];
    }
    Ok(out)
}
