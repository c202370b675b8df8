use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn std_normal() -> Normal {
    Normal::standard()
}

/// φ, the standard normal CDF.
pub fn standard_normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// φ⁻¹, the standard normal quantile function.
pub fn standard_normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Per-coordinate empirical CDFs, used as `φ⁻¹ ∘ F̂` to move data into
/// normal-score space and back.
///
/// `F̂(v)` is the fraction of fitted samples `<= v`, clamped to
/// `[1/(N+1), N/(N+1)]` so the normal quantile stays finite. The inverse is
/// the left-continuous generalised inverse: the smallest sample point whose
/// CDF reaches `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTransform {
    samples: Vec<Vec<f64>>,
}

impl MarginalTransform {
    /// One sample vector per coordinate. Empty vectors leave the coordinate
    /// unfitted.
    pub fn fit(columns: Vec<Vec<f64>>) -> Result<Self> {
        let mut samples = columns;
        for col in &mut samples {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite sample in marginal fit".into()));
            }
            col.sort_by(f64::total_cmp);
        }
        Ok(Self { samples })
    }

    pub fn dim(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self, coordinate: usize) -> Result<&[f64]> {
        match self.samples.get(coordinate) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::UnfittedTransform(coordinate)),
        }
    }

    /// `(ε_lo, ε_hi)` for a coordinate.
    pub fn clamp_bounds(&self, coordinate: usize) -> Result<(f64, f64)> {
        let n = self.samples(coordinate)?.len() as f64;
        Ok((1.0 / (n + 1.0), n / (n + 1.0)))
    }

    pub fn empirical_cdf(&self, coordinate: usize, v: f64) -> Result<f64> {
        let s = self.samples(coordinate)?;
        let count = s.partition_point(|&x| x <= v);
        let n = s.len() as f64;
        let (lo, hi) = (1.0 / (n + 1.0), n / (n + 1.0));
        Ok((count as f64 / n).clamp(lo, hi))
    }

    /// Generalised inverse of the (unclamped) empirical CDF.
    pub fn quantile(&self, coordinate: usize, u: f64) -> Result<f64> {
        let s = self.samples(coordinate)?;
        let n = s.len();
        // tolerance absorbs the rounding of φ(φ⁻¹(k/N))
        let k = ((u * n as f64) - 1e-7).ceil().clamp(1.0, n as f64) as usize;
        Ok(s[k - 1])
    }

    pub fn to_normal_score(&self, coordinate: usize, v: f64) -> Result<f64> {
        Ok(standard_normal_quantile(self.empirical_cdf(coordinate, v)?))
    }

    pub fn from_normal_score(&self, coordinate: usize, z: f64) -> Result<f64> {
        self.quantile(coordinate, standard_normal_cdf(z))
    }

    /// Applies [`Self::to_normal_score`] to `data[row][coordinate]`.
    pub fn to_normal_scores(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| self.to_normal_score(j, v))
                    .collect()
            })
            .collect()
    }

    pub fn from_normal_scores(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &z)| self.from_normal_score(j, z))
                    .collect()
            })
            .collect()
    }
}

/// Per-area affine standardisation to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AreaScaler {
    /// `columns[r]` holds every value observed for area `r`.
    pub fn fit(columns: &[Vec<f64>]) -> Self {
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len().max(1) as f64;
            let mu = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn forward(&self, area: usize, v: f64) -> f64 {
        (v - self.mean[area]) / self.std[area]
    }

    pub fn inverse(&self, area: usize, v: f64) -> f64 {
        v * self.std[area] + self.mean[area]
    }
}
