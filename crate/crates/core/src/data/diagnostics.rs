//! Checks of the two working hypotheses on forecast updates: no correlation
//! between update sequences issued at different hours, positive correlation
//! across horizons inside one sequence.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::UpdateSeries;
use crate::error::{Error, Result};

const MIN_SEQUENCES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_sequences: usize,
    /// `lag_autocorrelation[l - 1]`: pooled correlation between updates of
    /// issues `l` hours apart for the same delivery time. NaN when undefined.
    pub lag_autocorrelation: Vec<f64>,
    /// Horizon-by-horizon correlation inside one sequence, averaged over areas.
    pub contemporaneous: Array2<f64>,
    pub min_contemporaneous: f64,
    pub mean_contemporaneous: f64,
    pub profile: Option<ExponentialProfile>,
}

/// Split of update sequences into weather-driven and informational ones,
/// with `|ΔP| ≈ amplitude · exp(-lambda · k)` fitted on the informational ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialProfile {
    pub weather_period: usize,
    /// Phase (issue hour modulo the period) carrying the largest updates.
    pub weather_phase: usize,
    pub weather_driven: Vec<bool>,
    pub weather_mean_magnitude: f64,
    pub informational_mean_magnitude: f64,
    pub lambda: f64,
    pub amplitude: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Each `(k, r)` column standardised; constant columns become NaN.
fn standardised(values: &Array3<f64>) -> Array3<f64> {
    let (n, m, d) = values.dim();
    let mut out = values.clone();
    for k in 0..m {
        for r in 0..d {
            let mean = (0..n).map(|i| values[[i, k, r]]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (values[[i, k, r]] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            for i in 0..n {
                out[[i, k, r]] = if sd > 0.0 {
                    (values[[i, k, r]] - mean) / sd
                } else {
                    f64::NAN
                };
            }
        }
    }
    out
}

fn lag_correlation(u: &UpdateSeries, z: &Array3<f64>, lag: usize) -> f64 {
    let (n, m, d) = z.dim();
    if lag >= m {
        return f64::NAN;
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..n.saturating_sub(lag) {
        if u.issue_hours[i + lag] - u.issue_hours[i] != lag as i64 {
            continue;
        }
        // same delivery: step k + lag of the earlier update, step k of the later
        for k in 0..m - lag {
            for r in 0..d {
                let (x, y) = (z[[i, k + lag, r]], z[[i + lag, k, r]]);
                if x.is_finite() && y.is_finite() {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
    }
    pearson(&xs, &ys)
}

/// Hypothesis diagnostics on an update series with at least 30 sequences.
/// The exponential profile is attached when it can be fitted with
/// `weather_period`.
pub fn diagnose_updates(updates: &UpdateSeries, weather_period: usize) -> Result<DiagnosticsReport> {
    let (n, m, d) = updates.values.dim();
    if n < MIN_SEQUENCES {
        return Err(Error::TooFewSamples {
            needed: MIN_SEQUENCES,
            got: n,
        });
    }
    let z = standardised(&updates.values);
    let max_lag = (m.saturating_sub(1)).clamp(1, 5);
    let lag_autocorrelation = (1..=max_lag).map(|l| lag_correlation(updates, &z, l)).collect();

    let mut contemporaneous = Array2::from_elem((m, m), f64::NAN);
    for k1 in 0..m {
        for k2 in 0..m {
            let per_area: Vec<f64> = (0..d)
                .map(|r| {
                    let a: Vec<f64> = (0..n).map(|i| updates.values[[i, k1, r]]).collect();
                    let b: Vec<f64> = (0..n).map(|i| updates.values[[i, k2, r]]).collect();
                    pearson(&a, &b)
                })
                .filter(|c| c.is_finite())
                .collect();
            if !per_area.is_empty() {
                contemporaneous[[k1, k2]] = per_area.iter().sum::<f64>() / per_area.len() as f64;
            }
        }
    }
    let off: Vec<f64> = contemporaneous
        .indexed_iter()
        .filter(|((a, b), v)| a != b && v.is_finite())
        .map(|(_, &v)| v)
        .collect();
    let (min_contemporaneous, mean_contemporaneous) = if off.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            off.iter().copied().fold(f64::INFINITY, f64::min),
            off.iter().sum::<f64>() / off.len() as f64,
        )
    };
    Ok(DiagnosticsReport {
        n_sequences: n,
        lag_autocorrelation,
        contemporaneous,
        min_contemporaneous,
        mean_contemporaneous,
        profile: fit_exponential_update_profile(updates, weather_period).ok(),
    })
}

/// Classifies update sequences as weather-driven (the phase of the period
/// with the largest mean `|ΔP|`) or informational, and fits the horizon decay
/// of informational updates by least squares on log mean magnitudes.
pub fn fit_exponential_update_profile(
    updates: &UpdateSeries,
    weather_period: usize,
) -> Result<ExponentialProfile> {
    if weather_period < 2 {
        return Err(Error::InvalidConfig(format!(
            "weather period must be at least 2, got {weather_period}"
        )));
    }
    let (n, m, d) = updates.values.dim();
    if n == 0 {
        return Err(Error::DegenerateFit("no update sequences".into()));
    }
    let magnitude: Vec<f64> = (0..n)
        .map(|i| updates.values.slice(ndarray::s![i, .., ..]).iter().map(|v| v.abs()).sum::<f64>() / (m * d) as f64)
        .collect();
    if magnitude.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateFit("all update magnitudes are zero".into()));
    }
    let first = updates.issue_hours[0];
    let phase_of = |i: usize| (updates.issue_hours[i] - first).rem_euclid(weather_period as i64) as usize;
    let mut sums = vec![(0.0, 0usize); weather_period];
    for (i, &mag) in magnitude.iter().enumerate() {
        let p = phase_of(i);
        sums[p].0 += mag;
        sums[p].1 += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .map(|&(s, c)| if c > 0 { s / c as f64 } else { f64::NEG_INFINITY })
        .collect();
    let weather_phase = means
        .iter()
        .enumerate()
        .fold(0, |best, (p, &v)| if v > means[best] { p } else { best });
    let weather_driven: Vec<bool> = (0..n).map(|i| phase_of(i) == weather_phase).collect();

    let info: Vec<usize> = (0..n).filter(|&i| !weather_driven[i]).collect();
    let weather_count = n - info.len();
    let weather_mean_magnitude = if weather_count > 0 {
        (0..n).filter(|&i| weather_driven[i]).map(|i| magnitude[i]).sum::<f64>() / weather_count as f64
    } else {
        f64::NAN
    };
    if info.is_empty() {
        return Err(Error::DegenerateFit("no informational updates".into()));
    }
    let informational_mean_magnitude =
        info.iter().map(|&i| magnitude[i]).sum::<f64>() / info.len() as f64;

    let points: Vec<(f64, f64)> = (0..m)
        .filter_map(|k| {
            let mean = info
                .iter()
                .flat_map(|&i| (0..d).map(move |r| (i, r)))
                .map(|(i, r)| updates.values[[i, k, r]].abs())
                .sum::<f64>()
                / (info.len() * d) as f64;
            (mean > 0.0).then(|| (k as f64, mean.ln()))
        })
        .collect();
    if points.len() < 2 {
        return Err(Error::DegenerateFit(
            "fewer than two horizons with non-zero informational updates".into(),
        ));
    }
    let np = points.len() as f64;
    let mk = points.iter().map(|p| p.0).sum::<f64>() / np;
    let ml = points.iter().map(|p| p.1).sum::<f64>() / np;
    let sxy: f64 = points.iter().map(|p| (p.0 - mk) * (p.1 - ml)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mk).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(ExponentialProfile {
        weather_period,
        weather_phase,
        weather_driven,
        weather_mean_magnitude,
        informational_mean_magnitude,
        lambda: (-slope).max(0.0),
        amplitude: (ml - slope * mk).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn independent_sequences_have_no_lag_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Array3::from_shape_fn((5000, 6, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let rep = diagnose_updates(&UpdateSeries::from_values(v), 6).unwrap();
        assert!(rep.lag_autocorrelation[0].abs() < 0.05, "{:?}", rep.lag_autocorrelation);
    }

    #[test]
    fn shared_shock_gives_positive_contemporaneous_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, d) = (800, 5, 3);
        let mut v = Array3::zeros((n, m, d));
        for i in 0..n {
            let f: f64 = rng.sample(StandardNormal);
            for k in 0..m {
                for r in 0..d {
                    let e: f64 = rng.sample(StandardNormal);
                    v[[i, k, r]] = f + e;
                }
            }
        }
        let rep = diagnose_updates(&UpdateSeries::from_values(v), 6).unwrap();
        assert!(rep.min_contemporaneous > 0.3, "{}", rep.min_contemporaneous);
        assert!(rep.contemporaneous.iter().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn constant_sequences_do_not_crash() {
        let v = Array3::from_elem((40, 4, 2), 1.25);
        let rep = diagnose_updates(&UpdateSeries::from_values(v), 6).unwrap();
        assert!(rep.lag_autocorrelation.iter().all(|c| c.is_nan()));
        assert!(rep.min_contemporaneous.is_nan());
    }

    #[test]
    fn too_few_sequences() {
        let v = Array3::zeros((10, 4, 1));
        assert!(matches!(
            diagnose_updates(&UpdateSeries::from_values(v), 6),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn recovers_exponential_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Array3::from_shape_fn((300, 10, 2), |(_, k, _)| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * (-0.5 * k as f64).exp() * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal))
        });
        let p = fit_exponential_update_profile(&UpdateSeries::from_values(v), 6).unwrap();
        assert!((p.lambda - 0.5).abs() < 0.05, "{}", p.lambda);
    }

    #[test]
    fn all_zero_updates_are_degenerate() {
        let v = Array3::zeros((50, 5, 1));
        assert!(matches!(
            fit_exponential_update_profile(&UpdateSeries::from_values(v), 6),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn period_below_two_rejected() {
        let v = Array3::from_elem((50, 5, 1), 1.0);
        assert!(fit_exponential_update_profile(&UpdateSeries::from_values(v), 1).is_err());
    }
}
