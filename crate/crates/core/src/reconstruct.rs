//! Rebuilding forecast trajectories from update sequences and a
//! pseudo-observation series.
//!
//! With `n_u` update sequences the trajectory has `n = n_u + 1` issues. The
//! forecast issued at `t` for delivery `T = t + h` is the observation at `T`
//! minus every later revision for that delivery:
//!
//! `P[t, h] = obs[T] − Σ_{j = t+1 ..= min(T, n_u)} ΔP_{j,T}`,
//!
//! where `ΔP_{j,T}` is `updates[j − 1, T − j]`. Revisions issued after the
//! last sequence are unknown and contribute nothing, so every delivery stays
//! anchored to its observation. The update window stops at horizon `m − 2`;
//! the last horizon repeats the value at `m − 2` (persistence). Horizon 0 is
//! the observation itself.

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ForecastTrajectory, PseudoObservations, UpdateSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RebuildConfig {
    pub clip_min: Option<f64>,
    /// Per-area upper bound (MW).
    pub clip_max: Option<Vec<f64>>,
}

impl Default for RebuildConfig {
    fn default() -> Self {
        Self {
            clip_min: Some(0.0),
            clip_max: None,
        }
    }
}

impl RebuildConfig {
    pub fn unclipped() -> Self {
        Self {
            clip_min: None,
            clip_max: None,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if let Some(max) = &self.clip_max {
            if max.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "clip_max has {} entries for {d} areas",
                    max.len()
                )));
            }
            if let Some(lo) = self.clip_min {
                if let Some(hi) = max.iter().find(|&&hi| hi < lo) {
                    return Err(Error::InvalidConfig(format!("clip_max {hi} below clip_min {lo}")));
                }
            }
        }
        Ok(())
    }
}

/// Observation hours needed to rebuild `n_u` update sequences of width `m'`.
pub fn required_observations(n_u: usize, m_prime: usize) -> usize {
    n_u + m_prime + 1
}

/// Rebuild without clipping.
pub fn rebuild_unclipped(obs: &PseudoObservations, updates: &UpdateSeries) -> Result<ForecastTrajectory> {
    let (n_u, m_prime, d) = updates.values.dim();
    if obs.d() != d {
        return Err(Error::MisalignedUpdates(format!(
            "{d} update areas vs {} observation areas",
            obs.d()
        )));
    }
    if let Some(start) = updates.start_time {
        if start != obs.start_time {
            return Err(Error::MisalignedUpdates(format!(
                "updates start at {start}, observations at {}",
                obs.start_time
            )));
        }
    }
    if let Some(i) = (0..n_u).find(|&i| updates.issue_hours[i] != i as i64 + 1) {
        return Err(Error::MisalignedUpdates(format!(
            "sequence {i} issued at hour {}, expected {}",
            updates.issue_hours[i],
            i + 1
        )));
    }
    let need = required_observations(n_u, m_prime);
    if obs.len() < need {
        return Err(Error::CoverageGap {
            have: obs.len(),
            need,
        });
    }
    let (n, m) = (n_u + 1, m_prime + 2);
    let u = &updates.values;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut row = vec![0.0; m * d];
            for r in 0..d {
                for h in 0..=m_prime {
                    let big_t = t + h;
                    let mut v = obs.values[[big_t, r]];
                    for j in t + 1..=big_t.min(n_u) {
                        v -= u[[j - 1, big_t - j, r]];
                    }
                    row[h * d + r] = v;
                }
                row[(m - 1) * d + r] = row[m_prime * d + r];
            }
            row
        })
        .collect();
    let mut values = Array3::zeros((n, m, d));
    for (t, row) in rows.into_iter().enumerate() {
        values
            .slice_mut(s![t, .., ..])
            .assign(&ndarray::Array2::from_shape_vec((m, d), row).expect("row shape"));
    }
    ForecastTrajectory::new(values, obs.start_time, obs.area_ids.clone())
}

/// Rebuild, then clip into the configured bounds.
pub fn rebuild_trajectory(
    obs: &PseudoObservations,
    updates: &UpdateSeries,
    config: &RebuildConfig,
) -> Result<ForecastTrajectory> {
    config.validate(updates.d())?;
    let traj = rebuild_unclipped(obs, updates)?;
    Ok(clip_trajectory(&traj, config)?.trajectory)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub trajectory: ForecastTrajectory,
    pub clipped: usize,
}

pub fn clip_trajectory(traj: &ForecastTrajectory, config: &RebuildConfig) -> Result<ClipReport> {
    config.validate(traj.d())?;
    let mut out = traj.clone();
    let mut clipped = 0;
    for ((_, _, r), v) in out.values.indexed_iter_mut() {
        let lo = config.clip_min.unwrap_or(f64::NEG_INFINITY);
        let hi = config.clip_max.as_ref().map_or(f64::INFINITY, |m| m[r]);
        let c = v.clamp(lo, hi);
        if c != *v {
            clipped += 1;
            *v = c;
        }
    }
    if let Some(max) = &config.clip_max {
        out.p_max = Some(max.clone());
    }
    Ok(ClipReport {
        trajectory: out,
        clipped,
    })
}

/// Per-area mean absolute second difference along the horizon.
pub fn smoothness_report(traj: &ForecastTrajectory) -> Vec<f64> {
    let (n, m, d) = traj.values.dim();
    let count = (n * (m - 2)) as f64;
    (0..d)
        .map(|r| {
            let mut total = 0.0;
            for t in 0..n {
                for h in 1..m - 1 {
                    let v = &traj.values;
                    total += (v[[t, h + 1, r]] - 2.0 * v[[t, h, r]] + v[[t, h - 1, r]]).abs();
                }
            }
            total / count
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::extract_updates;
    use chrono::NaiveDate;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn t0() -> chrono::NaiveDateTime {
        NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn obs(values: Array2<f64>) -> PseudoObservations {
        let d = values.ncols();
        PseudoObservations {
            values,
            start_time: t0(),
            area_ids: (0..d).map(|r| format!("a{r}")).collect(),
        }
    }

    #[test]
    fn zero_updates_give_flat_fan() {
        let (n_u, m_prime) = (5, 3);
        let o = obs(Array2::from_shape_fn((n_u + m_prime + 1, 1), |(t, _)| 10.0 + t as f64));
        let u = UpdateSeries::from_values(Array3::zeros((n_u, m_prime, 1)));
        let traj = rebuild_trajectory(&o, &u, &RebuildConfig::default()).unwrap();
        for t in 0..=n_u {
            for h in 0..=m_prime {
                assert_eq!(traj.values[[t, h, 0]], o.values[[t + h, 0]]);
            }
            // persistence for the last horizon
            assert_eq!(traj.values[[t, m_prime + 1, 0]], traj.values[[t, m_prime, 0]]);
        }
    }

    #[test]
    fn single_update_hand_case() {
        let (n_u, m_prime) = (6, 3);
        let o = obs(Array2::from_elem((n_u + m_prime + 1, 1), 50.0));
        let mut v = Array3::zeros((n_u, m_prime, 1));
        // issue j = 3 revises delivery T = 4 by u = 2.5
        let (j, big_t, u) = (3usize, 4usize, 2.5);
        v[[j - 1, big_t - j, 0]] = u;
        let traj = rebuild_unclipped(&o, &UpdateSeries::from_values(v)).unwrap();
        for t in 0..=n_u {
            for h in 0..=m_prime {
                let expected = if t + h == big_t && t < j { 50.0 - u } else { 50.0 };
                assert_eq!(traj.values[[t, h, 0]], expected, "t={t} h={h}");
            }
        }
    }

    #[test]
    fn anchored_on_observations() {
        let mut rng = 1u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 33) as f64 / 2f64.powi(31) - 0.5
        };
        let v = Array3::from_shape_fn((8, 4, 2), |_| next());
        let o = obs(Array2::from_shape_fn((13, 2), |_| 100.0 + next()));
        let traj = rebuild_unclipped(&o, &UpdateSeries::from_values(v)).unwrap();
        for t in 0..9 {
            for r in 0..2 {
                assert_eq!(traj.values[[t, 0, r]], o.values[[t, r]]);
            }
        }
    }

    #[test]
    fn coverage_and_alignment_errors() {
        let u = UpdateSeries::from_values(Array3::zeros((4, 2, 1)));
        let short = obs(Array2::zeros((6, 1)));
        assert!(matches!(
            rebuild_unclipped(&short, &u),
            Err(Error::CoverageGap { have: 6, need: 7 })
        ));
        let ok = obs(Array2::zeros((7, 1)));
        let mut gappy = u.clone();
        gappy.issue_hours[2] = 9;
        assert!(matches!(rebuild_unclipped(&ok, &gappy), Err(Error::MisalignedUpdates(_))));
        let wide = obs(Array2::zeros((7, 2)));
        assert!(matches!(rebuild_unclipped(&wide, &u), Err(Error::MisalignedUpdates(_))));
    }

    fn quantized_trajectory(values: Vec<i32>, n: usize, m: usize, d: usize) -> ForecastTrajectory {
        let v = Array3::from_shape_vec((n, m, d), values.iter().map(|&x| f64::from(x) / 1024.0).collect()).unwrap();
        ForecastTrajectory::new(v, t0(), (0..d).map(|r| format!("a{r}")).collect()).unwrap()
    }

    proptest! {
        // a trajectory built by rebuild is reproduced exactly after extracting
        // its updates again, and the extracted updates equal the inputs
        #[test]
        fn extract_rebuild_round_trip(
            n_u in 1usize..12,
            m_prime in 1usize..6,
            d in 1usize..3,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                f64::from((state % 4096) as i32 - 2048) / 1024.0
            };
            let u = UpdateSeries::from_values(Array3::from_shape_fn((n_u, m_prime, d), |_| next()));
            let o = obs(Array2::from_shape_fn((n_u + m_prime + 1, d), |_| 100.0 + next()));
            let traj = rebuild_unclipped(&o, &u).unwrap();
            let back = extract_updates(&traj).unwrap();
            prop_assert_eq!(&back.values, &u.values);
            let again = rebuild_unclipped(&o, &back).unwrap();
            prop_assert_eq!(again.values, traj.values);
        }
    }

    #[test]
    fn clipping_bounds_and_count() {
        let traj = quantized_trajectory(vec![-5 * 1024, 50 * 1024, 120 * 1024, 10 * 1024, 0, 0], 2, 3, 1);
        let cfg = RebuildConfig {
            clip_min: Some(0.0),
            clip_max: Some(vec![100.0]),
        };
        let rep = clip_trajectory(&traj, &cfg).unwrap();
        assert_eq!(rep.clipped, 2);
        assert_eq!(rep.trajectory.values.as_slice().unwrap(), &[0.0, 50.0, 100.0, 10.0, 0.0, 0.0]);
        let twice = clip_trajectory(&rep.trajectory, &cfg).unwrap();
        assert_eq!(twice.clipped, 0);
        assert_eq!(twice.trajectory, rep.trajectory);
        let inside = quantized_trajectory(vec![1, 2, 3, 4, 5, 6], 2, 3, 1);
        let rep = clip_trajectory(&inside, &cfg).unwrap();
        assert_eq!((rep.clipped, &rep.trajectory.values), (0, &inside.values));
    }

    #[test]
    fn clip_bounds_validated() {
        let traj = quantized_trajectory(vec![0; 6], 2, 3, 1);
        let cfg = RebuildConfig {
            clip_min: Some(10.0),
            clip_max: Some(vec![5.0]),
        };
        assert!(matches!(clip_trajectory(&traj, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn smoothness_hand_values() {
        let linear = quantized_trajectory((0..10).map(|h| 3 * h).collect(), 2, 5, 1);
        assert_eq!(smoothness_report(&linear), vec![0.0]);
        let v: Vec<i32> = (0..5).map(|h| if h % 2 == 0 { 1024 } else { -1024 }).collect();
        let alt = quantized_trajectory(v, 1, 5, 1);
        assert_eq!(smoothness_report(&alt), vec![4.0]);
    }

    #[test]
    fn white_noise_rebuild_is_rougher() {
        // smooth historical fan: observations follow a slow sine, small updates
        let (n_u, m_prime) = (50, 8);
        let o = obs(Array2::from_shape_fn((n_u + m_prime + 1, 1), |(t, _)| {
            50.0 + 10.0 * (t as f64 / 10.0).sin()
        }));
        let smooth = UpdateSeries::from_values(Array3::from_shape_fn((n_u, m_prime, 1), |(i, k, _)| {
            0.1 * ((i + k) as f64 / 7.0).cos()
        }));
        let mut state = 7u64;
        let noise = UpdateSeries::from_values(Array3::from_shape_fn((n_u, m_prime, 1), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / 2f64.powi(31) - 0.5) * 4.0
        }));
        let a = smoothness_report(&rebuild_unclipped(&o, &smooth).unwrap())[0];
        let b = smoothness_report(&rebuild_unclipped(&o, &noise).unwrap())[0];
        assert!(b > a, "{b} <= {a}");
    }
}
