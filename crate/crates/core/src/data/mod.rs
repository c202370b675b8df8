//! Forecast trajectories, forecast updates and the marginal transforms the
//! generative models work in.

mod diagnostics;
mod io;
mod marginal;

pub use diagnostics::{
    diagnose_updates, fit_exponential_update_profile, DiagnosticsReport, ExponentialProfile,
};
pub use io::{
    format_timestamp, load_observations, load_trajectories, load_updates, parse_timestamp,
    write_observations, write_trajectories, write_updates, ObservationSchema, TrajectorySchema,
};
pub use marginal::{standard_normal_cdf, standard_normal_quantile, AreaScaler, MarginalTransform};

use chrono::{Duration, NaiveDateTime};
use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rolling forecasts `values[t, k, r]`: issued at hour `t` for delivery
/// `t + k` in area `r`, in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrajectory {
    pub values: Array3<f64>,
    pub start_time: NaiveDateTime,
    /// Hour offset of each issue row from `start_time`; strictly increasing.
    pub issue_hours: Vec<i64>,
    pub area_ids: Vec<String>,
    pub p_max: Option<Vec<f64>>,
}

impl ForecastTrajectory {
    /// Hourly trajectory starting at `start_time` with no gaps.
    pub fn new(values: Array3<f64>, start_time: NaiveDateTime, area_ids: Vec<String>) -> Result<Self> {
        let (n, m, d) = values.dim();
        if n < 1 || m < 3 || d < 1 {
            return Err(Error::InvalidData(format!(
                "trajectory shape ({n}, {m}, {d}) needs m >= 3 and d >= 1"
            )));
        }
        if area_ids.len() != d {
            return Err(Error::InvalidData(format!(
                "{} area ids for {d} areas",
                area_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite forecast value".into()));
        }
        Ok(Self {
            values,
            start_time,
            issue_hours: (0..n as i64).collect(),
            area_ids,
            p_max: None,
        })
    }

    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn m(&self) -> usize {
        self.values.dim().1
    }

    pub fn d(&self) -> usize {
        self.values.dim().2
    }

    pub fn issue_time(&self, t: usize) -> NaiveDateTime {
        self.start_time + Duration::hours(self.issue_hours[t])
    }

    /// Pairs of consecutive rows whose issue hours are not adjacent.
    pub fn gaps(&self) -> Vec<(NaiveDateTime, NaiveDateTime)> {
        self.issue_hours
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] - w[0] != 1)
            .map(|(i, _)| (self.issue_time(i), self.issue_time(i + 1)))
            .collect()
    }

    /// Number of cells outside `[0, p_max]`, when a capacity is set.
    pub fn out_of_bounds(&self) -> usize {
        let Some(p_max) = &self.p_max else {
            return self.values.iter().filter(|&&v| v < 0.0).count();
        };
        self.values
            .indexed_iter()
            .filter(|((_, _, r), &v)| v < 0.0 || v > p_max[*r])
            .count()
    }
}

/// Forecast updates `values[i, k, r]`. Update `i` is the revision published at
/// issue hour `issue_hours[i]` (call it `t`) for delivery `t + k`, i.e. the
/// forecast issued at `t` minus the one issued at `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSeries {
    pub values: Array3<f64>,
    /// Delivery step of `k = 0` relative to the earlier of the two issues.
    pub horizon_offset: usize,
    pub issue_hours: Vec<i64>,
    pub start_time: Option<NaiveDateTime>,
    pub area_ids: Vec<String>,
}

impl UpdateSeries {
    /// Sequences with consecutive issue hours starting at 1.
    pub fn from_values(values: Array3<f64>) -> Self {
        let (n, _, d) = values.dim();
        Self {
            values,
            horizon_offset: 1,
            issue_hours: (1..=n as i64).collect(),
            start_time: None,
            area_ids: (0..d).map(|r| format!("area{r}")).collect(),
        }
    }

    pub fn n_sequences(&self) -> usize {
        self.values.dim().0
    }

    pub fn m_prime(&self) -> usize {
        self.values.dim().1
    }

    pub fn d(&self) -> usize {
        self.values.dim().2
    }

    pub fn sequence(&self, i: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![i, .., ..])
    }

    /// Row-major flattening of one sequence, horizon-major then area.
    pub fn flat(&self, i: usize) -> Vec<f64> {
        self.sequence(i).iter().copied().collect()
    }

    /// `[n', m'·d]` matrix of flattened sequences.
    pub fn flattened(&self) -> Array2<f64> {
        let (n, m, d) = self.values.dim();
        self.values
            .clone()
            .into_shape_with_order((n, m * d))
            .expect("contiguous")
    }

    /// Keeps sequences `range`.
    pub fn select(&self, range: std::ops::Range<usize>) -> UpdateSeries {
        UpdateSeries {
            values: self.values.slice(s![range.clone(), .., ..]).to_owned(),
            horizon_offset: self.horizon_offset,
            issue_hours: self.issue_hours[range].to_vec(),
            start_time: self.start_time,
            area_ids: self.area_ids.clone(),
        }
    }
}

/// Realised (or simulated) values `values[T, r]` at hourly delivery times
/// starting at `start_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoObservations {
    pub values: Array2<f64>,
    pub start_time: NaiveDateTime,
    pub area_ids: Vec<String>,
}

impl PseudoObservations {
    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.values.dim().1
    }

    pub fn time(&self, hour: usize) -> NaiveDateTime {
        self.start_time + Duration::hours(hour as i64)
    }

    /// The diagonal `P[t, 0, r]` of a trajectory, which is its own observation.
    pub fn from_trajectory(traj: &ForecastTrajectory) -> Self {
        let (n, m, d) = traj.values.dim();
        let mut values = Array2::zeros((n + m - 1, d));
        for t in 0..n {
            values.row_mut(t).assign(&traj.values.slice(s![t, 0, ..]));
        }
        for k in 1..m {
            values
                .row_mut(n - 1 + k)
                .assign(&traj.values.slice(s![n - 1, k, ..]));
        }
        Self {
            values,
            start_time: traj.start_time,
            area_ids: traj.area_ids.clone(),
        }
    }
}

/// Updates between consecutive issues for the `m - 2` shared delivery times
/// `t + 1 ..= t + m - 2` (with `t` the earlier issue). Pairs of rows that are
/// not one hour apart are skipped.
pub fn extract_updates(traj: &ForecastTrajectory) -> Result<UpdateSeries> {
    let (n, m, d) = traj.values.dim();
    if n < 2 {
        return Err(Error::TooFewSequences(n));
    }
    let m_prime = m - 2;
    let pairs: Vec<usize> = (0..n - 1)
        .filter(|&t| traj.issue_hours[t + 1] - traj.issue_hours[t] == 1)
        .collect();
    let mut values = Array3::zeros((pairs.len(), m_prime, d));
    for (i, &t) in pairs.iter().enumerate() {
        for k in 0..m_prime {
            for r in 0..d {
                values[[i, k, r]] = traj.values[[t + 1, k, r]] - traj.values[[t, k + 1, r]];
            }
        }
    }
    Ok(UpdateSeries {
        values,
        horizon_offset: 1,
        issue_hours: pairs.iter().map(|&t| traj.issue_hours[t + 1]).collect(),
        start_time: Some(traj.start_time),
        area_ids: traj.area_ids.clone(),
    })
}
