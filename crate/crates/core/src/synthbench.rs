//! Synthetic forecast trajectories with known update distributions, and a
//! benchmark that fits every model family on them and scores the true
//! generator alongside.
//!
//! Updates are drawn independently per issue, with a common factor shared by
//! every horizon and area of one issue and magnitudes decaying as
//! `exp(-λ·k)` over the horizon. All generated values are multiples of
//! `2⁻¹⁰`, so rebuilding a trajectory from its own updates is exact in
//! floating point.

use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::argen::{ancestral_sample, lowrank_gaussian_logprob, ArConfig, ArKind, ArModel, EmissionDistribution, TransformKind};
use crate::data::{extract_updates, ForecastTrajectory, PseudoObservations, UpdateSeries};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_generator, EvalConfig, EvaluationReport};
use crate::model::{FittedModel, ModelConfig, ModelKind};
use crate::reconstruct::rebuild_unclipped;
use crate::stats::stream_rng;

/// Grid every synthetic value is rounded to.
pub const QUANTUM: f64 = 1.0 / 1024.0;

pub fn quantize(v: f64) -> f64 {
    (v / QUANTUM).round() * QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    /// Gaussian: common factor plus independent noise.
    IidGaussianFactor,
    /// Samples of a DGPVAR network with fixed weights, in raw units.
    DgpvarGroundTruth,
    /// Every coordinate a monotone function of one shock.
    Comonotone,
    /// Gaussian factor model with a random per-issue volatility.
    Heteroscedastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProcessConfig {
    pub kind: ProcessKind,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub seed: u64,
    /// Update standard deviation at horizon 0 of area 0 (MW), before the
    /// factor/noise split.
    pub update_scale: f64,
    /// Loading on the common factor.
    pub factor_scale: f64,
    /// Standard deviation of the idiosyncratic noise.
    pub noise_scale: f64,
    /// Horizon decay rate λ of update magnitudes.
    pub lambda: f64,
    /// Every `weather_period`-th update sequence (index 0, p, 2p, ...) is
    /// scaled by `weather_boost`.
    pub weather_period: Option<usize>,
    pub weather_boost: f64,
    /// Installed capacity per area (MW); observations stay in
    /// `[0.33, 0.67]·p_max`.
    pub p_max: f64,
    /// LSTM width and low-rank factor of the DGPVAR ground truth.
    pub generator_hidden: usize,
    pub generator_rank: usize,
}

impl Default for SyntheticProcessConfig {
    fn default() -> Self {
        Self {
            kind: ProcessKind::IidGaussianFactor,
            n: 500,
            m: 12,
            d: 3,
            seed: 0,
            update_scale: 5.0,
            factor_scale: 1.0,
            noise_scale: 1.0,
            lambda: 0.1,
            weather_period: None,
            weather_boost: 3.0,
            p_max: 1000.0,
            generator_hidden: 8,
            generator_rank: 1,
        }
    }
}

impl SyntheticProcessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 2 || self.m < 3 || self.d < 1 {
            return bad(format!("need n >= 2, m >= 3, d >= 1; got n={}, m={}, d={}", self.n, self.m, self.d));
        }
        let scales = [self.update_scale, self.factor_scale, self.noise_scale, self.lambda, self.weather_boost];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("scales, lambda and weather boost must be finite and non-negative".into());
        }
        if !(self.p_max.is_finite() && self.p_max > 0.0) {
            return bad(format!("p_max must be positive, got {}", self.p_max));
        }
        if matches!(self.weather_period, Some(p) if p < 2) {
            return bad("weather period must be at least 2".into());
        }
        if self.kind == ProcessKind::DgpvarGroundTruth
            && (self.generator_hidden == 0 || self.generator_rank == 0 || self.generator_rank > self.d)
        {
            return bad(format!(
                "generator needs hidden >= 1 and rank in 1..={}",
                self.d
            ));
        }
        Ok(())
    }
}

/// A generator of i.i.d. update sequences with known parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProcess {
    pub config: SyntheticProcessConfig,
    /// Fixed-weight network of the DGPVAR ground truth.
    pub generator: Option<ArModel>,
}

impl SyntheticProcess {
    pub fn new(config: SyntheticProcessConfig) -> Result<Self> {
        config.validate()?;
        let generator = match config.kind {
            ProcessKind::DgpvarGroundTruth => Some(dgpvar_generator(&config)?),
            _ => None,
        };
        Ok(Self { config, generator })
    }

    pub fn m_prime(&self) -> usize {
        self.config.m - 2
    }

    /// `update_scale · exp(-λ·k)` for `k` in `0..m'`.
    pub fn horizon_scale(&self) -> Vec<f64> {
        (0..self.m_prime())
            .map(|k| self.config.update_scale * (-self.config.lambda * k as f64).exp())
            .collect()
    }

    /// Relative amplitude of area `r`.
    pub fn area_scale(&self, r: usize) -> f64 {
        1.0 + 0.5 * r as f64
    }

    pub fn is_weather_driven(&self, i: usize) -> bool {
        self.config.weather_period.is_some_and(|p| i.is_multiple_of(p))
    }

    fn weather_factor(&self, i: usize) -> f64 {
        if self.is_weather_driven(i) {
            self.config.weather_boost
        } else {
            1.0
        }
    }

    /// Sequence `i` of stream `seed`, before quantization.
    fn draw(&self, i: usize, seed: u64) -> Array2<f64> {
        let c = &self.config;
        let mut rng = stream_rng(seed, i as u64);
        let w = self.weather_factor(i);
        let s_k = self.horizon_scale();
        let f: f64 = rng.sample(StandardNormal);
        let vol = match c.kind {
            ProcessKind::Heteroscedastic => (0.5 * rng.sample::<f64, _>(StandardNormal)).exp(),
            _ => 1.0,
        };
        Array2::from_shape_fn((self.m_prime(), c.d), |(k, r)| {
            let amp = w * s_k[k] * self.area_scale(r);
            match c.kind {
                // bounded so that trajectories stay inside [0, p_max];
                // sd(tanh(f)) ≈ 0.63 at unit factor scale
                ProcessKind::Comonotone => amp * (c.factor_scale * f).tanh() / 0.63,
                _ => amp * vol * (c.factor_scale * f + c.noise_scale * rng.sample::<f64, _>(StandardNormal)),
            }
        })
    }

    /// `count` independent sequences; sequence `i` depends only on
    /// `(seed, i)`.
    pub fn sample_updates(&self, count: usize, seed: u64) -> Result<UpdateSeries> {
        let (mp, d) = (self.m_prime(), self.config.d);
        let mut values = match &self.generator {
            Some(g) => ancestral_sample(g, count, seed)?.values,
            None => {
                let seqs: Vec<Array2<f64>> = (0..count).into_par_iter().map(|i| self.draw(i, seed)).collect();
                let mut values = Array3::zeros((count, mp, d));
                for (i, seq) in seqs.iter().enumerate() {
                    values.slice_mut(s![i, .., ..]).assign(seq);
                }
                values
            }
        };
        values.mapv_inplace(quantize);
        Ok(UpdateSeries::from_values(values))
    }

    /// Exact distribution of the Gaussian sequence at index `i`: covariance
    /// `diag(D) + v·vᵀ` over the flattened (horizon-major) coordinates.
    pub fn gaussian_law(&self, i: usize) -> Option<EmissionDistribution> {
        if self.config.kind != ProcessKind::IidGaussianFactor {
            return None;
        }
        let (mp, d) = (self.m_prime(), self.config.d);
        let s_k = self.horizon_scale();
        let w = self.weather_factor(i);
        let amp = |c: usize| w * s_k[c / d] * self.area_scale(c % d);
        Some(EmissionDistribution {
            mu: vec![0.0; mp * d],
            diag: (0..mp * d)
                .map(|c| (amp(c) * self.config.noise_scale).powi(2))
                .collect(),
            v: Array2::from_shape_fn((mp * d, 1), |(c, _)| amp(c) * self.config.factor_scale),
        })
    }

    /// True per-sequence NLL where it is available in closed form (Gaussian
    /// factor and DGPVAR ground truth). Sequence `i` is looked up by its issue
    /// hour `issue_hours[i] − 1`.
    pub fn true_nll(&self, updates: &UpdateSeries) -> Result<Option<Vec<f64>>> {
        if let Some(g) = &self.generator {
            return g.score_nll(&updates.values).map(Some);
        }
        if self.config.kind != ProcessKind::IidGaussianFactor {
            return Ok(None);
        }
        (0..updates.n_sequences())
            .map(|i| {
                let law = self.gaussian_law((updates.issue_hours[i] - 1).max(0) as usize).expect("gaussian");
                Ok(-lowrank_gaussian_logprob(&updates.flat(i), &law)?)
            })
            .collect::<Result<Vec<f64>>>()
            .map(Some)
    }

    /// Smooth daily and weekly cycle per area, quantized.
    pub fn observations(&self, len: usize) -> PseudoObservations {
        let c = &self.config;
        let mut rng = stream_rng(c.seed, u64::MAX);
        let phase: Vec<f64> = (0..c.d).map(|_| rng.gen_range(0.0..24.0)).collect();
        let tau = std::f64::consts::TAU;
        PseudoObservations {
            values: Array2::from_shape_fn((len, c.d), |(t, r)| {
                let t = t as f64;
                let shape = 0.5 + 0.12 * (tau * (t + phase[r]) / 24.0).sin() + 0.05 * (tau * t / 168.0).sin();
                quantize(c.p_max * shape)
            }),
            start_time: synthetic_start(),
            area_ids: area_ids(c.d),
        }
    }
}

pub fn synthetic_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2021, 1, 1)
        .expect("date")
        .and_hms_opt(0, 0, 0)
        .expect("time")
}

fn area_ids(d: usize) -> Vec<String> {
    (0..d).map(|r| format!("area{r}")).collect()
}

fn dgpvar_generator(c: &SyntheticProcessConfig) -> Result<ArModel> {
    let cfg = ArConfig {
        hidden: c.generator_hidden,
        rank: Some(c.generator_rank),
        transform: TransformKind::Identity,
        ..ArConfig::default()
    };
    let mut rng = stream_rng(c.seed, u64::MAX - 1);
    let mut model = ArModel::new(ArKind::Dgpvar, c.m - 2, c.d, &cfg, c.generator_hidden, &mut rng)?;
    // a visible start token and larger head weights give the emissions
    // structure beyond the initialization scale
    let names = model.params.names().to_vec();
    for (name, t) in names.iter().zip(model.params.tensors_mut()) {
        let gain = if name.starts_with("w_") || name == "start" { 2.0 } else { 1.0 };
        for v in t.data_mut() {
            *v = gain * *v + 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model.area_ids = area_ids(c.d);
    Ok(model)
}

/// Known-truth parameters published with a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticProcessConfig,
    pub horizon_scale: Vec<f64>,
    pub area_scale: Vec<f64>,
    /// Flags of update sequence `i` (issue hour `i + 1`).
    pub weather_driven: Vec<bool>,
    pub mean_true_nll: Option<f64>,
    pub true_nll: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub trajectory: ForecastTrajectory,
    /// Covers every delivery of the trajectory (`n + m − 1` hours).
    pub observations: PseudoObservations,
    /// The updates the trajectory was composed from.
    pub updates: UpdateSeries,
    pub process: SyntheticProcess,
    pub truth: GroundTruth,
}

/// Draws `n − 1` update sequences and an observation path, then composes the
/// trajectory by rebuilding from them. Deterministic in the config.
pub fn generate_synthetic_trajectory(config: &SyntheticProcessConfig) -> Result<SyntheticDataset> {
    let process = SyntheticProcess::new(config.clone())?;
    let (n, m, d) = (config.n, config.m, config.d);
    let mut updates = process.sample_updates(n - 1, config.seed)?;
    updates.area_ids = area_ids(d);
    let observations = process.observations(n + m - 1);
    updates.start_time = Some(observations.start_time);
    let mut trajectory = rebuild_unclipped(&observations, &updates)?;
    trajectory.p_max = Some(vec![config.p_max; d]);
    let true_nll = process.true_nll(&updates)?;
    let truth = GroundTruth {
        config: config.clone(),
        horizon_scale: process.horizon_scale(),
        area_scale: (0..d).map(|r| process.area_scale(r)).collect(),
        weather_driven: (0..n - 1).map(|i| process.is_weather_driven(i)).collect(),
        mean_true_nll: true_nll.as_ref().map(|v| crate::stats::mean(v)),
        true_nll,
    };
    Ok(SyntheticDataset {
        trajectory,
        observations,
        updates,
        process,
        truth,
    })
}

/// Issues `range` of a trajectory, re-anchored at the first of them.
pub fn trajectory_window(traj: &ForecastTrajectory, range: std::ops::Range<usize>) -> ForecastTrajectory {
    let first = traj.issue_hours[range.start];
    ForecastTrajectory {
        values: traj.values.slice(s![range.clone(), .., ..]).to_owned(),
        start_time: traj.issue_time(range.start),
        issue_hours: traj.issue_hours[range].iter().map(|h| h - first).collect(),
        area_ids: traj.area_ids.clone(),
        p_max: traj.p_max.clone(),
    }
}

/// Observations from hour `start` on.
pub fn observation_window(obs: &PseudoObservations, start: usize) -> PseudoObservations {
    PseudoObservations {
        values: obs.values.slice(s![start.., ..]).to_owned(),
        start_time: obs.time(start),
        area_ids: obs.area_ids.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub process: SyntheticProcessConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Leading share of issues used for training (11 of 12 months).
    pub train_fraction: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            process: SyntheticProcessConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            train_fraction: 11.0 / 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub model: String,
    pub es_rank: usize,
    pub vs_rank: usize,
    pub mivo_rank: usize,
    pub mean_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// One per fitted model in request order, then the `oracle` row.
    pub reports: Vec<EvaluationReport>,
    /// Best mean rank first.
    pub ranking: Vec<RankRow>,
}

pub const ORACLE: &str = "oracle";

fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; values.len()];
    for (rank, i) in order.into_iter().enumerate() {
        out[i] = rank + 1;
    }
    out
}

impl BenchmarkReport {
    pub fn oracle(&self) -> &EvaluationReport {
        self.reports.iter().find(|r| r.model == ORACLE).expect("oracle row")
    }

    pub fn ranking_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}  {:>4}  {:>4}  {:>4}  {:>6}", "model", "ES", "VS", "MiVo", "mean");
        for r in &self.ranking {
            let _ = writeln!(
                out,
                "{:<8}  {:>4}  {:>4}  {:>4}  {:>6.2}",
                r.model, r.es_rank, r.vs_rank, r.mivo_rank, r.mean_rank
            );
        }
        out
    }
}

/// Chronological split of a synthetic dataset into `(train updates,
/// held-out trajectory, held-out observations)`.
pub fn chronological_split(
    data: &SyntheticDataset,
    train_fraction: f64,
) -> Result<(UpdateSeries, ForecastTrajectory, PseudoObservations)> {
    let n = data.trajectory.n();
    let split = (n as f64 * train_fraction).round() as usize;
    if split < 3 || n - split < 2 {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} leaves {split} training and {} held-out issues",
            n - split.min(n)
        )));
    }
    let train = extract_updates(&trajectory_window(&data.trajectory, 0..split))?;
    let test = trajectory_window(&data.trajectory, split..n);
    let obs = observation_window(&data.observations, split);
    Ok((train, test, obs))
}

/// Fits every requested model on the training months, scores each on the
/// held-out month against the true observations, and scores the generating
/// process itself as the `oracle` row.
pub fn run_benchmark(models: &[ModelKind], config: &BenchConfig) -> Result<BenchmarkReport> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("benchmark needs at least one model".into()));
    }
    let data = generate_synthetic_trajectory(&config.process)?;
    let (train, test, obs) = chronological_split(&data, config.train_fraction)?;
    let mut reports: Vec<EvaluationReport> = models
        .par_iter()
        .map(|&kind| {
            let model = FittedModel::fit(kind, &train, &config.model)?;
            evaluate_generator(kind.name(), |c, s| model.sample(c, s), &test, Some(&obs), &config.eval)
        })
        .collect::<Result<_>>()?;
    let process = &data.process;
    reports.push(evaluate_generator(
        ORACLE,
        |c, s| process.sample_updates(c, s),
        &test,
        Some(&obs),
        &config.eval,
    )?);
    let es = ranks(&reports.iter().map(|r| r.es_aggregate()).collect::<Vec<_>>());
    let vs = ranks(&reports.iter().map(|r| r.vs_aggregate()).collect::<Vec<_>>());
    let mv = ranks(&reports.iter().map(|r| r.mivo).collect::<Vec<_>>());
    let mut ranking: Vec<RankRow> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| RankRow {
            model: r.model.clone(),
            es_rank: es[i],
            vs_rank: vs[i],
            mivo_rank: mv[i],
            mean_rank: (es[i] + vs[i] + mv[i]) as f64 / 3.0,
        })
        .collect();
    ranking.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then_with(|| a.model.cmp(&b.model)));
    Ok(BenchmarkReport { reports, ranking })
}
