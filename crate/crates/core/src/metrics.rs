//! Quality metrics: MiVo on update sequences, Energy Score and Variogram
//! Score on rebuilt scenario trajectories, and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use chrono::NaiveDateTime;
use ndarray::{s, Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extract_updates, ForecastTrajectory, PseudoObservations, UpdateSeries};
use crate::error::{Error, Result};
use crate::reconstruct::{rebuild_trajectory, RebuildConfig};
use crate::stats::stream_rng;

/// Euclidean distances between flattened real (rows) and generated
/// (columns) sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
}

pub fn distance_matrix(real: &UpdateSeries, gen: &UpdateSeries) -> Result<DistanceMatrix> {
    let (rd, gd) = (real.values.dim(), gen.values.dim());
    if (rd.1, rd.2) != (gd.1, gd.2) {
        return Err(Error::shape("distance_matrix", &[rd.0, rd.1, rd.2], &[gd.0, gd.1, gd.2]));
    }
    let a = real.flattened();
    let b = gen.flattened();
    let rows: Vec<Vec<f64>> = (0..rd.0)
        .into_par_iter()
        .map(|i| {
            let x = a.row(i);
            (0..gd.0)
                .map(|j| {
                    x.iter()
                        .zip(b.row(j))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let values = Array2::from_shape_vec((rd.0, gd.0), rows.concat()).expect("distance shape");
    Ok(DistanceMatrix { values })
}

/// Mean of the row minima (each real sequence's nearest generated one) plus
/// the population variance of the column minima.
pub fn mivo(dm: &DistanceMatrix) -> Result<f64> {
    let (r, c) = dm.values.dim();
    if r == 0 || c == 0 {
        return Err(Error::EmptyMatrix);
    }
    let d1: Vec<f64> = dm
        .values
        .rows()
        .into_iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let d2: Vec<f64> = dm
        .values
        .columns()
        .into_iter()
        .map(|col| col.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    Ok(crate::stats::mean(&d1) + crate::stats::variance(&d2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadTerm {
    /// `1/(2(S−1)) Σ_s ‖x_s − x_{s+1}‖`; depends on scenario order.
    #[default]
    Consecutive,
    /// `1/(2S(S−1)) Σ_{s≠s'} ‖x_s − x_{s'}‖`.
    AllPairs,
}

/// Per-cell scores with the issue (ES) or delivery (VS) time of each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCells {
    /// `[rows, areas]`; a single column labelled `all` for pooled scores.
    pub values: Array2<f64>,
    pub times: Vec<NaiveDateTime>,
    pub areas: Vec<String>,
}

fn month_key(t: &NaiveDateTime) -> String {
    t.format("%Y-%m").to_string()
}

impl ScoreCells {
    pub fn aggregate(&self) -> f64 {
        self.values.mean().unwrap_or(f64::NAN)
    }

    pub fn per_area(&self) -> Vec<(String, f64)> {
        self.areas
            .iter()
            .enumerate()
            .map(|(r, a)| (a.clone(), self.values.column(r).mean().unwrap_or(f64::NAN)))
            .collect()
    }

    fn month_rows(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.times.iter().enumerate() {
            out.entry(month_key(t)).or_default().push(i);
        }
        out
    }

    /// Calendar-month means over all areas; months without rows are absent.
    pub fn monthly(&self) -> Vec<(String, f64)> {
        self.month_rows()
            .into_iter()
            .map(|(m, rows)| {
                let v: f64 = rows.iter().map(|&i| self.values.row(i).sum()).sum();
                (m, v / (rows.len() * self.areas.len()) as f64)
            })
            .collect()
    }

    pub fn monthly_per_area(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (m, rows) in self.month_rows() {
            for (r, a) in self.areas.iter().enumerate() {
                let v: f64 = rows.iter().map(|&i| self.values[[i, r]]).sum();
                out.push((m.clone(), a.clone(), v / rows.len() as f64));
            }
        }
        out
    }
}

fn check_scenarios(scenarios: &[Array3<f64>], min: usize) -> Result<(usize, usize, usize)> {
    if scenarios.len() < min {
        return Err(Error::TooFewScenarios(scenarios.len()));
    }
    let dim = scenarios[0].dim();
    if let Some(bad) = scenarios.iter().find(|s| s.dim() != dim) {
        let b = bad.dim();
        return Err(Error::shape("scenarios", &[dim.0, dim.1, dim.2], &[b.0, b.1, b.2]));
    }
    Ok(dim)
}

fn norm_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Energy score per issue `t` and area `r` over the `m`-horizon vector,
/// against `obs[t..t+m, r]`. Only issues whose whole horizon is observed are
/// scored. Returns `[issues, d]`.
pub fn energy_score_array(scenarios: &[Array3<f64>], obs: &Array2<f64>, spread: SpreadTerm) -> Result<Array2<f64>> {
    let (n, m, d) = check_scenarios(scenarios, 2)?;
    if obs.ncols() != d {
        return Err(Error::shape("energy_score", &[n, m, d], &[obs.nrows(), obs.ncols()]));
    }
    let scored = n.min((obs.nrows() + 1).saturating_sub(m));
    if scored == 0 {
        return Err(Error::CoverageGap {
            have: obs.nrows(),
            need: m,
        });
    }
    let sc = scenarios.len() as f64;
    let rows: Vec<Vec<f64>> = (0..scored)
        .into_par_iter()
        .map(|t| {
            (0..d)
                .map(|r| {
                    let truth = obs.slice(s![t..t + m, r]);
                    let paths: Vec<_> = scenarios.iter().map(|x| x.slice(s![t, .., r])).collect();
                    let fit: f64 = paths.iter().map(|p| norm_diff(p.iter(), truth.iter())).sum::<f64>() / sc;
                    let spread_value = match spread {
                        SpreadTerm::Consecutive => {
                            paths
                                .windows(2)
                                .map(|w| norm_diff(w[0].iter(), w[1].iter()))
                                .sum::<f64>()
                                / (2.0 * (sc - 1.0))
                        }
                        SpreadTerm::AllPairs => {
                            let mut total = 0.0;
                            for a in 0..paths.len() {
                                for b in a + 1..paths.len() {
                                    total += norm_diff(paths[a].iter(), paths[b].iter());
                                }
                            }
                            total / (sc * (sc - 1.0))
                        }
                    };
                    fit - spread_value
                })
                .collect()
        })
        .collect();
    Ok(Array2::from_shape_vec((scored, d), rows.concat()).expect("score shape"))
}

fn trajectory_arrays(scenarios: &[ForecastTrajectory]) -> Vec<Array3<f64>> {
    scenarios.iter().map(|s| s.values.clone()).collect()
}

pub fn energy_score(
    scenarios: &[ForecastTrajectory],
    obs: &PseudoObservations,
    spread: SpreadTerm,
) -> Result<ScoreCells> {
    let values = energy_score_array(&trajectory_arrays(scenarios), &obs.values, spread)?;
    let first = scenarios[0].start_time;
    let times = scenarios[0]
        .issue_hours
        .iter()
        .take(values.nrows())
        .map(|&h| first + chrono::Duration::hours(h))
        .collect();
    Ok(ScoreCells {
        values,
        times,
        areas: scenarios[0].area_ids.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VsConfig {
    pub gamma: f64,
    /// Symmetric `d × d` pair weights; uniform when unset.
    pub weights: Option<Vec<Vec<f64>>>,
    /// Lags `1..=K`; all available horizons (`m − 1`) when unset.
    pub lags: Option<usize>,
}

impl Default for VsConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            weights: None,
            lags: None,
        }
    }
}

/// Variogram score per delivery `T` for every `T` that is forecast at all
/// lags `1..=K` and observed. Returns `(T, VS_T)` pairs.
pub fn variogram_score_array(scenarios: &[Array3<f64>], obs: &Array2<f64>, cfg: &VsConfig) -> Result<Vec<(usize, f64)>> {
    let (n, m, d) = check_scenarios(scenarios, 1)?;
    if d < 2 {
        return Err(Error::SingleArea);
    }
    if obs.ncols() != d {
        return Err(Error::shape("variogram_score", &[n, m, d], &[obs.nrows(), obs.ncols()]));
    }
    let k_max = cfg.lags.unwrap_or(m - 1);
    if k_max == 0 || k_max >= m {
        return Err(Error::InvalidConfig(format!("lags {k_max} outside 1..{m}")));
    }
    if let Some(w) = &cfg.weights {
        if w.len() != d || w.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidConfig(format!("weights must be {d} x {d}")));
        }
    }
    let weight = |a: usize, b: usize| cfg.weights.as_ref().map_or(1.0, |w| w[a][b]);
    let last = n.min(obs.nrows().saturating_sub(1));
    if last < k_max {
        return Err(Error::CoverageGap {
            have: obs.nrows(),
            need: k_max + 1,
        });
    }
    let norm = (k_max * scenarios.len()) as f64;
    let g = cfg.gamma;
    Ok((k_max..=last)
        .into_par_iter()
        .map(|big_t| {
            let mut total = 0.0;
            for a in 0..d {
                for b in a + 1..d {
                    let observed = (obs[[big_t, a]] - obs[[big_t, b]]).abs().powf(g);
                    let mut expected = 0.0;
                    for k in 1..=k_max {
                        for sc in scenarios {
                            expected += (sc[[big_t - k, k, a]] - sc[[big_t - k, k, b]]).abs().powf(g);
                        }
                    }
                    total += weight(a, b) * (observed - expected / norm).powi(2);
                }
            }
            (big_t, total)
        })
        .collect())
}

pub fn variogram_score(scenarios: &[ForecastTrajectory], obs: &PseudoObservations, cfg: &VsConfig) -> Result<ScoreCells> {
    let per_t = variogram_score_array(&trajectory_arrays(scenarios), &obs.values, cfg)?;
    Ok(ScoreCells {
        values: Array2::from_shape_vec((per_t.len(), 1), per_t.iter().map(|p| p.1).collect())
            .expect("score shape"),
        times: per_t.iter().map(|p| obs.time(p.0)).collect(),
        areas: vec!["all".into()],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Scenario count `S` for ES and VS.
    pub scenarios: usize,
    pub seed: u64,
    /// Generated sequences for MiVo; the held-out count when unset.
    pub mivo_samples: Option<usize>,
    pub spread: SpreadTerm,
    pub variogram: VsConfig,
    pub rebuild: RebuildConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenarios: 100,
            seed: 0,
            mivo_samples: None,
            spread: SpreadTerm::Consecutive,
            variogram: VsConfig::default(),
            rebuild: RebuildConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    pub mivo: f64,
    pub es: ScoreCells,
    pub vs: ScoreCells,
    pub scenarios: usize,
    pub seed: u64,
}

/// One line of the long-format report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub metric: String,
    pub month: String,
    pub area: String,
    pub value: f64,
}

impl EvaluationReport {
    pub fn es_aggregate(&self) -> f64 {
        self.es.aggregate()
    }

    pub fn vs_aggregate(&self) -> f64 {
        self.vs.aggregate()
    }

    /// Aggregates first (`month = area = all`), then monthly and per-area
    /// breakdowns.
    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |metric: &str, month: &str, area: &str, value: f64| ReportRow {
            model: self.model.clone(),
            metric: metric.into(),
            month: month.into(),
            area: area.into(),
            value,
        };
        let mut out = vec![
            row("mivo", "all", "all", self.mivo),
            row("es", "all", "all", self.es_aggregate()),
            row("vs", "all", "all", self.vs_aggregate()),
        ];
        for (a, v) in self.es.per_area() {
            out.push(row("es", "all", &a, v));
        }
        for (m, v) in self.es.monthly() {
            out.push(row("es", &m, "all", v));
        }
        for (m, a, v) in self.es.monthly_per_area() {
            out.push(row("es", &m, &a, v));
        }
        for (m, v) in self.vs.monthly() {
            out.push(row("vs", &m, "all", v));
        }
        out
    }
}

/// Sample stream seed for scenario `s` under `seed`.
pub fn scenario_seed(seed: u64, s: usize) -> u64 {
    stream_rng(seed, s as u64 + 1).gen()
}

/// Scores a generator `sample(count, seed)` against a held-out trajectory:
/// MiVo on updates, ES and VS on `S` scenario trajectories rebuilt against
/// `obs` (the held-out trajectory's own diagonal when `None`).
pub fn evaluate_generator<F>(
    name: &str,
    sample: F,
    held_out: &ForecastTrajectory,
    obs: Option<&PseudoObservations>,
    cfg: &EvalConfig,
) -> Result<EvaluationReport>
where
    F: Fn(usize, u64) -> Result<UpdateSeries> + Sync,
{
    if cfg.scenarios < 2 {
        return Err(Error::TooFewScenarios(cfg.scenarios));
    }
    let real = extract_updates(held_out)?;
    let own_obs;
    let obs = match obs {
        Some(o) => o,
        None => {
            own_obs = PseudoObservations::from_trajectory(held_out);
            &own_obs
        }
    };
    let n_mivo = cfg.mivo_samples.unwrap_or(real.n_sequences());
    let gen = sample(n_mivo, cfg.seed)?;
    let mivo_value = mivo(&distance_matrix(&real, &gen)?)?;
    let n_u = held_out.n() - 1;
    let scenarios: Vec<ForecastTrajectory> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|s| {
            let mut u = sample(n_u, scenario_seed(cfg.seed, s))?;
            u.issue_hours = (1..=n_u as i64).collect();
            u.start_time = None;
            let mut traj = rebuild_trajectory(obs, &u, &cfg.rebuild)?;
            traj.start_time = held_out.start_time;
            Ok(traj)
        })
        .collect::<Result<_>>()?;
    let es = energy_score(&scenarios, obs, cfg.spread)?;
    let vs = variogram_score(&scenarios, obs, &cfg.variogram)?;
    Ok(EvaluationReport {
        model: name.into(),
        mivo: mivo_value,
        es,
        vs,
        scenarios: cfg.scenarios,
        seed: cfg.seed,
    })
}

/// Long-format CSV (`model,metric,month,area,value`) preceded by `# ` comment
/// lines.
pub fn write_report_csv(reports: &[EvaluationReport], path: &Path, comments: &[String]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for c in comments {
        writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in reports.iter().flat_map(EvaluationReport::rows) {
        w.serialize(&r).map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.into(),
            source,
        })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|source| Error::Csv {
                path: path.into(),
                source,
            })
        })
        .collect()
}

/// Aligned text table with one line per model.
pub fn summary_table(reports: &[EvaluationReport]) -> String {
    let width = reports.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>12}  {:>12}", "model", "ES", "VS", "MiVo");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.4}  {:>12.4}  {:>12.4}",
            r.model,
            r.es_aggregate(),
            r.vs_aggregate(),
            r.mivo
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn series(values: Vec<f64>, n: usize, m: usize, d: usize) -> UpdateSeries {
        UpdateSeries::from_values(Array3::from_shape_vec((n, m, d), values).unwrap())
    }

    #[test]
    fn distance_hand_values() {
        let a = series(vec![0.0, 0.0], 1, 2, 1);
        let b = series(vec![3.0, 4.0], 1, 2, 1);
        assert_eq!(distance_matrix(&a, &b).unwrap().values, Array2::from_elem((1, 1), 5.0));
        assert_eq!(distance_matrix(&a, &a).unwrap().values, Array2::<f64>::zeros((1, 1)));
        let c = series(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2, 1);
        let ab = distance_matrix(&c, &b).unwrap().values;
        let ba = distance_matrix(&b, &c).unwrap().values;
        assert_eq!(ab.t(), ba);
        let wrong = series(vec![0.0; 3], 1, 3, 1);
        assert!(matches!(distance_matrix(&a, &wrong), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mivo_hand_values() {
        let dm = DistanceMatrix {
            values: Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 1.0]).unwrap(),
        };
        assert_eq!(mivo(&dm).unwrap(), 1.0);
        let empty = DistanceMatrix {
            values: Array2::zeros((0, 3)),
        };
        assert!(matches!(mivo(&empty), Err(Error::EmptyMatrix)));
        let same = series(vec![1.0, 2.0, 3.0, 4.0], 2, 2, 1);
        assert_eq!(mivo(&distance_matrix(&same, &same).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn mivo_penalizes_mode_collapse_through_the_mean() {
        let real = series((0..20).map(f64::from).collect(), 10, 2, 1);
        let collapsed = series([4.0, 5.0].repeat(10), 10, 2, 1);
        let dm = distance_matrix(&real, &collapsed).unwrap();
        let d2: Vec<f64> = dm
            .values
            .columns()
            .into_iter()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        assert_eq!(crate::stats::variance(&d2), 0.0);
        let value = mivo(&dm).unwrap();
        assert!(value > 5.0, "{value}");
        assert!(value > mivo(&distance_matrix(&real, &real).unwrap()).unwrap());
    }

    fn single(v: f64, m: usize) -> Array3<f64> {
        Array3::from_elem((1, m, 1), v)
    }

    #[test]
    fn energy_score_hand_case() {
        let scen = vec![single(0.0, 1), single(2.0, 1)];
        let obs = Array2::from_elem((1, 1), 1.0);
        for spread in [SpreadTerm::Consecutive, SpreadTerm::AllPairs] {
            let es = energy_score_array(&scen, &obs, spread).unwrap();
            assert_eq!(es[[0, 0]], 0.0);
        }
    }

    #[test]
    fn energy_score_perfect_and_biased() {
        let obs = Array2::from_shape_fn((6, 2), |(t, r)| t as f64 + 10.0 * r as f64);
        let exact = Array3::from_shape_fn((3, 4, 2), |(t, h, r)| obs[[t + h, r]]);
        let es = energy_score_array(&[exact.clone(), exact.clone(), exact.clone()], &obs, SpreadTerm::Consecutive).unwrap();
        assert!(es.iter().all(|&v| v == 0.0));
        let c = 0.75;
        let biased = exact.mapv(|v| v + c);
        let es = energy_score_array(&[biased.clone(), biased], &obs, SpreadTerm::Consecutive).unwrap();
        // ‖c·1_m‖ over the 4-horizon vector
        let expected = c * 2.0;
        assert!(es.iter().all(|&v| (v - expected).abs() < 1e-12));
        assert!(matches!(
            energy_score_array(&[exact], &obs, SpreadTerm::Consecutive),
            Err(Error::TooFewScenarios(1))
        ));
    }

    #[test]
    fn consecutive_spread_depends_on_order() {
        let scen = vec![single(0.0, 1), single(2.0, 1), single(0.0, 1), single(2.0, 1)];
        let sorted = vec![single(0.0, 1), single(0.0, 1), single(2.0, 1), single(2.0, 1)];
        let obs = Array2::from_elem((1, 1), 1.0);
        let a = energy_score_array(&scen, &obs, SpreadTerm::Consecutive).unwrap()[[0, 0]];
        let b = energy_score_array(&sorted, &obs, SpreadTerm::Consecutive).unwrap()[[0, 0]];
        assert_ne!(a, b);
        let a = energy_score_array(&scen, &obs, SpreadTerm::AllPairs).unwrap()[[0, 0]];
        let b = energy_score_array(&sorted, &obs, SpreadTerm::AllPairs).unwrap()[[0, 0]];
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn variogram_hand_case() {
        // one issue, horizons 0..2, two areas; delivery T = 1 is the lag-1 forecast
        let scen = Array3::from_shape_vec((1, 2, 2), vec![0.0, 0.0, 5.0, 4.0]).unwrap();
        let obs = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 7.0, 4.0]).unwrap();
        let cfg = VsConfig {
            lags: Some(1),
            ..VsConfig::default()
        };
        let vs = variogram_score_array(std::slice::from_ref(&scen), &obs, &cfg).unwrap();
        assert_eq!(vs, vec![(1, 4.0)]);
        let doubled = VsConfig {
            weights: Some(vec![vec![0.0, 2.0], vec![2.0, 0.0]]),
            ..cfg.clone()
        };
        assert_eq!(variogram_score_array(&[scen], &obs, &doubled).unwrap(), vec![(1, 8.0)]);
    }

    #[test]
    fn variogram_zero_for_perfect_gaps_and_single_area_error() {
        let obs = Array2::from_shape_fn((8, 3), |(t, r)| (t * t) as f64 + 3.0 * r as f64);
        let exact = Array3::from_shape_fn((5, 4, 3), |(t, h, r)| obs[[t + h, r]] + 0.5 * h as f64);
        let vs = variogram_score_array(&[exact.clone(), exact], &obs, &VsConfig::default()).unwrap();
        assert!(!vs.is_empty());
        assert!(vs.iter().all(|&(_, v)| v.abs() < 1e-20));
        let one = Array3::zeros((5, 4, 1));
        assert!(matches!(
            variogram_score_array(&[one], &Array2::zeros((8, 1)), &VsConfig::default()),
            Err(Error::SingleArea)
        ));
    }

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2021, 1, 31).unwrap().and_hms_opt(20, 0, 0).unwrap()
    }

    fn held_out(n: usize, m: usize, d: usize, seed: u64) -> ForecastTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = PseudoObservations {
            values: Array2::from_shape_fn((n + m - 1, d), |_| 50.0 + rng.gen::<f64>()),
            start_time: t0(),
            area_ids: (0..d).map(|r| format!("a{r}")).collect(),
        };
        let u = UpdateSeries::from_values(Array3::from_shape_fn((n - 1, m - 2, d), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }));
        crate::reconstruct::rebuild_unclipped(&obs, &u).unwrap()
    }

    fn gaussian(shift: f64) -> impl Fn(usize, u64) -> Result<UpdateSeries> + Sync {
        move |count, seed| {
            let mut rng = stream_rng(seed, 0);
            Ok(UpdateSeries::from_values(Array3::from_shape_fn((count, 4, 2), |_| {
                shift + rng.sample::<f64, _>(StandardNormal)
            })))
        }
    }

    #[test]
    fn echo_generator_has_zero_mivo_and_report_is_deterministic() {
        let traj = held_out(30, 6, 2, 1);
        let real = extract_updates(&traj).unwrap();
        let echo = |count: usize, _seed: u64| Ok(real.select(0..count.min(real.n_sequences())));
        let cfg = EvalConfig {
            scenarios: 4,
            ..EvalConfig::default()
        };
        let rep = evaluate_generator("echo", echo, &traj, None, &cfg).unwrap();
        assert_eq!(rep.mivo, 0.0);
        let a = evaluate_generator("g", gaussian(0.0), &traj, None, &cfg).unwrap();
        let b = evaluate_generator("g", gaussian(0.0), &traj, None, &cfg).unwrap();
        assert_eq!(a, b);
        // the window straddles a month boundary
        assert_eq!(a.es.monthly().len(), 2);
        assert!(a.rows().len() > 3);
        assert_eq!(a.rows()[..3].iter().map(|r| r.metric.as_str()).collect::<Vec<_>>(), ["mivo", "es", "vs"]);
    }

    #[test]
    fn true_generator_beats_shifted_one_on_energy_score() {
        let mut wins = 0;
        for trial in 0..20 {
            let traj = held_out(40, 6, 2, 100 + trial);
            let cfg = EvalConfig {
                scenarios: 20,
                seed: trial,
                rebuild: RebuildConfig::unclipped(),
                ..EvalConfig::default()
            };
            let good = evaluate_generator("true", gaussian(0.0), &traj, None, &cfg).unwrap();
            let bad = evaluate_generator("shifted", gaussian(0.5), &traj, None, &cfg).unwrap();
            wins += u32::from(good.es_aggregate() < bad.es_aggregate());
        }
        assert!(wins >= 17, "{wins}/20");
    }

    #[test]
    fn report_csv_round_trip() {
        let traj = held_out(20, 5, 2, 3);
        let cfg = EvalConfig {
            scenarios: 3,
            ..EvalConfig::default()
        };
        let rep = evaluate_generator("g", |c, s| {
            let mut rng = stream_rng(s, 0);
            Ok(UpdateSeries::from_values(Array3::from_shape_fn((c, 3, 2), |_| rng.gen::<f64>())))
        }, &traj, None, &cfg)
        .unwrap();
        let dir = std::env::temp_dir().join(format!("reforecast-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.csv");
        write_report_csv(std::slice::from_ref(&rep), &path, &["seed: 0".into()]).unwrap();
        let rows = read_report_csv(&path).unwrap();
        assert_eq!(rows, rep.rows());
        let table = summary_table(&[rep]);
        assert!(table.lines().count() == 2 && table.contains("MiVo"));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
