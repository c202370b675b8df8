//! CSV readers and writers.
//!
//! Trajectories: `issue_time,area,h0,...,h{m-1}`, one row per issue hour and
//! area. Observations: `time,area,value`. Updates: `sequence,area,u0,...`.
//! Lines starting with `#` are comments; writers use them to embed run
//! metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use ndarray::{Array2, Array3};

use super::{ForecastTrajectory, PseudoObservations, UpdateSeries};
use crate::error::{Error, Result};

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Column names of the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectorySchema {
    pub issue_time: String,
    pub area: String,
    /// Horizon columns are `{prefix}0`, `{prefix}1`, ...
    pub horizon_prefix: String,
}

impl Default for TrajectorySchema {
    fn default() -> Self {
        Self {
            issue_time: "issue_time".into(),
            area: "area".into(),
            horizon_prefix: "h".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSchema {
    pub time: String,
    pub area: String,
    pub value: String,
}

impl Default for ObservationSchema {
    fn default() -> Self {
        Self {
            time: "time".into(),
            area: "area".into(),
            value: "value".into(),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIME_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

struct Table {
    headers: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text
        .lines()
        .all(|l| l.trim().is_empty() || l.trim_start().starts_with('#'))
    {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    let headers = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table { headers, rows })
}

fn column(path: &Path, headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.into(),
            column: name.into(),
        })
}

fn number(path: &Path, line: u64, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::NonNumericCell {
            path: path.into(),
            line,
            cell: cell.into(),
        }),
    }
}

fn timestamp(path: &Path, line: u64, cell: &str) -> Result<NaiveDateTime> {
    parse_timestamp(cell).ok_or_else(|| Error::BadTimestamp {
        path: path.into(),
        line,
        cell: cell.into(),
    })
}

/// Indices of `{prefix}0..` columns, which must follow the two key columns
/// in order.
fn value_columns(path: &Path, headers: &[String], keys: [usize; 2], prefix: &str) -> Result<usize> {
    let rest: Vec<&String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !keys.contains(i))
        .map(|(_, h)| h)
        .collect();
    for (k, h) in rest.iter().enumerate() {
        if **h != format!("{prefix}{k}") {
            return Err(Error::HeaderMismatch {
                path: path.into(),
                detail: format!("expected column `{prefix}{k}`, found `{h}`"),
            });
        }
    }
    if keys != [0, 1] {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            detail: "key columns must come first".into(),
        });
    }
    Ok(rest.len())
}

struct Grouped<K> {
    keys: Vec<K>,
    areas: Vec<String>,
    cells: BTreeMap<K, HashMap<usize, Vec<f64>>>,
}

fn group_rows<K: Ord + Copy>(
    path: &Path,
    entries: Vec<(u64, K, String, Vec<f64>)>,
) -> Result<Grouped<K>> {
    let mut areas: Vec<String> = Vec::new();
    let mut area_index: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<K, HashMap<usize, Vec<f64>>> = BTreeMap::new();
    for (line, key, area, vals) in entries {
        let next = areas.len();
        let a = *area_index.entry(area.clone()).or_insert_with(|| {
            areas.push(area.clone());
            next
        });
        if cells.entry(key).or_default().insert(a, vals).is_some() {
            return Err(Error::MalformedTable {
                path: path.into(),
                detail: format!("line {line}: duplicate row for area `{area}`"),
            });
        }
    }
    for row in cells.values() {
        if row.len() != areas.len() {
            return Err(Error::MalformedTable {
                path: path.into(),
                detail: format!(
                    "every time stamp needs all {} areas, one has {}",
                    areas.len(),
                    row.len()
                ),
            });
        }
    }
    Ok(Grouped {
        keys: cells.keys().copied().collect(),
        areas,
        cells,
    })
}

fn hour_offsets(path: &Path, times: &[NaiveDateTime]) -> Result<Vec<i64>> {
    let start = times[0];
    times
        .iter()
        .map(|&t| {
            let delta = t - start;
            if delta.num_seconds() % 3600 != 0 {
                Err(Error::MalformedTable {
                    path: path.into(),
                    detail: format!("{} is not on the hourly grid", format_timestamp(t)),
                })
            } else {
                Ok(delta.num_hours())
            }
        })
        .collect()
}

/// Reads a trajectory CSV into a dense `[n, m, d]` array sorted by issue time.
/// Missing issue hours are kept as gaps (see [`ForecastTrajectory::gaps`]).
pub fn load_trajectories(path: &Path, schema: &TrajectorySchema) -> Result<ForecastTrajectory> {
    let table = read_table(path)?;
    let ti = column(path, &table.headers, &schema.issue_time)?;
    let ai = column(path, &table.headers, &schema.area)?;
    let m = value_columns(path, &table.headers, [ti, ai], &schema.horizon_prefix)?;
    if m < 3 {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            detail: format!("need at least 3 horizon columns, found {m}"),
        });
    }
    let mut entries = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        let found = row.iter().skip(2).filter(|c| !c.is_empty()).count();
        if row.len() != m + 2 || found != m {
            return Err(Error::InconsistentHorizonCount {
                path: path.into(),
                line,
                expected: m,
                found,
            });
        }
        let t = timestamp(path, line, &row[ti])?;
        let vals = row[2..]
            .iter()
            .map(|c| number(path, line, c))
            .collect::<Result<Vec<_>>>()?;
        entries.push((line, t, row[ai].clone(), vals));
    }
    if entries.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let g = group_rows(path, entries)?;
    let (n, d) = (g.keys.len(), g.areas.len());
    let mut values = Array3::zeros((n, m, d));
    for (t, key) in g.keys.iter().enumerate() {
        for (r, vals) in &g.cells[key] {
            for (k, v) in vals.iter().enumerate() {
                values[[t, k, *r]] = *v;
            }
        }
    }
    Ok(ForecastTrajectory {
        values,
        start_time: g.keys[0],
        issue_hours: hour_offsets(path, &g.keys)?,
        area_ids: g.areas,
        p_max: None,
    })
}

/// Reads an observation CSV. Time stamps must form a gap-free hourly series.
pub fn load_observations(path: &Path, schema: &ObservationSchema) -> Result<PseudoObservations> {
    let table = read_table(path)?;
    let ti = column(path, &table.headers, &schema.time)?;
    let ai = column(path, &table.headers, &schema.area)?;
    let vi = column(path, &table.headers, &schema.value)?;
    if table.headers.len() != 3 {
        return Err(Error::HeaderMismatch {
            path: path.into(),
            detail: format!("expected 3 columns, found {}", table.headers.len()),
        });
    }
    let mut entries = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        if row.len() != 3 {
            return Err(Error::MalformedTable {
                path: path.into(),
                detail: format!("line {line}: expected 3 cells, found {}", row.len()),
            });
        }
        let t = timestamp(path, line, &row[ti])?;
        let v = number(path, line, &row[vi])?;
        entries.push((line, t, row[ai].clone(), vec![v]));
    }
    if entries.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let g = group_rows(path, entries)?;
    let hours = hour_offsets(path, &g.keys)?;
    if hours.iter().enumerate().any(|(i, &h)| h != i as i64) {
        return Err(Error::MalformedTable {
            path: path.into(),
            detail: "observation time stamps must be consecutive hours".into(),
        });
    }
    let mut values = Array2::zeros((g.keys.len(), g.areas.len()));
    for (t, key) in g.keys.iter().enumerate() {
        for (r, v) in &g.cells[key] {
            values[[t, *r]] = v[0];
        }
    }
    Ok(PseudoObservations {
        values,
        start_time: g.keys[0],
        area_ids: g.areas,
    })
}

/// Reads generated updates. Sequence `j` is assigned issue hour `j + 1`.
pub fn load_updates(path: &Path) -> Result<UpdateSeries> {
    let table = read_table(path)?;
    let si = column(path, &table.headers, "sequence")?;
    let ai = column(path, &table.headers, "area")?;
    let m = value_columns(path, &table.headers, [si, ai], "u")?;
    let mut entries = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows {
        let found = row.iter().skip(2).filter(|c| !c.is_empty()).count();
        if row.len() != m + 2 || found != m {
            return Err(Error::InconsistentHorizonCount {
                path: path.into(),
                line,
                expected: m,
                found,
            });
        }
        let seq: usize = row[si].parse().map_err(|_| Error::NonNumericCell {
            path: path.into(),
            line,
            cell: row[si].clone(),
        })?;
        let vals = row[2..]
            .iter()
            .map(|c| number(path, line, c))
            .collect::<Result<Vec<_>>>()?;
        entries.push((line, seq, row[ai].clone(), vals));
    }
    if entries.is_empty() {
        return Err(Error::EmptyFile { path: path.into() });
    }
    let g = group_rows(path, entries)?;
    if g.keys.iter().enumerate().any(|(i, &k)| k != i) {
        return Err(Error::MalformedTable {
            path: path.into(),
            detail: "sequence ids must be 0, 1, 2, ...".into(),
        });
    }
    let mut values = Array3::zeros((g.keys.len(), m, g.areas.len()));
    for (i, key) in g.keys.iter().enumerate() {
        for (r, vals) in &g.cells[key] {
            for (k, v) in vals.iter().enumerate() {
                values[[i, k, *r]] = *v;
            }
        }
    }
    let mut u = UpdateSeries::from_values(values);
    u.area_ids = g.areas;
    Ok(u)
}

fn write_with_comments(
    path: &Path,
    comments: &[String],
    header: Vec<String>,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    for c in comments {
        for line in c.lines() {
            writeln!(buf, "# {line}").expect("write to vec");
        }
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let csv_err = |source| Error::Csv {
            path: path.into(),
            source,
        };
        w.write_record(&header).map_err(csv_err)?;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_trajectories(path: &Path, traj: &ForecastTrajectory, comments: &[String]) -> Result<()> {
    let (n, m, d) = traj.values.dim();
    let mut header = vec!["issue_time".to_string(), "area".to_string()];
    header.extend((0..m).map(|k| format!("h{k}")));
    let rows = (0..n).flat_map(|t| {
        (0..d).map(move |r| {
            let mut row = vec![format_timestamp(traj.issue_time(t)), traj.area_ids[r].clone()];
            row.extend((0..m).map(|k| traj.values[[t, k, r]].to_string()));
            row
        })
    });
    write_with_comments(path, comments, header, rows)
}

pub fn write_observations(path: &Path, obs: &PseudoObservations, comments: &[String]) -> Result<()> {
    let header = vec!["time".to_string(), "area".to_string(), "value".to_string()];
    let rows = (0..obs.len()).flat_map(|t| {
        (0..obs.d()).map(move |r| {
            vec![
                format_timestamp(obs.time(t)),
                obs.area_ids[r].clone(),
                obs.values[[t, r]].to_string(),
            ]
        })
    });
    write_with_comments(path, comments, header, rows)
}

pub fn write_updates(path: &Path, updates: &UpdateSeries, comments: &[String]) -> Result<()> {
    let (n, m, d) = updates.values.dim();
    let mut header = vec!["sequence".to_string(), "area".to_string()];
    header.extend((0..m).map(|k| format!("u{k}")));
    let rows = (0..n).flat_map(|i| {
        (0..d).map(move |r| {
            let mut row = vec![i.to_string(), updates.area_ids[r].clone()];
            row.extend((0..m).map(|k| updates.values[[i, k, r]].to_string()));
            row
        })
    });
    write_with_comments(path, comments, header, rows)
}
