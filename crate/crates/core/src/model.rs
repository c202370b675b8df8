//! One fitted generator of any family, and its on-disk artifact.
//!
//! An artifact is a magic line `REFORECAST-MODEL v<version>` followed by the
//! JSON-serialized model.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::argen::{ancestral_sample, train, ArConfig, ArKind, ArModel};
use crate::copula::{fit_gaussian_copula, sample_copula, CopulaModel, DEFAULT_SHRINKAGE};
use crate::data::{AreaScaler, UpdateSeries};
use crate::error::{Error, Result};
use crate::flow::{flow_fit, FlowConfig, FlowStack, LayerKind};
use crate::stats::stream_rng;
use crate::train::{split_point, LossHistory, TrainConfig};

pub const ARTIFACT_MAGIC: &str = "REFORECAST-MODEL";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Copula,
    Nf,
    Dgpvar,
    Rnnnf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Copula, Self::Nf, Self::Dgpvar, Self::Rnnnf];

    pub fn name(self) -> &'static str {
        match self {
            Self::Copula => "copula",
            Self::Nf => "nf",
            Self::Dgpvar => "dgpvar",
            Self::Rnnnf => "rnnnf",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model '{s}' (copula, nf, dgpvar, rnnnf)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NfConfig {
    pub layers: usize,
    pub hidden: usize,
    pub kind: LayerKind,
    pub scale_cap: f64,
    pub train: TrainConfig,
}

impl Default for NfConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            layers: flow.layers,
            hidden: flow.hidden,
            kind: flow.kind,
            scale_cap: flow.scale_cap,
            train: TrainConfig::default(),
        }
    }
}

/// Hyperparameters of every family; only the section of the fitted kind is
/// read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub copula_shrinkage: f64,
    pub nf: NfConfig,
    pub ar: ArConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            copula_shrinkage: DEFAULT_SHRINKAGE,
            nf: NfConfig::default(),
            ar: ArConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Sets the training seed of every family.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.nf.train.seed = seed;
        self.ar.train.seed = seed;
        self
    }
}

/// Unconditional flow over whole flattened sequences, after per-area
/// standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NfModel {
    pub stack: FlowStack,
    pub scaler: AreaScaler,
    pub m_prime: usize,
    pub d: usize,
    pub area_ids: Vec<String>,
    pub history: LossHistory,
}

fn scale_rows(values: &Array3<f64>, f: impl Fn(usize, f64) -> f64) -> Array2<f64> {
    let (n, m, d) = values.dim();
    let mut out = Array2::zeros((n, m * d));
    for ((i, k, r), &v) in values.indexed_iter() {
        out[[i, k * d + r]] = f(r, v);
    }
    out
}

pub fn fit_nf(updates: &UpdateSeries, config: &NfConfig) -> Result<NfModel> {
    let (n, m_prime, d) = updates.values.dim();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let split = split_point(n, config.train.val_fraction);
    let train_part = updates.select(0..split);
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|r| train_part.values.slice(ndarray::s![.., .., r]).iter().copied().collect())
        .collect();
    let scaler = AreaScaler::fit(&columns);
    let data = scale_rows(&updates.values, |r, v| scaler.forward(r, v));
    let flow = FlowConfig {
        dim: m_prime * d,
        cond_dim: 0,
        layers: config.layers,
        hidden: config.hidden,
        kind: config.kind,
        scale_cap: config.scale_cap,
    };
    let mut stack = FlowStack::new(flow, &mut stream_rng(config.train.seed, 0))?;
    let history = flow_fit(&mut stack, &data, None, &config.train)?;
    Ok(NfModel {
        stack,
        scaler,
        m_prime,
        d,
        area_ids: updates.area_ids.clone(),
        history,
    })
}

impl NfModel {
    /// Sample `j` inverts latent draws from its own stream.
    pub fn sample(&self, count: usize, seed: u64) -> Result<UpdateSeries> {
        let dim = self.m_prime * self.d;
        let z: Vec<f64> = (0..count)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut rng = stream_rng(seed, j as u64);
                (0..dim).map(move |_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
            })
            .collect();
        let z = Array2::from_shape_vec((count, dim), z).expect("latent shape");
        let starts: Vec<usize> = (0..count).step_by(256).collect();
        let rows: Vec<Array2<f64>> = starts
            .into_par_iter()
            .map(|a| {
                let block = z.slice(ndarray::s![a..(a + 256).min(count), ..]).to_owned();
                self.stack.inverse(&block, None)
            })
            .collect::<Result<_>>()?;
        let mut values = Array3::zeros((count, self.m_prime, self.d));
        let mut i = 0;
        for block in rows {
            for row in block.rows() {
                for (c, &v) in row.iter().enumerate() {
                    let r = c % self.d;
                    values[[i, c / self.d, r]] = self.scaler.inverse(r, v);
                }
                i += 1;
            }
        }
        let mut out = UpdateSeries::from_values(values);
        out.area_ids = self.area_ids.clone();
        Ok(out)
    }

    /// Per-sequence NLL in the original units.
    pub fn nll(&self, updates: &UpdateSeries) -> Result<Vec<f64>> {
        let data = scale_rows(&updates.values, |r, v| self.scaler.forward(r, v));
        let log_jac: f64 = self.scaler.std.iter().map(|s| s.ln()).sum::<f64>() * self.m_prime as f64;
        Ok(self.stack.log_prob(&data, None)?.into_iter().map(|lp| log_jac - lp).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "lowercase")]
pub enum FittedModel {
    Copula(CopulaModel),
    Nf(NfModel),
    Dgpvar(ArModel),
    Rnnnf(ArModel),
}

impl FittedModel {
    pub fn fit(kind: ModelKind, updates: &UpdateSeries, config: &ModelConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Copula => Self::Copula(fit_gaussian_copula(updates, config.copula_shrinkage)?),
            ModelKind::Nf => Self::Nf(fit_nf(updates, &config.nf)?),
            ModelKind::Dgpvar => Self::Dgpvar(train(ArKind::Dgpvar, updates, &config.ar)?),
            ModelKind::Rnnnf => Self::Rnnnf(train(ArKind::Rnnnf, updates, &config.ar)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Copula(_) => ModelKind::Copula,
            Self::Nf(_) => ModelKind::Nf,
            Self::Dgpvar(_) => ModelKind::Dgpvar,
            Self::Rnnnf(_) => ModelKind::Rnnnf,
        }
    }

    /// `(m', d)` of the sequences the model generates.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Copula(c) => (c.m_prime, c.d),
            Self::Nf(f) => (f.m_prime, f.d),
            Self::Dgpvar(a) | Self::Rnnnf(a) => (a.m_prime, a.d),
        }
    }

    /// `count` independent update sequences; a deterministic function of
    /// `seed` whatever the thread count.
    pub fn sample(&self, count: usize, seed: u64) -> Result<UpdateSeries> {
        match self {
            Self::Copula(c) => sample_copula(c, count, seed),
            Self::Nf(f) => f.sample(count, seed),
            Self::Dgpvar(a) | Self::Rnnnf(a) => ancestral_sample(a, count, seed),
        }
    }

    /// Header, then one `# ` line per comment, then the JSON body.
    pub fn write<W: Write>(&self, mut w: W, comments: &[String]) -> Result<()> {
        let err = |e: std::io::Error| Error::Artifact(e.to_string());
        writeln!(w, "{ARTIFACT_MAGIC} v{ARTIFACT_VERSION}").map_err(err)?;
        for c in comments {
            for line in c.lines() {
                writeln!(w, "# {line}").map_err(err)?;
            }
        }
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Artifact(e.to_string()))?;
        writeln!(w).map_err(err)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)
            .map_err(|e| Error::Artifact(e.to_string()))?;
        let (header, mut body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let version = header
            .trim_end()
            .strip_prefix(ARTIFACT_MAGIC)
            .and_then(|rest| rest.trim_start().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Artifact("missing REFORECAST-MODEL header".into()))?;
        if version > ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "format version {version} is newer than supported version {ARTIFACT_VERSION}"
            )));
        }
        while body.starts_with('#') {
            body = body.split_once('\n').map_or("", |(_, rest)| rest);
        }
        serde_json::from_str(body).map_err(|e| Error::Artifact(e.to_string()))
    }

    pub fn save(&self, path: &Path, comments: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w, comments)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file).map_err(|e| match e {
            Error::Artifact(msg) => Error::Artifact(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn updates(n: usize, seed: u64) -> UpdateSeries {
        let mut rng = stream_rng(seed, 0);
        UpdateSeries::from_values(Array3::from_shape_fn((n, 3, 2), |(_, k, r)| {
            (1.0 + r as f64) * (k as f64 + rng.sample::<f64, _>(StandardNormal))
        }))
    }

    fn quick() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.nf.train.max_epochs = 3;
        cfg.nf.layers = 2;
        cfg.nf.hidden = 8;
        cfg.ar.train.max_epochs = 3;
        cfg.ar.hidden = 6;
        cfg.ar.flow_hidden = 6;
        cfg
    }

    #[test]
    fn every_kind_round_trips_through_the_artifact() {
        let u = updates(60, 1);
        for kind in ModelKind::ALL {
            let model = FittedModel::fit(kind, &u, &quick()).unwrap();
            assert_eq!(model.kind(), kind);
            assert_eq!(model.shape(), (3, 2));
            let mut buf = Vec::new();
            model.write(&mut buf, &["seed: 3".into()]).unwrap();
            assert!(buf.starts_with(b"REFORECAST-MODEL v1\n# seed: 3\n"));
            let back = FittedModel::read(buf.as_slice()).unwrap();
            assert_eq!(back, model);
            let a = model.sample(7, 3).unwrap();
            assert_eq!(a.values.dim(), (7, 3, 2));
            assert_eq!(a, back.sample(7, 3).unwrap());
            assert_eq!(a.values.slice(ndarray::s![..4, .., ..]).to_owned(), model.sample(4, 3).unwrap().values);
        }
    }

    #[test]
    fn newer_or_missing_header_fails() {
        let err = FittedModel::read("REFORECAST-MODEL v2\n{}".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("newer"), "{err}");
        assert!(FittedModel::read("{}".as_bytes()).is_err());
    }

    #[test]
    fn kind_names_parse() {
        for kind in ModelKind::ALL {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
        }
        assert!("gan".parse::<ModelKind>().is_err());
    }

    #[test]
    fn nf_nll_accounts_for_scaling() {
        let u = updates(50, 2);
        let mut cfg = quick().nf;
        cfg.train.lr = 0.0;
        let model = fit_nf(&u, &cfg).unwrap();
        // identity flow: Gaussian in standardized units, Jacobian of the scaler
        let nll = model.nll(&u.select(0..1)).unwrap()[0];
        let mut oracle = 0.0;
        for k in 0..3 {
            for r in 0..2 {
                let z = model.scaler.forward(r, u.values[[0, k, r]]);
                oracle += 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * z * z + model.scaler.std[r].ln();
            }
        }
        assert!((nll - oracle).abs() < 1e-10, "{nll} {oracle}");
    }
}
