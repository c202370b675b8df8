//! Gaussian-copula baseline over flattened update sequences.
//!
//! Every sequence is flattened horizon-major then area (`N = m'·d`
//! coordinates). Each coordinate gets its own empirical marginal; the
//! dependence is the correlation of the normal scores, shrunk toward the
//! identity.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{standard_normal_cdf, MarginalTransform, UpdateSeries};
use crate::error::{Error, Result};
use crate::stats::stream_rng;

pub const DEFAULT_SHRINKAGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub correlation: Array2<f64>,
    pub cholesky: Array2<f64>,
    pub marginals: MarginalTransform,
    pub shrinkage: f64,
    pub m_prime: usize,
    pub d: usize,
    pub n_train: usize,
    pub area_ids: Vec<String>,
}

impl CopulaModel {
    pub fn dim(&self) -> usize {
        self.m_prime * self.d
    }

    /// Fewer training sequences than coordinates: the raw correlation is
    /// singular and only shrinkage keeps it positive definite.
    pub fn is_underdetermined(&self) -> bool {
        self.n_train <= self.dim()
    }
}

pub fn fit_gaussian_copula(updates: &UpdateSeries, shrinkage: f64) -> Result<CopulaModel> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidConfig(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let (n, m_prime, d) = updates.values.dim();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let flat = updates.flattened();
    let dim = m_prime * d;
    let columns: Vec<Vec<f64>> = (0..dim).map(|j| flat.column(j).to_vec()).collect();
    let marginals = MarginalTransform::fit(columns.clone())?;
    let scores: Vec<Vec<f64>> = columns
        .iter()
        .enumerate()
        .map(|(j, col)| {
            col.iter()
                .map(|&v| marginals.to_normal_score(j, v))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let centred: Vec<Vec<f64>> = scores
        .iter()
        .map(|c| {
            let mu = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - mu).collect()
        })
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut correlation = Array2::<f64>::eye(dim);
    for a in 0..dim {
        for b in 0..a {
            let raw = if norms[a] > 0.0 && norms[b] > 0.0 {
                centred[a].iter().zip(&centred[b]).map(|(x, y)| x * y).sum::<f64>()
                    / (norms[a] * norms[b])
            } else {
                0.0
            };
            let rho = (1.0 - shrinkage) * raw.clamp(-1.0, 1.0);
            correlation[[a, b]] = rho;
            correlation[[b, a]] = rho;
        }
    }
    let dense = DMatrix::from_fn(dim, dim, |i, j| correlation[[i, j]]);
    let chol = dense
        .cholesky()
        .ok_or(Error::SingularCorrelation(shrinkage))?;
    let l = chol.l();
    let cholesky = Array2::from_shape_fn((dim, dim), |(i, j)| l[(i, j)]);
    Ok(CopulaModel {
        correlation,
        cholesky,
        marginals,
        shrinkage,
        m_prime,
        d,
        n_train: n,
        area_ids: updates.area_ids.clone(),
    })
}

/// Draws `count` sequences. Sample `j` uses random stream `j` under `seed`,
/// so the output does not depend on the thread count.
pub fn sample_copula(model: &CopulaModel, count: usize, seed: u64) -> Result<UpdateSeries> {
    let dim = model.dim();
    let rows: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, j as u64);
            let eps: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..dim)
                .map(|a| {
                    let y: f64 = (0..=a).map(|b| model.cholesky[[a, b]] * eps[b]).sum();
                    model.marginals.quantile(a, standard_normal_cdf(y))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut values = Array3::zeros((count, model.m_prime, model.d));
    for (i, row) in rows.iter().enumerate() {
        for k in 0..model.m_prime {
            for r in 0..model.d {
                values[[i, k, r]] = row[k * model.d + r];
            }
        }
    }
    let mut out = UpdateSeries::from_values(values);
    out.area_ids = model.area_ids.clone();
    Ok(out)
}
