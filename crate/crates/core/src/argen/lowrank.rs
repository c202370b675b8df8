//! Gaussian log-density with covariance `diag(D) + V·Vᵀ`, evaluated through
//! the matrix-determinant lemma and the Woodbury identity in `O(d·r²)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-step emission: mean, positive diagonal and `d × r` factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionDistribution {
    pub mu: Vec<f64>,
    pub diag: Vec<f64>,
    pub v: Array2<f64>,
}

impl EmissionDistribution {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    pub fn covariance(&self) -> Array2<f64> {
        let mut s = self.v.dot(&self.v.t());
        for (j, dj) in self.diag.iter().enumerate() {
            s[[j, j]] += dj;
        }
        s
    }

    /// `μ + √D ⊙ ε_d + V·ε_r`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let eps_d: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let eps_r: Vec<f64> = (0..self.rank()).map(|_| rng.sample(StandardNormal)).collect();
        sample_with(&self.mu, &self.diag, self.v.as_slice().expect("standard layout"), self.rank(), &eps_d, &eps_r)
    }
}

pub(crate) fn sample_with(mu: &[f64], diag: &[f64], v: &[f64], r: usize, eps_d: &[f64], eps_r: &[f64]) -> Vec<f64> {
    (0..mu.len())
        .map(|j| {
            let low: f64 = (0..r).map(|k| v[j * r + k] * eps_r[k]).sum();
            mu[j] + diag[j].sqrt() * eps_d[j] + low
        })
        .collect()
}

/// Quantities shared by the log-density and its gradient.
#[derive(Debug, Clone)]
pub(crate) struct Woodbury {
    pub logprob: f64,
    /// `Σ⁻¹ (x − μ)`.
    pub alpha: Vec<f64>,
    /// Diagonal of `Σ⁻¹`.
    pub inv_diag: Vec<f64>,
    /// `Σ⁻¹ V`, row-major `d × r`.
    pub inv_v: Vec<f64>,
}

pub(crate) fn woodbury(x: &[f64], mu: &[f64], diag: &[f64], v: &[f64], r: usize) -> Result<Woodbury> {
    let d = x.len();
    if let Some(&bad) = diag.iter().find(|&&dj| !(dj > 0.0 && dj.is_finite())) {
        return Err(Error::NonPositiveDiagonal(bad));
    }
    let y: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let a: Vec<f64> = y.iter().zip(diag).map(|(yj, dj)| yj / dj).collect();
    // C = I + Vᵀ D⁻¹ V
    let cap = DMatrix::from_fn(r, r, |p, q| {
        let s: f64 = (0..d).map(|j| v[j * r + p] * v[j * r + q] / diag[j]).sum();
        s + f64::from(u8::from(p == q))
    });
    let chol = cap.cholesky().ok_or(Error::NonPositiveDiagonal(f64::NAN))?;
    let log_det_c: f64 = 2.0 * (0..r).map(|k| chol.l()[(k, k)].ln()).sum::<f64>();
    let c_inv = chol.inverse();
    let w: Vec<f64> = (0..r).map(|p| (0..d).map(|j| v[j * r + p] * a[j]).sum()).collect();
    let u: Vec<f64> = (0..r).map(|p| (0..r).map(|q| c_inv[(p, q)] * w[q]).sum()).collect();
    let mut alpha = vec![0.0; d];
    let mut inv_diag = vec![0.0; d];
    let mut inv_v = vec![0.0; d * r];
    for j in 0..d {
        let vu: f64 = (0..r).map(|p| v[j * r + p] * u[p]).sum();
        alpha[j] = a[j] - vu / diag[j];
        let mut quad = 0.0;
        for q in 0..r {
            let vc: f64 = (0..r).map(|p| v[j * r + p] * c_inv[(p, q)]).sum();
            inv_v[j * r + q] = vc / diag[j];
            quad += vc * v[j * r + q];
        }
        inv_diag[j] = 1.0 / diag[j] - quad / (diag[j] * diag[j]);
    }
    let maha: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let log_det = log_det_c + diag.iter().map(|dj| dj.ln()).sum::<f64>();
    let logprob = -0.5 * (maha + log_det + d as f64 * (2.0 * PI).ln());
    Ok(Woodbury {
        logprob,
        alpha,
        inv_diag,
        inv_v,
    })
}

/// `log N(x; μ, diag(D) + V·Vᵀ)`.
pub fn lowrank_gaussian_logprob(x: &[f64], dist: &EmissionDistribution) -> Result<f64> {
    let d = dist.dim();
    if x.len() != d || dist.diag.len() != d || dist.v.nrows() != d {
        return Err(Error::shape("lowrank_gaussian_logprob", &[x.len()], &[d]));
    }
    let v = dist.v.as_standard_layout();
    Ok(woodbury(x, &dist.mu, &dist.diag, v.as_slice().expect("contiguous"), dist.rank())?.logprob)
}

/// Batched version on a tape. Inputs hold `groups · d` rows: `x`, `mu` and
/// `diag` are `[groups·d, 1]`, `v` is `[groups·d, r]`; row `b·d + j` is
/// coordinate `j` of group `b`. Output is `[groups, 1]`.
pub fn lowrank_logprob_tape(tape: &mut Tape, x: Var, mu: Var, diag: Var, v: Var, d: usize) -> Result<Var> {
    let (xv, mv, dv, vv) = (tape.value(x), tape.value(mu), tape.value(diag), tape.value(v));
    let rows = xv.rows();
    if d == 0 || rows % d != 0 {
        return Err(Error::shape("lowrank_logprob", xv.shape(), &[rows, d]));
    }
    for t in [mv, dv] {
        if t.shape() != xv.shape() {
            return Err(Error::shape("lowrank_logprob", xv.shape(), t.shape()));
        }
    }
    if vv.rows() != rows {
        return Err(Error::shape("lowrank_logprob", xv.shape(), vv.shape()));
    }
    let r = vv.cols();
    let groups = rows / d;
    let cache: Vec<Woodbury> = (0..groups)
        .map(|g| {
            let s = g * d..(g + 1) * d;
            woodbury(
                &xv.data()[s.clone()],
                &mv.data()[s.clone()],
                &dv.data()[s],
                &vv.data()[g * d * r..(g + 1) * d * r],
                r,
            )
        })
        .collect::<Result<_>>()?;
    let out = Tensor::matrix(groups, 1, cache.iter().map(|w| w.logprob).collect())?;
    let op = LowRankLogProb { d, r, cache };
    Ok(tape.custom(Box::new(op), &[x, mu, diag, v], out))
}

struct LowRankLogProb {
    d: usize,
    r: usize,
    cache: Vec<Woodbury>,
}

impl CustomOp for LowRankLogProb {
    fn name(&self) -> &'static str {
        "lowrank_logprob"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (d, r) = (self.d, self.r);
        let rows = inputs[0].rows();
        let v = inputs[3].data();
        let mut gx = vec![0.0; rows];
        let mut gmu = vec![0.0; rows];
        let mut gdiag = vec![0.0; rows];
        let mut gv = vec![0.0; rows * r];
        for (g, w) in self.cache.iter().enumerate() {
            let go = grad_out.data()[g];
            let base = g * d;
            // αᵀV
            let av: Vec<f64> = (0..r)
                .map(|p| (0..d).map(|j| w.alpha[j] * v[(base + j) * r + p]).sum())
                .collect();
            for j in 0..d {
                let row = base + j;
                gx[row] = -go * w.alpha[j];
                gmu[row] = go * w.alpha[j];
                gdiag[row] = go * 0.5 * (w.alpha[j] * w.alpha[j] - w.inv_diag[j]);
                for p in 0..r {
                    gv[row * r + p] = go * (w.alpha[j] * av[p] - w.inv_v[j * r + p]);
                }
            }
        }
        let col = |data| Tensor::matrix(rows, 1, data).expect("grad shape");
        vec![
            col(gx),
            col(gmu),
            col(gdiag),
            Tensor::matrix(rows, r, gv).expect("grad shape"),
        ]
    }
}
