//! Autoregressive update-sequence models.
//!
//! Both families read a sequence `z_1..z_m'` of `d`-vectors in normal-score
//! space step by step, encode the past with an LSTM and emit a density for the
//! next vector:
//!
//! - **DGPVAR** unrolls one LSTM per area with shared weights (input: the
//!   previous score of that area plus a learned area embedding) and emits a
//!   Gaussian with covariance `diag(D) + V·Vᵀ` whose entries come from linear
//!   maps of the per-area states.
//! - **RNN-NF** encodes the whole previous vector with a single LSTM and emits
//!   through a conditional normalizing flow.
//!
//! Training minimizes the mean sequence NLL in score space; sampling is
//! ancestral.

mod lowrank;
mod lstm;

pub use lowrank::{lowrank_gaussian_logprob, lowrank_logprob_tape, EmissionDistribution};
pub use lstm::{rnn_step, Lstm, LstmState, LstmVars};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_params, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{MarginalTransform, UpdateSeries};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowLayout, LayerKind};
use crate::stats::stream_rng;
use crate::train::{fit_minibatch, split_point, Ctx, LossHistory, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArKind {
    Dgpvar,
    Rnnnf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// Per-area `φ⁻¹ ∘ F̂` pooled over horizons.
    Empirical,
    /// Train on raw values.
    Identity,
}

/// Map between update values and the space the model is trained in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreTransform {
    PerArea(MarginalTransform),
    Identity,
}

impl ScoreTransform {
    pub fn fit(kind: TransformKind, updates: &UpdateSeries) -> Result<Self> {
        match kind {
            TransformKind::Identity => Ok(Self::Identity),
            TransformKind::Empirical => {
                let cols = (0..updates.d())
                    .map(|r| updates.values.slice(s![.., .., r]).iter().copied().collect())
                    .collect();
                Ok(Self::PerArea(MarginalTransform::fit(cols)?))
            }
        }
    }

    pub fn forward(&self, values: &Array3<f64>) -> Result<Array3<f64>> {
        self.apply(values, MarginalTransform::to_normal_score)
    }

    pub fn inverse(&self, scores: &Array3<f64>) -> Result<Array3<f64>> {
        self.apply(scores, MarginalTransform::from_normal_score)
    }

    fn apply(
        &self,
        values: &Array3<f64>,
        f: fn(&MarginalTransform, usize, f64) -> Result<f64>,
    ) -> Result<Array3<f64>> {
        match self {
            Self::Identity => Ok(values.clone()),
            Self::PerArea(mt) => {
                let mut out = values.clone();
                for ((_, _, r), v) in out.indexed_iter_mut() {
                    *v = f(mt, r, *v)?;
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArConfig {
    /// LSTM state width `D`.
    pub hidden: usize,
    /// Low-rank factor width; `min(d, 5)` when unset.
    pub rank: Option<usize>,
    /// Area-embedding width (DGPVAR).
    pub embedding: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_kind: LayerKind,
    pub transform: TransformKind,
    pub train: TrainConfig,
    /// Retries with halved width and learning rate when training diverges or
    /// never improves on the initial validation loss.
    pub max_reductions: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            rank: None,
            embedding: 4,
            flow_layers: 3,
            flow_hidden: 32,
            flow_kind: LayerKind::MaskedAutoregressive,
            transform: TransformKind::Empirical,
            train: TrainConfig::default(),
            max_reductions: 2,
        }
    }
}

/// Weights of the Gaussian head in plain form. `w_v` is `r × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub w_mu: Vec<f64>,
    pub w_d: Vec<f64>,
    pub w_v: Array2<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Emission from per-area states (`d × D`): `μ_j = w_μ·h_j`,
/// `D_j = softplus(w_d·h_j)`, row `j` of `V` is `W_v h_j`.
pub fn emission_params(head: &GaussianHead, states: &Array2<f64>) -> Result<EmissionDistribution> {
    let width = head.w_mu.len();
    if states.ncols() != width || head.w_d.len() != width || head.w_v.ncols() != width {
        return Err(Error::shape("emission_params", &[states.nrows(), states.ncols()], &[width]));
    }
    let dot = |w: &[f64], h: ndarray::ArrayView1<f64>| w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    let mu = states.rows().into_iter().map(|h| dot(&head.w_mu, h)).collect();
    let diag = states.rows().into_iter().map(|h| softplus(dot(&head.w_d, h))).collect();
    let v = states.dot(&head.w_v.t());
    Ok(EmissionDistribution { mu, diag, v })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Head {
    Gaussian {
        w_mu: ParamId,
        w_d: ParamId,
        /// Stored `D × r`.
        w_v: ParamId,
    },
    Flow(FlowLayout),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub kind: ArKind,
    pub config: ArConfig,
    pub m_prime: usize,
    pub d: usize,
    /// Effective state width after any automatic reduction.
    pub hidden: usize,
    /// Low-rank width (DGPVAR); 0 for RNN-NF.
    pub rank: usize,
    pub params: ParamStore,
    lstm: Lstm,
    embedding: Option<ParamId>,
    start: ParamId,
    head: Head,
    pub transform: ScoreTransform,
    pub area_ids: Vec<String>,
    pub history: LossHistory,
    pub reductions: usize,
}

struct GaussianSteps {
    /// Per step: observed column, mean, diagonal, factor.
    steps: Vec<(Var, Var, Var, Var)>,
}

impl ArModel {
    /// Freshly initialized model with state width `hidden`.
    pub fn new<R: rand::Rng + ?Sized>(
        kind: ArKind,
        m_prime: usize,
        d: usize,
        config: &ArConfig,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if m_prime == 0 || d == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("m', d and hidden width must be positive".into()));
        }
        let mut params = ParamStore::new();
        let scale = 1.0 / (hidden as f64).sqrt();
        let (lstm, embedding, start, head, rank) = match kind {
            ArKind::Dgpvar => {
                let rank = config.rank.unwrap_or(d.min(5));
                if rank == 0 || rank > d {
                    return Err(Error::InvalidConfig(format!("rank {rank} outside 1..={d}")));
                }
                let e = config.embedding;
                let lstm = Lstm::new("lstm", 1 + e, hidden, &mut params, rng);
                let embedding = (e > 0).then(|| params.add("embedding", Tensor::randn(&[d, e], 0.5, rng)));
                let start = params.add("start", Tensor::zeros(&[1, 1]));
                let head = Head::Gaussian {
                    w_mu: params.add("w_mu", Tensor::randn(&[hidden, 1], scale, rng)),
                    w_d: params.add("w_d", Tensor::randn(&[hidden, 1], scale, rng)),
                    w_v: params.add("w_v", Tensor::randn(&[hidden, rank], scale, rng)),
                };
                (lstm, embedding, start, head, rank)
            }
            ArKind::Rnnnf => {
                let lstm = Lstm::new("lstm", d, hidden, &mut params, rng);
                let start = params.add("start", Tensor::zeros(&[1, d]));
                let flow = FlowConfig {
                    dim: d,
                    cond_dim: hidden,
                    layers: config.flow_layers,
                    hidden: config.flow_hidden,
                    kind: config.flow_kind,
                    ..FlowConfig::default()
                };
                let layout = FlowLayout::new(flow, &mut params, rng)?;
                (lstm, None, start, Head::Flow(layout), 0)
            }
        };
        Ok(Self {
            kind,
            config: config.clone(),
            m_prime,
            d,
            hidden,
            rank,
            params,
            lstm,
            embedding,
            start,
            head,
            transform: ScoreTransform::Identity,
            area_ids: (0..d).map(|r| format!("area{r}")).collect(),
            history: LossHistory::default(),
            reductions: 0,
        })
    }

    pub fn gaussian_head(&self) -> Option<GaussianHead> {
        let Head::Gaussian { w_mu, w_d, w_v } = &self.head else {
            return None;
        };
        let wv = self.params.get(*w_v);
        Some(GaussianHead {
            w_mu: self.params.get(*w_mu).data().to_vec(),
            w_d: self.params.get(*w_d).data().to_vec(),
            w_v: Array2::from_shape_vec((self.hidden, self.rank), wv.data().to_vec())
                .expect("head shape")
                .reversed_axes(),
        })
    }

    fn check_batch(&self, batch: &Array3<f64>) -> Result<()> {
        let (b, len, d) = batch.dim();
        if d != self.d || len == 0 || b == 0 {
            return Err(Error::shape("sequence_nll", &[b, len, d], &[b, self.m_prime, self.d]));
        }
        Ok(())
    }

    fn unroll_gaussian(&self, tape: &mut Tape, b: &Bound, batch: &Array3<f64>, ctx: &mut Ctx) -> Result<GaussianSteps> {
        let Head::Gaussian { w_mu, w_d, w_v } = &self.head else {
            return Err(Error::InvalidConfig("not a DGPVAR model".into()));
        };
        let (nb, len, d) = batch.dim();
        let rows = nb * d;
        let emb = self.embedding.map(|e| tape.repeat_rows(b.var(e), nb));
        let mut state = self.lstm.zero_state(tape, rows);
        let mut prev = tape.broadcast_rows(b.var(self.start), rows)?;
        let mut steps = Vec::with_capacity(len);
        for i in 0..len {
            let input = match emb {
                Some(e) => tape.concat_cols(&[prev, e])?,
                None => prev,
            };
            state = self.lstm.step(tape, b, state, input)?;
            let h = ctx.dropout(tape, state.h)?;
            let mu = tape.matmul(h, b.var(*w_mu))?;
            let raw = tape.matmul(h, b.var(*w_d))?;
            let diag = tape.softplus(raw);
            let v = tape.matmul(h, b.var(*w_v))?;
            let col = batch.slice(s![.., i, ..]).iter().copied().collect();
            let x = tape.constant(Tensor::matrix(rows, 1, col)?);
            steps.push((x, mu, diag, v));
            prev = x;
        }
        Ok(GaussianSteps { steps })
    }

    /// Per-sequence NLL `[B, 1]` of a score-space batch `[B, len, d]`.
    fn nll_tape(&self, tape: &mut Tape, b: &Bound, batch: &Array3<f64>, ctx: &mut Ctx) -> Result<Var> {
        self.check_batch(batch)?;
        let (nb, len, d) = batch.dim();
        let mut total: Option<Var> = None;
        let mut push = |tape: &mut Tape, lp: Var| -> Result<()> {
            total = Some(match total {
                Some(t) => tape.add(t, lp)?,
                None => lp,
            });
            Ok(())
        };
        match &self.head {
            Head::Gaussian { .. } => {
                let unrolled = self.unroll_gaussian(tape, b, batch, ctx)?;
                for (x, mu, diag, v) in unrolled.steps {
                    let lp = lowrank_logprob_tape(tape, x, mu, diag, v, d)?;
                    push(tape, lp)?;
                }
            }
            Head::Flow(layout) => {
                let mut state = self.lstm.zero_state(tape, nb);
                let mut prev = tape.broadcast_rows(b.var(self.start), nb)?;
                for i in 0..len {
                    state = self.lstm.step(tape, b, state, prev)?;
                    let h = ctx.dropout(tape, state.h)?;
                    let rows = batch.slice(s![.., i, ..]).iter().copied().collect();
                    let x = tape.constant(Tensor::matrix(nb, d, rows)?);
                    let lp = layout.log_prob_tape(tape, b, x, Some(h), ctx)?;
                    push(tape, lp)?;
                    prev = x;
                }
            }
        }
        let total = total.expect("len > 0");
        Ok(tape.neg(total))
    }

    /// Per-sequence NLL of score-space sequences `[n, len, d]`.
    pub fn score_nll(&self, scores: &Array3<f64>) -> Result<Vec<f64>> {
        self.check_batch(scores)?;
        let mut out = Vec::with_capacity(scores.dim().0);
        let idx: Vec<usize> = (0..scores.dim().0).collect();
        for chunk in idx.chunks(512) {
            let batch = scores.select(Axis(0), chunk);
            let mut tape = Tape::new();
            let b = self.params.bind_frozen(&mut tape);
            let nll = self.nll_tape(&mut tape, &b, &batch, &mut Ctx::eval())?;
            out.extend_from_slice(tape.value(nll).data());
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("sequence_nll"));
        }
        Ok(out)
    }

    /// Score-space NLL of every sequence in `updates`.
    pub fn nll(&self, updates: &UpdateSeries) -> Result<Vec<f64>> {
        self.score_nll(&self.transform.forward(&updates.values)?)
    }

    pub fn sequence_nll(&self, seq: ArrayView2<f64>) -> Result<f64> {
        let batch = seq.to_owned().insert_axis(Axis(0));
        Ok(self.score_nll(&batch)?[0])
    }

    /// Per-step emission distributions of a DGPVAR model along `seq`.
    pub fn emissions(&self, seq: ArrayView2<f64>) -> Result<Vec<EmissionDistribution>> {
        let batch = seq.to_owned().insert_axis(Axis(0));
        self.check_batch(&batch)?;
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let unrolled = self.unroll_gaussian(&mut tape, &b, &batch, &mut Ctx::eval())?;
        Ok(unrolled
            .steps
            .iter()
            .map(|&(_, mu, diag, v)| EmissionDistribution {
                mu: tape.value(mu).data().to_vec(),
                diag: tape.value(diag).data().to_vec(),
                v: Array2::from_shape_vec((self.d, self.rank), tape.value(v).data().to_vec())
                    .expect("factor shape"),
            })
            .collect())
    }

    /// Worst relative error between the analytic gradient of the summed
    /// score-space NLL and central finite differences over all parameters.
    pub fn gradient_check(&self, scores: &Array3<f64>, step: f64) -> f64 {
        grad_check_params(
            |tape, b| {
                let nll = self.nll_tape(tape, b, scores, &mut Ctx::eval())?;
                Ok(tape.sum(nll))
            },
            &self.params,
            step,
            None,
        )
    }

    fn fit_scores(&mut self, scores: &Array3<f64>, cfg: &TrainConfig) -> Result<()> {
        let mut params = std::mem::take(&mut self.params);
        let this = &*self;
        let result = fit_minibatch(&mut params, scores.dim().0, cfg, |tape, b, rows, ctx| {
            let batch = scores.select(Axis(0), rows);
            let nll = this.nll_tape(tape, b, &batch, ctx)?;
            Ok(tape.mean(nll))
        });
        self.params = params;
        self.history = result?;
        Ok(())
    }

    /// `count` sequences in score space. Sample `j` draws from random stream
    /// `j` under `seed`; blocks run in parallel.
    pub fn sample_scores(&self, count: usize, seed: u64) -> Result<Array3<f64>> {
        const BLOCK: usize = 256;
        let starts: Vec<usize> = (0..count).step_by(BLOCK).collect();
        let blocks: Vec<Array3<f64>> = starts
            .into_par_iter()
            .map(|s0| self.sample_block(s0, BLOCK.min(count - s0), seed))
            .collect::<Result<_>>()?;
        let mut out = Array3::zeros((count, self.m_prime, self.d));
        for (s0, block) in (0..count).step_by(BLOCK).zip(blocks) {
            out.slice_mut(s![s0..s0 + block.dim().0, .., ..]).assign(&block);
        }
        Ok(out)
    }

    fn sample_block(&self, first: usize, len: usize, seed: u64) -> Result<Array3<f64>> {
        let mut rngs: Vec<ChaCha8Rng> = (first..first + len).map(|j| stream_rng(seed, j as u64)).collect();
        let (m_prime, d) = (self.m_prime, self.d);
        let mut out = Array3::zeros((len, m_prime, d));
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        match &self.head {
            Head::Gaussian { w_mu, w_d, w_v } => {
                let rows = len * d;
                let r = self.rank;
                let emb = self.embedding.map(|e| tape.repeat_rows(b.var(e), len));
                let mut state = self.lstm.zero_state(&mut tape, rows);
                let mut prev = tape.broadcast_rows(b.var(self.start), rows)?;
                for i in 0..m_prime {
                    let input = match emb {
                        Some(e) => tape.concat_cols(&[prev, e])?,
                        None => prev,
                    };
                    state = self.lstm.step(&mut tape, &b, state, input)?;
                    let mu = tape.matmul(state.h, b.var(*w_mu))?;
                    let raw = tape.matmul(state.h, b.var(*w_d))?;
                    let diag = tape.softplus(raw);
                    let v = tape.matmul(state.h, b.var(*w_v))?;
                    let (mu, diag, v) = (tape.value(mu).data(), tape.value(diag).data(), tape.value(v).data());
                    let mut col = Vec::with_capacity(rows);
                    for (k, rng) in rngs.iter_mut().enumerate() {
                        let eps_d: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                        let eps_r: Vec<f64> = (0..r).map(|_| StandardNormal.sample(rng)).collect();
                        let g = k * d..(k + 1) * d;
                        let z = lowrank::sample_with(
                            &mu[g.clone()],
                            &diag[g],
                            &v[k * d * r..(k + 1) * d * r],
                            r,
                            &eps_d,
                            &eps_r,
                        );
                        for (j, zj) in z.iter().enumerate() {
                            out[[k, i, j]] = *zj;
                        }
                        col.extend(z);
                    }
                    prev = tape.constant(Tensor::matrix(rows, 1, col)?);
                }
            }
            Head::Flow(layout) => {
                let mut state = self.lstm.zero_state(&mut tape, len);
                let mut prev = tape.broadcast_rows(b.var(self.start), len)?;
                for i in 0..m_prime {
                    state = self.lstm.step(&mut tape, &b, state, prev)?;
                    let h = crate::flow::tensor_to_array(tape.value(state.h));
                    let mut eps = Array2::zeros((len, d));
                    for (k, rng) in rngs.iter_mut().enumerate() {
                        for j in 0..d {
                            eps[[k, j]] = StandardNormal.sample(rng);
                        }
                    }
                    let x = layout.inverse_with(&self.params, &eps, Some(&h))?;
                    out.slice_mut(s![.., i, ..]).assign(&x);
                    prev = tape.constant(crate::flow::array_to_tensor(&x));
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("ancestral_sample"));
        }
        Ok(out)
    }
}

pub fn dgpvar_sequence_nll(model: &ArModel, seq: ArrayView2<f64>) -> Result<f64> {
    if model.kind != ArKind::Dgpvar {
        return Err(Error::InvalidConfig("expected a DGPVAR model".into()));
    }
    model.sequence_nll(seq)
}

pub fn rnnnf_sequence_nll(model: &ArModel, seq: ArrayView2<f64>) -> Result<f64> {
    if model.kind != ArKind::Rnnnf {
        return Err(Error::InvalidConfig("expected an RNN-NF model".into()));
    }
    model.sequence_nll(seq)
}

/// Fits the score transform on the training part of `updates`, then trains by
/// mini-batch Adam with early stopping. When training diverges, or never
/// improves on the initial validation loss, the state width and learning rate
/// are halved and training restarts, at most `max_reductions` times.
pub fn train(kind: ArKind, updates: &UpdateSeries, config: &ArConfig) -> Result<ArModel> {
    let n = updates.n_sequences();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let split = split_point(n, config.train.val_fraction);
    let transform = ScoreTransform::fit(config.transform, &updates.select(0..split))?;
    let scores = transform.forward(&updates.values)?;
    let mut hidden = config.hidden;
    let mut lr = config.train.lr;
    let mut last: Option<Result<ArModel>> = None;
    for attempt in 0..=config.max_reductions {
        let mut rng = stream_rng(config.train.seed, attempt as u64);
        let mut model = ArModel::new(kind, updates.m_prime(), updates.d(), config, hidden, &mut rng)?;
        model.transform = transform.clone();
        model.area_ids = updates.area_ids.clone();
        model.reductions = attempt;
        let cfg = TrainConfig {
            lr,
            ..config.train.clone()
        };
        match model.fit_scores(&scores, &cfg) {
            Ok(()) => {
                let idle = cfg.lr == 0.0 || cfg.max_epochs == 0;
                if idle || model.history.best_epoch > 0 {
                    return Ok(model);
                }
                last = Some(Ok(model));
            }
            Err(e @ Error::DivergedLoss { .. }) => last = Some(Err(e)),
            Err(e) => return Err(e),
        }
        hidden = (hidden / 2).max(2);
        lr *= 0.5;
    }
    last.expect("at least one attempt")
}

/// Ancestral sampling followed by the inverse score transform.
pub fn ancestral_sample(model: &ArModel, count: usize, seed: u64) -> Result<UpdateSeries> {
    let scores = model.sample_scores(count, seed)?;
    let mut out = UpdateSeries::from_values(model.transform.inverse(&scores)?);
    out.area_ids = model.area_ids.clone();
    Ok(out)
}
