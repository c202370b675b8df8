//! Mini-batch Adam loop with chronological validation split and early
//! stopping, shared by the flow and autoregressive models.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::stats::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Trailing fraction of the (chronologically ordered) data held out.
    pub val_fraction: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            patience: 20,
            val_fraction: 0.1,
            dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Per-forward-pass context: dropout is active only when an RNG is present.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
    pub dropout: f64,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            rng: None,
            dropout: 0.0,
        }
    }

    pub fn train(rng: ChaCha8Rng, dropout: f64) -> Self {
        Self {
            rng: Some(rng),
            dropout,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    /// Inverted dropout on `x`; identity outside training.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = tape.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Split point of `n` rows for a trailing validation fraction; at least one
/// row on each side when `n >= 2`.
pub fn split_point(n: usize, val_fraction: f64) -> usize {
    if n < 2 || val_fraction <= 0.0 {
        return n;
    }
    let val = ((n as f64) * val_fraction).round().max(1.0) as usize;
    n - val.min(n - 1)
}

/// Trains `params` on rows `0..n_rows` where `loss(tape, params, rows, ctx)`
/// returns the mean loss over `rows`. The best parameters by validation loss
/// are restored at the end.
pub fn fit_minibatch<F>(
    params: &mut ParamStore,
    n_rows: usize,
    cfg: &TrainConfig,
    loss: F,
) -> Result<LossHistory>
where
    F: Fn(&mut Tape, &Bound, &[usize], &mut Ctx) -> Result<Var>,
{
    if n_rows == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let split = split_point(n_rows, cfg.val_fraction);
    let train_rows: Vec<usize> = (0..split).collect();
    let val_rows: Vec<usize> = if split < n_rows {
        (split..n_rows).collect()
    } else {
        train_rows.clone()
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(params.tensors());
    let mut history = LossHistory {
        best_val: f64::INFINITY,
        ..LossHistory::default()
    };
    let evaluate = |p: &ParamStore, rows: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for chunk in rows.chunks(512) {
            let mut tape = Tape::new();
            let bound = p.bind_frozen(&mut tape);
            let l = loss(&mut tape, &bound, chunk, &mut Ctx::eval())?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / rows.len() as f64)
    };
    let initial = evaluate(params, &val_rows)?;
    if !initial.is_finite() {
        return Err(Error::DivergedLoss {
            epoch: 0,
            loss: initial,
        });
    }
    history.best_val = initial;
    let mut best = params.clone();
    let mut since_best = 0;
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.max_epochs {
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        let mut order = train_rows.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for rows in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut ctx = Ctx::train(stream_rng(rng.gen(), 0), cfg.dropout);
            let l = loss(&mut tape, &bound, rows, &mut ctx)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(Error::DivergedLoss { epoch, loss: value });
            }
            tape.backward(l)?;
            let grads = bound.grads(&tape);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss {
                    epoch,
                    loss: f64::NAN,
                });
            }
            adam_step(params.tensors_mut(), &grads, &mut state, &adam)?;
            epoch_loss += value * rows.len() as f64;
        }
        history.train.push(epoch_loss / train_rows.len() as f64);
        let val = evaluate(params, &val_rows)?;
        if !val.is_finite() {
            return Err(Error::DivergedLoss { epoch, loss: val });
        }
        history.val.push(val);
        if val < history.best_val {
            history.best_val = val;
            history.best_epoch = epoch + 1;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    *params = best;
    Ok(history)
}
