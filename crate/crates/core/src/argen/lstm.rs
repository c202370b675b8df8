//! Single-layer LSTM cell on the autodiff tape.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{array_to_tensor, tensor_to_array};

/// Gate layout in the packed weights: input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

/// Plain-value recurrent state, one row per unrolled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

impl LstmState {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Self {
            h: Array2::zeros((rows, hidden)),
            c: Array2::zeros((rows, hidden)),
        }
    }
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let w_x = store.add(
            format!("{name}.w_x"),
            Tensor::randn(&[input, 4 * hidden], 1.0 / (input.max(1) as f64).sqrt(), rng),
        );
        let w_h = store.add(
            format!("{name}.w_h"),
            Tensor::randn(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt(), rng),
        );
        // forget-gate bias of one keeps early gradients alive
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), bias);
        Self {
            input,
            hidden,
            w_x,
            w_h,
            b,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmVars {
        LstmVars {
            h: tape.constant(Tensor::zeros(&[rows, self.hidden])),
            c: tape.constant(Tensor::zeros(&[rows, self.hidden])),
        }
    }

    pub fn step(&self, tape: &mut Tape, b: &Bound, state: LstmVars, x: Var) -> Result<LstmVars> {
        let hd = self.hidden;
        let gx = tape.matmul(x, b.var(self.w_x))?;
        let gh = tape.matmul(state.h, b.var(self.w_h))?;
        let pre = tape.add(gx, gh)?;
        let rows = tape.value(pre).rows();
        let bias = tape.broadcast_rows(b.var(self.b), rows)?;
        let gates = tape.add(pre, bias)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, hd, 2 * hd)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * hd, 3 * hd)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * hd, 4 * hd)?;
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmVars { h, c })
    }
}

/// One recurrent step on plain values.
pub fn rnn_step(lstm: &Lstm, params: &ParamStore, state: &LstmState, input: &Array2<f64>) -> Result<LstmState> {
    let rows = input.nrows();
    if input.ncols() != lstm.input || state.h.dim() != (rows, lstm.hidden) || state.c.dim() != (rows, lstm.hidden) {
        return Err(Error::shape(
            "rnn_step",
            &[rows, input.ncols()],
            &[state.h.nrows(), lstm.input],
        ));
    }
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let vars = LstmVars {
        h: tape.constant(array_to_tensor(&state.h)),
        c: tape.constant(array_to_tensor(&state.c)),
    };
    let x = tape.constant(array_to_tensor(input));
    let next = lstm.step(&mut tape, &b, vars, x)?;
    let out = LstmState {
        h: tensor_to_array(tape.value(next.h)),
        c: tensor_to_array(tape.value(next.c)),
    };
    if out.h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("rnn_step"));
    }
    Ok(out)
}
