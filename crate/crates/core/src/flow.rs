//! Normalizing flows: stacks of affine-coupling (RealNVP) or
//! masked-autoregressive (MAF) layers, optionally conditioned on an external
//! vector.
//!
//! The flow maps data `x` to latent `z`; each layer is
//! `z = x ⊙ exp(s) + t`, with `s` and `t` produced by a small tanh network,
//! so the log-determinant is the sum of `s` over transformed coordinates.
//! Scales pass through `cap ⊙ tanh(·)` with a learnable `cap`. Consecutive
//! layers are separated by a reversal of the coordinates. The final linear
//! layer of every network starts at zero, so a fresh stack is the identity.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::train::{fit_minibatch, Ctx, LossHistory, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    AffineCoupling,
    MaskedAutoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub dim: usize,
    /// Width of the conditioning vector; 0 for an unconditional flow.
    pub cond_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub kind: LayerKind,
    /// Initial value of the learnable scale bound.
    pub scale_cap: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            cond_dim: 0,
            layers: 5,
            hidden: 32,
            kind: LayerKind::AffineCoupling,
            scale_cap: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Masks {
    input: Tensor,
    hidden: Tensor,
    output: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    kind: LayerKind,
    /// Coordinates fed to the network (coupling: the first half).
    in_dim: usize,
    /// Coordinates transformed (coupling: the second half; MAF: all).
    out_dim: usize,
    w1: ParamId,
    b1: ParamId,
    wc: Option<ParamId>,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
    cap: ParamId,
    masks: Option<Masks>,
}

/// Hidden-unit degrees for MADE masks. Degree-0 units see only the
/// conditioner.
fn hidden_degrees(dim: usize, hidden: usize) -> Vec<usize> {
    (0..hidden).map(|k| k % dim).collect()
}

fn made_masks(dim: usize, hidden: usize) -> Masks {
    let deg = hidden_degrees(dim, hidden);
    // input i (degree i+1) feeds hidden unit k when i + 1 <= deg[k]
    let input = (0..dim)
        .flat_map(|i| deg.iter().map(move |&dk| f64::from(u8::from(i < dk))))
        .collect();
    let hidden_mask = (0..hidden)
        .flat_map(|a| {
            let da = deg[a];
            deg.iter().map(move |&db| f64::from(u8::from(db >= da)))
        })
        .collect();
    // outputs s_j and t_j (degree j+1) read hidden units with deg <= j
    let output = deg
        .iter()
        .flat_map(|&dk| {
            (0..2 * dim).map(move |c| f64::from(u8::from(dk <= c % dim)))
        })
        .collect();
    Masks {
        input: Tensor::matrix(dim, hidden, input).expect("mask"),
        hidden: Tensor::matrix(hidden, hidden, hidden_mask).expect("mask"),
        output: Tensor::matrix(hidden, 2 * dim, output).expect("mask"),
    }
}

/// Layer structure and parameter ids of a flow whose parameters live in a
/// caller-owned [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowLayout {
    pub config: FlowConfig,
    layers: Vec<Layer>,
}

impl FlowLayout {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.dim == 0 || config.hidden == 0 {
            return Err(Error::InvalidConfig("flow needs dim >= 1 and hidden >= 1".into()));
        }
        let (d, hdim) = (config.dim, config.hidden);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let (in_dim, out_dim, masks) = match config.kind {
                LayerKind::AffineCoupling => (d / 2, d - d / 2, None),
                LayerKind::MaskedAutoregressive => (d, d, Some(made_masks(d, hdim))),
            };
            let fan1 = (in_dim + config.cond_dim).max(1) as f64;
            let w1 = store.add(
                format!("flow{l}.w1"),
                Tensor::randn(&[in_dim, hdim], 1.0 / fan1.sqrt(), rng),
            );
            let b1 = store.add(format!("flow{l}.b1"), Tensor::zeros(&[1, hdim]));
            let wc = (config.cond_dim > 0).then(|| {
                store.add(
                    format!("flow{l}.wc"),
                    Tensor::randn(&[config.cond_dim, hdim], 1.0 / fan1.sqrt(), rng),
                )
            });
            let w2 = store.add(
                format!("flow{l}.w2"),
                Tensor::randn(&[hdim, hdim], 1.0 / (hdim as f64).sqrt(), rng),
            );
            let b2 = store.add(format!("flow{l}.b2"), Tensor::zeros(&[1, hdim]));
            let w3 = store.add(format!("flow{l}.w3"), Tensor::zeros(&[hdim, 2 * out_dim]));
            let b3 = store.add(format!("flow{l}.b3"), Tensor::zeros(&[1, 2 * out_dim]));
            let cap = store.add(
                format!("flow{l}.cap"),
                Tensor::full(&[1, out_dim], config.scale_cap),
            );
            layers.push(Layer {
                kind: config.kind,
                in_dim,
                out_dim,
                w1,
                b1,
                wc,
                w2,
                b2,
                w3,
                b3,
                cap,
                masks,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn is_conditional(&self) -> bool {
        self.config.cond_dim > 0
    }

    fn check_cond(&self, has_cond: bool) -> Result<()> {
        if has_cond != self.is_conditional() {
            return Err(Error::ConditionerMissing);
        }
        Ok(())
    }

    fn reversal(&self) -> Vec<usize> {
        (0..self.dim()).rev().collect()
    }

    /// Scale and shift for one layer: `([B, out], [B, out])`.
    fn net(
        &self,
        layer: &Layer,
        tape: &mut Tape,
        b: &Bound,
        x_in: Var,
        cond: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<(Var, Var)> {
        let masked = |tape: &mut Tape, w: ParamId, m: Option<&Tensor>| -> Result<Var> {
            match m {
                Some(mask) => {
                    let mv = tape.constant(mask.clone());
                    tape.mul(b.var(w), mv)
                }
                None => Ok(b.var(w)),
            }
        };
        let ms = layer.masks.as_ref();
        let w1 = masked(tape, layer.w1, ms.map(|m| &m.input))?;
        let w2 = masked(tape, layer.w2, ms.map(|m| &m.hidden))?;
        let w3 = masked(tape, layer.w3, ms.map(|m| &m.output))?;
        let mut a1 = tape.affine(x_in, w1, b.var(layer.b1))?;
        if let (Some(wc), Some(h)) = (layer.wc, cond) {
            let hc = tape.matmul(h, b.var(wc))?;
            a1 = tape.add(a1, hc)?;
        }
        let h1 = tape.tanh(a1);
        let h1 = ctx.dropout(tape, h1)?;
        let a2 = tape.affine(h1, w2, b.var(layer.b2))?;
        let h2 = tape.tanh(a2);
        let h2 = ctx.dropout(tape, h2)?;
        let out = tape.affine(h2, w3, b.var(layer.b3))?;
        let raw_s = tape.slice_cols(out, 0, layer.out_dim)?;
        let t = tape.slice_cols(out, layer.out_dim, 2 * layer.out_dim)?;
        let bounded = tape.tanh(raw_s);
        let rows = tape.value(bounded).rows();
        let cap = tape.broadcast_rows(b.var(layer.cap), rows)?;
        let s = tape.mul(bounded, cap)?;
        Ok((s, t))
    }

    /// `x [B, dim] -> (z [B, dim], logdet [B, 1])` on a tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        cond: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<(Var, Var)> {
        self.check_cond(cond.is_some())?;
        let rev = self.reversal();
        let mut cur = x;
        let mut logdet: Option<Var> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let (z, s) = match layer.kind {
                LayerKind::AffineCoupling => {
                    let xa = tape.slice_cols(cur, 0, layer.in_dim)?;
                    let xb = tape.slice_cols(cur, layer.in_dim, self.dim())?;
                    let (s, t) = self.net(layer, tape, b, xa, cond, ctx)?;
                    let es = tape.exp(s);
                    let scaled = tape.mul(xb, es)?;
                    let zb = tape.add(scaled, t)?;
                    (tape.concat_cols(&[xa, zb])?, s)
                }
                LayerKind::MaskedAutoregressive => {
                    let (s, t) = self.net(layer, tape, b, cur, cond, ctx)?;
                    let es = tape.exp(s);
                    let scaled = tape.mul(cur, es)?;
                    (tape.add(scaled, t)?, s)
                }
            };
            let ld = tape.sum_cols(s);
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
            cur = if l + 1 < self.layers.len() {
                tape.gather_cols(z, &rev)?
            } else {
                z
            };
        }
        let logdet = match logdet {
            Some(ld) => ld,
            None => {
                let rows = tape.value(x).rows();
                tape.constant(Tensor::zeros(&[rows, 1]))
            }
        };
        Ok((cur, logdet))
    }

    /// Per-row `log N(f(x); 0, I) + log|det ∂f/∂x|`, `[B, 1]`.
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        cond: Option<Var>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (z, logdet) = self.forward_tape(tape, b, x, cond, ctx)?;
        let sq = tape.square(z);
        let ss = tape.sum_cols(sq);
        let half = tape.scale(ss, -0.5);
        let base = tape.add_scalar(half, -0.5 * self.dim() as f64 * (2.0 * PI).ln());
        tape.add(base, logdet)
    }

    fn eval_net(
        &self,
        layer: &Layer,
        tape: &mut Tape,
        b: &Bound,
        x_in: Tensor,
        cond: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let xv = tape.constant(x_in);
        let hv = cond.map(|h| tape.constant(h.clone()));
        let (s, t) = self.net(layer, tape, b, xv, hv, &mut Ctx::eval())?;
        Ok((tape.value(s).clone(), tape.value(t).clone()))
    }

    /// Batched inverse `z -> x`.
    pub fn inverse_with(&self, params: &ParamStore, z: &Array2<f64>, cond: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        self.check_cond(cond.is_some())?;
        let (rows, d) = z.dim();
        if d != self.dim() {
            return Err(Error::shape("flow_inverse", &[rows, d], &[rows, self.dim()]));
        }
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let cond_t = cond.map(array_to_tensor);
        let mut cur = z.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() {
                cur = reverse_cols(&cur);
            }
            match layer.kind {
                LayerKind::AffineCoupling => {
                    let xa = cur.slice(ndarray::s![.., 0..layer.in_dim]).to_owned();
                    let (s, t) = self.eval_net(layer, &mut tape, &b, array_to_tensor(&xa), cond_t.as_ref())?;
                    for r in 0..rows {
                        for j in 0..layer.out_dim {
                            let c = layer.in_dim + j;
                            cur[[r, c]] = (cur[[r, c]] - t.get(r, j)) * (-s.get(r, j)).exp();
                        }
                    }
                }
                LayerKind::MaskedAutoregressive => {
                    let zl = cur.clone();
                    let mut x = Array2::zeros((rows, d));
                    for j in 0..d {
                        let (s, t) = self.eval_net(layer, &mut tape, &b, array_to_tensor(&x), cond_t.as_ref())?;
                        for r in 0..rows {
                            x[[r, j]] = (zl[[r, j]] - t.get(r, j)) * (-s.get(r, j)).exp();
                        }
                    }
                    cur = x;
                }
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("flow_inverse"));
        }
        Ok(cur)
    }

    /// Batched forward `x -> (z, logdet)`.
    pub fn forward_with(
        &self,
        params: &ParamStore,
        x: &Array2<f64>,
        cond: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let xv = tape.constant(array_to_tensor(x));
        let hv = cond.map(|h| tape.constant(array_to_tensor(h)));
        let (z, ld) = self.forward_tape(&mut tape, &b, xv, hv, &mut Ctx::eval())?;
        let z = tensor_to_array(tape.value(z));
        let ld = tape.value(ld).data().to_vec();
        if z.iter().chain(&ld).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("flow_forward"));
        }
        Ok((z, ld))
    }

    pub fn log_prob_with(
        &self,
        params: &ParamStore,
        x: &Array2<f64>,
        cond: Option<&Array2<f64>>,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = params.bind_frozen(&mut tape);
        let xv = tape.constant(array_to_tensor(x));
        let hv = cond.map(|h| tape.constant(array_to_tensor(h)));
        let lp = self.log_prob_tape(&mut tape, &b, xv, hv, &mut Ctx::eval())?;
        let out = tape.value(lp).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("flow_logprob"));
        }
        Ok(out)
    }
}

pub(crate) fn array_to_tensor(a: &Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    Tensor::matrix(r, c, a.iter().copied().collect()).expect("array shape")
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_vec((t.rows(), t.cols()), t.data().to_vec()).expect("tensor shape")
}

fn reverse_cols(a: &Array2<f64>) -> Array2<f64> {
    a.slice(ndarray::s![.., ..;-1]).to_owned()
}

/// A flow together with its own parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub layout: FlowLayout,
    pub params: ParamStore,
}

impl FlowStack {
    pub fn new<R: Rng + ?Sized>(config: FlowConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = FlowLayout::new(config, &mut params, rng)?;
        Ok(Self { layout, params })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn forward(&self, x: &Array2<f64>, cond: Option<&Array2<f64>>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.layout.forward_with(&self.params, x, cond)
    }

    pub fn inverse(&self, z: &Array2<f64>, cond: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        self.layout.inverse_with(&self.params, z, cond)
    }

    pub fn log_prob(&self, x: &Array2<f64>, cond: Option<&Array2<f64>>) -> Result<Vec<f64>> {
        self.layout.log_prob_with(&self.params, x, cond)
    }
}

fn single_row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

/// `z = f(x, h)` and `log|det ∂f/∂x|` for one vector.
pub fn flow_forward(stack: &FlowStack, x: &[f64], cond: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
    let h = cond.map(single_row);
    let (z, ld) = stack.forward(&single_row(x), h.as_ref())?;
    Ok((z.row(0).to_vec(), ld[0]))
}

pub fn flow_inverse(stack: &FlowStack, z: &[f64], cond: Option<&[f64]>) -> Result<Vec<f64>> {
    let h = cond.map(single_row);
    Ok(stack.inverse(&single_row(z), h.as_ref())?.row(0).to_vec())
}

pub fn flow_logprob(stack: &FlowStack, x: &[f64], cond: Option<&[f64]>) -> Result<f64> {
    let h = cond.map(single_row);
    Ok(stack.log_prob(&single_row(x), h.as_ref())?[0])
}

/// Maximum-likelihood training on the rows of `data` (optionally paired with
/// conditioner rows). The trailing `val_fraction` of rows is the validation
/// set.
pub fn flow_fit(
    stack: &mut FlowStack,
    data: &Array2<f64>,
    cond: Option<&Array2<f64>>,
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    stack.layout.check_cond(cond.is_some())?;
    if data.ncols() != stack.dim() {
        return Err(Error::shape("flow_fit", &[data.nrows(), data.ncols()], &[stack.dim()]));
    }
    let layout = stack.layout.clone();
    let gather = |a: &Array2<f64>, rows: &[usize]| -> Tensor {
        let c = a.ncols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend(a.row(r).iter().copied());
        }
        Tensor::matrix(rows.len(), c, out).expect("rows")
    };
    fit_minibatch(&mut stack.params, data.nrows(), cfg, |tape, b, rows, ctx| {
        let x = tape.constant(gather(data, rows));
        let h = cond.map(|c| tape.constant(gather(c, rows)));
        let lp = layout.log_prob_tape(tape, b, x, h, ctx)?;
        let mean = tape.mean(lp);
        Ok(tape.neg(mean))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn perturbed(cfg: FlowConfig, seed: u64, scale: f64) -> FlowStack {
        let mut r = rng(seed);
        let mut s = FlowStack::new(cfg, &mut r).unwrap();
        for t in s.params.tensors_mut() {
            for v in t.data_mut() {
                *v += scale * r.sample::<f64, _>(StandardNormal);
            }
        }
        s
    }

    fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
    }

    fn cfg(dim: usize, cond_dim: usize, layers: usize, kind: LayerKind) -> FlowConfig {
        FlowConfig {
            dim,
            cond_dim,
            layers,
            hidden: 8,
            kind,
            scale_cap: 2.0,
        }
    }

    const KINDS: [LayerKind; 2] = [LayerKind::AffineCoupling, LayerKind::MaskedAutoregressive];

    #[test]
    fn fresh_stack_is_identity() {
        for kind in KINDS {
            let s = FlowStack::new(cfg(3, 0, 3, kind), &mut rng(1)).unwrap();
            let x = [0.3, -1.2, 2.0];
            let (z, ld) = flow_forward(&s, &x, None).unwrap();
            assert_eq!(ld, 0.0);
            // reversal applied an even number of times
            assert_eq!(z, x.to_vec());
            assert_eq!(flow_inverse(&s, &x, None).unwrap(), x.to_vec());
        }
    }

    #[test]
    fn constant_scale_coupling_logdet() {
        let mut s = FlowStack::new(cfg(2, 0, 1, LayerKind::AffineCoupling), &mut rng(2)).unwrap();
        // b3 = [raw_s, t]; cap = 2 so s = 2·tanh(raw_s)
        let layer = s.layout.layers[0].clone();
        s.params.get_mut(layer.b3).data_mut()[0] = 0.4;
        let expected = 2.0 * 0.4f64.tanh();
        let (z, ld) = flow_forward(&s, &[1.0, 1.5], None).unwrap();
        assert!((ld - expected).abs() < 1e-15);
        assert_eq!(z[0], 1.0);
        assert!((z[1] - 1.5 * expected.exp()).abs() < 1e-14);
    }

    fn numerical_logdet(s: &FlowStack, x: &[f64], h: Option<&[f64]>) -> f64 {
        let d = x.len();
        let step = 1e-5;
        let jac = DMatrix::from_fn(d, d, |i, j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let zp = flow_forward(s, &xp, h).unwrap().0;
            let zm = flow_forward(s, &xm, h).unwrap().0;
            (zp[i] - zm[i]) / (2.0 * step)
        });
        jac.determinant().abs().ln()
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for kind in KINDS {
            for cond_dim in [0, 3] {
                let s = perturbed(cfg(4, cond_dim, 3, kind), 3, 0.3);
                let x = randn(1, 4, 4).row(0).to_vec();
                let h = (cond_dim > 0).then(|| randn(1, cond_dim, 5).row(0).to_vec());
                let (_, ld) = flow_forward(&s, &x, h.as_deref()).unwrap();
                let num = numerical_logdet(&s, &x, h.as_deref());
                assert!((ld - num).abs() < 1e-5, "{kind:?} {cond_dim}: {ld} vs {num}");
            }
        }
    }

    #[test]
    fn round_trip_both_directions() {
        for kind in KINDS {
            for cond_dim in [0, 2] {
                let s = perturbed(cfg(6, cond_dim, 2, kind), 7, 0.3);
                let z = randn(100, 6, 8);
                let h = (cond_dim > 0).then(|| randn(100, cond_dim, 9));
                let x = s.inverse(&z, h.as_ref()).unwrap();
                let (z2, _) = s.forward(&x, h.as_ref()).unwrap();
                let err = (&z2 - &z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err < 1e-8, "{kind:?}: {err}");
                let (zz, _) = s.forward(&z, h.as_ref()).unwrap();
                let back = s.inverse(&zz, h.as_ref()).unwrap();
                let err = (&back - &z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err < 1e-8, "{kind:?}: {err}");
            }
        }
    }

    #[test]
    fn conditional_round_trip_for_fixed_conditioners() {
        let s = perturbed(cfg(3, 4, 3, LayerKind::MaskedAutoregressive), 10, 0.4);
        for i in 0..10 {
            let h = randn(1, 4, 100 + i).row(0).to_vec();
            let z = randn(1, 3, 200 + i).row(0).to_vec();
            let x = flow_inverse(&s, &z, Some(&h)).unwrap();
            let (z2, _) = flow_forward(&s, &x, Some(&h)).unwrap();
            for (a, b) in z.iter().zip(&z2) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn conditioner_presence_is_checked() {
        let s = FlowStack::new(cfg(2, 3, 1, LayerKind::AffineCoupling), &mut rng(1)).unwrap();
        assert!(matches!(flow_forward(&s, &[0.0, 0.0], None), Err(Error::ConditionerMissing)));
        let u = FlowStack::new(cfg(2, 0, 1, LayerKind::AffineCoupling), &mut rng(1)).unwrap();
        assert!(matches!(
            flow_forward(&u, &[0.0, 0.0], Some(&[1.0, 2.0, 3.0])),
            Err(Error::ConditionerMissing)
        ));
    }

    #[test]
    fn masked_layer_is_autoregressive() {
        let s = perturbed(cfg(5, 2, 1, LayerKind::MaskedAutoregressive), 12, 0.5);
        let h = [0.3, -0.2];
        let x = randn(1, 5, 13).row(0).to_vec();
        let base = flow_forward(&s, &x, Some(&h)).unwrap().0;
        let layer = &s.layout.layers[0];
        let params_at = |xv: &[f64]| {
            let mut tape = Tape::new();
            let b = s.params.bind_frozen(&mut tape);
            s.layout
                .eval_net(layer, &mut tape, &b, Tensor::row(xv), Some(&Tensor::row(&h)))
                .unwrap()
        };
        let (s0, t0) = params_at(&x);
        for j in 0..5 {
            let mut xp = x.clone();
            xp[j] += 0.7;
            let z = flow_forward(&s, &xp, Some(&h)).unwrap().0;
            for i in 0..j {
                assert_eq!(z[i], base[i], "z_{i} moved when x_{j} changed");
            }
            let (s1, t1) = params_at(&xp);
            for i in 0..=j {
                assert_eq!(s1.data()[i], s0.data()[i]);
                assert_eq!(t1.data()[i], t0.data()[i]);
            }
        }
    }

    #[test]
    fn identity_logprob_closed_form() {
        let s = FlowStack::new(cfg(3, 0, 2, LayerKind::AffineCoupling), &mut rng(1)).unwrap();
        let c = -1.5 * (2.0 * PI).ln();
        assert!((flow_logprob(&s, &[0.0; 3], None).unwrap() - c).abs() < 1e-14);
        let x = [1.0, -2.0, 0.5];
        let expected = c - 0.5 * (1.0 + 4.0 + 0.25);
        assert!((flow_logprob(&s, &x, None).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        for kind in KINDS {
            let s = perturbed(cfg(1, 0, 3, kind), 21, 0.5);
            let (lo, hi, n) = (-30.0, 30.0, 60_000);
            let h = (hi - lo) / n as f64;
            let grid = Array2::from_shape_fn((n + 1, 1), |(i, _)| lo + i as f64 * h);
            let lp = s.log_prob(&grid, None).unwrap();
            // trapezoid rule
            let total: f64 = lp
                .windows(2)
                .map(|w| 0.5 * h * (w[0].exp() + w[1].exp()))
                .sum();
            assert!((total - 1.0).abs() < 1e-3, "{kind:?}: {total}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in KINDS {
            let s = perturbed(cfg(3, 2, 2, kind), 31, 0.3);
            let x = array_to_tensor(&randn(4, 3, 32));
            let h = array_to_tensor(&randn(4, 2, 33));
            let layout = s.layout.clone();
            let err = grad_check_params(
                |tape, b| {
                    let xv = tape.constant(x.clone());
                    let hv = tape.constant(h.clone());
                    let lp = layout.log_prob_tape(tape, b, xv, Some(hv), &mut Ctx::eval())?;
                    Ok(tape.sum(lp))
                },
                &s.params,
                1e-5,
                None,
            );
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }

    fn train_cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            batch_size: 128,
            lr,
            patience: 20,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_shifted_gaussian() {
        let data = randn(3000, 1, 40).mapv(|v| v + 3.0);
        let held = randn(2000, 1, 41).mapv(|v| v + 3.0);
        for kind in KINDS {
            let mut s = FlowStack::new(cfg(1, 0, 2, kind), &mut rng(42)).unwrap();
            flow_fit(&mut s, &data, None, &train_cfg(0.02, 150)).unwrap();
            let lp = s.log_prob(&held, None).unwrap();
            let avg = lp.iter().sum::<f64>() / lp.len() as f64;
            let truth = -0.5 * (2.0 * PI).ln() - 0.5;
            assert!((avg - truth).abs() < 0.1, "{kind:?}: {avg} vs {truth}");
        }
    }

    #[test]
    fn standard_normal_data_keeps_entropy() {
        let data = randn(20_000, 3, 50);
        let mut s = FlowStack::new(cfg(3, 0, 2, LayerKind::AffineCoupling), &mut rng(51)).unwrap();
        let h = flow_fit(&mut s, &data, None, &train_cfg(1e-3, 10)).unwrap();
        let entropy = 1.5 * ((2.0 * PI).ln() + 1.0);
        assert!(((h.best_val - entropy) / entropy).abs() < 0.02, "{}", h.best_val);
        // the identity start must not be made worse on held-out rows
        assert!(h.best_val <= h.val.iter().cloned().fold(f64::INFINITY, f64::min) + 1e-12);
    }

    #[test]
    fn learns_correlation() {
        let z = randn(3000, 2, 60);
        let rho: f64 = 0.9;
        let data = Array2::from_shape_fn((3000, 2), |(i, j)| {
            if j == 0 {
                z[[i, 0]]
            } else {
                rho * z[[i, 0]] + (1.0 - rho * rho).sqrt() * z[[i, 1]]
            }
        });
        let independent = (2.0 * PI).ln() + 1.0;
        for kind in KINDS {
            let mut s = FlowStack::new(cfg(2, 0, 3, kind), &mut rng(61)).unwrap();
            let h = flow_fit(&mut s, &data, None, &train_cfg(0.01, 60)).unwrap();
            assert!(h.best_val < independent - 0.3, "{kind:?}: {}", h.best_val);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = randn(200, 2, 70);
        let mut s = perturbed(cfg(2, 0, 2, LayerKind::MaskedAutoregressive), 71, 0.2);
        let before = s.params.clone();
        flow_fit(&mut s, &data, None, &train_cfg(0.0, 3)).unwrap();
        assert_eq!(s.params, before);
    }
}
