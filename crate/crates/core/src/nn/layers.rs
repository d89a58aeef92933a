//! Dense, GRU, and affine-coupling blocks recorded on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};
use crate::error::{Error, Result};

/// Bound on coupling log-scales before exponentiation.
pub const SCALE_CLAMP: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), (input, output), rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), (1, output))?;
        Ok(Self { weight, bias, input, output, activation })
    }

    /// A layer whose weights start at zero (used for flow output heads).
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        let weight = store.add_zeros(format!("{name}.weight"), (input, output))?;
        let bias = store.add_zeros(format!("{name}.bias"), (1, output))?;
        Ok(Self { weight, bias, input, output, activation })
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let xw = tape.matmul(x, p[self.weight.index()]);
        let y = tape.add_row(xw, p[self.bias.index()]);
        match self.activation {
            Activation::Identity => y,
            Activation::Tanh => tape.tanh(y),
        }
    }
}

/// Applies a single dense layer to one input vector.
pub fn dense_forward(store: &ParamStore, layer: &Dense, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != layer.input {
        return Err(Error::Shape(format!(
            "dense layer expects width {}, got {}",
            layer.input,
            input.len()
        )));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(row(input));
    let y = layer.forward(&mut tape, &p, x);
    Ok(tape.value(y).row(0).to_vec())
}

pub(crate) fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Gated recurrent unit with update convention `h' = (1 - z) h + z h~`.
///
/// Gate weights are packed: `w = [W_z | W_r | W_h]`, `u_zr = [U_z | U_r]`,
/// `b = [b_z | b_r | b_h]`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // Each gate block keeps its own fan-in bound.
        let w = store.add_uniform(format!("{name}.w"), (input, 3 * hidden), rng)?;
        let u_zr = store.add_uniform(format!("{name}.u_zr"), (hidden, 2 * hidden), rng)?;
        let u_h = store.add_uniform(format!("{name}.u_h"), (hidden, hidden), rng)?;
        let b = store.add_zeros(format!("{name}.b"), (1, 3 * hidden))?;
        Ok(Self { w, u_zr, u_h, b, input, hidden })
    }

    pub fn step(&self, tape: &mut Tape, p: &[Var], h: Var, x: Var) -> Var {
        let hd = self.hidden;
        let xw = tape.matmul(x, p[self.w.index()]);
        let xw = tape.add_row(xw, p[self.b.index()]);
        let hu = tape.matmul(h, p[self.u_zr.index()]);
        let xw_zr = tape.slice(xw, 0, 2 * hd);
        let pre_zr = tape.add(xw_zr, hu);
        let zr = tape.sigmoid(pre_zr);
        let z = tape.slice(zr, 0, hd);
        let r = tape.slice(zr, hd, 2 * hd);
        let rh = tape.mul(r, h);
        let rh_u = tape.matmul(rh, p[self.u_h.index()]);
        let xw_h = tape.slice(xw, 2 * hd, 3 * hd);
        let pre_h = tape.add(xw_h, rh_u);
        let candidate = tape.tanh(pre_h);
        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h);
        let fresh = tape.mul(z, candidate);
        tape.add(kept, fresh)
    }
}

/// One GRU update on plain vectors.
pub fn gru_step(store: &ParamStore, cell: &Gru, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if h_prev.len() != cell.hidden || x.len() != cell.input {
        return Err(Error::Shape(format!(
            "GRU expects state {} and input {}, got {} and {}",
            cell.hidden,
            cell.input,
            h_prev.len(),
            x.len()
        )));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let h = tape.constant(row(h_prev));
    let xv = tape.constant(row(x));
    let out = cell.step(&mut tape, &p, h, xv);
    Ok(tape.value(out).row(0).to_vec())
}

/// RealNVP-style affine coupling on a `dim`-wide vector.
///
/// Columns `pass` are copied through; columns `trans` become
/// `u * exp(s) + t` with `(s, t)` computed from the pass-through columns and
/// the conditioning input. With `dim == 1` the pass-through part is empty
/// and the scale and shift depend on the conditioning alone.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub dim: usize,
    pub cond_dim: usize,
    /// Whether the pass-through block is the leading block of columns.
    pub pass_first: bool,
    pub split: usize,
    pub hidden: Dense,
    pub head: Dense,
}

impl AffineCoupling {
    /// `parity` selects which half is transformed; alternate it across a stack.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cond_dim: usize,
        hidden: usize,
        parity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("coupling dimension must be positive".into()));
        }
        let n_pass = dim / 2;
        if n_pass + cond_dim == 0 {
            return Err(Error::InvalidArgument(
                "a 1-D coupling needs a conditioning input".into(),
            ));
        }
        let pass_first = parity % 2 == 0;
        let split = if pass_first { n_pass } else { dim - n_pass };
        let n_trans = dim - n_pass;
        let hidden_layer =
            Dense::new(store, &format!("{name}.hidden"), n_pass + cond_dim, hidden, Activation::Tanh, rng)?;
        let head = Dense::zeros(store, &format!("{name}.head"), hidden, 2 * n_trans, Activation::Identity)?;
        Ok(Self { dim, cond_dim, pass_first, split, hidden: hidden_layer, head })
    }

    pub fn n_pass(&self) -> usize {
        self.dim / 2
    }

    pub fn n_trans(&self) -> usize {
        self.dim - self.n_pass()
    }

    fn parts(&self, tape: &mut Tape, x: Var) -> (Option<Var>, Var) {
        let (pass, trans) = if self.pass_first {
            ((0, self.split), (self.split, self.dim))
        } else {
            ((self.split, self.dim), (0, self.split))
        };
        let a = (pass.1 > pass.0).then(|| tape.slice(x, pass.0, pass.1));
        let b = tape.slice(x, trans.0, trans.1);
        (a, b)
    }

    fn scale_shift(&self, tape: &mut Tape, p: &[Var], a: Option<Var>, cond: Option<Var>) -> (Var, Var) {
        let input = match (a, cond) {
            (Some(a), Some(c)) => tape.concat(&[a, c]),
            (Some(a), None) => a,
            (None, Some(c)) => c,
            (None, None) => unreachable!("checked at construction"),
        };
        let h = self.hidden.forward(tape, p, input);
        let raw = self.head.forward(tape, p, h);
        let nb = self.n_trans();
        let s_raw = tape.slice(raw, 0, nb);
        let s = tape.clamp(s_raw, -SCALE_CLAMP, SCALE_CLAMP);
        let t = tape.slice(raw, nb, 2 * nb);
        (s, t)
    }

    fn join(&self, tape: &mut Tape, a: Option<Var>, b: Var) -> Var {
        match a {
            None => b,
            Some(a) if self.pass_first => tape.concat(&[a, b]),
            Some(a) => tape.concat(&[b, a]),
        }
    }

    /// `u -> v`, returning `(v, log|det J|)` with the log-determinant as `[rows, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], u: Var, cond: Option<Var>) -> (Var, Var) {
        let (a, b) = self.parts(tape, u);
        let (s, t) = self.scale_shift(tape, p, a, cond);
        let es = tape.exp(s);
        let scaled = tape.mul(b, es);
        let vb = tape.add(scaled, t);
        let v = self.join(tape, a, vb);
        let log_det = tape.row_sum(s);
        (v, log_det)
    }

    /// `v -> u`, the exact inverse of [`AffineCoupling::forward`].
    pub fn inverse(&self, tape: &mut Tape, p: &[Var], v: Var, cond: Option<Var>) -> (Var, Var) {
        let (a, b) = self.parts(tape, v);
        let (s, t) = self.scale_shift(tape, p, a, cond);
        let neg_s = tape.scale(s, -1.0);
        let es = tape.exp(neg_s);
        let shifted = tape.sub(b, t);
        let ub = tape.mul(shifted, es);
        let u = self.join(tape, a, ub);
        let log_det = tape.row_sum(neg_s);
        (u, log_det)
    }
}

fn coupling_apply(
    store: &ParamStore,
    layer: &AffineCoupling,
    x: &[f64],
    cond: &[f64],
    inverse: bool,
) -> Result<(Vec<f64>, f64)> {
    if x.len() != layer.dim || cond.len() != layer.cond_dim {
        return Err(Error::Shape(format!(
            "coupling expects ({}, {}), got ({}, {})",
            layer.dim,
            layer.cond_dim,
            x.len(),
            cond.len()
        )));
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(row(x));
    let c = (!cond.is_empty()).then(|| tape.constant(row(cond)));
    let (y, ld) = if inverse {
        layer.inverse(&mut tape, &p, xv, c)
    } else {
        layer.forward(&mut tape, &p, xv, c)
    };
    Ok((tape.value(y).row(0).to_vec(), tape.scalar(ld)))
}

pub fn coupling_forward(
    store: &ParamStore,
    layer: &AffineCoupling,
    u: &[f64],
    cond: &[f64],
) -> Result<(Vec<f64>, f64)> {
    coupling_apply(store, layer, u, cond, false)
}

pub fn coupling_inverse(
    store: &ParamStore,
    layer: &AffineCoupling,
    v: &[f64],
    cond: &[f64],
) -> Result<(Vec<f64>, f64)> {
    coupling_apply(store, layer, v, cond, true)
}
