//! Differentiable building blocks: a reverse-mode tape, dense/GRU/coupling
//! layers, Gaussian densities, Adam, and gradient checking.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::{AdamConfig, OptimizerState};
pub use layers::{
    coupling_forward, coupling_inverse, dense_forward, gru_step, Activation, AffineCoupling, Dense, Gru,
    SCALE_CLAMP,
};
pub use params::{GradStore, ParamId, ParamStore};
pub use tape::{sigmoid, Mat, Tape, Var};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density per row, as `[rows, 1]`.
pub fn gaussian_log_density_rows(tape: &mut Tape, x: Var, mean: Var, log_var: Var) -> Var {
    let diff = tape.sub(x, mean);
    let sq = tape.square(diff);
    let neg_lv = tape.scale(log_var, -1.0);
    let prec = tape.exp(neg_lv);
    let maha = tape.mul(sq, prec);
    let inner = tape.add(log_var, maha);
    let inner = tape.offset(inner, LN_2PI);
    let rows = tape.row_sum(inner);
    tape.scale(rows, -0.5)
}

/// Standard-normal log-density per row, as `[rows, 1]`.
pub fn standard_normal_log_density_rows(tape: &mut Tape, x: Var) -> Var {
    let width = tape.value(x).ncols() as f64;
    let sq = tape.square(x);
    let rows = tape.row_sum(sq);
    let scaled = tape.scale(rows, -0.5);
    tape.offset(scaled, -0.5 * LN_2PI * width)
}

/// `sum_i -0.5 (ln 2 pi + log_var_i + (x_i - mean_i)^2 exp(-log_var_i))`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_var: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != log_var.len() {
        return Err(Error::Shape("gaussian_log_density arguments differ in length".into()));
    }
    Ok(x.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((&x, &m), &lv)| -0.5 * (LN_2PI + lv + (x - m) * (x - m) * (-lv).exp()))
        .sum())
}

/// Loss and exact gradient of a scalar loss built on a fresh tape.
///
/// `loss` receives the bound parameters (indexed by [`ParamId`]) and must
/// return a `[1, 1]` node.
pub fn gradient<F>(store: &ParamStore, loss: F) -> Result<(f64, GradStore)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let root = loss(&mut tape, &bound)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    let mut adj = tape.backward(root);
    Ok((value, GradStore::from_adjoints(store, &bound, &mut adj)))
}

/// Evaluates a tape-built loss without differentiating it.
pub fn evaluate<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let root = loss(&mut tape, &bound)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    Ok(value)
}

/// Central finite differences `(L(p + h) - L(p - h)) / 2h`, one scalar at a time.
pub fn finite_diff_gradient<F>(store: &ParamStore, loss: F, h: f64) -> Result<GradStore>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = store.clone();
    let mut out = GradStore::zeros_like(store);
    for k in 0..store.len() {
        let id = ParamId(k);
        for j in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().expect("standard layout")[j];
            work.get_mut(id).as_slice_mut().expect("standard layout")[j] = orig + h;
            let up = evaluate(&work, &loss)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[j] = orig - h;
            let down = evaluate(&work, &loss)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[j] = orig;
            out.values[k].as_slice_mut().expect("standard layout")[j] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `max |a - b| / max(|a|, |b|, floor)` over all entries.
pub fn max_relative_error(a: &GradStore, b: &GradStore, floor: f64) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
