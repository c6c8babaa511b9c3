//! Recurrent cells and regularization built from tape primitives.

use rand::Rng;

use crate::error::{invalid, DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Train mode enables stochastic layers; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// LSTM weights bound to a tape. Gate column blocks are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `[in, 4H]`
    pub w_ih: Var,
    /// `[H, 4H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

/// GRU weights bound to a tape. Gate column blocks are ordered reset,
/// update, candidate.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    /// `[in, 3H]`
    pub w_ih: Var,
    /// `[H, 3H]`
    pub w_hh: Var,
    /// `[3H]`
    pub b_ih: Var,
    /// `[3H]`
    pub b_hh: Var,
}

fn hidden_size(tape: &Tape, w_hh: Var, gates: usize) -> Result<usize> {
    match tape.shape(w_hh) {
        [h, g] if *g == gates * *h => Ok(*h),
        s => Err(invalid(
            "recurrent cell",
            format!("hidden weight shape {s:?} is not [H, {gates}H]"),
        )),
    }
}

fn check_state(tape: &Tape, x: Var, h: Var, hidden: usize, w_ih: Var) -> Result<()> {
    let (xs, hs, ws) = (tape.shape(x), tape.shape(h), tape.shape(w_ih));
    let ok = xs.len() == 2
        && hs.len() == 2
        && xs[0] == hs[0]
        && hs[1] == hidden
        && ws.len() == 2
        && ws[0] == xs[1];
    if ok {
        Ok(())
    } else {
        Err(DiffError::ShapeMismatch {
            op: "recurrent cell",
            left: xs.to_vec(),
            right: hs.to_vec(),
        })
    }
}

/// One LSTM step on a batch: `x_t` is `[B, in]`, states are `[B, H]`.
pub fn lstm_cell(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    p: &LstmVars,
) -> Result<(Var, Var)> {
    let hidden = hidden_size(tape, p.w_hh, 4)?;
    check_state(tape, x_t, h_prev, hidden, p.w_ih)?;
    if tape.shape(c_prev) != tape.shape(h_prev) {
        return Err(DiffError::ShapeMismatch {
            op: "lstm_cell",
            left: tape.shape(h_prev).to_vec(),
            right: tape.shape(c_prev).to_vec(),
        });
    }
    let xi = tape.matmul(x_t, p.w_ih)?;
    let hh = tape.matmul(h_prev, p.w_hh)?;
    let z = tape.add(xi, hh)?;
    let z = tape.add_row(z, p.bias)?;
    let i = tape.slice_last(z, 0, hidden)?;
    let f = tape.slice_last(z, hidden, hidden)?;
    let g = tape.slice_last(z, 2 * hidden, hidden)?;
    let o = tape.slice_last(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One GRU step on a batch: `h_t = (1 - z) * n + z * h_prev`.
pub fn gru_cell(tape: &mut Tape, x_t: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let hidden = hidden_size(tape, p.w_hh, 3)?;
    check_state(tape, x_t, h_prev, hidden, p.w_ih)?;
    let xi = tape.matmul(x_t, p.w_ih)?;
    let xi = tape.add_row(xi, p.b_ih)?;
    let hh = tape.matmul(h_prev, p.w_hh)?;
    let hh = tape.add_row(hh, p.b_hh)?;
    let xr = tape.slice_last(xi, 0, hidden)?;
    let xz = tape.slice_last(xi, hidden, hidden)?;
    let xn = tape.slice_last(xi, 2 * hidden, hidden)?;
    let hr = tape.slice_last(hh, 0, hidden)?;
    let hz = tape.slice_last(hh, hidden, hidden)?;
    let hn = tape.slice_last(hh, 2 * hidden, hidden)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let gated = tape.mul(r, hn)?;
    let n = tape.add(xn, gated)?;
    let n = tape.tanh(n)?;
    // h = n + z * (h_prev - n)
    let diff = tape.sub(h_prev, n)?;
    let carry = tape.mul(z, diff)?;
    tape.add(n, carry)
}

/// Inverted dropout: in train mode zeroes each value with probability
/// `rate` and rescales survivors by `1 / (1 - rate)`; identity in eval mode.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
