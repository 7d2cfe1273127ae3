//! Bidirectional LSTM returning the concatenated final hidden states.
//!
//! Each direction has its own `W` (`4H x C`), `U` (`4H x H`) and `b` (`4H`),
//! with gate rows ordered input, forget, cell candidate, output.

use num_traits::Float;

use super::layers::{axpy, dot, Seq};
use super::NetError;

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Borrowed parameters of one direction.
#[derive(Clone, Copy)]
pub struct LstmParams<'a, T> {
    pub w: &'a [T],
    pub u: &'a [T],
    pub b: &'a [T],
}

pub struct LstmGrads<'a, T> {
    pub w: &'a mut [T],
    pub u: &'a mut [T],
    pub b: &'a mut [T],
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmTrace<T> {
    /// Input row index of each processing step.
    order: Vec<usize>,
    /// `[i, f, g, o]` blocks per step, each `H` long.
    gates: Vec<T>,
    /// Cell state after each step.
    cells: Vec<T>,
    /// Hidden state after each step.
    hidden: Vec<T>,
}

impl<T: Float> LstmTrace<T> {
    pub fn final_hidden(&self, h: usize) -> &[T] {
        &self.hidden[self.hidden.len() - h..]
    }
}

fn check<T>(input: &Seq<T>, p: &LstmParams<'_, T>, h: usize) -> Result<(), NetError> {
    let c = input.channels;
    if input.len == 0 {
        return Err(NetError::ShapeMismatch("lstm: empty sequence".into()));
    }
    if p.w.len() != 4 * h * c || p.u.len() != 4 * h * h || p.b.len() != 4 * h {
        return Err(NetError::ShapeMismatch(format!(
            "lstm: parameter sizes ({}, {}, {}) do not match H={h}, C={c}",
            p.w.len(),
            p.u.len(),
            p.b.len()
        )));
    }
    Ok(())
}

/// Runs one direction over the rows in `order`.
pub fn lstm_forward<T: Float>(
    input: &Seq<T>,
    p: LstmParams<'_, T>,
    hidden: usize,
    order: Vec<usize>,
) -> Result<LstmTrace<T>, NetError> {
    check(input, &p, hidden)?;
    let h = hidden;
    let steps = order.len();
    let mut gates = Vec::with_capacity(steps * 4 * h);
    let mut cells = Vec::with_capacity(steps * h);
    let mut hs = Vec::with_capacity(steps * h);
    let zeros = vec![T::zero(); h];
    let mut pre = vec![T::zero(); 4 * h];
    for (s, &t) in order.iter().enumerate() {
        let x = input.row(t);
        let (h_prev, c_prev) = if s == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&hs[(s - 1) * h..s * h], &cells[(s - 1) * h..s * h])
        };
        for (r, v) in pre.iter_mut().enumerate() {
            *v = p.b[r] + dot(&p.w[r * x.len()..(r + 1) * x.len()], x) + dot(&p.u[r * h..(r + 1) * h], h_prev);
        }
        let mut c_new = Vec::with_capacity(h);
        let mut h_new = Vec::with_capacity(h);
        let base = gates.len();
        gates.extend(pre[..h].iter().map(|&a| sigmoid(a)));
        gates.extend(pre[h..2 * h].iter().map(|&a| sigmoid(a)));
        gates.extend(pre[2 * h..3 * h].iter().map(|&a| a.tanh()));
        gates.extend(pre[3 * h..].iter().map(|&a| sigmoid(a)));
        let g = &gates[base..base + 4 * h];
        for j in 0..h {
            let c = g[h + j] * c_prev[j] + g[j] * g[2 * h + j];
            c_new.push(c);
            h_new.push(g[3 * h + j] * c.tanh());
        }
        cells.extend(c_new);
        hs.extend(h_new);
    }
    Ok(LstmTrace {
        order,
        gates,
        cells,
        hidden: hs,
    })
}

/// Backpropagates a gradient on the final hidden state through one
/// direction. Parameter gradients are accumulated; input gradients are added
/// into `grad_input`.
pub fn lstm_backward<T: Float>(
    input: &Seq<T>,
    p: LstmParams<'_, T>,
    hidden: usize,
    trace: &LstmTrace<T>,
    grad_final: &[T],
    grads: LstmGrads<'_, T>,
    grad_input: &mut Seq<T>,
) {
    let h = hidden;
    let c_in = input.channels;
    let mut dh = grad_final.to_vec();
    let mut dc = vec![T::zero(); h];
    let mut da = vec![T::zero(); 4 * h];
    let zeros = vec![T::zero(); h];
    for s in (0..trace.order.len()).rev() {
        let t = trace.order[s];
        let x = input.row(t);
        let g = &trace.gates[s * 4 * h..(s + 1) * 4 * h];
        let c = &trace.cells[s * h..(s + 1) * h];
        let (h_prev, c_prev) = if s == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&trace.hidden[(s - 1) * h..s * h], &trace.cells[(s - 1) * h..s * h])
        };
        for j in 0..h {
            let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = c[j].tanh();
            let d_o = dh[j] * tc;
            let dcj = dc[j] + dh[j] * o * (T::one() - tc * tc);
            da[j] = dcj * cand * i * (T::one() - i);
            da[h + j] = dcj * c_prev[j] * f * (T::one() - f);
            da[2 * h + j] = dcj * i * (T::one() - cand * cand);
            da[3 * h + j] = d_o * o * (T::one() - o);
            dc[j] = dcj * f;
        }
        let gx = &mut grad_input.data[t * c_in..(t + 1) * c_in];
        let mut dh_prev = vec![T::zero(); h];
        for (r, &a) in da.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            grads.b[r] = grads.b[r] + a;
            axpy(a, x, &mut grads.w[r * c_in..(r + 1) * c_in]);
            axpy(a, h_prev, &mut grads.u[r * h..(r + 1) * h]);
            axpy(a, &p.w[r * c_in..(r + 1) * c_in], gx);
            axpy(a, &p.u[r * h..(r + 1) * h], &mut dh_prev);
        }
        dh = dh_prev;
    }
}

/// Forward and backward traces of a bidirectional pass.
#[derive(Debug, Clone)]
pub struct BiLstmTrace<T> {
    pub forward: LstmTrace<T>,
    pub backward: LstmTrace<T>,
}

/// Returns `[h_forward_final, h_backward_final]` (length `2H`).
pub fn bilstm_forward<T: Float>(
    input: &Seq<T>,
    fwd: LstmParams<'_, T>,
    bwd: LstmParams<'_, T>,
    hidden: usize,
) -> Result<(Vec<T>, BiLstmTrace<T>), NetError> {
    let f = lstm_forward(input, fwd, hidden, (0..input.len).collect())?;
    let b = lstm_forward(input, bwd, hidden, (0..input.len).rev().collect())?;
    let mut out = f.final_hidden(hidden).to_vec();
    out.extend_from_slice(b.final_hidden(hidden));
    Ok((
        out,
        BiLstmTrace {
            forward: f,
            backward: b,
        },
    ))
}
