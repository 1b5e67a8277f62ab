//! LSTM and GRU cells: single-step forward, full-sequence forward with a
//! cache, and backpropagation through time over that cache.
//!
//! Gate blocks are stacked row-wise in `w`, `u` and `b`:
//!
//! * LSTM: input `i`, forget `f`, cell candidate `g`, output `o`
//! * GRU: update `z`, reset `r`, candidate `n`
//!
//! LSTM step:
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
//! g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```
//!
//! GRU step:
//!
//! ```text
//! z = σ(W_z x + U_z h + b_z)    r = σ(W_r x + U_r h + b_r)
//! n = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 - z) ⊙ h + z ⊙ n
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = NeuralError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(NeuralError::Argument(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Which end of the sequence a recurrent pass starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    /// `(gates * hidden) x input`
    pub w: Matrix,
    /// `(gates * hidden) x hidden`
    pub u: Matrix,
    /// `gates * hidden`
    pub b: Vec<f64>,
}

pub type LstmCellParams = CellParams;
pub type GruCellParams = CellParams;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_size: usize, hidden_size: usize) -> Self {
        let rows = kind.gates() * hidden_size;
        Self {
            kind,
            input_size,
            hidden_size,
            w: Matrix::zeros(rows, input_size),
            u: Matrix::zeros(rows, hidden_size),
            b: vec![0.0; rows],
        }
    }

    /// Uniform weights in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, zero biases,
    /// LSTM forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(
        kind: CellKind,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Self {
        let rows = kind.gates() * hidden_size;
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let w = Matrix::uniform(rows, input_size, bound, rng);
        let u = Matrix::uniform(rows, hidden_size, bound, rng);
        let mut b = vec![0.0; rows];
        if kind == CellKind::Lstm {
            b[hidden_size..2 * hidden_size].fill(1.0);
        }
        Self {
            kind,
            input_size,
            hidden_size,
            w,
            u,
            b,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.data.len() + self.u.data.len() + self.b.len()
    }

    fn check_step(&self, x: &[f64], h: &[f64]) -> Result<()> {
        if x.len() != self.input_size {
            return Err(NeuralError::Dimension(format!(
                "input has {} entries, cell expects {}",
                x.len(),
                self.input_size
            )));
        }
        if h.len() != self.hidden_size {
            return Err(NeuralError::Dimension(format!(
                "hidden state has {} entries, cell expects {}",
                h.len(),
                self.hidden_size
            )));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: CellKind) -> Result<()> {
        if self.kind != kind {
            return Err(NeuralError::Argument(format!(
                "expected a {kind} cell, got {}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// One LSTM step. Returns `(h', c')`.
pub fn lstm_cell_forward(
    params: &CellParams,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.expect_kind(CellKind::Lstm)?;
    params.check_step(x, h)?;
    if c.len() != params.hidden_size {
        return Err(NeuralError::Dimension(format!(
            "memory state has {} entries, cell expects {}",
            c.len(),
            params.hidden_size
        )));
    }
    let n = params.hidden_size;
    let mut acts = vec![0.0; 4 * n];
    let mut h_next = vec![0.0; n];
    let mut c_next = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    lstm_step(params, x, h, c, &mut acts, &mut c_next, &mut tanh_c, &mut h_next);
    Ok((h_next, c_next))
}

/// One GRU step. Returns `h'`.
pub fn gru_cell_forward(params: &CellParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    params.expect_kind(CellKind::Gru)?;
    params.check_step(x, h)?;
    let n = params.hidden_size;
    let mut acts = vec![0.0; 3 * n];
    let mut rh = vec![0.0; n];
    let mut h_next = vec![0.0; n];
    gru_step(params, x, h, &mut acts, &mut rh, &mut h_next);
    Ok(h_next)
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn lstm_step(
    p: &CellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    acts: &mut [f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let n = p.hidden_size;
    acts.copy_from_slice(&p.b);
    p.w.matvec_add(x, acts);
    p.u.matvec_add(h_prev, acts);
    for j in 0..n {
        let i = sigmoid(acts[j]);
        let f = sigmoid(acts[n + j]);
        let g = acts[2 * n + j].tanh();
        let o = sigmoid(acts[3 * n + j]);
        acts[j] = i;
        acts[n + j] = f;
        acts[2 * n + j] = g;
        acts[3 * n + j] = o;
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
}

#[inline]
fn gru_step(
    p: &CellParams,
    x: &[f64],
    h_prev: &[f64],
    acts: &mut [f64],
    rh: &mut [f64],
    h: &mut [f64],
) {
    let n = p.hidden_size;
    acts.copy_from_slice(&p.b);
    p.w.matvec_add(x, acts);
    p.u.matvec_rows_add(0..2 * n, h_prev, &mut acts[..2 * n]);
    for j in 0..n {
        let z = sigmoid(acts[j]);
        let r = sigmoid(acts[n + j]);
        acts[j] = z;
        acts[n + j] = r;
        rh[j] = r * h_prev[j];
    }
    p.u.matvec_rows_add(2 * n..3 * n, rh, &mut acts[2 * n..]);
    for j in 0..n {
        let cand = acts[2 * n + j].tanh();
        acts[2 * n + j] = cand;
        let z = acts[j];
        h[j] = (1.0 - z) * h_prev[j] + z * cand;
    }
}

/// Activations recorded while running a cell over a sequence.
///
/// Everything is indexed by processing step `s`, not by input time; for a
/// backward pass step `s` consumed input `T - 1 - s`.
#[derive(Debug, Clone)]
pub(crate) struct SeqCache {
    pub steps: usize,
    pub direction: Direction,
    /// `(steps + 1) * hidden`; slot 0 is the zero initial state.
    pub hs: Vec<f64>,
    /// LSTM only, same layout as `hs`.
    pub cs: Vec<f64>,
    /// LSTM only, `steps * hidden`.
    pub tanh_c: Vec<f64>,
    /// `steps * gates * hidden` post-activation gate values.
    pub acts: Vec<f64>,
    /// GRU only, `steps * hidden` values of `r ⊙ h_prev`.
    pub rh: Vec<f64>,
}

impl SeqCache {
    /// Hidden output produced at processing step `s`.
    #[inline]
    pub fn h_at_step(&self, s: usize, hidden: usize) -> &[f64] {
        &self.hs[(s + 1) * hidden..(s + 2) * hidden]
    }

    /// Hidden output aligned with input time `t`.
    #[inline]
    pub fn h_at_time(&self, t: usize, hidden: usize) -> &[f64] {
        self.h_at_step(self.step_of(t), hidden)
    }

    #[inline]
    pub fn step_of(&self, t: usize) -> usize {
        match self.direction {
            Direction::Forward => t,
            Direction::Backward => self.steps - 1 - t,
        }
    }
}

/// Runs a cell over a flat `steps x input_size` sequence from zero state.
pub(crate) fn run_sequence(p: &CellParams, xs: &[f64], direction: Direction) -> SeqCache {
    let d = p.input_size;
    let n = p.hidden_size;
    let g = p.kind.gates() * n;
    let steps = xs.len() / d;
    let mut cache = SeqCache {
        steps,
        direction,
        hs: vec![0.0; (steps + 1) * n],
        cs: Vec::new(),
        tanh_c: Vec::new(),
        acts: vec![0.0; steps * g],
        rh: Vec::new(),
    };
    match p.kind {
        CellKind::Lstm => {
            cache.cs = vec![0.0; (steps + 1) * n];
            cache.tanh_c = vec![0.0; steps * n];
        }
        CellKind::Gru => cache.rh = vec![0.0; steps * n],
    }
    for s in 0..steps {
        let t = cache.step_of(s);
        let x = &xs[t * d..(t + 1) * d];
        let (h_done, h_rest) = cache.hs.split_at_mut((s + 1) * n);
        let h_prev = &h_done[s * n..];
        let h = &mut h_rest[..n];
        let acts = &mut cache.acts[s * g..(s + 1) * g];
        match p.kind {
            CellKind::Lstm => {
                let (c_done, c_rest) = cache.cs.split_at_mut((s + 1) * n);
                lstm_step(
                    p,
                    x,
                    h_prev,
                    &c_done[s * n..],
                    acts,
                    &mut c_rest[..n],
                    &mut cache.tanh_c[s * n..(s + 1) * n],
                    h,
                );
            }
            CellKind::Gru => {
                gru_step(p, x, h_prev, acts, &mut cache.rh[s * n..(s + 1) * n], h);
            }
        }
    }
    cache
}

/// Backpropagation through time for one cached sequence.
///
/// `dh_steps[s]` is the loss gradient w.r.t. the hidden output of step `s`
/// coming from above. Parameter gradients accumulate into `grads`, input
/// gradients accumulate into `dxs` (indexed by input time).
pub(crate) fn backprop_sequence(
    p: &CellParams,
    xs: &[f64],
    cache: &SeqCache,
    dh_steps: &[f64],
    grads: &mut CellParams,
    dxs: &mut [f64],
) {
    let d = p.input_size;
    let n = p.hidden_size;
    let g = p.kind.gates() * n;
    let mut dh = vec![0.0; n];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut da = vec![0.0; g];
    let mut d_rh = vec![0.0; n];

    for s in (0..cache.steps).rev() {
        let t = cache.step_of(s);
        let x = &xs[t * d..(t + 1) * d];
        let h_prev = &cache.hs[s * n..(s + 1) * n];
        let acts = &cache.acts[s * g..(s + 1) * g];
        for j in 0..n {
            dh[j] = dh_steps[s * n + j] + dh_next[j];
        }
        dh_next.fill(0.0);

        match p.kind {
            CellKind::Lstm => {
                let c_prev = &cache.cs[s * n..(s + 1) * n];
                let tanh_c = &cache.tanh_c[s * n..(s + 1) * n];
                for j in 0..n {
                    let i = acts[j];
                    let f = acts[n + j];
                    let gc = acts[2 * n + j];
                    let o = acts[3 * n + j];
                    let tc = tanh_c[j];
                    let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
                    da[j] = dc * gc * i * (1.0 - i);
                    da[n + j] = dc * c_prev[j] * f * (1.0 - f);
                    da[2 * n + j] = dc * i * (1.0 - gc * gc);
                    da[3 * n + j] = dh[j] * tc * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
                grads.u.rank1_add(&da, h_prev);
                p.u.matvec_t_add(&da, &mut dh_next);
            }
            CellKind::Gru => {
                let rh = &cache.rh[s * n..(s + 1) * n];
                for j in 0..n {
                    let z = acts[j];
                    let cand = acts[2 * n + j];
                    da[2 * n + j] = dh[j] * z * (1.0 - cand * cand);
                    da[j] = dh[j] * (cand - h_prev[j]) * z * (1.0 - z);
                    dh_next[j] = dh[j] * (1.0 - z);
                }
                d_rh.fill(0.0);
                p.u.matvec_t_rows_add(2 * n..3 * n, &da[2 * n..], &mut d_rh);
                grads.u.rank1_rows_add(2 * n..3 * n, &da[2 * n..], rh);
                for j in 0..n {
                    let r = acts[n + j];
                    da[n + j] = d_rh[j] * h_prev[j] * r * (1.0 - r);
                    dh_next[j] += d_rh[j] * r;
                }
                grads.u.rank1_rows_add(0..2 * n, &da[..2 * n], h_prev);
                p.u.matvec_t_rows_add(0..2 * n, &da[..2 * n], &mut dh_next);
            }
        }
        grads.w.rank1_add(&da, x);
        for (gb, a) in grads.b.iter_mut().zip(&da) {
            *gb += a;
        }
        p.w.matvec_t_add(&da, &mut dxs[t * d..(t + 1) * d]);
    }
}
