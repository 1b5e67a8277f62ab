//! Stacked bidirectional recurrent regressor with a scalar affine head.
//!
//! Each layer runs one cell left-to-right and another right-to-left over the
//! whole window and concatenates their hidden states per timestep. Layers
//! after the first consume that `2 * hidden` sequence, with inverted dropout
//! applied to it in train mode. The head reads the last forward hidden state
//! of the top layer together with the top layer's backward hidden state at
//! the first timestep.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cell::{backprop_sequence, run_sequence, CellKind, CellParams, Direction, SeqCache};
use crate::dropout::{check_rate, sample_mask, Mode};
use crate::error::{NeuralError, Result};
use crate::matrix::dot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLayer {
    pub forward: CellParams,
    pub backward: CellParams,
}

/// Shape of a [`StackedBiRnn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiRnnShape {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl BiRnnShape {
    fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.hidden_size == 0 || self.layers == 0 {
            return Err(NeuralError::Argument(format!(
                "input, hidden and layer counts must be positive: {self:?}"
            )));
        }
        check_rate(self.dropout)
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            2 * self.hidden_size
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedBiRnn {
    pub kind: CellKind,
    pub input_size: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub layers: Vec<BiLayer>,
    /// `2 * hidden` readout weights.
    pub head: Vec<f64>,
    pub head_bias: f64,
}

struct LayerTrace {
    /// Input actually fed to the layer (after dropout), `steps x layer_input`.
    input: Vec<f64>,
    mask: Option<Vec<f64>>,
    fwd: SeqCache,
    bwd: SeqCache,
}

struct ForwardTrace {
    layers: Vec<LayerTrace>,
    readout: Vec<f64>,
    prediction: f64,
}

impl StackedBiRnn {
    /// All parameters zero. Useful as a gradient accumulator.
    pub fn zeros(shape: BiRnnShape) -> Result<Self> {
        shape.validate()?;
        let layers = (0..shape.layers)
            .map(|l| {
                let d = shape.layer_input(l);
                BiLayer {
                    forward: CellParams::zeros(shape.kind, d, shape.hidden_size),
                    backward: CellParams::zeros(shape.kind, d, shape.hidden_size),
                }
            })
            .collect();
        Ok(Self {
            kind: shape.kind,
            input_size: shape.input_size,
            hidden_size: shape.hidden_size,
            dropout: shape.dropout,
            layers,
            head: vec![0.0; 2 * shape.hidden_size],
            head_bias: 0.0,
        })
    }

    pub fn init<R: Rng + ?Sized>(shape: BiRnnShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layers = (0..shape.layers)
            .map(|l| {
                let d = shape.layer_input(l);
                BiLayer {
                    forward: CellParams::init(shape.kind, d, shape.hidden_size, rng),
                    backward: CellParams::init(shape.kind, d, shape.hidden_size, rng),
                }
            })
            .collect();
        let bound = 1.0 / ((2 * shape.hidden_size) as f64).sqrt();
        let head = (0..2 * shape.hidden_size)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            kind: shape.kind,
            input_size: shape.input_size,
            hidden_size: shape.hidden_size,
            dropout: shape.dropout,
            layers,
            head,
            head_bias: 0.0,
        })
    }

    pub fn shape(&self) -> BiRnnShape {
        BiRnnShape {
            kind: self.kind,
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            layers: self.layers.len(),
            dropout: self.dropout,
        }
    }

    /// Zero-valued container with the same shape.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape()).expect("shape of an existing network is valid")
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter count of the recurrent cells only (excludes the head).
    pub fn cell_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.forward.param_count() + l.backward.param_count())
            .sum()
    }

    /// Every parameter block in a fixed order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(6 * self.layers.len() + 2);
        for layer in &self.layers {
            for cell in [&layer.forward, &layer.backward] {
                out.push(&cell.w.data);
                out.push(&cell.u.data);
                out.push(&cell.b);
            }
        }
        out.push(&self.head);
        out.push(std::slice::from_ref(&self.head_bias));
        out
    }

    /// Mutable counterpart of [`param_slices`](Self::param_slices), same order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(6 * self.layers.len() + 2);
        for layer in &mut self.layers {
            for cell in [&mut layer.forward, &mut layer.backward] {
                out.push(&mut cell.w.data);
                out.push(&mut cell.u.data);
                out.push(&mut cell.b);
            }
        }
        out.push(&mut self.head);
        out.push(std::slice::from_mut(&mut self.head_bias));
        out
    }

    pub fn fill(&mut self, value: f64) {
        for s in self.param_slices_mut() {
            s.fill(value);
        }
    }

    /// Euclidean norm over all parameters.
    pub fn norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_window(&self, window: &[f64]) -> Result<usize> {
        if window.is_empty() {
            return Err(NeuralError::Argument("empty window".into()));
        }
        if window.len() % self.input_size != 0 {
            return Err(NeuralError::Dimension(format!(
                "window of {} values is not a whole number of {}-wide steps",
                window.len(),
                self.input_size
            )));
        }
        Ok(window.len() / self.input_size)
    }

    /// `mask_rng` is `Some` only when inter-layer dropout should be sampled.
    fn run(&self, window: &[f64], mut mask_rng: Option<&mut dyn RngCore>) -> Result<ForwardTrace> {
        let steps = self.check_window(window)?;
        let n = self.hidden_size;
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (input, mask) = match traces.last() {
                None => (window.to_vec(), None),
                Some(prev) => {
                    let mut out = concat_outputs(prev, steps, n);
                    let mask = if let (Some(rng), true) = (mask_rng.as_mut(), self.dropout > 0.0) {
                        let m = sample_mask(out.len(), self.dropout, *rng);
                        out.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                        Some(m)
                    } else {
                        None
                    };
                    (out, mask)
                }
            };
            debug_assert_eq!(input.len(), steps * layer.forward.input_size, "layer {l}");
            let fwd = run_sequence(&layer.forward, &input, Direction::Forward);
            let bwd = run_sequence(&layer.backward, &input, Direction::Backward);
            traces.push(LayerTrace {
                input,
                mask,
                fwd,
                bwd,
            });
        }
        let top = traces.last().expect("at least one layer");
        let mut readout = Vec::with_capacity(2 * n);
        readout.extend_from_slice(top.fwd.h_at_time(steps - 1, n));
        readout.extend_from_slice(top.bwd.h_at_time(0, n));
        let prediction = dot(&self.head, &readout) + self.head_bias;
        Ok(ForwardTrace {
            layers: traces,
            readout,
            prediction,
        })
    }

    /// Scalar prediction for a flat `steps x input_size` window.
    pub fn forward<R: Rng>(&self, window: &[f64], mode: Mode, rng: &mut R) -> Result<f64> {
        Ok(self.run(window, mask_source(mode, rng))?.prediction)
    }

    /// Eval-mode prediction.
    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        Ok(self.run(window, None)?.prediction)
    }

    /// Squared-error loss and its gradient w.r.t. every parameter.
    pub fn backward<R: Rng>(
        &self,
        window: &[f64],
        target: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, StackedBiRnn)> {
        let mut grads = self.zeros_like();
        let (loss, _) = self.accumulate_gradients(window, target, mode, rng, &mut grads)?;
        Ok((loss, grads))
    }

    /// Like [`backward`](Self::backward) but adds into an existing gradient
    /// container. Returns `(loss, prediction)`.
    pub fn accumulate_gradients<R: Rng>(
        &self,
        window: &[f64],
        target: f64,
        mode: Mode,
        rng: &mut R,
        grads: &mut StackedBiRnn,
    ) -> Result<(f64, f64)> {
        if grads.shape() != self.shape() {
            return Err(NeuralError::Dimension(
                "gradient container shape differs from network".into(),
            ));
        }
        let trace = self.run(window, mask_source(mode, rng))?;
        let steps = window.len() / self.input_size;
        let n = self.hidden_size;
        let err = trace.prediction - target;
        let dpred = 2.0 * err;

        for (g, r) in grads.head.iter_mut().zip(&trace.readout) {
            *g += dpred * r;
        }
        grads.head_bias += dpred;

        // Gradient w.r.t. each layer's concatenated output, `steps x 2n`.
        let mut d_out = vec![0.0; steps * 2 * n];
        for j in 0..n {
            d_out[(steps - 1) * 2 * n + j] = dpred * self.head[j];
            d_out[n + j] = dpred * self.head[n + j];
        }

        let mut dh_f = vec![0.0; steps * n];
        let mut dh_b = vec![0.0; steps * n];
        for (l, (layer, lt)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            for t in 0..steps {
                let row = &d_out[t * 2 * n..(t + 1) * 2 * n];
                let sf = lt.fwd.step_of(t);
                let sb = lt.bwd.step_of(t);
                dh_f[sf * n..(sf + 1) * n].copy_from_slice(&row[..n]);
                dh_b[sb * n..(sb + 1) * n].copy_from_slice(&row[n..]);
            }
            let mut d_in = vec![0.0; lt.input.len()];
            let gl = &mut grads.layers[l];
            backprop_sequence(&layer.forward, &lt.input, &lt.fwd, &dh_f, &mut gl.forward, &mut d_in);
            backprop_sequence(&layer.backward, &lt.input, &lt.bwd, &dh_b, &mut gl.backward, &mut d_in);
            if l > 0 {
                if let Some(mask) = &lt.mask {
                    d_in.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
                d_out = d_in;
            }
        }
        Ok((err * err, trace.prediction))
    }
}

fn mask_source<R: Rng>(mode: Mode, rng: &mut R) -> Option<&mut dyn RngCore> {
    match mode {
        Mode::Train => Some(rng as &mut dyn RngCore),
        Mode::Eval => None,
    }
}

fn concat_outputs(trace: &LayerTrace, steps: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps * 2 * n);
    for t in 0..steps {
        out.extend_from_slice(trace.fwd.h_at_time(t, n));
        out.extend_from_slice(trace.bwd.h_at_time(t, n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(kind: CellKind, input: usize, hidden: usize, layers: usize) -> BiRnnShape {
        BiRnnShape {
            kind,
            input_size: input,
            hidden_size: hidden,
            layers,
            dropout: 0.25,
        }
    }

    #[test]
    fn zero_network_emits_head_bias() {
        let mut net = StackedBiRnn::zeros(shape(CellKind::Lstm, 3, 4, 2)).unwrap();
        net.head_bias = 0.7;
        let window: Vec<f64> = (0..15).map(|i| i as f64 * 0.3 - 2.0).collect();
        assert_eq!(net.predict(&window).unwrap(), 0.7);
    }

    #[test]
    fn empty_and_ragged_windows_are_rejected() {
        let net = StackedBiRnn::zeros(shape(CellKind::Gru, 3, 2, 1)).unwrap();
        assert!(matches!(net.predict(&[]), Err(NeuralError::Argument(_))));
        assert!(matches!(net.predict(&[1.0; 4]), Err(NeuralError::Dimension(_))));
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = StackedBiRnn::init(shape(CellKind::Lstm, 3, 5, 3), &mut rng).unwrap();
        let window: Vec<f64> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = net.forward(&window, Mode::Eval, &mut rng).unwrap();
        let b = net.forward(&window, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn head_bias_gradient_is_twice_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = StackedBiRnn::init(shape(CellKind::Gru, 2, 3, 2), &mut rng).unwrap();
        let window = vec![0.1, -0.4, 0.9, 0.3, -0.2, 0.5];
        let pred = net.predict(&window).unwrap();
        let (loss, grads) = net.backward(&window, 1.5, Mode::Eval, &mut rng).unwrap();
        assert!((loss - (pred - 1.5).powi(2)).abs() < 1e-15);
        assert!((grads.head_bias - 2.0 * (pred - 1.5)).abs() < 1e-15);
    }

    #[test]
    fn exact_prediction_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = StackedBiRnn::init(shape(CellKind::Lstm, 2, 3, 2), &mut rng).unwrap();
        let window = vec![0.1, -0.4, 0.9, 0.3];
        let target = net.predict(&window).unwrap();
        let (loss, grads) = net.backward(&window, target, Mode::Eval, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.norm(), 0.0);
    }

    /// Explicit unrolled computation for a one-layer, two-unit LSTM on a
    /// length-three window, written without any of the crate's kernels.
    #[test]
    fn one_layer_matches_hand_unrolled() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = StackedBiRnn::init(shape(CellKind::Lstm, 2, 2, 1), &mut rng).unwrap();
        let xs = [[0.5, -1.0], [0.25, 0.75], [-0.6, 0.1]];
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |p: &CellParams, x: &[f64; 2], h: [f64; 2], c: [f64; 2]| {
            let mut hn = [0.0; 2];
            let mut cn = [0.0; 2];
            for j in 0..2 {
                let pre = |g: usize| {
                    let r = g * 2 + j;
                    p.b[r]
                        + p.w.get(r, 0) * x[0]
                        + p.w.get(r, 1) * x[1]
                        + p.u.get(r, 0) * h[0]
                        + p.u.get(r, 1) * h[1]
                };
                let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                cn[j] = f * c[j] + i * g;
                hn[j] = o * cn[j].tanh();
            }
            (hn, cn)
        };
        let layer = &net.layers[0];
        let (mut hf, mut cf) = ([0.0; 2], [0.0; 2]);
        for x in &xs {
            (hf, cf) = step(&layer.forward, x, hf, cf);
        }
        let (mut hb, mut cb) = ([0.0; 2], [0.0; 2]);
        for x in xs.iter().rev() {
            (hb, cb) = step(&layer.backward, x, hb, cb);
        }
        let want = net.head[0] * hf[0]
            + net.head[1] * hf[1]
            + net.head[2] * hb[0]
            + net.head[3] * hb[1]
            + net.head_bias;
        let got = net.predict(&flat).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn train_mode_dropout_changes_output_but_not_first_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = StackedBiRnn::init(shape(CellKind::Lstm, 2, 6, 1), &mut rng).unwrap();
        let window = vec![0.1, -0.4, 0.9, 0.3];
        // A single layer has no inter-layer dropout site.
        let a = net.forward(&window, Mode::Train, &mut rng).unwrap();
        assert_eq!(a, net.predict(&window).unwrap());

        let deep = StackedBiRnn::init(shape(CellKind::Lstm, 2, 6, 2), &mut rng).unwrap();
        let outs: Vec<f64> = (0..8)
            .map(|_| deep.forward(&window, Mode::Train, &mut rng).unwrap())
            .collect();
        assert!(outs.iter().any(|o| *o != outs[0]));
    }

    #[test]
    fn default_network_parameter_count() {
        let net = StackedBiRnn::zeros(shape(CellKind::Lstm, 11, 200, 5)).unwrap();
        // Independent shape walk: layer 0 sees 11 inputs, later layers 400.
        let mut want = 0;
        for l in 0..5 {
            let d = if l == 0 { 11 } else { 400 };
            want += 2 * 4 * (200 * d + 200 * 200 + 200);
        }
        assert_eq!(net.cell_param_count(), want);
        assert_eq!(net.param_count(), want + 401);
    }
}
