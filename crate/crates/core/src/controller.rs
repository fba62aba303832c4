//! Stacked LSTM controller.
//!
//! Layer 1 consumes the external input concatenated with the previous read
//! vectors; layer `l > 1` consumes the hidden output of layer `l - 1`. Every
//! layer's hidden output is exposed because NTM3 attaches a write head to
//! each of them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Weight init half-width for controller matrices.
pub const WEIGHT_INIT: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Gate parameters for one layer; each weight maps `[x; h_prev]`
/// (`d_in + d_h`) to `d_h`.
#[derive(Clone, Debug)]
pub struct LstmLayerParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub candidate: Gate,
}

#[derive(Clone, Debug)]
pub struct Controller {
    layers: Vec<LstmLayerParams>,
}

/// Hidden and cell vectors per layer.
#[derive(Clone, Debug)]
pub struct ControllerState {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

impl ControllerState {
    /// Output of the top layer, `c(t)`.
    pub fn output(&self) -> Var {
        *self.hidden.last().expect("controller has at least one layer")
    }

    /// Copies the state values off a tape.
    pub fn snapshot(&self, tape: &Tape) -> Vec<(Tensor, Tensor)> {
        self.hidden
            .iter()
            .zip(&self.cell)
            .map(|(&h, &c)| (tape.value(h).clone(), tape.value(c).clone()))
            .collect()
    }

    /// Re-creates a state on `tape` from a snapshot.
    pub fn restore(tape: &mut Tape, snapshot: &[(Tensor, Tensor)]) -> Self {
        let (hidden, cell) = snapshot
            .iter()
            .map(|(h, c)| (tape.leaf(h.clone()), tape.leaf(c.clone())))
            .unzip();
        ControllerState { hidden, cell }
    }
}

impl Controller {
    /// Allocates parameters for `layers` LSTM layers of width `hidden`.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if hidden == 0 || input_size == 0 {
            return Err(Error::config("controller_width and input width must be positive"));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d_in = if l == 0 { input_size } else { hidden };
            let mut gate = |name: &str, bias: f64| Gate {
                weight: params.uniform(
                    format!("{prefix}.l{l}.{name}.weight"),
                    &[hidden, d_in + hidden],
                    WEIGHT_INIT,
                    rng,
                ),
                bias: params.filled(format!("{prefix}.l{l}.{name}.bias"), &[hidden], bias),
            };
            let input = gate("input", 0.0);
            let forget = gate("forget", FORGET_BIAS);
            let output = gate("output", 0.0);
            let candidate = gate("candidate", 0.0);
            out.push(LstmLayerParams {
                input_size: d_in,
                hidden_size: hidden,
                input,
                forget,
                output,
                candidate,
            });
        }
        Ok(Controller { layers: out })
    }

    pub fn layers(&self) -> &[LstmLayerParams] {
        &self.layers
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size
    }

    /// Zero hidden and cell vectors for every layer.
    pub fn zero_state(&self, tape: &mut Tape) -> ControllerState {
        let h = self.hidden_size();
        let (hidden, cell) = self
            .layers
            .iter()
            .map(|_| (tape.leaf(Tensor::zeros(&[h])), tape.leaf(Tensor::zeros(&[h]))))
            .unzip();
        ControllerState { hidden, cell }
    }

    /// One timestep through every layer. Returns the new state; its `hidden`
    /// vector holds the per-layer outputs `c_L1(t) .. c_Lk(t)`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, state: &ControllerState, x: Var) -> Result<ControllerState> {
        if tape.shape(x) != [self.input_size()] {
            return Err(Error::config(format!(
                "controller input has shape {:?}, expected [{}]",
                tape.shape(x),
                self.input_size()
            )));
        }
        let mut hidden = Vec::with_capacity(self.layers.len());
        let mut cell = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let (h, c) = lstm_cell(tape, p, layer, input, state.hidden[l], state.cell[l])?;
            hidden.push(h);
            cell.push(c);
            input = h;
        }
        Ok(ControllerState { hidden, cell })
    }
}

fn gate_preact(tape: &mut Tape, p: &Bound, gate: &Gate, xh: Var) -> Result<Var> {
    let z = tape.matmul(p.var(gate.weight), xh)?;
    tape.add(z, p.var(gate.bias))
}

/// Standard LSTM cell: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    p: &Bound,
    layer: &LstmLayerParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let xh = tape.concat(&[x, h_prev])?;
    let i = gate_preact(tape, p, &layer.input, xh)?;
    let i = tape.sigmoid(i);
    let f = gate_preact(tape, p, &layer.forget, xh)?;
    let f = tape.sigmoid(f);
    let o = gate_preact(tape, p, &layer.output, xh)?;
    let o = tape.sigmoid(o);
    let g = gate_preact(tape, p, &layer.candidate, xh)?;
    let g = tape.tanh(g);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}
