use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MemoryGraph, MemoryState, ModelConfig, StepTrace};
use crate::controller::{Controller, WEIGHT_INIT};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tasks::Episode;
use crate::tensor::{Tape, Tensor, Var};

/// Controller, memory graph and sigmoid output layer.
#[derive(Clone, Debug)]
pub struct NtmModel {
    config: ModelConfig,
    params: ParamSet,
    controller: Controller,
    graph: MemoryGraph,
    out_weight: ParamId,
    out_bias: ParamId,
}

/// Result of unrolling the model over an input sequence.
pub struct Forward {
    pub bound: Bound,
    /// Sigmoid outputs per timestep.
    pub outputs: Vec<Var>,
    /// Memory step of every timestep, including addressing stages.
    pub steps: Vec<StepTrace>,
    pub initial: MemoryState,
}

impl NtmModel {
    /// Builds and initializes all parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let controller = Controller::new(
            &mut params,
            "controller",
            config.controller_input(),
            config.controller_width,
            config.layers,
            &mut rng,
        )?;
        let graph = MemoryGraph::new(&config, &mut params, &mut rng)?;
        let feat = config.controller_width + config.read_heads * config.mem_width;
        let out_weight = params.uniform("output.weight", &[config.output_width, feat], WEIGHT_INIT, &mut rng);
        let out_bias = params.filled("output.bias", &[config.output_width], 0.0);
        Ok(NtmModel {
            config,
            params,
            controller,
            graph,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn graph(&self) -> &MemoryGraph {
        &self.graph
    }

    /// Replaces all parameter values. Names and shapes must match.
    pub fn load_params(&mut self, params: ParamSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Unrolls the model over the rows of `inputs` (`[T, input_width]`).
    pub fn forward(&self, tape: &mut Tape, inputs: &Tensor) -> Result<Forward> {
        let bound = self.params.bind(tape);
        let p = &bound;
        if inputs.shape().len() != 2 || inputs.cols() != self.config.input_width {
            return Err(Error::dim("forward", inputs.shape(), &[0, self.config.input_width]));
        }
        let initial = self.graph.init_state(tape, p);
        let mut ctl = self.controller.zero_state(tape);
        let mut mem = initial.clone();
        let mut outputs = Vec::with_capacity(inputs.rows());
        let mut steps = Vec::with_capacity(inputs.rows());
        for t in 0..inputs.rows() {
            let x = tape.leaf(Tensor::vector(inputs.row(t).to_vec()));
            let mut parts = Vec::with_capacity(1 + mem.reads.len());
            parts.push(x);
            parts.extend(mem.reads.iter().copied());
            let ctl_in = tape.concat(&parts)?;
            ctl = self.controller.step(tape, p, &ctl, ctl_in)?;
            let trace = self.graph.step(tape, p, &mem, &ctl.hidden)?;
            mem = trace.state.clone();

            parts.clear();
            parts.push(ctl.output());
            parts.extend(mem.reads.iter().copied());
            let feat = tape.concat(&parts)?;
            let z = tape.matmul(p.var(self.out_weight), feat)?;
            let z = tape.add(z, p.var(self.out_bias))?;
            outputs.push(tape.sigmoid(z));
            steps.push(trace);
        }
        Ok(Forward {
            bound,
            outputs,
            steps,
            initial,
        })
    }

    /// Forward pass plus masked BCE over the episode's answer steps.
    pub fn loss(&self, tape: &mut Tape, episode: &Episode) -> Result<(Forward, Var)> {
        if episode.targets.cols() != self.config.output_width {
            return Err(Error::dim("loss", episode.targets.shape(), &[0, self.config.output_width]));
        }
        let fwd = self.forward(tape, &episode.inputs)?;
        let stacked = tape.concat(&fwd.outputs)?;
        let pred = tape.reshape(stacked, episode.targets.shape())?;
        let target = tape.leaf(episode.targets.clone());
        let mask = tape.leaf(episode.mask.clone());
        let loss = tape.bce_loss(pred, target, mask)?;
        Ok((fwd, loss))
    }

    /// Loss value and per-parameter gradients for one episode.
    pub fn loss_and_grads(&self, episode: &Episode) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (fwd, loss) = self.loss(&mut tape, episode)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), fwd.bound.grads(&tape)))
    }

    /// Loss value only.
    pub fn loss_value(&self, episode: &Episode) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.loss(&mut tape, episode)?;
        Ok(tape.value(loss).item())
    }
}
