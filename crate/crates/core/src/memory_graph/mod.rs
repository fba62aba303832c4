//! Wiring of controller outputs, heads and memory blocks for the four
//! topologies.
//!
//! | variant | blocks                         | writes                      | read from |
//! |---------|--------------------------------|-----------------------------|-----------|
//! | NTM     | `M` (controlled)               | all write heads on `M`      | `M`       |
//! | NTM1    | `M_c` (controlled), `M_h` (hidden) | one head on `M_c`       | `M_h`     |
//! | NTM2    | `M_1`, `M_2` (both controlled) | L1 head on `M_1`, L2 on `M_2` | `M_2`   |
//! | NTM3    | one controlled block per layer | layer `k` head on `M_k`     | deepest   |
//!
//! Within a step the order is always write, then mix, then read. Mixing is
//! `M_h(t) = a M_h(t-1) + b M_c(t)` for NTM1 and
//! `M_k(t) = a M~_k(t) + b M_{k-1}(t)` for NTM2/NTM3, where `M~_k` is the
//! block after its own head wrote to it.

mod checkpoint;
mod model;

pub use checkpoint::Checkpoint;
pub use model::{Forward, NtmModel};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::addressing::{self, Addressing, HeadKind, HeadParams, WriteOp, DEFAULT_SHIFT_WIDTH};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Var};

/// Half-width of the uniform init for memory rows and initial-weighting biases.
pub const MEMORY_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ntm,
    Ntm1,
    Ntm2,
    Ntm3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ntm, Variant::Ntm1, Variant::Ntm2, Variant::Ntm3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ntm => "ntm",
            Variant::Ntm1 => "ntm1",
            Variant::Ntm2 => "ntm2",
            Variant::Ntm3 => "ntm3",
        }
    }

    fn default_layers(self) -> usize {
        match self {
            Variant::Ntm3 => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("variant: unknown value {s:?} (expected ntm, ntm1, ntm2 or ntm3)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    Fixed,
    Learned,
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::Fixed => "fixed",
            MixMode::Learned => "learned",
        })
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(MixMode::Fixed),
            "learned" => Ok(MixMode::Learned),
            _ => Err(Error::config(format!("mix_mode: unknown value {s:?} (expected fixed or learned)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Controlled,
    Hidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mem_slots: usize,
    pub mem_width: usize,
    pub read_heads: usize,
    /// Write heads per controlled block.
    pub write_heads: usize,
    pub controller_width: usize,
    pub layers: usize,
    pub mix_mode: MixMode,
    pub mix_a: f64,
    pub mix_b: f64,
    pub shift_width: usize,
    /// NTM2/NTM3: the write heads of different blocks share one affine map.
    pub share_head_params: bool,
    pub seed: u64,
    /// External input channels per timestep.
    pub input_width: usize,
    pub output_width: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, input_width: usize, output_width: usize) -> Self {
        ModelConfig {
            variant,
            mem_slots: 128,
            mem_width: 20,
            read_heads: 1,
            write_heads: 1,
            controller_width: 100,
            layers: variant.default_layers(),
            mix_mode: MixMode::Learned,
            mix_a: 0.5,
            mix_b: 0.5,
            shift_width: DEFAULT_SHIFT_WIDTH,
            share_head_params: false,
            seed: 1,
            input_width,
            output_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mem_slots", self.mem_slots),
            ("mem_width", self.mem_width),
            ("read_heads", self.read_heads),
            ("write_heads", self.write_heads),
            ("controller_width", self.controller_width),
            ("layers", self.layers),
            ("input_width", self.input_width),
            ("output_width", self.output_width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key}: must be at least 1")));
            }
        }
        if self.shift_width.is_multiple_of(2) || self.shift_width > self.mem_slots {
            return Err(Error::config(format!(
                "shift_width: must be odd and at most mem_slots ({}), got {}",
                self.mem_slots, self.shift_width
            )));
        }
        if self.variant == Variant::Ntm1 && self.write_heads != 1 {
            return Err(Error::config("write_heads: NTM1 has exactly one write head"));
        }
        if self.variant == Variant::Ntm3 && self.layers < 2 {
            return Err(Error::config("layers: NTM3 needs at least 2 controller layers"));
        }
        if !self.mix_a.is_finite() || !self.mix_b.is_finite() {
            return Err(Error::config("mix_a/mix_b: must be finite"));
        }
        if self.mix_mode == MixMode::Fixed {
            for (key, v) in [("mix_a", self.mix_a), ("mix_b", self.mix_b)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("{key}: fixed mixture weights must lie in [0, 1], got {v}")));
                }
            }
        }
        Ok(())
    }

    /// Controller input width: external input plus one read vector per read head.
    pub fn controller_input(&self) -> usize {
        self.input_width + self.read_heads * self.mem_width
    }
}

#[derive(Clone, Copy, Debug)]
enum Coef {
    Fixed(f64),
    Learned(ParamId),
}

impl Coef {
    fn bind(self, tape: &mut Tape, p: &Bound) -> Var {
        match self {
            Coef::Fixed(v) => tape.scalar(v),
            Coef::Learned(id) => p.var(id),
        }
    }
}

/// Mixture weights `(a, b)`.
#[derive(Clone, Copy, Debug)]
pub struct MixCoeffs {
    a: Coef,
    b: Coef,
}

impl MixCoeffs {
    /// Current numeric values.
    pub fn values(&self, params: &ParamSet) -> (f64, f64) {
        let get = |c: Coef| match c {
            Coef::Fixed(v) => v,
            Coef::Learned(id) => params.get(id).data()[0],
        };
        (get(self.a), get(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub role: BlockRole,
    pub init: ParamId,
}

#[derive(Clone, Debug)]
pub struct WriteHeadSpec {
    pub block: usize,
    /// Controller layer feeding this head.
    pub layer: usize,
    pub head: HeadParams,
    pub init_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ReadHeadSpec {
    pub head: HeadParams,
    pub init_bias: ParamId,
    pub read_init: ParamId,
}

/// Memory blocks and heads for one variant.
#[derive(Clone, Debug)]
pub struct MemoryGraph {
    variant: Variant,
    slots: usize,
    width: usize,
    blocks: Vec<BlockSpec>,
    writes: Vec<WriteHeadSpec>,
    reads: Vec<ReadHeadSpec>,
    read_block: usize,
    mix: Option<MixCoeffs>,
}

/// Memory contents and head weightings at one timestep.
#[derive(Clone, Debug)]
pub struct MemoryState {
    pub blocks: Vec<Var>,
    /// `w(t)` per write head, in head order.
    pub write_weights: Vec<Var>,
    pub read_weights: Vec<Var>,
    /// `r(t)` per read head.
    pub reads: Vec<Var>,
}

/// A memory step together with the addressing stages of every head.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub state: MemoryState,
    pub write_addressing: Vec<Addressing>,
    pub read_addressing: Vec<Addressing>,
}

impl MemoryGraph {
    /// Allocates memory, head and mixing parameters. Head inputs have width
    /// `config.controller_width`.
    pub fn new(config: &ModelConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, m, k) = (config.mem_slots, config.mem_width, config.shift_width);
        let cw = config.controller_width;
        let top = config.layers - 1;

        let (roles, read_block): (Vec<BlockRole>, usize) = match config.variant {
            Variant::Ntm => (vec![BlockRole::Controlled], 0),
            Variant::Ntm1 => (vec![BlockRole::Controlled, BlockRole::Hidden], 1),
            Variant::Ntm2 => (vec![BlockRole::Controlled; 2], 1),
            Variant::Ntm3 => (vec![BlockRole::Controlled; config.layers], config.layers - 1),
        };
        let blocks: Vec<BlockSpec> = roles
            .iter()
            .enumerate()
            .map(|(b, &role)| BlockSpec {
                role,
                init: params.uniform(format!("mem.b{b}.init"), &[n, m], MEMORY_INIT, rng),
            })
            .collect();

        let shared = config.share_head_params && matches!(config.variant, Variant::Ntm2 | Variant::Ntm3);
        let mut shared_heads: Vec<HeadParams> = Vec::new();
        let mut writes = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            if block.role != BlockRole::Controlled {
                continue;
            }
            for h in 0..config.write_heads {
                let head = if shared {
                    if shared_heads.len() <= h {
                        shared_heads.push(HeadParams::new(params, &format!("write.shared.h{h}"), HeadKind::Write, cw, m, k, rng));
                    }
                    shared_heads[h].clone()
                } else {
                    HeadParams::new(params, &format!("write.b{b}.h{h}"), HeadKind::Write, cw, m, k, rng)
                };
                let layer = if config.variant == Variant::Ntm3 { b } else { top };
                writes.push(WriteHeadSpec {
                    block: b,
                    layer,
                    head,
                    init_bias: params.uniform(format!("write.b{b}.h{h}.w0"), &[n], MEMORY_INIT, rng),
                });
            }
        }

        let reads = (0..config.read_heads)
            .map(|h| ReadHeadSpec {
                head: HeadParams::new(params, &format!("read.h{h}"), HeadKind::Read, cw, m, k, rng),
                init_bias: params.uniform(format!("read.h{h}.w0"), &[n], MEMORY_INIT, rng),
                read_init: params.uniform(format!("read.h{h}.r0"), &[m], MEMORY_INIT, rng),
            })
            .collect();

        let mix = (config.variant != Variant::Ntm).then(|| match config.mix_mode {
            MixMode::Fixed => MixCoeffs {
                a: Coef::Fixed(config.mix_a),
                b: Coef::Fixed(config.mix_b),
            },
            MixMode::Learned => MixCoeffs {
                a: Coef::Learned(params.filled("mix.a", &[1], config.mix_a)),
                b: Coef::Learned(params.filled("mix.b", &[1], config.mix_b)),
            },
        });

        Ok(MemoryGraph {
            variant: config.variant,
            slots: n,
            width: m,
            blocks,
            writes,
            reads,
            read_block,
            mix,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn write_heads(&self) -> &[WriteHeadSpec] {
        &self.writes
    }

    pub fn read_heads(&self) -> &[ReadHeadSpec] {
        &self.reads
    }

    pub fn read_block(&self) -> usize {
        self.read_block
    }

    pub fn mix(&self) -> Option<&MixCoeffs> {
        self.mix.as_ref()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Initial memory and weightings from the learned init parameters:
    /// block contents are the init matrices, weightings are softmaxes of
    /// per-slot biases, and read vectors are learned biases.
    pub fn init_state(&self, tape: &mut Tape, p: &Bound) -> MemoryState {
        MemoryState {
            blocks: self.blocks.iter().map(|b| p.var(b.init)).collect(),
            write_weights: self.writes.iter().map(|w| tape.softmax(p.var(w.init_bias))).collect(),
            read_weights: self.reads.iter().map(|r| tape.softmax(p.var(r.init_bias))).collect(),
            reads: self.reads.iter().map(|r| p.var(r.read_init)).collect(),
        }
    }

    /// One memory step given per-layer controller outputs (top layer last).
    pub fn step(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, layer_outputs: &[Var]) -> Result<StepTrace> {
        match self.variant {
            Variant::Ntm => self.step_ntm(tape, p, state, layer_outputs),
            Variant::Ntm1 => self.step_ntm1(tape, p, state, layer_outputs),
            Variant::Ntm2 => self.step_ntm2(tape, p, state, layer_outputs),
            Variant::Ntm3 => self.step_ntm3(tape, p, state, layer_outputs),
        }
    }

    /// Baseline: write heads address the pre-step memory, read heads the
    /// post-write memory.
    pub fn step_ntm(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, c: &[Var]) -> Result<StepTrace> {
        let (blocks, write_weights, write_addressing) = self.write_all(tape, p, state, c)?;
        self.finish(tape, p, state, blocks, write_weights, write_addressing, c)
    }

    /// Hidden block `M_h(t) = a M_h(t-1) + b M_c(t)`; reads address `M_h(t)`.
    pub fn step_ntm1(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, c: &[Var]) -> Result<StepTrace> {
        let (mut blocks, write_weights, write_addressing) = self.write_all(tape, p, state, c)?;
        let mixed = self.mix_blocks(tape, p, state.blocks[1], blocks[0])?;
        blocks[1] = mixed;
        self.finish(tape, p, state, blocks, write_weights, write_addressing, c)
    }

    /// `M_2(t) = a M~_2(t) + b M_1(t)`, both heads driven by the top layer.
    pub fn step_ntm2(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, c: &[Var]) -> Result<StepTrace> {
        let (mut blocks, write_weights, write_addressing) = self.write_all(tape, p, state, c)?;
        blocks[1] = self.mix_blocks(tape, p, blocks[1], blocks[0])?;
        self.finish(tape, p, state, blocks, write_weights, write_addressing, c)
    }

    /// Block `k` is written from controller layer `k` and then mixed with the
    /// already-updated block `k-1`.
    pub fn step_ntm3(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, c: &[Var]) -> Result<StepTrace> {
        if c.len() != self.blocks.len() {
            return Err(Error::config(format!(
                "layers: NTM3 has {} memory blocks but received {} controller layer outputs",
                self.blocks.len(),
                c.len()
            )));
        }
        let (mut blocks, write_weights, write_addressing) = self.write_all(tape, p, state, c)?;
        for k in 1..blocks.len() {
            blocks[k] = self.mix_blocks(tape, p, blocks[k], blocks[k - 1])?;
        }
        self.finish(tape, p, state, blocks, write_weights, write_addressing, c)
    }

    /// `a * own + b * upstream`.
    pub fn mix_blocks(&self, tape: &mut Tape, p: &Bound, own: Var, upstream: Var) -> Result<Var> {
        let mix = self
            .mix
            .ok_or_else(|| Error::Contract("baseline NTM has no mixture weights".into()))?;
        let a = mix.a.bind(tape, p);
        let b = mix.b.bind(tape, p);
        let x = tape.scale(own, a)?;
        let y = tape.scale(upstream, b)?;
        tape.add(x, y)
    }

    fn layer_output(&self, c: &[Var], layer: usize) -> Result<Var> {
        c.get(layer).copied().ok_or_else(|| {
            Error::config(format!("layers: head expects controller layer {layer}, only {} given", c.len()))
        })
    }

    /// Every write head addresses its block's previous contents and all heads
    /// of a block are applied together.
    fn write_all(&self, tape: &mut Tape, p: &Bound, state: &MemoryState, c: &[Var]) -> Result<(Vec<Var>, Vec<Var>, Vec<Addressing>)> {
        let mut blocks = state.blocks.clone();
        let mut weights = Vec::with_capacity(self.writes.len());
        let mut trace = Vec::with_capacity(self.writes.len());
        let mut ops: Vec<Vec<WriteOp>> = vec![Vec::new(); self.blocks.len()];
        for (spec, &prev) in self.writes.iter().zip(&state.write_weights) {
            let input = self.layer_output(c, spec.layer)?;
            let iface = spec.head.interface(tape, p, input)?;
            let addr = addressing::address(tape, &iface, prev, state.blocks[spec.block])?;
            ops[spec.block].push(WriteOp {
                weighting: addr.weighting,
                erase: iface.erase.expect("write head has erase vector"),
                add: iface.add.expect("write head has add vector"),
            });
            weights.push(addr.weighting);
            trace.push(addr);
        }
        for (b, block_ops) in ops.iter().enumerate() {
            if !block_ops.is_empty() {
                blocks[b] = addressing::write_heads(tape, state.blocks[b], block_ops)?;
            }
        }
        Ok((blocks, weights, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        tape: &mut Tape,
        p: &Bound,
        state: &MemoryState,
        blocks: Vec<Var>,
        write_weights: Vec<Var>,
        write_addressing: Vec<Addressing>,
        c: &[Var],
    ) -> Result<StepTrace> {
        let top = *c.last().ok_or_else(|| Error::config("no controller output"))?;
        let target = blocks[self.read_block];
        let mut read_weights = Vec::with_capacity(self.reads.len());
        let mut reads = Vec::with_capacity(self.reads.len());
        let mut read_addressing = Vec::with_capacity(self.reads.len());
        for (spec, &prev) in self.reads.iter().zip(&state.read_weights) {
            let iface = spec.head.interface(tape, p, top)?;
            let addr = addressing::address(tape, &iface, prev, target)?;
            reads.push(addressing::read(tape, addr.weighting, target)?);
            read_weights.push(addr.weighting);
            read_addressing.push(addr);
        }
        Ok(StepTrace {
            state: MemoryState {
                blocks,
                write_weights,
                read_weights,
                reads,
            },
            write_addressing,
            read_addressing,
        })
    }
}
