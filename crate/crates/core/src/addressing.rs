//! Read and write heads: attention weightings over memory slots, the
//! erase-and-add write, and convex-combination reads.
//!
//! A head maps the controller output through its own affine layer to an
//! interface vector, laid out as
//! `[key (M), beta (1), gate (1), shift (K), gamma (1), erase (M), add (M)]`
//! where erase and add exist only for write heads.

use rand::Rng;

use crate::controller::WEIGHT_INIT;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Var, SHARPEN_FLOOR};

/// Default shift kernel width: shifts of -1, 0 and +1.
pub const DEFAULT_SHIFT_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Read,
    Write,
}

/// Affine map from controller output to a head's interface vector.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub kind: HeadKind,
    pub weight: ParamId,
    pub bias: ParamId,
    pub mem_width: usize,
    pub shift_width: usize,
}

pub fn interface_width(kind: HeadKind, mem_width: usize, shift_width: usize) -> usize {
    let base = mem_width + 3 + shift_width;
    match kind {
        HeadKind::Read => base,
        HeadKind::Write => base + 2 * mem_width,
    }
}

impl HeadParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        kind: HeadKind,
        input_width: usize,
        mem_width: usize,
        shift_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out = interface_width(kind, mem_width, shift_width);
        HeadParams {
            kind,
            weight: params.uniform(format!("{name}.weight"), &[out, input_width], WEIGHT_INIT, rng),
            bias: params.filled(format!("{name}.bias"), &[out], 0.0),
            mem_width,
            shift_width,
        }
    }

    /// Emits the constrained interface for controller output `c`.
    pub fn interface(&self, tape: &mut Tape, p: &Bound, c: Var) -> Result<HeadInterface> {
        let z = tape.matmul(p.var(self.weight), c)?;
        let raw = tape.add(z, p.var(self.bias))?;
        HeadInterface::from_raw(tape, raw, self.kind, self.mem_width, self.shift_width)
    }
}

/// Constrained head outputs for one timestep.
#[derive(Clone, Copy, Debug)]
pub struct HeadInterface {
    pub key: Var,
    /// Key strength, `softplus(.) >= 0`.
    pub beta: Var,
    /// Interpolation gate in (0, 1).
    pub gate: Var,
    /// Shift distribution, softmax over K entries.
    pub shift: Var,
    /// Sharpening exponent, `1 + softplus(.)`.
    pub gamma: Var,
    pub erase: Option<Var>,
    pub add: Option<Var>,
}

impl HeadInterface {
    /// Splits and squashes a raw interface vector.
    pub fn from_raw(tape: &mut Tape, raw: Var, kind: HeadKind, mem_width: usize, shift_width: usize) -> Result<Self> {
        let expected = interface_width(kind, mem_width, shift_width);
        if tape.shape(raw) != [expected] {
            return Err(Error::dim("head_interface", tape.shape(raw), &[expected]));
        }
        let m = mem_width;
        let key = tape.slice(raw, 0, m)?;
        let beta = tape.slice(raw, m, 1)?;
        let beta = tape.softplus(beta);
        let gate = tape.slice(raw, m + 1, 1)?;
        let gate = tape.sigmoid(gate);
        let shift = tape.slice(raw, m + 2, shift_width)?;
        let shift = tape.softmax(shift);
        let gamma = tape.slice(raw, m + 2 + shift_width, 1)?;
        let gamma = tape.softplus(gamma);
        let gamma = tape.affine(gamma, 1.0, 1.0);
        let (erase, add) = match kind {
            HeadKind::Read => (None, None),
            HeadKind::Write => {
                let base = m + 3 + shift_width;
                let e = tape.slice(raw, base, m)?;
                let e = tape.sigmoid(e);
                let a = tape.slice(raw, base + m, m)?;
                (Some(e), Some(a))
            }
        };
        Ok(HeadInterface { key, beta, gate, shift, gamma, erase, add })
    }
}

/// Previous weighting `w(t-1)` of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadState {
    pub weighting: Var,
}

/// Every stage of the addressing pipeline, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Addressing {
    pub content: Var,
    pub gated: Var,
    pub shifted: Var,
    pub weighting: Var,
}

/// Content focus, interpolation with the previous weighting, circular shift
/// and sharpening.
pub fn address(tape: &mut Tape, head: &HeadInterface, prev: Var, mem: Var) -> Result<Addressing> {
    let sim = tape.cosine_rows(mem, head.key)?;
    let scaled = tape.scale(sim, head.beta)?;
    let content = tape.softmax(scaled);
    if tape.shape(prev) != tape.shape(content) {
        return Err(Error::dim("address", tape.shape(prev), tape.shape(content)));
    }
    let a = tape.scale(content, head.gate)?;
    let keep = tape.one_minus(head.gate);
    let b = tape.scale(prev, keep)?;
    let gated = tape.add(a, b)?;
    let shifted = tape.circular_convolve(gated, head.shift)?;
    let weighting = sharpen(tape, shifted, head.gamma)?;
    Ok(Addressing { content, gated, shifted, weighting })
}

/// `w^gamma / sum(w^gamma)` with entries floored before exponentiation.
pub fn sharpen(tape: &mut Tape, w: Var, gamma: Var) -> Result<Var> {
    let floored = tape.floor(w, SHARPEN_FLOOR);
    let powered = tape.pow_positive(floored, gamma)?;
    let total = tape.sum(powered);
    tape.div_scalar(powered, total)
}

/// One head's erase and add.
#[derive(Clone, Copy, Debug)]
pub struct WriteOp {
    pub weighting: Var,
    pub erase: Var,
    pub add: Var,
}

/// `M_new(i) = M_prev(i) * (1 - w(i) e) + w(i) a`.
pub fn write_head_step(tape: &mut Tape, mem: Var, w: Var, erase: Var, add: Var) -> Result<Var> {
    write_heads(tape, mem, &[WriteOp { weighting: w, erase, add }])
}

/// Applies several heads to one memory: the product of all erase factors
/// first, then the sum of all adds. Result does not depend on head order.
pub fn write_heads(tape: &mut Tape, mem: Var, ops: &[WriteOp]) -> Result<Var> {
    let Some(first) = ops.first() else {
        return Ok(mem);
    };
    check_write(tape, mem, first)?;
    let mut keep = erase_factor(tape, first)?;
    for op in &ops[1..] {
        check_write(tape, mem, op)?;
        let f = erase_factor(tape, op)?;
        keep = tape.mul(keep, f)?;
    }
    let mut out = tape.mul(mem, keep)?;
    for op in ops {
        let added = tape.outer(op.weighting, op.add)?;
        out = tape.add(out, added)?;
    }
    Ok(out)
}

fn check_write(tape: &Tape, mem: Var, op: &WriteOp) -> Result<()> {
    let ms = tape.shape(mem);
    let ok = ms.len() == 2
        && tape.shape(op.weighting) == [ms[0]]
        && tape.shape(op.erase) == [ms[1]]
        && tape.shape(op.add) == [ms[1]];
    if !ok {
        return Err(Error::config(format!(
            "write head shapes (w {:?}, e {:?}, a {:?}) do not fit memory {:?}",
            tape.shape(op.weighting),
            tape.shape(op.erase),
            tape.shape(op.add),
            ms
        )));
    }
    Ok(())
}

fn erase_factor(tape: &mut Tape, op: &WriteOp) -> Result<Var> {
    let we = tape.outer(op.weighting, op.erase)?;
    Ok(tape.one_minus(we))
}

/// `r = sum_i w(i) M(i)`.
pub fn read(tape: &mut Tape, w: Var, mem: Var) -> Result<Var> {
    let ms = tape.shape(mem);
    if ms.len() != 2 || tape.shape(w) != [ms[0]] {
        return Err(Error::dim("read", tape.shape(w), ms));
    }
    tape.matmul(w, mem)
}
