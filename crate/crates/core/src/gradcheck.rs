//! Whole-model gradient check against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::memory_graph::{NtmModel, Variant};
use crate::tasks::{Episode, EpisodeMeta, TaskKind};
use crate::tensor::{OpKind, Tape, Tensor};

pub const FD_EPSILON: f64 = 1e-5;
/// Denominator floor for relative error. Central differences of an O(10)
/// loss carry roughly 1e-10 of rounding noise at this step, so gradients
/// below the floor are held to an absolute error of `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;
/// Parameter spread and seed of the point at which gradients are compared.
pub const PROBE_SPREAD: f64 = 0.5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupError>,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel() < tol
    }

    /// Groups sorted by decreasing error.
    pub fn worst(&self, n: usize) -> Vec<&GroupError> {
        let mut v: Vec<&GroupError> = self.groups.iter().collect();
        v.sort_by(|a, b| b.max_rel.total_cmp(&a.max_rel));
        v.truncate(n);
        v
    }
}

/// Small configuration for gradient checks: 4 slots of width 3, controller
/// width 8, learned mixture weights.
pub fn tiny_config(variant: Variant, read_heads: usize, write_heads: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(variant, TaskKind::Copy);
    cfg.model.mem_slots = 4;
    cfg.model.mem_width = 3;
    cfg.model.controller_width = 8;
    cfg.model.read_heads = read_heads;
    cfg.model.write_heads = write_heads;
    cfg.model.seed = 7;
    // Off-centre mixture weights so neither path is trivially symmetric.
    cfg.model.mix_a = 0.6;
    cfg.model.mix_b = 0.4;
    cfg
}

/// The five head/topology setups checked by default: baseline with one and
/// two heads of each kind, NTM1, NTM2 and a two-layer NTM3.
pub fn standard_setups() -> Vec<(String, ExperimentConfig)> {
    [
        ("ntm-1w1r", Variant::Ntm, 1),
        ("ntm-2w2r", Variant::Ntm, 2),
        ("ntm1", Variant::Ntm1, 1),
        ("ntm2", Variant::Ntm2, 1),
        ("ntm3-2layer", Variant::Ntm3, 1),
    ]
    .into_iter()
    .map(|(label, v, heads)| {
        let mut cfg = tiny_config(v, heads, heads);
        if v == Variant::Ntm3 {
            cfg.model.layers = 2;
        }
        (label.to_string(), cfg)
    })
    .collect()
}

/// Runs [`check_model`] on a [`probe_model`] of `config` with a two-step
/// probe episode.
pub fn check_config(config: &ExperimentConfig, fault: Option<OpKind>) -> Result<GradReport> {
    let model = probe_model(config.clone(), PROBE_SPREAD, config.model.seed)?;
    let mc = model.config();
    let episode = probe_episode(config.model.seed, 2, mc.input_width, mc.output_width);
    check_model(&model, &episode, FD_EPSILON, fault)
}

/// Model for `config` with every parameter redrawn uniformly from
/// `[-spread, spread]`. At the default init head biases are zero and the
/// emitted keys are tiny, where cosine similarity varies on a scale close to
/// the finite-difference step; a generic point keeps the comparison about
/// the derivative rules rather than the step size.
pub fn probe_model(config: ExperimentConfig, spread: f64, seed: u64) -> Result<NtmModel> {
    let mut model = NtmModel::new(config.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = rng.gen_range(-spread..=spread);
        }
    }
    Ok(model)
}

/// Random binary inputs and targets, every step scored.
pub fn probe_episode(seed: u64, steps: usize, input_width: usize, output_width: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = |n: usize| -> Vec<f64> { (0..n).map(|_| f64::from(rng.gen::<bool>() as u8)).collect() };
    let inputs = bits(steps * input_width);
    let targets = bits(steps * output_width);
    Episode {
        inputs: Tensor::new(vec![steps, input_width], inputs).expect("sized"),
        targets: Tensor::new(vec![steps, output_width], targets).expect("sized"),
        mask: Tensor::filled(&[steps], 1.0),
        meta: EpisodeMeta {
            task: TaskKind::Copy,
            seed,
            item_count: steps,
            item_width: output_width,
            item_len: 1,
            answer_items: steps,
            query: None,
        },
    }
}

/// Compares backprop gradients of the episode loss with central differences
/// for every parameter entry. `fault` corrupts one backward rule.
pub fn check_model(model: &NtmModel, episode: &Episode, eps: f64, fault: Option<OpKind>) -> Result<GradReport> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let (fwd, loss) = model.loss(&mut tape, episode)?;
    tape.backward(loss)?;
    let analytic = fwd.bound.grads(&tape);

    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let mut worst = GroupError {
            name: model.params().name(id).to_string(),
            max_rel: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[k];
            probe.params_mut().get_mut(id).data_mut()[k] = orig + eps;
            let up = probe.loss_value(episode)?;
            probe.params_mut().get_mut(id).data_mut()[k] = orig - eps;
            let down = probe.loss_value(episode)?;
            probe.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()][k];
            let rel = relative_error(a, numeric);
            if rel > worst.max_rel || k == 0 {
                worst = GroupError { max_rel: rel, worst_index: k, analytic: a, numeric, ..worst };
            }
        }
        groups.push(worst);
    }
    Ok(GradReport { groups })
}
