//! End-to-end acceptance checks. Each test prints one line of the form
//! `criterion N <name>: PASS|FAIL (details)` before asserting.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ntm_core::addressing::{self, WriteOp};
use ntm_core::config::ExperimentConfig;
use ntm_core::gradcheck;
use ntm_core::memory_graph::{Checkpoint, MemoryGraph, MixMode};
use ntm_core::params::ParamSet;
use ntm_core::tasks::{episode_seed, gen_copy, gen_recall, Episode, TaskKind};
use ntm_core::tensor::OpKind;
use ntm_core::trainer::{self, clip_global_norm, median, read_csv, summarize, write_csv, RmsProp, TrainConfig, Trainer};
use ntm_core::{ModelConfig, NtmModel, Tape, Tensor, Variant};

fn report(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    println!(
        "criterion {n} {name}: {} ({})",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(pass, "criterion {n} {name} failed: {}", detail.as_ref());
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn randomize(params: &mut ParamSet, seed: u64, spread: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if params.name(id).starts_with("mix.") {
            continue;
        }
        for v in params.get_mut(id).data_mut() {
            *v = rng.gen_range(-spread..spread);
        }
    }
}

// 1 -------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_oracle() {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut pass = true;
    for (label, cfg) in gradcheck::standard_setups() {
        let report = gradcheck::check_config(&cfg, None).unwrap();
        pass &= report.passed(1e-4);
        worst.push(format!("{label} {:.1e}", report.max_rel()));
    }
    // a corrupted backward rule must be detected
    let (_, cfg) = &gradcheck::standard_setups()[2];
    let faulty = gradcheck::check_config(cfg, Some(OpKind::CircConv)).unwrap();
    pass &= !faulty.passed(1e-4);
    let elapsed = start.elapsed();
    pass &= elapsed.as_secs_f64() < 60.0;
    report(
        1,
        "gradient oracle",
        pass,
        format!(
            "max rel err {}; injected fault {:.1e}; {:.1}s",
            worst.join(", "),
            faulty.max_rel(),
            elapsed.as_secs_f64()
        ),
    );
}

// 2 -------------------------------------------------------------------------

#[test]
fn criterion_02_simplex_invariants() {
    let mut pass = true;
    let mut details = Vec::new();
    for (variant, heads, layers) in [(Variant::Ntm, 2, 1), (Variant::Ntm1, 1, 1), (Variant::Ntm2, 1, 1), (Variant::Ntm3, 1, 2)] {
        let mut cfg = ModelConfig::new(variant, 9, 8);
        cfg.mem_slots = 16;
        cfg.mem_width = 6;
        cfg.controller_width = 16;
        cfg.read_heads = heads;
        cfg.write_heads = heads;
        cfg.layers = layers;
        let mut model = NtmModel::new(cfg).unwrap();
        randomize(model.params_mut(), 5, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = Tensor::new(vec![1000, 9], (0..9000).map(|_| f64::from(rng.gen::<bool>() as u8)).collect()).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &inputs).unwrap();
        let mut worst: f64 = 0.0;
        let mut negative = false;
        let mut count = 0;
        for step in &fwd.steps {
            for &w in step.state.write_weights.iter().chain(&step.state.read_weights) {
                let w = tape.value(w);
                negative |= w.data().iter().any(|&x| x < 0.0);
                worst = worst.max((w.sum() - 1.0).abs());
                count += 1;
            }
        }
        pass &= !negative && worst <= 1e-6;
        details.push(format!("{variant}: {count} weightings, max |sum-1| {worst:.1e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut conv_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(3..40);
        let k = [1, 3, 5][rng.gen_range(0..3)].min(if n % 2 == 1 { n } else { n - 1 });
        let w = rand_tensor(&mut rng, &[n], 0.0, 1.0);
        let s = rand_tensor(&mut rng, &[k], 0.0, 1.0);
        let (ws, ss) = (w.sum(), s.sum());
        let w = Tensor::vector(w.data().iter().map(|x| x / ws).collect());
        let s = Tensor::vector(s.data().iter().map(|x| x / ss).collect());
        let mut tape = Tape::new();
        let (wv, sv) = (tape.leaf(w), tape.leaf(s));
        let out = tape.circular_convolve(wv, sv).unwrap();
        conv_err = conv_err.max((tape.value(out).sum() - 1.0).abs());
    }
    pass &= conv_err <= 1e-12;
    details.push(format!("convolution max |sum-1| {conv_err:.1e}"));
    report(2, "simplex invariants", pass, details.join("; "));
}

// 3 -------------------------------------------------------------------------

fn outputs(model: &NtmModel, inputs: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, inputs).unwrap();
    fwd.outputs.iter().map(|&v| tape.value(v).clone()).collect()
}

fn import(dst: &mut ParamSet, src: &ParamSet, rename: impl Fn(&str) -> Option<String>) {
    let names: Vec<String> = dst.iter().map(|p| p.name.clone()).collect();
    for name in names {
        if let Some(t) = rename(&name).and_then(|n| src.by_name(&n).cloned()) {
            dst.set(&name, t).unwrap();
        }
    }
}

fn small(variant: Variant, a: f64, b: f64, seed: u64) -> NtmModel {
    let mut cfg = ModelConfig::new(variant, 9, 8);
    cfg.mem_slots = 8;
    cfg.mem_width = 4;
    cfg.controller_width = 12;
    cfg.mix_mode = MixMode::Fixed;
    cfg.mix_a = a;
    cfg.mix_b = b;
    cfg.seed = seed;
    let mut m = NtmModel::new(cfg).unwrap();
    randomize(m.params_mut(), seed, 0.5);
    m
}

#[test]
fn criterion_03_reduction_equivalences() {
    let mut pass = true;
    let mut details = Vec::new();
    for trial in 0..5u64 {
        let base = small(Variant::Ntm, 0.0, 0.0, 100 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let inputs = Tensor::new(vec![5, 9], (0..45).map(|_| f64::from(rng.gen::<bool>() as u8)).collect()).unwrap();
        let expected = outputs(&base, &inputs);

        let mut ntm1 = small(Variant::Ntm1, 0.0, 1.0, 300 + trial);
        import(ntm1.params_mut(), base.params(), |n| Some(n.to_string()));
        let ok1 = outputs(&ntm1, &inputs) == expected;

        // NTM2's upper block and head take the baseline's; the lower block keeps its own
        let mut ntm2 = small(Variant::Ntm2, 1.0, 0.0, 400 + trial);
        import(ntm2.params_mut(), base.params(), |n| {
            if n.contains(".b0") {
                None
            } else {
                Some(n.replace(".b1", ".b0"))
            }
        });
        let ok2 = outputs(&ntm2, &inputs) == expected;

        // hidden memory frozen: every read comes from the initial hidden block
        let frozen = small(Variant::Ntm1, 1.0, 0.0, 500 + trial);
        let mut tape = Tape::new();
        let fwd = frozen.forward(&mut tape, &inputs).unwrap();
        let init = tape.value(fwd.initial.blocks[1]).clone();
        let mut ok3 = true;
        for step in &fwd.steps {
            ok3 &= tape.value(step.state.blocks[1]) == &init;
            let w = tape.value(step.state.read_weights[0]);
            let r = tape.value(step.state.reads[0]);
            for j in 0..4 {
                let direct: f64 = (0..8).map(|i| w.data()[i] * init.at(i, j)).sum();
                ok3 &= (direct - r.data()[j]).abs() < 1e-15;
            }
        }
        pass &= ok1 && ok2 && ok3;
        if trial == 0 || !(ok1 && ok2 && ok3) {
            details.push(format!("trial {trial}: ntm1(0,1)={ok1} ntm2(1,0)={ok2} ntm1(1,0) frozen reads={ok3}"));
        }
    }
    report(3, "reduction equivalences", pass, format!("5 trials bit-exact; {}", details.join("; ")));
}

// 4 -------------------------------------------------------------------------

fn brute_write(mem: &Tensor, w: &[f64], e: &[f64], a: &[f64]) -> Vec<f64> {
    let (n, m) = (mem.rows(), mem.cols());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(mem.at(i, j) * (1.0 - w[i] * e[j]) + w[i] * a[j]);
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_04_write_and_mixing_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut write_err: f64 = 0.0;
    for _ in 0..200 {
        let (n, m) = (rng.gen_range(1..7), rng.gen_range(1..6));
        let mem = rand_tensor(&mut rng, &[n, m], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[n], 0.0, 1.0);
        let e = rand_tensor(&mut rng, &[m], 0.0, 1.0);
        let a = rand_tensor(&mut rng, &[m], -2.0, 2.0);
        let mut tape = Tape::new();
        let vars: Vec<_> = [&mem, &w, &e, &a].iter().map(|t| tape.leaf((*t).clone())).collect();
        let out = addressing::write_head_step(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
        write_err = write_err.max(max_diff(tape.value(out).data(), &brute_write(&mem, w.data(), e.data(), a.data())));
    }

    // mixing stage in isolation, then a full NTM2 step composed by hand
    let mut mix_err: f64 = 0.0;
    let mut step_err: f64 = 0.0;
    for trial in 0..20u64 {
        for variant in [Variant::Ntm1, Variant::Ntm2] {
            let (a, b) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let mut cfg = ModelConfig::new(variant, 3, 3);
            cfg.mem_slots = 4;
            cfg.mem_width = 3;
            cfg.controller_width = 5;
            cfg.mix_mode = MixMode::Fixed;
            cfg.mix_a = a;
            cfg.mix_b = b;
            let mut params = ParamSet::new();
            let mut prng = ChaCha8Rng::seed_from_u64(trial);
            let graph = MemoryGraph::new(&cfg, &mut params, &mut prng).unwrap();
            randomize(&mut params, 1000 + trial, 1.0);
            let own = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
            let up = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
            let mut tape = Tape::new();
            let p = params.bind(&mut tape);
            let (ov, uv) = (tape.leaf(own.clone()), tape.leaf(up.clone()));
            let mixed = graph.mix_blocks(&mut tape, &p, ov, uv).unwrap();
            let direct: Vec<f64> = own.data().iter().zip(up.data()).map(|(x, y)| a * x + b * y).collect();
            mix_err = mix_err.max(max_diff(tape.value(mixed).data(), &direct));

            let state = graph.init_state(&mut tape, &p);
            let c = tape.leaf(rand_tensor(&mut rng, &[5], -1.0, 1.0));
            let trace = graph.step(&mut tape, &p, &state, &[c]).unwrap();
            let mut written = Vec::new();
            for (h, spec) in graph.write_heads().iter().enumerate() {
                let iface = spec.head.interface(&mut tape, &p, c).unwrap();
                let op = WriteOp {
                    weighting: trace.state.write_weights[h],
                    erase: iface.erase.unwrap(),
                    add: iface.add.unwrap(),
                };
                let prev = tape.value(state.blocks[spec.block]).clone();
                written.push(brute_write(
                    &prev,
                    tape.value(op.weighting).data(),
                    tape.value(op.erase).data(),
                    tape.value(op.add).data(),
                ));
            }
            let prev_hidden = tape.value(state.blocks[1]).data().to_vec();
            let expected: Vec<f64> = match variant {
                // M_h(t) = a M_h(t-1) + b M_c(t)
                Variant::Ntm1 => prev_hidden.iter().zip(&written[0]).map(|(h, c)| a * h + b * c).collect(),
                // M_2(t) = a M~_2(t) + b M_1(t)
                _ => written[1].iter().zip(&written[0]).map(|(x, y)| a * x + b * y).collect(),
            };
            step_err = step_err.max(max_diff(tape.value(trace.state.blocks[0]).data(), &written[0]));
            step_err = step_err.max(max_diff(tape.value(trace.state.blocks[1]).data(), &expected));
        }
    }
    let pass = write_err <= 1e-12 && mix_err <= 1e-12 && step_err <= 1e-12;
    report(
        4,
        "erase/add and mixing oracles",
        pass,
        format!("write {write_err:.1e}, mixing {mix_err:.1e}, composed step {step_err:.1e}"),
    );
}

// 5 -------------------------------------------------------------------------

/// Re-derives a copy episode's targets from its inputs alone.
fn validate_copy(ep: &Episode, lo: usize, hi: usize, width: usize) -> Result<(), String> {
    let t_len = ep.steps();
    let in_w = ep.inputs.cols();
    if in_w != width + 1 || ep.targets.cols() != width {
        return Err("widths".into());
    }
    let delim: Vec<usize> = (0..t_len).filter(|&t| ep.inputs.at(t, width) == 1.0).collect();
    if delim.len() != 1 {
        return Err(format!("{} delimiters", delim.len()));
    }
    let n = delim[0];
    if !(lo..=hi).contains(&n) || t_len != 2 * n + 1 {
        return Err(format!("length {n} / {t_len} steps"));
    }
    for t in 0..t_len {
        let row = ep.inputs.row(t);
        if row.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err("non-binary input".into());
        }
        let expect_mask = if t > n { 1.0 } else { 0.0 };
        if ep.mask.data()[t] != expect_mask {
            return Err(format!("mask at {t}"));
        }
        let expected: Vec<f64> = if t > n { ep.inputs.row(t - n - 1)[..width].to_vec() } else { vec![0.0; width] };
        if ep.targets.row(t) != expected.as_slice() {
            return Err(format!("target at {t}"));
        }
        if t > n && row.iter().any(|&x| x != 0.0) {
            return Err(format!("input during answer at {t}"));
        }
    }
    Ok(())
}

/// Re-derives a recall episode's answer by locating the query among the items.
fn validate_recall(ep: &Episode, lo: usize, hi: usize, len: usize, width: usize) -> Result<(), String> {
    let t_len = ep.steps();
    if ep.inputs.cols() != width + 2 {
        return Err("widths".into());
    }
    let item_marks: Vec<usize> = (0..t_len).filter(|&t| ep.inputs.at(t, width) == 1.0).collect();
    let query_marks: Vec<usize> = (0..t_len).filter(|&t| ep.inputs.at(t, width + 1) == 1.0).collect();
    let n = item_marks.len();
    if !(lo..=hi).contains(&n) || query_marks.len() != 2 {
        return Err(format!("{n} items, {} query marks", query_marks.len()));
    }
    let item = |start: usize| -> Vec<f64> { (start..start + len).flat_map(|t| ep.inputs.row(t)[..width].to_vec()).collect() };
    let items: Vec<Vec<f64>> = item_marks.iter().map(|&t| item(t + 1)).collect();
    let query = item(query_marks[0] + 1);
    if query_marks[1] != query_marks[0] + len + 1 || t_len != query_marks[1] + 1 + len {
        return Err("layout".into());
    }
    let answer_start = query_marks[1] + 1;
    let answer: Vec<f64> = (answer_start..t_len).flat_map(|t| ep.targets.row(t).to_vec()).collect();
    // duplicated items are possible, so any occurrence of the query may be the one asked about
    let valid = (0..n.saturating_sub(1)).any(|i| items[i] == query && items[i + 1] == answer);
    if !valid {
        return Err("answer is not the successor of the query".into());
    }
    for t in 0..t_len {
        let scored = t >= answer_start;
        if ep.mask.data()[t] != if scored { 1.0 } else { 0.0 } {
            return Err(format!("mask at {t}"));
        }
        if !scored && ep.targets.row(t).iter().any(|&x| x != 0.0) {
            return Err(format!("target outside answer at {t}"));
        }
    }
    Ok(())
}

#[test]
fn criterion_05_task_oracles() {
    let mut failures = Vec::new();
    let (mut ones, mut bits) = (0usize, 0usize);
    let mut deterministic = true;
    for i in 0..10_000u64 {
        let seed = episode_seed(12345, i);
        let ep = gen_copy(seed, (1, 20), 8).unwrap();
        if let Err(e) = validate_copy(&ep, 1, 20, 8) {
            failures.push(format!("copy {seed}: {e}"));
        }
        let n = ep.meta.item_count;
        for t in 0..n {
            ones += ep.inputs.row(t)[..8].iter().filter(|&&x| x == 1.0).count();
            bits += 8;
        }
        let rc = gen_recall(seed, (2, 6), 3, 6).unwrap();
        if let Err(e) = validate_recall(&rc, 2, 6, 3, 6) {
            failures.push(format!("recall {seed}: {e}"));
        }
        if i % 100 == 0 {
            deterministic &= gen_copy(seed, (1, 20), 8).unwrap() == ep && gen_recall(seed, (2, 6), 3, 6).unwrap() == rc;
        }
    }
    let freq = ones as f64 / bits as f64;
    let pass = failures.is_empty() && deterministic && (0.47..=0.53).contains(&freq);
    report(
        5,
        "task oracles",
        pass,
        format!(
            "10000 copy + 10000 recall episodes, {} invalid {:?}, deterministic {deterministic}, copy bit frequency {freq:.4}",
            failures.len(),
            failures.first()
        ),
    );
}

// 6 -------------------------------------------------------------------------

#[test]
fn criterion_06_optimizer() {
    // two steps of the update on one scalar, written out by hand
    let cfg = TrainConfig::default();
    let mut params = ParamSet::new();
    let id = params.insert("x", Tensor::vector(vec![1.0]));
    let mut opt = RmsProp::new(&cfg, &params);
    opt.step(&mut params, &[vec![0.5]]).unwrap();
    opt.step(&mut params, &[vec![-0.2]]).unwrap();
    let ms1 = 0.05 * 0.25;
    let v1 = -1e-4 * 0.5 / (ms1 + 1e-8_f64).sqrt();
    let ms2 = 0.95 * ms1 + 0.05 * 0.04;
    let v2 = 0.9 * v1 + 1e-4 * 0.2 / (ms2 + 1e-8_f64).sqrt();
    let expected = 1.0 + v1 + v2;
    let trace_err = (params.get(id).data()[0] - expected).abs();

    // lr = 0 on a real model
    let mut exp = ExperimentConfig::new(Variant::Ntm2, TaskKind::Copy);
    exp.model.mem_slots = 8;
    exp.model.mem_width = 4;
    exp.model.controller_width = 10;
    exp.task.copy_max = 3;
    exp.train.lr = 0.0;
    let mut tr = Trainer::new(exp).unwrap();
    let before: Vec<Vec<u64>> = tr.model.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    for _ in 0..5 {
        tr.step().unwrap();
    }
    let after: Vec<Vec<u64>> = tr.model.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    let frozen = before == after;

    // clipping scales without turning
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst_cos: f64 = 1.0;
    let mut all_scaled = true;
    for _ in 0..100 {
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect()).collect();
        let mut c = g.clone();
        let norm = clip_global_norm(&mut c, 10.0);
        let flat: Vec<f64> = g.iter().flatten().copied().collect();
        let clipped: Vec<f64> = c.iter().flatten().copied().collect();
        let dot: f64 = flat.iter().zip(&clipped).map(|(a, b)| a * b).sum();
        let cn = clipped.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_cos = worst_cos.min(dot / (norm * cn));
        let s = cn / norm;
        all_scaled &= s > 0.0 && flat.iter().zip(&clipped).all(|(a, b)| (a * s - b).abs() <= 1e-12 * a.abs().max(1.0));
        all_scaled &= cn <= 10.0 + 1e-12;
    }
    let pass = trace_err <= 1e-12 && frozen && all_scaled && worst_cos > 1.0 - 1e-12;
    report(
        6,
        "optimizer correctness",
        pass,
        format!("two-step trace err {trace_err:.1e}; lr=0 bit-identical {frozen}; clip min cosine {worst_cos:.15}"),
    );
}

// 7 and 8 -------------------------------------------------------------------

struct DeskRun {
    tail_median: f64,
    convergence: Option<u64>,
    outliers: usize,
}

fn desk_config(variant: Variant, heads: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(variant, TaskKind::Copy);
    cfg.model.mem_slots = 32;
    cfg.model.mem_width = 10;
    cfg.model.controller_width = 64;
    cfg.model.read_heads = heads;
    cfg.model.write_heads = heads;
    cfg.model.seed = seed;
    cfg.task.copy_min = 1;
    cfg.task.copy_max = 5;
    cfg.train.clip = Some(10.0);
    cfg.train.max_iters = 10_000;
    cfg
}

/// Five seeds each of NTM1, NTM2 and the two-head baseline, shared by
/// criteria 7 and 8.
fn desk_runs() -> &'static Vec<(String, Vec<DeskRun>)> {
    static RUNS: OnceLock<Vec<(String, Vec<DeskRun>)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        [("ntm1", Variant::Ntm1, 1), ("ntm2", Variant::Ntm2, 1), ("ntm-2w2r", Variant::Ntm, 2)]
            .into_iter()
            .map(|(label, v, heads)| {
                let runs = (1..=5)
                    .map(|seed| {
                        let res = trainer::run_experiment(&desk_config(v, heads, seed), |_| Ok(())).unwrap();
                        let tail: Vec<f64> = res
                            .sampled
                            .iter()
                            .filter(|r| (9000..=10_000).contains(&r.iteration))
                            .map(|r| r.loss_per_bit)
                            .collect();
                        DeskRun {
                            tail_median: median(&tail),
                            convergence: res.stats.convergence_iteration,
                            outliers: res.stats.outlier_count,
                        }
                    })
                    .collect();
                (label.to_string(), runs)
            })
            .collect()
    })
}

fn describe(runs: &[DeskRun]) -> String {
    runs.iter()
        .enumerate()
        .map(|(i, r)| {
            let conv = r.convergence.map_or("none".to_string(), |c| c.to_string());
            format!("s{} med {:.4} conv {conv} out {}", i + 1, r.tail_median, r.outliers)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[test]
fn criterion_07_desk_scale_convergence() {
    let runs = desk_runs();
    let mut pass = true;
    let mut details = Vec::new();
    for (label, rs) in runs.iter().take(2) {
        let good = rs.iter().filter(|r| r.tail_median < 0.05).count();
        pass &= good >= 3;
        details.push(format!("{label} {good}/5 below 0.05 [{}]", describe(rs)));
    }
    details.push(format!("reference {} [{}]", runs[2].0, describe(&runs[2].1)));
    report(7, "desk-scale convergence trend", pass, details.join("; "));
}

#[test]
fn criterion_08_outlier_comparison() {
    let runs = desk_runs();
    let baseline = &runs[2].1;
    let mut pass = true;
    let mut details = Vec::new();
    for (label, rs) in runs.iter().take(2) {
        let wins = rs.iter().zip(baseline).filter(|(r, b)| r.outliers <= b.outliers).count();
        pass &= wins >= 3;
        let counts: Vec<String> = rs.iter().zip(baseline).map(|(r, b)| format!("{}<={}", r.outliers, b.outliers)).collect();
        details.push(format!("{label} {wins}/5 seeds [{}]", counts.join(" ")));
        // informational: the same comparison if a run that never converged counted zero
        let lenient = |r: &DeskRun| if r.convergence.is_some() { r.outliers } else { 0 };
        let alt = rs.iter().zip(baseline).filter(|(r, b)| lenient(r) <= lenient(b)).count();
        details.push(format!("{label} with unconverged runs counted as zero: {alt}/5"));
    }
    report(8, "comparative outliers", pass, details.join("; "));
}

// 9 -------------------------------------------------------------------------

#[test]
fn criterion_09_full_size_protocol() {
    let mut cfg = ExperimentConfig::new(Variant::Ntm2, TaskKind::Copy);
    cfg.train.max_iters = 100;
    assert_eq!((cfg.model.mem_slots, cfg.model.mem_width), (128, 20));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let res = trainer::run_experiment(&cfg, |_| Ok(())).unwrap();
    write_csv(std::fs::File::create(&path).unwrap(), &res.sampled).unwrap();
    let back = read_csv(&path).unwrap();
    let iters: Vec<u64> = back.iter().map(|r| r.iteration).collect();
    let finite = res.records.iter().all(|r| r.loss_sum.is_finite() && r.grad_norm.is_finite())
        && res.trainer.model.params().iter().all(|p| p.value.is_finite());
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap_or("").to_string();
    let pass = res.records.len() == 100 && finite && iters == [25, 50, 75, 100] && back == res.sampled
        && header == "iteration,loss_sum,loss_per_item,loss_per_bit,outlier,grad_norm";
    report(
        9,
        "full-size protocol",
        pass,
        format!(
            "128x20 memory, {} iterations, finite {finite}, sampled {iters:?}, header {header}",
            res.records.len()
        ),
    );
}

// 10 ------------------------------------------------------------------------

#[test]
fn criterion_10_persistence() {
    let mut cfg = ExperimentConfig::new(Variant::Ntm1, TaskKind::Copy);
    cfg.model.mem_slots = 16;
    cfg.model.mem_width = 6;
    cfg.model.controller_width = 20;
    cfg.task.copy_max = 4;
    cfg.model.seed = 9;

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    let mut first = Vec::new();
    for _ in 0..10 {
        first.push(straight.step().unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("checkpoint.bin");
    straight.checkpoint().save(&ck_path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&ck_path).unwrap()).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..10 {
        a.push(straight.step().unwrap());
        b.push(resumed.step().unwrap());
    }
    let bits = |t: &Trainer| -> Vec<u64> { t.model.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
    let record_bits = |rs: &[trainer::TrainRecord]| -> Vec<u64> { rs.iter().flat_map(|r| [r.loss_sum.to_bits(), r.grad_norm.to_bits()]).collect() };
    let resume_exact = bits(&straight) == bits(&resumed) && record_bits(&a) == record_bits(&b) && straight.opt == resumed.opt;

    // run statistics recomputed from the CSV
    let mut run_cfg = cfg.clone();
    run_cfg.train.max_iters = 3000;
    run_cfg.train.sample_every = 5;
    run_cfg.train.convergence_threshold = 0.45;
    run_cfg.train.outlier_threshold = 0.6;
    let res = trainer::run_experiment(&run_cfg, |_| Ok(())).unwrap();
    let csv_path = dir.path().join("records.csv");
    write_csv(std::fs::File::create(&csv_path).unwrap(), &res.sampled).unwrap();
    let back = read_csv(&csv_path).unwrap();
    let recomputed = summarize(&back, &run_cfg.train);
    let stats_exact = recomputed == res.stats
        && back.iter().zip(&res.sampled).all(|(x, y)| x.loss_per_bit.to_bits() == y.loss_per_bit.to_bits());
    let pass = resume_exact && stats_exact;
    report(
        10,
        "persistence",
        pass,
        format!(
            "resume bit-exact {resume_exact}; csv stats {:?} conv {:?} outliers {} match {stats_exact}",
            back.len(),
            res.stats.convergence_iteration,
            res.stats.outlier_count
        ),
    );
}
