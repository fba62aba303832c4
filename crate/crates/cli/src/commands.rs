use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use ntm_core::config::{ExperimentConfig, KEYS};
use ntm_core::gradcheck;
use ntm_core::memory_graph::Checkpoint;
use ntm_core::tasks::{episode_seed, TaskKind};
use ntm_core::tensor::OpKind;
use ntm_core::trainer::{self, median, read_csv};
use ntm_core::Variant;

use crate::{ConfigFlags, Failure, GradcheckArgs, InspectArgs, PlotdataArgs, TaskdumpArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

/// Where a resolved configuration value came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "config file",
            Source::Flag => "command line",
        }
    }
}

fn flag_pairs(flags: &ConfigFlags) -> Result<Vec<(String, String)>, Failure> {
    let named = [
        ("variant", &flags.variant),
        ("task", &flags.task),
        ("mem_slots", &flags.mem_slots),
        ("mem_width", &flags.mem_width),
        ("read_heads", &flags.read_heads),
        ("write_heads", &flags.write_heads),
        ("controller_width", &flags.controller_width),
        ("layers", &flags.layers),
        ("mix_mode", &flags.mix_mode),
        ("mix_a", &flags.mix_a),
        ("mix_b", &flags.mix_b),
        ("lr", &flags.lr),
        ("momentum", &flags.momentum),
        ("decay", &flags.decay),
        ("clip", &flags.clip),
        ("max_iters", &flags.max_iters),
        ("sample_every", &flags.sample_every),
    ];
    let mut pairs: Vec<(String, String)> = named
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
    for kv in &flags.extra {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects key=value, got {kv:?}")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Failure::Config(format!("{k}: unknown configuration key")));
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Defaults, then the config file, then flags.
fn resolve(flags: &ConfigFlags, file: Option<&Path>) -> Result<(ExperimentConfig, Vec<Source>), Failure> {
    let file_pairs = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("config file {}: {e}", path.display())))?;
            ExperimentConfig::parse_text(&text)?
        }
        None => Vec::new(),
    };
    let cli_pairs = flag_pairs(flags)?;
    let all: Vec<(String, String)> = file_pairs.iter().chain(&cli_pairs).cloned().collect();
    let cfg = ExperimentConfig::from_pairs(&all)?;
    let sources = KEYS
        .iter()
        .map(|k| {
            if cli_pairs.iter().any(|(c, _)| c == k) {
                Source::Flag
            } else if file_pairs.iter().any(|(c, _)| c == k) {
                Source::File
            } else {
                Source::Default
            }
        })
        .collect();
    Ok((cfg, sources))
}

/// `N` means seeds 1..=N; anything with a comma is an explicit list.
fn parse_seeds(spec: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Config(format!("seeds: cannot parse {spec:?}"));
    let seeds: Vec<u64> = if spec.contains(',') {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    } else {
        let n: u64 = spec.trim().parse().map_err(|_| bad())?;
        (1..=n).collect()
    };
    if seeds.is_empty() {
        return Err(Failure::Config("seeds: need at least one seed".into()));
    }
    Ok(seeds)
}

fn manifest_text(cfg: &ExperimentConfig, sources: &[Source], seeds: &[u64], dir: &Path) -> String {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let seed_list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let mut s = String::new();
    let _ = writeln!(s, "# build: ntm {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# created_unix: {created}");
    let _ = writeln!(s, "# output_dir: {}", dir.display());
    let _ = writeln!(s, "# seeds: {}", seed_list.join(","));
    let _ = writeln!(s, "# config_hash: {}", cfg.hash());
    for ((k, v), src) in cfg.to_pairs().into_iter().zip(sources) {
        let src = if k == "seed" { "seed list" } else { src.label() };
        let _ = writeln!(s, "{k} = {v}  # {src}");
    }
    s
}

fn summary_text(cfg: &ExperimentConfig, res: &trainer::RunResult) -> String {
    let st = &res.stats;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    format!(
        "seed = {}\nconfig_hash = {}\niterations = {}\nconvergence_iteration = {}\noutlier_count = {}\nfinal_loss_per_bit = {}\n",
        cfg.model.seed,
        cfg.hash(),
        res.trainer.iteration,
        opt(st.convergence_iteration.map(|c| c.to_string())),
        st.outlier_count,
        opt(st.final_loss_per_bit.map(|l| l.to_string())),
    )
}

fn train_seed(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    let mut writer = csv::Writer::from_path(dir.join("records.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
    let seed = cfg.model.seed;
    let every = (cfg.train.max_iters / 10).max(1);
    let res = trainer::run_experiment(cfg, |rec| {
        writer.serialize(rec)?;
        writer.flush()?;
        if rec.iteration % every < cfg.train.sample_every {
            info!("seed {seed}: iteration {} loss/bit {:.4}", rec.iteration, rec.loss_per_bit);
        }
        Ok(())
    })
    .map_err(|e| Failure::Runtime(format!("seed {seed}: {e} (partial records kept in {})", dir.display())))?;
    res.trainer.checkpoint().save(&dir.join("checkpoint.bin"))?;
    fs::write(dir.join("summary.txt"), summary_text(cfg, &res))?;
    info!(
        "seed {seed}: converged at {:?}, {} outliers",
        res.stats.convergence_iteration, res.stats.outlier_count
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> CmdResult {
    let (base, sources) = resolve(&args.config, args.config_file.as_deref())?;
    let seeds = parse_seeds(&args.seeds)?;
    if args.jobs == 0 {
        return Err(Failure::Config("jobs: must be at least 1".into()));
    }
    let mut runs = Vec::new();
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.model.seed = seed;
        let dir = args.out.join(format!("{}-{}-seed{seed}", cfg.model.variant, cfg.task.task));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("manifest.txt"), manifest_text(&cfg, &sources, &seeds, &dir))?;
        runs.push((cfg, dir));
    }

    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..args.jobs.min(runs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cfg, dir)) = runs.get(i) else { break };
                if let Err(f) = train_seed(cfg, dir) {
                    failures.lock().unwrap().push(f);
                }
            });
        }
    });
    let failures = failures.into_inner().unwrap();
    match failures.into_iter().next() {
        Some(f) => Err(f),
        None => {
            println!("{} run(s) written under {}", runs.len(), args.out.display());
            Ok(())
        }
    }
}

pub fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let fault = match &args.inject_fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Failure::Config(format!("inject-fault: unknown op {name:?}")))?),
        None => None,
    };
    let setups = if args.all {
        gradcheck::standard_setups()
    } else {
        let variant: Variant = args.variant.parse()?;
        let mut cfg = gradcheck::tiny_config(variant, args.read_heads, args.write_heads);
        if let Some(l) = args.layers {
            cfg.model.layers = l;
        }
        cfg.validate()?;
        vec![(args.variant.clone(), cfg)]
    };
    let mut breaches = Vec::new();
    for (label, cfg) in &setups {
        let report = gradcheck::check_config(cfg, fault)?;
        println!("{label}: max relative error {:.3e}", report.max_rel());
        for g in &report.groups {
            println!("  {:<36} {:.3e}", g.name, g.max_rel);
        }
        if !report.passed(args.tol) {
            for g in report.worst(5).into_iter().filter(|g| g.max_rel >= args.tol) {
                breaches.push(format!(
                    "{label} {}[{}]: rel {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    g.name, g.worst_index, g.max_rel, g.analytic, g.numeric
                ));
            }
        }
    }
    if breaches.is_empty() {
        println!("all groups below {:e}", args.tol);
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed:\n  {}", breaches.join("\n  "))))
    }
}

pub fn taskdump(args: TaskdumpArgs) -> CmdResult {
    let task: TaskKind = args.task.parse()?;
    let mut cfg = ExperimentConfig::new(Variant::Ntm, task);
    let overrides = [
        ("copy_min", &args.copy_min),
        ("copy_max", &args.copy_max),
        ("copy_width", &args.copy_width),
        ("recall_min", &args.recall_min),
        ("recall_max", &args.recall_max),
        ("recall_item_len", &args.recall_item_len),
        ("recall_width", &args.recall_width),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.task.validate()?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for i in 0..args.count {
        let ep = cfg.task.generate(episode_seed(args.seed, i))?;
        out.write_all(ep.dump(i as usize).as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn inspect(args: InspectArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.checkpoint)?;
    for (k, v) in &ck.meta {
        println!("{k} = {v}");
    }
    let (mut params, mut entries) = (0, 0);
    for (name, t) in &ck.tensors {
        let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("{name:<40} {:?} norm {norm:.6}", t.shape());
        if !name.starts_with("opt.") {
            params += 1;
            entries += t.len();
        }
    }
    println!("{params} parameter tensors, {entries} values");
    Ok(())
}

pub fn plotdata(args: PlotdataArgs) -> CmdResult {
    let pick: fn(&trainer::TrainRecord) -> f64 = match args.column.as_str() {
        "loss_per_bit" => |r| r.loss_per_bit,
        "loss_per_item" => |r| r.loss_per_item,
        "loss_sum" => |r| r.loss_sum,
        "grad_norm" => |r| r.grad_norm,
        other => return Err(Failure::Config(format!("column: unknown {other:?}"))),
    };
    let mut series: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for run in &args.runs {
        let path: PathBuf = if run.is_dir() { run.join("records.csv") } else { run.clone() };
        for rec in read_csv(&path)? {
            series.entry(rec.iteration).or_default().push(pick(&rec));
        }
    }
    let mut text = String::from("iteration,median,min,max,runs\n");
    for (it, vals) in &series {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(text, "{it},{},{lo},{hi},{}", median(vals), vals.len());
    }
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
