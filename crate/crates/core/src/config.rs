//! Flat key-value experiment configuration.
//!
//! One `key = value` per line, `#` comments. The key set is the union of the
//! model, task and trainer keys listed in [`KEYS`].

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory_graph::{ModelConfig, Variant};
use crate::tasks::{TaskConfig, TaskKind};
use crate::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "variant",
    "task",
    "seed",
    "mem_slots",
    "mem_width",
    "read_heads",
    "write_heads",
    "controller_width",
    "layers",
    "mix_mode",
    "mix_a",
    "mix_b",
    "shift_width",
    "share_head_params",
    "copy_min",
    "copy_max",
    "copy_width",
    "recall_min",
    "recall_max",
    "recall_item_len",
    "recall_width",
    "lr",
    "momentum",
    "decay",
    "epsilon",
    "clip",
    "max_iters",
    "sample_every",
    "outlier_threshold",
    "convergence_threshold",
    "convergence_window",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: cannot parse {value:?} as a boolean"))),
    }
}

impl ExperimentConfig {
    pub fn new(variant: Variant, task: TaskKind) -> Self {
        let task = TaskConfig::new(task);
        ExperimentConfig {
            model: ModelConfig::new(variant, task.input_width(), task.output_width()),
            task,
            train: TrainConfig::default(),
        }
    }

    /// Defaults overridden by `pairs` in order. `variant` and `task` are read
    /// first since other defaults depend on them; `layers` keeps its
    /// per-variant default unless set.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let lookup = |key: &str| pairs.iter().rev().find(|(k, _)| k.as_ref() == key).map(|(_, v)| v.as_ref());
        let variant = lookup("variant").map(|v| v.parse()).transpose()?.unwrap_or(Variant::Ntm);
        let task = lookup("task").map(|v| v.parse()).transpose()?.unwrap_or(TaskKind::Copy);
        let mut cfg = ExperimentConfig::new(variant, task);
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the flat text format.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            let key = k.trim();
            if !KEYS.contains(&key) {
                return Err(Error::config(format!("{key}: unknown configuration key (line {})", no + 1)));
            }
            out.push((key.to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.task;
        let tr = &mut self.train;
        match key {
            "variant" => {
                let v: Variant = value.trim().parse()?;
                if v != m.variant {
                    let layers_default = m.layers == ModelConfig::new(m.variant, 1, 1).layers;
                    m.variant = v;
                    if layers_default {
                        m.layers = ModelConfig::new(v, 1, 1).layers;
                    }
                }
            }
            "task" => {
                t.task = value.trim().parse()?;
            }
            "seed" => m.seed = parse(key, value)?,
            "mem_slots" => m.mem_slots = parse(key, value)?,
            "mem_width" => m.mem_width = parse(key, value)?,
            "read_heads" => m.read_heads = parse(key, value)?,
            "write_heads" => m.write_heads = parse(key, value)?,
            "controller_width" => m.controller_width = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "mix_mode" => m.mix_mode = value.trim().parse()?,
            "mix_a" => m.mix_a = parse(key, value)?,
            "mix_b" => m.mix_b = parse(key, value)?,
            "shift_width" => m.shift_width = parse(key, value)?,
            "share_head_params" => m.share_head_params = parse_bool(key, value)?,
            "copy_min" => t.copy_min = parse(key, value)?,
            "copy_max" => t.copy_max = parse(key, value)?,
            "copy_width" => t.copy_width = parse(key, value)?,
            "recall_min" => t.recall_min = parse(key, value)?,
            "recall_max" => t.recall_max = parse(key, value)?,
            "recall_item_len" => t.recall_item_len = parse(key, value)?,
            "recall_width" => t.recall_width = parse(key, value)?,
            "lr" => tr.lr = parse(key, value)?,
            "momentum" => tr.momentum = parse(key, value)?,
            "decay" => tr.decay = parse(key, value)?,
            "epsilon" => tr.epsilon = parse(key, value)?,
            "clip" => {
                tr.clip = match value.trim() {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "max_iters" => tr.max_iters = parse(key, value)?,
            "sample_every" => tr.sample_every = parse(key, value)?,
            "outlier_threshold" => tr.outlier_threshold = parse(key, value)?,
            "convergence_threshold" => tr.convergence_threshold = parse(key, value)?,
            "convergence_window" => tr.convergence_window = parse(key, value)?,
            _ => return Err(Error::config(format!("{key}: unknown configuration key"))),
        }
        m.input_width = t.input_width();
        m.output_width = t.output_width();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its resolved value, in [`KEYS`] order. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (m, t, tr) = (&self.model, &self.task, &self.train);
        let values: Vec<String> = vec![
            m.variant.to_string(),
            t.task.to_string(),
            m.seed.to_string(),
            m.mem_slots.to_string(),
            m.mem_width.to_string(),
            m.read_heads.to_string(),
            m.write_heads.to_string(),
            m.controller_width.to_string(),
            m.layers.to_string(),
            m.mix_mode.to_string(),
            m.mix_a.to_string(),
            m.mix_b.to_string(),
            m.shift_width.to_string(),
            m.share_head_params.to_string(),
            t.copy_min.to_string(),
            t.copy_max.to_string(),
            t.copy_width.to_string(),
            t.recall_min.to_string(),
            t.recall_max.to_string(),
            t.recall_item_len.to_string(),
            t.recall_width.to_string(),
            tr.lr.to_string(),
            tr.momentum.to_string(),
            tr.decay.to_string(),
            tr.epsilon.to_string(),
            tr.clip.map_or_else(|| "none".to_string(), |c| c.to_string()),
            tr.max_iters.to_string(),
            tr.sample_every.to_string(),
            tr.outlier_threshold.to_string(),
            tr.convergence_threshold.to_string(),
            tr.convergence_window.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
