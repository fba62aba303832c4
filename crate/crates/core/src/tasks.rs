//! Seeded episode generators for the copy and associative-recall tasks.
//!
//! Content bits live in their own channels; delimiters get extra channels at
//! the end of each input row. Targets are zero except on answer steps, which
//! are exactly the steps where the mask is 1.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Recall,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "recall",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(TaskKind::Copy),
            "recall" => Ok(TaskKind::Recall),
            _ => Err(Error::config(format!("task: unknown value {s:?} (expected copy or recall)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub copy_min: usize,
    pub copy_max: usize,
    pub copy_width: usize,
    pub recall_min: usize,
    pub recall_max: usize,
    /// Rows per recall item.
    pub recall_item_len: usize,
    pub recall_width: usize,
}

impl TaskConfig {
    pub fn new(task: TaskKind) -> Self {
        TaskConfig {
            task,
            copy_min: 1,
            copy_max: 20,
            copy_width: 8,
            recall_min: 2,
            recall_max: 6,
            recall_item_len: 3,
            recall_width: 6,
        }
    }

    pub fn item_width(&self) -> usize {
        match self.task {
            TaskKind::Copy => self.copy_width,
            TaskKind::Recall => self.recall_width,
        }
    }

    /// Content channels plus delimiter channels.
    pub fn input_width(&self) -> usize {
        match self.task {
            TaskKind::Copy => self.copy_width + 1,
            TaskKind::Recall => self.recall_width + 2,
        }
    }

    pub fn output_width(&self) -> usize {
        self.item_width()
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::Copy => check_copy(self.copy_min, self.copy_max, self.copy_width),
            TaskKind::Recall => check_recall(self.recall_min, self.recall_max, self.recall_item_len, self.recall_width),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Episode> {
        match self.task {
            TaskKind::Copy => gen_copy(seed, (self.copy_min, self.copy_max), self.copy_width),
            TaskKind::Recall => gen_recall(seed, (self.recall_min, self.recall_max), self.recall_item_len, self.recall_width),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMeta {
    pub task: TaskKind,
    pub seed: u64,
    /// Items presented in the input.
    pub item_count: usize,
    pub item_width: usize,
    /// Rows per item (1 for copy).
    pub item_len: usize,
    /// Items scored on answer steps.
    pub answer_items: usize,
    /// Recall only: zero-based index of the queried item.
    pub query: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[T, input_width]`.
    pub inputs: Tensor,
    /// `[T, item_width]`.
    pub targets: Tensor,
    /// `[T]`, 1 on answer steps.
    pub mask: Tensor,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.inputs.rows()
    }

    /// Number of scored target bits.
    pub fn masked_bits(&self) -> usize {
        let scored = self.mask.data().iter().filter(|&&m| m != 0.0).count();
        scored * self.targets.cols()
    }

    /// Plain-text grid: one row per timestep with input channels, target
    /// channels and the mask bit separated by `|`.
    pub fn dump(&self, index: usize) -> String {
        let m = &self.meta;
        let mut out = format!(
            "# episode {index} task={} seed={} items={} item_width={} item_len={} steps={}\n",
            m.task,
            m.seed,
            m.item_count,
            m.item_width,
            m.item_len,
            self.steps()
        );
        let bits = |xs: &[f64]| xs.iter().map(|&x| if x != 0.0 { '1' } else { '0' }).collect::<String>();
        for t in 0..self.steps() {
            let _ = writeln!(
                out,
                "{} | {} | {}",
                bits(self.inputs.row(t)),
                bits(self.targets.row(t)),
                bits(&self.mask.data()[t..t + 1])
            );
        }
        out
    }
}

/// Per-iteration episode seed derived from a run seed (SplitMix64 mixing).
pub fn episode_seed(run_seed: u64, iteration: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(iteration)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_copy(lo: usize, hi: usize, width: usize) -> Result<()> {
    if lo < 1 || lo > hi {
        return Err(Error::config(format!("copy_min/copy_max: need 1 <= min <= max, got {lo}..{hi}")));
    }
    if width == 0 {
        return Err(Error::config("copy_width: must be at least 1"));
    }
    Ok(())
}

fn check_recall(lo: usize, hi: usize, item_len: usize, width: usize) -> Result<()> {
    if lo < 2 || lo > hi {
        return Err(Error::config(format!("recall_min/recall_max: need 2 <= min <= max, got {lo}..{hi}")));
    }
    if item_len == 0 || width == 0 {
        return Err(Error::config("recall_item_len/recall_width: must be at least 1"));
    }
    Ok(())
}

fn random_bits(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
}

/// Items, one delimiter step, then one zero-input answer step per item.
pub fn gen_copy(seed: u64, (lo, hi): (usize, usize), item_width: usize) -> Result<Episode> {
    check_copy(lo, hi, item_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(lo..=hi);
    let items: Vec<Vec<f64>> = (0..n).map(|_| random_bits(&mut rng, item_width)).collect();

    let steps = 2 * n + 1;
    let in_w = item_width + 1;
    let mut inputs = vec![0.0; steps * in_w];
    let mut targets = vec![0.0; steps * item_width];
    let mut mask = vec![0.0; steps];
    for (t, item) in items.iter().enumerate() {
        inputs[t * in_w..t * in_w + item_width].copy_from_slice(item);
        let a = n + 1 + t;
        targets[a * item_width..(a + 1) * item_width].copy_from_slice(item);
        mask[a] = 1.0;
    }
    inputs[n * in_w + item_width] = 1.0;

    Ok(Episode {
        inputs: Tensor::from_parts(vec![steps, in_w], inputs),
        targets: Tensor::from_parts(vec![steps, item_width], targets),
        mask: Tensor::from_parts(vec![steps], mask),
        meta: EpisodeMeta {
            task: TaskKind::Copy,
            seed,
            item_count: n,
            item_width,
            item_len: 1,
            answer_items: n,
            query: None,
        },
    })
}

/// Each item is preceded by an item delimiter; the query item is bracketed
/// by query delimiters and the answer is the item that followed it.
pub fn gen_recall(seed: u64, (lo, hi): (usize, usize), item_len: usize, item_width: usize) -> Result<Episode> {
    check_recall(lo, hi, item_len, item_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(lo..=hi);
    let items: Vec<Vec<f64>> = (0..n).map(|_| random_bits(&mut rng, item_len * item_width)).collect();
    let query = rng.gen_range(0..n - 1);

    let in_w = item_width + 2;
    let steps = n * (item_len + 1) + item_len + 2 + item_len;
    let mut inputs = vec![0.0; steps * in_w];
    let mut targets = vec![0.0; steps * item_width];
    let mut mask = vec![0.0; steps];

    let mut t = 0;
    let put_item = |inputs: &mut [f64], t: &mut usize, item: &[f64]| {
        for row in item.chunks(item_width) {
            inputs[*t * in_w..*t * in_w + item_width].copy_from_slice(row);
            *t += 1;
        }
    };
    for item in &items {
        inputs[t * in_w + item_width] = 1.0;
        t += 1;
        put_item(&mut inputs, &mut t, item);
    }
    inputs[t * in_w + item_width + 1] = 1.0;
    t += 1;
    put_item(&mut inputs, &mut t, &items[query]);
    inputs[t * in_w + item_width + 1] = 1.0;
    t += 1;
    for (r, row) in items[query + 1].chunks(item_width).enumerate() {
        targets[(t + r) * item_width..(t + r + 1) * item_width].copy_from_slice(row);
        mask[t + r] = 1.0;
    }
    debug_assert_eq!(t + item_len, steps);

    Ok(Episode {
        inputs: Tensor::from_parts(vec![steps, in_w], inputs),
        targets: Tensor::from_parts(vec![steps, item_width], targets),
        mask: Tensor::from_parts(vec![steps], mask),
        meta: EpisodeMeta {
            task: TaskKind::Recall,
            seed,
            item_count: n,
            item_width,
            item_len,
            answer_items: 1,
            query: Some(query),
        },
    })
}
