//! Synthetic tasks: a bracket-grammar acceptability task and a segment
//! overlap similarity task, plus the plain-text dataset format and batching.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::TokenBatch;

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const OPEN_ROUND: usize = 2;
pub const CLOSE_ROUND: usize = 3;
pub const OPEN_SQUARE: usize = 4;
pub const CLOSE_SQUARE: usize = 5;
/// First token id that carries no grammatical role.
pub const FIRST_FILLER: usize = 6;
/// Deepest nesting a well-formed sequence may reach.
pub const MAX_DEPTH: usize = 3;

const TRAIN_STREAM: u64 = 0;
const DEV_STREAM: u64 = 1;
const SUBSAMPLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Classification => "classification",
            Self::Regression => "regression",
        }
    }

    /// Width of the prediction head.
    pub fn n_outputs(&self) -> usize {
        match self {
            Self::Classification => 2,
            Self::Regression => 1,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Self::Classification => "mcc",
            Self::Regression => "pearson",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Self::Classification),
            "regression" => Ok(Self::Regression),
            _ => Err(invalid(format!("unknown task kind {s:?}"))),
        }
    }
}

/// Named task presets selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    ColaLike,
    StsbLike,
}

impl TaskName {
    pub const ALL: [TaskName; 2] = [TaskName::ColaLike, TaskName::StsbLike];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ColaLike => "cola-like",
            Self::StsbLike => "stsb-like",
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Self::ColaLike => TaskKind::Classification,
            Self::StsbLike => TaskKind::Regression,
        }
    }

    pub fn spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: self.kind(),
            vocab_size: 32,
            seq_len: 16,
            train_size: 4096,
            dev_size: 256,
            seed,
            data_fraction: 1.0,
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cola-like" => Ok(Self::ColaLike),
            "stsb-like" => Ok(Self::StsbLike),
            _ => Err(invalid(format!("unknown task {s:?}; expected cola-like|stsb-like"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub seed: u64,
    /// Fraction of the training split kept, in (0, 1].
    pub data_fraction: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(invalid(format!("data_fraction {} outside (0, 1]", self.data_fraction)));
        }
        if self.vocab_size <= FIRST_FILLER + 2 {
            return Err(invalid(format!("vocab_size {} too small", self.vocab_size)));
        }
        let min_len = match self.kind {
            TaskKind::Classification => 2 * MAX_DEPTH + 2,
            TaskKind::Regression => 8,
        };
        if self.seq_len < min_len {
            return Err(invalid(format!("seq_len {} below minimum {min_len}", self.seq_len)));
        }
        if self.train_size == 0 || self.dev_size == 0 {
            return Err(invalid("train and dev sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Class id (as a float) or a similarity score in [0, 1].
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub dev: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Tokens and labels of the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<f64>)> {
        let rows = indices.iter().map(|&i| self.examples[i].tokens.as_slice());
        let tokens = TokenBatch::from_rows(rows)?;
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((tokens, labels))
    }

    /// The whole split as one batch.
    pub fn all(&self) -> Result<(TokenBatch, Vec<f64>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "kind,vocab,seq_len,count")?;
        writeln!(
            out,
            "{},{},{},{}",
            self.kind.as_str(),
            self.vocab_size,
            self.seq_len,
            self.len()
        )?;
        for e in &self.examples {
            let toks: Vec<String> = e.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(out, "{}\t{}", toks.join(","), e.label)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("dataset ends before {what}")))
        };
        if next("header")?.trim() != "kind,vocab,seq_len,count" {
            return Err(Error::Format("dataset header must be kind,vocab,seq_len,count".into()));
        }
        let meta = next("metadata")?;
        let fields: Vec<&str> = meta.trim().split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("bad dataset metadata {meta:?}")));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let kind = fields[0].parse::<TaskKind>()?;
        let (vocab_size, seq_len, count) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let mut examples = Vec::with_capacity(count);
        for i in 0..count {
            let line = next(&format!("example {i}"))?;
            let (toks, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("example {i}: missing tab")))?;
            let tokens = toks.split(',').map(num).collect::<Result<Vec<_>>>()?;
            if tokens.len() != seq_len || tokens.iter().any(|&t| t >= vocab_size) {
                return Err(Error::Format(format!("example {i}: bad token row")));
            }
            let label = label
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("example {i}: bad label {label:?}")))?;
            examples.push(Example { tokens, label });
        }
        Ok(Self { kind, vocab_size, seq_len, examples })
    }
}

/// Label rule of the acceptability task: round and square brackets pair up
/// properly, nesting never exceeds [`MAX_DEPTH`], other tokens are ignored.
pub fn is_well_formed(tokens: &[usize]) -> bool {
    let mut stack = Vec::new();
    for &t in tokens {
        match t {
            OPEN_ROUND | OPEN_SQUARE => {
                stack.push(t);
                if stack.len() > MAX_DEPTH {
                    return false;
                }
            }
            CLOSE_ROUND | CLOSE_SQUARE => {
                let want = if t == CLOSE_ROUND { OPEN_ROUND } else { OPEN_SQUARE };
                if stack.pop() != Some(want) {
                    return false;
                }
            }
            _ => {}
        }
    }
    stack.is_empty()
}

fn balanced_body(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    let max_pairs = (len / 2).min(5);
    let pairs = rng.gen_range(2.min(max_pairs)..=max_pairs);
    let mut brackets = Vec::with_capacity(2 * pairs);
    let mut stack = Vec::new();
    let mut opens_left = pairs;
    while opens_left > 0 || !stack.is_empty() {
        let can_open = opens_left > 0 && stack.len() < MAX_DEPTH;
        if can_open && (stack.is_empty() || rng.gen_bool(0.5)) {
            let open = if rng.gen_bool(0.5) { OPEN_ROUND } else { OPEN_SQUARE };
            stack.push(open);
            brackets.push(open);
            opens_left -= 1;
        } else {
            let open = stack.pop().expect("closing with an empty stack");
            brackets.push(open + 1);
        }
    }
    let mut slots = rand::seq::index::sample(rng, len, brackets.len()).into_vec();
    slots.sort_unstable();
    let mut body: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_FILLER..vocab)).collect();
    for (slot, b) in slots.into_iter().zip(brackets) {
        body[slot] = b;
    }
    body
}

fn corrupt(rng: &mut ChaCha8Rng, body: &mut [usize]) {
    let slots: Vec<usize> = (0..body.len()).filter(|&i| body[i] < FIRST_FILLER).collect();
    let at = slots[rng.gen_range(0..slots.len())];
    body[at] = match rng.gen_range(0..3) {
        // flip direction
        0 => body[at] ^ 1,
        // swap bracket family
        1 => {
            if body[at] < OPEN_SQUARE {
                body[at] + 2
            } else {
                body[at] - 2
            }
        }
        // drop the bracket
        _ => FIRST_FILLER,
    };
}

fn classification_split(spec: &TaskSpec, stream: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let body_len = spec.seq_len - 1;
    let mut examples: Vec<Example> = (0..n)
        .map(|i| {
            let want = i % 2 == 0;
            let mut body = balanced_body(&mut rng, spec.vocab_size, body_len);
            while is_well_formed(&body) != want {
                if want {
                    body = balanced_body(&mut rng, spec.vocab_size, body_len);
                } else {
                    corrupt(&mut rng, &mut body);
                }
            }
            let mut tokens = Vec::with_capacity(spec.seq_len);
            tokens.push(CLS);
            tokens.extend(body);
            let label = if is_well_formed(&tokens) { 1.0 } else { 0.0 };
            Example { tokens, label }
        })
        .collect();
    examples.shuffle(&mut rng);
    examples
}

/// Multiset Jaccard overlap `Σ min(count) / Σ max(count)`; two empty
/// segments score 1.
pub fn overlap_score(a: &[usize], b: &[usize]) -> f64 {
    let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
    for &t in a {
        counts.entry(t).or_default().0 += 1;
    }
    for &t in b {
        counts.entry(t).or_default().1 += 1;
    }
    let (mut lo, mut hi) = (0usize, 0usize);
    for (x, y) in counts.values() {
        lo += x.min(y);
        hi += x.max(y);
    }
    if hi == 0 {
        1.0
    } else {
        lo as f64 / hi as f64
    }
}

fn regression_split(spec: &TaskSpec, stream: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let content = spec.seq_len - 2;
    let (lo, hi) = (content / 2 - 2, content / 2 + 2);
    (0..n)
        .map(|_| {
            let la = rng.gen_range(lo..=hi);
            let lb = content - la;
            let a: Vec<usize> = (0..la).map(|_| rng.gen_range(SEP + 1..spec.vocab_size)).collect();
            let copy = rng.gen::<f64>();
            let b: Vec<usize> = (0..lb)
                .map(|_| {
                    if rng.gen_bool(copy) {
                        a[rng.gen_range(0..la)]
                    } else {
                        rng.gen_range(SEP + 1..spec.vocab_size)
                    }
                })
                .collect();
            let label = overlap_score(&a, &b);
            let mut tokens = Vec::with_capacity(spec.seq_len);
            tokens.push(CLS);
            tokens.extend(&a);
            tokens.push(SEP);
            tokens.extend(&b);
            Example { tokens, label }
        })
        .collect()
}

fn assemble(spec: &TaskSpec, gen: fn(&TaskSpec, u64, usize) -> Vec<Example>) -> Result<TaskData> {
    spec.validate()?;
    let mut train = gen(spec, TRAIN_STREAM, spec.train_size);
    train = subsample(train, spec.data_fraction, spec.seed);
    let dev = gen(spec, DEV_STREAM, spec.dev_size);
    let wrap = |examples| Dataset {
        kind: spec.kind,
        vocab_size: spec.vocab_size,
        seq_len: spec.seq_len,
        examples,
    };
    Ok(TaskData { train: wrap(train), dev: wrap(dev) })
}

/// Keeps a `⌈n·fraction⌉` prefix of a seeded permutation of `examples`.
pub fn subsample<T>(mut examples: Vec<T>, fraction: f64, seed: u64) -> Vec<T> {
    if fraction >= 1.0 {
        return examples;
    }
    let keep = (examples.len() as f64 * fraction).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBSAMPLE_STREAM);
    examples.shuffle(&mut rng);
    examples.truncate(keep);
    examples
}

pub fn generate_classification_task(spec: &TaskSpec) -> Result<TaskData> {
    if spec.kind != TaskKind::Classification {
        return Err(invalid("classification generator needs a classification spec"));
    }
    assemble(spec, classification_split)
}

pub fn generate_regression_task(spec: &TaskSpec) -> Result<TaskData> {
    if spec.kind != TaskKind::Regression {
        return Err(invalid("regression generator needs a regression spec"));
    }
    assemble(spec, regression_split)
}

pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    match spec.kind {
        TaskKind::Classification => generate_classification_task(spec),
        TaskKind::Regression => generate_regression_task(spec),
    }
}

/// Index batches for one epoch: a shuffle fixed by `(seed, epoch)`, cut into
/// chunks of `batch_size` with the short remainder kept last.
pub fn batch_iterator(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
