//! Block-based teacher-to-student layer mapping.
//!
//! Teacher layers are split into `M` contiguous blocks of `N / M` layers.
//! Student layer `m` (1-based) learns from a convex combination of the
//! layers in block `m`, weighted by a probability vector `v(m)`:
//!
//! * `Base`: one-hot on the last layer of the block (plain uniform-stride
//!   layer selection, `g(m) = block_size * m`);
//! * `Random`: one-hot on a layer drawn fresh for every step and layer;
//! * `Mean`: uniform weights;
//! * `Learnable`: row-softmax of a trainable `[M, block_size]` matrix.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::ForwardTrace;
use crate::optim::{Adam, AdamConfig};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// Contiguous partition of `N` teacher layers into `M` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPartition {
    pub teacher_layers: usize,
    pub student_layers: usize,
    pub block_size: usize,
}

impl BlockPartition {
    pub fn new(teacher_layers: usize, student_layers: usize) -> Result<Self> {
        if student_layers == 0 || teacher_layers == 0 || !teacher_layers.is_multiple_of(student_layers) {
            return Err(Error::Config(format!(
                "teacher layers {teacher_layers} must be a positive multiple of student layers {student_layers}"
            )));
        }
        Ok(Self {
            teacher_layers,
            student_layers,
            block_size: teacher_layers / student_layers,
        })
    }

    fn check(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.student_layers {
            return Err(invalid(format!(
                "student layer {m} outside 1..={}",
                self.student_layers
            )));
        }
        Ok(())
    }

    /// 1-based teacher layer indices of block `m` (1-based).
    pub fn block(&self, m: usize) -> Result<Vec<usize>> {
        self.check(m)?;
        Ok(((m - 1) * self.block_size + 1..=m * self.block_size).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingKind {
    Base,
    Random,
    Mean,
    Learnable,
}

impl MappingKind {
    pub const ALL: [MappingKind; 4] = [Self::Base, Self::Random, Self::Mean, Self::Learnable];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Random => "random",
            Self::Mean => "mean",
            Self::Learnable => "learnable",
        }
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown mapping {s:?}; expected base|random|mean|learnable")))
    }
}

/// Starting point of a learnable mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnableInit {
    /// Every θ row zero, so `v = (1/3, 1/3, 1/3)` for blocks of three.
    Uniform,
    /// θ rows `(-1, ..., -1, 1)`: close to the base one-hot while finite.
    BaseLike,
}

impl LearnableInit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::BaseLike => "base-like",
        }
    }
}

impl fmt::Display for LearnableInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnableInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "base-like" => Ok(Self::BaseLike),
            _ => Err(invalid(format!("unknown mapping init {s:?}; expected uniform|base-like"))),
        }
    }
}

/// One logged mapping weight `v_k(m)[j]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    /// 1-based student layer.
    pub student_layer: usize,
    /// 1-based position inside the block.
    pub block_index: usize,
    pub weight: f64,
}

pub const TRAJECTORY_HEADER: &str = "step,student_layer,block_index,weight";

impl TrajectoryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.student_layer, self.block_index, self.weight
        )
    }
}

/// Default learning rate of the learnable mapping parameters.
pub const DEFAULT_MAP_LR: f64 = 5e-5;

#[derive(Debug, Clone)]
pub struct MappingState {
    pub kind: MappingKind,
    pub partition: BlockPartition,
    /// `[M, block_size]`; present only for `Learnable`.
    pub theta: Option<Tensor>,
    pub map_lr: f64,
    seed: u64,
    optimizer: Option<Adam>,
    trajectory: Vec<TrajectoryRow>,
}

impl MappingState {
    pub fn new(kind: MappingKind, partition: BlockPartition, seed: u64) -> Self {
        let mut state = Self {
            kind,
            partition,
            theta: None,
            map_lr: DEFAULT_MAP_LR,
            seed,
            optimizer: None,
            trajectory: Vec::new(),
        };
        if kind == MappingKind::Learnable {
            state.theta = Some(Self::initial_theta(partition, LearnableInit::Uniform));
            state.optimizer = Some(Adam::new(AdamConfig::with_lr(DEFAULT_MAP_LR)));
        }
        state
    }

    pub fn learnable(partition: BlockPartition, init: LearnableInit, map_lr: f64) -> Self {
        let mut state = Self::new(MappingKind::Learnable, partition, 0);
        state.theta = Some(Self::initial_theta(partition, init));
        state.map_lr = map_lr;
        state.optimizer = Some(Adam::new(AdamConfig::with_lr(map_lr)));
        state
    }

    fn initial_theta(p: BlockPartition, init: LearnableInit) -> Tensor {
        let bs = p.block_size;
        Tensor::from_fn(&[p.student_layers, bs], |i| match init {
            LearnableInit::Uniform => 0.0,
            LearnableInit::BaseLike if i % bs == bs - 1 => 1.0,
            LearnableInit::BaseLike => -1.0,
        })
        .with_requires_grad(true)
    }

    /// Index drawn by the random map for `(k, m)`; a pure function of the seed.
    fn random_index(&self, m: usize, k: usize) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        let mut pick = 0;
        for _ in 0..m {
            pick = rng.gen_range(0..self.partition.block_size);
        }
        pick
    }

    /// `v_k(m)` as plain values.
    pub fn weights_for(&self, m: usize, k: usize) -> Result<Vec<f64>> {
        self.partition.check(m)?;
        let bs = self.partition.block_size;
        let one_hot = |i: usize| (0..bs).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
        Ok(match self.kind {
            MappingKind::Base => one_hot(bs - 1),
            MappingKind::Random => one_hot(self.random_index(m, k)),
            MappingKind::Mean => vec![1.0 / bs as f64; bs],
            MappingKind::Learnable => {
                let theta = self.theta.as_ref().expect("learnable map carries theta");
                let mut row = theta.data()[(m - 1) * bs..m * bs].to_vec();
                softmax_in_place(&mut row);
                row
            }
        })
    }

    /// Records θ on `tape` as a gradient-tracking leaf (learnable maps only).
    pub fn bind(&self, tape: &mut Tape) -> Option<Var> {
        self.theta.as_ref().map(|t| tape.param(t))
    }

    /// `v_k(m)` on the tape. For a learnable map the result depends on the
    /// bound θ, so gradients reach it.
    pub fn weights_on_tape(&self, tape: &mut Tape, theta: Option<Var>, m: usize, k: usize) -> Result<Var> {
        self.partition.check(m)?;
        match (self.kind, theta) {
            (MappingKind::Learnable, Some(theta)) => {
                let bs = self.partition.block_size;
                let row = tape.gather(theta, ((m - 1) * bs..m * bs).collect(), vec![bs])?;
                Ok(tape.softmax_rows(row))
            }
            (MappingKind::Learnable, None) => Err(Error::Ordering(
                "learnable map must be bound to the tape before use".into(),
            )),
            _ => {
                let v = self.weights_for(m, k)?;
                tape.constant_from(vec![v.len()], v)
            }
        }
    }

    /// Copies θ's gradient off the tape.
    pub fn take_grad(&mut self, tape: &Tape, theta: Option<Var>) -> Result<()> {
        if let (Some(t), Some(v)) = (self.theta.as_mut(), theta) {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Logs the weights used at step `k`, then applies one optimizer step to θ.
    pub fn map_step(&mut self, k: usize) -> Result<()> {
        if self.kind != MappingKind::Learnable {
            return Err(Error::Config(format!("map_step on a {} map", self.kind)));
        }
        if self.theta.as_ref().and_then(|t| t.grad()).is_none() {
            return Err(Error::Ordering(
                "theta has no gradient; run backward and take_grad first".into(),
            ));
        }
        for m in 1..=self.partition.student_layers {
            for (j, w) in self.weights_for(m, k)?.into_iter().enumerate() {
                self.trajectory.push(TrajectoryRow {
                    step: k,
                    student_layer: m,
                    block_index: j + 1,
                    weight: w,
                });
            }
        }
        let theta = self.theta.as_mut().expect("learnable");
        let opt = self.optimizer.as_mut().expect("learnable");
        opt.step(&mut [theta])?;
        theta.clear_grad();
        Ok(())
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        &self.trajectory
    }

    /// Final `v(m)` for every student layer.
    pub fn current_weights(&self) -> Result<Vec<Vec<f64>>> {
        (1..=self.partition.student_layers)
            .map(|m| self.weights_for(m, 0))
            .collect()
    }
}

/// Incremental writer for the trajectory CSV.
pub struct TrajectoryWriter<W: Write> {
    out: W,
    written: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{TRAJECTORY_HEADER}")?;
        Ok(Self { out, written: 0 })
    }

    /// Writes rows not yet emitted and flushes.
    pub fn sync(&mut self, state: &MappingState) -> Result<()> {
        for row in &state.trajectory()[self.written..] {
            writeln!(self.out, "{}", row.csv_line())?;
        }
        self.written = state.trajectory().len();
        self.out.flush()?;
        Ok(())
    }
}

fn check_weights(tape: &Tape, v: Var, partition: &BlockPartition) -> Result<()> {
    if tape.shape(v) != [partition.block_size] {
        return Err(invalid(format!(
            "mapping weights of shape {:?} for block size {}",
            tape.shape(v),
            partition.block_size
        )));
    }
    Ok(())
}

/// `sum_j v[j] * H_teacher[block(m)[j]]` as a tape value.
pub fn aggregate_hidden(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    partition: &BlockPartition,
    m: usize,
    v: Var,
) -> Result<Var> {
    check_weights(tape, v, partition)?;
    if teacher.hidden_states.len() != partition.teacher_layers {
        return Err(Error::Config(format!(
            "teacher trace has {} layers, partition expects {}",
            teacher.hidden_states.len(),
            partition.teacher_layers
        )));
    }
    let layers: Vec<Var> = partition
        .block(m)?
        .into_iter()
        .map(|n| tape.constant(&teacher.hidden_states[n - 1]))
        .collect();
    tape.weighted_sum(&layers, v)
}

/// Per-head `sum_j v[j] * A_teacher[block(m)[j]][head]`, combining
/// pre-softmax scores.
pub fn aggregate_attention(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    partition: &BlockPartition,
    m: usize,
    v: Var,
    heads: usize,
) -> Result<Vec<Var>> {
    aggregate_attention_with(tape, teacher, partition, m, v, heads, false)
}

/// Per-head mixture of the teacher's row-softmaxed attention, i.e.
/// aggregation after normalization.
pub fn aggregate_attention_probs(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    partition: &BlockPartition,
    m: usize,
    v: Var,
    heads: usize,
) -> Result<Vec<Var>> {
    aggregate_attention_with(tape, teacher, partition, m, v, heads, true)
}

fn aggregate_attention_with(
    tape: &mut Tape,
    teacher: &ForwardTrace,
    partition: &BlockPartition,
    m: usize,
    v: Var,
    heads: usize,
    normalize: bool,
) -> Result<Vec<Var>> {
    check_weights(tape, v, partition)?;
    if teacher.attention_logits.len() != partition.teacher_layers {
        return Err(Error::Config(format!(
            "teacher trace has {} layers, partition expects {}",
            teacher.attention_logits.len(),
            partition.teacher_layers
        )));
    }
    let block = partition.block(m)?;
    for &n in &block {
        if teacher.attention_logits[n - 1].len() != heads {
            return Err(Error::Config(format!(
                "teacher layer {n} has {} heads, expected {heads}",
                teacher.attention_logits[n - 1].len()
            )));
        }
    }
    (0..heads)
        .map(|h| {
            let layers: Vec<Var> = block
                .iter()
                .map(|&n| {
                    let c = tape.constant(&teacher.attention_logits[n - 1][h]);
                    if normalize {
                        tape.softmax_rows(c)
                    } else {
                        c
                    }
                })
                .collect();
            tape.weighted_sum(&layers, v)
        })
        .collect()
}
