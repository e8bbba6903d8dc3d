//! Distillation losses.
//!
//! Stage one minimizes
//!
//! ```text
//! L = L_embd + sum_{m=1..M} [ 2α · L_hidn(m) + 2(1 − α) · L_attn(m) ]
//! ```
//!
//! where the hidden and embedding terms compare linearly projected student
//! states against teacher states, and the attention term is either the
//! head-averaged MSE of raw scores or the head-averaged KL divergence of
//! row-softmaxed scores. Stage two minimizes the prediction loss alone.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::mapping::{aggregate_attention, aggregate_attention_probs, aggregate_hidden, MappingState};
use crate::model::{ForwardTrace, TapedTrace};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tasks::TaskKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Mse,
    Kl,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Kl => "kl",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "kl" => Ok(Self::Kl),
            _ => Err(invalid(format!("unknown attention loss {s:?}; expected mse|kl"))),
        }
    }
}

/// Argument order of the attention KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(σ(A_S) ‖ σ(A_T))`.
    StudentFirst,
    /// `KL(σ(A_T) ‖ σ(A_S))`.
    TeacherFirst,
}

impl KlDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::StudentFirst => "student-first",
            Self::TeacherFirst => "teacher-first",
        }
    }
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student-first" => Ok(Self::StudentFirst),
            "teacher-first" => Ok(Self::TeacherFirst),
            _ => Err(invalid(format!(
                "unknown KL direction {s:?}; expected student-first|teacher-first"
            ))),
        }
    }
}

/// Whether teacher attention is mixed across a block before or after the
/// row softmax. Only the KL path distinguishes the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAggregation {
    PreSoftmax,
    PostSoftmax,
}

impl AttentionAggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PreSoftmax => "pre-softmax",
            Self::PostSoftmax => "post-softmax",
        }
    }
}

impl FromStr for AttentionAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-softmax" => Ok(Self::PreSoftmax),
            "post-softmax" => Ok(Self::PostSoftmax),
            _ => Err(invalid(format!(
                "unknown aggregation {s:?}; expected pre-softmax|post-softmax"
            ))),
        }
    }
}

pub const DEFAULT_KL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub attention_kind: AttentionKind,
    /// Weight of the hidden term; 0.5 weights both terms by one.
    pub alpha: f64,
    /// Floor applied to the reference distribution inside the logarithm.
    pub kl_epsilon: f64,
    pub temperature: f64,
    pub kl_direction: KlDirection,
    pub aggregation: AttentionAggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            attention_kind: AttentionKind::Mse,
            alpha: 0.5,
            kl_epsilon: DEFAULT_KL_EPSILON,
            temperature: 1.0,
            kl_direction: KlDirection::StudentFirst,
            aggregation: AttentionAggregation::PreSoftmax,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.kl_epsilon.is_nan() || self.kl_epsilon <= 0.0 {
            return Err(invalid(format!("kl_epsilon {} must be positive", self.kl_epsilon)));
        }
        Ok(())
    }

    pub fn hidden_weight(&self) -> f64 {
        2.0 * self.alpha
    }

    pub fn attention_weight(&self) -> f64 {
        2.0 * (1.0 - self.alpha)
    }
}

/// Learned student-to-teacher width projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub store: ParamStore,
    pub w_h: ParamId,
    pub w_e: ParamId,
}

/// Random `[rows, cols]` matrix whose shorter side is orthonormal, by
/// Gram-Schmidt over uniform draws.
fn semi_orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        if rows <= cols {
            basis[r][c]
        } else {
            basis[c][r]
        }
    })
}

impl ProjectionParams {
    /// `[d_student, d_teacher]` projections, random semi-orthogonal: the
    /// identity when widths match, norm-preserving otherwise.
    pub fn init(d_student: usize, d_teacher: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = || {
            if d_student == d_teacher {
                Tensor::identity(d_student)
            } else {
                semi_orthogonal(d_student, d_teacher, &mut rng)
            }
        };
        let mut store = ParamStore::new();
        let w_h = store.add("projection.hidden", make());
        let w_e = store.add("projection.embedding", make());
        Self { store, w_h, w_e }
    }

    pub fn bind(&self, tape: &mut Tape) -> (Vec<Var>, ProjectionVars) {
        let vars = self.store.bind(tape);
        let pv = ProjectionVars {
            w_h: vars[self.w_h.0],
            w_e: vars[self.w_e.0],
        };
        (vars, pv)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub w_h: Var,
    pub w_e: Var,
}

fn projected_mse(tape: &mut Tape, op: &'static str, student: Var, teacher: Var, w: Var) -> Result<Var> {
    let projected = tape.matmul(student, w)?;
    if tape.shape(projected) != tape.shape(teacher) {
        return Err(Error::Shape {
            op,
            left: tape.shape(projected).to_vec(),
            right: tape.shape(teacher).to_vec(),
        });
    }
    tape.mse(projected, teacher)
}

/// `MSE(E_S · W_e, E_T)` over all elements.
pub fn embedding_loss(tape: &mut Tape, e_s: Var, e_t: Var, w_e: Var) -> Result<Var> {
    projected_mse(tape, "embedding_loss", e_s, e_t, w_e)
}

/// `MSE(H_S · W_h, H_T)` over all elements.
pub fn hidden_loss(tape: &mut Tape, h_s: Var, h_t: Var, w_h: Var) -> Result<Var> {
    projected_mse(tape, "hidden_loss", h_s, h_t, w_h)
}

fn check_heads(tape: &Tape, a_s: &[Var], a_t: &[Var]) -> Result<()> {
    if a_s.len() != a_t.len() || a_s.is_empty() {
        return Err(Error::Config(format!(
            "attention loss over {} student heads and {} teacher heads",
            a_s.len(),
            a_t.len()
        )));
    }
    for (&s, &t) in a_s.iter().zip(a_t) {
        if tape.shape(s) != tape.shape(t) {
            return Err(Error::Shape {
                op: "attention_loss",
                left: tape.shape(s).to_vec(),
                right: tape.shape(t).to_vec(),
            });
        }
    }
    Ok(())
}

fn head_average(tape: &mut Tape, per_head: Vec<Var>) -> Result<Var> {
    let h = per_head.len() as f64;
    let mut total = per_head[0];
    for &l in &per_head[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / h))
}

/// `(1/h) Σ_i MSE(A_i^S, A_i^T)` on raw scores.
pub fn attention_loss_mse(tape: &mut Tape, a_s: &[Var], a_t: &[Var]) -> Result<Var> {
    check_heads(tape, a_s, a_t)?;
    let per_head = a_s
        .iter()
        .zip(a_t)
        .map(|(&s, &t)| tape.mse(s, t))
        .collect::<Result<Vec<_>>>()?;
    head_average(tape, per_head)
}

/// Mean over rows of `Σ p · (log p − log max(q, ε))`.
fn kl_rows(tape: &mut Tape, log_p: Var, p: Var, q: Var, eps: f64) -> Result<Var> {
    let rows = tape.data(p).len() / tape.shape(p).last().copied().unwrap_or(1);
    let q_floor = tape.clamp_min(q, eps);
    let log_q = tape.ln(q_floor);
    let diff = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Reference side of the attention KL: raw scores or already-normalized rows.
#[derive(Debug, Clone)]
pub enum AttentionTarget {
    Logits(Vec<Var>),
    Probs(Vec<Var>),
}

impl AttentionTarget {
    fn heads(&self) -> &[Var] {
        match self {
            Self::Logits(v) | Self::Probs(v) => v,
        }
    }
}

/// `(1/h) Σ_i KL(σ(A_i^S), σ(A_i^T))`, natural log, student distribution first.
pub fn attention_loss_kl(tape: &mut Tape, a_s: &[Var], a_t: &[Var], eps: f64) -> Result<Var> {
    attention_loss_kl_with(
        tape,
        a_s,
        &AttentionTarget::Logits(a_t.to_vec()),
        eps,
        KlDirection::StudentFirst,
    )
}

pub fn attention_loss_kl_with(
    tape: &mut Tape,
    a_s: &[Var],
    target: &AttentionTarget,
    eps: f64,
    direction: KlDirection,
) -> Result<Var> {
    check_heads(tape, a_s, target.heads())?;
    let mut per_head = Vec::with_capacity(a_s.len());
    for (i, &s) in a_s.iter().enumerate() {
        let s_log = tape.log_softmax_rows(s);
        let s_prob = tape.softmax_rows(s);
        let (t_log, t_prob) = match target {
            AttentionTarget::Logits(t) => (tape.log_softmax_rows(t[i]), tape.softmax_rows(t[i])),
            AttentionTarget::Probs(t) => {
                let floor = tape.clamp_min(t[i], eps);
                (tape.ln(floor), t[i])
            }
        };
        per_head.push(match direction {
            KlDirection::StudentFirst => kl_rows(tape, s_log, s_prob, t_prob, eps)?,
            KlDirection::TeacherFirst => kl_rows(tape, t_log, t_prob, s_prob, eps)?,
        });
    }
    head_average(tape, per_head)
}

/// Stage-one loss components. `hidden` and `attention` are the weighted
/// contributions, so `total = embedding + hidden + attention` up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub embedding: f64,
    pub hidden: f64,
    pub attention: f64,
    /// Unweighted per-layer terms.
    pub hidden_per_layer: Vec<f64>,
    pub attention_per_layer: Vec<f64>,
}

/// Embedding loss plus the α-weighted hidden/attention terms of every
/// student layer, with teacher targets aggregated by `mapping` at step `k`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer_loss(
    tape: &mut Tape,
    student: &TapedTrace,
    teacher: &ForwardTrace,
    mapping: &MappingState,
    theta: Option<Var>,
    proj: ProjectionVars,
    cfg: &LossConfig,
    k: usize,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let partition = mapping.partition;
    if student.hidden_states.len() != partition.student_layers {
        return Err(Error::Config(format!(
            "student trace has {} layers, mapping expects {}",
            student.hidden_states.len(),
            partition.student_layers
        )));
    }
    let e_t = tape.constant(&teacher.embedding_output);
    let embd = embedding_loss(tape, student.embedding_output, e_t, proj.w_e)?;
    let (wh, wa) = (cfg.hidden_weight(), cfg.attention_weight());
    let mut total = embd;
    let mut breakdown = LossBreakdown {
        total: 0.0,
        embedding: tape.item(embd),
        hidden: 0.0,
        attention: 0.0,
        hidden_per_layer: Vec::new(),
        attention_per_layer: Vec::new(),
    };
    for m in 1..=partition.student_layers {
        let v = mapping.weights_on_tape(tape, theta, m, k)?;
        let h_t = aggregate_hidden(tape, teacher, &partition, m, v)?;
        let hid = hidden_loss(tape, student.hidden_states[m - 1], h_t, proj.w_h)?;
        let a_s = student.attention_heads(tape, m - 1)?;
        let heads = a_s.len();
        let att = match cfg.attention_kind {
            AttentionKind::Mse => {
                let a_t = aggregate_attention(tape, teacher, &partition, m, v, heads)?;
                attention_loss_mse(tape, &a_s, &a_t)?
            }
            AttentionKind::Kl => {
                let target = match cfg.aggregation {
                    AttentionAggregation::PreSoftmax => AttentionTarget::Logits(
                        aggregate_attention(tape, teacher, &partition, m, v, heads)?,
                    ),
                    AttentionAggregation::PostSoftmax => AttentionTarget::Probs(
                        aggregate_attention_probs(tape, teacher, &partition, m, v, heads)?,
                    ),
                };
                attention_loss_kl_with(tape, &a_s, &target, cfg.kl_epsilon, cfg.kl_direction)?
            }
        };
        let (h_val, a_val) = (tape.item(hid), tape.item(att));
        breakdown.hidden_per_layer.push(h_val);
        breakdown.attention_per_layer.push(a_val);
        breakdown.hidden += wh * h_val;
        breakdown.attention += wa * a_val;
        let hw = tape.scale(hid, wh);
        let aw = tape.scale(att, wa);
        let layer = tape.add(hw, aw)?;
        total = tape.add(total, layer)?;
    }
    breakdown.total = tape.item(total);
    Ok((total, breakdown))
}

/// Stage-two loss between student and teacher head outputs: soft
/// cross-entropy at `temperature` for classification, MSE for regression.
pub fn prediction_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    kind: TaskKind,
    temperature: f64,
) -> Result<Var> {
    let (ss, ts) = (tape.shape(student_logits), tape.shape(teacher_logits));
    if ss != ts || ss.len() != 2 {
        return Err(Error::Shape {
            op: "prediction_loss",
            left: ss.to_vec(),
            right: ts.to_vec(),
        });
    }
    let (batch, width) = (ss[0], ss[1]);
    match kind {
        TaskKind::Regression => {
            if width != 1 {
                return Err(invalid(format!("regression head must emit 1 value, got {width}")));
            }
            tape.mse(student_logits, teacher_logits)
        }
        TaskKind::Classification => {
            if width < 2 {
                return Err(invalid(format!("classification head needs >= 2 logits, got {width}")));
            }
            if temperature.is_nan() || temperature <= 0.0 {
                return Err(invalid(format!("temperature {temperature} must be positive")));
            }
            let t = tape.scale(teacher_logits, 1.0 / temperature);
            let p_t = tape.softmax_rows(t);
            let s = tape.scale(student_logits, 1.0 / temperature);
            let log_s = tape.log_softmax_rows(s);
            let prod = tape.mul(p_t, log_s)?;
            let total = tape.sum(prod);
            Ok(tape.scale(total, -1.0 / batch as f64))
        }
    }
}

/// Supervised loss against ground-truth labels: cross-entropy on class ids
/// or MSE on scores.
pub fn supervised_loss(tape: &mut Tape, logits: Var, labels: &[f64], kind: TaskKind) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(invalid(format!(
            "{} labels for head output of shape {shape:?}",
            labels.len()
        )));
    }
    let (batch, width) = (shape[0], shape[1]);
    match kind {
        TaskKind::Regression => {
            let target = tape.constant_from(vec![batch, 1], labels.to_vec())?;
            if width != 1 {
                return Err(invalid("regression head must emit 1 value"));
            }
            tape.mse(logits, target)
        }
        TaskKind::Classification => {
            let mut onehot = vec![0.0; batch * width];
            for (i, &y) in labels.iter().enumerate() {
                let c = y as usize;
                if c >= width || y.fract() != 0.0 || y < 0.0 {
                    return Err(invalid(format!("label {y} outside 0..{width}")));
                }
                onehot[i * width + c] = 1.0;
            }
            let target = tape.constant_from(shape, onehot)?;
            let log_p = tape.log_softmax_rows(logits);
            let prod = tape.mul(target, log_p)?;
            let total = tape.sum(prod);
            Ok(tape.scale(total, -1.0 / batch as f64))
        }
    }
}
