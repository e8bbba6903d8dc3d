//! Finite-difference checks of the full stage-one objective on a tiny
//! teacher/student pair, for every loss and mapping variant.

use crate::error::Result;
use crate::gradcheck::{grad_check, CheckParam, GradCheckOptions, GradCheckReport};
use crate::losses::{transformer_layer_loss, AttentionKind, LossConfig, ProjectionParams, ProjectionVars};
use crate::mapping::{BlockPartition, LearnableInit, MappingKind, MappingState, DEFAULT_MAP_LR};
use crate::model::{EncoderParams, ModelConfig, TokenBatch};
use crate::tape::{Tape, Var};

pub const ALPHAS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteCase {
    pub attention: AttentionKind,
    pub map: MappingKind,
    pub alpha: f64,
}

impl SuiteCase {
    pub fn label(&self) -> String {
        format!("{}/{}/alpha={}", self.attention, self.map, self.alpha)
    }
}

/// Every `{mse, kl} × {base, random, mean, learnable} × α` combination.
pub fn all_cases() -> Vec<SuiteCase> {
    let mut out = Vec::new();
    for attention in [AttentionKind::Mse, AttentionKind::Kl] {
        for map in MappingKind::ALL {
            for alpha in ALPHAS {
                out.push(SuiteCase { attention, map, alpha });
            }
        }
    }
    out
}

/// Teacher 6 layers / width 8, student 2 layers / width 4, both 2 heads.
pub fn tiny_configs() -> (ModelConfig, ModelConfig) {
    let teacher = ModelConfig {
        n_layers: 6,
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        vocab_size: 10,
        max_seq_len: 4,
        n_outputs: 2,
    };
    let student = ModelConfig { n_layers: 2, d_model: 4, d_ff: 8, ..teacher };
    (teacher, student)
}

fn tiny_tokens() -> TokenBatch {
    TokenBatch::new(2, 4, vec![0, 3, 7, 2, 0, 9, 1, 5]).expect("valid tiny batch")
}

/// Gradient check of the stage-one loss for `case`, reporting the groups
/// `student`, `w_h`, `w_e` and (learnable maps only) `theta`.
pub fn check_case(case: &SuiteCase, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (tc, sc) = tiny_configs();
    let teacher = EncoderParams::init(tc, 11)?;
    let student = EncoderParams::init(sc, 12)?;
    let proj = ProjectionParams::init(sc.d_model, tc.d_model, 13);
    let partition = BlockPartition::new(tc.n_layers, sc.n_layers)?;
    let mapping = match case.map {
        MappingKind::Learnable => MappingState::learnable(partition, LearnableInit::BaseLike, DEFAULT_MAP_LR),
        kind => MappingState::new(kind, partition, 5),
    };
    let loss_cfg = LossConfig { attention_kind: case.attention, alpha: case.alpha, ..LossConfig::default() };
    let tokens = tiny_tokens();
    let target = teacher.forward_with_trace(&tokens)?;

    let mut params: Vec<CheckParam> = student
        .store
        .iter()
        .map(|(_, name, t)| CheckParam::new(name, "student", t.clone()))
        .collect();
    let n_student = params.len();
    params.push(CheckParam::new("projection.hidden", "w_h", proj.store.get(proj.w_h).clone()));
    params.push(CheckParam::new("projection.embedding", "w_e", proj.store.get(proj.w_e).clone()));
    if let Some(theta) = &mapping.theta {
        params.push(CheckParam::new("theta", "theta", theta.clone()));
    }

    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let trace = student.forward_taped(tape, &vars[..n_student], &tokens)?;
        let pv = ProjectionVars { w_h: vars[n_student], w_e: vars[n_student + 1] };
        let theta = vars.get(n_student + 2).copied();
        let (loss, _) = transformer_layer_loss(tape, &trace, &target, &mapping, theta, pv, &loss_cfg, 0)?;
        Ok(loss)
    };
    grad_check(objective, &params, opts)
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub case: SuiteCase,
    pub report: GradCheckReport,
}

pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<SuiteResult>> {
    all_cases()
        .into_iter()
        .map(|case| Ok(SuiteResult { report: check_case(&case, opts)?, case }))
        .collect()
}
