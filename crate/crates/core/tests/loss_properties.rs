use distill_core::losses::{
    attention_loss_kl, attention_loss_kl_with, attention_loss_mse, prediction_loss, supervised_loss,
    transformer_layer_loss, AttentionAggregation, AttentionKind, AttentionTarget, KlDirection, LossConfig,
    ProjectionParams, DEFAULT_KL_EPSILON,
};
use distill_core::mapping::{BlockPartition, LearnableInit, MappingKind, MappingState, DEFAULT_MAP_LR};
use distill_core::model::{EncoderParams, ModelConfig, TokenBatch};
use distill_core::tasks::TaskKind;
use distill_core::{Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn heads(tape: &mut Tape, data: &[Vec<f64>], shape: &[usize]) -> Vec<Var> {
    data.iter()
        .map(|d| tape.constant_from(shape.to_vec(), d.clone()).unwrap())
        .collect()
}

fn kl(a: &[Vec<f64>], b: &[Vec<f64>], shape: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let s = heads(&mut tape, a, shape);
    let t = heads(&mut tape, b, shape);
    let l = attention_loss_kl(&mut tape, &s, &t, DEFAULT_KL_EPSILON).unwrap();
    tape.item(l)
}

#[test]
fn kl_two_point_hand_value() {
    let p = vec![0.5f64.ln(), 0.5f64.ln()];
    let q = vec![0.25f64.ln(), 0.75f64.ln()];
    let v = kl(&[p], &[q], &[1, 1, 2]);
    let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((v - hand).abs() < 1e-12);
    assert!((v - 0.143841).abs() < 5e-7);
}

#[test]
fn kl_direction_switch_swaps_arguments() {
    let shape = [1, 1, 2];
    let mut tape = Tape::new();
    let s = heads(&mut tape, &[vec![0.5f64.ln(), 0.5f64.ln()]], &shape);
    let t = heads(&mut tape, &[vec![0.25f64.ln(), 0.75f64.ln()]], &shape);
    let target = AttentionTarget::Logits(t.clone());
    let rev = attention_loss_kl_with(&mut tape, &s, &target, DEFAULT_KL_EPSILON, KlDirection::TeacherFirst).unwrap();
    let hand = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    assert!((tape.item(rev) - hand).abs() < 1e-12);
    let fwd = attention_loss_kl(&mut tape, &t, &s, DEFAULT_KL_EPSILON).unwrap();
    assert!((tape.item(rev) - tape.item(fwd)).abs() < 1e-15);
}

#[test]
fn kl_against_probability_targets_matches_logit_targets() {
    let shape = [1, 2, 3];
    let logits: Vec<f64> = vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5];
    let probs: Vec<f64> = logits
        .chunks(3)
        .flat_map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect();
    let student = vec![1.0, 0.0, -1.0, 0.2, 0.2, 0.9];
    let mut tape = Tape::new();
    let s = heads(&mut tape, &[student], &shape);
    let tl = heads(&mut tape, &[logits], &shape);
    let tp = heads(&mut tape, &[probs], &shape);
    let a = attention_loss_kl_with(&mut tape, &s, &AttentionTarget::Logits(tl), 1e-8, KlDirection::StudentFirst).unwrap();
    let b = attention_loss_kl_with(&mut tape, &s, &AttentionTarget::Probs(tp), 1e-8, KlDirection::StudentFirst).unwrap();
    assert!((tape.item(a) - tape.item(b)).abs() < 1e-12);
}

fn random_heads(rng: &mut ChaCha8Rng, n: usize, len: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

proptest! {
    #[test]
    fn kl_nonnegative_and_zero_on_identical(seed in any::<u64>(), scale in 0.01f64..5.0) {
        // Logits within ±5 over rows of 3 keep every probability above the clamp.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3, 3];
        let a = random_heads(&mut rng, 2, 18, scale);
        let b = random_heads(&mut rng, 2, 18, scale);
        prop_assert!(kl(&a, &b, &shape) >= 0.0);
        prop_assert!(kl(&a, &a, &shape).abs() < 1e-12);
    }

    #[test]
    fn kl_stays_within_clamp_tolerance(seed in any::<u64>(), scale in 5.0f64..40.0) {
        // Each entry with p below the clamp shifts a row by at most eps/e.
        let tol = 3.0 * DEFAULT_KL_EPSILON / std::f64::consts::E;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2, 3, 3];
        let a = random_heads(&mut rng, 2, 18, scale);
        let b = random_heads(&mut rng, 2, 18, scale);
        prop_assert!(kl(&a, &b, &shape) >= -tol);
        prop_assert!(kl(&a, &a, &shape).abs() <= tol);
    }

    #[test]
    fn kl_ignores_row_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, 2, 4];
        let a = random_heads(&mut rng, 1, 8, 3.0);
        let b = random_heads(&mut rng, 1, 8, 3.0);
        let moved: Vec<Vec<f64>> = a.iter().map(|h| h.iter().map(|v| v + shift).collect()).collect();
        prop_assert!((kl(&a, &b, &shape) - kl(&moved, &b, &shape)).abs() < 1e-9);
    }

    #[test]
    fn attention_mse_is_symmetric_mean(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_heads(&mut rng, 3, 8, 2.0);
        let b = random_heads(&mut rng, 3, 8, 2.0);
        let mut tape = Tape::new();
        let (s, t) = (heads(&mut tape, &a, &[2, 2, 2]), heads(&mut tape, &b, &[2, 2, 2]));
        let ab = attention_loss_mse(&mut tape, &s, &t).unwrap();
        let ba = attention_loss_mse(&mut tape, &t, &s).unwrap();
        prop_assert_eq!(tape.item(ab), tape.item(ba));
        let naive: f64 = a.iter().zip(&b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / 8.0)
            .sum::<f64>() / 3.0;
        prop_assert!((tape.item(ab) - naive).abs() < 1e-12);
    }
}

#[test]
fn soft_cross_entropy_is_minimized_by_the_teacher() {
    let mut tape = Tape::new();
    let t = tape.constant_from(vec![2, 2], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
    let own = prediction_loss(&mut tape, t, t, TaskKind::Classification, 1.0).unwrap();
    let entropy: f64 = [[1.0f64, -1.0], [0.5, 0.0]]
        .iter()
        .map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -r.iter().map(|v| (v.exp() / z) * (v.exp() / z).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / 2.0;
    assert!((tape.item(own) - entropy).abs() < 1e-12);
    let other = tape.constant_from(vec![2, 2], vec![0.0, 0.0, 2.0, -2.0]).unwrap();
    let worse = prediction_loss(&mut tape, other, t, TaskKind::Classification, 1.0).unwrap();
    assert!(tape.item(worse) > tape.item(own));
    let rs = tape.constant_from(vec![4, 1], vec![0.0, 0.0, 2.0, -2.0]).unwrap();
    let rt = tape.constant_from(vec![4, 1], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
    let reg = prediction_loss(&mut tape, rs, rt, TaskKind::Regression, 1.0).unwrap();
    assert!((tape.item(reg) - (1.0 + 1.0 + 2.25 + 4.0) / 4.0).abs() < 1e-12);
    let sup = supervised_loss(&mut tape, t, &[0.0, 1.0], TaskKind::Classification).unwrap();
    assert!(tape.item(sup) > 0.0);
}

fn pair() -> (EncoderParams, EncoderParams, TokenBatch) {
    let tc = ModelConfig { n_layers: 4, d_model: 8, n_heads: 2, d_ff: 8, vocab_size: 12, max_seq_len: 5, n_outputs: 2 };
    let sc = ModelConfig { n_layers: 2, d_model: 4, ..tc };
    let teacher = EncoderParams::init(tc, 3).unwrap();
    let student = EncoderParams::init(sc, 4).unwrap();
    let tokens = TokenBatch::new(2, 5, vec![0, 4, 7, 2, 11, 0, 3, 3, 9, 1]).unwrap();
    (teacher, student, tokens)
}

fn stage1_loss(alpha: f64, attention_kind: AttentionKind, map: MappingKind, aggregation: AttentionAggregation) -> (f64, distill_core::losses::LossBreakdown) {
    let (teacher, student, tokens) = pair();
    let proj = ProjectionParams::init(4, 8, 9);
    let partition = BlockPartition::new(4, 2).unwrap();
    let mapping = match map {
        MappingKind::Learnable => MappingState::learnable(partition, LearnableInit::BaseLike, DEFAULT_MAP_LR),
        kind => MappingState::new(kind, partition, 1),
    };
    let cfg = LossConfig { alpha, attention_kind, aggregation, ..LossConfig::default() };
    let target = teacher.forward_with_trace(&tokens).unwrap();
    let mut tape = Tape::new();
    let vars = student.store.bind(&mut tape);
    let trace = student.forward_taped(&mut tape, &vars, &tokens).unwrap();
    let (_, pv) = proj.bind(&mut tape);
    let theta = mapping.bind(&mut tape);
    let (loss, b) = transformer_layer_loss(&mut tape, &trace, &target, &mapping, theta, pv, &cfg, 0).unwrap();
    (tape.item(loss), b)
}

#[test]
fn alpha_endpoints_zero_out_one_component() {
    for kind in [AttentionKind::Mse, AttentionKind::Kl] {
        for map in MappingKind::ALL {
            let (_, hidden_only) = stage1_loss(1.0, kind, map, AttentionAggregation::PreSoftmax);
            assert_eq!(hidden_only.attention, 0.0);
            assert!(hidden_only.hidden > 0.0);
            let (_, attention_only) = stage1_loss(0.0, kind, map, AttentionAggregation::PreSoftmax);
            assert_eq!(attention_only.hidden, 0.0);
            assert!(attention_only.attention > 0.0);
        }
    }
}

#[test]
fn breakdown_sums_to_total() {
    for agg in [AttentionAggregation::PreSoftmax, AttentionAggregation::PostSoftmax] {
        let (total, b) = stage1_loss(0.3, AttentionKind::Kl, MappingKind::Mean, agg);
        assert_eq!(total, b.total);
        assert!((b.embedding + b.hidden + b.attention - total).abs() < 1e-12);
        assert_eq!(b.hidden_per_layer.len(), 2);
        let weighted: f64 = b.hidden_per_layer.iter().map(|h| 0.6 * h).sum();
        assert!((weighted - b.hidden).abs() < 1e-12);
    }
}

#[test]
fn base_map_attention_aggregation_choice_is_irrelevant() {
    let (pre, _) = stage1_loss(0.5, AttentionKind::Kl, MappingKind::Base, AttentionAggregation::PreSoftmax);
    let (post, _) = stage1_loss(0.5, AttentionKind::Kl, MappingKind::Base, AttentionAggregation::PostSoftmax);
    assert!((pre - post).abs() < 1e-12);
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let (teacher, _, tokens) = pair();
    let student = teacher.clone();
    let proj = ProjectionParams::init(8, 8, 0);
    let mapping = MappingState::new(MappingKind::Base, BlockPartition::new(4, 4).unwrap(), 0);
    let target = teacher.forward_with_trace(&tokens).unwrap();
    for kind in [AttentionKind::Mse, AttentionKind::Kl] {
        let cfg = LossConfig { attention_kind: kind, ..LossConfig::default() };
        let mut tape = Tape::new();
        let vars = student.store.bind(&mut tape);
        let trace = student.forward_taped(&mut tape, &vars, &tokens).unwrap();
        let (pvars, pv) = proj.bind(&mut tape);
        let (loss, _) = transformer_layer_loss(&mut tape, &trace, &target, &mapping, None, pv, &cfg, 0).unwrap();
        if kind == AttentionKind::Kl {
            // log-softmax and the log of the softmax round differently
            assert!(tape.item(loss).abs() < 1e-12);
            continue;
        }
        assert_eq!(tape.item(loss), 0.0);
        tape.backward(loss).unwrap();
        for v in vars.iter().chain(&pvars) {
            assert!(tape.grad(*v).is_none_or(|g| g.iter().all(|x| *x == 0.0)));
        }
    }
}
