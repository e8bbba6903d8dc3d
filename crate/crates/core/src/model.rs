//! Miniature post-layer-norm transformer encoder.
//!
//! A forward pass records everything the distillation losses read: the
//! embedding output, every layer's hidden state, every head's pre-softmax
//! attention scores, and the task-head output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Width of the task head: class count, or 1 for a regression score.
    pub n_outputs: usize,
}

impl ModelConfig {
    /// Reference desk-scale teacher: 6 layers, width 32, 4 heads.
    pub fn reference_teacher(vocab_size: usize, max_seq_len: usize, n_outputs: usize) -> Self {
        Self {
            n_layers: 6,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size,
            max_seq_len,
            n_outputs,
        }
    }

    /// Reference desk-scale student: 2 layers, width 16, 4 heads.
    pub fn reference_student(vocab_size: usize, max_seq_len: usize, n_outputs: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size,
            max_seq_len,
            n_outputs,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_outputs", self.n_outputs),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(invalid("d_model must be at least 2 for layer norm"));
        }
        Ok(())
    }

    /// Named parameter shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, d]),
            ("embeddings.ln.gain".to_string(), vec![d]),
            ("embeddings.ln.bias".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("layer.{l}");
            for (suffix, shape) in [
                ("attn.query.weight", vec![d, d]),
                ("attn.query.bias", vec![d]),
                ("attn.key.weight", vec![d, d]),
                ("attn.key.bias", vec![d]),
                ("attn.value.weight", vec![d, d]),
                ("attn.value.bias", vec![d]),
                ("attn.output.weight", vec![d, d]),
                ("attn.output.bias", vec![d]),
                ("attn.ln.gain", vec![d]),
                ("attn.ln.bias", vec![d]),
                ("ffn.inner.weight", vec![d, f]),
                ("ffn.inner.bias", vec![f]),
                ("ffn.outer.weight", vec![f, d]),
                ("ffn.outer.bias", vec![d]),
                ("ffn.ln.gain", vec![d]),
                ("ffn.ln.bias", vec![d]),
            ] {
                out.push((format!("{p}.{suffix}"), shape));
            }
        }
        out.push(("head.weight".to_string(), vec![d, self.n_outputs]));
        out.push(("head.bias".to_string(), vec![self.n_outputs]));
        out
    }
}

/// Checks the teacher/student pairing required by block mapping and the
/// head-averaged attention loss.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if !teacher.n_layers.is_multiple_of(student.n_layers) {
        return Err(Error::Config(format!(
            "teacher layers {} not divisible by student layers {}",
            teacher.n_layers, student.n_layers
        )));
    }
    if teacher.n_heads != student.n_heads {
        return Err(Error::Config(format!(
            "teacher has {} heads, student has {}",
            teacher.n_heads, student.n_heads
        )));
    }
    if teacher.vocab_size != student.vocab_size
        || teacher.max_seq_len != student.max_seq_len
        || teacher.n_outputs != student.n_outputs
    {
        return Err(Error::Config(
            "teacher and student disagree on vocabulary, sequence length or head width".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderIds {
    pub token: ParamId,
    pub position: ParamId,
    pub emb_ln_gain: ParamId,
    pub emb_ln_bias: ParamId,
    pub layers: Vec<LayerIds>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl EncoderIds {
    fn for_config(config: &ModelConfig) -> Self {
        let id = |i: usize| ParamId(i);
        let layers = (0..config.n_layers)
            .map(|l| {
                let b = 4 + 16 * l;
                LayerIds {
                    wq: id(b),
                    bq: id(b + 1),
                    wk: id(b + 2),
                    bk: id(b + 3),
                    wv: id(b + 4),
                    bv: id(b + 5),
                    wo: id(b + 6),
                    bo: id(b + 7),
                    ln1_gain: id(b + 8),
                    ln1_bias: id(b + 9),
                    w1: id(b + 10),
                    b1: id(b + 11),
                    w2: id(b + 12),
                    b2: id(b + 13),
                    ln2_gain: id(b + 14),
                    ln2_bias: id(b + 15),
                }
            })
            .collect();
        let head = 4 + 16 * config.n_layers;
        Self {
            token: id(0),
            position: id(1),
            emb_ln_gain: id(2),
            emb_ln_bias: id(3),
            layers,
            head_weight: id(head),
            head_bias: id(head + 1),
        }
    }

    pub fn head(&self) -> [ParamId; 2] {
        [self.head_weight, self.head_bias]
    }
}

/// Token ids laid out as a `[batch, seq]` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(invalid(format!(
                "{} token ids cannot form a [{batch}, {seq}] batch",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut batch = 0;
        let mut seq = None;
        for row in rows {
            match seq {
                None => seq = Some(row.len()),
                Some(s) if s != row.len() => {
                    return Err(invalid("rows of a token batch must share one length"))
                }
                _ => {}
            }
            ids.extend_from_slice(row);
            batch += 1;
        }
        Self::new(batch, seq.unwrap_or(0), ids)
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Encoder weights plus the layout needed to address them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: EncoderIds,
}

/// Values captured by one forward pass, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Layer-0 representation `[batch, seq, d_model]`.
    pub embedding_output: Tensor,
    /// Output of each encoder layer, `[batch, seq, d_model]`.
    pub hidden_states: Vec<Tensor>,
    /// Pre-softmax scaled scores, indexed `[layer][head]`, each `[batch, seq, seq]`.
    pub attention_logits: Vec<Vec<Tensor>>,
    /// Task head output `[batch, n_outputs]`.
    pub logits: Tensor,
}

/// Handles to the same quantities on a live tape.
#[derive(Debug, Clone)]
pub struct TapedTrace {
    pub embedding_output: Var,
    pub hidden_states: Vec<Var>,
    /// Per layer, all heads at once: `[batch, heads, seq, seq]`.
    pub attention_logits: Vec<Var>,
    pub logits: Var,
}

impl TapedTrace {
    /// Per-head `[batch, seq, seq]` scores of `layer` (0-based).
    pub fn attention_heads(&self, tape: &mut Tape, layer: usize) -> Result<Vec<Var>> {
        let all = self.attention_logits[layer];
        let heads = tape.shape(all)[1];
        (0..heads).map(|h| tape.select_head(all, h)).collect()
    }
}

/// Weight initialization scheme. Biases start at 0 and layer-norm gains at 1
/// under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Uniform in ±1/sqrt(fan_in); embedding tables are lookups with fan-in 1.
    FanIn,
    /// Uniform with standard deviation 0.02, sized for small distillation
    /// learning rates.
    Small,
}

/// Half-width of the `Small` uniform init.
pub const SMALL_INIT_BOUND: f64 = 0.02 * 1.732_050_807_568_877_2;

impl WeightInit {
    fn bound(self, name: &str, shape: &[usize]) -> f64 {
        match self {
            WeightInit::FanIn => {
                let fan_in = if name.starts_with("embeddings.") { 1 } else { shape[0] };
                1.0 / (fan_in as f64).sqrt()
            }
            WeightInit::Small => SMALL_INIT_BOUND,
        }
    }
}

impl EncoderParams {
    /// Seeded `FanIn` initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, seed, WeightInit::FanIn)
    }

    pub fn init_with(config: ModelConfig, seed: u64, scheme: WeightInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.layout() {
            let tensor = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let bound = scheme.bound(&name, &shape);
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            };
            store.add(name, tensor);
        }
        Ok(Self {
            ids: EncoderIds::for_config(&config),
            config,
            store,
        })
    }

    /// Rebuilds an encoder from a store whose names and shapes match `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                store.len()
            )));
        }
        for ((name, shape), (_, got_name, t)) in layout.iter().zip(store.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            ids: EncoderIds::for_config(&config),
            config,
            store,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, self.config.max_seq_len
            )));
        }
        if let Some(pos) = tokens.ids.iter().position(|&t| t >= self.config.vocab_size) {
            return Err(invalid(format!(
                "token id {} at batch {} position {} is outside vocabulary of {}",
                tokens.ids[pos],
                pos / tokens.seq,
                pos % tokens.seq,
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass on `tape`; `vars[i]` must be the binding of `ParamId(i)`.
    pub fn forward_taped(&self, tape: &mut Tape, vars: &[Var], tokens: &TokenBatch) -> Result<TapedTrace> {
        self.check_tokens(tokens)?;
        if vars.len() != self.store.len() {
            return Err(invalid(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        let v = |id: ParamId| vars[id.0];
        let (b, s) = (tokens.batch, tokens.seq);
        let heads = self.config.n_heads;
        let ids = &self.ids;

        let tok = tape.embedding(v(ids.token), &tokens.ids, &[b, s])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = tape.embedding(v(ids.position), &positions, &[b, s])?;
        let summed = tape.add(tok, pos)?;
        let embedding_output = tape.layer_norm(summed, v(ids.emb_ln_gain), v(ids.emb_ln_bias))?;

        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut h = embedding_output;
        let mut hidden_states = Vec::with_capacity(ids.layers.len());
        let mut attention_logits = Vec::with_capacity(ids.layers.len());
        for layer in &ids.layers {
            let q = linear(tape, h, v(layer.wq), v(layer.bq))?;
            let k = linear(tape, h, v(layer.wk), v(layer.bk))?;
            let val = linear(tape, h, v(layer.wv), v(layer.bv))?;
            let qh = tape.split_heads(q, heads)?;
            let kh = tape.split_heads(k, heads)?;
            let vh = tape.split_heads(val, heads)?;
            let kt = tape.transpose_last(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scores = tape.scale(raw, scale);
            attention_logits.push(scores);
            let probs = tape.softmax_rows(scores);
            let ctx = tape.matmul(probs, vh)?;
            let merged = tape.merge_heads(ctx)?;
            let attn_out = linear(tape, merged, v(layer.wo), v(layer.bo))?;
            let res1 = tape.add(h, attn_out)?;
            let h1 = tape.layer_norm(res1, v(layer.ln1_gain), v(layer.ln1_bias))?;
            let inner = linear(tape, h1, v(layer.w1), v(layer.b1))?;
            let act = tape.gelu(inner);
            let outer = linear(tape, act, v(layer.w2), v(layer.b2))?;
            let res2 = tape.add(h1, outer)?;
            h = tape.layer_norm(res2, v(layer.ln2_gain), v(layer.ln2_bias))?;
            hidden_states.push(h);
        }
        let pooled = tape.select_position(h, 0)?;
        let logits = linear(tape, pooled, v(ids.head_weight), v(ids.head_bias))?;
        Ok(TapedTrace {
            embedding_output,
            hidden_states,
            attention_logits,
            logits,
        })
    }

    /// Gradient-free forward pass returning detached values.
    pub fn forward_with_trace(&self, tokens: &TokenBatch) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let tr = self.forward_taped(&mut tape, &vars, tokens)?;
        let mut attention_logits = Vec::with_capacity(tr.attention_logits.len());
        for l in 0..tr.attention_logits.len() {
            let heads = tr.attention_heads(&mut tape, l)?;
            attention_logits.push(heads.into_iter().map(|h| tape.to_tensor(h)).collect());
        }
        Ok(ForwardTrace {
            embedding_output: tape.to_tensor(tr.embedding_output),
            hidden_states: tr.hidden_states.iter().map(|&h| tape.to_tensor(h)).collect(),
            attention_logits,
            logits: tape.to_tensor(tr.logits),
        })
    }

    /// Task-head output `[batch, n_outputs]`.
    pub fn predict(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let tr = self.forward_taped(&mut tape, &vars, tokens)?;
        Ok(tape.to_tensor(tr.logits))
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 16,
            n_outputs: 2,
        }
    }

    fn tokens(batch: usize, seq: usize, salt: usize) -> TokenBatch {
        TokenBatch::new(batch, seq, (0..batch * seq).map(|i| (i * 7 + salt) % 32).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_unit_gains() {
        let a = EncoderParams::init(small(), 42).unwrap();
        let b = EncoderParams::init(small(), 42).unwrap();
        assert_eq!(a.store, b.store);
        let c = EncoderParams::init(small(), 43).unwrap();
        assert_ne!(a.store, c.store);
        for (_, name, t) in a.store.iter() {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&g| g == 1.0));
            }
        }
    }

    #[test]
    fn parameter_count_matches_tally() {
        let cfg = small();
        let p = EncoderParams::init(cfg, 1).unwrap();
        // independent tally, tensor by tensor
        let (d, f, v, s, c) = (16, 32, 32, 16, 2);
        let embeddings = v * d + s * d + d + d;
        let attention = 4 * (d * d + d) + 2 * d;
        let ffn = d * f + f + f * d + d + 2 * d;
        let head = d * c + c;
        assert_eq!(p.param_count(), embeddings + 2 * (attention + ffn) + head);
        assert_eq!(p.param_count(), 5282);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.n_heads = 3;
        assert!(EncoderParams::init(cfg, 0).is_err());
        cfg = small();
        cfg.d_ff = 0;
        assert!(EncoderParams::init(cfg, 0).is_err());
    }

    #[test]
    fn trace_shapes() {
        let p = EncoderParams::init(small(), 3).unwrap();
        let tr = p.forward_with_trace(&tokens(2, 8, 0)).unwrap();
        assert_eq!(tr.embedding_output.shape(), &[2, 8, 16]);
        assert_eq!(tr.hidden_states.len(), 2);
        assert_eq!(tr.attention_logits.len(), 2);
        assert_eq!(tr.attention_logits[0].len(), 4);
        assert_eq!(tr.attention_logits[1][3].shape(), &[2, 8, 8]);
        assert_eq!(tr.logits.shape(), &[2, 2]);
    }

    #[test]
    fn attention_rows_normalize() {
        let p = EncoderParams::init(small(), 3).unwrap();
        let tr = p.forward_with_trace(&tokens(2, 8, 5)).unwrap();
        let mut tape = Tape::new();
        for layer in &tr.attention_logits {
            for head in layer {
                let a = tape.constant(head);
                let s = tape.softmax_rows(a);
                for row in tape.data(s).chunks(8) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_trace() {
        let p = EncoderParams::init(small(), 9).unwrap();
        let t = tokens(3, 6, 1);
        let perm = [2usize, 0, 1];
        let permuted = TokenBatch::from_rows(perm.iter().map(|&i| t.row(i))).unwrap();
        let a = p.forward_with_trace(&t).unwrap();
        let b = p.forward_with_trace(&permuted).unwrap();
        let slice = |x: &Tensor, i: usize| {
            let n = x.len() / x.shape()[0];
            x.data()[i * n..(i + 1) * n].to_vec()
        };
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(slice(&b.logits, new), slice(&a.logits, old));
            assert_eq!(slice(&b.hidden_states[1], new), slice(&a.hidden_states[1], old));
            assert_eq!(
                slice(&b.attention_logits[0][2], new),
                slice(&a.attention_logits[0][2], old)
            );
        }
    }

    #[test]
    fn predict_equals_trace_logits() {
        let p = EncoderParams::init(small(), 4).unwrap();
        let t = tokens(2, 8, 3);
        assert_eq!(p.predict(&t).unwrap(), p.forward_with_trace(&t).unwrap().logits);
        let mut reg = small();
        reg.n_outputs = 1;
        let r = EncoderParams::init(reg, 4).unwrap();
        assert_eq!(r.predict(&t).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn out_of_range_token_reports_position() {
        let p = EncoderParams::init(small(), 4).unwrap();
        let mut t = tokens(2, 4, 0);
        t.ids[6] = 99;
        let err = p.predict(&t).unwrap_err().to_string();
        assert!(err.contains("batch 1 position 2"), "{err}");
        let long = tokens(1, 17, 0);
        assert!(p.predict(&long).is_err());
    }

    #[test]
    fn compatibility_rules() {
        let t = ModelConfig::reference_teacher(32, 16, 2);
        let s = ModelConfig::reference_student(32, 16, 2);
        check_compatible(&t, &s).unwrap();
        let mut bad = s;
        bad.n_layers = 4;
        assert!(matches!(check_compatible(&t, &bad), Err(Error::Config(_))));
        bad = s;
        bad.n_heads = 2;
        assert!(check_compatible(&t, &bad).is_err());
    }
}
