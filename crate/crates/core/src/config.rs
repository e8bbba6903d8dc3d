//! Run configuration and its flat `key = value` document form.
//!
//! Keys are the long command-line flag names without the leading dashes.
//! Resolution starts from the task defaults, then applies file entries, then
//! flag entries; a later entry for the same key wins.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{AttentionAggregation, AttentionKind, KlDirection, LossConfig};
use crate::mapping::{LearnableInit, MappingKind, DEFAULT_MAP_LR};
use crate::model::ModelConfig;
use crate::tasks::{TaskKind, TaskName, TaskSpec};

/// Every accepted key, in the order `render` writes them.
pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "data-fraction",
    "train-size",
    "dev-size",
    "attn-loss",
    "kl-direction",
    "attn-aggregation",
    "alpha",
    "temperature",
    "map",
    "map-init",
    "map-lr",
    "skip-stage1",
    "stage1-epochs",
    "stage2-epochs",
    "lr1",
    "lr2",
    "batch1",
    "batch2",
    "teacher-epochs",
    "teacher-lr",
    "teacher-batch",
    "teacher-layers",
    "teacher-d-model",
    "teacher-heads",
    "teacher-d-ff",
    "student-layers",
    "student-d-model",
    "student-heads",
    "student-d-ff",
    "teacher",
    "out",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskName,
    pub seed: u64,
    pub data_fraction: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub attention_kind: AttentionKind,
    pub kl_direction: KlDirection,
    pub aggregation: AttentionAggregation,
    pub alpha: f64,
    pub temperature: f64,
    pub map_kind: MappingKind,
    pub map_init: LearnableInit,
    pub map_lr: f64,
    pub skip_stage1: bool,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub teacher_epochs: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub teacher_layers: usize,
    pub teacher_d_model: usize,
    pub teacher_heads: usize,
    pub teacher_d_ff: usize,
    pub student_layers: usize,
    pub student_d_model: usize,
    pub student_heads: usize,
    pub student_d_ff: usize,
    /// Existing teacher checkpoint to distill from.
    pub teacher: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn defaults(task: TaskName) -> Self {
        let spec = task.spec(42);
        let teacher = ModelConfig::reference_teacher(spec.vocab_size, spec.seq_len, 2);
        let student = ModelConfig::reference_student(spec.vocab_size, spec.seq_len, 2);
        Self {
            task,
            seed: 42,
            data_fraction: 1.0,
            train_size: spec.train_size,
            dev_size: spec.dev_size,
            attention_kind: AttentionKind::Mse,
            kl_direction: KlDirection::StudentFirst,
            aggregation: AttentionAggregation::PreSoftmax,
            alpha: 0.5,
            temperature: 1.0,
            map_kind: MappingKind::Base,
            map_init: LearnableInit::Uniform,
            map_lr: DEFAULT_MAP_LR,
            skip_stage1: false,
            stage1_epochs: match task.kind() {
                TaskKind::Classification => 30,
                TaskKind::Regression => 20,
            },
            stage2_epochs: 3,
            stage1_lr: 5e-5,
            stage2_lr: 1e-3,
            stage1_batch: 32,
            stage2_batch: 32,
            teacher_epochs: 8,
            teacher_lr: 1e-3,
            teacher_batch: 32,
            teacher_layers: teacher.n_layers,
            teacher_d_model: teacher.d_model,
            teacher_heads: teacher.n_heads,
            teacher_d_ff: teacher.d_ff,
            student_layers: student.n_layers,
            student_d_model: student.d_model,
            student_heads: student.n_heads,
            student_d_ff: student.d_ff,
            teacher: None,
            out: None,
        }
    }

    /// Defaults for the task named by the last `task` entry (cola-like when
    /// absent), then every entry applied in order.
    pub fn resolve(entries: &[(String, String)]) -> Result<Self> {
        let task = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "task")
            .map(|(_, v)| v.parse::<TaskName>())
            .transpose()?
            .unwrap_or(TaskName::ColaLike);
        let mut cfg = Self::defaults(task);
        for (k, v) in entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
            }
        }
        let v = value;
        match key {
            "task" => self.task = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data-fraction" => self.data_fraction = parse(key, v)?,
            "train-size" => self.train_size = parse(key, v)?,
            "dev-size" => self.dev_size = parse(key, v)?,
            "attn-loss" => self.attention_kind = parse(key, v)?,
            "kl-direction" => self.kl_direction = parse(key, v)?,
            "attn-aggregation" => self.aggregation = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "map" => self.map_kind = parse(key, v)?,
            "map-init" => self.map_init = parse(key, v)?,
            "map-lr" => self.map_lr = parse(key, v)?,
            "skip-stage1" => self.skip_stage1 = parse_bool(key, v)?,
            "stage1-epochs" => self.stage1_epochs = parse(key, v)?,
            "stage2-epochs" => self.stage2_epochs = parse(key, v)?,
            "lr1" => self.stage1_lr = parse(key, v)?,
            "lr2" => self.stage2_lr = parse(key, v)?,
            "batch1" => self.stage1_batch = parse(key, v)?,
            "batch2" => self.stage2_batch = parse(key, v)?,
            "teacher-epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher-lr" => self.teacher_lr = parse(key, v)?,
            "teacher-batch" => self.teacher_batch = parse(key, v)?,
            "teacher-layers" => self.teacher_layers = parse(key, v)?,
            "teacher-d-model" => self.teacher_d_model = parse(key, v)?,
            "teacher-heads" => self.teacher_heads = parse(key, v)?,
            "teacher-d-ff" => self.teacher_d_ff = parse(key, v)?,
            "student-layers" => self.student_layers = parse(key, v)?,
            "student-d-model" => self.student_d_model = parse(key, v)?,
            "student-heads" => self.student_heads = parse(key, v)?,
            "student-d-ff" => self.student_d_ff = parse(key, v)?,
            "teacher" => self.teacher = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return cfg(format!("data-fraction {} outside (0, 1]", self.data_fraction));
        }
        for (name, lr) in [
            ("lr1", self.stage1_lr),
            ("lr2", self.stage2_lr),
            ("map-lr", self.map_lr),
            ("teacher-lr", self.teacher_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return cfg(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, b) in [
            ("batch1", self.stage1_batch),
            ("batch2", self.stage2_batch),
            ("teacher-batch", self.teacher_batch),
            ("train-size", self.train_size),
            ("dev-size", self.dev_size),
        ] {
            if b == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        self.loss_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.teacher_config().validate()?;
        self.student_config().validate()?;
        self.task_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        crate::model::check_compatible(&self.teacher_config(), &self.student_config())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            train_size: self.train_size,
            dev_size: self.dev_size,
            data_fraction: self.data_fraction,
            ..self.task.spec(self.seed)
        }
    }

    pub fn teacher_config(&self) -> ModelConfig {
        let spec = self.task.spec(self.seed);
        ModelConfig {
            n_layers: self.teacher_layers,
            d_model: self.teacher_d_model,
            n_heads: self.teacher_heads,
            d_ff: self.teacher_d_ff,
            vocab_size: spec.vocab_size,
            max_seq_len: spec.seq_len,
            n_outputs: spec.kind.n_outputs(),
        }
    }

    pub fn student_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.student_layers,
            d_model: self.student_d_model,
            n_heads: self.student_heads,
            d_ff: self.student_d_ff,
            ..self.teacher_config()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            attention_kind: self.attention_kind,
            alpha: self.alpha,
            temperature: self.temperature,
            kl_direction: self.kl_direction,
            aggregation: self.aggregation,
            ..LossConfig::default()
        }
    }

    fn value_of(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "task" => self.task.to_string(),
            "seed" => self.seed.to_string(),
            "data-fraction" => self.data_fraction.to_string(),
            "train-size" => self.train_size.to_string(),
            "dev-size" => self.dev_size.to_string(),
            "attn-loss" => self.attention_kind.to_string(),
            "kl-direction" => self.kl_direction.as_str().into(),
            "attn-aggregation" => self.aggregation.as_str().into(),
            "alpha" => self.alpha.to_string(),
            "temperature" => self.temperature.to_string(),
            "map" => self.map_kind.to_string(),
            "map-init" => self.map_init.to_string(),
            "map-lr" => format!("{:e}", self.map_lr),
            "skip-stage1" => self.skip_stage1.to_string(),
            "stage1-epochs" => self.stage1_epochs.to_string(),
            "stage2-epochs" => self.stage2_epochs.to_string(),
            "lr1" => format!("{:e}", self.stage1_lr),
            "lr2" => format!("{:e}", self.stage2_lr),
            "batch1" => self.stage1_batch.to_string(),
            "batch2" => self.stage2_batch.to_string(),
            "teacher-epochs" => self.teacher_epochs.to_string(),
            "teacher-lr" => format!("{:e}", self.teacher_lr),
            "teacher-batch" => self.teacher_batch.to_string(),
            "teacher-layers" => self.teacher_layers.to_string(),
            "teacher-d-model" => self.teacher_d_model.to_string(),
            "teacher-heads" => self.teacher_heads.to_string(),
            "teacher-d-ff" => self.teacher_d_ff.to_string(),
            "student-layers" => self.student_layers.to_string(),
            "student-d-model" => self.student_d_model.to_string(),
            "student-heads" => self.student_heads.to_string(),
            "student-d-ff" => self.student_d_ff.to_string(),
            "teacher" => path(&self.teacher),
            "out" => path(&self.out),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// The resolved configuration as a document that `parse_document`
    /// reads back to the same value.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_document(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let key = k.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", i + 1)));
        }
        entries.push((key.to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_task() {
        let c = RunConfig::defaults(TaskName::ColaLike);
        assert_eq!((c.seed, c.stage1_epochs, c.stage2_epochs, c.stage1_batch), (42, 30, 3, 32));
        assert_eq!(c.stage1_lr, 5e-5);
        assert_eq!(RunConfig::defaults(TaskName::StsbLike).stage1_epochs, 20);
    }

    #[test]
    fn later_entries_win_and_unknown_keys_fail() {
        let mut entries = parse_document("# comment\ntask = stsb-like\nalpha = 0.25 # inline\n").unwrap();
        entries.push(("alpha".into(), "1".into()));
        let c = RunConfig::resolve(&entries).unwrap();
        assert_eq!((c.task, c.alpha, c.stage1_epochs), (TaskName::StsbLike, 1.0, 20));
        assert!(parse_document("bogus = 1").is_err());
        assert!(RunConfig::resolve(&[("alpha".into(), "2".into())]).is_err());
    }

    #[test]
    fn render_roundtrips() {
        let mut c = RunConfig::defaults(TaskName::StsbLike);
        c.map_kind = MappingKind::Learnable;
        c.map_init = LearnableInit::BaseLike;
        c.data_fraction = 0.5;
        c.out = Some(PathBuf::from("runs/a"));
        let text = c.render();
        let back = RunConfig::resolve(&parse_document(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }
}
