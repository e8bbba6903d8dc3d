//! Teacher fine-tuning and the two distillation stages.
//!
//! Stage one trains the student body and the width projections on the
//! embedding, hidden and attention losses; stage two trains the whole
//! student on the prediction loss alone. `run_experiment` chains them and
//! writes every artifact of a run directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{prediction_loss, supervised_loss, transformer_layer_loss, LossBreakdown, LossConfig, ProjectionParams};
use crate::mapping::{BlockPartition, MappingKind, MappingState, TrajectoryWriter};
use crate::metrics::{accuracy, task_metric};
use crate::model::{check_compatible, EncoderParams, ModelConfig, TokenBatch, WeightInit};
use crate::optim::{Adam, AdamConfig};
use crate::stream::{EpochRecord, MetricsWriter, Record, Stage, StepRecord};
use crate::tape::Tape;
use crate::tasks::{batch_iterator, generate_task, Dataset, TaskData, TaskKind};
use crate::tensor::Tensor;

/// Examples per evaluation chunk.
const EVAL_CHUNK: usize = 64;

/// Epoch count, learning rate, batch size and shuffle seed of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Collects emitted records and mirrors them to the metrics stream and the
/// trajectory file when those are attached.
#[derive(Default)]
pub struct Observer {
    pub records: Vec<Record>,
    pub metrics: Option<MetricsWriter>,
    pub trajectory: Option<TrajectoryWriter<File>>,
}

impl Observer {
    pub fn emit(&mut self, record: Record) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.write(&record)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(move |r| match r {
            Record::Step(s) if s.stage == stage => Some(s),
            _ => None,
        })
    }
}

fn ensure_finite(value: f64, stage: Stage, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage: stage.as_str().into(), step })
    }
}

/// Head outputs for every example of `ds`, flattened row-major.
pub fn predict_dataset(params: &EncoderParams, ds: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let run = |chunk: &[usize]| -> Result<Vec<f64>> {
        let (tokens, _) = ds.batch(chunk)?;
        Ok(params.predict(&tokens)?.into_data())
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<Vec<f64>>> = idx.par_chunks(EVAL_CHUNK).map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<Vec<f64>>> = idx.chunks(EVAL_CHUNK).map(run).collect();
    let mut out = Vec::with_capacity(ds.len() * params.config.n_outputs);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Task metric (MCC or Pearson) of `params` on `ds`.
pub fn evaluate(params: &EncoderParams, ds: &Dataset) -> Result<f64> {
    task_metric(ds.kind, &predict_dataset(params, ds)?, &ds.labels())
}

/// Epoch-level metric; an undefined metric is logged as `null`.
fn epoch_metric(params: &EncoderParams, ds: &Dataset) -> Result<Option<f64>> {
    match evaluate(params, ds) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn train_accuracy(params: &EncoderParams, ds: &Dataset) -> Result<Option<f64>> {
    Ok(match ds.kind {
        TaskKind::Classification => Some(accuracy(&predict_dataset(params, ds)?, &ds.labels())),
        TaskKind::Regression => None,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub params: EncoderParams,
    pub dev_metric: f64,
    pub train_accuracy: Option<f64>,
    pub epoch_means: Vec<f64>,
}

/// Supervised training from a seeded initialization: cross-entropy for
/// classification, MSE for regression.
pub fn finetune_teacher(
    data: &TaskData,
    config: ModelConfig,
    settings: &TrainSettings,
    obs: &mut Observer,
) -> Result<TeacherOutcome> {
    let mut params = EncoderParams::init(config, settings.seed)?;
    let kind = data.train.kind;
    if config.n_outputs != kind.n_outputs() {
        return Err(Error::Config(format!(
            "{} task needs {} head outputs, model has {}",
            kind.as_str(),
            kind.n_outputs(),
            config.n_outputs
        )));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(settings.lr));
    let mut step = 0usize;
    let mut epoch_means = Vec::new();
    for epoch in 0..settings.epochs {
        let mut losses = Vec::new();
        for batch in batch_iterator(data.train.len(), settings.batch, settings.seed, epoch as u64)? {
            let (tokens, labels) = data.train.batch(&batch)?;
            let mut tape = Tape::new();
            let vars = params.store.bind(&mut tape);
            let trace = params.forward_taped(&mut tape, &vars, &tokens)?;
            let loss = supervised_loss(&mut tape, trace.logits, &labels, kind)?;
            let value = tape.item(loss);
            ensure_finite(value, Stage::Teacher, step)?;
            tape.backward(loss)?;
            params.store.write_grads(&tape, &vars)?;
            let mut all: Vec<&mut Tensor> = params.store.tensors_mut().iter_mut().collect();
            adam.step(&mut all)?;
            obs.emit(Record::Step(StepRecord {
                step: step as u64,
                stage: Stage::Teacher,
                epoch: epoch as u64,
                loss_total: value,
                loss_embd: None,
                loss_hidn: None,
                loss_attn: None,
                loss_pred: Some(value),
                alpha: None,
                map_kind: None,
            }))?;
            losses.push(value);
            step += 1;
        }
        let m = mean(&losses);
        epoch_means.push(m);
        obs.emit(Record::Epoch(EpochRecord {
            stage: Stage::Teacher,
            epoch: epoch as u64,
            mean_loss: m,
            metric: kind.metric_name().into(),
            dev_metric: epoch_metric(&params, &data.dev)?,
        }))?;
    }
    params.store.clear_grads();
    Ok(TeacherOutcome {
        dev_metric: evaluate(&params, &data.dev)?,
        train_accuracy: train_accuracy(&params, &data.train)?,
        params,
        epoch_means,
    })
}

/// Stage-one loss and gradients for one batch at step `k`. Gradients are
/// left on the student store, the projections and (for a learnable map) θ.
/// The teacher runs without a tape.
pub fn stage1_gradients(
    teacher: &EncoderParams,
    student: &mut EncoderParams,
    proj: &mut ProjectionParams,
    mapping: &mut MappingState,
    loss_cfg: &LossConfig,
    tokens: &TokenBatch,
    k: usize,
) -> Result<(LossBreakdown, Tape)> {
    let target = teacher.forward_with_trace(tokens)?;
    let mut tape = Tape::new();
    let s_vars = student.store.bind(&mut tape);
    let (p_vars, pv) = proj.bind(&mut tape);
    let theta = mapping.bind(&mut tape);
    let trace = student.forward_taped(&mut tape, &s_vars, tokens)?;
    let (loss, breakdown) = transformer_layer_loss(&mut tape, &trace, &target, mapping, theta, pv, loss_cfg, k)?;
    ensure_finite(breakdown.total, Stage::Stage1, k)?;
    tape.backward(loss)?;
    student.store.write_grads(&tape, &s_vars)?;
    proj.store.write_grads(&tape, &p_vars)?;
    mapping.take_grad(&tape, theta)?;
    Ok((breakdown, tape))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Outcome {
    pub epoch_means: Vec<f64>,
    pub steps: usize,
}

impl Stage1Outcome {
    /// Final-epoch mean over first-epoch mean.
    pub fn loss_ratio(&self) -> Option<f64> {
        match (self.epoch_means.first(), self.epoch_means.last()) {
            (Some(a), Some(b)) if *a > 0.0 => Some(b / a),
            _ => None,
        }
    }
}

/// Transformer-layer distillation. Updates every student tensor except the
/// prediction head, plus the projections, with one optimizer; θ steps on
/// its own optimizer through the mapping.
#[allow(clippy::too_many_arguments)]
pub fn stage1_transformer_distill(
    teacher: &EncoderParams,
    student: &mut EncoderParams,
    proj: &mut ProjectionParams,
    mapping: &mut MappingState,
    loss_cfg: &LossConfig,
    settings: &TrainSettings,
    train: &Dataset,
    obs: &mut Observer,
) -> Result<Stage1Outcome> {
    check_compatible(&teacher.config, &student.config)?;
    let head = student.ids.head();
    let mut adam = Adam::new(AdamConfig::with_lr(settings.lr));
    let mut k = 0usize;
    let mut epoch_means = Vec::new();
    for epoch in 0..settings.epochs {
        let mut losses = Vec::new();
        for batch in batch_iterator(train.len(), settings.batch, settings.seed, epoch as u64)? {
            let (tokens, _) = train.batch(&batch)?;
            let (bd, _) = stage1_gradients(teacher, student, proj, mapping, loss_cfg, &tokens, k)?;
            {
                let mut body: Vec<&mut Tensor> = student
                    .store
                    .tensors_mut()
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| !head.iter().any(|h| h.0 == *i))
                    .map(|(_, t)| t)
                    .collect();
                body.extend(proj.store.tensors_mut().iter_mut());
                adam.step(&mut body)?;
            }
            if mapping.kind == MappingKind::Learnable {
                mapping.map_step(k)?;
                if let Some(w) = obs.trajectory.as_mut() {
                    w.sync(mapping)?;
                }
            }
            obs.emit(Record::Step(StepRecord {
                step: k as u64,
                stage: Stage::Stage1,
                epoch: epoch as u64,
                loss_total: bd.total,
                loss_embd: Some(bd.embedding),
                loss_hidn: Some(bd.hidden),
                loss_attn: Some(bd.attention),
                loss_pred: None,
                alpha: Some(loss_cfg.alpha),
                map_kind: Some(mapping.kind.to_string()),
            }))?;
            losses.push(bd.total);
            k += 1;
        }
        let m = mean(&losses);
        epoch_means.push(m);
        obs.emit(Record::Epoch(EpochRecord {
            stage: Stage::Stage1,
            epoch: epoch as u64,
            mean_loss: m,
            metric: train.kind.metric_name().into(),
            dev_metric: None,
        }))?;
    }
    student.store.clear_grads();
    proj.store.clear_grads();
    Ok(Stage1Outcome { epoch_means, steps: k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Outcome {
    pub epoch_means: Vec<f64>,
    pub dev_metrics: Vec<Option<f64>>,
    pub steps: usize,
}

/// Prediction-layer distillation over every student tensor.
pub fn stage2_prediction_distill(
    teacher: &EncoderParams,
    student: &mut EncoderParams,
    temperature: f64,
    settings: &TrainSettings,
    data: &TaskData,
    obs: &mut Observer,
) -> Result<Stage2Outcome> {
    if teacher.config.n_outputs != student.config.n_outputs {
        return Err(Error::Config("teacher and student heads differ in width".into()));
    }
    let kind = data.train.kind;
    let mut adam = Adam::new(AdamConfig::with_lr(settings.lr));
    let mut step = 0usize;
    let mut out = Stage2Outcome { epoch_means: Vec::new(), dev_metrics: Vec::new(), steps: 0 };
    for epoch in 0..settings.epochs {
        let mut losses = Vec::new();
        for batch in batch_iterator(data.train.len(), settings.batch, settings.seed, epoch as u64)? {
            let (tokens, _) = data.train.batch(&batch)?;
            let target = teacher.predict(&tokens)?;
            let mut tape = Tape::new();
            let vars = student.store.bind(&mut tape);
            let trace = student.forward_taped(&mut tape, &vars, &tokens)?;
            let t = tape.constant(&target);
            let loss = prediction_loss(&mut tape, trace.logits, t, kind, temperature)?;
            let value = tape.item(loss);
            ensure_finite(value, Stage::Stage2, step)?;
            tape.backward(loss)?;
            student.store.write_grads(&tape, &vars)?;
            let mut all: Vec<&mut Tensor> = student.store.tensors_mut().iter_mut().collect();
            adam.step(&mut all)?;
            obs.emit(Record::Step(StepRecord {
                step: step as u64,
                stage: Stage::Stage2,
                epoch: epoch as u64,
                loss_total: value,
                loss_embd: None,
                loss_hidn: None,
                loss_attn: None,
                loss_pred: Some(value),
                alpha: None,
                map_kind: None,
            }))?;
            losses.push(value);
            step += 1;
        }
        let m = mean(&losses);
        let dev = epoch_metric(student, &data.dev)?;
        out.epoch_means.push(m);
        out.dev_metrics.push(dev);
        obs.emit(Record::Epoch(EpochRecord {
            stage: Stage::Stage2,
            epoch: epoch as u64,
            mean_loss: m,
            metric: kind.metric_name().into(),
            dev_metric: dev,
        }))?;
    }
    student.store.clear_grads();
    out.steps = step;
    Ok(out)
}

/// Parameter hashes taken around each stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fingerprints {
    pub teacher_before: String,
    pub teacher_after: String,
    pub head_before_stage1: String,
    pub head_after_stage1: String,
    pub projections_before_stage2: String,
    pub projections_after_stage2: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_echo: String,
    pub train_count: usize,
    pub dev_count: usize,
    pub metric: &'static str,
    pub teacher_dev_metric: f64,
    pub teacher_train_accuracy: Option<f64>,
    pub stage1: Option<Stage1Outcome>,
    pub stage2: Stage2Outcome,
    pub final_dev_metric: f64,
    /// Final `v(m)` rows of a learnable map.
    pub final_map_weights: Option<Vec<Vec<f64>>>,
    pub fingerprints: Fingerprints,
    pub wall_clock_secs: f64,
    pub trajectory_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn head_fingerprint(p: &EncoderParams) -> String {
    let mut s = crate::params::ParamStore::new();
    for id in p.ids.head() {
        s.add(p.store.name(id), p.store.get(id).clone());
    }
    s.fingerprint()
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "status: complete");
        self.render_body(&mut out);
        out
    }

    fn render_body(&self, out: &mut String) {
        let _ = writeln!(out, "train examples: {}", self.train_count);
        let _ = writeln!(out, "dev examples: {}", self.dev_count);
        let _ = writeln!(out, "teacher dev {}: {}", self.metric, self.teacher_dev_metric);
        if let Some(a) = self.teacher_train_accuracy {
            let _ = writeln!(out, "teacher train accuracy: {a}");
        }
        match &self.stage1 {
            Some(s1) => {
                let means: Vec<String> = s1.epoch_means.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "stage1 epoch mean loss: {}", means.join(" "));
                if let Some(r) = s1.loss_ratio() {
                    let _ = writeln!(out, "stage1 final/first loss ratio: {r}");
                }
            }
            None => {
                let _ = writeln!(out, "stage1: skipped");
            }
        }
        let devs: Vec<String> = self
            .stage2
            .dev_metrics
            .iter()
            .map(|d| d.map_or("undefined".into(), |v| v.to_string()))
            .collect();
        let _ = writeln!(out, "stage2 dev {} per epoch: {}", self.metric, devs.join(" "));
        let _ = writeln!(out, "final dev {}: {}", self.metric, self.final_dev_metric);
        if let Some(rows) = &self.final_map_weights {
            for (m, row) in rows.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(f64::to_string).collect();
                let _ = writeln!(out, "final v({}): {}", m + 1, vals.join(" "));
            }
        }
        if let Some(p) = &self.trajectory_path {
            let _ = writeln!(out, "trajectory: {}", p.display());
        }
        let _ = writeln!(out, "wall clock seconds: {:.3}", self.wall_clock_secs);
        let _ = writeln!(out, "--- resolved configuration ---");
        out.push_str(&self.config_echo);
    }
}

fn build_mapping(cfg: &RunConfig) -> Result<MappingState> {
    let partition = BlockPartition::new(cfg.teacher_layers, cfg.student_layers)?;
    Ok(match cfg.map_kind {
        MappingKind::Learnable => MappingState::learnable(partition, cfg.map_init, cfg.map_lr),
        kind => MappingState::new(kind, partition, cfg.seed),
    })
}

/// Seeds derived from the run seed for each independent random source.
pub fn student_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn projection_seed(seed: u64) -> u64 {
    seed.wrapping_add(2)
}

fn teacher_settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings { epochs: cfg.teacher_epochs, lr: cfg.teacher_lr, batch: cfg.teacher_batch, seed: cfg.seed }
}

/// Trains (or loads) a teacher as configured, without distilling.
pub fn train_teacher(cfg: &RunConfig, obs: &mut Observer) -> Result<(TaskData, TeacherOutcome)> {
    cfg.validate()?;
    let data = generate_task(&cfg.task_spec())?;
    let outcome = finetune_teacher(&data, cfg.teacher_config(), &teacher_settings(cfg), obs)?;
    Ok((data, outcome))
}

fn load_teacher(path: &Path, cfg: &RunConfig, data: &TaskData) -> Result<TeacherOutcome> {
    let params = checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!(
            "cannot read teacher checkpoint {}: {io}; train one with `distill train-teacher`",
            path.display()
        )),
        other => other,
    })?;
    let want = cfg.teacher_config();
    if params.config != want {
        return Err(Error::Config(format!(
            "teacher checkpoint {} has config {:?}, run expects {:?}",
            path.display(),
            params.config,
            want
        )));
    }
    Ok(TeacherOutcome {
        dev_metric: evaluate(&params, &data.dev)?,
        train_accuracy: train_accuracy(&params, &data.train)?,
        params,
        epoch_means: Vec::new(),
    })
}

const STAGE_LABELS: [&str; 4] = ["data", "teacher", "stage1", "stage2"];

/// Full run into `out_dir`: teacher, optional stage one, stage two, final
/// evaluation. On failure the metrics stream ends with an abort record and
/// `report.txt` names the failed stage; finished artifacts are kept.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let echo = cfg.render();
    fs::write(out_dir.join("config.resolved"), &echo)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    let mut obs = Observer { metrics: Some(MetricsWriter::append(&metrics_path)?), ..Observer::default() };
    let started = Instant::now();
    let mut stage = 0usize;
    let result = run_stages(cfg, out_dir, &echo, &mut obs, &mut stage, started);
    match result {
        Ok(report) => {
            fs::write(out_dir.join("report.txt"), report.render())?;
            Ok(report)
        }
        Err(e) => {
            let failed = [Stage::Teacher, Stage::Teacher, Stage::Stage1, Stage::Stage2][stage];
            let _ = obs.emit(Record::Abort { stage: failed, message: e.to_string() });
            let mut text = format!("status: aborted in {}\nerror: {e}\n", STAGE_LABELS[stage]);
            let _ = writeln!(text, "completed stages: {}", STAGE_LABELS[..stage].join(" "));
            let _ = writeln!(text, "--- resolved configuration ---");
            text.push_str(&echo);
            fs::write(out_dir.join("report.txt"), text)?;
            Err(e)
        }
    }
}

fn run_stages(
    cfg: &RunConfig,
    out_dir: &Path,
    echo: &str,
    obs: &mut Observer,
    stage: &mut usize,
    started: Instant,
) -> Result<RunReport> {
    let data = generate_task(&cfg.task_spec())?;
    obs.emit(Record::Data {
        task: cfg.task.to_string(),
        train_count: data.train.len(),
        dev_count: data.dev.len(),
    })?;
    *stage = 1;
    let teacher = match &cfg.teacher {
        Some(path) => load_teacher(path, cfg, &data)?,
        None => finetune_teacher(&data, cfg.teacher_config(), &teacher_settings(cfg), obs)?,
    };
    checkpoint::save(&teacher.params, &out_dir.join("teacher.ckpt"))?;
    let mut fp = Fingerprints { teacher_before: teacher.params.store.fingerprint(), ..Fingerprints::default() };

    let mut student = EncoderParams::init_with(cfg.student_config(), student_seed(cfg.seed), WeightInit::Small)?;
    let mut proj = ProjectionParams::init(cfg.student_d_model, cfg.teacher_d_model, projection_seed(cfg.seed));
    let mut mapping = build_mapping(cfg)?;
    let loss_cfg = cfg.loss_config();
    let partial = out_dir.join("student.partial.ckpt");

    *stage = 2;
    fp.head_before_stage1 = head_fingerprint(&student);
    let mut trajectory_path = None;
    let stage1 = if cfg.skip_stage1 {
        None
    } else {
        if mapping.kind == MappingKind::Learnable {
            let path = out_dir.join("trajectory.csv");
            obs.trajectory = Some(TrajectoryWriter::new(File::create(&path)?)?);
            trajectory_path = Some(path);
        }
        let settings = TrainSettings { epochs: cfg.stage1_epochs, lr: cfg.stage1_lr, batch: cfg.stage1_batch, seed: cfg.seed };
        let outcome = stage1_transformer_distill(
            &teacher.params,
            &mut student,
            &mut proj,
            &mut mapping,
            &loss_cfg,
            &settings,
            &data.train,
            obs,
        );
        obs.trajectory = None;
        if outcome.is_err() {
            checkpoint::save(&student, &partial)?;
        }
        Some(outcome?)
    };
    fp.head_after_stage1 = head_fingerprint(&student);

    *stage = 3;
    fp.projections_before_stage2 = proj.store.fingerprint();
    let settings = TrainSettings { epochs: cfg.stage2_epochs, lr: cfg.stage2_lr, batch: cfg.stage2_batch, seed: cfg.seed };
    let stage2 = stage2_prediction_distill(&teacher.params, &mut student, cfg.temperature, &settings, &data, obs);
    if stage2.is_err() {
        checkpoint::save(&student, &partial)?;
    }
    let stage2 = stage2?;
    fp.projections_after_stage2 = proj.store.fingerprint();
    fp.teacher_after = teacher.params.store.fingerprint();

    let final_dev_metric = evaluate(&student, &data.dev)?;
    checkpoint::save(&student, &out_dir.join("student.ckpt"))?;
    let final_map_weights = match mapping.kind {
        MappingKind::Learnable => Some(mapping.current_weights()?),
        _ => None,
    };
    Ok(RunReport {
        config_echo: echo.to_string(),
        train_count: data.train.len(),
        dev_count: data.dev.len(),
        metric: data.train.kind.metric_name(),
        teacher_dev_metric: teacher.dev_metric,
        teacher_train_accuracy: teacher.train_accuracy,
        stage1,
        stage2,
        final_dev_metric,
        final_map_weights,
        fingerprints: fp,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        trajectory_path,
        out_dir: out_dir.to_path_buf(),
    })
}
