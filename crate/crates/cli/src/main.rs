//! `distill`: teacher training, distillation runs, sweeps, gradient checks
//! and dataset dumps.
//!
//! Exit codes: 0 success, 1 run failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use distill_core::checkpoint;
use distill_core::config::{parse_document, RunConfig, KEYS};
use distill_core::gradcheck::GradCheckOptions;
use distill_core::losses::AttentionKind;
use distill_core::mapping::MappingKind;
use distill_core::pipeline::{run_experiment, train_teacher, Observer};
use distill_core::stream::MetricsWriter;
use distill_core::suite::{all_cases, check_case};
use distill_core::sweep::{best_per_variant, expand, parse_axis, render_table, CellResult};
use distill_core::tasks::{generate_task, TaskName};
use distill_core::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

const CONFIG_HELP: &str = "\
Configuration file: `--config PATH` reads `key = value` lines (`#` starts a
comment). Every flag below except --config has a key of the same name
without the leading dashes, and every key has a flag. Values resolve as
built-in defaults, then the file, then flags. Unknown keys are rejected.

Keys: task seed data-fraction train-size dev-size attn-loss kl-direction
attn-aggregation alpha temperature map map-init map-lr skip-stage1
stage1-epochs stage2-epochs lr1 lr2 batch1 batch2 teacher-epochs teacher-lr
teacher-batch teacher-layers teacher-d-model teacher-heads teacher-d-ff
student-layers student-d-model student-heads student-d-ff teacher out

Exit codes: 0 success, 1 run failure, 2 usage error.";

#[derive(Parser)]
#[command(name = "distill", version, about = "Desk-scale transformer distillation lab", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a teacher on a synthetic task and write its checkpoint.
    #[command(after_help = CONFIG_HELP)]
    TrainTeacher(RunArgs),
    /// Distill a student from a teacher checkpoint.
    #[command(after_help = CONFIG_HELP)]
    Distill(RunArgs),
    /// Run a grid of distillation runs as subprocesses and tabulate the best
    /// dev metric per variant.
    #[command(after_help = CONFIG_HELP)]
    Sweep(SweepArgs),
    /// Finite-difference check of the stage-one gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the generated train and dev splits as text files.
    #[command(after_help = CONFIG_HELP)]
    DumpData(RunArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Configuration document.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["cola-like", "stsb-like"])]
    task: Option<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the training split used, in (0, 1].
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    /// Attention loss.
    #[arg(long, value_parser = ["mse", "kl"])]
    attn_loss: Option<String>,
    /// Argument order of the attention KL divergence.
    #[arg(long, value_parser = ["student-first", "teacher-first"])]
    kl_direction: Option<String>,
    /// Mix teacher attention across a block before or after the softmax (KL only).
    #[arg(long, value_parser = ["pre-softmax", "post-softmax"])]
    attn_aggregation: Option<String>,
    /// Hidden/attention weighting; 0.5 weights both by one.
    #[arg(long)]
    alpha: Option<f64>,
    /// Softmax temperature of the prediction loss.
    #[arg(long)]
    temperature: Option<f64>,
    /// Teacher-to-student layer mapping.
    #[arg(long, value_parser = ["base", "random", "mean", "learnable"])]
    map: Option<String>,
    /// Initialization of a learnable mapping.
    #[arg(long, value_parser = ["uniform", "base-like"])]
    map_init: Option<String>,
    /// Learning rate of the learnable mapping.
    #[arg(long)]
    map_lr: Option<f64>,
    /// Go straight to prediction-layer distillation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = ["true", "false"])]
    skip_stage1: Option<String>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    /// Stage-one learning rate.
    #[arg(long)]
    lr1: Option<f64>,
    /// Stage-two learning rate.
    #[arg(long)]
    lr2: Option<f64>,
    /// Stage-one batch size.
    #[arg(long)]
    batch1: Option<usize>,
    /// Stage-two batch size.
    #[arg(long)]
    batch2: Option<usize>,
    #[arg(long, visible_alias = "epochs")]
    teacher_epochs: Option<usize>,
    #[arg(long)]
    teacher_lr: Option<f64>,
    #[arg(long)]
    teacher_batch: Option<usize>,
    #[arg(long)]
    teacher_layers: Option<usize>,
    #[arg(long)]
    teacher_d_model: Option<usize>,
    #[arg(long)]
    teacher_heads: Option<usize>,
    #[arg(long)]
    teacher_d_ff: Option<usize>,
    #[arg(long)]
    student_layers: Option<usize>,
    #[arg(long)]
    student_d_model: Option<usize>,
    #[arg(long)]
    student_heads: Option<usize>,
    #[arg(long)]
    student_d_ff: Option<usize>,
    /// Teacher checkpoint.
    #[arg(long, value_name = "PATH")]
    teacher: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    /// Flag values as configuration entries, in key order.
    fn entries(&self) -> Vec<(String, String)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let values: Vec<(&str, Option<String>)> = vec![
            ("task", self.task.clone()),
            ("seed", s(&self.seed)),
            ("data-fraction", s(&self.data_fraction)),
            ("train-size", s(&self.train_size)),
            ("dev-size", s(&self.dev_size)),
            ("attn-loss", self.attn_loss.clone()),
            ("kl-direction", self.kl_direction.clone()),
            ("attn-aggregation", self.attn_aggregation.clone()),
            ("alpha", s(&self.alpha)),
            ("temperature", s(&self.temperature)),
            ("map", self.map.clone()),
            ("map-init", self.map_init.clone()),
            ("map-lr", s(&self.map_lr)),
            ("skip-stage1", self.skip_stage1.clone()),
            ("stage1-epochs", s(&self.stage1_epochs)),
            ("stage2-epochs", s(&self.stage2_epochs)),
            ("lr1", s(&self.lr1)),
            ("lr2", s(&self.lr2)),
            ("batch1", s(&self.batch1)),
            ("batch2", s(&self.batch2)),
            ("teacher-epochs", s(&self.teacher_epochs)),
            ("teacher-lr", s(&self.teacher_lr)),
            ("teacher-batch", s(&self.teacher_batch)),
            ("teacher-layers", s(&self.teacher_layers)),
            ("teacher-d-model", s(&self.teacher_d_model)),
            ("teacher-heads", s(&self.teacher_heads)),
            ("teacher-d-ff", s(&self.teacher_d_ff)),
            ("student-layers", s(&self.student_layers)),
            ("student-d-model", s(&self.student_d_model)),
            ("student-heads", s(&self.student_heads)),
            ("student-d-ff", s(&self.student_d_ff)),
            ("teacher", path(&self.teacher)),
            ("out", path(&self.out)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        values
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect()
    }

    /// File entries followed by flag entries.
    fn all_entries(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut entries = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_document(&text).map_err(|e| Failure::Usage(e.to_string()))?
            }
            None => Vec::new(),
        };
        entries.extend(self.entries());
        Ok(entries)
    }

    fn resolve(&self) -> Result<(RunConfig, Vec<(String, String)>), Failure> {
        let entries = self.all_entries()?;
        let cfg = RunConfig::resolve(&entries).map_err(|e| Failure::Usage(e.to_string()))?;
        Ok((cfg, entries))
    }

    fn resolve_with_task(&self) -> Result<RunConfig, Failure> {
        let (cfg, entries) = self.resolve()?;
        if !entries.iter().any(|(k, _)| k == "task") {
            return Err(missing_task());
        }
        Ok(cfg)
    }
}

fn missing_task() -> Failure {
    let names: Vec<&str> = TaskName::ALL.iter().map(TaskName::as_str).collect();
    Failure::Usage(format!("--task is required; valid tasks: {}", names.join(", ")))
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Grid axis `key=v1,v2,...` over configuration keys; repeat for more
    /// axes. lr1, lr2, batch1 and batch2 are tuning axes, all other keys
    /// define variants. The table reports the stage-two lr and batch size of
    /// each variant's best cell.
    #[arg(long = "grid", value_name = "KEY=VALUES")]
    grid: Vec<String>,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one attention loss.
    #[arg(long, value_parser = ["mse", "kl"])]
    attn_loss: Option<String>,
    /// Restrict to one mapping.
    #[arg(long, value_parser = ["base", "random", "mean", "learnable"])]
    map: Option<String>,
    /// Restrict to one alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 12)]
    max_coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Scale analytic gradients by 1.1 before comparing (harness self-test).
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::TrainTeacher(args) => cmd_train_teacher(&args),
        Cmd::Distill(args) => cmd_distill(&args),
        Cmd::Sweep(args) => cmd_sweep(&args),
        Cmd::Gradcheck(args) => cmd_gradcheck(&args),
        Cmd::DumpData(args) => cmd_dump_data(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("see `distill --help`");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn out_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn cmd_train_teacher(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve_with_task()?;
    let dir = out_dir(&cfg, "runs/teacher");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved"), cfg.render())?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let mut obs = Observer { metrics: Some(MetricsWriter::append(&metrics)?), ..Observer::default() };
    let (_, outcome) = train_teacher(&cfg, &mut obs)?;
    let ckpt = dir.join("teacher.ckpt");
    checkpoint::save(&outcome.params, &ckpt)?;
    let metric = cfg.task.kind().metric_name();
    let mut report = format!("task: {}\ndev {metric}: {}\n", cfg.task, outcome.dev_metric);
    if let Some(a) = outcome.train_accuracy {
        report.push_str(&format!("train accuracy: {a}\n"));
    }
    report.push_str(&format!("checkpoint: {}\n--- resolved configuration ---\n{}", ckpt.display(), cfg.render()));
    fs::write(dir.join("report.txt"), report)?;
    println!("task={} dev_{metric}={} checkpoint={}", cfg.task, outcome.dev_metric, ckpt.display());
    Ok(())
}

fn cmd_distill(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve_with_task()?;
    let Some(teacher) = &cfg.teacher else {
        return Err(Failure::Run(
            "no teacher checkpoint given; pass --teacher PATH (create one with `distill train-teacher --task TASK --out DIR`)"
                .into(),
        ));
    };
    if !teacher.is_file() {
        return Err(Failure::Run(format!(
            "teacher checkpoint {} not found; create one with `distill train-teacher --task {} --out DIR`",
            teacher.display(),
            cfg.task
        )));
    }
    let dir = out_dir(&cfg, "runs/distill");
    let report = run_experiment(&cfg, &dir)?;
    println!(
        "task={} final_dev_{}={} out={}",
        cfg.task,
        report.metric,
        report.final_dev_metric,
        dir.display()
    );
    Ok(())
}

fn cmd_dump_data(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve_with_task()?;
    let dir = out_dir(&cfg, "runs/data");
    fs::create_dir_all(&dir)?;
    let data = generate_task(&cfg.task_spec())?;
    for (name, split) in [("train.txt", &data.train), ("dev.txt", &data.dev)] {
        let path = dir.join(name);
        split.write_to(std::io::BufWriter::new(fs::File::create(&path)?))?;
        println!("{} examples -> {}", split.len(), path.display());
    }
    Ok(())
}

/// `final dev <metric>: <value>` from a run report.
fn read_final_metric(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join("report.txt")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("final dev ").and_then(|rest| rest.split_once(": ")))
        .and_then(|(_, v)| v.trim().parse().ok())
}

/// Entries as flags for a child process; a repeated key keeps its last value.
fn config_args(entries: &[(String, String)]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, (k, v)) in entries.iter().enumerate() {
        if entries[i + 1..].iter().any(|(later, _)| later == k) {
            continue;
        }
        if k == "skip-stage1" {
            out.push(format!("--{k}={v}"));
        } else {
            out.push(format!("--{k}"));
            out.push(v.clone());
        }
    }
    out
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    if args.grid.is_empty() {
        return Err(Failure::Usage("empty sweep grid; give at least one --grid KEY=V1,V2".into()));
    }
    let axes = args
        .grid
        .iter()
        .map(|g| parse_axis(g))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let cells = expand(&axes).map_err(|e| Failure::Usage(e.to_string()))?;
    if args.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let (base_cfg, base_entries) = args.run.resolve()?;
    if !base_entries.iter().chain(cells[0].entries.iter()).any(|(k, _)| k == "task") {
        return Err(missing_task());
    }
    for cell in &cells {
        let mut entries = base_entries.clone();
        entries.extend(cell.entries.iter().cloned());
        RunConfig::resolve(&entries).map_err(|e| Failure::Usage(format!("cell {}: {e}", cell.variant())))?;
    }
    let root = out_dir(&base_cfg, "runs/sweep");
    fs::create_dir_all(&root)?;
    let exe = std::env::current_exe()?;
    let base: Vec<(String, String)> = base_entries.into_iter().filter(|(k, _)| k != "out").collect();

    let teacher_entry = match &base_cfg.teacher {
        Some(_) => Vec::new(),
        None => {
            if axes.iter().any(|a| a.key == "task" || a.key.starts_with("teacher")) {
                return Err(Failure::Usage(
                    "sweeping task or teacher settings needs one sweep per teacher; pass --teacher".into(),
                ));
            }
            let dir = root.join("teacher");
            let status = Command::new(&exe)
                .arg("train-teacher")
                .args(config_args(&base))
                .arg("--out")
                .arg(&dir)
                .status()?;
            if !status.success() {
                return Err(Failure::Run("teacher training for the sweep failed".into()));
            }
            vec![("teacher".to_string(), dir.join("teacher.ckpt").display().to_string())]
        }
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(usize, CellResult, String)>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                let dir = root.join(format!("cell-{i:03}"));
                let mut entries = base.clone();
                entries.extend(teacher_entry.iter().cloned());
                entries.extend(cell.entries.iter().cloned());
                let cfg = RunConfig::resolve(&entries).expect("validated above");
                let (lr, batch_size) = (cfg.stage2_lr, cfg.stage2_batch);
                let status = Command::new(&exe)
                    .arg("distill")
                    .args(config_args(&entries))
                    .arg("--out")
                    .arg(&dir)
                    .output();
                let (metric, status_text) = match status {
                    Ok(o) if o.status.success() => match read_final_metric(&dir) {
                        Some(m) => (Some(m), "ok".to_string()),
                        None => (None, "no metric in report".to_string()),
                    },
                    Ok(o) => (None, format!("exit {}", o.status.code().unwrap_or(-1))),
                    Err(e) => (None, format!("spawn failed: {e}")),
                };
                let result = CellResult { variant: cell.variant(), metric, lr, batch_size };
                results.lock().expect("results lock")[i] = Some((i, result, status_text));
            });
        }
    });
    let results: Vec<(usize, CellResult, String)> =
        results.into_inner().expect("results lock").into_iter().flatten().collect();

    let mut cells_csv = String::from("cell,variant,lr,batch_size,status,metric\n");
    for (i, r, status) in &results {
        cells_csv.push_str(&format!(
            "{i},\"{}\",{:e},{},{status},{}\n",
            r.variant.replace('"', "\"\""),
            r.lr,
            r.batch_size,
            r.metric.map_or(String::new(), |m| m.to_string())
        ));
    }
    fs::write(root.join("cells.csv"), cells_csv)?;
    let rows: Vec<CellResult> = results.into_iter().map(|(_, r, _)| r).collect();
    let table = render_table(&best_per_variant(&rows));
    fs::write(root.join("sweep.csv"), &table)?;
    print!("{table}");
    let failed = rows.iter().filter(|r| r.metric.is_none()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see {}", rows.len(), root.join("cells.csv").display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    let attention: Option<AttentionKind> = args.attn_loss.as_deref().map(str::parse).transpose()?;
    let map: Option<MappingKind> = args.map.as_deref().map(str::parse).transpose()?;
    let cases: Vec<_> = all_cases()
        .into_iter()
        .filter(|c| attention.is_none_or(|a| a == c.attention))
        .filter(|c| map.is_none_or(|m| m == c.map))
        .filter(|c| args.alpha.is_none_or(|a| a == c.alpha))
        .collect();
    if cases.is_empty() {
        return Err(Failure::Usage("no gradient-check case matches the filters".into()));
    }
    let opts = GradCheckOptions {
        step: args.step,
        max_coords: args.max_coords,
        analytic_scale: if args.corrupt_gradient { 1.1 } else { 1.0 },
        ..GradCheckOptions::default()
    };
    let mut stdout = std::io::stdout().lock();
    let mut worst: Option<(String, distill_core::gradcheck::CoordCheck)> = None;
    for case in &cases {
        let report = check_case(case, &opts).map_err(|e| match e {
            Error::InvalidInput(m) => Failure::Usage(m),
            other => Failure::Run(other.to_string()),
        })?;
        for (group, c) in report.by_group() {
            writeln!(stdout, "{} {group} max_rel_error={:.3e}", case.label(), c.rel_error)?;
        }
        if let Some(w) = report.worst() {
            if worst.as_ref().is_none_or(|(_, prev)| w.rel_error > prev.rel_error) {
                worst = Some((case.label(), w.clone()));
            }
        }
    }
    let (label, w) = worst.expect("at least one case");
    if w.rel_error < GRADCHECK_TOLERANCE {
        writeln!(
            stdout,
            "PASS max_rel_error={:.3e} over {} cases (worst: {label} {}[{}] analytic={:e} numeric={:e})",
            w.rel_error,
            cases.len(),
            w.param,
            w.coord,
            w.analytic,
            w.numeric
        )?;
        Ok(())
    } else {
        Err(Failure::Run(format!(
            "gradient check failed: {label} {}[{}] analytic={:e} numeric={:e} rel_error={:.3e}",
            w.param, w.coord, w.analytic, w.numeric, w.rel_error
        )))
    }
}
