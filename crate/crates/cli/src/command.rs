//! Subcommands and their execution.
//!
//! Checkpoints and tables are written into the run directory under fixed
//! names, so later commands find the outputs of earlier ones:
//!
//! | file                    | written by                         |
//! |-------------------------|------------------------------------|
//! | `teacher.ckpt`          | `train-teacher`                    |
//! | `stage1-b<K>.ckpt`      | `train-student --stage 1`          |
//! | `two_stage-b<K>.ckpt`   | `train-student --stage 2`          |
//! | `end2end-b<K>.ckpt`     | `train-baseline --kind end2end`    |
//! | `crbq.ckpt`             | `train-baseline --kind crbq`       |
//! | `head-<task>.ckpt`      | `finetune-head`                    |
//! | `rd.csv`, `rd.dat`      | `eval-rd`                          |
//! | `latency-<run>.csv`     | `run-split`                        |
//! | `scenarios.csv`         | `latency-sim`                      |
//! | `summary.json`          | `sweep`                            |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Subcommand, ValueEnum};
use esplit_core::data::{Dataset, Task};
use esplit_core::layers::{build_student, Checkpoint, ModelSpec};
use esplit_core::report::{self, LatencyRow, RdRow};
use esplit_core::split_runtime::{compare_scenarios, run_split, summarize, LatencySummary, ScenarioRow, Transport};
use esplit_core::training::{self, RdPoint, TeacherTargets, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{Run, RunManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    End2end,
    Crbq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Dat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Subcommand)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Train the teacher classifier.
    TrainTeacher {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Stage 1 (feature distillation with rate) or stage 2 (logit distillation).
    TrainStudent {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Overrides `student.betas[beta_id]` (or appends it when `beta_id` is one past the end).
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        beta_id: u16,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a comparison model: end-to-end entropic student or CR+BQ.
    TrainBaseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        /// Overrides `end2end.betas[beta_id]`.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        beta_id: u16,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a new head for a task on a frozen student encoder and decoder.
    FinetuneHead {
        #[arg(long)]
        task: Task,
        /// Student to attach to; defaults to `heads.base_beta_id`.
        #[arg(long)]
        base_beta_id: Option<u16>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Measure rate and accuracy of checkpoints on the validation set.
    EvalRd {
        /// Checkpoint file names in the run directory; default: every two-stage, end-to-end and CR+BQ model.
        #[arg(long = "ckpt")]
        checkpoints: Vec<String>,
    },
    /// Push validation samples through the client/channel/server pipeline.
    RunSplit {
        #[arg(long = "ckpt")]
        checkpoint: Option<String>,
        #[arg(long, default_value = "in-process")]
        transport: Transport,
        #[arg(long)]
        rate_bps: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare local, edge and split latency for the teacher and every two-stage student.
    LatencySim {
        #[arg(long)]
        rate_bps: Option<f64>,
    },
    /// Re-emit the rate–accuracy table as validated CSV or gnuplot data.
    Export {
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long, default_value = "rd.csv")]
        input: String,
        #[arg(long)]
        out: Option<String>,
    },
    /// Everything: teacher, β sweep, baselines, heads, evaluation and latency.
    Sweep,
    /// Replay the command recorded in a manifest into this run directory and
    /// check that every output hash matches.
    #[serde(skip)]
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher { .. } => "train-teacher",
            Command::TrainStudent { .. } => "train-student",
            Command::TrainBaseline { .. } => "train-baseline",
            Command::FinetuneHead { .. } => "finetune-head",
            Command::EvalRd { .. } => "eval-rd",
            Command::RunSplit { .. } => "run-split",
            Command::LatencySim { .. } => "latency-sim",
            Command::Export { .. } => "export",
            Command::Sweep => "sweep",
            Command::Rerun { .. } => "rerun",
        }
    }

    /// Folds command-line overrides into the configuration.
    pub fn apply_overrides(&self, cfg: &mut ExperimentConfig) -> CliResult<()> {
        fn set(list: &mut Vec<f64>, id: u16, v: f64, what: &str) -> CliResult<()> {
            let id = id as usize;
            match id.cmp(&list.len()) {
                std::cmp::Ordering::Less => list[id] = v,
                std::cmp::Ordering::Equal => list.push(v),
                std::cmp::Ordering::Greater => {
                    return Err(CliError::Config(format!("{what} id {id} skips past {} configured values", list.len())))
                }
            }
            Ok(())
        }
        match *self {
            Command::TrainTeacher { epochs } => {
                if let Some(e) = epochs {
                    cfg.teacher.epochs = e;
                }
            }
            Command::TrainStudent { stage, beta, beta_id, epochs } => {
                if let Some(b) = beta {
                    set(&mut cfg.student.betas, beta_id, b, "student beta")?;
                }
                if let Some(e) = epochs {
                    if stage == 1 {
                        cfg.student.stage1_epochs = e;
                    } else {
                        cfg.student.stage2_epochs = e;
                    }
                }
            }
            Command::TrainBaseline { kind, beta, beta_id, epochs } => {
                if let Some(b) = beta {
                    set(&mut cfg.end2end.betas, beta_id, b, "end2end beta")?;
                }
                if let Some(e) = epochs {
                    match kind {
                        BaselineKind::End2end => cfg.end2end.epochs = e,
                        BaselineKind::Crbq => cfg.crbq.epochs = e,
                    }
                }
            }
            Command::FinetuneHead { base_beta_id, epochs, .. } => {
                if let Some(b) = base_beta_id {
                    cfg.heads.base_beta_id = b;
                }
                if let Some(e) = epochs {
                    cfg.heads.epochs = e;
                }
            }
            Command::RunSplit { rate_bps, samples, .. } => {
                if let Some(r) = rate_bps {
                    cfg.channel.data_rate_bps = r;
                }
                if let Some(s) = samples {
                    cfg.split.samples = s;
                }
            }
            Command::LatencySim { rate_bps: Some(r) } => cfg.channel.data_rate_bps = r,
            _ => {}
        }
        cfg.validate()
    }
}

pub fn stage1_name(beta_id: u16) -> String {
    format!("stage1-b{beta_id}.ckpt")
}

pub fn two_stage_name(beta_id: u16) -> String {
    format!("two_stage-b{beta_id}.ckpt")
}

pub fn end2end_name(beta_id: u16) -> String {
    format!("end2end-b{beta_id}.ckpt")
}

pub const TEACHER: &str = "teacher.ckpt";
pub const CRBQ: &str = "crbq.ckpt";

pub fn head_name(task: Task) -> String {
    format!("head-{}.ckpt", task_name(task))
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Class => "class",
        Task::Parity => "parity",
    }
}

fn run_id(file: &str) -> String {
    file.trim_end_matches(".ckpt").to_string()
}

/// Accuracy of a frozen-encoder head and the encoder it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub task: Task,
    pub accuracy: f64,
    pub chance: f64,
    pub encoder_hash: String,
    pub decoder_hash: String,
}

/// The measurements of one sweep, also written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub teacher_accuracy: f64,
    pub two_stage: Vec<RdPoint>,
    pub end2end: Vec<RdPoint>,
    pub crbq: RdPoint,
    /// CR+BQ accuracy with the bottleneck left in floating point.
    pub crbq_float_accuracy: f64,
    pub base_beta_id: u16,
    pub base_encoder_hash: String,
    pub base_decoder_hash: String,
    pub heads: Vec<HeadSummary>,
    pub scenarios: Vec<ScenarioRow>,
    pub split: LatencySummary,
    /// SHA-256 of every checkpoint file.
    pub checkpoints: BTreeMap<String, String>,
}

/// A command in progress: the run directory plus data shared across steps.
struct Ctx {
    run: Run,
    train: Dataset,
    val: Dataset,
    targets: Option<TeacherTargets>,
}

impl Ctx {
    fn new(run: Run) -> CliResult<Self> {
        let (train, val) = run.cfg.datasets()?;
        let mut ctx = Self { run, train, val, targets: None };
        if let Some(p) = ctx.run.cfg.data.path.clone() {
            ctx.run.note_external(&p)?;
        }
        Ok(ctx)
    }

    fn val_indices(&self, n: usize) -> Vec<usize> {
        (0..n.min(self.val.len())).collect()
    }

    fn teacher_targets(&mut self) -> CliResult<TeacherTargets> {
        if let Some(t) = &self.targets {
            return Ok(t.clone());
        }
        let teacher = self.run.load_checkpoint(TEACHER)?;
        let t = training::teacher_targets(&teacher.model, &self.train)?;
        self.targets = Some(t.clone());
        Ok(t)
    }

    fn student_spec(&mut self) -> CliResult<(Checkpoint, ModelSpec)> {
        let teacher = self.run.load_checkpoint(TEACHER)?;
        let s = &self.run.cfg.student;
        let spec = ModelSpec::entropic_student(&teacher.model.spec, s.latent_channels, s.hidden)?;
        Ok((teacher, spec))
    }

    fn train_teacher(&mut self) -> CliResult<f64> {
        let spec = self.run.cfg.teacher_spec(&self.train);
        let trained = training::train_teacher(spec, &self.train, &self.run.cfg.teacher_train())?;
        self.run.save_checkpoint(TEACHER, &trained.checkpoint)?;
        self.targets = None;
        let idx = self.val_indices(self.val.len());
        Ok(training::evaluate_accuracy(&trained.checkpoint.model, &self.val, &idx, Task::Class)?)
    }

    fn train_stage1(&mut self, beta_id: u16) -> CliResult<()> {
        let beta = self.run.cfg.beta(beta_id)?;
        let targets = self.teacher_targets()?;
        let (teacher, spec) = self.student_spec()?;
        let cfg = TrainConfig { beta, ..self.run.cfg.student_train(1) };
        let student = build_student(&teacher.model, spec, cfg.seed.wrapping_add(beta_id as u64))?;
        let trained = training::stage1_distill(student, &targets, &self.train, &cfg, beta_id)?;
        self.run.save_checkpoint(&stage1_name(beta_id), &trained.checkpoint)?;
        Ok(())
    }

    fn train_stage2(&mut self, beta_id: u16) -> CliResult<()> {
        let stage1 = self.run.load_checkpoint(&stage1_name(beta_id))?;
        let targets = self.teacher_targets()?;
        let cfg = TrainConfig { beta: stage1.meta.beta.unwrap_or(1.0), ..self.run.cfg.student_train(2) };
        let trained = training::stage2_finetune(&stage1, &targets, &self.train, &cfg)?;
        self.run.save_checkpoint(&two_stage_name(beta_id), &trained.checkpoint)?;
        Ok(())
    }

    fn train_end2end(&mut self, beta_id: u16) -> CliResult<()> {
        let beta = *self.run.cfg.end2end.betas.get(beta_id as usize).ok_or_else(|| {
            CliError::Config(format!("end2end beta id {beta_id} out of range ({} configured)", self.run.cfg.end2end.betas.len()))
        })?;
        let (_, spec) = self.student_spec()?;
        let trained = training::train_end2end(spec, &self.train, &self.run.cfg.end2end_train(beta), beta_id)?;
        self.run.save_checkpoint(&end2end_name(beta_id), &trained.checkpoint)?;
        Ok(())
    }

    fn train_crbq(&mut self) -> CliResult<()> {
        let targets = self.teacher_targets()?;
        let teacher = self.run.load_checkpoint(TEACHER)?;
        let c = &self.run.cfg.crbq;
        let spec = ModelSpec::channel_reduced_student(&teacher.model.spec, c.channels, c.hidden)?;
        let cfg = self.run.cfg.crbq_train();
        let student = build_student(&teacher.model, spec, cfg.seed.wrapping_add(1000))?;
        let trained = training::train_crbq(student, &targets, &self.train, &cfg)?;
        self.run.save_checkpoint(CRBQ, &trained.checkpoint)?;
        Ok(())
    }

    fn finetune_head(&mut self, task: Task) -> CliResult<HeadSummary> {
        let base = self.run.load_checkpoint(&two_stage_name(self.run.cfg.heads.base_beta_id))?;
        let trained = training::finetune_task(&base, task, &self.train, &self.run.cfg.head_train())?;
        self.run.save_checkpoint(&head_name(task), &trained.checkpoint)?;
        let idx = self.val_indices(self.val.len());
        let model = &trained.checkpoint.model;
        Ok(HeadSummary {
            task,
            accuracy: training::evaluate_accuracy(model, &self.val, &idx, task)?,
            chance: 1.0 / task.num_classes() as f64,
            encoder_hash: model.section_hash("encoder"),
            decoder_hash: model.section_hash("decoder"),
        })
    }

    /// Default evaluation set: every deployable non-head checkpoint, by name.
    fn deployable(&self) -> CliResult<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(&self.run.dir)
            .map_err(|e| CliError::io(&self.run.dir, e))?
            .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
            .filter(|n| n.ends_with(".ckpt") && (n.starts_with("two_stage-") || n.starts_with("end2end-") || n == CRBQ))
            .collect();
        names.sort();
        Ok(names)
    }

    fn eval_rd(&mut self, names: &[String]) -> CliResult<Vec<RdPoint>> {
        let names = if names.is_empty() { self.deployable()? } else { names.to_vec() };
        if names.is_empty() {
            return Err(CliError::MissingInput(format!("no checkpoints to evaluate in {}", self.run.dir.display())));
        }
        let idx = self.val_indices(self.val.len());
        let mut points = Vec::new();
        for name in &names {
            let ckpt = self.run.load_checkpoint(name)?;
            points.push(training::eval_rd(&run_id(name), &ckpt, &self.val, &idx)?);
        }
        let rows: Vec<RdRow> = points.iter().map(RdRow::from).collect();
        let mut csv = Vec::new();
        report::write_rd_csv(&mut csv, &rows)?;
        self.run.write("rd.csv", &csv)?;
        let mut dat = Vec::new();
        report::write_rd_dat(&mut dat, &rows)?;
        self.run.write("rd.dat", &dat)?;
        Ok(points)
    }

    fn run_split(&mut self, name: &str, transport: Transport) -> CliResult<LatencySummary> {
        let ckpt = self.run.load_checkpoint(name)?;
        let idx = self.val_indices(self.run.cfg.split.samples);
        let outcomes = run_split(&self.val, &idx, &ckpt, &self.run.cfg.split_config(), transport, self.run.cfg.seed)?;
        let id = run_id(name);
        let rows: Vec<LatencyRow> = outcomes.iter().map(|o| LatencyRow::from_outcome(&id, o)).collect();
        let mut csv = Vec::new();
        report::write_latency_csv(&mut csv, &rows)?;
        self.run.write(&format!("latency-{id}.csv"), &csv)?;
        Ok(summarize(&outcomes))
    }

    fn latency_sim(&mut self) -> CliResult<Vec<ScenarioRow>> {
        let teacher = self.run.load_checkpoint(TEACHER)?;
        let mut students = Vec::new();
        for id in 0..self.run.cfg.student.betas.len() as u16 {
            let name = two_stage_name(id);
            students.push((run_id(&name), self.run.load_checkpoint(&name)?));
        }
        let refs: Vec<(String, &Checkpoint)> = students.iter().map(|(n, c)| (n.clone(), c)).collect();
        let idx = self.val_indices(self.run.cfg.split.samples);
        let rows = compare_scenarios(&self.val, &idx, &teacher, &refs, &self.run.cfg.split_config())?;
        let mut csv = Vec::new();
        report::write_scenario_csv(&mut csv, &rows)?;
        self.run.write("scenarios.csv", &csv)?;
        Ok(rows)
    }

    fn export(&mut self, format: ExportFormat, input: &str, out: Option<&str>) -> CliResult<()> {
        let bytes = self.run.read(input)?;
        let rows = report::read_rd_csv(bytes.as_slice()).map_err(|e| CliError::InvalidInput(format!("{input}: {e}")))?;
        let mut buf = Vec::new();
        let default = match format {
            ExportFormat::Csv => {
                report::write_rd_csv(&mut buf, &rows)?;
                "rd.export.csv"
            }
            ExportFormat::Dat => {
                report::write_rd_dat(&mut buf, &rows)?;
                "rd.dat"
            }
        };
        self.run.write(out.unwrap_or(default), &buf)
    }

    fn sweep(&mut self) -> CliResult<SweepSummary> {
        let cfg = self.run.cfg.clone();
        let teacher_accuracy = self.train_teacher()?;
        log::info!("teacher accuracy {teacher_accuracy:.4}");
        for id in 0..cfg.student.betas.len() as u16 {
            self.train_stage1(id)?;
            self.train_stage2(id)?;
        }
        for id in 0..cfg.end2end.betas.len() as u16 {
            self.train_end2end(id)?;
        }
        self.train_crbq()?;
        let heads = cfg.heads.tasks.iter().map(|&t| self.finetune_head(t)).collect::<CliResult<Vec<_>>>()?;

        let points = self.eval_rd(&[])?;
        let pick = |prefix: &str| -> Vec<RdPoint> {
            points.iter().filter(|p| p.run_id.starts_with(prefix)).cloned().collect()
        };
        let mut two_stage = pick("two_stage-");
        two_stage.sort_by_key(|p| p.beta_id);
        let mut end2end = pick("end2end-");
        end2end.sort_by_key(|p| p.beta_id);
        let crbq = pick("crbq").pop().expect("crbq evaluated");
        let crbq_ckpt = self.run.load_checkpoint(CRBQ)?;
        let idx = self.val_indices(self.val.len());
        let crbq_float_accuracy =
            training::evaluate_accuracy_unquantized(&crbq_ckpt.model, &self.val, &idx, Task::Class)?;

        let scenarios = self.latency_sim()?;
        let base_name = two_stage_name(cfg.heads.base_beta_id);
        let split = self.run_split(&base_name, Transport::InProcess)?;
        let base = self.run.load_checkpoint(&base_name)?;

        let checkpoints = self
            .run
            .outputs()
            .iter()
            .filter(|(k, _)| k.ends_with(".ckpt"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let summary = SweepSummary {
            teacher_accuracy,
            two_stage,
            end2end,
            crbq,
            crbq_float_accuracy,
            base_beta_id: cfg.heads.base_beta_id,
            base_encoder_hash: base.model.section_hash("encoder"),
            base_decoder_hash: base.model.section_hash("decoder"),
            heads,
            scenarios,
            split,
            checkpoints,
        };
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        self.run.write("summary.json", json.as_bytes())?;
        Ok(summary)
    }
}

/// What a command reports back besides its files.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Done,
    TeacherAccuracy(f64),
    Head(HeadSummary),
    Rd(Vec<RdPoint>),
    Split(LatencySummary),
    Scenarios(Vec<ScenarioRow>),
    Sweep(Box<SweepSummary>),
    Rerun { outputs: usize },
}

/// Runs `command` in `dir` with `cfg` (overrides already applied) and writes its manifest.
pub fn execute(command: &Command, cfg: ExperimentConfig, dir: PathBuf) -> CliResult<(Outcome, RunManifest)> {
    if let Command::Rerun { manifest } = command {
        return rerun(manifest, dir);
    }
    let mut ctx = Ctx::new(Run::open(dir, cfg)?)?;
    let outcome = match command {
        Command::TrainTeacher { .. } => Outcome::TeacherAccuracy(ctx.train_teacher()?),
        Command::TrainStudent { stage: 1, beta_id, .. } => {
            ctx.train_stage1(*beta_id)?;
            Outcome::Done
        }
        Command::TrainStudent { beta_id, .. } => {
            ctx.train_stage2(*beta_id)?;
            Outcome::Done
        }
        Command::TrainBaseline { kind: BaselineKind::End2end, beta_id, .. } => {
            ctx.train_end2end(*beta_id)?;
            Outcome::Done
        }
        Command::TrainBaseline { kind: BaselineKind::Crbq, .. } => {
            ctx.train_crbq()?;
            Outcome::Done
        }
        Command::FinetuneHead { task, .. } => Outcome::Head(ctx.finetune_head(*task)?),
        Command::EvalRd { checkpoints } => Outcome::Rd(ctx.eval_rd(checkpoints)?),
        Command::RunSplit { checkpoint, transport, .. } => {
            let name = checkpoint.clone().unwrap_or_else(|| two_stage_name(ctx.run.cfg.heads.base_beta_id));
            Outcome::Split(ctx.run_split(&name, *transport)?)
        }
        Command::LatencySim { .. } => Outcome::Scenarios(ctx.latency_sim()?),
        Command::Export { format, input, out } => {
            ctx.export(*format, input, out.as_deref())?;
            Outcome::Done
        }
        Command::Sweep => Outcome::Sweep(Box::new(ctx.sweep()?)),
        Command::Rerun { .. } => unreachable!(),
    };
    let manifest = ctx.run.finish(command)?;
    Ok((outcome, manifest))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Replays a manifest into `dir` and compares output hashes.
pub fn rerun(manifest_path: &Path, dir: PathBuf) -> CliResult<(Outcome, RunManifest)> {
    let original = RunManifest::load(manifest_path)?;
    let src = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    if same_dir(&src, &dir) {
        return Err(CliError::Usage("rerun needs a run directory different from the manifest's".into()));
    }
    for (name, hash) in &original.inputs {
        let p = Path::new(name);
        let from = if p.is_absolute() { p.to_path_buf() } else { src.join(p) };
        let bytes = std::fs::read(&from).map_err(|e| CliError::io(&from, e))?;
        if crate::run::sha256_hex(&bytes) != *hash {
            return Err(CliError::Mismatch(format!("input {name} changed since the manifest was written")));
        }
        if !p.is_absolute() {
            std::fs::write(dir.join(p), &bytes).map_err(|e| CliError::Internal(e.to_string()))?;
        }
    }
    let (_, replay) = execute(&original.command, original.config.clone(), dir)?;
    let mut diffs = Vec::new();
    for (name, hash) in &original.outputs {
        match replay.outputs.get(name) {
            Some(h) if h == hash => {}
            Some(_) => diffs.push(format!("{name} differs")),
            None => diffs.push(format!("{name} missing")),
        }
    }
    diffs.extend(replay.outputs.keys().filter(|k| !original.outputs.contains_key(*k)).map(|k| format!("{k} unexpected")));
    if !diffs.is_empty() {
        return Err(CliError::Mismatch(diffs.join(", ")));
    }
    Ok((Outcome::Rerun { outputs: replay.outputs.len() }, replay))
}
