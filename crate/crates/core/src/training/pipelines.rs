use crate::autodiff::Graph;
use crate::data::{Dataset, Task};
use crate::entropy_model::{CdfTable, CLAMP_BOUND, TABLE_PRECISION};
use crate::error::{Error, Result};
use crate::layers::{
    init_section, layer_graph, section_graph, Binder, Bottleneck, Checkpoint, CheckpointMeta, Model, ModelSpec, Section,
    Stage, Trainable,
};
use crate::quantizer::noise_quantize;
use crate::tensor::Tensor;

use super::{end2end_loss, kd_loss, rd_loss, train_loop, TrainConfig, TrainReport};

/// A trained checkpoint and its loss curve.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Frozen-teacher signals for every training sample, computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// Split feature `h`, `[N, C, H, W]`.
    pub h: Tensor,
    /// Output of the first tail block, `[N, ...]`.
    pub aux: Tensor,
    pub logits: Tensor,
}

const EVAL_BATCH: usize = 100;

/// Applies `f` to consecutive index chunks and stacks the results.
pub(crate) fn batched(n: usize, f: impl Fn(&[usize]) -> Result<Tensor>) -> Result<Tensor> {
    let all: Vec<usize> = (0..n).collect();
    let parts = all.chunks(EVAL_BATCH).map(f).collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&parts)
}

pub fn teacher_targets(teacher: &Model, data: &Dataset) -> Result<TeacherTargets> {
    let spec = &teacher.spec;
    if spec.bottleneck != Bottleneck::Identity {
        return Err(Error::InvalidArgument("teacher targets need a teacher model".into()));
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let mut b = Binder::new(&teacher.params, Trainable::Nothing);
        let x = g.constant(data.batch(chunk))?;
        let h = section_graph(&mut g, &mut b, spec, Section::Encoder, x)?;
        let mut y = layer_graph(&mut g, &mut b, &spec.tail[0], "tail.0.", h)?;
        let aux = y;
        for (i, layer) in spec.tail.iter().enumerate().skip(1) {
            y = layer_graph(&mut g, &mut b, layer, &format!("tail.{i}."), y)?;
        }
        parts.0.push(g.value(h).clone());
        parts.1.push(g.value(aux).clone());
        parts.2.push(g.value(y).clone());
    }
    Ok(TeacherTargets {
        h: Tensor::stack_batch(&parts.0)?,
        aux: Tensor::stack_batch(&parts.1)?,
        logits: Tensor::stack_batch(&parts.2)?,
    })
}

fn check_targets(t: &TeacherTargets, data: &Dataset) -> Result<()> {
    if t.h.shape()[0] != data.len() || t.logits.shape()[0] != data.len() {
        return Err(Error::Shape(format!(
            "teacher targets cover {} samples, dataset has {}",
            t.h.shape()[0],
            data.len()
        )));
    }
    Ok(())
}

fn export_tables(model: &Model) -> Result<CdfTable> {
    model.entropy_model()?.export_cdf_table(CLAMP_BOUND, TABLE_PRECISION)
}

fn meta(cfg: &TrainConfig, beta: Option<f64>, beta_id: u16, task: Task) -> CheckpointMeta {
    CheckpointMeta { seed: cfg.seed, beta, beta_id, task }
}

/// Supervised classifier training of the teacher from scratch.
pub fn train_teacher(spec: ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if spec.bottleneck != Bottleneck::Identity || !spec.decoder.is_empty() {
        return Err(Error::InvalidArgument("teacher spec must have no bottleneck or decoder".into()));
    }
    let mut model = Model::init(spec, cfg.seed)?;
    let spec = model.spec.clone();
    let report = train_loop(&mut model.params, &Trainable::All, cfg, data.len(), "teacher", |g, b, batch| {
        let x = g.constant(data.batch(batch.indices))?;
        let h = section_graph(g, b, &spec, Section::Encoder, x)?;
        let logits = section_graph(g, b, &spec, Section::Tail, h)?;
        g.cross_entropy(logits, &data.targets(batch.indices, Task::Class))
    })?;
    let model = Model::new(model.spec, model.params)?;
    let checkpoint = Checkpoint::new(Stage::Teacher, model, None, meta(cfg, None, 0, Task::Class));
    Ok(Trained { checkpoint, report })
}

/// Stage 1: encoder, decoder and prior learn to reproduce the teacher's split
/// feature under the rate-distortion objective; the tail stays frozen.
pub fn stage1_distill(
    student: Model,
    targets: &TeacherTargets,
    data: &Dataset,
    cfg: &TrainConfig,
    beta_id: u16,
) -> Result<Trained> {
    cfg.validate()?;
    check_targets(targets, data)?;
    if !matches!(student.spec.bottleneck, Bottleneck::Entropic { .. }) {
        return Err(Error::InvalidArgument("stage 1 needs an entropic student".into()));
    }
    let mut model = student;
    let spec = model.spec.clone();
    let trainable = Trainable::prefixes(&["encoder.", "decoder.", "prior."]);
    let report = train_loop(&mut model.params, &trainable, cfg, data.len(), "stage1", |g, b, batch| {
        let n = batch.indices.len() as f64;
        let x = g.constant(data.batch(batch.indices))?;
        let z = section_graph(g, b, &spec, Section::Encoder, x)?;
        let z_noisy = noise_quantize(g, z, batch.noise)?;
        let h = g.constant(targets.h.gather_rows(batch.indices))?;
        let terms = rd_loss(g, b, &spec, h, z_noisy, cfg.beta)?;
        if !cfg.aux_features {
            return Ok(terms.loss);
        }
        let a_hat = layer_graph(g, b, &spec.tail[0], "tail.0.", terms.h_hat)?;
        let a = g.constant(targets.aux.gather_rows(batch.indices))?;
        let se = g.squared_error(a, a_hat)?;
        let aux = g.scale(se, 0.5 / n);
        g.add(terms.loss, aux)
    })?;
    let model = Model::new(model.spec, model.params)?;
    let tables = export_tables(&model)?;
    let checkpoint = Checkpoint::new(Stage::Stage1, model, Some(tables), meta(cfg, Some(cfg.beta), beta_id, Task::Class));
    Ok(Trained { checkpoint, report })
}

/// Server-side input for every sample: the deployed bottleneck output.
fn transmitted(model: &Model, data: &Dataset) -> Result<Tensor> {
    batched(data.len(), |idx| model.transmit(&model.encoder_forward(&data.batch(idx))?))
}

/// Stage 2: encoder and prior frozen, rounded latents, decoder and tail
/// fine-tuned with the distillation loss against teacher logits.
pub fn stage2_finetune(stage1: &Checkpoint, targets: &TeacherTargets, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    check_targets(targets, data)?;
    if stage1.stage != Stage::Stage1 {
        return Err(Error::InvalidArgument(format!("stage 2 starts from a stage1 checkpoint, got {}", stage1.stage.name())));
    }
    let mut model = stage1.model.clone();
    let spec = model.spec.clone();
    let zq = transmitted(&model, data)?;
    let trainable = Trainable::prefixes(&["decoder.", "tail."]);
    let report = train_loop(&mut model.params, &trainable, cfg, data.len(), "stage2", |g, b, batch| {
        let z = g.constant(zq.gather_rows(batch.indices))?;
        let h_hat = section_graph(g, b, &spec, Section::Decoder, z)?;
        let logits = section_graph(g, b, &spec, Section::Tail, h_hat)?;
        let t = g.constant(targets.logits.gather_rows(batch.indices))?;
        kd_loss(g, logits, t, &data.targets(batch.indices, Task::Class), cfg.alpha, cfg.tau)
    })?;
    let model = Model::new(model.spec, model.params)?;
    let checkpoint = Checkpoint::new(Stage::Stage2, model, stage1.tables.clone(), stage1.meta.clone());
    Ok(Trained { checkpoint, report })
}

/// Baseline: the whole entropic student trained from scratch on
/// `CE(ŷ, y) − β·ln p(z̃)` with no teacher.
pub fn train_end2end(spec: ModelSpec, data: &Dataset, cfg: &TrainConfig, beta_id: u16) -> Result<Trained> {
    cfg.validate()?;
    if !matches!(spec.bottleneck, Bottleneck::Entropic { .. }) {
        return Err(Error::InvalidArgument("end-to-end training needs an entropic student".into()));
    }
    let mut model = Model::init(spec, cfg.seed)?;
    let spec = model.spec.clone();
    let report = train_loop(&mut model.params, &Trainable::All, cfg, data.len(), "end2end", |g, b, batch| {
        let x = g.constant(data.batch(batch.indices))?;
        let z = section_graph(g, b, &spec, Section::Encoder, x)?;
        let z_noisy = noise_quantize(g, z, batch.noise)?;
        end2end_loss(g, b, &spec, z_noisy, &data.targets(batch.indices, Task::Class), cfg.beta)
    })?;
    let model = Model::new(model.spec, model.params)?;
    let tables = export_tables(&model)?;
    let checkpoint =
        Checkpoint::new(Stage::End2end, model, Some(tables), meta(cfg, Some(cfg.beta), beta_id, Task::Class));
    Ok(Trained { checkpoint, report })
}

/// Channel-reduction baseline trained by head-network distillation: squared
/// errors against the teacher's split feature and first tail block output.
/// The 8-bit quantizer is applied only at inference.
pub fn train_crbq(student: Model, targets: &TeacherTargets, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    check_targets(targets, data)?;
    if !matches!(student.spec.bottleneck, Bottleneck::AffineU8 { .. }) {
        return Err(Error::InvalidArgument("CR+BQ training needs a channel-reduced student".into()));
    }
    let mut model = student;
    let spec = model.spec.clone();
    let trainable = Trainable::prefixes(&["encoder.", "decoder."]);
    let report = train_loop(&mut model.params, &trainable, cfg, data.len(), "crbq", |g, b, batch| {
        let n = batch.indices.len() as f64;
        let x = g.constant(data.batch(batch.indices))?;
        let z = section_graph(g, b, &spec, Section::Encoder, x)?;
        let h_hat = section_graph(g, b, &spec, Section::Decoder, z)?;
        let a_hat = layer_graph(g, b, &spec.tail[0], "tail.0.", h_hat)?;
        let h = g.constant(targets.h.gather_rows(batch.indices))?;
        let a = g.constant(targets.aux.gather_rows(batch.indices))?;
        let e1 = g.squared_error(h, h_hat)?;
        let e2 = g.squared_error(a, a_hat)?;
        let s = g.add(e1, e2)?;
        Ok(g.scale(s, 0.5 / n))
    })?;
    let model = Model::new(model.spec, model.params)?;
    let checkpoint = Checkpoint::new(Stage::Crbq, model, None, meta(cfg, None, 0, Task::Class));
    Ok(Trained { checkpoint, report })
}

/// New classifier head for `task` on top of a frozen encoder and decoder,
/// trained by maximum likelihood on reconstructed features.
pub fn finetune_task(base: &Checkpoint, task: Task, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if base.model.spec.bottleneck == Bottleneck::Identity {
        return Err(Error::InvalidArgument("task heads attach to a student with a bottleneck".into()));
    }
    let spec = base.model.spec.with_num_classes(task.num_classes())?;
    let mut params = base.model.params.clone();
    params.retain(|name, _| !name.starts_with("tail."));
    params.extend(init_section(&spec, Section::Tail, cfg.seed));
    let mut model = Model::new(spec, params)?;
    let spec = model.spec.clone();
    let h_hat = batched(data.len(), |idx| {
        let z = model.transmit(&model.encoder_forward(&data.batch(idx))?)?;
        model.decoder_forward(&z)
    })?;
    let trainable = Trainable::prefixes(&["tail."]);
    let what = format!("head-{task:?}").to_lowercase();
    let report = train_loop(&mut model.params, &trainable, cfg, data.len(), &what, |g, b, batch| {
        let h = g.constant(h_hat.gather_rows(batch.indices))?;
        let logits = section_graph(g, b, &spec, Section::Tail, h)?;
        g.cross_entropy(logits, &data.targets(batch.indices, task))
    })?;
    let model = Model::new(model.spec, model.params)?;
    let meta = CheckpointMeta { task, seed: cfg.seed, ..base.meta.clone() };
    let checkpoint = Checkpoint::new(Stage::TaskHead, model, base.tables.clone(), meta);
    Ok(Trained { checkpoint, report })
}
