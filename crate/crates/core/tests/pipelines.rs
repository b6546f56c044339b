//! Small end-to-end runs of every training pipeline: determinism, which
//! parameters each stage may touch, and measured rates.

use esplit_core::data::{Dataset, SyntheticShapes, Task};
use esplit_core::layers::{build_student, params_hash, Checkpoint, ModelSpec, Stage, TeacherWidths};
use esplit_core::training::*;

fn data(n: usize) -> Dataset {
    SyntheticShapes { seed: 3, ..Default::default() }.generate(0, n)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 16, lr: LrSchedule::constant(3e-3), seed: 9, ..Default::default() }
}

fn teacher_spec() -> ModelSpec {
    ModelSpec::teacher([3, 32, 32], TeacherWidths::default(), 10)
}

struct Fixture {
    data: Dataset,
    teacher: Checkpoint,
    targets: TeacherTargets,
    stage1: Trained,
}

fn fixture() -> Fixture {
    let data = data(96);
    let teacher = train_teacher(teacher_spec(), &data, &cfg(2)).unwrap().checkpoint;
    let targets = teacher_targets(&teacher.model, &data).unwrap();
    let student = build_student(&teacher.model, ModelSpec::entropic_student(&teacher_spec(), 8, 8).unwrap(), 4).unwrap();
    let stage1 = stage1_distill(student, &targets, &data, &cfg(4), 0).unwrap();
    Fixture { data, teacher, targets, stage1 }
}

#[test]
fn two_stage_pipeline_contracts() {
    let f = fixture();
    let s1 = &f.stage1.checkpoint;

    // same config, same bytes
    let again = stage1_distill(
        build_student(&f.teacher.model, ModelSpec::entropic_student(&teacher_spec(), 8, 8).unwrap(), 4).unwrap(),
        &f.targets,
        &f.data,
        &cfg(4),
        0,
    )
    .unwrap();
    assert_eq!(again.checkpoint.to_bytes(), s1.to_bytes());

    // stage 1 learns and leaves the copied tail alone
    let losses = &f.stage1.report.epoch_losses;
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert_eq!(params_hash(&s1.model.params, "tail."), params_hash(&f.teacher.model.params, "tail."));
    assert!(s1.tables.is_some());

    // stage 2 keeps encoder and prior, and therefore the tables
    let s2 = stage2_finetune(s1, &f.targets, &f.data, &cfg(2)).unwrap().checkpoint;
    assert_eq!(s2.stage, Stage::Stage2);
    for prefix in ["encoder.", "prior."] {
        assert_eq!(params_hash(&s2.model.params, prefix), params_hash(&s1.model.params, prefix), "{prefix}");
    }
    assert_ne!(params_hash(&s2.model.params, "tail."), params_hash(&s1.model.params, "tail."));
    assert_eq!(s2.tables, s1.tables);

    // a task head touches only the tail
    let head = finetune_task(&s2, Task::Parity, &f.data, &cfg(1)).unwrap().checkpoint;
    for prefix in ["encoder.", "decoder.", "prior."] {
        assert_eq!(params_hash(&head.model.params, prefix), params_hash(&s2.model.params, prefix), "{prefix}");
    }
    assert_eq!(head.meta.task, Task::Parity);
    assert_eq!(head.model.spec.tail.len(), s2.model.spec.tail.len());

    // wrong starting stage is refused
    assert!(stage2_finetune(&s2, &f.targets, &f.data, &cfg(1)).is_err());
}

#[test]
fn measured_rate_tracks_the_prior() {
    let f = fixture();
    let s1 = &f.stage1.checkpoint;
    let idx: Vec<usize> = (0..f.data.len()).collect();
    let rd = eval_rd("s1", s1, &f.data, &idx).unwrap();
    let analytic = rd.analytic_bits_per_sample.unwrap();
    let coded = rd.coded_bits_per_sample.unwrap();
    assert!(coded <= analytic * 1.02 + 64.0, "coded {coded} vs analytic {analytic}");
    assert!(rd.bytes_per_sample * 8.0 >= coded);

    // the bit map sums to the sample's information content
    let image = f.data.batch(&[5]);
    let map = bit_allocation_latent(s1, &image).unwrap();
    let z = esplit_core::quantizer::round_tensor(&s1.model.encoder_forward(&image).unwrap());
    let total = s1.model.entropy_model().unwrap().rate_bits(&z).unwrap().bits;
    let sum: f64 = map.data().iter().sum();
    assert!((sum - total).abs() < 1e-9 * total.max(1.0), "{sum} vs {total}");
    let norm = bit_allocation_map(s1, &image).unwrap();
    assert_eq!(norm.shape(), &[32, 32]);
    assert!(norm.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn baselines_respect_their_contracts() {
    let data = data(64);
    let teacher = train_teacher(teacher_spec(), &data, &cfg(1)).unwrap().checkpoint;
    let targets = teacher_targets(&teacher.model, &data).unwrap();

    let cr = ModelSpec::channel_reduced_student(&teacher_spec(), 4, 8).unwrap();
    let crbq = train_crbq(build_student(&teacher.model, cr, 2).unwrap(), &targets, &data, &cfg(1)).unwrap().checkpoint;
    assert_eq!(crbq.stage, Stage::Crbq);
    assert_eq!(params_hash(&crbq.model.params, "tail."), params_hash(&teacher.model.params, "tail."));

    let e2e_spec = ModelSpec::entropic_student(&teacher_spec(), 8, 8).unwrap();
    let a = train_end2end(e2e_spec.clone(), &data, &cfg(1), 1).unwrap();
    let b = train_end2end(e2e_spec, &data, &cfg(1), 1).unwrap();
    assert_eq!(a.checkpoint.hash(), b.checkpoint.hash());
    assert_eq!(a.checkpoint.meta.beta_id, 1);

    let bad = TrainConfig { beta: -1.0, ..cfg(1) };
    assert!(train_teacher(teacher_spec(), &data, &bad).is_err());
}
