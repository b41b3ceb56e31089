use super::*;
use crate::datagen::{generate, SyntheticSpec};

fn tiny(seed: u64) -> Dataset {
    let mut spec = SyntheticSpec::sew_classification(seed);
    spec.n_samples = 160;
    spec.d_prevalent = 16;
    generate(&spec).unwrap()
}

fn small_arch() -> Architecture {
    Architecture {
        hidden: 8,
        feature_dim: 8,
        embed_dim: 8,
        tnet_code: 4,
        ..Architecture::default()
    }
}

fn cfg(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig {
        stage,
        epochs,
        batch_size: 16,
        k_anchors: 4,
        arch: small_arch(),
        snapshot_every: 2,
        ..TrainConfig::default()
    }
}

fn teacher(ds: &Dataset) -> TeacherRun {
    train_teacher(ds, &cfg(Stage::Teacher, 2)).unwrap()
}

#[test]
fn stage_names_round_trip() {
    for name in Stage::CLI_NAMES {
        assert_eq!(Stage::from_name(name).unwrap().name(), name);
    }
    assert!(Stage::from_name("student").is_none());
}

#[test]
fn config_validation() {
    let mut c = cfg(Stage::StudentPkdot, 1);
    c.k_anchors = 17;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.k_anchors = 4;
    c.batch_size = 1;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.batch_size = 16;
    c.lambda = -0.1;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.lambda = 0.0;
    assert!(c.validate().is_ok());
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = tiny(1);
    let run = train_teacher(&ds, &cfg(Stage::Teacher, 0)).unwrap();
    assert!(run.log.rows.is_empty());
    assert_eq!(run.best_epoch, 0);
    let init = TeacherModel::new(&small_arch(), ds.d_prevalent(), ds.d_privileged(), 5, 0).unwrap();
    assert_eq!(run.teacher.params.checksum(), init.params.checksum());

    let s = train_student(&ds, &run.teacher, &run.tnet, &cfg(Stage::StudentPkdot, 0)).unwrap();
    assert!(s.log.rows.is_empty() && s.log.snapshots.is_empty());
}

#[test]
fn teacher_log_shape() {
    let ds = tiny(2);
    let run = teacher(&ds);
    assert_eq!(run.log.rows.len(), 4);
    let csv = run.log.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,train,"));
    assert!(run
        .log
        .rows
        .iter()
        .all(|r| r.ot_loss.is_nan() && r.task_loss.is_finite()));
}

#[test]
fn student_leaves_teacher_untouched_and_logs() {
    let ds = tiny(3);
    let t = teacher(&ds);
    let before = (t.teacher.params.checksum(), t.tnet.params.checksum());
    let mut c = cfg(Stage::StudentPkdot, 3);
    c.record_anchors = true;
    let run = train_student(&ds, &t.teacher, &t.tnet, &c).unwrap();
    assert_eq!(before, (t.teacher.params.checksum(), t.tnet.params.checksum()));
    assert_eq!(run.student.tnet.as_ref().unwrap().params.checksum(), before.1);
    assert_eq!(run.log.rows.len(), 6);
    let epochs: Vec<usize> = run.log.snapshots.iter().map(|s| s.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    for r in &run.log.rows {
        assert!(r.ot_loss >= 0.0 && r.frobenius_gap >= 0.0);
        assert!((0.0..=1.0).contains(&r.sinkhorn_converged_frac));
    }
    assert!(!run.log.anchor_trace.is_empty());
    for a in &run.log.anchor_trace {
        assert_eq!(a.teacher, a.student);
        assert_eq!(a.teacher.k(), 4);
    }
}

#[test]
fn zero_weight_matches_task_only_bitwise() {
    let ds = tiny(4);
    let t = teacher(&ds);
    let mut a = cfg(Stage::StudentPkdot, 2);
    a.lambda = 0.0;
    let b = cfg(Stage::TaskOnly, 2);
    let ra = train_student(&ds, &t.teacher, &t.tnet, &a).unwrap();
    let rb = train_student(&ds, &t.teacher, &t.tnet, &b).unwrap();
    assert_eq!(ra.student.params, rb.student.params);
    for (x, y) in ra.log.rows.iter().zip(&rb.log.rows) {
        assert_eq!(x.task_loss, y.task_loss);
        assert_eq!(x.metrics, y.metrics);
    }
}

#[test]
fn runs_are_deterministic() {
    let ds = tiny(5);
    let t = teacher(&ds);
    let c = cfg(Stage::StudentPointwise(PointwiseKind::Kl), 2);
    let r1 = train_student(&ds, &t.teacher, &t.tnet, &c).unwrap();
    let r2 = train_student(&ds, &t.teacher, &t.tnet, &c).unwrap();
    assert_eq!(r1.log.to_csv(), r2.log.to_csv());
    assert_eq!(r1.student.params.checksum(), r2.student.params.checksum());
}

#[test]
fn prevalent_only_has_no_tnet() {
    let ds = tiny(6);
    let t = teacher(&ds);
    let run = train_student(&ds, &t.teacher, &t.tnet, &cfg(Stage::PrevalentOnly, 1)).unwrap();
    assert!(run.student.tnet.is_none());
}

#[test]
fn embedding_mismatch_is_config_error() {
    let ds = tiny(7);
    let t = teacher(&ds);
    let mut c = cfg(Stage::StudentPkdot, 1);
    c.arch.embed_dim = 6;
    assert!(matches!(
        train_student(&ds, &t.teacher, &t.tnet, &c),
        Err(Error::Config(_))
    ));
    assert!(matches!(train_teacher(&ds, &c), Err(Error::Config(_))));
}

#[test]
fn ablation_rows_follow_grid_then_seed() {
    let ds = tiny(8);
    let teachers: Vec<SeededTeacher> = [0u64, 1]
        .iter()
        .map(|&seed| {
            let mut c = cfg(Stage::Teacher, 1);
            c.seed = seed;
            let r = train_teacher(&ds, &c).unwrap();
            SeededTeacher {
                seed,
                teacher: r.teacher,
                tnet: r.tnet,
            }
        })
        .collect();
    let grid = AblationGrid {
        batch_sizes: vec![8, 16],
        k_anchors: vec![2, 4],
        epsilons: vec![0.1],
    };
    let table = ablate(&ds, &cfg(Stage::StudentPkdot, 1), &teachers, &grid).unwrap();
    assert_eq!(table.rows.len(), 8);
    let order: Vec<(usize, u64)> = table.rows.iter().map(|r| (r.grid_index, r.seed)).collect();
    assert_eq!(order[..4], [(0, 0), (0, 1), (1, 0), (1, 1)]);
    assert_eq!(table.to_csv().lines().count(), 9);

    let bad = AblationGrid {
        batch_sizes: vec![4],
        k_anchors: vec![8],
        epsilons: vec![0.1],
    };
    assert!(matches!(
        ablate(&ds, &cfg(Stage::StudentPkdot, 1), &teachers, &bad),
        Err(Error::Config(_))
    ));
}
