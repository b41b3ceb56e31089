//! Teacher and student training stages, evaluation and ablation sweeps.

mod ablate;
mod metrics;

pub use ablate::{ablate, AblationGrid, AblationRow, AblationTable, SeededTeacher};
pub use metrics::{primary_metric, AnchorRecord, MetricsLog, MetricsRow, Snapshot};

use serde::{Deserialize, Serialize};

use crate::datagen::{self, Dataset, Split, Targets};
use crate::diffcore::{DiffGraph, MomentumSgd, NodeId, Tensor2};
use crate::error::{Error, Result};
use crate::losses::{self, PointwiseKind};
use crate::models::{Architecture, StudentModel, TNet, TeacherModel};
use crate::otsolver::{self, Marginals, SinkhornConfig};
use crate::rng;
use crate::simgraph::{self, AnchorSet, SimilarityMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    StudentPkdot,
    StudentPointwise(PointwiseKind),
    /// Prevalent backbone only: no T-Net, no distillation term.
    PrevalentOnly,
    /// Same architecture as the distilled student, task loss only.
    TaskOnly,
}

impl Stage {
    pub const CLI_NAMES: [&'static str; 6] = [
        "teacher",
        "student-pkdot",
        "student-mse",
        "student-cosine",
        "student-kl",
        "prevalent-only",
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::StudentPkdot => "student-pkdot",
            Stage::StudentPointwise(PointwiseKind::Mse) => "student-mse",
            Stage::StudentPointwise(PointwiseKind::Cosine) => "student-cosine",
            Stage::StudentPointwise(PointwiseKind::Kl) => "student-kl",
            Stage::PrevalentOnly => "prevalent-only",
            Stage::TaskOnly => "student-task-only",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "teacher" => Stage::Teacher,
            "student-pkdot" => Stage::StudentPkdot,
            "student-mse" => Stage::StudentPointwise(PointwiseKind::Mse),
            "student-cosine" => Stage::StudentPointwise(PointwiseKind::Cosine),
            "student-kl" => Stage::StudentPointwise(PointwiseKind::Kl),
            "prevalent-only" => Stage::PrevalentOnly,
            "student-task-only" => Stage::TaskOnly,
            _ => return None,
        })
    }

    pub fn is_student(self) -> bool {
        self != Stage::Teacher
    }

    fn uses_tnet(self) -> bool {
        !matches!(self, Stage::PrevalentOnly | Stage::Teacher)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the distillation term.
    pub lambda: f64,
    pub k_anchors: usize,
    pub sinkhorn: SinkhornConfig,
    /// Softening temperature of the KL baseline.
    pub temperature: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    pub arch: Architecture,
    /// Keep the anchor sets of every step in the log.
    pub record_anchors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::StudentPkdot,
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            lambda: 0.4,
            k_anchors: 8,
            sinkhorn: SinkhornConfig::default(),
            temperature: 4.0,
            seed: 0,
            snapshot_every: 5,
            arch: Architecture::default(),
            record_anchors: false,
        }
    }
}

impl TrainConfig {
    pub fn teacher() -> Self {
        Self {
            stage: Stage::Teacher,
            ..Self::default()
        }
    }

    pub fn student(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.k_anchors == 0 || self.k_anchors > self.batch_size {
            return bad(format!(
                "k_anchors must be in [1, batch_size = {}], got {}",
                self.batch_size, self.k_anchors
            ));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be >= 1".into());
        }
        self.sinkhorn.validate()?;
        self.arch.validate()
    }
}

/// Accuracy, or CCC per target, of model outputs against targets.
pub fn score_outputs(outputs: &Tensor2, targets: &Targets) -> Result<Vec<f64>> {
    match targets {
        Targets::Classes(c) => Ok(vec![datagen::accuracy(outputs, c)]),
        Targets::Values(y) => {
            outputs.check_same_shape(y, "score_outputs")?;
            (0..y.cols())
                .map(|j| {
                    let p: Vec<f64> = (0..y.rows()).map(|i| outputs.get(i, j)).collect();
                    let t: Vec<f64> = (0..y.rows()).map(|i| y.get(i, j)).collect();
                    losses::ccc(&p, &t)
                })
                .collect()
        }
    }
}

/// Anything that maps a dataset split to output logits or predictions.
pub trait Predictor {
    fn outputs(&self, prevalent: &Tensor2, privileged: &Tensor2) -> Result<Tensor2>;
}

impl Predictor for TeacherModel {
    fn outputs(&self, prevalent: &Tensor2, privileged: &Tensor2) -> Result<Tensor2> {
        Ok(self.predict(prevalent, privileged)?.1)
    }
}

impl Predictor for StudentModel {
    fn outputs(&self, prevalent: &Tensor2, _privileged: &Tensor2) -> Result<Tensor2> {
        Ok(self.predict(prevalent)?.1)
    }
}

pub fn evaluate(model: &impl Predictor, ds: &Dataset, split: Split) -> Result<Vec<f64>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::contract(format!("split {} is empty", split.name())));
    }
    let b = ds.batch(&idx)?;
    score_outputs(&model.outputs(&b.prevalent, &b.privileged)?, &b.targets)
}

fn task_loss(g: &mut DiffGraph, outputs: NodeId, targets: &Targets) -> Result<NodeId> {
    match targets {
        Targets::Classes(c) => losses::cross_entropy_loss(g, outputs, c),
        Targets::Values(y) => losses::multi_ccc_loss(g, outputs, y),
    }
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, batch, loss })
    }
}

/// Checkpoint ranking: higher validation metric, then lower validation loss.
#[derive(Clone, Copy, Debug)]
struct Selection {
    metric: f64,
    loss: f64,
}

impl Selection {
    const NONE: Self = Self {
        metric: f64::NEG_INFINITY,
        loss: f64::INFINITY,
    };

    fn new(metrics: &[f64], loss: f64) -> Self {
        Self {
            metric: primary_metric(metrics),
            loss,
        }
    }

    fn beats(&self, other: &Self) -> bool {
        self.metric > other.metric || (self.metric == other.metric && self.loss < other.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub teacher: TeacherModel,
    pub tnet: TNet,
    pub log: MetricsLog,
    /// Epoch of the returned checkpoint (0 = initialization).
    pub best_epoch: usize,
    pub val_metrics: Vec<f64>,
}

/// Trains the teacher on both modalities and, alongside it, the T-Net to
/// regress the teacher's privileged-backbone features from prevalent input.
pub fn train_teacher(ds: &Dataset, cfg: &TrainConfig) -> Result<TeacherRun> {
    if cfg.stage != Stage::Teacher {
        return Err(Error::Config(format!(
            "train_teacher called with stage {}",
            cfg.stage.name()
        )));
    }
    cfg.validate()?;
    let task = ds.task();
    let mut teacher = TeacherModel::new(
        &cfg.arch,
        ds.d_prevalent(),
        ds.d_privileged(),
        task.output_dim(),
        cfg.seed,
    )?;
    let mut tnet = TNet::new(&cfg.arch, ds.d_prevalent(), cfg.seed)?;
    let mut opt_teacher = MomentumSgd::new(&teacher.params, cfg.learning_rate, cfg.momentum);
    let mut opt_tnet = MomentumSgd::new(&tnet.params, cfg.learning_rate, cfg.momentum);
    let mut log = MetricsLog::new(task);
    let mut best = (teacher.clone(), tnet.clone(), 0usize, Selection::NONE, Vec::new());
    let val = ds.split_batch(Split::Val)?;

    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0; 2];
        let batches = datagen::batches(ds, Split::Train, cfg.batch_size, rng::epoch_seed(cfg.seed, epoch))?;
        for (bi, idx) in batches.iter().enumerate() {
            let batch = ds.batch(idx)?;
            let mut step = || -> Result<(f64, f64)> {
                let mut g = DiffGraph::new();
                let tb = teacher.params.bind(&mut g, true);
                let nb = tnet.params.bind(&mut g, true);
                let p = g.constant(batch.prevalent.clone());
                let q = g.constant(batch.privileged.clone());
                let f = teacher.forward(&mut g, &tb, p, q)?;
                let task = task_loss(&mut g, f.outputs, &batch.targets)?;
                // regression target is a constant copy: no gradient reaches the teacher
                let target = g.value(f.privileged_features.unwrap()).clone();
                let h = tnet.forward(&mut g, &nb, p)?;
                let tl = losses::mse_loss(&mut g, h, &target)?;
                let total = g.add(task, tl)?;
                check_finite(g.value(total).item(), epoch, bi)?;
                g.backward(total)?;
                let (task_v, tl_v) = (g.value(task).item(), g.value(tl).item());
                opt_teacher.step(&mut teacher.params, &tb.grads(&g));
                opt_tnet.step(&mut tnet.params, &nb.grads(&g));
                Ok((task_v, tl_v))
            };
            let (task_v, tl_v) = step().map_err(|e| diverged(e, epoch, bi))?;
            sums[0] += task_v;
            sums[1] += tl_v;
        }
        let nb = batches.len().max(1) as f64;
        log.rows.push(MetricsRow {
            epoch,
            split: Split::Train,
            task_loss: sums[0] / nb,
            ot_loss: f64::NAN,
            total_loss: (sums[0] + sums[1]) / nb,
            metrics: evaluate(&teacher, ds, Split::Train)?,
            sinkhorn_converged_frac: f64::NAN,
            frobenius_gap: f64::NAN,
        });

        let (val_task, val_tnet) = {
            let mut g = DiffGraph::new();
            let tb = teacher.params.bind(&mut g, false);
            let p = g.constant(val.prevalent.clone());
            let q = g.constant(val.privileged.clone());
            let f = teacher.forward(&mut g, &tb, p, q)?;
            let task = task_loss(&mut g, f.outputs, &val.targets)?;
            let target = g.value(f.privileged_features.unwrap()).clone();
            let nb = tnet.params.bind(&mut g, false);
            let h = tnet.forward(&mut g, &nb, p)?;
            let tl = losses::mse_loss(&mut g, h, &target)?;
            (g.value(task).item(), g.value(tl).item())
        };
        let val_metrics = score_outputs(&teacher.outputs(&val.prevalent, &val.privileged)?, &val.targets)?;
        let score = Selection::new(&val_metrics, val_task + val_tnet);
        log.rows.push(MetricsRow {
            epoch,
            split: Split::Val,
            task_loss: val_task,
            ot_loss: f64::NAN,
            total_loss: val_task + val_tnet,
            metrics: val_metrics.clone(),
            sinkhorn_converged_frac: f64::NAN,
            frobenius_gap: f64::NAN,
        });
        if score.beats(&best.3) {
            best = (teacher.clone(), tnet.clone(), epoch, score, val_metrics);
        }
    }

    let (teacher, tnet, best_epoch, _, mut val_metrics) = best;
    if val_metrics.is_empty() {
        val_metrics = evaluate(&teacher, ds, Split::Val)?;
    }
    Ok(TeacherRun {
        teacher,
        tnet,
        log,
        best_epoch,
        val_metrics,
    })
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub student: StudentModel,
    pub log: MetricsLog,
    pub best_epoch: usize,
    pub val_metrics: Vec<f64>,
}

/// Fixed teacher-side quantities of one batch.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub embeddings: Tensor2,
    pub outputs: Tensor2,
    pub similarity: SimilarityMatrix,
    /// Selected on the teacher matrix, reused for the student restriction.
    pub anchors: AnchorSet,
}

impl TeacherView {
    /// Rows `idx` of cached teacher embeddings and outputs, with `k` anchors.
    pub fn new(embeddings: &Tensor2, outputs: &Tensor2, idx: &[usize], k: usize) -> Result<Self> {
        let embeddings = embeddings.select_rows(idx)?;
        let similarity = SimilarityMatrix::new(simgraph::cosine_similarity(&embeddings)?)?;
        let anchors = simgraph::select_anchors(&similarity, k.min(idx.len()))?;
        Ok(Self {
            embeddings,
            outputs: outputs.select_rows(idx)?,
            similarity,
            anchors,
        })
    }
}

struct StepOut {
    task: f64,
    ot: f64,
    total: f64,
    converged: bool,
}

/// Loss nodes of one student batch.
#[derive(Clone, Debug)]
pub struct StudentObjective {
    pub task: NodeId,
    pub total: NodeId,
    pub ot: otsolver::OtLoss,
}

/// Builds the student objective for one batch on `g`.
///
/// The transport term is always computed; `cfg.stage` decides what enters
/// `total`. The plan is held fixed inside the graph.
pub fn student_objective(
    g: &mut DiffGraph,
    student: &StudentModel,
    bound: &crate::diffcore::Bound,
    prevalent: &Tensor2,
    targets: &Targets,
    view: &TeacherView,
    cfg: &TrainConfig,
) -> Result<StudentObjective> {
    let x = g.constant(prevalent.clone());
    let f = student.forward(g, bound, x)?;
    let task = task_loss(g, f.outputs, targets)?;

    let teacher_rows = simgraph::restrict(&view.similarity, &view.anchors)?;
    let s_phi = simgraph::cosine_similarity_node(g, f.embeddings)?;
    let student_rows = simgraph::restrict_node(g, s_phi, &view.anchors)?;
    let marg = Marginals::uniform(prevalent.rows());
    let ot = otsolver::ot_loss_and_grad(g, &teacher_rows, student_rows, &marg, &cfg.sinkhorn)?;

    let total = match cfg.stage {
        Stage::StudentPkdot => losses::total_loss(g, task, ot.node, cfg.lambda)?,
        Stage::StudentPointwise(kind) => {
            let (t, s) = match kind {
                PointwiseKind::Kl => (&view.outputs, f.outputs),
                PointwiseKind::Mse | PointwiseKind::Cosine => (&view.embeddings, f.embeddings),
            };
            let kd = losses::pointwise_kd_loss(g, kind, t, s, cfg.temperature)?;
            losses::total_loss(g, task, kd, cfg.lambda)?
        }
        Stage::PrevalentOnly | Stage::TaskOnly => task,
        Stage::Teacher => return Err(Error::Config("teacher stage has no student objective".into())),
    };
    Ok(StudentObjective { task, total, ot })
}

/// Trains a student against a frozen teacher.
///
/// Every stage computes the transport loss between teacher and student
/// similarity structure so the log is comparable across objectives; only
/// `StudentPkdot` puts it in the objective.
pub fn train_student(ds: &Dataset, teacher: &TeacherModel, tnet: &TNet, cfg: &TrainConfig) -> Result<StudentRun> {
    if !cfg.stage.is_student() {
        return Err(Error::Config(format!(
            "train_student called with stage {}",
            cfg.stage.name()
        )));
    }
    cfg.validate()?;
    let task = ds.task();
    let tnet = cfg.stage.uses_tnet().then(|| tnet.clone());
    let mut student = StudentModel::new(&cfg.arch, ds.d_prevalent(), task.output_dim(), tnet, cfg.seed)?;
    if student.embed_dim() != teacher.embed_dim() {
        return Err(Error::Config(format!(
            "teacher embedding dim {} differs from student embedding dim {}",
            teacher.embed_dim(),
            student.embed_dim()
        )));
    }
    let mut opt = MomentumSgd::new(&student.params, cfg.learning_rate, cfg.momentum);
    let (t_emb, t_out, _) = teacher.predict(&ds.prevalent, &ds.privileged)?;

    let val_idx = ds.indices(Split::Val);
    if val_idx.len() < 2 {
        return Err(Error::contract("validation split needs at least 2 samples"));
    }
    let probe_idx: Vec<usize> = val_idx.iter().copied().take(cfg.batch_size).collect();
    let probe_teacher = simgraph::cosine_similarity(&t_emb.select_rows(&probe_idx)?)?;
    let probe_prev = ds.prevalent.select_rows(&probe_idx)?;
    let val_chunks: Vec<Vec<usize>> = val_idx
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect();
    let val = ds.split_batch(Split::Val)?;

    let mut log = MetricsLog::new(task);
    let mut best = (student.clone(), 0usize, Selection::NONE, Vec::new());

    for epoch in 1..=cfg.epochs {
        let batches = datagen::batches(ds, Split::Train, cfg.batch_size, rng::epoch_seed(cfg.seed, epoch))?;
        let mut acc = Vec::with_capacity(batches.len());
        for (bi, idx) in batches.iter().enumerate() {
            let batch = ds.batch(idx)?;
            let view = TeacherView::new(&t_emb, &t_out, idx, cfg.k_anchors)?;
            if cfg.record_anchors {
                log.anchor_trace.push(AnchorRecord {
                    epoch,
                    batch: bi,
                    teacher: view.anchors.clone(),
                    student: view.anchors.clone(),
                });
            }
            let mut step = || -> Result<StepOut> {
                let mut g = DiffGraph::new();
                let sb = student.params.bind(&mut g, true);
                let StudentObjective { task, total, ot } =
                    student_objective(&mut g, &student, &sb, &batch.prevalent, &batch.targets, &view, cfg)?;
                let total_v = g.value(total).item();
                check_finite(total_v, epoch, bi)?;
                g.backward(total)?;
                opt.step(&mut student.params, &sb.grads(&g));
                Ok(StepOut {
                    task: g.value(task).item(),
                    ot: g.value(ot.node).item(),
                    total: total_v,
                    converged: ot.result.converged,
                })
            };
            acc.push(step().map_err(|e| diverged(e, epoch, bi))?);
        }
        let nb = acc.len().max(1) as f64;
        let (probe_student, _) = student.predict(&probe_prev)?;
        let probe_student = simgraph::cosine_similarity(&probe_student)?;
        let gap = probe_student
            .zip_map(&probe_teacher, "frobenius_gap", |a, b| a - b)?
            .frobenius_norm();
        log.rows.push(MetricsRow {
            epoch,
            split: Split::Train,
            task_loss: acc.iter().map(|s| s.task).sum::<f64>() / nb,
            ot_loss: acc.iter().map(|s| s.ot).sum::<f64>() / nb,
            total_loss: acc.iter().map(|s| s.total).sum::<f64>() / nb,
            metrics: evaluate(&student, ds, Split::Train)?,
            sinkhorn_converged_frac: acc.iter().filter(|s| s.converged).count() as f64 / nb,
            frobenius_gap: gap,
        });

        let mut val_acc = Vec::with_capacity(val_chunks.len());
        for idx in &val_chunks {
            let batch = ds.batch(idx)?;
            let view = TeacherView::new(&t_emb, &t_out, idx, cfg.k_anchors)?;
            let mut g = DiffGraph::new();
            let sb = student.params.bind(&mut g, false);
            let StudentObjective { total, ot, .. } =
                student_objective(&mut g, &student, &sb, &batch.prevalent, &batch.targets, &view, cfg)?;
            val_acc.push((g.value(ot.node).item(), g.value(total).item(), ot.result.converged));
        }
        let nv = val_acc.len().max(1) as f64;
        let val_out = student.outputs(&val.prevalent, &val.privileged)?;
        let val_task = {
            let mut g = DiffGraph::new();
            let o = g.constant(val_out.clone());
            let l = task_loss(&mut g, o, &val.targets)?;
            g.value(l).item()
        };
        let val_metrics = score_outputs(&val_out, &val.targets)?;
        let val_ot = val_acc.iter().map(|v| v.0).sum::<f64>() / nv;
        let distill_weight = match cfg.stage {
            Stage::StudentPkdot => cfg.lambda,
            _ => 0.0,
        };
        log.rows.push(MetricsRow {
            epoch,
            split: Split::Val,
            task_loss: val_task,
            ot_loss: val_ot,
            total_loss: match cfg.stage {
                Stage::StudentPointwise(_) => val_acc.iter().map(|v| v.1).sum::<f64>() / nv,
                _ => val_task + distill_weight * val_ot,
            },
            metrics: val_metrics.clone(),
            sinkhorn_converged_frac: val_acc.iter().filter(|v| v.2).count() as f64 / nv,
            frobenius_gap: gap,
        });
        if epoch == 1 || epoch % cfg.snapshot_every == 0 || epoch == cfg.epochs {
            log.snapshots.push(Snapshot {
                epoch,
                teacher: probe_teacher.clone(),
                student: probe_student.clone(),
            });
        }
        let score = Selection::new(&val_metrics, val_task);
        if score.beats(&best.2) {
            best = (student.clone(), epoch, score, val_metrics);
        }
    }

    let (student, best_epoch, _, mut val_metrics) = best;
    if val_metrics.is_empty() {
        val_metrics = evaluate(&student, ds, Split::Val)?;
    }
    Ok(StudentRun {
        student,
        log,
        best_epoch,
        val_metrics,
    })
}

#[cfg(test)]
mod tests;
