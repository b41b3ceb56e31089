use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_student, Stage, TrainConfig};
use crate::datagen::{Dataset, Split, Task};
use crate::error::{Error, Result};
use crate::models::{TNet, TeacherModel};

/// Cartesian grid over batch size, anchor count and entropic regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub batch_sizes: Vec<usize>,
    pub k_anchors: Vec<usize>,
    pub epsilons: Vec<f64>,
}

impl AblationGrid {
    /// Grid points in row-major order: batch size, then anchors, then epsilon.
    pub fn points(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &b in &self.batch_sizes {
            for &k in &self.k_anchors {
                for &e in &self.epsilons {
                    out.push((b, k, e));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SeededTeacher {
    pub seed: u64,
    pub teacher: TeacherModel,
    pub tnet: TNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid_index: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub k_anchors: usize,
    pub epsilon: f64,
    /// Validation metrics of the best checkpoint.
    pub metrics: Vec<f64>,
    pub final_ot_loss: f64,
    pub final_frobenius_gap: f64,
    pub sinkhorn_converged_frac: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub task: Task,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let cols = metric_columns(self.task);
        let mut out = String::from("grid_index,seed,batch_size,k_anchors,epsilon");
        for j in 0..cols {
            write!(out, ",metric_{}", j + 1).unwrap();
        }
        out.push_str(",final_ot_loss,final_frobenius_gap,sinkhorn_converged_frac\n");
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{}",
                r.grid_index, r.seed, r.batch_size, r.k_anchors, r.epsilon
            )
            .unwrap();
            for m in &r.metrics {
                write!(out, ",{m}").unwrap();
            }
            writeln!(
                out,
                ",{},{},{}",
                r.final_ot_loss, r.final_frobenius_gap, r.sinkhorn_converged_frac
            )
            .unwrap();
        }
        out
    }
}

/// Trains one distilled student per grid point and teacher seed.
///
/// Jobs run in parallel; rows come back ordered by grid index, then seed.
pub fn ablate(
    ds: &Dataset,
    base: &TrainConfig,
    teachers: &[SeededTeacher],
    grid: &AblationGrid,
) -> Result<AblationTable> {
    if base.stage != Stage::StudentPkdot {
        return Err(Error::Config(format!(
            "ablation runs student-pkdot, got {}",
            base.stage.name()
        )));
    }
    let points = grid.points();
    if points.is_empty() || teachers.is_empty() {
        return Err(Error::Config("ablation grid and seed list must be non-empty".into()));
    }
    let mut configs = Vec::with_capacity(points.len());
    for &(b, k, e) in &points {
        let mut cfg = base.clone();
        cfg.batch_size = b;
        cfg.k_anchors = k;
        cfg.sinkhorn.epsilon = e;
        cfg.validate()?;
        configs.push(cfg);
    }
    let jobs: Vec<(usize, &SeededTeacher)> = (0..points.len())
        .flat_map(|g| teachers.iter().map(move |t| (g, t)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(gi, t)| {
            let mut cfg = configs[gi].clone();
            cfg.seed = t.seed;
            let run = train_student(ds, &t.teacher, &t.tnet, &cfg)?;
            let last = run.log.rows_for(Split::Val).last();
            Ok(AblationRow {
                grid_index: gi,
                seed: t.seed,
                batch_size: cfg.batch_size,
                k_anchors: cfg.k_anchors,
                epsilon: cfg.sinkhorn.epsilon,
                metrics: run.val_metrics,
                final_ot_loss: last.map_or(f64::NAN, |r| r.ot_loss),
                final_frobenius_gap: last.map_or(f64::NAN, |r| r.frobenius_gap),
                sinkhorn_converged_frac: last.map_or(f64::NAN, |r| r.sinkhorn_converged_frac),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { task: ds.task(), rows })
}

fn metric_columns(task: Task) -> usize {
    match task {
        Task::Classification { .. } => 1,
        Task::Regression { targets } => targets,
    }
}
