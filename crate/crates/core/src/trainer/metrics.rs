use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{Split, Task};
use crate::diffcore::Tensor2;
use crate::simgraph::AnchorSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub task_loss: f64,
    pub ot_loss: f64,
    pub total_loss: f64,
    /// Accuracy, or CCC per regression target.
    pub metrics: Vec<f64>,
    pub sinkhorn_converged_frac: f64,
    pub frobenius_gap: f64,
}

/// Similarity matrices of the fixed probe batch at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub teacher: Tensor2,
    pub student: Tensor2,
}

/// Anchor columns applied to each side during one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRecord {
    pub epoch: usize,
    pub batch: usize,
    pub teacher: AnchorSet,
    pub student: AnchorSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub task: Task,
    pub rows: Vec<MetricsRow>,
    pub snapshots: Vec<Snapshot>,
    pub anchor_trace: Vec<AnchorRecord>,
}

impl MetricsLog {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            rows: Vec::new(),
            snapshots: Vec::new(),
            anchor_trace: Vec::new(),
        }
    }

    pub fn metric_columns(&self) -> usize {
        match self.task {
            Task::Classification { .. } => 1,
            Task::Regression { targets } => targets,
        }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("epoch,split,task_loss,ot_loss,total_loss");
        for j in 0..self.metric_columns() {
            write!(h, ",metric_{}", j + 1).unwrap();
        }
        h.push_str(",sinkhorn_converged_frac,frobenius_gap");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.split.name(),
                r.task_loss,
                r.ot_loss,
                r.total_loss
            )
            .unwrap();
            for m in &r.metrics {
                write!(out, ",{m}").unwrap();
            }
            writeln!(out, ",{},{}", r.sinkhorn_converged_frac, r.frobenius_gap).unwrap();
        }
        out
    }

    pub fn rows_for(&self, split: Split) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn row(&self, epoch: usize, split: Split) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.epoch == epoch && r.split == split)
    }
}

/// Mean of a metric vector: accuracy, or mean CCC across targets.
pub fn primary_metric(metrics: &[f64]) -> f64 {
    metrics.iter().sum::<f64>() / metrics.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog::new(Task::Regression { targets: 2 });
        log.rows.push(MetricsRow {
            epoch: 1,
            split: Split::Val,
            task_loss: 0.5,
            ot_loss: 0.25,
            total_loss: 0.6,
            metrics: vec![0.1, 0.2],
            sinkhorn_converged_frac: 1.0,
            frobenius_gap: 3.5,
        });
        assert_eq!(
            log.to_csv(),
            "epoch,split,task_loss,ot_loss,total_loss,metric_1,metric_2,sinkhorn_converged_frac,frobenius_gap\n\
             1,val,0.5,0.25,0.6,0.1,0.2,1,3.5\n"
        );
        let log = MetricsLog::new(Task::Classification { num_classes: 5 });
        assert!(log.header().contains("total_loss,metric_1,sinkhorn"));
    }
}
