//! Task losses, point-to-point distillation baselines and the combined objective.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffGraph, NodeId, Tensor2};
use crate::error::{Error, Result};

const CCC_GUARD: f64 = 1e-12;

/// Batch moments behind the concordance correlation coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CccComponents {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub covariance: f64,
}

impl CccComponents {
    /// Biased (divide-by-n) moments.
    pub fn from_slices(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Shape {
                op: "ccc",
                left: (x.len(), 1),
                right: (y.len(), 1),
            });
        }
        if x.len() < 2 {
            return Err(Error::contract(format!(
                "CCC needs at least 2 samples, got {}",
                x.len()
            )));
        }
        let n = x.len() as f64;
        let mean_x = x.iter().sum::<f64>() / n;
        let mean_y = y.iter().sum::<f64>() / n;
        let var_x = x.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / n;
        let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n;
        let covariance = x.iter().zip(y).map(|(a, b)| (a - mean_x) * (b - mean_y)).sum::<f64>() / n;
        Ok(Self {
            mean_x,
            mean_y,
            var_x,
            var_y,
            covariance,
        })
    }

    pub fn ccc(&self) -> f64 {
        2.0 * self.covariance / (self.var_x + self.var_y + (self.mean_x - self.mean_y).powi(2) + CCC_GUARD)
    }
}

/// Concordance correlation coefficient of two equal-length series.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(CccComponents::from_slices(x, y)?.ccc())
}

/// `1 − CCC(pred, target)` for `b x 1` columns.
pub fn ccc_loss(graph: &mut DiffGraph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let (p, t) = (graph.value(pred), graph.value(target));
    p.check_same_shape(t, "ccc_loss")?;
    if p.cols() != 1 {
        return Err(Error::contract(format!(
            "ccc_loss expects a column, got {}x{}",
            p.rows(),
            p.cols()
        )));
    }
    let b = p.rows();
    if b < 2 {
        return Err(Error::contract(format!("CCC needs at least 2 samples, got {b}")));
    }
    let mean_x = graph.mean(pred)?;
    let mean_y = graph.mean(target)?;
    let mx = graph.repeat_rows(mean_x, b)?;
    let my = graph.repeat_rows(mean_y, b)?;
    let xc = graph.sub(pred, mx)?;
    let yc = graph.sub(target, my)?;
    let xc2 = graph.square(xc)?;
    let yc2 = graph.square(yc)?;
    let var_x = graph.mean(xc2)?;
    let var_y = graph.mean(yc2)?;
    let xy = graph.mul(xc, yc)?;
    let cov = graph.mean(xy)?;
    let dm = graph.sub(mean_x, mean_y)?;
    let dm2 = graph.square(dm)?;
    let vv = graph.add(var_x, var_y)?;
    let denom = graph.add(vv, dm2)?;
    let denom = graph.shift(denom, CCC_GUARD)?;
    let num = graph.scale(cov, 2.0)?;
    let ccc = graph.div(num, denom)?;
    let neg = graph.scale(ccc, -1.0)?;
    graph.shift(neg, 1.0)
}

/// Sum of per-column CCC losses, one column per regression target.
pub fn multi_ccc_loss(graph: &mut DiffGraph, pred: NodeId, target: &Tensor2) -> Result<NodeId> {
    let p = graph.value(pred);
    p.check_same_shape(target, "multi_ccc_loss")?;
    let mut total: Option<NodeId> = None;
    for c in 0..target.cols() {
        let pc = graph.select_cols(pred, &[c])?;
        let tc = graph.constant(target.select_cols(&[c])?);
        let l = ccc_loss(graph, pc, tc)?;
        total = Some(match total {
            Some(t) => graph.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::contract("regression target has no columns"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTargets {
    labels: Vec<usize>,
    num_classes: usize,
}

impl ClassTargets {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::contract(format!(
                "label {l} at sample {i} not in [0, {num_classes})"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn one_hot(&self) -> Tensor2 {
        Tensor2::from_fn(self.labels.len(), self.num_classes, |i, c| {
            if self.labels[i] == c {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Row-wise `log softmax`, stabilized by subtracting the (constant) row max.
pub fn log_softmax_node(graph: &mut DiffGraph, logits: NodeId) -> Result<NodeId> {
    let x = graph.value(logits);
    let (b, m) = x.shape();
    let row_max = Tensor2::from_fn(b, m, |i, _| x.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let row_max = graph.constant(row_max);
    let z = graph.sub(logits, row_max)?;
    let e = graph.exp(z)?;
    let s = graph.row_sums(e)?;
    let lse = graph.log(s)?;
    let lse = graph.repeat_cols(lse, m)?;
    graph.sub(z, lse)
}

pub fn softmax(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Mean negative log-likelihood of the true classes under a row softmax.
pub fn cross_entropy_loss(graph: &mut DiffGraph, logits: NodeId, targets: &ClassTargets) -> Result<NodeId> {
    let (b, m) = graph.value(logits).shape();
    if b != targets.labels.len() || m != targets.num_classes {
        return Err(Error::Shape {
            op: "cross_entropy_loss",
            left: (b, m),
            right: (targets.labels.len(), targets.num_classes),
        });
    }
    let logp = log_softmax_node(graph, logits)?;
    let onehot = graph.constant(targets.one_hot());
    let picked = graph.mul(onehot, logp)?;
    let total = graph.sum(picked)?;
    graph.scale(total, -1.0 / b as f64)
}

/// `task + λ · distill`.
pub fn total_loss(graph: &mut DiffGraph, task: NodeId, distill: NodeId, lambda: f64) -> Result<NodeId> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = graph.scale(distill, lambda)?;
    graph.add(task, weighted)
}

/// Mean squared difference between a node and a constant target.
pub fn mse_loss(graph: &mut DiffGraph, x: NodeId, target: &Tensor2) -> Result<NodeId> {
    let t = graph.constant(target.clone());
    let d = graph.sub(x, t)?;
    let d2 = graph.square(d)?;
    graph.mean(d2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseKind {
    Mse,
    Cosine,
    Kl,
}

impl PointwiseKind {
    pub fn name(self) -> &'static str {
        match self {
            PointwiseKind::Mse => "mse",
            PointwiseKind::Cosine => "cosine",
            PointwiseKind::Kl => "kl",
        }
    }
}

/// Per-sample distillation baselines.
///
/// `mse` and `cosine` compare embeddings, `kl` compares logits softened by
/// `temperature` and is scaled by `T²`. Teacher values are constants.
pub fn pointwise_kd_loss(
    graph: &mut DiffGraph,
    kind: PointwiseKind,
    teacher_out: &Tensor2,
    student_out: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let s = graph.value(student_out);
    teacher_out.check_same_shape(s, "pointwise_kd_loss")?;
    let b = s.rows();
    match kind {
        PointwiseKind::Mse => mse_loss(graph, student_out, teacher_out),
        PointwiseKind::Cosine => {
            for (name, m) in [("teacher", teacher_out), ("student", s)] {
                if let Some(i) = (0..m.rows()).find(|&i| m.row(i).iter().all(|&v| v == 0.0)) {
                    return Err(Error::Degenerate(format!("{name} embedding row {i} has zero norm")));
                }
            }
            let t_norms = teacher_out.map(|v| v * v).row_sums().map(f64::sqrt);
            let t_unit = Tensor2::from_fn(b, teacher_out.cols(), |i, j| teacher_out.get(i, j) / t_norms.get(i, 0));
            let t_unit = graph.constant(t_unit);
            let dots = graph.mul(t_unit, student_out)?;
            let dots = graph.row_sums(dots)?;
            let sq = graph.square(student_out)?;
            let sq = graph.row_sums(sq)?;
            let s_norms = graph.sqrt(sq)?;
            let cos = graph.div(dots, s_norms)?;
            let mean_cos = graph.mean(cos)?;
            let neg = graph.scale(mean_cos, -1.0)?;
            graph.shift(neg, 1.0)
        }
        PointwiseKind::Kl => {
            if !(temperature > 0.0) {
                return Err(Error::contract(format!("temperature must be > 0, got {temperature}")));
            }
            let p = softmax(&teacher_out.scale(1.0 / temperature));
            let log_p = p.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
            let entropy_part: f64 = p.data().iter().zip(log_p.data()).map(|(a, b)| a * b).sum();
            let scaled = graph.scale(student_out, 1.0 / temperature)?;
            let log_q = log_softmax_node(graph, scaled)?;
            let p = graph.constant(p);
            let cross = graph.mul(p, log_q)?;
            let cross = graph.sum(cross)?;
            // Σ p log p − Σ p log q, averaged over the batch and scaled by T²
            let neg = graph.scale(cross, -1.0)?;
            let kl = graph.shift(neg, entropy_part)?;
            graph.scale(kl, temperature * temperature / b as f64)
        }
    }
}
