//! Reverse-mode gradients against central differences for every
//! differentiable op, loss and the full student objective.

use pkdot::datagen::Targets;
use pkdot::diffcore::{finite_diff_check, Bound, DiffGraph, NodeId, ParamSet, Tensor2};
use pkdot::losses::{self, ClassTargets, PointwiseKind};
use pkdot::models::{Architecture, StudentModel, TNet};
use pkdot::otsolver::{self, Marginals, SinkhornConfig};
use pkdot::rng::{self, Stream};
use pkdot::simgraph::{self, AnchorSet};
use pkdot::trainer::{self, Stage, TeacherView, TrainConfig};
use pkdot::Result;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(seed: u64, rows: usize, cols: usize) -> Tensor2 {
    rng::normal_matrix(&mut rng::stream(seed, Stream::Data), rows, cols, 1.0)
}

fn params(entries: &[(&str, Tensor2)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, t) in entries {
        p.insert(*name, t.clone()).unwrap();
    }
    p
}

/// Contracts a matrix node with fixed random weights so every entry matters.
fn weighted_sum(g: &mut DiffGraph, x: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = g.value(x).shape();
    let w = g.constant(random(seed ^ 0xabcd, r, c));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn check<F>(label: &str, p: &ParamSet, objective: F)
where
    F: Fn(&mut DiffGraph, &Bound) -> Result<NodeId>,
{
    let report = finite_diff_check(objective, p, STEP).unwrap();
    assert!(report.entries_checked > 0, "{label}: nothing checked");
    assert!(report.max_rel_error < TOL, "{label}: {report:?}");
}

fn unary_op(label: &str, x: Tensor2, f: fn(&mut DiffGraph, NodeId) -> Result<NodeId>) {
    let p = params(&[("x", x)]);
    check(label, &p, |g, b| {
        let y = f(g, b.ids()[0])?;
        weighted_sum(g, y, 1)
    });
}

#[test]
fn elementwise_unary_ops() {
    let x = random(1, 3, 4);
    let positive = x.map(|v| v.abs() + 0.5);
    // keep relu inputs away from the kink
    let off_kink = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    unary_op("tanh", x.clone(), |g, a| g.tanh(a));
    unary_op("exp", x.clone(), |g, a| g.exp(a));
    unary_op("square", x.clone(), |g, a| g.square(a));
    unary_op("relu", off_kink, |g, a| g.relu(a));
    unary_op("log", positive.clone(), |g, a| g.log(a));
    unary_op("sqrt", positive, |g, a| g.sqrt(a));
    unary_op("scale", x.clone(), |g, a| g.scale(a, -1.7));
    unary_op("shift", x.clone(), |g, a| g.shift(a, 2.5));
    unary_op("transpose", x, |g, a| g.transpose(a));
}

#[test]
fn binary_ops() {
    let a = random(2, 3, 3);
    let b = random(3, 3, 3).map(|v| v.abs() + 0.5);
    let p = params(&[("a", a), ("b", b)]);
    for (label, f) in [
        (
            "add",
            DiffGraph::add as fn(&mut DiffGraph, NodeId, NodeId) -> Result<NodeId>,
        ),
        ("sub", DiffGraph::sub),
        ("mul", DiffGraph::mul),
        ("div", DiffGraph::div),
        ("matmul", DiffGraph::matmul),
    ] {
        check(label, &p, |g, bd| {
            let y = f(g, bd.ids()[0], bd.ids()[1])?;
            weighted_sum(g, y, 2)
        });
    }
}

#[test]
fn reductions_and_reshapes() {
    let x = random(4, 4, 3);
    unary_op("sum", x.clone(), |g, a| g.sum(a));
    unary_op("mean", x.clone(), |g, a| g.mean(a));
    unary_op("row_sums", x.clone(), |g, a| g.row_sums(a));
    unary_op("col_sums", x.clone(), |g, a| g.col_sums(a));
    unary_op("select_cols", x.clone(), |g, a| g.select_cols(a, &[2, 0]));
    unary_op("concat_cols", x.clone(), |g, a| {
        let sq = g.square(a)?;
        g.concat_cols(a, sq)
    });
    unary_op("repeat_rows", x.clone(), |g, a| {
        let r = g.col_sums(a)?;
        g.repeat_rows(r, 5)
    });
    unary_op("repeat_cols", x, |g, a| {
        let c = g.row_sums(a)?;
        g.repeat_cols(c, 2)
    });
}

#[test]
fn similarity_and_restriction() {
    let x = random(5, 6, 4);
    unary_op("cosine_similarity", x.clone(), simgraph::cosine_similarity_node);
    unary_op("restrict", x, |g, a| {
        let s = simgraph::cosine_similarity_node(g, a)?;
        simgraph::restrict_node(g, s, &AnchorSet::new(vec![1, 4], 6)?)
    });
}

#[test]
fn ground_cost_and_transport_loss() {
    let teacher = random(6, 5, 3);
    let student = random(7, 5, 3);
    let p = params(&[("s", student)]);
    let t = teacher.clone();
    check("ground_cost", &p, move |g, b| {
        let c = otsolver::ground_cost_node(g, &t, b.ids()[0])?;
        weighted_sum(g, c, 3)
    });
    // re-solving at each perturbation differentiates the optimal value,
    // which equals the frozen-plan gradient at convergence
    let cfg = SinkhornConfig {
        epsilon: 0.5,
        max_iters: 100_000,
        tolerance: 1e-13,
    };
    check("ot_loss", &p, move |g, b| {
        let ot = otsolver::ot_loss_and_grad(g, &teacher, b.ids()[0], &Marginals::uniform(5), &cfg)?;
        Ok(ot.node)
    });
}

#[test]
fn task_losses() {
    let logits = random(8, 6, 4);
    let targets = ClassTargets::new(vec![0, 3, 1, 2, 2, 0], 4).unwrap();
    let p = params(&[("logits", logits)]);
    check("cross_entropy", &p, |g, b| {
        losses::cross_entropy_loss(g, b.ids()[0], &targets)
    });
    check("log_softmax", &p, |g, b| {
        let l = losses::log_softmax_node(g, b.ids()[0])?;
        weighted_sum(g, l, 4)
    });

    let pred = random(9, 8, 1);
    let target = random(10, 8, 1);
    let p = params(&[("pred", pred)]);
    check("ccc", &p, |g, b| {
        let t = g.constant(target.clone());
        losses::ccc_loss(g, b.ids()[0], t)
    });

    let pred = random(11, 8, 2);
    let target = random(12, 8, 2);
    let p = params(&[("pred", pred)]);
    check("multi_ccc", &p, |g, b| losses::multi_ccc_loss(g, b.ids()[0], &target));
    check("mse", &p, |g, b| losses::mse_loss(g, b.ids()[0], &target));
}

#[test]
fn pointwise_distillation_losses() {
    let teacher = random(13, 5, 4);
    let p = params(&[("s", random(14, 5, 4))]);
    for kind in [PointwiseKind::Mse, PointwiseKind::Cosine, PointwiseKind::Kl] {
        check(kind.name(), &p, |g, b| {
            losses::pointwise_kd_loss(g, kind, &teacher, b.ids()[0], 4.0)
        });
    }
    let task = params(&[("t", random(15, 1, 1)), ("d", random(16, 1, 1))]);
    check("total", &task, |g, b| {
        losses::total_loss(g, b.ids()[0], b.ids()[1], 0.4)
    });
}

fn toy_student() -> (StudentModel, Tensor2, Targets, TeacherView, TrainConfig) {
    let arch = Architecture {
        hidden: 5,
        feature_dim: 4,
        embed_dim: 4,
        tnet_code: 3,
        ..Architecture::default()
    };
    let tnet = TNet::new(&arch, 3, 7).unwrap();
    let student = StudentModel::new(&arch, 3, 3, Some(tnet), 11).unwrap();
    let prevalent = random(17, 8, 3);
    let targets = Targets::Classes(ClassTargets::new(vec![0, 1, 2, 0, 1, 2, 0, 1], 3).unwrap());
    let t_emb = random(18, 8, 4);
    let t_out = random(19, 8, 3);
    let idx: Vec<usize> = (0..8).collect();
    let mut cfg = TrainConfig::student(Stage::StudentPkdot);
    cfg.k_anchors = 3;
    cfg.sinkhorn = SinkhornConfig {
        epsilon: 0.1,
        max_iters: 200_000,
        tolerance: 1e-11,
    };
    let view = TeacherView::new(&t_emb, &t_out, &idx, cfg.k_anchors).unwrap();
    (student, prevalent, targets, view, cfg)
}

#[test]
fn full_student_objective() {
    let (student, prevalent, targets, view, cfg) = toy_student();
    let report = finite_diff_check(
        |g, b| {
            let o = trainer::student_objective(g, &student, b, &prevalent, &targets, &view, &cfg)?;
            assert!(
                o.ot.result.converged,
                "{:?}",
                (o.ot.result.marginal_violation, o.ot.result.iterations_used)
            );
            Ok(o.total)
        },
        &student.params,
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
    assert_eq!(report.entries_checked, student.params.num_scalars());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let (student, prevalent, targets, view, cfg) = toy_student();
    let grads = || {
        let mut g = DiffGraph::new();
        let b = student.params.bind(&mut g, true);
        let o = trainer::student_objective(&mut g, &student, &b, &prevalent, &targets, &view, &cfg).unwrap();
        g.backward(o.total).unwrap();
        b.grads(&g)
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(grads(), grads());
}
