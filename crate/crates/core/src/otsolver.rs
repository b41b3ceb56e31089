//! Entropy-regularized optimal transport between two sets of row vectors.
//!
//! The solver keeps dual potentials `f`, `g` and the plan is
//! `π_ij = exp((f_i + g_j - C_ij) / ε)`. Iterations run on a kernel stabilized
//! by the current potentials, with large scalings absorbed back into them; if
//! a scaling sum underflows (very small ε) the remaining iterations switch to
//! log-sum-exp updates. Small ε is reached through a short halving schedule
//! that starts near the cost range and warm-starts each stage.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffGraph, NodeId, Tensor2};
use crate::error::{Error, Result};

/// Non-negative ground cost between teacher row `i` and student row `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Tensor2);

impl CostMatrix {
    pub fn new(matrix: Tensor2) -> Result<Self> {
        if let Some(k) = matrix.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain {
                op: "cost",
                row: k / matrix.cols(),
                col: k % matrix.cols(),
                value: matrix.data()[k],
            });
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &Tensor2 {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    mu: Vec<f64>,
    nu: Vec<f64>,
}

impl Marginals {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        for (name, v) in [("mu", &mu), ("nu", &nu)] {
            if v.is_empty() || v.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::contract(format!("{name} must have positive finite entries")));
            }
            let total: f64 = v.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!("{name} sums to {total}, expected 1")));
            }
        }
        Ok(Self { mu, nu })
    }

    pub fn uniform(n: usize) -> Self {
        let p = 1.0 / n as f64;
        Self {
            mu: vec![p; n],
            nu: vec![p; n],
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// `μ ⊗ ν`.
    pub fn product_coupling(&self) -> Tensor2 {
        Tensor2::from_fn(self.mu.len(), self.nu.len(), |i, j| self.mu[i] * self.nu[j])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_iters() -> usize {
    500
}

fn default_tolerance() -> f64 {
    1e-6
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iters: default_max_iters(),
            tolerance: default_tolerance(),
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "sinkhorn epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "sinkhorn tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("sinkhorn max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    pub plan: Tensor2,
    /// `⟨π, C⟩`
    pub transport_cost: f64,
    /// `KL(π ‖ μ⊗ν)`
    pub entropy_term: f64,
    /// `transport_cost + ε · entropy_term`
    pub objective: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    pub marginal_violation: f64,
}

/// Squared Euclidean distance between every teacher row and every student row.
pub fn ground_cost(teacher_rows: &Tensor2, student_rows: &Tensor2) -> Result<CostMatrix> {
    teacher_rows.check_same_shape(student_rows, "ground_cost")?;
    let n = teacher_rows.rows();
    let c = Tensor2::from_fn(n, n, |i, j| {
        teacher_rows
            .row(i)
            .iter()
            .zip(student_rows.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    CostMatrix::new(c)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sinkhorn(cost: &CostMatrix, marg: &Marginals, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let c = cost.matrix();
    let (n, m) = c.shape();
    if marg.mu.len() != n || marg.nu.len() != m {
        return Err(Error::Shape {
            op: "sinkhorn",
            left: (n, m),
            right: (marg.mu.len(), marg.nu.len()),
        });
    }
    let eps = cfg.epsilon;
    let mut f: Vec<f64> = (0..n)
        .map(|i| c.row(i).iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let mut g: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| c.get(i, j) - f[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let mut used = 0;
    // warm-start through a halving schedule from the cost range down to ε
    let c_max = c.data().iter().copied().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    let mut e = eps * 2.0;
    while e < c_max && schedule.len() < MAX_WARM_STAGES {
        schedule.push(e);
        e *= 2.0;
    }
    let warm_budget = cfg.max_iters / 2;
    for &stage_eps in schedule.iter().rev() {
        let budget = WARM_STAGE_ITERS.min(warm_budget - used);
        if budget == 0 {
            break;
        }
        let s = solve_at(c, marg, stage_eps, cfg.tolerance.max(WARM_TOLERANCE), budget, f, g);
        used += s.iterations;
        (f, g) = (s.f, s.g);
    }
    let mut state = solve_at(c, marg, eps, cfg.tolerance, cfg.max_iters - used, f, g);
    state.iterations += used;
    let SolverState {
        f,
        g,
        iterations,
        converged,
        violation,
    } = state;

    let plan = plan_from_potentials(c, &f, &g, eps);
    let transport_cost: f64 = plan.data().iter().zip(c.data()).map(|(p, c)| p * c).sum();
    let entropy_term = plan_relative_entropy(&plan, marg)?;
    Ok(SinkhornResult {
        transport_cost,
        entropy_term,
        objective: transport_cost + eps * entropy_term,
        plan,
        f,
        g,
        iterations_used: iterations,
        converged,
        marginal_violation: violation,
    })
}

struct SolverState {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    converged: bool,
    violation: f64,
}

/// Scalings above this magnitude are folded back into the potentials.
const ABSORB_LOG: f64 = 50.0;
const MAX_WARM_STAGES: usize = 30;
const WARM_STAGE_ITERS: usize = 50;
const WARM_TOLERANCE: f64 = 1e-4;

/// Runs at a single `eps` from potentials `f`, `g` for at most `budget` iterations.
fn solve_at(c: &Tensor2, marg: &Marginals, eps: f64, tol: f64, budget: usize, f: Vec<f64>, g: Vec<f64>) -> SolverState {
    let state = scaling_iterations(c, marg, eps, tol, budget, f, g);
    if state.converged || state.iterations >= budget {
        return state;
    }
    let done = state.iterations;
    let mut state = log_iterations(c, marg, eps, tol, budget - done, state);
    state.iterations += done;
    state
}

/// Kernel-scaling updates on the stabilized kernel `exp((f_i + g_j - C_ij)/ε)`.
///
/// Stops early (unconverged) when a scaling sum underflows; the caller
/// continues in the log domain.
fn scaling_iterations(
    c: &Tensor2,
    marg: &Marginals,
    eps: f64,
    tol: f64,
    budget: usize,
    mut f: Vec<f64>,
    mut g: Vec<f64>,
) -> SolverState {
    let (n, m) = c.shape();
    let kernel = |f: &[f64], g: &[f64]| Tensor2::from_fn(n, m, |i, j| ((f[i] + g[j] - c.get(i, j)) / eps).exp());
    let mut k = kernel(&f, &g);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let state = |f: Vec<f64>, g: Vec<f64>, iterations, converged, violation| SolverState {
        f,
        g,
        iterations,
        converged,
        violation,
    };
    let absorb = |f: &mut [f64], g: &mut [f64], u: &mut [f64], v: &mut [f64]| {
        for (fi, ui) in f.iter_mut().zip(u.iter_mut()) {
            *fi += eps * ui.ln();
            *ui = 1.0;
        }
        for (gj, vj) in g.iter_mut().zip(v.iter_mut()) {
            *gj += eps * vj.ln();
            *vj = 1.0;
        }
    };

    let mut violation = f64::INFINITY;
    for it in 1..=budget {
        for (i, out) in kv.iter_mut().enumerate() {
            *out = k.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        if it > 1 {
            // columns are exact after the previous v-update; rows carry the violation
            violation = (0..n).map(|i| (u[i] * kv[i] - marg.mu[i]).abs()).fold(0.0, f64::max);
            if violation < tol {
                absorb(&mut f, &mut g, &mut u, &mut v);
                return state(f, g, it - 1, true, violation);
            }
        }
        if kv.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            absorb(&mut f, &mut g, &mut u, &mut v);
            return state(f, g, it - 1, false, violation);
        }
        for i in 0..n {
            u[i] = marg.mu[i] / kv[i];
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            for (acc, kij) in ktu.iter_mut().zip(k.row(i)) {
                *acc += kij * u[i];
            }
        }
        if ktu.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            absorb(&mut f, &mut g, &mut u, &mut v);
            return state(f, g, it - 1, false, violation);
        }
        for j in 0..m {
            v[j] = marg.nu[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| x.ln().abs() > ABSORB_LOG) {
            absorb(&mut f, &mut g, &mut u, &mut v);
            k = kernel(&f, &g);
        }
    }
    absorb(&mut f, &mut g, &mut u, &mut v);
    let violation = marginal_violation(&plan_from_potentials(c, &f, &g, eps), marg);
    let converged = violation < tol;
    state(f, g, budget, converged, violation)
}

/// Log-sum-exp potential updates, continuing from `start`.
fn log_iterations(c: &Tensor2, marg: &Marginals, eps: f64, tol: f64, budget: usize, start: SolverState) -> SolverState {
    let (n, m) = c.shape();
    let log_mu: Vec<f64> = marg.mu.iter().map(|p| p.ln()).collect();
    let log_nu: Vec<f64> = marg.nu.iter().map(|p| p.ln()).collect();
    let SolverState {
        mut f,
        mut g,
        mut violation,
        ..
    } = start;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget {
        iterations += 1;
        for i in 0..n {
            let row = c.row(i);
            f[i] = eps * log_mu[i] - eps * log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_nu[j] - eps * log_sum_exp((0..n).map(|i| (f[i] - c.get(i, j)) / eps));
        }
        violation = marginal_violation(&plan_from_potentials(c, &f, &g, eps), marg);
        if violation < tol {
            converged = true;
            break;
        }
    }
    SolverState {
        f,
        g,
        iterations,
        converged,
        violation,
    }
}

fn plan_from_potentials(c: &Tensor2, f: &[f64], g: &[f64], eps: f64) -> Tensor2 {
    Tensor2::from_fn(c.rows(), c.cols(), |i, j| ((f[i] + g[j] - c.get(i, j)) / eps).exp())
}

/// Largest absolute deviation of the plan's row and column sums from `μ`, `ν`.
pub fn marginal_violation(plan: &Tensor2, marg: &Marginals) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    let r = rows.data().iter().zip(&marg.mu).map(|(a, b)| (a - b).abs());
    let c = cols.data().iter().zip(&marg.nu).map(|(a, b)| (a - b).abs());
    r.chain(c).fold(0.0, f64::max)
}

/// `Σ π_ij log(π_ij / (μ_i ν_j))` with `0 log 0 = 0`.
pub fn plan_relative_entropy(plan: &Tensor2, marg: &Marginals) -> Result<f64> {
    if plan.rows() != marg.mu.len() || plan.cols() != marg.nu.len() {
        return Err(Error::Shape {
            op: "plan_relative_entropy",
            left: plan.shape(),
            right: (marg.mu.len(), marg.nu.len()),
        });
    }
    let mut total = 0.0;
    for i in 0..plan.rows() {
        for j in 0..plan.cols() {
            let p = plan.get(i, j);
            if p < 0.0 {
                return Err(Error::Domain {
                    op: "plan_relative_entropy",
                    row: i,
                    col: j,
                    value: p,
                });
            }
            if p > 0.0 {
                total += p * (p / (marg.mu[i] * marg.nu[j])).ln();
            }
        }
    }
    Ok(total)
}

/// Largest size accepted by [`exact_assignment`].
pub const EXACT_ASSIGNMENT_MAX: usize = 8;

/// Brute-force minimum of `(1/n) Σ_i C[i, σ(i)]` over all permutations.
///
/// Permutations are visited in lexicographic order and only a strictly
/// smaller value replaces the incumbent.
pub fn exact_assignment(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let c = cost.matrix();
    let n = c.rows();
    if c.cols() != n {
        return Err(Error::Shape {
            op: "exact_assignment",
            left: c.shape(),
            right: (n, n),
        });
    }
    if n > EXACT_ASSIGNMENT_MAX {
        return Err(Error::contract(format!(
            "exact assignment limited to n <= {EXACT_ASSIGNMENT_MAX}, got {n}"
        )));
    }
    if n == 0 {
        return Ok((vec![], 0.0));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum::<f64>();
    let mut best = perm.clone();
    let mut best_total = total(&perm);
    while next_permutation(&mut perm) {
        let t = total(&perm);
        if t < best_total {
            best_total = t;
            best.copy_from_slice(&perm);
        }
    }
    Ok((best, best_total / n as f64))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Distillation loss node plus the solver diagnostics behind it.
#[derive(Clone, Debug)]
pub struct OtLoss {
    pub node: NodeId,
    pub result: SinkhornResult,
}

/// Registers `Σ π_ij C_ij(student) + ε H(π)` on the graph with `π` held fixed.
///
/// The teacher rows are constants; gradients reach the student rows only
/// through the cost, so `∂W/∂C_ij = π_ij`.
pub fn ot_loss_and_grad(
    graph: &mut DiffGraph,
    teacher_rows: &Tensor2,
    student_rows: NodeId,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<OtLoss> {
    let cost = ground_cost(teacher_rows, graph.value(student_rows))?;
    let result = sinkhorn(&cost, marg, cfg)?;
    let cost_node = ground_cost_node(graph, teacher_rows, student_rows)?;
    let plan = graph.constant(result.plan.clone());
    let weighted = graph.mul(plan, cost_node)?;
    let transport = graph.sum(weighted)?;
    let node = graph.shift(transport, cfg.epsilon * result.entropy_term)?;
    Ok(OtLoss { node, result })
}

/// Differentiable `C_ij = |t_i|² + |s_j|² − 2 t_i·s_j`.
pub fn ground_cost_node(graph: &mut DiffGraph, teacher_rows: &Tensor2, student_rows: NodeId) -> Result<NodeId> {
    let s = graph.value(student_rows);
    teacher_rows.check_same_shape(s, "ground_cost")?;
    let n = teacher_rows.rows();
    let t_sq = teacher_rows.map(|v| v * v).row_sums();
    let t_sq = graph.constant(t_sq);
    let t_term = graph.repeat_cols(t_sq, n)?;
    let s_sq = graph.square(student_rows)?;
    let s_sq = graph.row_sums(s_sq)?;
    let s_sq_t = graph.transpose(s_sq)?;
    let s_term = graph.repeat_rows(s_sq_t, n)?;
    let t = graph.constant(teacher_rows.clone());
    let st = graph.transpose(student_rows)?;
    let cross = graph.matmul(t, st)?;
    let cross = graph.scale(cross, -2.0)?;
    let partial = graph.add(t_term, s_term)?;
    graph.add(partial, cross)
}
