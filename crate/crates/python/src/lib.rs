//! Python bindings. Matrices cross the boundary as lists of rows.

#![allow(clippy::type_complexity)]

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pkdot::datagen::{self, SyntheticSpec, Task};
use pkdot::diffcore::Tensor2;
use pkdot::models::{StudentModel, TNet, TeacherModel};
use pkdot::otsolver::{self, CostMatrix, Marginals, SinkhornConfig};
use pkdot::simgraph::{self, AnchorSet, SimilarityMatrix};
use pkdot::trainer::{self, Stage, TrainConfig};
use pkdot::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingCheckpoint(_) => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::GradCheck { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Rows of equal length into a tensor.
pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Tensor2, Error> {
    if rows.is_empty() {
        return Err(Error::Contract("matrix must have at least one row".into()));
    }
    Tensor2::from_rows(&rows)
}

fn similarity(rows: Vec<Vec<f64>>) -> Result<SimilarityMatrix, Error> {
    SimilarityMatrix::new(matrix(rows)?)
}

#[pyfunction]
fn cosine_similarity(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix(x).map_err(to_py)?;
    Ok(simgraph::cosine_similarity(&x).map_err(to_py)?.to_rows())
}

/// Indices of the `k` anchors of a similarity matrix, ascending.
#[pyfunction]
fn select_anchors(s: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    let s = similarity(s).map_err(to_py)?;
    Ok(simgraph::select_anchors(&s, k).map_err(to_py)?.indices().to_vec())
}

/// Columns `anchors` of a similarity matrix.
#[pyfunction]
fn restrict(s: Vec<Vec<f64>>, anchors: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
    let s = similarity(s).map_err(to_py)?;
    let a = AnchorSet::new(anchors, s.size()).map_err(to_py)?;
    Ok(simgraph::restrict(&s, &a).map_err(to_py)?.to_rows())
}

#[pyfunction]
fn ground_cost(teacher_rows: Vec<Vec<f64>>, student_rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = matrix(teacher_rows).map_err(to_py)?;
    let s = matrix(student_rows).map_err(to_py)?;
    Ok(otsolver::ground_cost(&t, &s).map_err(to_py)?.matrix().to_rows())
}

#[pyclass(frozen, get_all, name = "SinkhornResult")]
struct PySinkhornResult {
    plan: Vec<Vec<f64>>,
    transport_cost: f64,
    entropy_term: f64,
    objective: f64,
    iterations_used: usize,
    converged: bool,
    marginal_violation: f64,
}

#[pymethods]
impl PySinkhornResult {
    fn __repr__(&self) -> String {
        format!(
            "SinkhornResult(objective={}, transport_cost={}, iterations_used={}, converged={})",
            self.objective, self.transport_cost, self.iterations_used, self.converged
        )
    }
}

/// Entropic OT between uniform (or given) marginals on a cost matrix.
#[pyfunction]
#[pyo3(signature = (cost, epsilon=0.1, max_iters=500, tolerance=1e-6, mu=None, nu=None))]
fn sinkhorn(
    cost: Vec<Vec<f64>>,
    epsilon: f64,
    max_iters: usize,
    tolerance: f64,
    mu: Option<Vec<f64>>,
    nu: Option<Vec<f64>>,
) -> PyResult<PySinkhornResult> {
    let c = CostMatrix::new(matrix(cost).map_err(to_py)?).map_err(to_py)?;
    let marg = match (mu, nu) {
        (None, None) => Marginals::uniform(c.size()),
        (mu, nu) => {
            let n = c.size();
            let uniform = vec![1.0 / n as f64; n];
            Marginals::new(mu.unwrap_or_else(|| uniform.clone()), nu.unwrap_or(uniform)).map_err(to_py)?
        }
    };
    let cfg = SinkhornConfig {
        epsilon,
        max_iters,
        tolerance,
    };
    let r = otsolver::sinkhorn(&c, &marg, &cfg).map_err(to_py)?;
    Ok(PySinkhornResult {
        plan: r.plan.to_rows(),
        transport_cost: r.transport_cost,
        entropy_term: r.entropy_term,
        objective: r.objective,
        iterations_used: r.iterations_used,
        converged: r.converged,
        marginal_violation: r.marginal_violation,
    })
}

/// Brute-force optimal assignment: `(permutation, mean cost)`.
#[pyfunction]
fn exact_assignment(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let c = CostMatrix::new(matrix(cost).map_err(to_py)?).map_err(to_py)?;
    otsolver::exact_assignment(&c).map_err(to_py)
}

#[pyfunction]
fn ccc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    pkdot::losses::ccc(&x, &y).map_err(to_py)
}

#[pyclass(name = "Dataset")]
struct PyDataset(datagen::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(datagen::load(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        datagen::save(&self.0, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.0.task().name()
    }

    #[getter]
    fn prevalent(&self) -> Vec<Vec<f64>> {
        self.0.prevalent.to_rows()
    }

    #[getter]
    fn privileged(&self) -> Vec<Vec<f64>> {
        self.0.privileged.to_rows()
    }

    /// Class labels, or `None` for regression data.
    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        match &self.0.targets {
            datagen::Targets::Classes(c) => Some(c.labels().to_vec()),
            datagen::Targets::Values(_) => None,
        }
    }

    #[getter]
    fn splits(&self) -> Vec<&'static str> {
        self.0.splits.iter().map(|s| s.name()).collect()
    }

    /// Validation score of a linear probe on each modality.
    fn probe_scores<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = datagen::probe_scores(&self.0).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("prevalent", p.prevalent)?;
        d.set_item("privileged", p.privileged)?;
        Ok(d)
    }
}

/// Synthetic two-modality dataset. `regime` is `"sew"` (privileged modality
/// clean) or `"wes"`; keyword overrides apply on top of the preset.
#[pyfunction]
#[pyo3(signature = (regime="sew", seed=0, regression_targets=None, n_samples=None, noise_prevalent=None, noise_privileged=None))]
fn generate(
    regime: &str,
    seed: u64,
    regression_targets: Option<usize>,
    n_samples: Option<usize>,
    noise_prevalent: Option<f64>,
    noise_privileged: Option<f64>,
) -> PyResult<PyDataset> {
    let mut spec = match regime {
        "sew" => SyntheticSpec::sew_classification(seed),
        "wes" => SyntheticSpec::wes_classification(seed),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown regime {other:?}; use 'sew' or 'wes'"
            )))
        }
    };
    if let Some(t) = regression_targets {
        spec.task = Task::Regression { targets: t };
    }
    spec.n_samples = n_samples.unwrap_or(spec.n_samples);
    spec.noise_prevalent = noise_prevalent.unwrap_or(spec.noise_prevalent);
    spec.noise_privileged = noise_privileged.unwrap_or(spec.noise_privileged);
    Ok(PyDataset(datagen::generate(&spec).map_err(to_py)?))
}

#[pyclass(name = "Teacher")]
struct PyTeacher {
    teacher: TeacherModel,
    tnet: TNet,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    val_metrics: Vec<f64>,
    #[pyo3(get)]
    metrics_csv: String,
}

#[pymethods]
impl PyTeacher {
    /// `(embeddings, outputs)` for paired prevalent and privileged rows.
    fn predict(&self, prevalent: Vec<Vec<f64>>, privileged: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let p = matrix(prevalent).map_err(to_py)?;
        let q = matrix(privileged).map_err(to_py)?;
        let (e, o, _) = self.teacher.predict(&p, &q).map_err(to_py)?;
        Ok((e.to_rows(), o.to_rows()))
    }

    fn checksum(&self) -> (u64, u64) {
        (self.teacher.params.checksum(), self.tnet.params.checksum())
    }
}

#[pyclass(name = "Student")]
struct PyStudent {
    student: StudentModel,
    #[pyo3(get)]
    stage: &'static str,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    val_metrics: Vec<f64>,
    #[pyo3(get)]
    metrics_csv: String,
}

#[pymethods]
impl PyStudent {
    /// `(embeddings, outputs)` from prevalent rows only.
    fn predict(&self, prevalent: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let p = matrix(prevalent).map_err(to_py)?;
        let (e, o) = self.student.predict(&p).map_err(to_py)?;
        Ok((e.to_rows(), o.to_rows()))
    }
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    stage: Stage,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight: Option<f64>,
    k_anchors: Option<usize>,
    epsilon: Option<f64>,
) -> TrainConfig {
    let mut c = TrainConfig::student(stage);
    c.seed = seed;
    c.epochs = epochs.unwrap_or(c.epochs);
    c.batch_size = batch_size.unwrap_or(c.batch_size);
    c.learning_rate = learning_rate.unwrap_or(c.learning_rate);
    c.lambda = weight.unwrap_or(c.lambda);
    c.k_anchors = k_anchors.unwrap_or(c.k_anchors);
    c.sinkhorn.epsilon = epsilon.unwrap_or(c.sinkhorn.epsilon);
    c
}

#[pyfunction]
#[pyo3(signature = (dataset, seed=0, epochs=None, batch_size=None, learning_rate=None))]
fn train_teacher(
    py: Python<'_>,
    dataset: &PyDataset,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
) -> PyResult<PyTeacher> {
    let cfg = train_config(
        Stage::Teacher,
        seed,
        epochs,
        batch_size,
        learning_rate,
        None,
        None,
        None,
    );
    let ds = &dataset.0;
    let run = py.detach(|| trainer::train_teacher(ds, &cfg)).map_err(to_py)?;
    Ok(PyTeacher {
        metrics_csv: run.log.to_csv(),
        teacher: run.teacher,
        tnet: run.tnet,
        best_epoch: run.best_epoch,
        val_metrics: run.val_metrics,
    })
}

/// Trains a student; `stage` is one of the CLI stage names, e.g. `"student-pkdot"`.
#[pyfunction]
#[pyo3(signature = (dataset, teacher, stage="student-pkdot", seed=0, epochs=None, batch_size=None,
                    learning_rate=None, weight=None, k_anchors=None, epsilon=None))]
#[allow(clippy::too_many_arguments)]
fn train_student(
    py: Python<'_>,
    dataset: &PyDataset,
    teacher: &PyTeacher,
    stage: &str,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight: Option<f64>,
    k_anchors: Option<usize>,
    epsilon: Option<f64>,
) -> PyResult<PyStudent> {
    let stage = Stage::from_name(stage)
        .filter(|s| s.is_student())
        .ok_or_else(|| PyValueError::new_err(format!("unknown student stage {stage:?}")))?;
    let cfg = train_config(
        stage,
        seed,
        epochs,
        batch_size,
        learning_rate,
        weight,
        k_anchors,
        epsilon,
    );
    let ds = &dataset.0;
    let run = py
        .detach(|| trainer::train_student(ds, &teacher.teacher, &teacher.tnet, &cfg))
        .map_err(to_py)?;
    Ok(PyStudent {
        metrics_csv: run.log.to_csv(),
        student: run.student,
        stage: stage.name(),
        best_epoch: run.best_epoch,
        val_metrics: run.val_metrics,
    })
}

#[pymodule]
fn pkdot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySinkhornResult>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTeacher>()?;
    m.add_class::<PyStudent>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(select_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(restrict, m)?)?;
    m.add_function(wrap_pyfunction!(ground_cost, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(exact_assignment, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train_student, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(matrix(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(matrix(vec![]).is_err());
        assert_eq!(matrix(vec![vec![1.0, 2.0]]).unwrap().shape(), (1, 2));
    }
}
