use super::graph::{DiffGraph, NodeId};
use super::params::{Bound, ParamSet};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_entry: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Central-difference gradient check.
///
/// `objective` builds a scalar node from the bound parameters. For every
/// scalar entry the analytic derivative is compared with
/// `(f(θ+h) − f(θ−h)) / 2h`; the reported error is
/// `|analytic − numeric| / max(1e-12, |numeric|)`, maximized over entries.
pub fn finite_diff_check<F>(objective: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut DiffGraph, &Bound) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::contract(format!(
            "finite difference step must be > 0, got {step}"
        )));
    }
    let mut graph = DiffGraph::new();
    let bound = params.bind(&mut graph, true);
    let root = objective(&mut graph, &bound)?;
    graph.backward(root)?;
    let analytic = bound.grads(&graph);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = DiffGraph::new();
        let b = p.bind(&mut g, true);
        let r = objective(&mut g, &b)?;
        Ok(g.value(r).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_entry: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = params.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        let cols = grad.cols();
        for k in 0..grad.data().len() {
            let (row, col) = (k / cols, k % cols);
            let fail = || Error::GradCheck {
                param: params.name_at(pi).to_string(),
                row,
                col,
            };
            let orig = probe.value_at(pi).data()[k];
            probe.value_at_mut(pi).data_mut()[k] = orig + step;
            let plus = eval(&probe).map_err(|_| fail())?;
            probe.value_at_mut(pi).data_mut()[k] = orig - step;
            let minus = eval(&probe).map_err(|_| fail())?;
            probe.value_at_mut(pi).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(fail());
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = params.name_at(pi).to_string();
                report.worst_entry = (row, col);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor2;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor2::from_rows(&[[1.5, -0.25, 3.0]]).unwrap())
            .unwrap();
        let report = finite_diff_check(
            |g, b| {
                let sq = g.square(b.ids()[0])?;
                let s = g.scale(sq, 0.5)?;
                g.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn rejects_non_positive_step() {
        let p = ParamSet::new();
        assert!(finite_diff_check(|g, _| Ok(g.constant(Tensor2::scalar(0.0))), &p, 0.0).is_err());
    }

    #[test]
    fn reports_location_of_non_finite_objective() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor2::scalar(0.0)).unwrap();
        // log(x + 1e-6) is finite at 0 but not at 0 - 1e-5
        let err = finite_diff_check(
            |g, b| {
                let s = g.shift(b.ids()[0], 1e-6)?;
                let l = g.log(s)?;
                g.sum(l)
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck { ref param, row: 0, col: 0 } if param == "x"));
    }
}
