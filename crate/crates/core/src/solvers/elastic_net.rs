//! Cyclic coordinate descent for the elastic-net least-squares problem
//!
//! ```text
//! minimize  ‖y − 1·w0 − X w‖² + λ1‖w‖² + λ2‖w‖₁      (w ⪰ 0 when nonneg)
//! ```
//!
//! Missing design entries are zero. The bias `w0` is never penalized. Each
//! coordinate step is the exact one-dimensional minimizer
//! `S(ρ_j, λ2/2) / (‖x_j‖² + λ1)`, projected onto `[0, ∞)` when the
//! non-negativity constraint is active, so the objective never increases
//! between sweeps.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::types::{LinearModel, SparseGradeMatrix};

#[derive(Debug, Clone, Copy)]
pub struct ElasticNetProblem<'a> {
    pub design: &'a SparseGradeMatrix,
    pub targets: &'a [f64],
    /// Ridge weight.
    pub lambda1: f64,
    /// Lasso weight.
    pub lambda2: f64,
    pub nonneg: bool,
    pub fit_bias: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CdOptions {
    /// Stop once the largest coordinate change in a sweep falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Record the objective after every sweep.
    pub record_objective: bool,
}

impl Default for CdOptions {
    fn default() -> Self {
        CdOptions {
            tolerance: 1e-7,
            max_sweeps: 10_000,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CdReport {
    pub sweeps: usize,
    pub converged: bool,
    /// Objective at start, then after each sweep (when recorded).
    pub objective_trace: Vec<f64>,
}

/// Soft-thresholding `sign(z)·max(|z| − γ, 0)`.
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

impl ElasticNetProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.targets.len() != self.design.n_rows() {
            return Err(Error::Dimension(format!(
                "{} targets for {} design rows",
                self.targets.len(),
                self.design.n_rows()
            )));
        }
        if self.design.n_rows() == 0 {
            return Err(Error::Empty("regression problem with no rows".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
            if v < 0.0 {
                return Err(Error::param(name, format!("{v} is negative")));
            }
        }
        if self.targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("targets"));
        }
        Ok(())
    }

    fn dense_objective(&self, w: &[f64], residual: &[f64]) -> f64 {
        let data: f64 = residual.iter().map(|r| r * r).sum();
        let l2: f64 = w.iter().map(|x| x * x).sum();
        let l1: f64 = w.iter().map(|x| x.abs()).sum();
        data + self.lambda1 * l2 + self.lambda2 * l1
    }
}

/// Solves with default options.
pub fn solve_elastic_net(problem: &ElasticNetProblem<'_>) -> Result<LinearModel> {
    solve_elastic_net_with(problem, &CdOptions::default()).map(|(m, _)| m)
}

pub fn solve_elastic_net_with(
    problem: &ElasticNetProblem<'_>,
    options: &CdOptions,
) -> Result<(LinearModel, CdReport)> {
    problem.validate()?;
    let design = problem.design;
    let n = design.n_rows();
    let columns = design.columns();
    let sq_norms: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|(_, v)| v * v).sum())
        .collect();

    let mut weights = vec![0.0; columns.len()];
    let mut bias = if problem.fit_bias {
        problem.targets.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let mut residual: Vec<f64> = problem.targets.iter().map(|y| y - bias).collect();
    let threshold = problem.lambda2 / 2.0;

    let mut report = CdReport::default();
    if options.record_objective {
        report
            .objective_trace
            .push(problem.dense_objective(&weights, &residual));
    }

    while report.sweeps < options.max_sweeps {
        report.sweeps += 1;
        let mut max_change: f64 = 0.0;
        for (j, col) in columns.iter().enumerate() {
            let denom = sq_norms[j] + problem.lambda1;
            if col.is_empty() || denom <= 0.0 {
                continue;
            }
            let old = weights[j];
            let rho: f64 = col.iter().map(|&(i, x)| x * residual[i]).sum::<f64>() + sq_norms[j] * old;
            let mut new = soft_threshold(rho, threshold) / denom;
            if problem.nonneg && new < 0.0 {
                new = 0.0;
            }
            let delta = new - old;
            if delta != 0.0 {
                for &(i, x) in col {
                    residual[i] -= x * delta;
                }
                weights[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if problem.fit_bias {
            let shift = residual.iter().sum::<f64>() / n as f64;
            if shift != 0.0 {
                bias += shift;
                residual.iter_mut().for_each(|r| *r -= shift);
                max_change = max_change.max(shift.abs());
            }
        }
        if options.record_objective {
            report
                .objective_trace
                .push(problem.dense_objective(&weights, &residual));
        }
        if max_change < options.tolerance {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        warn!(
            "coordinate descent stopped at the {}-sweep cap before converging",
            options.max_sweeps
        );
    }

    let cols = design.col_ids();
    let weights: BTreeMap<String, f64> = weights
        .iter()
        .enumerate()
        .filter(|&(_, &w)| w != 0.0)
        .map(|(j, &w)| (cols.id(j).to_string(), w))
        .collect();
    let model = LinearModel {
        target_course: String::new(),
        bias,
        weights,
        nonneg: problem.nonneg,
        centered: false,
        lambda1: problem.lambda1,
        lambda2: problem.lambda2,
        converged: report.converged,
        sweeps: report.sweeps,
    };
    Ok((model, report))
}

/// Exact objective value of `model` on `problem`.
pub fn objective_elastic_net(problem: &ElasticNetProblem<'_>, model: &LinearModel) -> Result<f64> {
    problem.validate()?;
    let cols = problem.design.col_ids();
    let mut w = vec![0.0; cols.len()];
    for (course, &v) in &model.weights {
        let j = cols.get(course).ok_or_else(|| {
            Error::Dimension(format!("model weight for {course:?} has no design column"))
        })?;
        w[j] = v;
    }
    let bias = if problem.fit_bias { model.bias } else { 0.0 };
    let residual: Vec<f64> = (0..problem.design.n_rows())
        .map(|i| {
            let fit: f64 = problem.design.row(i).map(|(j, x)| x * w[j]).sum();
            problem.targets[i] - bias - fit
        })
        .collect();
    Ok(problem.dense_objective(&w, &residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IdIndex;

    pub(crate) fn dense(rows: &[Vec<f64>]) -> SparseGradeMatrix {
        let m = rows.first().map_or(0, |r| r.len());
        let ri = IdIndex::from_ids((0..rows.len()).map(|i| format!("r{i}"))).unwrap();
        let ci = IdIndex::from_ids((0..m).map(|j| format!("c{j}"))).unwrap();
        let trip = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &v)| (i, j, v)))
            .filter(|t| t.2 != 0.0)
            .collect();
        SparseGradeMatrix::from_triplets(ri, ci, trip).unwrap()
    }

    fn problem<'a>(x: &'a SparseGradeMatrix, y: &'a [f64], l1: f64, l2: f64) -> ElasticNetProblem<'a> {
        ElasticNetProblem {
            design: x,
            targets: y,
            lambda1: l1,
            lambda2: l2,
            nonneg: false,
            fit_bias: false,
        }
    }

    #[test]
    fn exact_least_squares_one_column() {
        let x = dense(&[vec![1.0], vec![1.0]]);
        let y = [2.0, 2.0];
        let m = solve_elastic_net(&problem(&x, &y, 0.0, 0.0)).unwrap();
        assert!((m.weight("c0") - 2.0).abs() < 1e-12);
        assert!(m.converged);
    }

    #[test]
    fn full_shrinkage_at_twice_correlation() {
        let x = dense(&[vec![1.0], vec![1.0]]);
        let y = [2.0, 2.0];
        let m = solve_elastic_net(&problem(&x, &y, 0.0, 8.0)).unwrap();
        assert!(m.weights.is_empty());
        let m = solve_elastic_net(&problem(&x, &y, 0.0, 7.0)).unwrap();
        assert!((m.weight("c0") - 0.25).abs() < 1e-12);
    }

    #[test]
    fn nonneg_projection_zeroes_negative_direction() {
        let x = dense(&[vec![1.0, 1.0], vec![2.0, -1.0], vec![0.5, -2.0], vec![1.0, 0.0]]);
        let y: Vec<f64> = (0..4)
            .map(|i| {
                let r = x.row(i).collect::<Vec<_>>();
                let get = |c| r.iter().find(|e| e.0 == c).map_or(0.0, |e| e.1);
                get(0) - 1.5 * get(1)
            })
            .collect();
        let mut p = problem(&x, &y, 0.0, 0.0);
        p.nonneg = true;
        let m = solve_elastic_net(&p).unwrap();
        assert_eq!(m.weight("c1"), 0.0);
        assert!(m.weight("c0") > 0.0);
    }

    #[test]
    fn objective_examples() {
        let x = dense(&[vec![1.0], vec![1.0]]);
        let zero = LinearModel {
            target_course: String::new(),
            bias: 0.0,
            weights: BTreeMap::new(),
            nonneg: false,
            centered: false,
            lambda1: 0.0,
            lambda2: 0.0,
            converged: true,
            sweeps: 0,
        };
        assert_eq!(objective_elastic_net(&problem(&x, &[0.0, 0.0], 1.0, 1.0), &zero).unwrap(), 0.0);
        assert_eq!(objective_elastic_net(&problem(&x, &[1.0, -1.0], 1.0, 1.0), &zero).unwrap(), 2.0);
        let mut bad = zero.clone();
        bad.weights.insert("nope".into(), 1.0);
        assert!(matches!(
            objective_elastic_net(&problem(&x, &[0.0, 0.0], 0.0, 0.0), &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = dense(&[vec![1.0], vec![1.0]]);
        assert!(matches!(
            solve_elastic_net(&problem(&x, &[1.0, f64::NAN], 0.0, 0.0)),
            Err(Error::NonFinite("targets"))
        ));
        assert!(solve_elastic_net(&problem(&x, &[1.0], 0.0, 0.0)).is_err());
        assert!(solve_elastic_net(&problem(&x, &[1.0, 1.0], -1.0, 0.0)).is_err());
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let x = dense(&[vec![1.0, 1.0], vec![1.0, 1.001], vec![1.0, 0.999]]);
        let y = [1.0, 2.0, 0.5];
        let opts = CdOptions {
            max_sweeps: 3,
            ..CdOptions::default()
        };
        let (m, rep) = solve_elastic_net_with(&problem(&x, &y, 0.0, 0.0), &opts).unwrap();
        assert!(!m.converged);
        assert_eq!(rep.sweeps, 3);
    }

    #[test]
    fn bias_only_problem() {
        let x = dense(&[vec![0.0], vec![0.0], vec![0.0]]);
        let y = [1.0, 2.0, 3.0];
        let mut p = problem(&x, &y, 0.0, 0.0);
        p.fit_bias = true;
        let m = solve_elastic_net(&p).unwrap();
        assert!((m.bias - 2.0).abs() < 1e-12);
        assert!(m.weights.is_empty());
    }
}
