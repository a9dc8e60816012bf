//! Course-specific and student-specific sparse linear regression.

use crate::dataset::{
    MIN_STUDENTS, TargetQuery, build_course_dataset, build_ssr_dataset,
    center_dataset, min_students_gate, select_rows,
};
use crate::error::Result;
use crate::ingest::Cohort;
use crate::predictors::{Skip, Trained};
use crate::solvers::{ElasticNetProblem, solve_elastic_net};
use crate::types::{CourseDataset, LinearModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsrParams {
    pub lambda1: f64,
    pub lambda2: f64,
    /// GPA-center the grades and drop the non-negativity constraint.
    pub centered: bool,
    pub min_students: usize,
}

impl CsrParams {
    pub fn new(lambda1: f64, lambda2: f64, centered: bool) -> Self {
        CsrParams {
            lambda1,
            lambda2,
            centered,
            min_students: MIN_STUDENTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsrParams {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Minimum overlap ratio for a training student to be kept.
    pub t: f64,
    pub centered: bool,
    pub min_students: usize,
}

impl SsrParams {
    pub fn new(lambda1: f64, lambda2: f64, t: f64) -> Self {
        SsrParams {
            lambda1,
            lambda2,
            t,
            centered: false,
            min_students: MIN_STUDENTS,
        }
    }
}

/// Fits one linear model on an uncentered dataset. In the centered variant
/// rows without prior grades are dropped, since their GPA is undefined.
fn fit_linear(ds: &CourseDataset, lambda1: f64, lambda2: f64, centered: bool) -> Result<LinearModel> {
    let centered_ds;
    let train = if centered {
        let keep: Vec<usize> = (0..ds.n_rows())
            .filter(|&i| !ds.design.row_cols(i).is_empty())
            .collect();
        let ds = if keep.len() == ds.n_rows() {
            center_dataset(ds)?
        } else {
            center_dataset(&select_rows(ds, &keep)?)?
        };
        centered_ds = ds;
        &centered_ds
    } else {
        ds
    };
    let problem = ElasticNetProblem {
        design: &train.design,
        targets: &train.targets,
        lambda1,
        lambda2,
        nonneg: !centered,
        fit_bias: true,
    };
    let mut model = solve_elastic_net(&problem)?;
    model.target_course = ds.target_course.clone();
    model.centered = centered;
    Ok(model)
}

/// Course-specific regression on a prebuilt (uncentered) dataset.
pub fn csr_fit(ds: &CourseDataset, params: &CsrParams) -> Result<Trained<LinearModel>> {
    if !min_students_gate(ds, params.min_students) {
        return Ok(Trained::Skipped(Skip::TooFewStudents {
            rows: ds.n_rows(),
            floor: params.min_students,
        }));
    }
    fit_linear(ds, params.lambda1, params.lambda2, params.centered).map(Trained::Fitted)
}

/// Builds the course dataset from `cohort` and fits it.
pub fn csr_train(course: &str, cohort: &Cohort, k: usize, params: &CsrParams) -> Result<Trained<LinearModel>> {
    csr_fit(&build_course_dataset(course, cohort, k)?, params)
}

/// Applies a linear model to a student's prior grades. Courses without a
/// weight contribute nothing. A centered model works on the student's grades
/// relative to their GPA and adds the GPA back.
pub fn csr_predict(model: &LinearModel, query: &TargetQuery) -> Result<f64> {
    if model.centered {
        let gpa = query.prior_gpa()?;
        let relative: f64 = query
            .prior
            .iter()
            .map(|(c, g)| model.weight(c) * (g - gpa))
            .sum();
        Ok(gpa + model.bias + relative)
    } else {
        let dot: f64 = query.prior.iter().map(|(c, g)| model.weight(c) * g).sum();
        Ok(model.bias + dot)
    }
}

/// Student-specific regression: restricts `base` to the target's prior
/// courses and to students overlapping them by at least `t`, fits, and
/// predicts. Skips when too few students survive.
pub fn ssr_train_predict(
    query: &TargetQuery,
    base: &CourseDataset,
    params: &SsrParams,
) -> Result<Trained<f64>> {
    let ds = build_ssr_dataset(query, base, params.t)?;
    if !min_students_gate(&ds, params.min_students) {
        return Ok(Trained::Skipped(Skip::TooFewStudents {
            rows: ds.n_rows(),
            floor: params.min_students,
        }));
    }
    let model = fit_linear(&ds, params.lambda1, params.lambda2, params.centered)?;
    csr_predict(&model, query).map(Trained::Fitted)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::types::GradeRecord;

    fn q(prior: &[(&str, f64)]) -> TargetQuery {
        TargetQuery {
            student: "t".into(),
            course: "T".into(),
            term: 5,
            prior: prior.iter().map(|&(c, g)| (c.to_string(), g)).collect(),
        }
    }

    fn model(bias: f64, w: &[(&str, f64)], centered: bool) -> LinearModel {
        LinearModel {
            target_course: "T".into(),
            bias,
            weights: w.iter().map(|&(c, v)| (c.to_string(), v)).collect::<BTreeMap<_, _>>(),
            nonneg: !centered,
            centered,
            lambda1: 0.0,
            lambda2: 0.0,
            converged: true,
            sweeps: 1,
        }
    }

    #[test]
    fn uncentered_prediction() {
        let m = model(1.0, &[("a", 0.5)], false);
        assert_eq!(csr_predict(&m, &q(&[("a", 4.0)])).unwrap(), 3.0);
        assert_eq!(csr_predict(&m, &q(&[("z", 4.0)])).unwrap(), 1.0);
        assert_eq!(csr_predict(&m, &q(&[])).unwrap(), 1.0);
    }

    #[test]
    fn centered_prediction_falls_back_to_gpa() {
        let m = model(0.0, &[], true);
        let p = csr_predict(&m, &q(&[("a", 3.0), ("b", 3.4)])).unwrap();
        assert!((p - 3.2).abs() < 1e-12);
        assert!(csr_predict(&m, &q(&[])).is_err());
    }

    #[test]
    fn centered_prediction_is_shift_equivariant() {
        let m = model(0.3, &[("a", 0.7), ("b", -0.2), ("c", 0.4)], true);
        let base = [("a", 2.0), ("b", 3.5), ("c", 1.0)];
        let p0 = csr_predict(&m, &q(&base)).unwrap();
        let shifted: Vec<_> = base.iter().map(|&(c, g)| (c, g + 1.25)).collect();
        let p1 = csr_predict(&m, &q(&shifted)).unwrap();
        assert!((p1 - p0 - 1.25).abs() < 1e-12);
    }

    fn planted_cohort(weight_b: f64) -> Cohort {
        // y = 2 + 0.5·a + weight_b·b over 30 students with varied priors.
        let mut recs = Vec::new();
        for i in 0..30 {
            let s = format!("s{i:02}");
            let a = 1.0 + (i % 7) as f64 * 0.4;
            let b = 0.5 + ((i * 3) % 11) as f64 * 0.3;
            let y = (2.0 + 0.5 * a + weight_b * b).clamp(0.0, 4.0);
            recs.push(GradeRecord::new(&s, "a", 0, a).unwrap());
            recs.push(GradeRecord::new(&s, "b", 0, b).unwrap());
            recs.push(GradeRecord::new(&s, "T", 1, y).unwrap());
        }
        Cohort::new(recs)
    }

    #[test]
    fn recovers_planted_linear_model() {
        let c = planted_cohort(0.0);
        let m = csr_train("T", &c, 2, &CsrParams::new(0.0, 0.0, false))
            .unwrap()
            .fitted()
            .unwrap();
        assert!((m.bias - 2.0).abs() < 1e-4, "bias {}", m.bias);
        assert!((m.weight("a") - 0.5).abs() < 1e-4);
        assert!(m.weight("b").abs() < 1e-4);
    }

    #[test]
    fn negative_planted_weight_projected_to_zero() {
        let c = planted_cohort(-0.3);
        let m = csr_train("T", &c, 2, &CsrParams::new(0.0, 0.0, false))
            .unwrap()
            .fitted()
            .unwrap();
        assert_eq!(m.weight("b"), 0.0);
        assert!(m.weights.values().all(|&w| w >= 0.0));
    }

    #[test]
    fn gpa_targets_shrink_centered_weights() {
        let mut recs = Vec::new();
        for i in 0..25 {
            let s = format!("s{i:02}");
            let a = 1.0 + (i % 5) as f64 * 0.6;
            let b = 0.8 + ((i * 7) % 9) as f64 * 0.35;
            recs.push(GradeRecord::new(&s, "a", 0, a).unwrap());
            recs.push(GradeRecord::new(&s, "b", 0, b).unwrap());
            recs.push(GradeRecord::new(&s, "T", 1, (a + b) / 2.0).unwrap());
        }
        let m = csr_train("T", &Cohort::new(recs), 2, &CsrParams::new(0.0, 1.0, true))
            .unwrap()
            .fitted()
            .unwrap();
        let max = m.weights.values().fold(0.0f64, |a, w| a.max(w.abs()));
        assert!(max < 1e-3, "max |w| = {max}");
        let pred = csr_predict(&m, &q(&[("a", 2.0), ("b", 3.0)])).unwrap();
        assert!((pred - 2.5).abs() < 1e-6);
    }

    #[test]
    fn gate_skips_small_courses() {
        let c = planted_cohort(0.0);
        let mut p = CsrParams::new(0.0, 0.0, false);
        p.min_students = 31;
        assert!(csr_train("T", &c, 2, &p).unwrap().is_skipped());
    }

    #[test]
    fn ssr_at_zero_threshold_matches_csr() {
        let c = planted_cohort(0.2);
        let base = build_course_dataset("T", &c, 2).unwrap();
        let target = q(&[("a", 2.0), ("b", 1.5)]);
        let csr = csr_fit(&base, &CsrParams::new(1.0, 2.0, false))
            .unwrap()
            .fitted()
            .unwrap();
        let ssr = ssr_train_predict(&target, &base, &SsrParams::new(1.0, 2.0, 0.0))
            .unwrap()
            .fitted()
            .unwrap();
        assert_eq!(ssr, csr_predict(&csr, &target).unwrap());
    }

    #[test]
    fn ssr_skips_without_superset_students() {
        let c = planted_cohort(0.2);
        let base = build_course_dataset("T", &c, 2).unwrap();
        let target = q(&[("a", 2.0), ("b", 1.5), ("x", 3.0)]);
        let out = ssr_train_predict(&target, &base, &SsrParams::new(1.0, 2.0, 1.0)).unwrap();
        assert!(out.is_skipped());
    }
}
