//! Bias-only, global and course-specific matrix factorization predictors.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{
    TargetQuery, build_csmf_matrix, check_no_leakage, min_students_gate, select_rows,
};
use crate::error::{Error, Result};
use crate::predictors::{Skip, Trained};
use crate::solvers::{CompletionProblem, CompletionReport, SgdOptions, solve_completion};
use crate::types::{CourseDataset, MfModel, SparseGradeMatrix};

/// Fraction of training rows held out to choose the latent dimension.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Biases only: the completion model with latent dimension 0.
pub fn bias_only_train(
    matrix: &SparseGradeMatrix,
    lambda: f64,
    sgd: SgdOptions,
) -> Result<(MfModel, CompletionReport)> {
    solve_completion(&CompletionProblem {
        matrix,
        rank: 0,
        lambda,
        use_global_bias: true,
        sgd,
    })
}

/// Fits a completion model on `matrix` and predicts each held-out cell.
/// Fails if any held-out cell is observed in `matrix`.
pub fn mf_train_predict(
    matrix: &SparseGradeMatrix,
    heldout: &[TargetQuery],
    rank: usize,
    lambda: f64,
    use_global_bias: bool,
    sgd: SgdOptions,
) -> Result<(MfModel, Vec<f64>)> {
    check_no_leakage(matrix, heldout)?;
    let (model, _) = solve_completion(&CompletionProblem {
        matrix,
        rank,
        lambda,
        use_global_bias,
        sgd,
    })?;
    let preds = heldout
        .iter()
        .map(|q| model.predict_ids(&q.student, &q.course))
        .collect();
    Ok((model, preds))
}

fn csmf_fit_predict(
    course: &str,
    base: &CourseDataset,
    targets: &[TargetQuery],
    rank: usize,
    lambda: f64,
    sgd: SgdOptions,
) -> Result<Vec<f64>> {
    let x = build_csmf_matrix(course, base, targets)?;
    let (_, col_counts) = base.design.counts();
    let graded: BTreeSet<&str> = base
        .design
        .col_ids()
        .ids()
        .iter()
        .zip(&col_counts)
        .filter(|&(_, &n)| n > 0)
        .map(|(c, _)| c.as_str())
        .chain(targets.iter().flat_map(|q| q.prior.iter().map(|(c, _)| c.as_str())))
        .collect();
    let expected = (base.n_rows() + targets.len(), graded.len() + 1);
    if (x.n_rows(), x.n_cols()) != expected {
        return Err(Error::Dimension(format!(
            "course matrix is {}x{}, expected {}x{}",
            x.n_rows(),
            x.n_cols(),
            expected.0,
            expected.1
        )));
    }
    let (model, _) = solve_completion(&CompletionProblem {
        matrix: &x,
        rank,
        lambda,
        use_global_bias: true,
        sgd,
    })?;
    let last = x.n_cols() - 1;
    Ok((0..targets.len())
        .map(|t| model.predict(base.n_rows() + t, last))
        .collect())
}

/// Course-specific factorization: completes the last column of the
/// course matrix for the target rows.
pub fn csmf_train_predict(
    course: &str,
    base: &CourseDataset,
    targets: &[TargetQuery],
    rank: usize,
    lambda: f64,
    sgd: SgdOptions,
    min_students: usize,
) -> Result<Trained<Vec<f64>>> {
    if !min_students_gate(base, min_students) {
        return Ok(Trained::Skipped(Skip::TooFewStudents {
            rows: base.n_rows(),
            floor: min_students,
        }));
    }
    csmf_fit_predict(course, base, targets, rank, lambda, sgd).map(Trained::Fitted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsmfStarOutcome {
    pub best_rank: usize,
    /// Validation RMSE of the chosen rank; `None` when validation was infeasible.
    pub validation_rmse: Option<f64>,
    /// The validation split had fewer than two rows; the smallest rank was used.
    pub fallback: bool,
    pub predictions: Vec<f64>,
}

/// Chooses the latent dimension for one course on a seeded 10% row split of
/// the training students (ties go to the smaller dimension), then refits on
/// all training rows and predicts the targets.
#[allow(clippy::too_many_arguments)]
pub fn csmf_star_select(
    course: &str,
    base: &CourseDataset,
    targets: &[TargetQuery],
    rank_grid: &[usize],
    lambda: f64,
    sgd: SgdOptions,
    split_seed: u64,
    min_students: usize,
) -> Result<Trained<CsmfStarOutcome>> {
    let mut grid: Vec<usize> = rank_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let Some(&smallest) = grid.first() else {
        return Err(Error::param("rank_grid", "must not be empty"));
    };
    if !min_students_gate(base, min_students) {
        return Ok(Trained::Skipped(Skip::TooFewStudents {
            rows: base.n_rows(),
            floor: min_students,
        }));
    }

    let n = base.n_rows();
    let n_val = (n as f64 * VALIDATION_FRACTION).round() as usize;
    let (best_rank, validation_rmse, fallback) = if n_val < 2 {
        (smallest, None, true)
    } else {
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let mut val_rows = rows[..n_val].to_vec();
        let mut train_rows = rows[n_val..].to_vec();
        val_rows.sort_unstable();
        train_rows.sort_unstable();
        let train = select_rows(base, &train_rows)?;
        let val_queries: Vec<TargetQuery> = val_rows
            .iter()
            .map(|&i| TargetQuery {
                student: base.student(i).to_string(),
                course: course.to_string(),
                term: 0,
                prior: base
                    .design
                    .row(i)
                    .map(|(j, v)| (base.design.col_ids().id(j).to_string(), v))
                    .collect(),
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for &rank in &grid {
            let preds = csmf_fit_predict(course, &train, &val_queries, rank, lambda, sgd)?;
            let sse: f64 = preds
                .iter()
                .zip(&val_rows)
                .map(|(p, &i)| (p - base.targets[i]).powi(2))
                .sum();
            let rmse = (sse / n_val as f64).sqrt();
            if best.is_none_or(|(_, b)| rmse < b) {
                best = Some((rank, rmse));
            }
        }
        let (rank, rmse) = best.expect("grid is non-empty");
        (rank, Some(rmse), false)
    };

    let predictions = csmf_fit_predict(course, base, targets, best_rank, lambda, sgd)?;
    Ok(Trained::Fitted(CsmfStarOutcome {
        best_rank,
        validation_rmse,
        fallback,
        predictions,
    }))
}
