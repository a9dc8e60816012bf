//! End-to-end experiment: split the records at a target term, build the
//! per-course data, run a method at one grid cell, select cells by policy.

use std::collections::{BTreeSet, HashSet};

use log::warn;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{
    MIN_STUDENTS, TargetInstance, TargetQuery, build_course_dataset, build_mf_matrix,
    build_target_instances, check_no_leakage, select_rows,
};
use crate::error::{Error, Result};
use crate::eval::{
    Cell, CourseSize, DatasetStats, GridSpec, MetricReport, Policy, Scored, compute_metrics,
    dataset_statistics, grid_search,
};
use crate::ingest::{Cohort, split_active, terms, truncate_after};
use crate::predictors::{
    CsrParams, Method, Skip, SsrParams, Trained, bias_only_train, csmf_star_select,
    csmf_train_predict, csr_fit, csr_predict, mf_train_predict, sbcf_predict, ssr_train_predict,
};
use crate::solvers::SgdOptions;
use crate::types::{CourseDataset, GradeRecord, MAX_GRADE, MIN_GRADE, SparseGradeMatrix};

/// Training data and targets of one course.
#[derive(Debug, Clone)]
pub struct CourseData {
    pub train: CourseDataset,
    pub test: Vec<TargetInstance>,
}

impl CourseData {
    pub fn course(&self) -> &str {
        &self.train.target_course
    }

    fn queries(&self) -> Vec<TargetQuery> {
        self.test.iter().map(|t| t.query.clone()).collect()
    }
}

/// Everything needed to train and score at one (target term, k).
#[derive(Debug, Clone)]
pub struct SplitData {
    pub target_term: u32,
    pub k: usize,
    /// Courses passing the student floor, in course-id order.
    pub courses: Vec<CourseData>,
    pub skipped: Vec<(String, Skip)>,
    /// Targets are training rows held out from their own course, so their
    /// cells must also be removed from any shared matrix.
    pub holdout: bool,
}

impl SplitData {
    pub fn n_targets(&self) -> usize {
        self.courses.iter().map(|c| c.test.len()).sum()
    }

    pub fn statistics(&self) -> DatasetStats {
        let sizes: Vec<CourseSize> = self
            .courses
            .iter()
            .map(|c| CourseSize {
                train_rows: c.train.n_rows(),
                test_rows: c.test.len(),
                prior_courses: c.train.design.n_cols(),
                grades: c.train.design.nnz(),
            })
            .collect();
        dataset_statistics(self.k, &sizes)
    }
}

/// Courses graded in `term`, in id order.
pub fn courses_in_term(records: &[GradeRecord], term: u32) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.term == term)
        .map(|r| r.course.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Splits `records` at `target_term`: students graded in that term supply
/// the targets, everyone else the training rows. `build` produces each
/// course's training dataset from the inactive cohort (a cache hook).
pub fn build_split_with<F>(
    records: &[GradeRecord],
    target_term: u32,
    k: usize,
    min_students: usize,
    build: F,
) -> Result<SplitData>
where
    F: Fn(&str, &Cohort, usize) -> Result<CourseDataset> + Sync,
{
    let (active, inactive) = split_active(records, target_term)?;
    let offered = courses_in_term(&active.records, target_term);
    let built: Vec<(String, Result<CourseData>)> = offered
        .into_par_iter()
        .map(|course| {
            let data = build(&course, &inactive, k).map(|train| CourseData {
                test: build_target_instances(&course, &active, target_term, k),
                train,
            });
            (course, data)
        })
        .collect();
    let mut courses = Vec::new();
    let mut skipped = Vec::new();
    for (course, data) in built {
        let data = data?;
        if data.train.n_rows() < min_students {
            skipped.push((
                course,
                Skip::TooFewStudents {
                    rows: data.train.n_rows(),
                    floor: min_students,
                },
            ));
        } else if data.test.is_empty() {
            skipped.push((course, Skip::NoTargets));
        } else {
            courses.push(data);
        }
    }
    Ok(SplitData {
        target_term,
        k,
        courses,
        skipped,
        holdout: false,
    })
}

pub fn build_split(records: &[GradeRecord], target_term: u32, k: usize, min_students: usize) -> Result<SplitData> {
    build_split_with(records, target_term, k, min_students, build_course_dataset)
}

/// The last term before `target_term`, provided another term precedes it
/// (so that the earlier split has something to train on).
pub fn previous_term(records: &[GradeRecord], target_term: u32) -> Result<u32> {
    let earlier: Vec<u32> = terms(records).into_iter().filter(|&t| t < target_term).collect();
    if earlier.len() < 2 {
        return Err(Error::param(
            "policy",
            format!("selecting on the previous term needs two terms before {target_term}"),
        ));
    }
    Ok(earlier[earlier.len() - 1])
}

/// The same split one term earlier, on records truncated after that term.
pub fn prior_semester_split(
    records: &[GradeRecord],
    target_term: u32,
    k: usize,
    min_students: usize,
) -> Result<SplitData> {
    let previous = previous_term(records, target_term)?;
    build_split(&truncate_after(records, previous), previous, k, min_students)
}

/// Holds out a seeded 10% of each course's training rows as targets. Courses
/// whose validation part would have fewer than two rows, or whose remaining
/// training part falls under the floor, are skipped.
pub fn holdout_split(split: &SplitData, seed: u64, min_students: usize) -> Result<SplitData> {
    let mut courses = Vec::new();
    let mut skipped = Vec::new();
    for (idx, data) in split.courses.iter().enumerate() {
        let n = data.train.n_rows();
        let n_val = (n as f64 * crate::predictors::VALIDATION_FRACTION).round() as usize;
        if n_val < 2 || n - n_val < min_students {
            skipped.push((
                data.course().to_string(),
                Skip::TooFewStudents {
                    rows: n.saturating_sub(n_val),
                    floor: min_students,
                },
            ));
            continue;
        }
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64)));
        let mut val = rows[..n_val].to_vec();
        let mut train = rows[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        let ds = &data.train;
        let test = val
            .iter()
            .map(|&i| TargetInstance {
                query: TargetQuery {
                    student: ds.student(i).to_string(),
                    course: ds.target_course.clone(),
                    term: split.target_term,
                    prior: ds
                        .design
                        .row(i)
                        .map(|(j, v)| (ds.design.col_ids().id(j).to_string(), v))
                        .collect(),
                },
                true_grade: ds.targets[i],
            })
            .collect();
        courses.push(CourseData {
            train: select_rows(ds, &train)?,
            test,
        });
    }
    Ok(SplitData {
        target_term: split.target_term,
        k: split.k,
        courses,
        skipped,
        holdout: true,
    })
}

/// Settings shared by every fit of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    /// Seeds every solver and every row split.
    pub seed: u64,
    pub sgd: SgdOptions,
    pub min_students: usize,
    pub clamp: bool,
    /// Latent dimensions the per-course variant chooses from.
    pub star_ranks: Vec<usize>,
    /// Fit the student-specific models on GPA-centered grades.
    pub ssr_centered: bool,
}

impl RunContext {
    pub fn new(seed: u64) -> Self {
        RunContext {
            seed,
            sgd: SgdOptions {
                seed,
                ..SgdOptions::default()
            },
            min_students: MIN_STUDENTS,
            clamp: false,
            star_ranks: crate::eval::RANK_GRID.to_vec(),
            ssr_centered: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodOutput {
    /// In course order, then target order within a course.
    pub predictions: Vec<Scored>,
    /// Targets the method declined to predict.
    pub unpredicted: usize,
    /// Latent dimension chosen per course, for the per-course variant.
    pub chosen_ranks: Vec<(String, usize)>,
}

fn rank_param(cell: &Cell) -> Result<usize> {
    let l = cell.require("l")?;
    if l < 0.0 || l.fract() != 0.0 {
        return Err(Error::param("l", format!("{l} is not a latent dimension")));
    }
    Ok(l as usize)
}

/// Rebuilds `m` without the given (student, course) cells.
fn without_cells(m: &SparseGradeMatrix, cells: &HashSet<(&str, &str)>) -> Result<SparseGradeMatrix> {
    let triplets = m
        .entries()
        .filter(|&(i, j, _)| !cells.contains(&(m.row_ids().id(i), m.col_ids().id(j))))
        .collect();
    SparseGradeMatrix::from_triplets(m.row_ids().clone(), m.col_ids().clone(), triplets)
}

/// The global completion matrix of a split.
pub fn union_matrix(split: &SplitData) -> Result<SparseGradeMatrix> {
    let queries: Vec<Vec<TargetQuery>> = split.courses.iter().map(CourseData::queries).collect();
    let inputs: Vec<(&CourseDataset, &[TargetQuery])> = split
        .courses
        .iter()
        .zip(&queries)
        .map(|(c, q)| (&c.train, q.as_slice()))
        .collect();
    let m = build_mf_matrix(&inputs)?;
    if !split.holdout {
        return Ok(m);
    }
    let held: HashSet<(&str, &str)> = split
        .courses
        .iter()
        .flat_map(|c| c.test.iter().map(|t| (t.query.student.as_str(), t.query.course.as_str())))
        .collect();
    without_cells(&m, &held)
}

/// Per-course values: `Some` for each predicted target, in target order.
type CourseValues = Result<(Vec<Option<f64>>, Option<usize>)>;

fn per_course<F>(split: &SplitData, f: F) -> Result<Vec<(Vec<Option<f64>>, Option<usize>)>>
where
    F: Fn(usize, &CourseData) -> CourseValues + Sync,
{
    split
        .courses
        .par_iter()
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

fn skipped_all(c: &CourseData) -> CourseValues {
    Ok((vec![None; c.test.len()], None))
}

/// Trains `method` at `cell` on every course of `split` and predicts its
/// targets. Every fit uses the context seed.
pub fn run_method(method: Method, split: &SplitData, cell: &Cell, ctx: &RunContext) -> Result<MethodOutput> {
    let sgd = SgdOptions {
        seed: ctx.seed,
        ..ctx.sgd
    };
    let values = match method {
        Method::Csr | Method::CsrRc => {
            let centered = method == Method::CsrRc;
            let params = CsrParams {
                lambda1: cell.require("lambda1")?,
                lambda2: cell.require("lambda2")?,
                centered,
                min_students: ctx.min_students,
            };
            per_course(split, |_, c| {
                let Trained::Fitted(model) = csr_fit(&c.train, &params)? else {
                    return skipped_all(c);
                };
                let preds = c
                    .test
                    .iter()
                    .map(|t| {
                        if centered && t.query.prior.is_empty() {
                            Ok(None)
                        } else {
                            csr_predict(&model, &t.query).map(Some)
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok((preds, None))
            })?
        }
        Method::Ssr => {
            let params = SsrParams {
                lambda1: cell.require("lambda1")?,
                lambda2: cell.require("lambda2")?,
                t: cell.require("t")?,
                centered: ctx.ssr_centered,
                min_students: ctx.min_students,
            };
            per_course(split, |_, c| {
                let preds = c
                    .test
                    .par_iter()
                    .map(|t| {
                        if t.query.prior.is_empty() {
                            return Ok(None);
                        }
                        Ok(ssr_train_predict(&t.query, &c.train, &params)?.fitted())
                    })
                    .collect::<Result<_>>()?;
                Ok((preds, None))
            })?
        }
        Method::Sbcf => {
            let r = cell.require("r")?;
            if r < 1.0 || r.fract() != 0.0 {
                return Err(Error::param("r", format!("{r} is not a positive integer")));
            }
            per_course(split, |_, c| {
                let preds = c
                    .test
                    .iter()
                    .map(|t| {
                        if t.query.prior.is_empty() {
                            return Ok(None);
                        }
                        sbcf_predict(&t.query, &c.train, r as usize).map(|p| Some(p.value))
                    })
                    .collect::<Result<_>>()?;
                Ok((preds, None))
            })?
        }
        Method::BiasOnly | Method::Mf | Method::MfGb => {
            let lambda = cell.require("lambda")?;
            let matrix = union_matrix(split)?;
            let queries: Vec<TargetQuery> = split.courses.iter().flat_map(CourseData::queries).collect();
            let flat = if method == Method::BiasOnly {
                check_no_leakage(&matrix, &queries)?;
                let (model, _) = bias_only_train(&matrix, lambda, sgd)?;
                queries.iter().map(|q| model.predict_ids(&q.student, &q.course)).collect()
            } else {
                let rank = rank_param(cell)?;
                mf_train_predict(&matrix, &queries, rank, lambda, method == Method::Mf, sgd)?.1
            };
            let mut it = flat.into_iter();
            split
                .courses
                .iter()
                .map(|c| (c.test.iter().map(|_| it.next()).collect(), None))
                .collect()
        }
        Method::Csmf => {
            let lambda = cell.require("lambda")?;
            let rank = rank_param(cell)?;
            per_course(split, |_, c| {
                match csmf_train_predict(c.course(), &c.train, &c.queries(), rank, lambda, sgd, ctx.min_students)? {
                    Trained::Fitted(p) => Ok((p.into_iter().map(Some).collect(), None)),
                    Trained::Skipped(_) => skipped_all(c),
                }
            })?
        }
        Method::CsmfStar => {
            let lambda = cell.require("lambda")?;
            per_course(split, |i, c| {
                let out = csmf_star_select(
                    c.course(),
                    &c.train,
                    &c.queries(),
                    &ctx.star_ranks,
                    lambda,
                    sgd,
                    ctx.seed.wrapping_add(i as u64),
                    ctx.min_students,
                )?;
                match out {
                    Trained::Fitted(o) => Ok((o.predictions.into_iter().map(Some).collect(), Some(o.best_rank))),
                    Trained::Skipped(_) => skipped_all(c),
                }
            })?
        }
    };

    let mut out = MethodOutput::default();
    for (c, (preds, rank)) in split.courses.iter().zip(values) {
        if let Some(l) = rank {
            out.chosen_ranks.push((c.course().to_string(), l));
        }
        for (t, p) in c.test.iter().zip(preds) {
            match p {
                Some(v) => out.predictions.push(Scored {
                    student: t.query.student.clone(),
                    course: t.query.course.clone(),
                    predicted: if ctx.clamp { v.clamp(MIN_GRADE, MAX_GRADE) } else { v },
                    actual: t.true_grade,
                }),
                None => out.unpredicted += 1,
            }
        }
    }
    Ok(out)
}

/// Fails if any predicted (student, course) pair is observed anywhere in the
/// split's training data: as a training row of that course or as a prior
/// grade in any course's design.
pub fn audit_leakage(split: &SplitData, predictions: &[Scored]) -> Result<()> {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for c in &split.courses {
        let ds = &c.train;
        for i in 0..ds.n_rows() {
            seen.insert((ds.student(i), ds.target_course.as_str()));
            for (j, _) in ds.design.row(i) {
                seen.insert((ds.student(i), ds.design.col_ids().id(j)));
            }
        }
    }
    for p in predictions {
        if seen.contains(&(p.student.as_str(), p.course.as_str())) {
            return Err(Error::Leakage {
                student: p.student.clone(),
                course: p.course.clone(),
            });
        }
    }
    Ok(())
}

/// A method run end to end: the selected cell, its test-split output and
/// the per-cell selection metrics.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub policy: Policy,
    pub best: Cell,
    /// Per cell, the metrics the selection was based on.
    pub selection: Vec<(Cell, Option<MetricReport>)>,
    pub output: MethodOutput,
    /// Test metrics of the selected cell; `None` if nothing was predicted.
    pub report: Option<MetricReport>,
}

/// The split cells are scored on under `policy`; `None` means the test split.
pub fn selection_split(
    policy: Policy,
    records: &[GradeRecord],
    test: &SplitData,
    ctx: &RunContext,
) -> Result<Option<SplitData>> {
    match policy {
        Policy::TestBest => Ok(None),
        Policy::PriorSemester => {
            prior_semester_split(records, test.target_term, test.k, ctx.min_students).map(Some)
        }
        Policy::Holdout => holdout_split(test, ctx.seed, ctx.min_students).map(Some),
    }
}

/// Scores every cell of `grid` on `selection` (or on `test` when `None`),
/// then runs the best cell on `test`.
pub fn select_and_run(
    method: Method,
    grid: &GridSpec,
    test: &SplitData,
    selection: Option<&SplitData>,
    ctx: &RunContext,
) -> Result<MethodRun> {
    if grid.policy == Policy::TestBest {
        warn!("{method}: selecting hyperparameters on the test set; scores are optimistic");
    }
    let on = selection.unwrap_or(test);
    let result = grid_search(grid, |cell| {
        let out = run_method(method, on, cell, ctx)?;
        let report = if out.predictions.is_empty() {
            None
        } else {
            Some(compute_metrics(&out.predictions)?)
        };
        let score = report.as_ref().map(|r| r.rmse);
        let keep = if selection.is_none() { Some(out) } else { None };
        Ok((score, (report, keep)))
    })?;
    let best = result.best;
    let mut selection_rows = Vec::with_capacity(result.cells.len());
    let mut best_output = None;
    for (i, c) in result.cells.into_iter().enumerate() {
        let (report, out) = c.report;
        if i == best {
            best_output = out;
        }
        selection_rows.push((c.cell, report));
    }
    let best_cell = selection_rows[best].0.clone();
    let output = match best_output {
        Some(out) => out,
        None => run_method(method, test, &best_cell, ctx)?,
    };
    audit_leakage(test, &output.predictions)?;
    let report = if output.predictions.is_empty() {
        None
    } else {
        Some(compute_metrics(&output.predictions)?)
    };
    Ok(MethodRun {
        method,
        policy: grid.policy,
        best: best_cell,
        selection: selection_rows,
        output,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, c: &str, t: u32, g: f64) -> GradeRecord {
        GradeRecord::new(s, c, t, g).unwrap()
    }

    /// 30 inactive students take a, b at term 0 and T at term 1; 3 active
    /// students take a, b at term 1 and T at term 2.
    fn records() -> Vec<GradeRecord> {
        let mut out = Vec::new();
        for i in 0..30 {
            let s = format!("s{i:02}");
            let a = 1.0 + (i % 6) as f64 * 0.5;
            let b = 0.5 + ((i * 5) % 7) as f64 * 0.5;
            out.push(rec(&s, "a", 0, a));
            out.push(rec(&s, "b", 0, b));
            out.push(rec(&s, "T", 1, (0.5 + 0.5 * a + 0.25 * b).min(4.0)));
        }
        for i in 0..3 {
            let s = format!("z{i}");
            out.push(rec(&s, "a", 1, 2.0 + i as f64 * 0.5));
            out.push(rec(&s, "b", 1, 3.0));
            out.push(rec(&s, "T", 2, 3.0));
        }
        out
    }

    #[test]
    fn split_uses_inactive_students_for_training() {
        let split = build_split(&records(), 2, 2, MIN_STUDENTS).unwrap();
        assert_eq!(split.courses.len(), 1);
        let c = &split.courses[0];
        assert_eq!(c.train.n_rows(), 30);
        assert_eq!(c.test.len(), 3);
        assert!(split.skipped.is_empty());
        let stats = split.statistics();
        assert_eq!((stats.avg_train, stats.avg_prior_courses, stats.avg_grades), (30.0, 2.0, 60.0));
    }

    #[test]
    fn floor_moves_course_to_skipped() {
        let split = build_split(&records(), 2, 2, 31).unwrap();
        assert!(split.courses.is_empty());
        assert_eq!(split.skipped.len(), 1);
    }

    #[test]
    fn csr_recovers_planted_targets() {
        let split = build_split(&records(), 2, 2, MIN_STUDENTS).unwrap();
        let cell = Cell(vec![("lambda1".into(), 0.0), ("lambda2".into(), 0.0)]);
        let out = run_method(Method::Csr, &split, &cell, &RunContext::new(1)).unwrap();
        assert_eq!(out.predictions.len(), 3);
        for (p, a) in out.predictions.iter().zip([2.0, 2.5, 3.0]) {
            assert!((p.predicted - (0.5 + 0.5 * a + 0.75)).abs() < 1e-4);
        }
        audit_leakage(&split, &out.predictions).unwrap();
    }

    #[test]
    fn holdout_targets_come_from_training_rows() {
        let split = build_split(&records(), 2, 2, 20).unwrap();
        let h = holdout_split(&split, 7, 20).unwrap();
        let c = &h.courses[0];
        assert_eq!(c.test.len(), 3);
        assert_eq!(c.train.n_rows(), 27);
        for t in &c.test {
            assert!(c.train.design.row_ids().get(&t.query.student).is_none());
        }
        let m = union_matrix(&h).unwrap();
        check_no_leakage(&m, c.test.iter().map(|t| &t.query)).unwrap();
    }

    #[test]
    fn prior_semester_needs_two_earlier_terms() {
        assert!(prior_semester_split(&records(), 1, 2, 20).is_err());
        let prev = prior_semester_split(&records(), 2, 2, 20).unwrap();
        assert_eq!(prev.target_term, 1);
        // Everyone is graded in term 1, so nobody is left to train on.
        assert!(prev.courses.is_empty());
    }

    #[test]
    fn audit_flags_training_pairs() {
        let split = build_split(&records(), 2, 2, MIN_STUDENTS).unwrap();
        let leak = Scored {
            student: "s00".into(),
            course: "T".into(),
            predicted: 0.0,
            actual: 0.0,
        };
        assert!(audit_leakage(&split, &[leak]).is_err());
    }
}
