//! Metrics, hyperparameter grids, grid search and dataset statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::predictors::Method;

/// One predicted grade paired with the grade actually obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub student: String,
    pub course: String,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Pooled over every grade.
    pub rmse: f64,
    /// Unweighted mean of the per-course RMSEs.
    pub avg_rmse: f64,
    /// course → (rmse, number of grades)
    pub per_course: BTreeMap<String, (f64, usize)>,
    pub n_courses: usize,
    pub n_grades: usize,
}

pub fn compute_metrics(preds: &[Scored]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for p in preds {
        if !p.predicted.is_finite() || !p.actual.is_finite() {
            return Err(Error::NonFinite("prediction"));
        }
        let e = sums.entry(p.course.as_str()).or_insert((0.0, 0));
        e.0 += (p.predicted - p.actual).powi(2);
        e.1 += 1;
    }
    let total: f64 = sums.values().map(|(s, _)| s).sum();
    let per_course: BTreeMap<String, (f64, usize)> = sums
        .into_iter()
        .map(|(c, (s, n))| (c.to_string(), ((s / n as f64).sqrt(), n)))
        .collect();
    let avg_rmse = per_course.values().map(|(r, _)| r).sum::<f64>() / per_course.len() as f64;
    Ok(MetricReport {
        rmse: (total / preds.len() as f64).sqrt(),
        avg_rmse,
        n_courses: per_course.len(),
        n_grades: preds.len(),
        per_course,
    })
}

/// Keeps only the (student, course) pairs present in every list, so that
/// runs with different prior-course floors are scored on the same grades.
pub fn common_subset(runs: &[Vec<Scored>]) -> Vec<Vec<Scored>> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let mut common: std::collections::BTreeSet<(&str, &str)> = first
        .iter()
        .map(|p| (p.student.as_str(), p.course.as_str()))
        .collect();
    for run in &runs[1..] {
        let keys: std::collections::BTreeSet<(&str, &str)> = run
            .iter()
            .map(|p| (p.student.as_str(), p.course.as_str()))
            .collect();
        common.retain(|k| keys.contains(k));
    }
    runs.iter()
        .map(|run| {
            run.iter()
                .filter(|p| common.contains(&(p.student.as_str(), p.course.as_str())))
                .cloned()
                .collect()
        })
        .collect()
}

/// How the best grid cell is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Lowest pooled RMSE on the test grades themselves (optimistic).
    TestBest,
    /// Select on the term before the target term, report on the target term.
    PriorSemester,
    /// Select on a seeded 10% row split of the training students.
    Holdout,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::TestBest => "test-best",
            Policy::PriorSemester => "prior-semester",
            Policy::Holdout => "holdout",
        }
    }

    /// Regression and neighborhood methods select on the test set, the
    /// factorization methods on the previous term, and the per-course
    /// latent-dimension variant on a training holdout.
    pub fn default_for(method: Method) -> Policy {
        match method {
            Method::Csr | Method::CsrRc | Method::Ssr | Method::Sbcf => Policy::TestBest,
            Method::BiasOnly | Method::Mf | Method::MfGb | Method::Csmf => Policy::PriorSemester,
            Method::CsmfStar => Policy::Holdout,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "test-best" => Ok(Policy::TestBest),
            "prior-semester" => Ok(Policy::PriorSemester),
            "holdout" => Ok(Policy::Holdout),
            _ => Err(Error::param("policy", format!("unknown policy {s:?}"))),
        }
    }
}

/// One point of a grid: parameter name → value, in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell(pub Vec<(String, f64)>);

impl Cell {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Like `get`, but a missing parameter is an error.
    pub fn require(&self, name: &'static str) -> Result<f64> {
        self.get(name)
            .ok_or_else(|| Error::param(name, "missing from grid cell"))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}={v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub params: Vec<(String, Vec<f64>)>,
    pub policy: Policy,
}

impl GridSpec {
    pub fn new(params: Vec<(String, Vec<f64>)>, policy: Policy) -> Result<Self> {
        for (name, values) in &params {
            if values.is_empty() {
                return Err(Error::param("grid", format!("parameter {name} has no values")));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::param("grid", format!("parameter {name} has a non-finite value")));
            }
        }
        Ok(GridSpec { params, policy })
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Replaces the values of an existing parameter.
    pub fn set(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.is_empty() {
            return Err(Error::param("grid", format!("parameter {name} has no values")));
        }
        match self.params.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => {
                slot.1 = values;
                Ok(())
            }
            None => Err(Error::param("grid", format!("no parameter named {name}"))),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.params.iter().map(|(_, v)| v.len()).product()
    }

    /// Cartesian product; the first parameter varies slowest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell(Vec::new())];
        for (name, values) in &self.params {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.0.push((name.clone(), v));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

fn steps(count: usize, num: f64, den: f64) -> Vec<f64> {
    (0..count).map(|i| i as f64 * num / den).collect()
}

/// Latent dimensions searched by the factorization methods.
pub const RANK_GRID: [usize; 3] = [2, 5, 8];

/// Significance-weighting thresholds searched for the neighborhood method.
pub const SBCF_R_GRID: [usize; 5] = [1, 5, 10, 20, 50];

/// Overlap thresholds 0.30, 0.34, ..., 0.98, then 1.0.
pub fn overlap_grid() -> Vec<f64> {
    let mut t: Vec<f64> = (0..18).map(|i| (30 + 4 * i) as f64 / 100.0).collect();
    t.push(1.0);
    t
}

/// The published grid for each method, with its default selection policy.
pub fn default_grids(method: Method) -> GridSpec {
    let ranks: Vec<f64> = RANK_GRID.iter().map(|&l| l as f64).collect();
    let mf_lambda = steps(121, 1.0, 20.0);
    let params: Vec<(&str, Vec<f64>)> = match method {
        Method::Csr | Method::CsrRc => {
            vec![("lambda1", steps(17, 2.5, 1.0)), ("lambda2", steps(21, 2.5, 1.0))]
        }
        Method::Ssr => vec![
            ("lambda1", steps(11, 1.0, 1.0)),
            ("lambda2", steps(8, 2.0, 1.0)),
            ("t", overlap_grid()),
        ],
        Method::BiasOnly => vec![("lambda", mf_lambda)],
        Method::Sbcf => vec![("r", SBCF_R_GRID.iter().map(|&r| r as f64).collect())],
        Method::Mf | Method::MfGb | Method::Csmf => vec![("lambda", mf_lambda), ("l", ranks)],
        // The latent dimension is chosen per course inside the method.
        Method::CsmfStar => vec![("lambda", mf_lambda)],
    };
    GridSpec {
        params: params.into_iter().map(|(n, v)| (n.to_string(), v)).collect(),
        policy: Policy::default_for(method),
    }
}

/// Outcome of evaluating one grid cell. `score` is `None` when the cell
/// produced nothing to score; such cells are never selected.
#[derive(Debug, Clone)]
pub struct CellResult<R> {
    pub cell: Cell,
    pub score: Option<f64>,
    pub report: R,
}

#[derive(Debug, Clone)]
pub struct GridResult<R> {
    pub best: usize,
    pub cells: Vec<CellResult<R>>,
}

impl<R> GridResult<R> {
    pub fn best_cell(&self) -> &CellResult<R> {
        &self.cells[self.best]
    }
}

/// Evaluates every cell (in parallel, results kept in grid order) and picks
/// the lowest score; ties go to the earliest cell.
pub fn grid_search<R, F>(grid: &GridSpec, eval: F) -> Result<GridResult<R>>
where
    R: Send,
    F: Fn(&Cell) -> Result<(Option<f64>, R)> + Sync,
{
    let cells: Vec<CellResult<R>> = grid
        .cells()
        .into_par_iter()
        .map(|cell| {
            let (score, report) = eval(&cell)?;
            Ok(CellResult { cell, score, report })
        })
        .collect::<Result<_>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cells.iter().enumerate() {
        if let Some(s) = c.score
            && s.is_finite()
            && best.is_none_or(|(_, b)| s < b)
        {
            best = Some((i, s));
        }
    }
    match best {
        Some((best, _)) => Ok(GridResult { best, cells }),
        None => Err(Error::Empty("no grid cell produced a score".into())),
    }
}

/// Size of one course's training and test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CourseSize {
    pub train_rows: usize,
    pub test_rows: usize,
    /// Columns of the training design.
    pub prior_courses: usize,
    /// Observed entries of the training design.
    pub grades: usize,
}

/// One column of the statistics table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub k: usize,
    pub avg_train: f64,
    pub avg_test: f64,
    pub avg_prior_courses: f64,
    pub avg_grades: f64,
    pub courses_predicted: usize,
    pub grades_predicted: usize,
}

pub fn dataset_statistics(k: usize, courses: &[CourseSize]) -> DatasetStats {
    let n = courses.len();
    let avg = |f: fn(&CourseSize) -> usize| {
        if n == 0 {
            0.0
        } else {
            courses.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    DatasetStats {
        k,
        avg_train: avg(|c| c.train_rows),
        avg_test: avg(|c| c.test_rows),
        avg_prior_courses: avg(|c| c.prior_courses),
        avg_grades: avg(|c| c.grades),
        courses_predicted: n,
        grades_predicted: courses.iter().map(|c| c.test_rows).sum(),
    }
}

const STAT_ROWS: [&str; 6] = [
    "Average number of students in training set",
    "Average number of students in test set",
    "Average number of prior courses",
    "Average number of grades",
    "Courses predicted",
    "Grades predicted",
];

fn stat_values(s: &DatasetStats) -> [String; 6] {
    [
        format!("{:.1}", s.avg_train),
        format!("{:.1}", s.avg_test),
        format!("{:.1}", s.avg_prior_courses),
        format!("{:.1}", s.avg_grades),
        s.courses_predicted.to_string(),
        s.grades_predicted.to_string(),
    ]
}

/// Statistics as CSV: one row per statistic, one column per k.
pub fn write_stats_csv<W: Write>(mut w: W, stats: &[DatasetStats]) -> Result<()> {
    write!(w, "statistic")?;
    for s in stats {
        write!(w, ",k={}", s.k)?;
    }
    writeln!(w)?;
    let values: Vec<[String; 6]> = stats.iter().map(stat_values).collect();
    for (r, name) in STAT_ROWS.iter().enumerate() {
        write!(w, "{name}")?;
        for v in &values {
            write!(w, ",{}", v[r])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_aligned<W: Write>(mut w: W, rows: &[Vec<String>]) -> Result<()> {
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..n_cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else {
                line.push_str(&format!("  {cell:>w$}", w = widths[c]));
            }
        }
        writeln!(w, "{}", line.trim_end())?;
    }
    Ok(())
}

pub fn write_stats_text<W: Write>(w: W, stats: &[DatasetStats]) -> Result<()> {
    let mut rows = vec![
        std::iter::once("Prior courses".to_string())
            .chain(stats.iter().map(|s| s.k.to_string()))
            .collect::<Vec<_>>(),
    ];
    let values: Vec<[String; 6]> = stats.iter().map(stat_values).collect();
    for (r, name) in STAT_ROWS.iter().enumerate() {
        rows.push(
            std::iter::once(name.to_string())
                .chain(values.iter().map(|v| v[r].clone()))
                .collect(),
        );
    }
    write_aligned(w, &rows)
}

/// A labelled metric report, e.g. one method at one k.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub method: String,
    pub k: usize,
    pub params: String,
    /// `all` for every predicted grade, `common` for the pairs predicted at
    /// every k.
    pub scope: String,
    pub report: MetricReport,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "method,k,scope,params,rmse,avg_rmse,courses,grades")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{},{}",
            r.method, r.k, r.scope, r.params, r.report.rmse, r.report.avg_rmse, r.report.n_courses, r.report.n_grades
        )?;
    }
    Ok(())
}

pub fn write_metrics_text<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let mut table = vec![
        ["method", "k", "scope", "RMSE", "AvgRMSE", "courses", "grades", "params"]
            .map(String::from)
            .to_vec(),
    ];
    for r in rows {
        table.push(vec![
            r.method.clone(),
            r.k.to_string(),
            r.scope.clone(),
            format!("{:.3}", r.report.rmse),
            format!("{:.3}", r.report.avg_rmse),
            r.report.n_courses.to_string(),
            r.report.n_grades.to_string(),
            r.params.clone(),
        ]);
    }
    write_aligned(w, &table)
}

/// Predictions as CSV: `student,course,method,predicted,actual`.
pub fn write_predictions_csv<W: Write>(w: W, rows: &[(&str, &Scored)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["student", "course", "method", "predicted", "actual"])?;
    for (method, p) in rows {
        out.write_record([
            p.student.as_str(),
            p.course.as_str(),
            method,
            &p.predicted.to_string(),
            &p.actual.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-cell dump: one row per course plus a pooled row with course `*`.
pub fn write_grid_csv<W: Write>(
    mut w: W,
    method: &str,
    grid: &GridSpec,
    cells: &[(Cell, Option<MetricReport>)],
) -> Result<()> {
    write!(w, "method,course")?;
    for (name, _) in &grid.params {
        write!(w, ",{name}")?;
    }
    writeln!(w, ",rmse,avg_rmse,n")?;
    for (cell, report) in cells {
        let Some(report) = report else { continue };
        let params: String = cell.0.iter().map(|(_, v)| format!(",{v}")).collect();
        for (course, (rmse, n)) in &report.per_course {
            writeln!(w, "{method},{course}{params},{rmse:.6},{rmse:.6},{n}")?;
        }
        writeln!(
            w,
            "{method},*{params},{:.6},{:.6},{}",
            report.rmse, report.avg_rmse, report.n_grades
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(course: &str, predicted: f64, actual: f64) -> Scored {
        Scored {
            student: "x".into(),
            course: course.into(),
            predicted,
            actual,
        }
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let r = compute_metrics(&[s("a", 3.0, 3.0), s("b", 2.0, 2.0)]).unwrap();
        assert_eq!((r.rmse, r.avg_rmse), (0.0, 0.0));
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn single_course_metrics_agree() {
        let r = compute_metrics(&[s("a", 3.0, 2.0), s("a", 1.0, 2.5)]).unwrap();
        assert!((r.rmse - r.avg_rmse).abs() < 1e-15);
        assert_eq!(r.per_course["a"].1, 2);
    }

    #[test]
    fn cells_are_cartesian_first_slowest() {
        let g = GridSpec::new(
            vec![("a".into(), vec![1.0, 2.0]), ("b".into(), vec![0.0, 5.0, 9.0])],
            Policy::TestBest,
        )
        .unwrap();
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(g.n_cells(), 6);
        assert_eq!(cells[1].0, vec![("a".to_string(), 1.0), ("b".to_string(), 5.0)]);
        assert_eq!(cells[3].get("a"), Some(2.0));
        assert!(GridSpec::new(vec![("a".into(), vec![])], Policy::TestBest).is_err());
    }

    #[test]
    fn grid_search_ties_go_first_and_skips_none() {
        let g = GridSpec::new(vec![("x".into(), vec![0.0, 1.0, 2.0, 3.0])], Policy::TestBest).unwrap();
        let r = grid_search(&g, |c| {
            let x = c.require("x")?;
            Ok((if x == 0.0 { None } else { Some((x - 2.0).abs().min(1.0)) }, x))
        })
        .unwrap();
        assert_eq!(r.best_cell().report, 2.0);
        let tie = grid_search(&g, |_| Ok((Some(1.0), ()))).unwrap();
        assert_eq!(tie.best, 0);
        assert!(grid_search(&g, |_| Ok((None, ()))).is_err());
    }

    #[test]
    fn common_subset_intersects_pairs() {
        let a = vec![s("c", 1.0, 1.0), Scored { student: "y".into(), ..s("c", 1.0, 1.0) }];
        let b = vec![s("c", 2.0, 1.0)];
        let out = common_subset(&[a, b]);
        assert_eq!(out[0].len(), 1);
        assert_eq!(out[1].len(), 1);
    }

    #[test]
    fn statistics_average_sizes() {
        let c = |t, n| CourseSize { train_rows: t, test_rows: n, prior_courses: 3, grades: 10 };
        let st = dataset_statistics(5, &[c(20, 2), c(40, 4)]);
        assert_eq!(st.avg_train, 30.0);
        assert_eq!(st.grades_predicted, 6);
        assert_eq!(dataset_statistics(5, &[]).avg_train, 0.0);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [Policy::TestBest, Policy::PriorSemester, Policy::Holdout] {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("cv".parse::<Policy>().is_err());
    }
}
