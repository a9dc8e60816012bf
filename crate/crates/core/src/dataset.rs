//! Construction of every per-method training matrix: the course-specific
//! prior-grade design, its GPA-centered variant, the student-specific
//! restriction, the course-specific completion matrix and the global union
//! matrix.
//!
//! "Prior" always means a strictly smaller term than the first taking of the
//! target course; same-term courses never enter a design row.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::ingest::Cohort;
use crate::types::{CourseDataset, GradeRecord, IdIndex, MatrixBuilder, SparseGradeMatrix, row_gpa};

/// Minimum number of training students for a model to be estimated.
pub const MIN_STUDENTS: usize = 20;

/// What a predictor may see about a target: who, which course, and the
/// student's strictly-earlier grades. The true grade is not part of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetQuery {
    pub student: String,
    pub course: String,
    /// Term in which the target course is taken.
    pub term: u32,
    /// `(course, grade)` pairs sorted by course id.
    pub prior: Vec<(String, f64)>,
}

impl TargetQuery {
    pub fn prior_courses(&self) -> BTreeSet<&str> {
        self.prior.iter().map(|(c, _)| c.as_str()).collect()
    }

    pub fn prior_gpa(&self) -> Result<f64> {
        if self.prior.is_empty() {
            return Err(Error::Empty(format!(
                "student {} has no prior grades",
                self.student
            )));
        }
        Ok(self.prior.iter().map(|(_, g)| g).sum::<f64>() / self.prior.len() as f64)
    }
}

/// A query paired with the grade actually obtained, for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInstance {
    pub query: TargetQuery,
    pub true_grade: f64,
}

/// Per-student history relative to one course: the grade and the
/// strictly-earlier grades (latest taking per course).
struct History<'a> {
    grade: f64,
    prior: BTreeMap<&'a str, (u32, f64)>,
}

fn history<'a>(records: &[&'a GradeRecord], course: &str) -> Option<History<'a>> {
    let first = records
        .iter()
        .filter(|r| r.course == course)
        .min_by_key(|r| r.term)?;
    let cutoff = first.term;
    let mut prior: BTreeMap<&str, (u32, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.term < cutoff && r.course != course) {
        let slot = prior.entry(r.course.as_str()).or_insert((r.term, r.grade));
        if r.term >= slot.0 {
            *slot = (r.term, r.grade);
        }
    }
    Some(History {
        grade: first.grade,
        prior,
    })
}

/// Builds the training design for `course`: one row per student in `cohort`
/// who took the course after at least `k` other courses. Rows are in
/// student-id order, columns in course-id order.
pub fn build_course_dataset(course: &str, cohort: &Cohort, k: usize) -> Result<CourseDataset> {
    let mut rows = Vec::new();
    for (student, recs) in cohort.by_student() {
        if let Some(h) = history(&recs, course)
            && h.prior.len() >= k
        {
            rows.push((student, h));
        }
    }
    let columns: BTreeSet<&str> = rows
        .iter()
        .flat_map(|(_, h)| h.prior.keys().copied())
        .collect();
    let mut builder = MatrixBuilder::new();
    for c in &columns {
        builder.add_col(c);
    }
    let mut targets = Vec::with_capacity(rows.len());
    for (student, h) in &rows {
        builder.add_row(student);
        for (c, &(_, g)) in &h.prior {
            builder.push(student, c, g);
        }
        targets.push(h.grade);
    }
    CourseDataset::new(builder.build()?, targets, course, None)
}

/// Test instances for `course`: students in `cohort` with a record of the
/// course in `target_term` and at least `k` strictly-earlier courses.
pub fn build_target_instances(
    course: &str,
    cohort: &Cohort,
    target_term: u32,
    k: usize,
) -> Vec<TargetInstance> {
    let mut out = Vec::new();
    for (student, recs) in cohort.by_student() {
        let Some(taken) = recs
            .iter()
            .filter(|r| r.course == course && r.term == target_term)
            .last()
        else {
            continue;
        };
        let mut prior: BTreeMap<&str, (u32, f64)> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.term < target_term && r.course != course) {
            let slot = prior.entry(r.course.as_str()).or_insert((r.term, r.grade));
            if r.term >= slot.0 {
                *slot = (r.term, r.grade);
            }
        }
        if prior.len() < k {
            continue;
        }
        out.push(TargetInstance {
            query: TargetQuery {
                student: student.to_string(),
                course: course.to_string(),
                term: target_term,
                prior: prior
                    .into_iter()
                    .map(|(c, (_, g))| (c.to_string(), g))
                    .collect(),
            },
            true_grade: taken.grade,
        });
    }
    out
}

/// Subtracts each row's GPA from its design entries and its target.
pub fn center_dataset(ds: &CourseDataset) -> Result<CourseDataset> {
    let n = ds.n_rows();
    let mut design = ds.design.clone();
    let mut targets = ds.targets.clone();
    let mut gpa = Vec::with_capacity(n);
    for i in 0..n {
        let g = row_gpa(&ds.design, i)?;
        for v in design.row_values_mut(i) {
            *v -= g;
        }
        targets[i] -= g;
        gpa.push(g);
    }
    let centering = match &ds.centering {
        Some(prev) => prev.iter().zip(&gpa).map(|(a, b)| a + b).collect(),
        None => gpa,
    };
    CourseDataset::new(design, targets, ds.target_course.clone(), Some(centering))
}

/// Fraction of `target` courses that also appear in `other`.
pub fn overlap_ratio(target: &BTreeSet<&str>, other: &BTreeSet<&str>) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Empty("overlap ratio of an empty course set".into()));
    }
    Ok(target.intersection(other).count() as f64 / target.len() as f64)
}

/// Keeps only the listed rows (in the given order).
pub fn select_rows(ds: &CourseDataset, rows: &[usize]) -> Result<CourseDataset> {
    let mut row_index = IdIndex::new();
    let mut triplets = Vec::new();
    for (new, &old) in rows.iter().enumerate() {
        row_index.insert(ds.student(old));
        triplets.extend(ds.design.row(old).map(|(j, v)| (new, j, v)));
    }
    let design = SparseGradeMatrix::from_triplets(row_index, ds.design.col_ids().clone(), triplets)?;
    let targets = rows.iter().map(|&i| ds.targets[i]).collect();
    let centering = ds
        .centering
        .as_ref()
        .map(|c| rows.iter().map(|&i| c[i]).collect());
    CourseDataset::new(design, targets, ds.target_course.clone(), centering)
}

/// Student-specific design: rows of `base` whose overlap ratio with the
/// target's prior courses is at least `t`, columns restricted to those prior
/// courses. The ratio is computed on each row's full prior-course set.
/// The result may have zero rows.
pub fn build_ssr_dataset(query: &TargetQuery, base: &CourseDataset, t: f64) -> Result<CourseDataset> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param("t", format!("{t} not in [0, 1]")));
    }
    if base.is_centered() {
        return Err(Error::param("base", "student-specific design needs uncentered grades"));
    }
    let target = query.prior_courses();
    let cols = base.design.col_ids();
    let keep_col: Vec<Option<usize>> = {
        let mut next = 0;
        (0..cols.len())
            .map(|j| {
                target.contains(cols.id(j)).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let col_index = IdIndex::from_ids(
        (0..cols.len())
            .filter(|&j| keep_col[j].is_some())
            .map(|j| cols.id(j).to_string()),
    )?;

    let mut row_index = IdIndex::new();
    let mut triplets = Vec::new();
    let mut targets = Vec::new();
    for i in 0..base.n_rows() {
        let other: BTreeSet<&str> = base.design.row_cols(i).iter().map(|&j| cols.id(j)).collect();
        if overlap_ratio(&target, &other)? < t {
            continue;
        }
        let r = row_index.insert(base.student(i));
        triplets.extend(
            base.design
                .row(i)
                .filter_map(|(j, v)| keep_col[j].map(|nj| (r, nj, v))),
        );
        targets.push(base.targets[i]);
    }
    let design = SparseGradeMatrix::from_triplets(row_index, col_index, triplets)?;
    CourseDataset::new(design, targets, base.target_course.clone(), None)
}

/// Course-specific completion matrix: the `n_c` training rows followed by
/// the `n_t` target rows; one column per course graded in either group,
/// then a last column holding the training students' grades in `course`.
pub fn build_csmf_matrix(
    course: &str,
    base: &CourseDataset,
    targets: &[TargetQuery],
) -> Result<SparseGradeMatrix> {
    if base.is_centered() {
        return Err(Error::param("base", "completion matrix needs uncentered grades"));
    }
    if base.target_course != course {
        return Err(Error::param(
            "base",
            format!("dataset is for {}, not {course}", base.target_course),
        ));
    }
    let base_students: HashSet<&str> = (0..base.n_rows()).map(|i| base.student(i)).collect();
    let (_, col_counts) = base.design.counts();
    let mut builder = MatrixBuilder::new();
    for (j, id) in base.design.col_ids().ids().iter().enumerate() {
        if col_counts[j] > 0 {
            builder.add_col(id);
        }
    }
    let extra: BTreeSet<&str> = targets
        .iter()
        .flat_map(|q| q.prior.iter().map(|(c, _)| c.as_str()))
        .filter(|c| base.design.col_ids().get(c).is_none())
        .collect();
    for c in extra {
        builder.add_col(c);
    }
    if base.design.col_ids().get(course).is_some()
        || targets.iter().any(|q| q.prior.iter().any(|(c, _)| c == course))
    {
        return Err(Error::Leakage {
            student: "<prior grades>".into(),
            course: course.into(),
        });
    }
    builder.add_col(course);

    for i in 0..base.n_rows() {
        let s = base.student(i);
        builder.add_row(s);
        for (j, v) in base.design.row(i) {
            builder.push(s, base.design.col_ids().id(j), v);
        }
        builder.push(s, course, base.targets[i]);
    }
    for q in targets {
        if q.course != course {
            return Err(Error::param("targets", format!("query for {}, expected {course}", q.course)));
        }
        if base_students.contains(q.student.as_str()) {
            return Err(Error::param(
                "targets",
                format!("student {} is also a training row", q.student),
            ));
        }
        builder.add_row(&q.student);
        for (c, g) in &q.prior {
            builder.push(&q.student, c, *g);
        }
    }
    builder.build()
}

/// Global completion matrix: union (by student and course id) of every
/// training design, its target grades, and the targets' prior grades.
/// The first value seen for a (student, course) cell is kept.
pub fn build_mf_matrix(per_course: &[(&CourseDataset, &[TargetQuery])]) -> Result<SparseGradeMatrix> {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut builder = MatrixBuilder::new();
    let mut push = |b: &mut MatrixBuilder, s: &str, c: &str, v: f64| {
        if seen.insert((s.to_string(), c.to_string())) {
            b.push(s, c, v);
        }
    };
    for (ds, targets) in per_course {
        if ds.is_centered() {
            return Err(Error::param("per_course", "completion matrix needs uncentered grades"));
        }
        for i in 0..ds.n_rows() {
            let s = ds.student(i);
            for (j, v) in ds.design.row(i) {
                push(&mut builder, s, ds.design.col_ids().id(j), v);
            }
            push(&mut builder, s, &ds.target_course, ds.targets[i]);
        }
        for q in targets.iter() {
            builder.add_row(&q.student);
            for (c, g) in &q.prior {
                push(&mut builder, &q.student, c, *g);
            }
        }
    }
    builder.build()
}

/// Fails if any held-out (student, course) cell is observed in `matrix`.
pub fn check_no_leakage<'a>(
    matrix: &SparseGradeMatrix,
    heldout: impl IntoIterator<Item = &'a TargetQuery>,
) -> Result<()> {
    for q in heldout {
        if matrix.get_by_id(&q.student, &q.course).is_some() {
            return Err(Error::Leakage {
                student: q.student.clone(),
                course: q.course.clone(),
            });
        }
    }
    Ok(())
}

/// True when the dataset has at least `floor` training students.
pub fn min_students_gate(ds: &CourseDataset, floor: usize) -> bool {
    ds.n_rows() >= floor
}

/// Writes a dataset as text: a `%` header naming the target course, each
/// row (student, target grade, GPA if centered) and each column, then one
/// `row_id,col_id,value` line per design entry. Values round-trip exactly.
pub fn write_dataset<W: Write>(mut w: W, ds: &CourseDataset) -> Result<()> {
    let ids = std::iter::once(&ds.target_course)
        .chain(ds.design.row_ids().ids())
        .chain(ds.design.col_ids().ids());
    for id in ids {
        if id.is_empty() || id.contains(|c: char| c == ',' || c.is_whitespace()) {
            return Err(Error::param("dataset", format!("id {id:?} cannot be written as text")));
        }
    }
    writeln!(w, "% target {}", ds.target_course)?;
    for i in 0..ds.n_rows() {
        match &ds.centering {
            Some(gpa) => writeln!(w, "% row {} {} {}", ds.student(i), ds.targets[i], gpa[i])?,
            None => writeln!(w, "% row {} {}", ds.student(i), ds.targets[i])?,
        }
    }
    for c in ds.design.col_ids().ids() {
        writeln!(w, "% col {c}")?;
    }
    for (i, j, v) in ds.design.entries() {
        writeln!(w, "{},{},{}", ds.student(i), ds.design.col_ids().id(j), v)?;
    }
    Ok(())
}

/// Reads the format written by [`write_dataset`].
pub fn read_dataset<R: BufRead>(r: R) -> Result<CourseDataset> {
    let err = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| err(line, "bad number"));
    let mut target = None;
    let (mut rows, mut cols) = (IdIndex::new(), IdIndex::new());
    let (mut targets, mut gpa) = (Vec::new(), Vec::new());
    let mut triplets = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let (n, line) = (n + 1, line?);
        if let Some(head) = line.strip_prefix("% ") {
            let parts: Vec<&str> = head.split(' ').collect();
            match parts.as_slice() {
                ["target", c] => target = Some(c.to_string()),
                ["row", s, y, rest @ ..] => {
                    if rows.get(s).is_some() {
                        return Err(err(n, "repeated row"));
                    }
                    rows.insert(*s);
                    targets.push(num(n, y)?);
                    match rest {
                        [] => {}
                        [g] => gpa.push(num(n, g)?),
                        _ => return Err(err(n, "malformed row header")),
                    }
                }
                ["col", c] => {
                    cols.insert(*c);
                }
                _ => return Err(err(n, "unknown header line")),
            }
        } else if !line.is_empty() {
            let parts: Vec<&str> = line.split(',').collect();
            let [s, c, v] = parts.as_slice() else {
                return Err(err(n, "expected row_id,col_id,value"));
            };
            let i = rows.get(s).ok_or_else(|| err(n, "undeclared row"))?;
            let j = cols.get(c).ok_or_else(|| err(n, "undeclared column"))?;
            triplets.push((i, j, num(n, v)?));
        }
    }
    let target = target.ok_or_else(|| err(0, "missing target header"))?;
    let centering = match gpa.len() {
        0 => None,
        m if m == targets.len() => Some(gpa),
        _ => return Err(err(0, "centering given for only some rows")),
    };
    let design = SparseGradeMatrix::from_triplets(rows, cols, triplets)?;
    CourseDataset::new(design, targets, target, centering)
}
