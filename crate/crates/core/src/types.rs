//! Shared data model: grade records, the partially observed student × course
//! matrix, per-course training designs and the two fitted model families.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest and highest grade on the 4-point scale.
pub const MIN_GRADE: f64 = 0.0;
pub const MAX_GRADE: f64 = 4.0;

/// One observed grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub student: String,
    pub course: String,
    /// Chronological term index; smaller is earlier.
    pub term: u32,
    pub grade: f64,
}

impl GradeRecord {
    pub fn new(
        student: impl Into<String>,
        course: impl Into<String>,
        term: u32,
        grade: f64,
    ) -> Result<Self> {
        let student = student.into();
        let course = course.into();
        if student.is_empty() || course.is_empty() {
            return Err(Error::InvalidRecord("empty student or course id".into()));
        }
        if !grade.is_finite() || !(MIN_GRADE..=MAX_GRADE).contains(&grade) {
            return Err(Error::InvalidRecord(format!(
                "grade {grade} outside [{MIN_GRADE}, {MAX_GRADE}]"
            )));
        }
        Ok(GradeRecord {
            student,
            course,
            term,
            grade,
        })
    }
}

/// Letter grades in descending order with their grade-point values.
pub const LETTER_TABLE: [(&str, f64); 11] = [
    ("A", 4.0),
    ("A-", 3.667),
    ("B+", 3.333),
    ("B", 3.0),
    ("B-", 2.667),
    ("C+", 2.333),
    ("C", 2.0),
    ("C-", 1.667),
    ("D+", 1.333),
    ("D", 1.0),
    ("F", 0.0),
];

/// Converts a letter grade to grade points.
///
/// Anything outside the table (including pass/fail marks such as `S`, `N`,
/// `P`) is rejected so the caller can drop the record.
pub fn letter_to_points(letter: &str) -> Result<f64> {
    let key = letter.trim().to_ascii_uppercase();
    LETTER_TABLE
        .iter()
        .find(|(l, _)| *l == key)
        .map(|&(_, points)| points)
        .ok_or_else(|| Error::UnknownLetter(letter.to_string()))
}

/// Bijection between string ids and dense indices, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = IdIndex::new();
        for id in ids {
            let id = id.into();
            if index.lookup.contains_key(&id) {
                return Err(Error::Dimension(format!("duplicate id {id:?}")));
            }
            index.insert(id);
        }
        Ok(index)
    }

    /// Returns the index of `id`, assigning the next free one if unseen.
    pub fn insert(&mut self, id: impl Into<String>) -> usize {
        let id = id.into();
        if let Some(&i) = self.lookup.get(&id) {
            return i;
        }
        let i = self.ids.len();
        self.lookup.insert(id.clone(), i);
        self.ids.push(id);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Students × courses matrix with an explicit set of observed entries.
///
/// Stored row-compressed; within a row, entries are sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradeMatrix {
    rows: IdIndex,
    cols: IdIndex,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseGradeMatrix {
    /// Builds a matrix from `(row, col, value)` triplets over the given
    /// index maps. Any repeated `(row, col)` is an error.
    pub fn from_triplets(
        rows: IdIndex,
        cols: IdIndex,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        let (n, m) = (rows.len(), cols.len());
        for &(r, c, v) in &triplets {
            if r >= n || c >= m {
                return Err(Error::Dimension(format!(
                    "entry ({r}, {c}) outside {n}x{m} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("matrix entry"));
            }
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        for pair in triplets.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::DuplicateEntry {
                    row: pair[0].0,
                    col: pair[0].1,
                });
            }
        }
        let mut row_ptr = vec![0; n + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(SparseGradeMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    /// Number of observed entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ids(&self) -> &IdIndex {
        &self.rows
    }

    pub fn col_ids(&self) -> &IdIndex {
        &self.cols
    }

    pub fn row_cols(&self, row: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    pub(crate) fn row_values_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[self.row_ptr[row]..self.row_ptr[row + 1]]
    }

    /// `(col, value)` pairs of one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row_cols(row)
            .iter()
            .copied()
            .zip(self.row_values(row).iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let cols = self.row_cols(row);
        cols.binary_search(&col)
            .ok()
            .map(|k| self.row_values(row)[k])
    }

    pub fn get_by_id(&self, student: &str, course: &str) -> Option<f64> {
        self.get(self.rows.get(student)?, self.cols.get(course)?)
    }

    /// Every observed entry in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows()).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    /// Column-major copy: for each column, its `(row, value)` entries.
    pub fn columns(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.n_cols()];
        for (i, j, v) in self.entries() {
            cols[j].push((i, v));
        }
        cols
    }

    /// Observation count per row and per column.
    pub fn counts(&self) -> (Vec<usize>, Vec<usize>) {
        let rows = (0..self.n_rows())
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .collect();
        let mut cols = vec![0; self.n_cols()];
        for &j in &self.col_idx {
            cols[j] += 1;
        }
        (rows, cols)
    }
}

/// Incremental construction of a [`SparseGradeMatrix`] keyed by string ids.
#[derive(Debug, Default)]
pub struct MatrixBuilder {
    rows: IdIndex,
    cols: IdIndex,
    triplets: Vec<(usize, usize, f64)>,
}

impl MatrixBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, student: &str) -> usize {
        self.rows.insert(student)
    }

    pub fn add_col(&mut self, course: &str) -> usize {
        self.cols.insert(course)
    }

    pub fn push(&mut self, student: &str, course: &str, value: f64) {
        let r = self.rows.insert(student);
        let c = self.cols.insert(course);
        self.triplets.push((r, c, value));
    }

    pub fn build(self) -> Result<SparseGradeMatrix> {
        SparseGradeMatrix::from_triplets(self.rows, self.cols, self.triplets)
    }
}

/// Mean of the observed values in `row`.
pub fn row_gpa(matrix: &SparseGradeMatrix, row: usize) -> Result<f64> {
    let values = matrix.row_values(row);
    if values.is_empty() {
        return Err(Error::EmptyRow(row));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Training design for one target course: the prior-grade matrix, the
/// grades obtained in the target course, and optional per-row centering.
#[derive(Debug, Clone, PartialEq)]
pub struct CourseDataset {
    pub design: SparseGradeMatrix,
    pub targets: Vec<f64>,
    pub target_course: String,
    /// Per-row GPA subtracted from the design and targets, if centered.
    pub centering: Option<Vec<f64>>,
}

impl CourseDataset {
    pub fn new(
        design: SparseGradeMatrix,
        targets: Vec<f64>,
        target_course: impl Into<String>,
        centering: Option<Vec<f64>>,
    ) -> Result<Self> {
        if targets.len() != design.n_rows() {
            return Err(Error::Dimension(format!(
                "{} targets for {} design rows",
                targets.len(),
                design.n_rows()
            )));
        }
        if let Some(c) = &centering
            && c.len() != design.n_rows()
        {
            return Err(Error::Dimension(format!(
                "{} centering values for {} design rows",
                c.len(),
                design.n_rows()
            )));
        }
        Ok(CourseDataset {
            design,
            targets,
            target_course: target_course.into(),
            centering,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.design.n_rows()
    }

    pub fn is_centered(&self) -> bool {
        self.centering.is_some()
    }

    pub fn student(&self, row: usize) -> &str {
        self.design.row_ids().id(row)
    }
}

/// Bias plus sparse non-zero coefficients keyed by course id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub target_course: String,
    pub bias: f64,
    /// Only non-zero coefficients are stored.
    pub weights: BTreeMap<String, f64>,
    pub nonneg: bool,
    /// Trained on GPA-centered grades.
    pub centered: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub converged: bool,
    pub sweeps: usize,
}

impl LinearModel {
    pub fn weight(&self, course: &str) -> f64 {
        self.weights.get(course).copied().unwrap_or(0.0)
    }
}

/// Biased low-rank completion model over id-indexed students and courses.
#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    pub mu: f64,
    pub student_bias: Vec<f64>,
    pub course_bias: Vec<f64>,
    /// Student factors, row-major `n × rank`.
    pub p: Vec<f64>,
    /// Course factors, row-major `m × rank`.
    pub q: Vec<f64>,
    pub rank: usize,
    pub lambda: f64,
    pub use_global_bias: bool,
    pub seed: u64,
    pub students: IdIndex,
    pub courses: IdIndex,
}

impl MfModel {
    pub fn student_factors(&self, i: usize) -> &[f64] {
        &self.p[i * self.rank..(i + 1) * self.rank]
    }

    pub fn course_factors(&self, j: usize) -> &[f64] {
        &self.q[j * self.rank..(j + 1) * self.rank]
    }

    /// Prediction for an in-sample cell.
    pub fn predict(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self
            .student_factors(i)
            .iter()
            .zip(self.course_factors(j))
            .map(|(a, b)| a * b)
            .sum();
        self.mu + self.student_bias[i] + self.course_bias[j] + dot
    }

    /// Prediction by id. Students or courses the model never saw contribute
    /// zero bias and zero factors.
    pub fn predict_ids(&self, student: &str, course: &str) -> f64 {
        match (self.students.get(student), self.courses.get(course)) {
            (Some(i), Some(j)) => self.predict(i, j),
            (Some(i), None) => self.mu + self.student_bias[i],
            (None, Some(j)) => self.mu + self.course_bias[j],
            (None, None) => self.mu,
        }
    }
}
