//! Reading grade files, filtering, retake resolution and the active/inactive
//! split around a target term.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use log::warn;

use crate::error::{Error, Result};
use crate::types::{GradeRecord, MAX_GRADE, MIN_GRADE, letter_to_points};

/// Column delimiter of a record file. `None` auto-detects from the header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordFormat {
    pub delimiter: Option<u8>,
}

/// A line dropped during parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub data_lines: usize,
    pub kept: usize,
    pub rejected: Vec<Rejection>,
    /// Records discarded because a later taking of the same course exists.
    pub retakes_resolved: usize,
    /// Records dropped by the course allow-list.
    pub not_allowed: usize,
}

impl IngestReport {
    pub fn dropped(&self) -> usize {
        self.rejected.len() + self.retakes_resolved + self.not_allowed
    }
}

fn detect_delimiter(header: &str) -> u8 {
    if header.contains('\t') { b'\t' } else { b',' }
}

fn parse_grade(raw: &str) -> std::result::Result<f64, String> {
    let raw = raw.trim();
    match raw.parse::<f64>() {
        Ok(g) if g.is_finite() && (MIN_GRADE..=MAX_GRADE).contains(&g) => Ok(g),
        Ok(g) => Err(format!("numeric grade {g} outside [0, 4]")),
        Err(_) => letter_to_points(raw).map_err(|e| e.to_string()),
    }
}

/// Parses delimiter-separated grade records with a header naming the
/// columns `student`, `course`, `term` and `grade` (any order).
///
/// Invalid lines are skipped and listed in the report; an unusable header is
/// fatal.
pub fn parse_records<R: Read>(
    mut source: R,
    format: RecordFormat,
) -> Result<(Vec<GradeRecord>, IngestReport)> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let header = text
        .lines()
        .next()
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Empty("no header line".into()))?;
    let delimiter = format.delimiter.unwrap_or_else(|| detect_delimiter(header));

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("header lacks column `{name}`"),
            })
    };
    let (ci_student, ci_course, ci_term, ci_grade) =
        (column("student")?, column("course")?, column("term")?, column("grade")?);

    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        report.data_lines += 1;
        let field = |i: usize| row.get(i).unwrap_or("");
        let parsed = (|| {
            let term = field(ci_term)
                .parse::<u32>()
                .map_err(|_| format!("bad term {:?}", field(ci_term)))?;
            let grade = parse_grade(field(ci_grade))?;
            GradeRecord::new(field(ci_student), field(ci_course), term, grade)
                .map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => {
                warn!("line {line}: {reason}");
                report.rejected.push(Rejection { line, reason });
            }
        }
    }
    report.kept = records.len();
    Ok((records, report))
}

/// Keeps one record per (student, course): the one with the latest term.
/// On equal terms the later line wins. Returns the number discarded.
pub fn resolve_retakes(records: Vec<GradeRecord>) -> (Vec<GradeRecord>, usize) {
    let mut latest: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        latest
            .entry((r.student.as_str(), r.course.as_str()))
            .and_modify(|k| {
                if r.term >= records[*k].term {
                    *k = i;
                }
            })
            .or_insert(i);
    }
    let keep: HashSet<usize> = latest.into_values().collect();
    let discarded = records.len() - keep.len();
    if discarded > 0 {
        warn!("{discarded} retaken course record(s) replaced by the latest taking");
    }
    let kept = records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r)
        .collect();
    (kept, discarded)
}

/// Reads an allow-list: one course id per line, blank lines and `#`
/// comments ignored.
pub fn parse_allow_list<R: BufRead>(source: R) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for line in source.lines() {
        let line = line?;
        let id = line.trim();
        if !id.is_empty() && !id.starts_with('#') {
            out.insert(id.to_string());
        }
    }
    Ok(out)
}

pub fn apply_allow_list(
    records: Vec<GradeRecord>,
    allowed: &BTreeSet<String>,
) -> (Vec<GradeRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records
        .into_iter()
        .filter(|r| allowed.contains(&r.course))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Full ingest: parse, optional allow-list, retake resolution. Output is in
/// canonical order (student, term, course).
pub fn ingest<R: Read>(
    source: R,
    allow_list: Option<&BTreeSet<String>>,
) -> Result<(Vec<GradeRecord>, IngestReport)> {
    let (mut records, mut report) = parse_records(source, RecordFormat::default())?;
    if report.data_lines == 0 {
        return Err(Error::Empty("no data lines".into()));
    }
    if let Some(allowed) = allow_list {
        let (kept, dropped) = apply_allow_list(records, allowed);
        records = kept;
        report.not_allowed = dropped;
    }
    let (mut records, resolved) = resolve_retakes(records);
    report.retakes_resolved = resolved;
    canonical_sort(&mut records);
    report.kept = records.len();
    Ok((records, report))
}

pub fn canonical_sort(records: &mut [GradeRecord]) {
    records.sort_by(|a, b| {
        (a.student.as_str(), a.term, a.course.as_str())
            .cmp(&(b.student.as_str(), b.term, b.course.as_str()))
    });
}

/// Writes records as comma-separated `student,course,term,grade` with the
/// shortest decimal representation that round-trips each grade.
pub fn write_records<W: Write>(sink: W, records: &[GradeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["student", "course", "term", "grade"])?;
    for r in records {
        w.write_record([
            r.student.as_str(),
            r.course.as_str(),
            &r.term.to_string(),
            &r.grade.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All records of one group of students.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub records: Vec<GradeRecord>,
    /// Maximum term over `records`; `None` for an empty cohort.
    pub last_term: Option<u32>,
}

impl Cohort {
    pub fn new(records: Vec<GradeRecord>) -> Self {
        let last_term = records.iter().map(|r| r.term).max();
        Cohort { records, last_term }
    }

    pub fn students(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.student.as_str()).collect()
    }

    /// Records grouped per student, students in id order, each student's
    /// records in their original order.
    pub fn by_student(&self) -> BTreeMap<&str, Vec<&GradeRecord>> {
        let mut out: BTreeMap<&str, Vec<&GradeRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.student.as_str()).or_default().push(r);
        }
        out
    }
}

/// Splits records into students with at least one record in `target_term`
/// (active) and everyone else (inactive).
pub fn split_active(records: &[GradeRecord], target_term: u32) -> Result<(Cohort, Cohort)> {
    let active: HashSet<&str> = records
        .iter()
        .filter(|r| r.term == target_term)
        .map(|r| r.student.as_str())
        .collect();
    if active.is_empty() {
        return Err(Error::MissingTerm(target_term));
    }
    let (a, i): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| active.contains(r.student.as_str()));
    Ok((Cohort::new(a), Cohort::new(i)))
}

/// Drops every record after `last_term`.
pub fn truncate_after(records: &[GradeRecord], last_term: u32) -> Vec<GradeRecord> {
    records
        .iter()
        .filter(|r| r.term <= last_term)
        .cloned()
        .collect()
}

/// Distinct terms present, ascending.
pub fn terms(records: &[GradeRecord]) -> Vec<u32> {
    records
        .iter()
        .map(|r| r.term)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> (Vec<GradeRecord>, IngestReport) {
        parse_records(text.as_bytes(), RecordFormat::default()).unwrap()
    }

    #[test]
    fn letter_and_numeric_grades() {
        let (recs, rep) = parse("student,course,term,grade\ns1,CSCI101,3,A\ns1,CSCI102,3,3.5\n");
        assert_eq!(recs[0], GradeRecord::new("s1", "CSCI101", 3, 4.0).unwrap());
        assert_eq!(recs[1], GradeRecord::new("s1", "CSCI102", 3, 3.5).unwrap());
        assert_eq!(rep.kept, 2);
        assert!(rep.rejected.is_empty());
    }

    #[test]
    fn pass_fail_and_out_of_range_rejected() {
        let (recs, rep) = parse(
            "student,course,term,grade\ns1,PE100,2,S\ns1,X,2,4.5\ns1,Y,x,A\ns1,Z,2,B\n",
        );
        assert_eq!(recs.len(), 1);
        assert_eq!(rep.rejected.len(), 3);
        assert_eq!(rep.rejected[0].line, 2);
    }

    #[test]
    fn tab_delimiter_and_column_order() {
        let (recs, _) = parse("grade\tterm\tcourse\tstudent\nB+\t1\tc\ts\n");
        assert_eq!(recs[0], GradeRecord::new("s", "c", 1, 3.333).unwrap());
    }

    #[test]
    fn bad_header_is_fatal() {
        let err = parse_records("student,course,when,grade\n".as_bytes(), RecordFormat::default());
        assert!(matches!(err, Err(Error::Parse { line: 1, .. })));
        assert!(parse_records("".as_bytes(), RecordFormat::default()).is_err());
    }

    #[test]
    fn latest_retake_kept() {
        let recs = vec![
            GradeRecord::new("s", "c", 1, 1.0).unwrap(),
            GradeRecord::new("s", "d", 1, 2.0).unwrap(),
            GradeRecord::new("s", "c", 3, 3.0).unwrap(),
        ];
        let (kept, n) = resolve_retakes(recs);
        assert_eq!(n, 1);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().any(|r| r.course == "c" && r.grade == 3.0));
    }

    #[test]
    fn allow_list_filters_courses() {
        let allowed = parse_allow_list("CSCI1\n# comment\n\nCSCI2\n".as_bytes()).unwrap();
        let text = "student,course,term,grade\na,CSCI1,0,A\na,PE,0,B\n";
        let (recs, rep) = ingest(text.as_bytes(), Some(&allowed)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(rep.not_allowed, 1);
    }

    #[test]
    fn ingest_empty_file_fails() {
        assert!(ingest("student,course,term,grade\n".as_bytes(), None).is_err());
    }

    #[test]
    fn split_by_target_term_activity() {
        let mut recs = Vec::new();
        for t in [1, 2, 5] {
            recs.push(GradeRecord::new("a", format!("c{t}"), t, 3.0).unwrap());
        }
        for t in [1, 2] {
            recs.push(GradeRecord::new("b", format!("c{t}"), t, 3.0).unwrap());
        }
        let (act, inact) = split_active(&recs, 5).unwrap();
        assert_eq!(act.students(), BTreeSet::from(["a"]));
        assert_eq!(inact.students(), BTreeSet::from(["b"]));
        assert_eq!(act.last_term, Some(5));
        assert_eq!(inact.last_term, Some(2));

        let (act, inact) = split_active(&recs, 1).unwrap();
        assert_eq!(act.students().len(), 2);
        assert!(inact.records.is_empty());
        assert_eq!(inact.last_term, None);

        assert!(matches!(split_active(&recs, 9), Err(Error::MissingTerm(9))));
    }
}
