use std::collections::BTreeSet;

use gradepred::dataset::{build_ssr_dataset, center_dataset, overlap_ratio, read_dataset, write_dataset, TargetQuery};
use gradepred::eval::{Scored, compute_metrics};
use gradepred::ingest::{ingest, write_records};
use gradepred::solvers::{ElasticNetProblem, objective_elastic_net, soft_threshold, solve_elastic_net};
use gradepred::types::{CourseDataset, GradeRecord, MatrixBuilder};
use proptest::prelude::*;

/// Rows of (observed prior grades as (course index, grade), target grade).
type Rows = Vec<(Vec<(usize, f64)>, f64)>;

fn grade() -> impl Strategy<Value = f64> {
    (0u32..=16).prop_map(|q| q as f64 / 4.0)
}

fn rows(max_rows: usize, n_cols: usize) -> impl Strategy<Value = Rows> {
    prop::collection::vec(
        (prop::collection::btree_map(0..n_cols, grade(), 1..=n_cols), grade())
            .prop_map(|(m, y)| (m.into_iter().collect::<Vec<_>>(), y)),
        1..=max_rows,
    )
}

fn dataset(rows: &Rows) -> CourseDataset {
    let mut b = MatrixBuilder::new();
    let mut y = Vec::new();
    for (i, (prior, target)) in rows.iter().enumerate() {
        let s = format!("s{i}");
        b.add_row(&s);
        for (c, g) in prior {
            b.push(&s, &format!("c{c}"), *g);
        }
        y.push(*target);
    }
    CourseDataset::new(b.build().unwrap(), y, "T", None).unwrap()
}

proptest! {
    #[test]
    fn centering_round_trips(rows in rows(12, 5)) {
        let ds = dataset(&rows);
        let c = center_dataset(&ds).unwrap();
        let gpa = c.centering.as_ref().unwrap();
        for (i, (prior, target)) in rows.iter().enumerate() {
            let mean = prior.iter().map(|(_, g)| g).sum::<f64>() / prior.len() as f64;
            prop_assert!((gpa[i] - mean).abs() < 1e-12);
            prop_assert!((c.targets[i] + gpa[i] - target).abs() < 1e-12);
            for (col, g) in prior {
                let v = c.design.get_by_id(&format!("s{i}"), &format!("c{col}")).unwrap();
                prop_assert!((v + gpa[i] - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlap_filter_is_monotone(rows in rows(15, 6), target in prop::collection::btree_set(0usize..6, 1..=6)) {
        let ds = dataset(&rows);
        let q = TargetQuery {
            student: "t".into(),
            course: "T".into(),
            term: 9,
            prior: target.iter().map(|c| (format!("c{c}"), 3.0)).collect(),
        };
        let mut last = usize::MAX;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let n = build_ssr_dataset(&q, &ds, t).unwrap().n_rows();
            prop_assert!(n <= last);
            last = n;
            // Oracle: count rows by hand.
            let names: BTreeSet<String> = target.iter().map(|c| format!("c{c}")).collect();
            let expected = rows
                .iter()
                .filter(|(p, _)| {
                    let common = p.iter().filter(|(c, _)| names.contains(&format!("c{c}"))).count();
                    common as f64 / names.len() as f64 >= t
                })
                .count();
            prop_assert_eq!(n, expected);
        }
    }

    #[test]
    fn overlap_ratio_is_a_fraction(a in prop::collection::btree_set(0u8..8, 1..8), b in prop::collection::btree_set(0u8..8, 0..8)) {
        let a_ids: Vec<String> = a.iter().map(|c| c.to_string()).collect();
        let b_ids: Vec<String> = b.iter().map(|c| c.to_string()).collect();
        let a_set: BTreeSet<&str> = a_ids.iter().map(String::as_str).collect();
        let b_set: BTreeSet<&str> = b_ids.iter().map(String::as_str).collect();
        let r = overlap_ratio(&a_set, &b_set).unwrap();
        let expected = a.intersection(&b).count() as f64 / a.len() as f64;
        prop_assert_eq!(r, expected);
    }

    #[test]
    fn metrics_ignore_order(
        preds in prop::collection::vec((0usize..4, grade(), grade()), 1..40),
        seed in any::<u64>(),
    ) {
        let scored: Vec<Scored> = preds
            .iter()
            .enumerate()
            .map(|(i, (c, p, a))| Scored {
                student: format!("s{i}"),
                course: format!("c{c}"),
                predicted: *p,
                actual: *a,
            })
            .collect();
        let mut shuffled = scored.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let a = compute_metrics(&scored).unwrap();
        let b = compute_metrics(&shuffled).unwrap();
        prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        prop_assert!((a.avg_rmse - b.avg_rmse).abs() < 1e-12);
        prop_assert_eq!(a.n_courses, b.n_courses);
        let sq: f64 = preds.iter().map(|(_, p, a)| (p - a).powi(2)).sum();
        prop_assert!((a.rmse - (sq / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip(recs in prop::collection::btree_map((0u8..10, 0u8..6), (0u32..8, grade()), 1..40)) {
        let records: Vec<GradeRecord> = recs
            .iter()
            .map(|(&(s, c), &(t, g))| GradeRecord::new(format!("s{s}"), format!("c{c}"), t, g).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let (back, report) = ingest(buf.as_slice(), None).unwrap();
        prop_assert_eq!(report.rejected.len(), 0);
        prop_assert_eq!(report.retakes_resolved, 0);
        let mut a = records.clone();
        let mut b = back.clone();
        let key = |r: &GradeRecord| (r.student.clone(), r.course.clone());
        a.sort_by_key(key);
        b.sort_by_key(key);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dataset_text_round_trips(rows in rows(10, 4)) {
        let ds = dataset(&rows);
        for d in [ds.clone(), center_dataset(&ds).unwrap()] {
            let mut buf = Vec::new();
            write_dataset(&mut buf, &d).unwrap();
            prop_assert_eq!(read_dataset(buf.as_slice()).unwrap(), d);
        }
    }

    #[test]
    fn soft_threshold_shrinks(z in -10.0f64..10.0, g in 0.0f64..5.0) {
        let s = soft_threshold(z, g);
        prop_assert!(s.abs() <= z.abs());
        prop_assert!(s == 0.0 || s.signum() == z.signum());
        prop_assert!((z - s).abs() <= g + 1e-15);
    }

    /// Coordinate descent must not be beaten by any coordinate perturbation.
    #[test]
    fn elastic_net_is_coordinatewise_optimal(rows in rows(10, 3), l1 in 0.1f64..3.0, l2 in 0.0f64..3.0, nonneg in any::<bool>()) {
        let ds = dataset(&rows);
        let p = ElasticNetProblem {
            design: &ds.design,
            targets: &ds.targets,
            lambda1: l1,
            lambda2: l2,
            nonneg,
            fit_bias: true,
        };
        let m = solve_elastic_net(&p).unwrap();
        let f = objective_elastic_net(&p, &m).unwrap();
        for course in ds.design.col_ids().ids() {
            for d in [-1e-3, 1e-3] {
                let mut m2 = m.clone();
                let w = m2.weight(course) + d;
                if nonneg && w < 0.0 {
                    continue;
                }
                m2.weights.insert(course.clone(), w);
                prop_assert!(objective_elastic_net(&p, &m2).unwrap() >= f - 1e-9);
            }
        }
        if nonneg {
            prop_assert!(m.weights.values().all(|&w| w >= 0.0));
        }
    }
}
