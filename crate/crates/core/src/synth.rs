//! Synthetic grade data with planted structure.
//!
//! Courses form a leveled prerequisite graph. A handful of source courses are
//! taken in a student's first term only; every other course is chosen with a
//! weight favoring popular courses near the student's current level whose
//! prerequisites were partly taken in an earlier term.
//! Which grades exist therefore depends on the curriculum, not on chance.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::canonical_sort;
use crate::types::{GradeRecord, IdIndex, MAX_GRADE, MIN_GRADE, SparseGradeMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Each non-source grade is a sparse non-negative combination of the
    /// student's prerequisite grades.
    PlantedLinear,
    /// Global mean, student and course biases, and a low-rank interaction.
    PlantedLowrank,
    /// Global mean and biases only.
    PlantedBias,
    /// Two student populations with their own electives and their own
    /// linear weights on shared prerequisites.
    TwoCluster,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::PlantedLinear => "planted-linear",
            GeneratorKind::PlantedLowrank => "planted-lowrank",
            GeneratorKind::PlantedBias => "planted-bias",
            GeneratorKind::TwoCluster => "two-cluster",
        }
    }

    fn is_linear(self) -> bool {
        matches!(self, GeneratorKind::PlantedLinear | GeneratorKind::TwoCluster)
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            GeneratorKind::PlantedLinear,
            GeneratorKind::PlantedLowrank,
            GeneratorKind::PlantedBias,
            GeneratorKind::TwoCluster,
        ]
        .into_iter()
        .find(|k| k.as_str() == s.trim())
        .ok_or_else(|| Error::param("kind", format!("unknown generator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_courses: usize,
    pub n_terms: u32,
    pub kind: GeneratorKind,
    pub noise_sigma: f64,
    /// Inclusive range of courses taken per term.
    pub courses_per_term: (usize, usize),
    /// Probability that a lower-level course is a prerequisite.
    pub prereq_density: f64,
    /// Courses taken only in a student's first term.
    pub n_sources: usize,
    /// Terms a student stays enrolled.
    pub program_length: u32,
    /// Latent dimension of the low-rank generator.
    pub rank: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_students: 1000,
            n_courses: 40,
            n_terms: 16,
            kind: GeneratorKind::PlantedLinear,
            noise_sigma: 0.3,
            courses_per_term: (3, 5),
            prereq_density: 0.1,
            n_sources: 8,
            program_length: 8,
            rank: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Sets one field from its textual value; `key` is the field name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter {
                    name: "synth config",
                    reason: format!("{key}: cannot parse {value:?}"),
                })
        }
        match key.trim() {
            "n_students" => self.n_students = num(key, value)?,
            "n_courses" => self.n_courses = num(key, value)?,
            "n_terms" => self.n_terms = num(key, value)?,
            "kind" => self.kind = value.parse()?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "courses_per_term" => {
                let (lo, hi) = value.split_once(['-', ',']).unwrap_or((value, value));
                self.courses_per_term = (num(key, lo)?, num(key, hi)?);
            }
            "prereq_density" => self.prereq_density = num(key, value)?,
            "n_sources" => self.n_sources = num(key, value)?,
            "program_length" => self.program_length = num(key, value)?,
            "rank" => self.rank = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::InvalidParameter {
                    name: "synth config",
                    reason: format!("unknown key {other:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_students", self.n_students),
            ("n_courses", self.n_courses),
            ("n_terms", self.n_terms as usize),
            ("n_sources", self.n_sources),
            ("program_length", self.program_length as usize),
        ];
        for (name, v) in positive {
            if v < 1 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.prereq_density) {
            return Err(Error::param("prereq_density", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.courses_per_term;
        if lo < 1 || lo > hi {
            return Err(Error::param("courses_per_term", format!("{lo}-{hi} is not a valid range")));
        }
        if self.n_sources > self.n_courses {
            return Err(Error::param("n_sources", "exceeds n_courses"));
        }
        if self.n_sources < hi {
            return Err(Error::param(
                "courses_per_term",
                format!("first terms need {hi} source courses but only {} exist", self.n_sources),
            ));
        }
        if self.kind == GeneratorKind::PlantedLowrank && self.rank < 1 {
            return Err(Error::param("rank", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseTruth {
    pub id: String,
    /// 0 for source courses.
    pub level: u32,
    /// 0 shared core, 1 or 2 electives of that population.
    pub group: u8,
    pub prereqs: Vec<String>,
    pub difficulty: f64,
    /// Planted intercept and prerequisite weights per population (one
    /// entry unless the two-cluster generator is used). Empty for sources.
    pub intercept: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTruth {
    pub id: String,
    pub entry_term: u32,
    pub cluster: u8,
    pub ability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankTruth {
    pub mu: f64,
    pub student_bias: Vec<f64>,
    pub course_bias: Vec<f64>,
    /// Row-major, one row of `rank` factors per student / course.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub kind: GeneratorKind,
    pub noise_sigma: f64,
    pub seed: u64,
    pub courses: Vec<CourseTruth>,
    pub students: Vec<StudentTruth>,
    pub lowrank: Option<LowRankTruth>,
    pub n_grades: usize,
    pub n_clipped: usize,
}

impl Truth {
    pub fn clip_rate(&self) -> f64 {
        if self.n_grades == 0 {
            0.0
        } else {
            self.n_clipped as f64 / self.n_grades as f64
        }
    }

    pub fn course(&self, id: &str) -> Option<&CourseTruth> {
        self.courses.iter().find(|c| c.id == id)
    }

    /// Noiseless planted grade of a non-source course for a student of
    /// `cluster`, given the grades the student earned before it. Missing
    /// prerequisites contribute nothing.
    pub fn linear_grade(&self, course: &CourseTruth, cluster: u8, prior: &BTreeMap<&str, f64>) -> f64 {
        let pop = if course.weights.len() > 1 { cluster as usize } else { 0 };
        let mut g = course.intercept[pop];
        for (p, w) in course.prereqs.iter().zip(&course.weights[pop]) {
            if let Some(v) = prior.get(p.as_str()) {
                g += w * v;
            }
        }
        g
    }

    /// The planted weights of `course` as a map over prerequisite ids.
    pub fn weight_map(&self, course: &str, cluster: u8) -> BTreeMap<String, f64> {
        let Some(c) = self.course(course) else {
            return BTreeMap::new();
        };
        if c.weights.is_empty() {
            return BTreeMap::new();
        }
        let pop = if c.weights.len() > 1 { cluster as usize } else { 0 };
        c.prereqs.iter().cloned().zip(c.weights[pop].iter().copied()).collect()
    }
}

/// Relative weight of a course none of whose prerequisites were taken.
const SKIP_WEIGHT: f64 = 0.05;

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("standard deviation is finite and non-negative")
}

/// Picks up to `n` distinct items with probability proportional to weight.
fn weighted_pick(rng: &mut ChaCha8Rng, items: &[(usize, f64)], n: usize) -> Vec<usize> {
    let mut pool: Vec<(usize, f64)> = items.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    let mut out = Vec::new();
    while out.len() < n && !pool.is_empty() {
        let total: f64 = pool.iter().map(|&(_, w)| w).sum();
        let mut x = rng.random::<f64>() * total;
        let mut k = pool.len() - 1;
        for (i, &(_, w)) in pool.iter().enumerate() {
            if x < w {
                k = i;
                break;
            }
            x -= w;
        }
        out.push(pool.swap_remove(k).0);
    }
    out
}

struct Course {
    level: u32,
    group: u8,
    prereqs: Vec<usize>,
    popularity: f64,
}

fn build_curriculum(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Course> {
    let levels = cfg.program_length.saturating_sub(1).max(1);
    let n_derived = cfg.n_courses - cfg.n_sources;
    let two = cfg.kind == GeneratorKind::TwoCluster;
    let pop = normal(0.8);
    let mut courses: Vec<Course> = Vec::with_capacity(cfg.n_courses);
    for _ in 0..cfg.n_sources {
        courses.push(Course {
            level: 0,
            group: 0,
            prereqs: Vec::new(),
            popularity: pop.sample(rng).exp(),
        });
    }
    for d in 0..n_derived {
        // Levels rise with the course index so that every level has courses.
        let level = 1 + (d as u64 * levels as u64 / n_derived.max(1) as u64) as u32;
        let group = if two {
            match d % 3 {
                0 => 0,
                1 => 1,
                _ => 2,
            }
        } else {
            0
        };
        let candidates: Vec<usize> = (0..courses.len())
            .filter(|&j| courses[j].level < level && (courses[j].group == 0 || courses[j].group == group))
            .collect();
        let mut prereqs: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < cfg.prereq_density)
            .collect();
        prereqs.shuffle(rng);
        prereqs.truncate(3);
        if prereqs.is_empty() {
            prereqs.push(*candidates.choose(rng).expect("sources precede every derived course"));
        }
        prereqs.sort_unstable();
        courses.push(Course {
            level,
            group,
            prereqs,
            popularity: pop.sample(rng).exp(),
        });
    }
    courses
}

/// Draws non-negative weights summing to `s` ∈ [0.6, 0.95] and an
/// intercept (1 − s)·u with u ∈ [1.5, 3.5], so noiseless grades stay in range.
fn planted_weights(n: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let s = rng.random_range(0.6..0.95);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let w = raw.iter().map(|r| r * s / total).collect();
    (((1.0 - s) * rng.random_range(1.5..3.5)), w)
}

/// Generates records (in canonical order) and the planted parameters.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<GradeRecord>, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let curriculum = build_curriculum(cfg, &mut rng);
    let width = (cfg.n_courses.max(cfg.n_students) as f64).log10() as usize + 1;
    let course_ids: Vec<String> = (0..cfg.n_courses).map(|j| format!("c{j:0width$}")).collect();
    let n_pop = if cfg.kind == GeneratorKind::TwoCluster { 2 } else { 1 };

    let diff = normal(0.3);
    let mut courses = Vec::with_capacity(cfg.n_courses);
    for (j, c) in curriculum.iter().enumerate() {
        let (mut intercept, mut weights) = (Vec::new(), Vec::new());
        if c.level > 0 && cfg.kind.is_linear() {
            for _ in 0..n_pop {
                let (b, w) = planted_weights(c.prereqs.len(), &mut rng);
                intercept.push(b);
                weights.push(w);
            }
        }
        courses.push(CourseTruth {
            id: course_ids[j].clone(),
            level: c.level,
            group: c.group,
            prereqs: c.prereqs.iter().map(|&p| course_ids[p].clone()).collect(),
            difficulty: diff.sample(&mut rng),
            intercept,
            weights,
        });
    }

    let ability = normal(0.4);
    let last_entry = cfg.n_terms - 1;
    let students: Vec<StudentTruth> = (0..cfg.n_students)
        .map(|i| StudentTruth {
            id: format!("s{i:0w$}", w = width + 1),
            entry_term: rng.random_range(0..=last_entry),
            cluster: if n_pop > 1 { rng.random_range(0..2) } else { 0 },
            ability: ability.sample(&mut rng),
        })
        .collect();

    let lowrank = match cfg.kind {
        GeneratorKind::PlantedLowrank | GeneratorKind::PlantedBias => {
            let rank = if cfg.kind == GeneratorKind::PlantedLowrank { cfg.rank } else { 0 };
            let f = normal(if rank > 0 { 0.6 / (rank as f64).sqrt() } else { 0.0 });
            let sb = normal(0.4);
            let cb = normal(0.3);
            Some(LowRankTruth {
                mu: 2.9,
                student_bias: (0..cfg.n_students).map(|_| sb.sample(&mut rng)).collect(),
                course_bias: (0..cfg.n_courses).map(|_| cb.sample(&mut rng)).collect(),
                p: (0..cfg.n_students * rank).map(|_| f.sample(&mut rng)).collect(),
                q: (0..cfg.n_courses * rank).map(|_| f.sample(&mut rng)).collect(),
                rank,
            })
        }
        _ => None,
    };

    let mut truth = Truth {
        kind: cfg.kind,
        noise_sigma: cfg.noise_sigma,
        seed: cfg.seed,
        courses,
        students,
        lowrank,
        n_grades: 0,
        n_clipped: 0,
    };

    let noise = normal(cfg.noise_sigma);
    let innovation = normal(0.4);
    let mut records = Vec::new();
    for (i, st) in truth.students.iter().enumerate() {
        let mut taken: BTreeMap<usize, (u32, f64)> = BTreeMap::new();
        let mut forbidden: BTreeSet<usize> = BTreeSet::new();
        let end = (st.entry_term + cfg.program_length).min(cfg.n_terms);
        for term in st.entry_term..end {
            let semester = term - st.entry_term;
            let n_take = rng.random_range(cfg.courses_per_term.0..=cfg.courses_per_term.1);
            let candidates: Vec<(usize, f64)> = curriculum
                .iter()
                .enumerate()
                .filter(|&(j, c)| {
                    if taken.contains_key(&j) || forbidden.contains(&j) {
                        return false;
                    }
                    if semester == 0 { c.level == 0 } else { c.level > 0 }
                })
                .map(|(j, c)| {
                    let own = c.group == 0 || c.group == st.cluster + 1;
                    let cluster = if own { 1.0 } else { 0.03 };
                    let level = (-(c.level as f64 - semester as f64).abs()).exp();
                    // Rarely, a course is taken without any prerequisite.
                    let ready = if c.prereqs.iter().any(|p| taken.contains_key(p)) { 1.0 } else { SKIP_WEIGHT };
                    (j, c.popularity * level * cluster * ready)
                })
                .collect();
            let picked = weighted_pick(&mut rng, &candidates, n_take);
            let prior: BTreeMap<&str, f64> = taken
                .iter()
                .map(|(&j, &(_, g))| (course_ids[j].as_str(), g))
                .collect();
            let mut new = Vec::with_capacity(picked.len());
            for j in picked {
                // Same-term prerequisites would break the strict ordering.
                if forbidden.contains(&j) || new.iter().any(|(k, _)| curriculum[j].prereqs.contains(k)) {
                    continue;
                }
                let ct = &truth.courses[j];
                let base = match &truth.lowrank {
                    Some(lr) => {
                        let dot: f64 = (0..lr.rank)
                            .map(|r| lr.p[i * lr.rank + r] * lr.q[j * lr.rank + r])
                            .sum();
                        lr.mu + lr.student_bias[i] + lr.course_bias[j] + dot
                    }
                    None if ct.level == 0 => 2.6 + st.ability + ct.difficulty + innovation.sample(&mut rng),
                    None => truth.linear_grade(ct, st.cluster, &prior),
                };
                let raw = if cfg.noise_sigma > 0.0 { base + noise.sample(&mut rng) } else { base };
                let grade = raw.clamp(MIN_GRADE, MAX_GRADE);
                truth.n_grades += 1;
                if grade != raw {
                    truth.n_clipped += 1;
                }
                for p in &curriculum[j].prereqs {
                    if !taken.contains_key(p) {
                        forbidden.insert(*p);
                    }
                }
                new.push((j, grade));
                records.push(GradeRecord::new(&st.id, &course_ids[j], term, grade)?);
            }
            for (j, g) in new {
                taken.insert(j, (term, g));
            }
        }
    }
    canonical_sort(&mut records);
    Ok((records, truth))
}

/// Writes the planted parameters as JSON.
pub fn write_truth<W: std::io::Write>(w: W, truth: &Truth) -> Result<()> {
    serde_json::to_writer_pretty(w, truth)?;
    Ok(())
}

pub fn read_truth<R: std::io::Read>(r: R) -> Result<Truth> {
    Ok(serde_json::from_reader(r)?)
}

/// A complete `n_rows × n_cols` matrix μ + b_i + c_j + p_i·q_j of exact
/// rank `rank` in its interaction part, with all values inside the grade
/// range. Returns the matrix and its planted parameters.
pub fn dense_lowrank(n_rows: usize, n_cols: usize, rank: usize, seed: u64) -> Result<(SparseGradeMatrix, LowRankTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let f = 0.5 / (rank.max(1) as f64).sqrt();
    let truth = LowRankTruth {
        mu: 2.5,
        student_bias: (0..n_rows).map(|_| u(-0.3, 0.3)).collect(),
        course_bias: (0..n_cols).map(|_| u(-0.3, 0.3)).collect(),
        p: (0..n_rows * rank).map(|_| u(-f, f)).collect(),
        q: (0..n_cols * rank).map(|_| u(-f, f)).collect(),
        rank,
    };
    let rows = IdIndex::from_ids((0..n_rows).map(|i| format!("r{i}")))?;
    let cols = IdIndex::from_ids((0..n_cols).map(|j| format!("c{j}")))?;
    let mut triplets = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        for j in 0..n_cols {
            let dot: f64 = (0..rank).map(|r| truth.p[i * rank + r] * truth.q[j * rank + r]).sum();
            triplets.push((i, j, truth.mu + truth.student_bias[i] + truth.course_bias[j] + dot));
        }
    }
    Ok((SparseGradeMatrix::from_triplets(rows, cols, triplets)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: GeneratorKind, sigma: f64) -> SynthConfig {
        SynthConfig {
            n_students: 200,
            n_courses: 30,
            kind,
            noise_sigma: sigma,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = small(GeneratorKind::TwoCluster, 0.3);
        let (a, ta) = generate(&cfg).unwrap();
        let (b, tb) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&SynthConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_linear_grades_match_truth() {
        let (recs, truth) = generate(&small(GeneratorKind::PlantedLinear, 0.0)).unwrap();
        assert!(truth.clip_rate() < 0.01, "{}", truth.clip_rate());
        let mut by_student: BTreeMap<&str, Vec<&GradeRecord>> = BTreeMap::new();
        for r in &recs {
            by_student.entry(&r.student).or_default().push(r);
        }
        let mut checked = 0;
        for rs in by_student.values() {
            for r in rs {
                let c = truth.course(&r.course).unwrap();
                if c.level == 0 {
                    continue;
                }
                let prior: BTreeMap<&str, f64> = rs
                    .iter()
                    .filter(|p| p.term < r.term)
                    .map(|p| (p.course.as_str(), p.grade))
                    .collect();
                assert_eq!(r.grade, truth.linear_grade(c, 0, &prior));
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn prerequisites_never_follow_the_course() {
        let (recs, truth) = generate(&small(GeneratorKind::TwoCluster, 0.3)).unwrap();
        let term: BTreeMap<(&str, &str), u32> =
            recs.iter().map(|r| ((r.student.as_str(), r.course.as_str()), r.term)).collect();
        for r in &recs {
            for p in &truth.course(&r.course).unwrap().prereqs {
                if let Some(&t) = term.get(&(r.student.as_str(), p.as_str())) {
                    assert!(t < r.term, "{} took {p} at {t}, {} at {}", r.student, r.course, r.term);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = [
            SynthConfig { courses_per_term: (3, 9), ..SynthConfig::default() },
            SynthConfig { courses_per_term: (4, 2), ..SynthConfig::default() },
            SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() },
            SynthConfig { prereq_density: 1.5, ..SynthConfig::default() },
            SynthConfig { n_students: 0, ..SynthConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate(&cfg), Err(Error::InvalidParameter { .. })), "{cfg:?}");
        }
        let mut cfg = SynthConfig::default();
        cfg.set("courses_per_term", "2-4").unwrap();
        cfg.set("kind", "two-cluster").unwrap();
        assert_eq!(cfg.courses_per_term, (2, 4));
        assert!(cfg.set("colour", "red").is_err());
        assert!(cfg.set("n_students", "many").is_err());
    }

    #[test]
    fn dense_lowrank_is_complete() {
        let (m, t) = dense_lowrank(20, 10, 2, 1).unwrap();
        assert_eq!(m.nnz(), 200);
        assert_eq!(t.p.len(), 40);
        assert!(m.entries().all(|(_, _, v)| (MIN_GRADE..=MAX_GRADE).contains(&v)));
    }
}
