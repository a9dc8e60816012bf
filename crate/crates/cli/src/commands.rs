use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use gradepred::dataset::build_course_dataset;
use gradepred::eval::{
    MetricRow, Policy, Scored, common_subset, compute_metrics, write_grid_csv, write_metrics_csv, write_metrics_text,
    write_predictions_csv, write_stats_csv, write_stats_text,
};
use gradepred::experiment::{
    MethodRun, RunContext, SplitData, build_split_with, holdout_split, previous_term, select_and_run,
};
use gradepred::ingest::{Cohort, parse_allow_list, terms, truncate_after, write_records};
use gradepred::predictors::Method;
use gradepred::synth::{SynthConfig, generate, write_truth};
use gradepred::types::{CourseDataset, GradeRecord};
use log::info;

use crate::cache::{DatasetCache, input_hash};
use crate::config::{NoCourses, RunConfig, resolve, usage};
use crate::{GridArgs, IngestArgs, RunArgs, SimulateArgs, StatsArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let allow = match &a.allow_list {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Some(parse_allow_list(BufReader::new(f))?)
        }
        None => None,
    };
    let (records, report) = gradepred::ingest::ingest(BufReader::new(f), allow.as_ref())
        .with_context(|| format!("reading {}", a.input.display()))?;
    let mut w = create(&a.output)?;
    write_records(&mut w, &records)?;
    w.flush()?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "data lines       {}", report.data_lines)?;
    writeln!(out, "kept             {}", report.kept)?;
    writeln!(out, "dropped          {}", report.dropped())?;
    writeln!(out, "  rejected       {}", report.rejected.len())?;
    writeln!(out, "  retakes        {}", report.retakes_resolved)?;
    writeln!(out, "  not allowed    {}", report.not_allowed)?;
    for r in &report.rejected {
        writeln!(out, "line {}: {}", r.line, r.reason)?;
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    for s in &a.sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {s:?} needs KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim()).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let (records, truth) = generate(&cfg)?;
    let mut w = create(&a.output)?;
    write_records(&mut w, &records)?;
    w.flush()?;
    let truth_path = a.truth.clone().unwrap_or_else(|| a.output.with_extension("truth.json"));
    let mut w = create(&truth_path)?;
    write_truth(&mut w, &truth)?;
    w.flush()?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "generator        {}", cfg.kind.as_str())?;
    writeln!(out, "students         {}", truth.students.len())?;
    writeln!(out, "courses          {}", truth.courses.len())?;
    writeln!(out, "records          {}", records.len())?;
    writeln!(out, "clip rate        {:.4}", truth.clip_rate())?;
    writeln!(out, "truth            {}", truth_path.display())?;
    Ok(())
}

/// Records plus the hash of the file they came from.
fn load_records(path: &Path) -> Result<(Vec<GradeRecord>, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = input_hash(&bytes);
    let (records, report) =
        gradepred::ingest::ingest(bytes.as_slice(), None).with_context(|| format!("reading {}", path.display()))?;
    if !report.rejected.is_empty() {
        log::warn!("{}: {} invalid lines skipped", path.display(), report.rejected.len());
    }
    Ok((records, hash))
}

fn set_threads(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

struct Loaded {
    records: Vec<GradeRecord>,
    hash: String,
    target_term: u32,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| usage("no input file (use --input or `input` in the config)"))?;
    let (records, hash) = load_records(input)?;
    let target_term = match cfg.target_term {
        Some(t) => t,
        None => *terms(&records).last().context("no records")?,
    };
    Ok(Loaded {
        records,
        hash,
        target_term,
    })
}

fn split(cfg: &RunConfig, hash: &str, records: &[GradeRecord], term: u32, k: usize) -> Result<SplitData> {
    let s = match &cfg.cache_dir {
        Some(dir) => {
            let cache = DatasetCache::new(dir.clone(), hash);
            build_split_with(records, term, k, cfg.min_students, |course: &str, cohort: &Cohort, k| {
                cache.get(term, course, cohort, k)
            })?
        }
        None => build_split_with(
            records,
            term,
            k,
            cfg.min_students,
            |course: &str, cohort: &Cohort, k| -> gradepred::Result<CourseDataset> {
                build_course_dataset(course, cohort, k)
            },
        )?,
    };
    Ok(s)
}

fn test_splits(cfg: &RunConfig, data: &Loaded) -> Result<Vec<SplitData>> {
    let mut out = Vec::new();
    for &k in &cfg.ks {
        let s = split(cfg, &data.hash, &data.records, data.target_term, k)?;
        info!("k={k}: {} courses, {} targets", s.courses.len(), s.n_targets());
        out.push(s);
    }
    if out.iter().all(|s| s.courses.is_empty()) {
        let mut msg = format!("no course at term {} can be predicted", data.target_term);
        if let Some(s) = out.first() {
            for (c, why) in s.skipped.iter().take(5) {
                let _ = write!(msg, "; {c}: {why}");
            }
        }
        return Err(NoCourses(msg).into());
    }
    Ok(out)
}

fn context(cfg: &RunConfig) -> RunContext {
    let mut ctx = RunContext::new(cfg.seed);
    ctx.clamp = cfg.clamp;
    ctx.min_students = cfg.min_students;
    ctx.star_ranks = cfg.star_ranks.clone();
    if let Some(e) = cfg.epochs {
        ctx.sgd.epochs = e;
    }
    ctx
}

enum Outcome {
    Done(Box<MethodRun>),
    Skipped(String),
}

/// Runs every configured method at every k.
struct Runner<'a> {
    cfg: &'a RunConfig,
    data: &'a Loaded,
    ctx: RunContext,
    /// Selection splits by (policy, k); `Err` holds why none exists.
    selection: BTreeMap<(Policy, usize), std::result::Result<SplitData, String>>,
}

impl<'a> Runner<'a> {
    fn selection_for(&mut self, policy: Policy, test: &SplitData) -> Result<Option<std::result::Result<&SplitData, String>>> {
        if policy == Policy::TestBest {
            return Ok(None);
        }
        let key = (policy, test.k);
        if !self.selection.contains_key(&key) {
            let built = match policy {
                Policy::PriorSemester => match previous_term(&self.data.records, test.target_term) {
                    Ok(prev) => {
                        let truncated = truncate_after(&self.data.records, prev);
                        Ok(split(self.cfg, &self.data.hash, &truncated, prev, test.k)?)
                    }
                    Err(e) => Err(e.to_string()),
                },
                Policy::Holdout => Ok(holdout_split(test, self.ctx.seed, self.ctx.min_students)?),
                Policy::TestBest => unreachable!(),
            };
            self.selection.insert(key, built);
        }
        Ok(Some(self.selection[&key].as_ref().map_err(Clone::clone)))
    }

    fn run(&mut self, method: Method, test: &SplitData) -> Result<Outcome> {
        let grid = &self.cfg.grids[&method];
        if test.courses.is_empty() {
            return Ok(Outcome::Skipped("no predictable courses".into()));
        }
        let selection = match self.selection_for(grid.policy, test)? {
            None => None,
            Some(Ok(s)) => Some(s.clone()),
            Some(Err(why)) => return Ok(Outcome::Skipped(why)),
        };
        info!("{method} k={}: {} cells, policy {}", test.k, grid.n_cells(), grid.policy);
        match select_and_run(method, grid, test, selection.as_ref(), &self.ctx) {
            Ok(run) => Ok(Outcome::Done(Box::new(run))),
            Err(gradepred::Error::Empty(why)) => Ok(Outcome::Skipped(why)),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn run(a: RunArgs) -> Result<()> {
    let cfg = resolve(&a, &[])?;
    if cfg.methods.is_empty() {
        bail!(usage("no methods given (use --methods or `methods` in the config)"));
    }
    execute(&cfg)
}

fn execute(cfg: &RunConfig) -> Result<()> {
    set_threads(cfg.jobs);
    let data = load(cfg)?;
    let splits = test_splits(cfg, &data)?;
    let mut runner = Runner {
        cfg,
        data: &data,
        ctx: context(cfg),
        selection: BTreeMap::new(),
    };

    let mut outcomes: Vec<(Method, usize, Outcome)> = Vec::new();
    for &m in &cfg.methods {
        for s in &splits {
            let o = runner.run(m, s)?;
            outcomes.push((m, s.k, o));
        }
    }

    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    // Predictions, one file per k when several were requested.
    for s in &splits {
        let rows: Vec<(&str, &Scored)> = outcomes
            .iter()
            .filter(|(_, k, _)| *k == s.k)
            .filter_map(|(m, _, o)| match o {
                Outcome::Done(r) => Some((m.as_str(), r)),
                Outcome::Skipped(_) => None,
            })
            .flat_map(|(m, r)| r.output.predictions.iter().map(move |p| (m, p)))
            .collect();
        let name = if splits.len() == 1 {
            "predictions.csv".to_string()
        } else {
            format!("predictions_k{}.csv", s.k)
        };
        let mut w = create(&out.join(name))?;
        write_predictions_csv(&mut w, &rows)?;
        w.flush()?;
    }

    let mut metric_rows = Vec::new();
    for (m, k, o) in &outcomes {
        if let Outcome::Done(r) = o
            && let Some(report) = &r.report
        {
            metric_rows.push(MetricRow {
                method: m.to_string(),
                k: *k,
                params: r.best.to_string(),
                scope: "all".into(),
                report: report.clone(),
            });
        }
    }
    if cfg.common_subset && splits.len() > 1 {
        for &m in &cfg.methods {
            let runs: Vec<(usize, &MethodRun)> = outcomes
                .iter()
                .filter(|(mm, _, _)| *mm == m)
                .filter_map(|(_, k, o)| match o {
                    Outcome::Done(r) => Some((*k, r.as_ref())),
                    Outcome::Skipped(_) => None,
                })
                .collect();
            if runs.len() != splits.len() {
                continue;
            }
            let preds: Vec<Vec<Scored>> = runs.iter().map(|(_, r)| r.output.predictions.clone()).collect();
            for ((k, r), common) in runs.iter().zip(common_subset(&preds)) {
                if common.is_empty() {
                    continue;
                }
                metric_rows.push(MetricRow {
                    method: m.to_string(),
                    k: *k,
                    params: r.best.to_string(),
                    scope: "common".into(),
                    report: compute_metrics(&common)?,
                });
            }
        }
    }
    let mut w = create(&out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &metric_rows)?;
    w.flush()?;
    let mut w = create(&out.join("metrics.txt"))?;
    write_metrics_text(&mut w, &metric_rows)?;
    w.flush()?;

    write_stats(out, &splits)?;

    for (m, k, o) in &outcomes {
        if let Outcome::Done(r) = o {
            let mut w = create(&out.join(format!("grid_{m}_k{k}.csv")))?;
            write_grid_csv(&mut w, m.as_str(), &cfg.grids[m], &r.selection)?;
            w.flush()?;
        }
    }

    let report = run_report(data.target_term, &splits, &outcomes);
    let mut w = create(&out.join("report.txt"))?;
    w.write_all(report.as_bytes())?;
    w.flush()?;

    let mut stdout = std::io::stdout().lock();
    write_metrics_text(&mut stdout, &metric_rows)?;
    for (m, k, o) in &outcomes {
        if let Outcome::Skipped(why) = o {
            writeln!(stdout, "{m} k={k}: skipped ({why})")?;
        }
    }
    Ok(())
}

fn write_stats(out: &Path, splits: &[SplitData]) -> Result<()> {
    let stats: Vec<_> = splits.iter().map(SplitData::statistics).collect();
    let mut w = create(&out.join("stats.csv"))?;
    write_stats_csv(&mut w, &stats)?;
    w.flush()?;
    let mut w = create(&out.join("stats.txt"))?;
    write_stats_text(&mut w, &stats)?;
    w.flush()?;
    Ok(())
}

fn run_report(target_term: u32, splits: &[SplitData], outcomes: &[(Method, usize, Outcome)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "target term {target_term}");
    for sp in splits {
        let _ = writeln!(
            s,
            "k={}: {} courses, {} targets, {} courses skipped",
            sp.k,
            sp.courses.len(),
            sp.n_targets(),
            sp.skipped.len()
        );
        for (c, why) in &sp.skipped {
            let _ = writeln!(s, "  skip {c}: {why}");
        }
    }
    for (m, k, o) in outcomes {
        match o {
            Outcome::Skipped(why) => {
                let _ = writeln!(s, "{m} k={k}: skipped ({why})");
            }
            Outcome::Done(r) => {
                let _ = write!(s, "{m} k={k}: policy {} best {}", r.policy, r.best);
                match &r.report {
                    Some(rep) => {
                        let _ = write!(s, " rmse {:.6} avg_rmse {:.6} grades {}", rep.rmse, rep.avg_rmse, rep.n_grades);
                    }
                    None => s.push_str(" no predictions"),
                }
                let _ = writeln!(s, " unpredicted {}", r.output.unpredicted);
                if !r.output.chosen_ranks.is_empty() {
                    let ranks: Vec<String> = r.output.chosen_ranks.iter().map(|(c, l)| format!("{c}={l}")).collect();
                    let _ = writeln!(s, "  latent dimensions {}", ranks.join(" "));
                }
            }
        }
    }
    s
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let args = RunArgs {
        common: a.common,
        ..RunArgs::default()
    };
    let cfg = resolve(&args, &[])?;
    set_threads(cfg.jobs);
    let data = load(&cfg)?;
    let splits = test_splits(&cfg, &data)?;
    let stats: Vec<_> = splits.iter().map(SplitData::statistics).collect();
    write_stats_text(std::io::stdout().lock(), &stats)?;
    if let Some(out) = &a.output_dir {
        write_stats(out, &splits)?;
    }
    Ok(())
}

pub fn grid(a: GridArgs) -> Result<()> {
    let method: Method = a.method.parse().map_err(|e: gradepred::Error| usage(e.to_string()))?;
    let mut cfg = resolve(&a.run, &[method])?;
    cfg.methods = vec![method];
    let spec = &cfg.grids[&method];
    if cfg.input.is_none() {
        let mut out = std::io::stdout().lock();
        writeln!(out, "method {method}")?;
        writeln!(out, "policy {}", spec.policy)?;
        for (name, values) in &spec.params {
            let vs: Vec<String> = values.iter().map(f64::to_string).collect();
            writeln!(out, "{name} ({} values): {}", values.len(), vs.join(", "))?;
        }
        writeln!(out, "cells {}", spec.n_cells())?;
        return Ok(());
    }
    execute(&cfg)?;
    let written: Vec<PathBuf> = cfg
        .ks
        .iter()
        .map(|k| cfg.output_dir.join(format!("grid_{method}_k{k}.csv")))
        .filter(|p| p.exists())
        .collect();
    let mut out = std::io::stdout().lock();
    for p in written {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}
