//! Run configuration: a TOML file merged with command-line flags.
//!
//! ```toml
//! input = "records.csv"
//! output_dir = "out"
//! target_term = 15
//! k = [5, 7, 9]
//! methods = ["csr-rc", "biasonly"]
//! seed = 0
//!
//! [grid.csr-rc]
//! lambda1 = [0.0, 2.5]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gradepred::eval::{GridSpec, Policy, default_grids};
use gradepred::predictors::Method;
use serde::Deserialize;

use crate::{CommonArgs, RunArgs};

/// Bad flags or configuration values (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Nothing survived the student floor (exit code 3).
#[derive(Debug)]
pub struct NoCourses(pub String);

impl fmt::Display for NoCourses {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NoCourses {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    input: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
    target_term: Option<u32>,
    k: Option<Vec<usize>>,
    methods: Option<Vec<String>>,
    policy: Option<String>,
    seed: Option<u64>,
    jobs: Option<usize>,
    clamp: Option<bool>,
    min_students: Option<usize>,
    epochs: Option<usize>,
    star_ranks: Option<Vec<usize>>,
    common_subset: Option<bool>,
    /// method → parameter → values
    grid: Option<BTreeMap<String, BTreeMap<String, Vec<f64>>>>,
}

fn load_file(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub target_term: Option<u32>,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub grids: BTreeMap<Method, GridSpec>,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub clamp: bool,
    pub min_students: usize,
    pub epochs: Option<usize>,
    pub star_ranks: Vec<usize>,
    pub common_subset: bool,
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse::<Method>().map_err(|e| usage(e.to_string()))
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad grid value {v:?}"))))
        .collect()
}

/// Parses `method.param=v1,v2`.
fn parse_grid_flag(s: &str) -> Result<(Method, String, Vec<f64>)> {
    let (key, values) = s
        .split_once('=')
        .ok_or_else(|| usage(format!("grid override {s:?} needs METHOD.PARAM=VALUES")))?;
    let (method, param) = key
        .split_once('.')
        .ok_or_else(|| usage(format!("grid override {s:?} needs METHOD.PARAM=VALUES")))?;
    Ok((parse_method(method)?, param.trim().to_string(), parse_values(values)?))
}

/// Shared resolution for `run`, `stats` and `grid`.
pub fn resolve(args: &RunArgs, extra_methods: &[Method]) -> Result<RunConfig> {
    let c: &CommonArgs = &args.common;
    let file = load_file(c.config.as_deref())?;
    let input = c.input.clone().or(file.input);

    let mut methods: Vec<Method> = if !args.methods.is_empty() {
        args.methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()?
    } else if let Some(ms) = &file.methods {
        ms.iter().map(|m| parse_method(m)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    for m in extra_methods {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }

    let policy = match args.policy.as_deref().or(file.policy.as_deref()) {
        Some(p) => Some(p.parse::<Policy>().map_err(|e| usage(e.to_string()))?),
        None => None,
    };

    // A policy given here applies to every method; otherwise each keeps its default.
    let mut grids: BTreeMap<Method, GridSpec> = BTreeMap::new();
    for &m in &methods {
        let mut g = default_grids(m);
        if let Some(p) = policy {
            g.policy = p;
        }
        grids.insert(m, g);
    }
    let mut overrides: Vec<(Method, String, Vec<f64>)> = Vec::new();
    for (method, params) in file.grid.unwrap_or_default() {
        let m = parse_method(&method)?;
        for (param, values) in params {
            overrides.push((m, param, values));
        }
    }
    for s in &args.grids {
        overrides.push(parse_grid_flag(s)?);
    }
    for (m, param, values) in overrides {
        if let Some(g) = grids.get_mut(&m) {
            g.set(&param, values).map_err(|e| usage(format!("{m}: {e}")))?;
        }
    }

    let ks = if !c.k.is_empty() {
        c.k.clone()
    } else {
        file.k.unwrap_or_else(|| vec![5])
    };
    if ks.is_empty() {
        return Err(usage("no prior-course floor given"));
    }
    let jobs = c.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let star_ranks = file.star_ranks.unwrap_or_else(|| gradepred::eval::RANK_GRID.to_vec());
    if star_ranks.is_empty() {
        return Err(usage("star_ranks must not be empty"));
    }
    Ok(RunConfig {
        input,
        output_dir: args.output_dir.clone().or(file.output_dir).unwrap_or_else(|| PathBuf::from("out")),
        cache_dir: c.cache_dir.clone().or(file.cache_dir),
        target_term: c.target_term.or(file.target_term),
        ks,
        methods,
        grids,
        seed: args.seed.or(file.seed).unwrap_or(0),
        jobs,
        clamp: args.clamp || file.clamp.unwrap_or(false),
        min_students: c.min_students.or(file.min_students).unwrap_or(gradepred::dataset::MIN_STUDENTS),
        epochs: args.epochs.or(file.epochs),
        star_ranks,
        common_subset: args.common_subset || file.common_subset.unwrap_or(false),
    })
}
