//! Plain-text model files.
//!
//! A file starts with `% key value` header lines naming the model kind,
//! hyperparameters and seed, followed by one comma-separated line per
//! coefficient (linear) or per student and course (factorization):
//!
//! ```text
//! % model linear          % model mf
//! % target T              % rank 2
//! % bias 0.25             % mu 3.1
//! c1,0.5                  s,s1,0.1,0.02,-0.3
//!                         c,c1,-0.2,0.4,0.01
//! ```
//!
//! Numbers are written in shortest round-trip form, so reading a file back
//! gives bit-identical values.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::types::{IdIndex, LinearModel, MfModel};

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Mf(MfModel),
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(|c: char| c == ',' || c.is_whitespace()) {
        return Err(Error::param("model", format!("id {id:?} cannot be written as text")));
    }
    Ok(())
}

pub fn write_linear_model<W: Write>(mut w: W, m: &LinearModel) -> Result<()> {
    check_id(&m.target_course)?;
    writeln!(w, "% model linear")?;
    writeln!(w, "% target {}", m.target_course)?;
    writeln!(w, "% lambda1 {}", m.lambda1)?;
    writeln!(w, "% lambda2 {}", m.lambda2)?;
    writeln!(w, "% nonneg {}", m.nonneg)?;
    writeln!(w, "% centered {}", m.centered)?;
    writeln!(w, "% converged {}", m.converged)?;
    writeln!(w, "% sweeps {}", m.sweeps)?;
    writeln!(w, "% bias {}", m.bias)?;
    for (c, v) in &m.weights {
        check_id(c)?;
        writeln!(w, "{c},{v}")?;
    }
    Ok(())
}

pub fn write_mf_model<W: Write>(mut w: W, m: &MfModel) -> Result<()> {
    writeln!(w, "% model mf")?;
    writeln!(w, "% rank {}", m.rank)?;
    writeln!(w, "% lambda {}", m.lambda)?;
    writeln!(w, "% global_bias {}", m.use_global_bias)?;
    writeln!(w, "% seed {}", m.seed)?;
    writeln!(w, "% mu {}", m.mu)?;
    let mut line = |tag: &str, id: &str, bias: f64, factors: &[f64]| -> Result<()> {
        check_id(id)?;
        write!(w, "{tag},{id},{bias}")?;
        for f in factors {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
        Ok(())
    };
    for (i, id) in m.students.ids().iter().enumerate() {
        line("s", id, m.student_bias[i], m.student_factors(i))?;
    }
    for (j, id) in m.courses.ids().iter().enumerate() {
        line("c", id, m.course_bias[j], m.course_factors(j))?;
    }
    Ok(())
}

/// Reads either kind of model file.
pub fn read_model<R: BufRead>(r: R) -> Result<Model> {
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut body = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let (n, line) = (n + 1, line?);
        if let Some(head) = line.strip_prefix("% ") {
            let (k, v) = head.split_once(' ').ok_or_else(|| err(n, "header needs a value".into()))?;
            if header.insert(k.to_string(), (n, v.to_string())).is_some() {
                return Err(err(n, format!("repeated header {k:?}")));
            }
        } else if !line.is_empty() {
            body.push((n, line));
        }
    }
    let get = |k: &str| -> Result<(usize, &str)> {
        header
            .get(k)
            .map(|(n, v)| (*n, v.as_str()))
            .ok_or_else(|| err(0, format!("missing header {k:?}")))
    };
    fn parse<T: std::str::FromStr>(n: usize, s: &str) -> Result<T> {
        s.parse().map_err(|_| Error::Parse {
            line: n,
            msg: format!("bad value {s:?}"),
        })
    }
    macro_rules! value {
        ($k:expr) => {{
            let (n, v) = get($k)?;
            parse(n, v)?
        }};
    }

    match get("model")?.1 {
        "linear" => {
            let mut weights = BTreeMap::new();
            for (n, line) in &body {
                let (c, v) = line.split_once(',').ok_or_else(|| err(*n, "expected course,weight".into()))?;
                if weights.insert(c.to_string(), parse::<f64>(*n, v)?).is_some() {
                    return Err(err(*n, format!("repeated course {c:?}")));
                }
            }
            Ok(Model::Linear(LinearModel {
                target_course: get("target")?.1.to_string(),
                bias: value!("bias"),
                weights,
                nonneg: value!("nonneg"),
                centered: value!("centered"),
                lambda1: value!("lambda1"),
                lambda2: value!("lambda2"),
                converged: value!("converged"),
                sweeps: value!("sweeps"),
            }))
        }
        "mf" => {
            let rank: usize = value!("rank");
            let (mut students, mut courses) = (IdIndex::new(), IdIndex::new());
            let (mut sb, mut cb, mut p, mut q) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (n, line) in &body {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 3 + rank {
                    return Err(err(*n, format!("expected tag,id,bias and {rank} factors")));
                }
                let (index, bias, factors) = match parts[0] {
                    "s" => (&mut students, &mut sb, &mut p),
                    "c" => (&mut courses, &mut cb, &mut q),
                    t => return Err(err(*n, format!("unknown tag {t:?}"))),
                };
                if index.get(parts[1]).is_some() {
                    return Err(err(*n, format!("repeated id {:?}", parts[1])));
                }
                index.insert(parts[1]);
                bias.push(parse(*n, parts[2])?);
                for f in &parts[3..] {
                    factors.push(parse(*n, f)?);
                }
            }
            Ok(Model::Mf(MfModel {
                mu: value!("mu"),
                student_bias: sb,
                course_bias: cb,
                p,
                q,
                rank,
                lambda: value!("lambda"),
                use_global_bias: value!("global_bias"),
                seed: value!("seed"),
                students,
                courses,
            }))
        }
        other => Err(err(get("model")?.0, format!("unknown model kind {other:?}"))),
    }
}
