//! Student-based collaborative filtering with significance weighting.

use crate::dataset::TargetQuery;
use crate::error::{Error, Result};
use crate::types::CourseDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct SbcfPrediction {
    pub value: f64,
    /// Peers with positive similarity.
    pub neighbors: usize,
    /// The target's prior grades have zero variance, so no similarity is
    /// defined and the prediction is the target's mean grade.
    pub degenerate_target: bool,
}

/// Pearson correlation of two equally long samples; `None` if either has
/// zero variance or fewer than two points.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Predicts from the peers in `peers` (the uncentered training dataset of
/// the target course). Every peer with positive Pearson similarity over at
/// least two commonly taken courses contributes; the neighborhood term is
/// scaled by `min(r, nbr) / r`.
pub fn sbcf_predict(query: &TargetQuery, peers: &CourseDataset, r: usize) -> Result<SbcfPrediction> {
    if r == 0 {
        return Err(Error::param("r", "must be at least 1"));
    }
    if peers.is_centered() {
        return Err(Error::param("peers", "neighborhood prediction needs uncentered grades"));
    }
    let target_mean = query.prior_gpa()?;
    let first = query.prior[0].1;
    let degenerate_target = query.prior.iter().all(|(_, g)| *g == first);
    if degenerate_target {
        return Ok(SbcfPrediction {
            value: target_mean,
            neighbors: 0,
            degenerate_target,
        });
    }

    // Target grade per peer-design column, when the target took that course.
    let cols = peers.design.col_ids();
    let mut target_by_col = vec![None; cols.len()];
    for (c, g) in &query.prior {
        if let Some(j) = cols.get(c) {
            target_by_col[j] = Some(*g);
        }
    }

    let (mut num, mut den, mut nbr) = (0.0, 0.0, 0usize);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for i in 0..peers.n_rows() {
        xs.clear();
        ys.clear();
        for (j, v) in peers.design.row(i) {
            if let Some(g) = target_by_col[j] {
                xs.push(g);
                ys.push(v);
            }
        }
        let Some(sim) = pearson(&xs, &ys) else { continue };
        if sim <= 0.0 {
            continue;
        }
        let values = peers.design.row_values(i);
        let peer_mean = values.iter().sum::<f64>() / values.len() as f64;
        num += (peers.targets[i] - peer_mean) * sim;
        den += sim;
        nbr += 1;
    }
    if nbr == 0 {
        return Ok(SbcfPrediction {
            value: target_mean,
            neighbors: 0,
            degenerate_target,
        });
    }
    let shrink = r.min(nbr) as f64 / r as f64;
    Ok(SbcfPrediction {
        value: target_mean + shrink * num / den,
        neighbors: nbr,
        degenerate_target,
    })
}
