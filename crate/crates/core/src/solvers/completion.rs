//! Biased low-rank matrix completion fitted by seeded stochastic gradient
//! descent over the observed entries only:
//!
//! ```text
//! minimize  Σ_Ω (g_ij − μ − sb_i − cb_j − p_i·q_j)² + λ(‖P‖² + ‖Q‖² + ‖sb‖² + ‖cb‖²)
//! ```
//!
//! Each row's (column's) penalty is spread evenly over that row's (column's)
//! observed entries, so one pass over Ω follows the gradient of exactly the
//! objective above. The learning rate is fixed; training stops after the
//! epoch budget or once an epoch changes the objective by a relative amount
//! below the tolerance.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{MfModel, SparseGradeMatrix};

/// Half-width of the uniform factor initialization.
pub const INIT_SCALE: f64 = 0.005;


#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Early stop when the relative objective decrease of an epoch is below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions {
            learning_rate: 0.005,
            epochs: 1000,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionProblem<'a> {
    pub matrix: &'a SparseGradeMatrix,
    /// Latent dimension; 0 fits biases only.
    pub rank: usize,
    pub lambda: f64,
    pub use_global_bias: bool,
    pub sgd: SgdOptions,
}

#[derive(Debug, Clone)]
pub struct CompletionReport {
    pub objective: f64,
    /// Objective after each epoch.
    pub trace: Vec<f64>,
    pub epochs: usize,
}

impl CompletionProblem<'_> {
    fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::param("lambda", format!("{} must be finite and >= 0", self.lambda)));
        }
        let lr = self.sgd.learning_rate;
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::param("learning_rate", format!("{lr} must be positive")));
        }
        if self.matrix.nnz() == 0 {
            return Err(Error::Empty("completion problem with no observed entries".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Params {
    mu: f64,
    sb: Vec<f64>,
    cb: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

struct Entries {
    rows: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

fn objective(entries: &Entries, params: &Params, rank: usize, lambda: f64) -> f64 {
    let mut data = 0.0;
    for k in 0..entries.values.len() {
        let (i, j) = (entries.rows[k], entries.cols[k]);
        let dot: f64 = (0..rank).map(|f| params.p[i * rank + f] * params.q[j * rank + f]).sum();
        let e = entries.values[k] - params.mu - params.sb[i] - params.cb[j] - dot;
        data += e * e;
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    data + lambda * (sq(&params.p) + sq(&params.q) + sq(&params.sb) + sq(&params.cb))
}

pub fn solve_completion(problem: &CompletionProblem<'_>) -> Result<(MfModel, CompletionReport)> {
    problem.validate()?;
    let matrix = problem.matrix;
    let (n, m, rank, lambda) = (matrix.n_rows(), matrix.n_cols(), problem.rank, problem.lambda);

    let mut entries = Entries {
        rows: Vec::with_capacity(matrix.nnz()),
        cols: Vec::with_capacity(matrix.nnz()),
        values: Vec::with_capacity(matrix.nnz()),
    };
    for (i, j, v) in matrix.entries() {
        entries.rows.push(i);
        entries.cols.push(j);
        entries.values.push(v);
    }
    let (row_counts, col_counts) = matrix.counts();
    let row_share: Vec<f64> = row_counts.iter().map(|&c| lambda / c.max(1) as f64).collect();
    let col_share: Vec<f64> = col_counts.iter().map(|&c| lambda / c.max(1) as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(problem.sgd.seed);
    let mut params = Params {
        mu: if problem.use_global_bias {
            entries.values.iter().sum::<f64>() / entries.values.len() as f64
        } else {
            0.0
        },
        sb: vec![0.0; n],
        cb: vec![0.0; m],
        p: (0..n * rank).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect(),
        q: (0..m * rank).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect(),
    };

    let step = 2.0 * problem.sgd.learning_rate;
    let mut current = objective(&entries, &params, rank, lambda);
    let mut order: Vec<usize> = (0..entries.values.len()).collect();
    let mut trace = Vec::with_capacity(problem.sgd.epochs);
    let mut pi_old = vec![0.0; rank];
    let mut epochs = 0;

    while epochs < problem.sgd.epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for &k in &order {
            let (i, j, g) = (entries.rows[k], entries.cols[k], entries.values[k]);
            let (pi, qj) = (i * rank, j * rank);
            let dot: f64 = (0..rank).map(|f| params.p[pi + f] * params.q[qj + f]).sum();
            let e = g - params.mu - params.sb[i] - params.cb[j] - dot;
            if problem.use_global_bias {
                params.mu += step * e;
            }
            params.sb[i] += step * (e - row_share[i] * params.sb[i]);
            params.cb[j] += step * (e - col_share[j] * params.cb[j]);
            pi_old.copy_from_slice(&params.p[pi..pi + rank]);
            for f in 0..rank {
                params.p[pi + f] += step * (e * params.q[qj + f] - row_share[i] * pi_old[f]);
                params.q[qj + f] += step * (e * pi_old[f] - col_share[j] * params.q[qj + f]);
            }
        }
        let next = objective(&entries, &params, rank, lambda);
        if !next.is_finite() {
            return Err(Error::Diverged(problem.sgd.learning_rate));
        }
        let relative = (current - next).abs() / current.max(f64::MIN_POSITIVE);
        current = next;
        trace.push(current);
        if relative < problem.sgd.tolerance {
            break;
        }
    }

    let model = MfModel {
        mu: params.mu,
        student_bias: params.sb,
        course_bias: params.cb,
        p: params.p,
        q: params.q,
        rank,
        lambda,
        use_global_bias: problem.use_global_bias,
        seed: problem.sgd.seed,
        students: matrix.row_ids().clone(),
        courses: matrix.col_ids().clone(),
    };
    Ok((
        model,
        CompletionReport {
            objective: current,
            trace,
            epochs,
        },
    ))
}

/// Exact objective of `model` on `problem`.
pub fn objective_completion(problem: &CompletionProblem<'_>, model: &MfModel) -> Result<f64> {
    let (n, m, l) = (problem.matrix.n_rows(), problem.matrix.n_cols(), model.rank);
    if model.student_bias.len() != n
        || model.course_bias.len() != m
        || model.p.len() != n * l
        || model.q.len() != m * l
    {
        return Err(Error::Dimension(format!(
            "model ({} students, {} courses, rank {l}) does not fit a {n}x{m} matrix",
            model.student_bias.len(),
            model.course_bias.len()
        )));
    }
    let mut data = 0.0;
    for (i, j, v) in problem.matrix.entries() {
        let e = v - model.predict(i, j);
        data += e * e;
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    Ok(data
        + problem.lambda
            * (sq(&model.p) + sq(&model.q) + sq(&model.student_bias) + sq(&model.course_bias)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MatrixBuilder;

    fn matrix(cells: &[(&str, &str, f64)]) -> SparseGradeMatrix {
        let mut b = MatrixBuilder::new();
        for &(s, c, v) in cells {
            b.push(s, c, v);
        }
        b.build().unwrap()
    }

    fn problem(m: &SparseGradeMatrix, rank: usize, lambda: f64) -> CompletionProblem<'_> {
        CompletionProblem {
            matrix: m,
            rank,
            lambda,
            use_global_bias: true,
            sgd: SgdOptions::default(),
        }
    }

    #[test]
    fn constant_matrix_is_global_mean() {
        let mut cells = Vec::new();
        for s in ["a", "b", "c"] {
            for c in ["x", "y"] {
                cells.push((s, c, 3.0));
            }
        }
        let m = matrix(&cells);
        let (model, rep) = solve_completion(&problem(&m, 0, 0.0)).unwrap();
        assert_eq!(model.mu, 3.0);
        assert!(model.student_bias.iter().all(|&b| b == 0.0));
        assert!(model.course_bias.iter().all(|&b| b == 0.0));
        assert_eq!(rep.objective, 0.0);
    }

    #[test]
    fn default_rate_trace_does_not_increase() {
        let mut cells = Vec::new();
        for i in 0..12 {
            for j in 0..6 {
                if (i + j) % 4 != 0 {
                    let g = 2.0 + 0.1 * i as f64 - 0.15 * j as f64 + 0.05 * ((i * j) % 3) as f64;
                    cells.push((format!("s{i}"), format!("c{j}"), g));
                }
            }
        }
        let cells: Vec<(&str, &str, f64)> = cells.iter().map(|(s, c, g)| (s.as_str(), c.as_str(), *g)).collect();
        let m = matrix(&cells);
        for (rank, lambda) in [(0, 0.1), (2, 0.1), (2, 1.0)] {
            let (_, rep) = solve_completion(&problem(&m, rank, lambda)).unwrap();
            // Fixed-step SGD jitters near the optimum; a rate that is too
            // large oscillates on the scale of the descent itself.
            let drop = rep.trace[0] - rep.trace.last().unwrap();
            assert!(drop > 0.0);
            for w in rep.trace.windows(2) {
                assert!(w[1] - w[0] <= 1e-3 * drop, "rank {rank} lambda {lambda}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let m = matrix(&[("a", "x", 2.0)]);
        let p = problem(&m, 1, 0.0);
        let mut model = solve_completion(&p).unwrap().0;
        model.mu = 0.0;
        model.student_bias = vec![0.0];
        model.course_bias = vec![0.0];
        model.p = vec![0.0];
        model.q = vec![0.0];
        assert_eq!(objective_completion(&p, &model).unwrap(), 4.0);

        model.p = vec![1.0];
        model.q = vec![2.0];
        assert_eq!(objective_completion(&p, &model).unwrap(), 0.0);
        let penalized = problem(&m, 1, 0.5);
        assert_eq!(objective_completion(&penalized, &model).unwrap(), 2.5);

        model.q = vec![];
        assert!(objective_completion(&p, &model).is_err());
    }

    #[test]
    fn no_global_bias_keeps_mu_zero() {
        let m = matrix(&[("a", "x", 2.0), ("a", "y", 3.0), ("b", "x", 4.0)]);
        let mut p = problem(&m, 1, 0.1);
        p.use_global_bias = false;
        let (model, _) = solve_completion(&p).unwrap();
        assert_eq!(model.mu, 0.0);
    }

    #[test]
    fn same_seed_same_model() {
        let m = matrix(&[("a", "x", 2.0), ("a", "y", 3.0), ("b", "x", 4.0), ("b", "z", 1.0)]);
        let p = problem(&m, 2, 0.1);
        let (a, _) = solve_completion(&p).unwrap();
        let (b, _) = solve_completion(&p).unwrap();
        assert_eq!(a, b);
        let mut other = p;
        other.sgd.seed = 7;
        assert_ne!(solve_completion(&other).unwrap().0.p, a.p);
    }

    #[test]
    fn divergence_names_learning_rate() {
        let m = matrix(&[("a", "x", 4.0), ("a", "y", 0.0), ("b", "x", 1.0), ("b", "y", 3.0)]);
        let mut p = problem(&m, 2, 0.0);
        p.sgd.learning_rate = 1e150;
        match solve_completion(&p) {
            Err(Error::Diverged(lr)) => assert_eq!(lr, 1e150),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_and_negative_lambda() {
        let empty = MatrixBuilder::new().build().unwrap();
        assert!(solve_completion(&problem(&empty, 0, 0.0)).is_err());
        let m = matrix(&[("a", "x", 2.0)]);
        assert!(solve_completion(&problem(&m, 0, -1.0)).is_err());
    }
}
