//! Entropic optimal transport solvers.
//!
//! The balanced solver runs Sinkhorn scaling in the log domain (potentials
//! instead of scaling vectors) so that small epsilon and large costs never
//! underflow. The row-constrained variant drops the column marginal and is
//! used by the cross-attention equivalence checker.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix};

/// Pairwise cost used to build the transport problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// Squared euclidean distance.
    SqL2,
    /// Negative dot product.
    NegDot,
}

impl CostKind {
    pub fn parse(s: &str) -> Result<CostKind> {
        match s {
            "sq_l2" => Ok(CostKind::SqL2),
            "neg_dot" => Ok(CostKind::NegDot),
            other => Err(Error::argument(format!("unknown OT cost '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CostKind::SqL2 => "sq_l2",
            CostKind::NegDot => "neg_dot",
        }
    }
}

/// Configuration for Sinkhorn-based transport.
///
/// When `relative_epsilon` is set (the default), the effective regularizer is
/// `epsilon * mean(|cost|)`, so the default `epsilon = 0.1` means one tenth of
/// the mean cost magnitude. With `relative_epsilon = false`, `epsilon` is used
/// as given.
#[derive(Debug, Clone)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
    pub cost: CostKind,
    /// Rescale OT-aggregated rows by the prototype count (column mass is
    /// 1/C, so the raw barycenter is scaled down by C). Off by default to
    /// keep the literal transport-weighted sum.
    pub normalize_columns: bool,
    pub relative_epsilon: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iters: 1000,
            marginal_tol: 1e-6,
            cost: CostKind::SqL2,
            normalize_columns: false,
            relative_epsilon: true,
        }
    }
}

impl SinkhornConfig {
    /// Resolve the effective epsilon for a concrete cost matrix.
    ///
    /// Squared-L2 costs are non-negative, so the scale is the literal mean
    /// cost. Negative-dot costs center near zero and Sinkhorn is invariant
    /// to constant cost shifts, so their scale is the shift-invariant mean
    /// absolute deviation.
    pub fn effective_epsilon(&self, cost: &Matrix) -> f64 {
        if !self.relative_epsilon {
            return self.epsilon;
        }
        let n = (cost.rows() * cost.cols()) as f64;
        let basis = match self.cost {
            CostKind::SqL2 => cost.data().iter().sum::<f64>() / n,
            CostKind::NegDot => {
                let mean = cost.data().iter().sum::<f64>() / n;
                cost.data().iter().map(|v| (v - mean).abs()).sum::<f64>() / n
            }
        };
        if basis > 0.0 {
            self.epsilon * basis
        } else {
            // Degenerate (constant) cost: any positive epsilon yields the
            // product plan.
            self.epsilon
        }
    }
}

/// A solved transport plan with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub iterations: usize,
    /// Max absolute deviation of row and column sums from the prescribed
    /// marginals after the final iteration.
    pub residual: f64,
}

fn marginal_residual(plan: &Matrix, row_m: &[f64], col_m: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..plan.rows() {
        let s: f64 = plan.row(i).iter().sum();
        worst = worst.max((s - row_m[i]).abs());
    }
    for j in 0..plan.cols() {
        let mut s = 0.0;
        for i in 0..plan.rows() {
            s += plan.get(i, j);
        }
        worst = worst.max((s - col_m[j]).abs());
    }
    worst
}

/// Balanced entropic OT between two discrete measures.
///
/// Solves min <C, T> + eps * sum T log T subject to T 1 = row_marginal and
/// T' 1 = col_marginal, via log-domain Sinkhorn iterations. Fails with a
/// convergence error carrying the achieved residual if `marginal_tol` is not
/// met within `max_iters`.
pub fn sinkhorn_balanced(
    cost: &Matrix,
    row_marginal: &[f64],
    col_marginal: &[f64],
    epsilon: f64,
    max_iters: usize,
    marginal_tol: f64,
) -> Result<TransportPlan> {
    let (m, k) = (cost.rows(), cost.cols());
    if row_marginal.len() != m || col_marginal.len() != k {
        return Err(Error::argument("marginal lengths do not match cost shape"));
    }
    if epsilon <= 0.0 {
        return Err(Error::argument("sinkhorn epsilon must be positive"));
    }
    let log_a: Vec<f64> = row_marginal.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = col_marginal.iter().map(|v| v.ln()).collect();

    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; k];
    let mut buf = vec![0.0f64; m.max(k)];

    let build_plan = |f: &[f64], g: &[f64]| -> Matrix {
        let mut plan = Matrix::zeros(m, k);
        for i in 0..m {
            for j in 0..k {
                plan.set(i, j, ((f[i] + g[j] - cost.get(i, j)) / epsilon).exp());
            }
        }
        plan
    };

    let mut last_residual = f64::INFINITY;
    for iter in 0..max_iters {
        // Row update: f_i = eps*log a_i - eps*lse_j((g_j - C_ij)/eps)
        for i in 0..m {
            for j in 0..k {
                buf[j] = (g[j] - cost.get(i, j)) / epsilon;
            }
            f[i] = epsilon * log_a[i] - epsilon * logsumexp(&buf[..k])?;
        }
        // Column update.
        for j in 0..k {
            for i in 0..m {
                buf[i] = (f[i] - cost.get(i, j)) / epsilon;
            }
            g[j] = epsilon * log_b[j] - epsilon * logsumexp(&buf[..m])?;
        }
        let plan = build_plan(&f, &g);
        last_residual = marginal_residual(&plan, row_marginal, col_marginal);
        if last_residual < marginal_tol {
            return Ok(TransportPlan {
                plan,
                iterations: iter + 1,
                residual: last_residual,
            });
        }
    }
    Err(Error::Convergence {
        message: format!("sinkhorn did not reach marginal tolerance {marginal_tol:.1e}"),
        residual: last_residual,
    })
}

/// Row-constrained entropic OT: only the row sums are prescribed, the column
/// marginal is left free. Iterated proportional fitting on the rows, run until
/// the row residual drops below `residual_target`.
pub fn sinkhorn_row_constrained(
    cost: &Matrix,
    row_mass: f64,
    epsilon: f64,
    max_iters: usize,
    residual_target: f64,
) -> Result<TransportPlan> {
    let (m, k) = (cost.rows(), cost.cols());
    if epsilon <= 0.0 {
        return Err(Error::argument("epsilon must be positive"));
    }
    let log_mass = row_mass.ln();
    let mut f = vec![0.0f64; m];
    let mut buf = vec![0.0f64; k];
    let mut plan = Matrix::zeros(m, k);
    let mut residual = f64::INFINITY;
    for iter in 0..max_iters {
        for i in 0..m {
            for j in 0..k {
                buf[j] = -cost.get(i, j) / epsilon;
            }
            f[i] = log_mass - logsumexp(&buf)?;
        }
        for i in 0..m {
            for j in 0..k {
                plan.set(i, j, (f[i] - cost.get(i, j) / epsilon).exp());
            }
        }
        residual = 0.0f64;
        for i in 0..m {
            let s: f64 = plan.row(i).iter().sum();
            residual = residual.max((s - row_mass).abs());
        }
        if residual < residual_target {
            return Ok(TransportPlan {
                plan,
                iterations: iter + 1,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        message: "row-constrained OT did not reach residual target".into(),
        residual,
    })
}

/// Build the pairwise cost matrix between two row sets.
pub fn cost_matrix(a: &Matrix, b: &Matrix, kind: CostKind) -> Result<Matrix> {
    match kind {
        CostKind::SqL2 => crate::numerics::pairwise_sq_l2(a, b),
        CostKind::NegDot => {
            if a.cols() != b.cols() {
                return Err(Error::argument("cost dim mismatch"));
            }
            let mut out = Matrix::zeros(a.rows(), b.rows());
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    out.set(i, j, -crate::numerics::dot(a.row(i), b.row(j)));
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn uniform_marginals(m: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![1.0 / m as f64; m], vec![1.0 / k as f64; k])
    }

    #[test]
    fn zero_cost_gives_product_plan() {
        let cost = Matrix::zeros(3, 2);
        let (a, b) = uniform_marginals(3, 2);
        let sol = sinkhorn_balanced(&cost, &a, &b, 0.5, 100, 1e-10).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((sol.plan.get(i, j) - 1.0 / 6.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn huge_epsilon_approaches_product_plan() {
        let mut rng = SeededRng::new(5);
        let data: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let cost = Matrix::from_vec(4, 3, data).unwrap();
        let max_cost = cost.data().iter().cloned().fold(0.0f64, f64::max);
        let (a, b) = uniform_marginals(4, 3);
        let sol = sinkhorn_balanced(&cost, &a, &b, 1e6 * max_cost, 500, 1e-9).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((sol.plan.get(i, j) - 1.0 / 12.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn marginals_within_tolerance() {
        let mut rng = SeededRng::new(17);
        let data: Vec<f64> = (0..80).map(|_| rng.uniform() * 3.0).collect();
        let cost = Matrix::from_vec(20, 4, data).unwrap();
        let (a, b) = uniform_marginals(20, 4);
        let sol = sinkhorn_balanced(&cost, &a, &b, 0.2, 5000, 1e-8).unwrap();
        assert!(sol.residual < 1e-8);
        for v in sol.plan.data() {
            assert!(*v > 0.0);
        }
    }

    #[test]
    fn objective_not_worse_than_product_plan() {
        let mut rng = SeededRng::new(23);
        let data: Vec<f64> = (0..80).map(|_| rng.uniform() * 2.0).collect();
        let cost = Matrix::from_vec(20, 4, data).unwrap();
        let (a, b) = uniform_marginals(20, 4);
        let eps = 0.05;
        let sol = sinkhorn_balanced(&cost, &a, &b, eps, 10000, 1e-9).unwrap();
        let obj = |plan: &Matrix| -> f64 {
            let mut s = 0.0;
            for i in 0..20 {
                for j in 0..4 {
                    let t = plan.get(i, j);
                    s += cost.get(i, j) * t + eps * t * t.ln();
                }
            }
            s
        };
        let mut product = Matrix::zeros(20, 4);
        for i in 0..20 {
            for j in 0..4 {
                product.set(i, j, a[i] * b[j]);
            }
        }
        assert!(obj(&sol.plan) <= obj(&product) + 1e-9);
    }

    #[test]
    fn convergence_failure_carries_residual() {
        let mut rng = SeededRng::new(3);
        let data: Vec<f64> = (0..20).map(|_| rng.uniform() * 10.0).collect();
        let cost = Matrix::from_vec(5, 4, data).unwrap();
        let (a, b) = uniform_marginals(5, 4);
        match sinkhorn_balanced(&cost, &a, &b, 0.01, 1, 1e-12) {
            Err(Error::Convergence { residual, .. }) => assert!(residual.is_finite()),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn row_constrained_matches_row_softmax() {
        let mut rng = SeededRng::new(9);
        let data: Vec<f64> = (0..24).map(|_| rng.normal()).collect();
        let logits = Matrix::from_vec(6, 4, data).unwrap();
        // cost = -logits * eps so that -cost/eps = logits
        let eps = 1.7;
        let cost = logits.scale(-eps);
        let sol = sinkhorn_row_constrained(&cost, 1.0 / 6.0, eps, 100, 1e-12).unwrap();
        let sm = crate::numerics::row_softmax(&logits).unwrap();
        for i in 0..6 {
            for j in 0..4 {
                assert!((6.0 * sol.plan.get(i, j) - sm.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
