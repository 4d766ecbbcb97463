//! Slide-level aggregation: variable-length patch embedding sets to
//! fixed-length summaries against a prototype bank.
//!
//! Three backends: GMM-EM (preferred; summary row = [pi, mu, sigma], width
//! 2D+1), entropic OT (transport-weighted barycenters), and hard clustering
//! (per-prototype means). All are set functions: permuting the input patches
//! leaves the summary unchanged.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, sq_l2, Matrix};
use crate::prototypes::{nearest_prototype, PrototypeBank};
use crate::sinkhorn::{cost_matrix, sinkhorn_balanced, SinkhornConfig};

const LN_2PI: f64 = 1.8378770664093453;

/// One slide's set of patch embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet {
    pub slide_id: String,
    embeddings: Matrix,
}

impl PatchEmbeddingSet {
    pub fn new(slide_id: impl Into<String>, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() == 0 {
            return Err(Error::argument("patch set must contain at least one patch"));
        }
        if !embeddings.is_finite() {
            return Err(Error::argument("patch embeddings must be finite"));
        }
        Ok(PatchEmbeddingSet {
            slide_id: slide_id.into(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty sets
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

/// Which aggregation produced a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationBackend {
    Gmm,
    Ot,
    Hc,
}

impl AggregationBackend {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(AggregationBackend::Gmm),
            "ot" => Ok(AggregationBackend::Ot),
            "hc" => Ok(AggregationBackend::Hc),
            other => Err(Error::argument(format!(
                "unknown aggregation backend '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationBackend::Gmm => "gmm",
            AggregationBackend::Ot => "ot",
            AggregationBackend::Hc => "hc",
        }
    }
}

/// GMM mixture parameters (diagonal covariance).
#[derive(Debug, Clone)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    pub mu: Matrix,
    pub sigma: Matrix,
}

/// Fixed-length per-slide summary: one row per prototype.
///
/// GMM rows are `[pi_c, mu_c (D), sigma_c (D)]` (width 2D+1); OT and HC rows
/// are D-dimensional aggregated embeddings.
#[derive(Debug, Clone)]
pub struct SlideSummary {
    pub slide_id: String,
    pub backend: AggregationBackend,
    pub rows: Matrix,
    /// Present only for the GMM backend.
    pub gmm: Option<GmmParams>,
}

impl SlideSummary {
    pub fn prototype_count(&self) -> usize {
        self.rows.rows()
    }

    pub fn summary_dim(&self) -> usize {
        self.rows.cols()
    }
}

#[derive(Debug, Clone)]
pub struct GmmConfig {
    /// EM rounds; one is usually sufficient.
    pub em_iters: usize,
    /// Per-dimension floor applied to variances after each M-step.
    pub variance_floor: f64,
    /// Initial isotropic variance (identity covariance scale).
    pub init_sigma: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            em_iters: 1,
            variance_floor: 1e-6,
            init_sigma: 1.0,
        }
    }
}

/// Internal EM state after fitting.
struct EmFit {
    params: GmmParams,
    loglik_trace: Vec<f64>,
}

/// log N(z; mu, diag sigma) for one row pair.
fn log_gauss_diag(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..z.len() {
        let diff = z[d] - mu[d];
        s += sigma[d].ln() + diff * diff / sigma[d];
    }
    -0.5 * (z.len() as f64 * LN_2PI + s)
}

/// One E-step: returns row-stochastic responsibilities and the data
/// log-likelihood under the given parameters.
fn e_step(points: &Matrix, params: &GmmParams) -> (Matrix, f64) {
    let n = points.rows();
    let c_count = params.pi.len();
    let log_pi: Vec<f64> = params.pi.iter().map(|p| p.ln()).collect();
    let mut resp = Matrix::zeros(n, c_count);
    let mut loglik = 0.0;
    let mut buf = vec![0.0f64; c_count];
    for i in 0..n {
        let z = points.row(i);
        for c in 0..c_count {
            buf[c] = log_pi[c] + log_gauss_diag(z, params.mu.row(c), params.sigma.row(c));
        }
        let lse = logsumexp(&buf).expect("finite mixture log densities");
        loglik += lse;
        for c in 0..c_count {
            resp.set(i, c, (buf[c] - lse).exp());
        }
    }
    (resp, loglik)
}

/// M-step with variance flooring. A component whose responsibility mass
/// underflows to zero keeps its previous mean and variance.
fn m_step(points: &Matrix, resp: &Matrix, prev: &GmmParams, floor: f64) -> GmmParams {
    let n = points.rows();
    let d = points.cols();
    let c_count = resp.cols();
    let mut pi = vec![0.0f64; c_count];
    let mut mu = Matrix::zeros(c_count, d);
    let mut sigma = Matrix::zeros(c_count, d);

    let mut mass = vec![0.0f64; c_count];
    for i in 0..n {
        for c in 0..c_count {
            mass[c] += resp.get(i, c);
        }
    }
    for c in 0..c_count {
        pi[c] = mass[c] / n as f64;
        if mass[c] <= 1e-300 {
            mu.row_mut(c).copy_from_slice(prev.mu.row(c));
            sigma.row_mut(c).copy_from_slice(prev.sigma.row(c));
            continue;
        }
        for i in 0..n {
            let q = resp.get(i, c);
            if q == 0.0 {
                continue;
            }
            let z = points.row(i);
            let mrow = mu.row_mut(c);
            for j in 0..d {
                mrow[j] += q * z[j];
            }
        }
        let inv = 1.0 / mass[c];
        for j in 0..d {
            let v = mu.get(c, j) * inv;
            mu.set(c, j, v);
        }
        for i in 0..n {
            let q = resp.get(i, c);
            if q == 0.0 {
                continue;
            }
            let z = points.row(i);
            let srow = sigma.row_mut(c);
            for j in 0..d {
                let diff = z[j] - mu.get(c, j);
                srow[j] += q * diff * diff;
            }
        }
        for j in 0..d {
            let v = (sigma.get(c, j) * inv).max(floor);
            sigma.set(c, j, v);
        }
    }
    GmmParams { pi, mu, sigma }
}

fn run_em(s: &PatchEmbeddingSet, bank: &PrototypeBank, cfg: &GmmConfig) -> Result<EmFit> {
    if s.dim() != bank.dim() {
        return Err(Error::argument(format!(
            "patch dim {} does not match bank dim {}",
            s.dim(),
            bank.dim()
        )));
    }
    if cfg.variance_floor <= 0.0 {
        return Err(Error::argument("variance floor must be positive"));
    }
    let c_count = bank.count();
    let d = s.dim();
    let mut sigma0 = Matrix::zeros(c_count, d);
    for c in 0..c_count {
        for j in 0..d {
            sigma0.set(c, j, cfg.init_sigma);
        }
    }
    let mut params = GmmParams {
        pi: vec![1.0 / c_count as f64; c_count],
        mu: bank.centroids().clone(),
        sigma: sigma0,
    };
    let mut trace = Vec::with_capacity(cfg.em_iters + 1);
    for _ in 0..cfg.em_iters {
        let (resp, loglik) = e_step(s.embeddings(), &params);
        trace.push(loglik);
        params = m_step(s.embeddings(), &resp, &params, cfg.variance_floor);
    }
    // Log-likelihood under the final parameters closes the trace.
    let (_, final_ll) = e_step(s.embeddings(), &params);
    trace.push(final_ll);
    Ok(EmFit {
        params,
        loglik_trace: trace,
    })
}

/// GMM aggregation: EM initialized at uniform weights, prototype means, and
/// isotropic covariance; the summary concatenates the fitted `[pi, mu, sigma]`
/// per prototype (post-M-step parameters).
pub fn aggregate_gmm(
    s: &PatchEmbeddingSet,
    bank: &PrototypeBank,
    cfg: &GmmConfig,
) -> Result<SlideSummary> {
    let fit = run_em(s, bank, cfg)?;
    let c_count = bank.count();
    let d = s.dim();
    let mut rows = Matrix::zeros(c_count, 2 * d + 1);
    for c in 0..c_count {
        rows.set(c, 0, fit.params.pi[c]);
        for j in 0..d {
            rows.set(c, 1 + j, fit.params.mu.get(c, j));
            rows.set(c, 1 + d + j, fit.params.sigma.get(c, j));
        }
    }
    Ok(SlideSummary {
        slide_id: s.slide_id.clone(),
        backend: AggregationBackend::Gmm,
        rows,
        gmm: Some(fit.params),
    })
}

/// Final-iteration responsibilities q(c | z_i): the E-step evaluated at the
/// post-M-step parameters, i.e. exactly Bayes' rule applied to the reported
/// pi, mu, sigma. Row-stochastic.
pub fn gmm_posteriors(
    s: &PatchEmbeddingSet,
    bank: &PrototypeBank,
    cfg: &GmmConfig,
) -> Result<Matrix> {
    let fit = run_em(s, bank, cfg)?;
    let (resp, _) = e_step(s.embeddings(), &fit.params);
    Ok(resp)
}

/// Per-iteration data log-likelihood trace (length em_iters + 1, ending at
/// the final parameters). Non-decreasing while the variance floor is slack.
pub fn gmm_loglik_trace(
    s: &PatchEmbeddingSet,
    bank: &PrototypeBank,
    cfg: &GmmConfig,
) -> Result<Vec<f64>> {
    Ok(run_em(s, bank, cfg)?.loglik_trace)
}

/// OT aggregation: balanced entropic transport from the uniform measure on
/// patches to the uniform measure on prototypes; row c of the summary is the
/// transport-weighted sum sum_i T_ic * z_i. Column mass is 1/C, so rows carry
/// a 1/C scale unless `cfg.normalize_columns` is set.
pub fn aggregate_ot(
    s: &PatchEmbeddingSet,
    bank: &PrototypeBank,
    cfg: &SinkhornConfig,
) -> Result<SlideSummary> {
    if s.dim() != bank.dim() {
        return Err(Error::argument(format!(
            "patch dim {} does not match bank dim {}",
            s.dim(),
            bank.dim()
        )));
    }
    let n = s.len();
    let c_count = bank.count();
    let cost = cost_matrix(s.embeddings(), bank.centroids(), cfg.cost)?;
    let eps = cfg.effective_epsilon(&cost);
    let row_m = vec![1.0 / n as f64; n];
    let col_m = vec![1.0 / c_count as f64; c_count];
    let sol = sinkhorn_balanced(&cost, &row_m, &col_m, eps, cfg.max_iters, cfg.marginal_tol)?;

    let d = s.dim();
    let mut rows = Matrix::zeros(c_count, d);
    for i in 0..n {
        let z = s.embeddings().row(i);
        for c in 0..c_count {
            let t = sol.plan.get(i, c);
            let rrow = rows.row_mut(c);
            for j in 0..d {
                rrow[j] += t * z[j];
            }
        }
    }
    if cfg.normalize_columns {
        rows = rows.scale(c_count as f64);
    }
    Ok(SlideSummary {
        slide_id: s.slide_id.clone(),
        backend: AggregationBackend::Ot,
        rows,
        gmm: None,
    })
}

/// Solve the aggregation transport plan alone (for export and verification).
pub fn ot_plan(
    s: &PatchEmbeddingSet,
    bank: &PrototypeBank,
    cfg: &SinkhornConfig,
) -> Result<Matrix> {
    let cost = cost_matrix(s.embeddings(), bank.centroids(), cfg.cost)?;
    let eps = cfg.effective_epsilon(&cost);
    let row_m = vec![1.0 / s.len() as f64; s.len()];
    let col_m = vec![1.0 / bank.count() as f64; bank.count()];
    Ok(sinkhorn_balanced(&cost, &row_m, &col_m, eps, cfg.max_iters, cfg.marginal_tol)?.plan)
}

/// Hard-clustering aggregation: mean of the patches assigned to each
/// prototype. A prototype with no assigned patches emits its own centroid.
pub fn aggregate_hc(s: &PatchEmbeddingSet, bank: &PrototypeBank) -> Result<SlideSummary> {
    let assignment = assignment_map(s, bank)?;
    let c_count = bank.count();
    let d = s.dim();
    let mut rows = Matrix::zeros(c_count, d);
    let mut counts = vec![0usize; c_count];
    for i in 0..s.len() {
        let c = assignment[i];
        counts[c] += 1;
        let z = s.embeddings().row(i);
        let rrow = rows.row_mut(c);
        for j in 0..d {
            rrow[j] += z[j];
        }
    }
    for c in 0..c_count {
        if counts[c] == 0 {
            rows.row_mut(c).copy_from_slice(bank.centroid(c));
        } else {
            for j in 0..d {
                rows.set(c, j, rows.get(c, j) / counts[c] as f64);
            }
        }
    }
    Ok(SlideSummary {
        slide_id: s.slide_id.clone(),
        backend: AggregationBackend::Hc,
        rows,
        gmm: None,
    })
}

/// Per-patch nearest-prototype indices.
pub fn assignment_map(s: &PatchEmbeddingSet, bank: &PrototypeBank) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(s.len());
    for i in 0..s.len() {
        out.push(nearest_prototype(bank, s.embeddings().row(i))?);
    }
    Ok(out)
}

/// Indices of the k patches closest to the fitted mean of prototype `c`,
/// ascending by distance with index tie-breaking. GMM summaries only.
pub fn top_k_patches(
    s: &PatchEmbeddingSet,
    summary: &SlideSummary,
    c: usize,
    k: usize,
) -> Result<Vec<usize>> {
    let gmm = summary.gmm.as_ref().ok_or_else(|| {
        Error::argument("top_k_patches requires a GMM summary")
    })?;
    if c >= gmm.mu.rows() {
        return Err(Error::argument(format!("prototype index {c} out of range")));
    }
    if k > s.len() {
        return Err(Error::argument(format!(
            "k = {} exceeds patch count {}",
            k,
            s.len()
        )));
    }
    let mu = gmm.mu.row(c);
    let mut order: Vec<(f64, usize)> = (0..s.len())
        .map(|i| (sq_l2(s.embeddings().row(i), mu), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}
