//! Censored-survival losses, risk-head training, and survival statistics:
//! Cox partial likelihood with analytic gradient, discrete NLL loss,
//! concordance index, Kaplan-Meier curves, the two-group log-rank test, and
//! median risk stratification.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix, SeededRng};

/// One patient's follow-up outcome. `event` is true when death was observed,
/// false when the patient was censored at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub patient_id: String,
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::argument(format!(
                "survival time must be positive and finite, got {time}"
            )));
        }
        Ok(SurvivalRecord {
            patient_id: patient_id.into(),
            time,
            event,
        })
    }
}

/// Negative Cox partial log-likelihood with Breslow tie handling:
/// -sum over uncensored i of (s_i - log sum_{j: t_j >= t_i} exp s_j).
/// Deaths at equal times share the full tied risk set. Zero uncensored
/// patients yield 0.
pub fn cox_loss(scores: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if scores.len() != records.len() {
        return Err(Error::argument("scores and records length mismatch"));
    }
    if scores.is_empty() {
        return Err(Error::argument("cox_loss needs at least one patient"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::argument("scores must be finite"));
    }
    let n = scores.len();
    let mut loss = 0.0;
    let mut risk_buf = Vec::with_capacity(n);
    for i in 0..n {
        if !records[i].event {
            continue;
        }
        risk_buf.clear();
        for j in 0..n {
            if records[j].time >= records[i].time {
                risk_buf.push(scores[j]);
            }
        }
        loss -= scores[i] - logsumexp(&risk_buf)?;
    }
    Ok(loss)
}

/// Analytic gradient of [`cox_loss`] with respect to the scores:
/// dL/ds_i = -[i uncensored] + sum over uncensored k with t_i >= t_k of
/// exp(s_i) / sum_{j in R_k} exp(s_j).
pub fn cox_gradient(scores: &[f64], records: &[SurvivalRecord]) -> Result<Vec<f64>> {
    if scores.len() != records.len() {
        return Err(Error::argument("scores and records length mismatch"));
    }
    let n = scores.len();
    let mut grad = vec![0.0f64; n];
    let mut risk_buf = Vec::with_capacity(n);
    for k in 0..n {
        if !records[k].event {
            continue;
        }
        grad[k] -= 1.0;
        risk_buf.clear();
        for j in 0..n {
            if records[j].time >= records[k].time {
                risk_buf.push(scores[j]);
            }
        }
        let log_z = logsumexp(&risk_buf)?;
        for i in 0..n {
            if records[i].time >= records[k].time {
                grad[i] += (scores[i] - log_z).exp();
            }
        }
    }
    Ok(grad)
}

/// Trained linear risk head over patient embeddings. The bias is absorbed by
/// the baseline hazard and omitted.
#[derive(Debug, Clone)]
pub struct CoxHead {
    pub theta: Vec<f64>,
}

impl CoxHead {
    pub fn score(&self, embedding: &[f64]) -> f64 {
        crate::numerics::dot(&self.theta, embedding)
    }

    pub fn score_all(&self, embeddings: &Matrix) -> Vec<f64> {
        (0..embeddings.rows())
            .map(|i| self.score(embeddings.row(i)))
            .collect()
    }
}

/// Batched gradient descent on the Cox partial likelihood composed with a
/// linear map. Batches are seeded shuffles; the risk order inside each batch
/// drives the loss, so a batch of one carries no signal and is rejected.
/// The full-data loss is monitored per epoch and a warning is emitted if it
/// increases (learning rate too large).
pub fn fit_cox_head(
    embeddings: &Matrix,
    records: &[SurvivalRecord],
    lr: f64,
    epochs: usize,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<CoxHead> {
    if batch < 2 {
        return Err(Error::argument(
            "cox training requires batch size >= 2 (risk order within a batch)",
        ));
    }
    if embeddings.rows() != records.len() {
        return Err(Error::argument("embeddings and records length mismatch"));
    }
    let n = embeddings.rows();
    let dim = embeddings.cols();
    let mut theta = vec![0.0f64; dim];
    let mut order: Vec<usize> = (0..n).collect();
    let mut prev_full_loss = f64::INFINITY;
    for epoch in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let scores: Vec<f64> = chunk
                .iter()
                .map(|&i| crate::numerics::dot(&theta, embeddings.row(i)))
                .collect();
            let recs: Vec<SurvivalRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let g_scores = cox_gradient(&scores, &recs)?;
            let scale = lr / chunk.len() as f64;
            for (pos, &i) in chunk.iter().enumerate() {
                let g = g_scores[pos];
                if g == 0.0 {
                    continue;
                }
                let row = embeddings.row(i);
                for j in 0..dim {
                    theta[j] -= scale * g * row[j];
                }
            }
        }
        let full_scores: Vec<f64> = (0..n)
            .map(|i| crate::numerics::dot(&theta, embeddings.row(i)))
            .collect();
        let full_loss = cox_loss(&full_scores, records)?;
        if full_loss > prev_full_loss + 1e-9 {
            eprintln!(
                "warning: cox training loss increased at epoch {epoch} ({prev_full_loss:.6} -> {full_loss:.6})"
            );
        }
        prev_full_loss = full_loss;
    }
    Ok(CoxHead { theta })
}

/// Discrete time bins defined by right edges; bin j covers (e_{j-1}, e_j].
#[derive(Debug)]
pub struct DiscreteBins {
    edges: Vec<f64>,
    clamp_warned: std::sync::atomic::AtomicBool,
}

impl Clone for DiscreteBins {
    fn clone(&self) -> Self {
        DiscreteBins {
            edges: self.edges.clone(),
            clamp_warned: std::sync::atomic::AtomicBool::new(
                self.clamp_warned.load(std::sync::atomic::Ordering::Relaxed),
            ),
        }
    }
}

impl DiscreteBins {
    /// Quantile bins from the uncensored training times (linear-interpolation
    /// quantiles at j/n_bins for j = 1..n_bins). Coinciding quantiles are
    /// deduplicated to keep the edges strictly increasing.
    pub fn from_quantiles(records: &[SurvivalRecord], n_bins: usize) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::argument("need at least one bin"));
        }
        let mut times: Vec<f64> = records
            .iter()
            .filter(|r| r.event)
            .map(|r| r.time)
            .collect();
        if times.is_empty() {
            return Err(Error::data(
                "cannot build quantile bins with zero uncensored patients",
            ));
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantile = |q: f64| -> f64 {
            let pos = q * (times.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            if lo == hi {
                times[lo]
            } else {
                let w = pos - lo as f64;
                times[lo] * (1.0 - w) + times[hi] * w
            }
        };
        let mut edges = Vec::with_capacity(n_bins);
        for j in 1..=n_bins {
            let e = quantile(j as f64 / n_bins as f64);
            if edges.last().map_or(true, |&last| e > last) {
                edges.push(e);
            }
        }
        Ok(DiscreteBins {
            edges,
            clamp_warned: std::sync::atomic::AtomicBool::new(false),
        })
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::argument("need at least one edge"));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("bin edges must be strictly increasing"));
        }
        Ok(DiscreteBins {
            edges,
            clamp_warned: std::sync::atomic::AtomicBool::new(false),
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Bin index for a time; times beyond the last edge clamp to the last bin
    /// with a warning (emitted once per bin set).
    pub fn bin_of(&self, time: f64) -> usize {
        for (j, &e) in self.edges.iter().enumerate() {
            if time <= e {
                return j;
            }
        }
        if !self
            .clamp_warned
            .swap(true, std::sync::atomic::Ordering::Relaxed)
        {
            eprintln!(
                "warning: time {time} beyond last bin edge {}, clamping",
                self.edges[self.edges.len() - 1]
            );
        }
        self.edges.len() - 1
    }
}

/// log(sigmoid(x)) = -softplus(-x), stable for any x.
#[inline]
fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// log(1 + e^x) without overflow; handles +/- infinity.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Discrete NLL survival loss over per-bin hazard logits.
///
/// Hazards are h_j = sigmoid(logit_j); survival S_j = prod_{k<=j}(1 - h_k)
/// with S_0 = 1 (indexing: S_{-1} = 1 for bin 0). Mean over patients of
/// -[c log S_y + (1-c)(log S_{y-1} + log h_y)] where c = 1 for censored and
/// y is the patient's bin. Computed entirely in log space.
pub fn nll_surv_loss(
    hazard_logits: &Matrix,
    records: &[SurvivalRecord],
    bins: &DiscreteBins,
) -> Result<f64> {
    if hazard_logits.rows() != records.len() {
        return Err(Error::argument("logits and records length mismatch"));
    }
    if hazard_logits.cols() != bins.len() {
        return Err(Error::argument(format!(
            "logit columns {} do not match bin count {}",
            hazard_logits.cols(),
            bins.len()
        )));
    }
    let n = records.len();
    let mut total = 0.0;
    for i in 0..n {
        let y = bins.bin_of(records[i].time);
        let logits = hazard_logits.row(i);
        // log S_j = sum_{k <= j} log(1 - h_k) = sum -softplus(logit_k)
        let log_s = |j_inclusive: Option<usize>| -> f64 {
            match j_inclusive {
                None => 0.0,
                Some(j) => (0..=j).map(|k| -softplus(logits[k])).sum(),
            }
        };
        let censored = !records[i].event;
        let li = if censored {
            -log_s(Some(y))
        } else {
            let prev = if y == 0 { None } else { Some(y - 1) };
            -(log_s(prev) + log_sigmoid(logits[y]))
        };
        total += li;
    }
    Ok(total / n as f64)
}

/// Analytic gradient of [`nll_surv_loss`] with respect to the logits
/// (mean-over-patients convention, matching the loss).
pub fn nll_surv_gradient(
    hazard_logits: &Matrix,
    records: &[SurvivalRecord],
    bins: &DiscreteBins,
) -> Result<Matrix> {
    if hazard_logits.rows() != records.len() || hazard_logits.cols() != bins.len() {
        return Err(Error::argument("gradient shape mismatch"));
    }
    let n = records.len();
    let n_bins = bins.len();
    let mut grad = Matrix::zeros(n, n_bins);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = bins.bin_of(records[i].time);
        let logits = hazard_logits.row(i);
        let censored = !records[i].event;
        for k in 0..n_bins {
            let h = 1.0 / (1.0 + (-logits[k]).exp());
            let g = if censored {
                if k <= y {
                    h
                } else {
                    0.0
                }
            } else if y > 0 && k <= y - 1 {
                h
            } else if k == y {
                -(1.0 - h)
            } else {
                0.0
            };
            grad.set(i, k, g * inv_n);
        }
    }
    Ok(grad)
}

/// Linear multi-logit head for the discrete NLL loss.
#[derive(Debug, Clone)]
pub struct NllHead {
    /// n_bins x dim
    pub theta: Matrix,
    pub bins: DiscreteBins,
}

impl NllHead {
    pub fn logits(&self, embedding: &[f64]) -> Vec<f64> {
        (0..self.theta.rows())
            .map(|b| crate::numerics::dot(self.theta.row(b), embedding))
            .collect()
    }

    /// Risk score: expected number of intervals not survived, a monotone
    /// transform of the predicted hazard profile (higher = riskier).
    pub fn risk(&self, embedding: &[f64]) -> f64 {
        let logits = self.logits(embedding);
        let mut log_s = 0.0;
        let mut risk = 0.0;
        for &l in &logits {
            log_s += -softplus(l);
            risk -= log_s.exp();
        }
        risk + logits.len() as f64
    }
}

/// Batched gradient descent for the discrete NLL head. A batch of one is
/// permitted: each patient's term is independent.
pub fn fit_nll_head(
    embeddings: &Matrix,
    records: &[SurvivalRecord],
    bins: DiscreteBins,
    lr: f64,
    epochs: usize,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<NllHead> {
    if batch == 0 {
        return Err(Error::argument("batch size must be positive"));
    }
    if embeddings.rows() != records.len() {
        return Err(Error::argument("embeddings and records length mismatch"));
    }
    let n = embeddings.rows();
    let dim = embeddings.cols();
    let n_bins = bins.len();
    let mut theta = Matrix::zeros(n_bins, dim);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let m = chunk.len();
            let mut logits = Matrix::zeros(m, n_bins);
            for (pos, &i) in chunk.iter().enumerate() {
                for b in 0..n_bins {
                    logits.set(pos, b, crate::numerics::dot(theta.row(b), embeddings.row(i)));
                }
            }
            let recs: Vec<SurvivalRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let g = nll_surv_gradient(&logits, &recs, &bins)?;
            for (pos, &i) in chunk.iter().enumerate() {
                let row = embeddings.row(i);
                for b in 0..n_bins {
                    let gv = g.get(pos, b);
                    if gv == 0.0 {
                        continue;
                    }
                    let trow = theta.row_mut(b);
                    for j in 0..dim {
                        trow[j] -= lr * gv * row[j];
                    }
                }
            }
        }
    }
    Ok(NllHead { theta, bins })
}

/// Harrell's concordance index with integer pair counting.
///
/// Pair (i, j) is comparable iff t_j < t_i and patient j had the event;
/// it is concordant iff score_j > score_i, and tied scores count one half.
/// Counting uses integers (2x weights) so the result is an exact rational.
pub fn concordance_index(scores: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if scores.len() != records.len() {
        return Err(Error::argument("scores and records length mismatch"));
    }
    if scores.len() < 2 {
        return Err(Error::argument("concordance needs at least two patients"));
    }
    let n = scores.len();
    let mut twice_concordant: u64 = 0;
    let mut comparable: u64 = 0;
    for j in 0..n {
        if !records[j].event {
            continue;
        }
        for i in 0..n {
            if records[j].time < records[i].time {
                comparable += 1;
                if scores[j] > scores[i] {
                    twice_concordant += 2;
                } else if scores[j] == scores[i] {
                    twice_concordant += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric(
            "no comparable pairs for concordance index".into(),
        ));
    }
    Ok(twice_concordant as f64 / (2 * comparable) as f64)
}

/// Kaplan-Meier step curve: survival starts at 1 and drops by the
/// product-limit factor (1 - d_t/n_t) at each distinct event time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

pub fn km_curve(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::argument("km_curve needs at least one patient"));
    }
    let mut sorted: Vec<&SurvivalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    let n = sorted.len();
    let mut times = vec![0.0];
    let mut survival = vec![1.0];
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let at_risk = n - i;
        let mut deaths = 0usize;
        let mut j = i;
        while j < n && sorted[j].time == t {
            if sorted[j].event {
                deaths += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            times.push(t);
            survival.push(s);
        }
        i = j;
    }
    Ok(KmCurve { times, survival })
}

/// Regularized lower incomplete gamma P(a, x), series for x < a+1 and
/// continued fraction (modified Lentz) otherwise. Absolute accuracy ~1e-14,
/// well inside the documented 1e-10 budget.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        // series: P(a,x) = x^a e^-x / Gamma(a) * sum x^n / （a)_n
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (a * x.ln() - x - ln_gamma_a).exp()
    } else {
        // continued fraction for Q(a,x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (a * x.ln() - x - ln_gamma_a).exp() * h;
        1.0 - q
    }
}

/// Lanczos log-gamma (g = 7, 9 coefficients).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEF[0];
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Upper-tail chi-square probability with one degree of freedom.
pub fn chi_sq_1df_p_value(chi_sq: f64) -> f64 {
    if chi_sq <= 0.0 {
        return 1.0;
    }
    1.0 - gamma_p(0.5, chi_sq / 2.0)
}

/// Two-group log-rank test result.
#[derive(Debug, Clone, Copy)]
pub struct LogRank {
    pub chi_sq: f64,
    pub p: f64,
}

/// Standard two-group log-rank statistic: observed minus expected events in
/// group a under the hypergeometric model at each distinct event time,
/// chi-square with one degree of freedom.
pub fn logrank_test(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::argument("log-rank requires two non-empty groups"));
    }
    #[derive(Clone)]
    struct Obs {
        time: f64,
        event: bool,
        in_a: bool,
    }
    let mut all: Vec<Obs> = group_a
        .iter()
        .map(|r| Obs {
            time: r.time,
            event: r.event,
            in_a: true,
        })
        .chain(group_b.iter().map(|r| Obs {
            time: r.time,
            event: r.event,
            in_a: false,
        }))
        .collect();
    if !all.iter().any(|o| o.event) {
        return Err(Error::UndefinedMetric(
            "log-rank is undefined with zero events".into(),
        ));
    }
    all.sort_by(|x, y| x.time.partial_cmp(&y.time).unwrap());
    let n = all.len();
    let mut observed_a = 0.0f64;
    let mut expected_a = 0.0f64;
    let mut variance = 0.0f64;
    let mut i = 0;
    while i < n {
        let t = all[i].time;
        let at_risk = (n - i) as f64;
        let at_risk_a = all[i..].iter().filter(|o| o.in_a).count() as f64;
        let mut deaths = 0.0f64;
        let mut deaths_a = 0.0f64;
        let mut j = i;
        while j < n && all[j].time == t {
            if all[j].event {
                deaths += 1.0;
                if all[j].in_a {
                    deaths_a += 1.0;
                }
            }
            j += 1;
        }
        if deaths > 0.0 {
            observed_a += deaths_a;
            let frac_a = at_risk_a / at_risk;
            expected_a += deaths * frac_a;
            if at_risk > 1.0 {
                variance +=
                    deaths * frac_a * (1.0 - frac_a) * (at_risk - deaths) / (at_risk - 1.0);
            }
        }
        i = j;
    }
    let chi_sq = if variance > 0.0 {
        let diff = observed_a - expected_a;
        diff * diff / variance
    } else {
        0.0
    };
    Ok(LogRank {
        chi_sq,
        p: chi_sq_1df_p_value(chi_sq),
    })
}

/// Split at the median risk: strictly above goes high, the rest (ties at the
/// median included) goes low. The median is the lower-middle order statistic
/// for even n.
pub fn stratify_median<'a>(
    scores: &[f64],
    records: &'a [SurvivalRecord],
) -> Result<(Vec<&'a SurvivalRecord>, Vec<&'a SurvivalRecord>)> {
    if scores.len() != records.len() {
        return Err(Error::argument("scores and records length mismatch"));
    }
    if scores.len() < 2 {
        return Err(Error::argument("stratification needs at least two patients"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(sorted.len() - 1) / 2];
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (s, r) in scores.iter().zip(records) {
        if *s > median {
            high.push(r);
        } else {
            low.push(r);
        }
    }
    if high.is_empty() {
        return Err(Error::DegenerateSplit(
            "all scores at or below the median; cannot form a high-risk group".into(),
        ));
    }
    Ok((high, low))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord::new("p", t, event).unwrap()
    }

    #[test]
    fn cox_loss_all_censored_zero() {
        let records = vec![rec(1.0, false), rec(2.0, false)];
        assert_eq!(cox_loss(&[0.3, -0.7], &records).unwrap(), 0.0);
    }

    #[test]
    fn cox_loss_two_patient_ln2() {
        let records = vec![rec(1.0, true), rec(2.0, true)];
        let loss = cox_loss(&[0.0, 0.0], &records).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cox_loss_shift_invariant() {
        let records = vec![rec(1.0, true), rec(3.0, false), rec(2.0, true), rec(5.0, true)];
        let s = [0.4, -0.1, 0.9, -2.0];
        let shifted: Vec<f64> = s.iter().map(|v| v + 7.3).collect();
        let l1 = cox_loss(&s, &records).unwrap();
        let l2 = cox_loss(&shifted, &records).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
    }

    #[test]
    fn cox_gradient_two_patient_case() {
        let records = vec![rec(1.0, true), rec(2.0, true)];
        let g = cox_gradient(&[0.0, 0.0], &records).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cox_gradient_all_censored_zero() {
        let records = vec![rec(1.0, false), rec(2.0, false)];
        let g = cox_gradient(&[0.5, -0.5], &records).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn cox_gradient_sums_to_zero_all_events() {
        let mut rng = SeededRng::new(3);
        let records: Vec<SurvivalRecord> =
            (0..12).map(|i| rec(1.0 + i as f64, true)).collect();
        let scores: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let g = cox_gradient(&scores, &records).unwrap();
        let total: f64 = g.iter().sum();
        assert!(total.abs() < 1e-10);
    }

    #[test]
    fn cox_loss_decreases_when_earliest_death_score_rises() {
        let records = vec![rec(1.0, true), rec(2.0, true), rec(3.0, false)];
        let base = cox_loss(&[0.0, 0.2, -0.1], &records).unwrap();
        let bumped = cox_loss(&[0.5, 0.2, -0.1], &records).unwrap();
        assert!(bumped < base);
    }

    #[test]
    fn fit_cox_head_rejects_batch_one_and_zero_lr_is_identity() {
        let emb = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let records = vec![rec(3.0, true), rec(2.0, true), rec(1.0, true)];
        let mut rng = SeededRng::new(5);
        assert!(fit_cox_head(&emb, &records, 0.01, 5, 1, &mut rng).is_err());
        let head = fit_cox_head(&emb, &records, 0.0, 5, 2, &mut rng).unwrap();
        assert_eq!(head.theta, vec![0.0]);
    }

    #[test]
    fn fit_cox_head_separable_cohort_high_cindex() {
        // risk is one embedding coordinate; hazard steep enough that the
        // oracle concordance is ~0.95
        let mut rng = SeededRng::new(11);
        let n = 400;
        let mut rows = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let x = rng.uniform();
            let noise = rng.normal();
            rows.push(vec![x, 0.3 * noise]);
            let t = rng.exponential((20.0 * x).exp());
            records.push(SurvivalRecord::new(format!("p{i}"), t.max(1e-9), true).unwrap());
        }
        let emb = Matrix::from_rows(&rows).unwrap();
        let train = 300;
        let train_emb = emb.slice_rows(0, train);
        let test_emb = emb.slice_rows(train, n);
        let head = fit_cox_head(
            &train_emb,
            &records[..train],
            0.05,
            150,
            64,
            &mut SeededRng::new(6),
        )
        .unwrap();
        let scores = head.score_all(&test_emb);
        let c = concordance_index(&scores, &records[train..]).unwrap();
        assert!(c > 0.9, "held-out C-index {c}");
    }

    #[test]
    fn nll_loss_censored_zero_hazard_is_zero() {
        let records = vec![rec(1.0, false)];
        let bins = DiscreteBins::from_edges(vec![2.0]).unwrap();
        let logits = Matrix::from_vec(1, 1, vec![f64::NEG_INFINITY]).unwrap();
        let loss = nll_surv_loss(&logits, &records, &bins).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nll_loss_single_bin_ln2() {
        let records = vec![rec(1.0, true)];
        let bins = DiscreteBins::from_edges(vec![2.0]).unwrap();
        let logits = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let loss = nll_surv_loss(&logits, &records, &bins).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quantile_bins_separate_four_times() {
        let records = vec![rec(1.0, true), rec(2.0, true), rec(3.0, true), rec(4.0, true)];
        let bins = DiscreteBins::from_quantiles(&records, 4).unwrap();
        assert_eq!(bins.len(), 4);
        // linear-interpolation quartiles of {1,2,3,4}: 1.75, 2.5, 3.25, 4
        let edges = bins.edges();
        assert!((edges[0] - 1.75).abs() < 1e-12);
        assert!((edges[1] - 2.5).abs() < 1e-12);
        assert!((edges[2] - 3.25).abs() < 1e-12);
        assert!((edges[3] - 4.0).abs() < 1e-12);
        let assigned: Vec<usize> = records.iter().map(|r| bins.bin_of(r.time)).collect();
        assert_eq!(assigned, vec![0, 1, 2, 3]);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        let records = vec![
            rec(0.5, true),
            rec(1.5, false),
            rec(2.5, true),
            rec(3.5, false),
        ];
        let bins = DiscreteBins::from_edges(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let data: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let logits = Matrix::from_vec(4, 4, data).unwrap();
        let g = nll_surv_gradient(&logits, &records, &bins).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..4 {
                let mut plus = logits.clone();
                plus.set(i, k, logits.get(i, k) + h);
                let mut minus = logits.clone();
                minus.set(i, k, logits.get(i, k) - h);
                let fd = (nll_surv_loss(&plus, &records, &bins).unwrap()
                    - nll_surv_loss(&minus, &records, &bins).unwrap())
                    / (2.0 * h);
                assert!(
                    (g.get(i, k) - fd).abs() < 1e-6,
                    "grad mismatch at ({i},{k}): {} vs {}",
                    g.get(i, k),
                    fd
                );
            }
        }
    }

    #[test]
    fn nll_loss_nonnegative() {
        let mut rng = SeededRng::new(23);
        let records: Vec<SurvivalRecord> = (0..8)
            .map(|i| rec(0.5 + i as f64, i % 3 != 0))
            .collect();
        let bins = DiscreteBins::from_quantiles(&records, 4).unwrap();
        let data: Vec<f64> = (0..8 * bins.len()).map(|_| rng.normal() * 2.0).collect();
        let logits = Matrix::from_vec(8, bins.len(), data).unwrap();
        assert!(nll_surv_loss(&logits, &records, &bins).unwrap() >= 0.0);
    }

    #[test]
    fn cindex_perfect_and_inverted() {
        let records = vec![rec(1.0, true), rec(2.0, true), rec(3.0, true)];
        // reverse-ordered scores: shortest-lived has the highest score
        assert_eq!(concordance_index(&[3.0, 2.0, 1.0], &records).unwrap(), 1.0);
        assert_eq!(concordance_index(&[1.0, 2.0, 3.0], &records).unwrap(), 0.0);
    }

    #[test]
    fn cindex_undefined_without_comparable_pairs() {
        let records = vec![rec(1.0, false), rec(2.0, false)];
        assert!(matches!(
            concordance_index(&[1.0, 0.0], &records),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn km_all_censored_constant_one() {
        let records = vec![rec(1.0, false), rec(2.0, false)];
        let km = km_curve(&records).unwrap();
        assert_eq!(km.survival, vec![1.0]);
    }

    #[test]
    fn km_single_death_among_two() {
        let records = vec![rec(5.0, true), rec(7.0, false)];
        let km = km_curve(&records).unwrap();
        assert_eq!(km.times, vec![0.0, 5.0]);
        assert_eq!(km.survival, vec![1.0, 0.5]);
    }

    #[test]
    fn km_textbook_hand_computation() {
        let records = vec![rec(1.0, true), rec(2.0, false), rec(3.0, true)];
        let km = km_curve(&records).unwrap();
        // S(1) = 1 * (1 - 1/3) = 2/3; S(3) = 2/3 * (1 - 1/1) = 0
        assert_eq!(km.times, vec![0.0, 1.0, 3.0]);
        assert!((km.survival[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(km.survival[2], 0.0);
    }

    #[test]
    fn km_non_increasing() {
        let mut rng = SeededRng::new(9);
        let records: Vec<SurvivalRecord> = (0..40)
            .map(|_| rec(rng.exponential(1.0).max(1e-9), rng.uniform() < 0.6))
            .collect();
        let km = km_curve(&records).unwrap();
        assert_eq!(km.survival[0], 1.0);
        for w in km.survival.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn logrank_identical_groups_null() {
        let group: Vec<SurvivalRecord> = (0..10)
            .map(|i| rec(1.0 + i as f64, i % 2 == 0))
            .collect();
        let lr = logrank_test(&group, &group.clone()).unwrap();
        assert!(lr.chi_sq.abs() < 1e-12);
        assert!((lr.p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logrank_strong_separation_significant() {
        let early: Vec<SurvivalRecord> = (0..20).map(|i| rec(1.0 + 0.1 * i as f64, true)).collect();
        let late: Vec<SurvivalRecord> = (0..20).map(|i| rec(10.0 + 0.1 * i as f64, true)).collect();
        let lr = logrank_test(&early, &late).unwrap();
        assert!(lr.p < 0.05, "p = {}", lr.p);
    }

    #[test]
    fn logrank_symmetric_under_label_swap() {
        let mut rng = SeededRng::new(13);
        let a: Vec<SurvivalRecord> = (0..15)
            .map(|_| rec(rng.exponential(1.0).max(1e-9), rng.uniform() < 0.7))
            .collect();
        let b: Vec<SurvivalRecord> = (0..12)
            .map(|_| rec(rng.exponential(0.5).max(1e-9), rng.uniform() < 0.7))
            .collect();
        let ab = logrank_test(&a, &b).unwrap();
        let ba = logrank_test(&b, &a).unwrap();
        assert!((ab.chi_sq - ba.chi_sq).abs() < 1e-10);
    }

    #[test]
    fn logrank_zero_events_undefined() {
        let a = vec![rec(1.0, false)];
        let b = vec![rec(2.0, false)];
        assert!(matches!(
            logrank_test(&a, &b),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn p_value_monotone_in_chi_sq() {
        let mut prev = 1.0;
        for k in 1..40 {
            let p = chi_sq_1df_p_value(k as f64 * 0.5);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn p_value_reference_points() {
        // chi-square(1df) upper tail: P(X > 3.841459) = 0.05
        assert!((chi_sq_1df_p_value(3.8414588206941236) - 0.05).abs() < 1e-10);
        // P(X > 6.634897) = 0.01
        assert!((chi_sq_1df_p_value(6.6348966010212145) - 0.01).abs() < 1e-10);
        // erfc relation at a couple of points
        for &x in &[0.1, 1.0, 2.5, 9.0] {
            let p = chi_sq_1df_p_value(x);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn stratify_median_examples() {
        let records: Vec<SurvivalRecord> = (0..4).map(|i| rec(1.0 + i as f64, true)).collect();
        let (high, low) = stratify_median(&[1.0, 2.0, 3.0, 4.0], &records).unwrap();
        assert_eq!(high.len(), 2);
        assert_eq!(low.len(), 2);
        assert_eq!(high[0].time, 3.0);
        assert_eq!(high[1].time, 4.0);

        let records3: Vec<SurvivalRecord> = (0..3).map(|i| rec(1.0 + i as f64, true)).collect();
        let (high, low) = stratify_median(&[1.0, 2.0, 3.0], &records3).unwrap();
        assert_eq!(high.len(), 1);
        assert_eq!(low.len(), 2);

        // ties at the median go low
        let (high, low) = stratify_median(&[1.0, 2.0, 2.0, 4.0], &records).unwrap();
        assert_eq!(high.len(), 1);
        assert_eq!(low.len(), 3);

        assert!(matches!(
            stratify_median(&[5.0, 5.0, 5.0], &records3),
            Err(Error::DegenerateSplit(_))
        ));
    }

    proptest! {
        #[test]
        fn prop_cox_loss_shift_invariance(
            scores in prop::collection::vec(-3.0f64..3.0, 5),
            shift in -10.0f64..10.0,
        ) {
            let records: Vec<SurvivalRecord> = (0..5)
                .map(|i| rec(1.0 + i as f64, i % 2 == 0))
                .collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let l1 = cox_loss(&scores, &records).unwrap();
            let l2 = cox_loss(&shifted, &records).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-10);
        }

        #[test]
        fn prop_cindex_flip_and_monotone_transform(
            seed in 0u64..5000,
        ) {
            let mut rng = SeededRng::new(seed);
            let n = 12;
            let records: Vec<SurvivalRecord> = (0..n)
                .map(|_| rec(rng.uniform() * 10.0 + 0.01, rng.uniform() < 0.7))
                .collect();
            // distinct scores so the flip identity is exact
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
            rng.shuffle(&mut scores);
            if let Ok(c) = concordance_index(&scores, &records) {
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                let c_neg = concordance_index(&neg, &records).unwrap();
                prop_assert!((c + c_neg - 1.0).abs() < 1e-12);
                // strictly monotone transform preserves the index exactly
                let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 2.0).collect();
                let c_warp = concordance_index(&warped, &records).unwrap();
                prop_assert_eq!(c, c_warp);
            }
        }
    }
}
