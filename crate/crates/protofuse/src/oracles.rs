//! Independent brute-force oracles and the synthetic cohort generator used by
//! tests, the verification suite, and end-to-end runs.
//!
//! Nothing here calls the implementations it validates: the concordance
//! oracle enumerates pairs directly, the gradient oracle is plain central
//! differences, and the small OT reference runs classic exp-domain scaling
//! rather than the log-domain solver.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::survival::SurvivalRecord;

/// Parameters of the planted synthetic cohort.
#[derive(Debug, Clone)]
pub struct SyntheticCohortSpec {
    pub n_patients: usize,
    /// Inclusive range of patches per slide.
    pub patches_min: usize,
    pub patches_max: usize,
    /// Patch embedding dimension.
    pub dim: usize,
    /// Number of planted morphology clusters.
    pub clusters: usize,
    /// Distance scale between planted cluster centers.
    pub separation: f64,
    /// Within-cluster standard deviation.
    pub sigma: f64,
    /// Which planted cluster carries the hazard signal.
    pub tumor_prototype_index: usize,
    /// Hazard rate is exp(hazard_coefficient * tumor_fraction).
    pub hazard_coefficient: f64,
    /// Target fraction of censored patients, in [0, 1).
    pub censoring_rate: f64,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        SyntheticCohortSpec {
            n_patients: 300,
            patches_min: 300,
            patches_max: 500,
            dim: 8,
            clusters: 4,
            separation: 20.0,
            sigma: 1.0,
            tumor_prototype_index: 0,
            // steep enough that the planted fraction carries a concordance
            // ceiling near 0.94 under exponential survival noise
            hazard_coefficient: 16.0,
            censoring_rate: 0.3,
            n_genes: 500,
            n_pathways: 10,
            seed: 1,
        }
    }
}

/// Ground truth recorded while generating one patient.
#[derive(Debug, Clone)]
pub struct PlantedTruth {
    /// Tumor fraction used to draw survival.
    pub intended_fraction: f64,
    /// Realized fraction of patches actually drawn from the tumor cluster.
    pub realized_fraction: f64,
}

/// One generated patient.
#[derive(Debug, Clone)]
pub struct SyntheticPatient {
    pub patient_id: String,
    pub slide_id: String,
    pub patches: Matrix,
    pub expression: Vec<f64>,
    pub record: SurvivalRecord,
    pub truth: PlantedTruth,
}

/// A full synthetic cohort plus the planted cluster centers and pathway
/// definitions (GMT text and gene names) for file emission.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub patients: Vec<SyntheticPatient>,
    pub centroids: Matrix,
    pub gene_names: Vec<String>,
    pub gmt_text: String,
}

/// Censoring rate for exponential censoring at rate lc against survival at
/// rate exp(beta * u), u uniform: 1 - (1/beta) ln((lc + e^beta)/(lc + 1)).
fn censoring_fraction(lc: f64, beta: f64) -> f64 {
    if beta.abs() < 1e-12 {
        lc / (lc + 1.0)
    } else {
        1.0 - (1.0 / beta) * (((lc + beta.exp()) / (lc + 1.0)).ln())
    }
}

/// Solve for the censoring rate that achieves the target fraction.
fn solve_censoring_rate(target: f64, beta: f64) -> f64 {
    let mut lo: f64 = 1e-12;
    let mut hi: f64 = 1e12;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if censoring_fraction(mid, beta) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Generate a planted cohort: isotropic Gaussian patch clusters around
/// well-separated centers, exponential survival with rate
/// exp(hazard_coefficient * tumor_fraction), independent exponential
/// censoring hitting the requested rate, and an expression vector whose
/// first-pathway genes track the tumor fraction.
pub fn generate_cohort(spec: &SyntheticCohortSpec) -> Result<SyntheticCohort> {
    if spec.n_patients == 0 || spec.clusters == 0 || spec.dim == 0 {
        return Err(Error::argument("cohort spec has zero-sized field"));
    }
    if spec.patches_min == 0 || spec.patches_min > spec.patches_max {
        return Err(Error::argument("invalid patches-per-slide range"));
    }
    if spec.tumor_prototype_index >= spec.clusters {
        return Err(Error::argument("tumor prototype index out of range"));
    }
    if !(0.0..1.0).contains(&spec.censoring_rate) {
        return Err(Error::argument("censoring rate must be in [0, 1)"));
    }
    if spec.separation <= 0.0 || spec.sigma <= 0.0 {
        return Err(Error::argument("separation and sigma must be positive"));
    }
    if spec.n_pathways == 0 || spec.n_genes < spec.n_pathways {
        return Err(Error::argument("need at least one gene per pathway"));
    }

    let mut rng = SeededRng::new(spec.seed);

    // Planted centers: random directions scaled to `separation`, re-centered
    // so pairwise distances are ~separation * sqrt(2).
    let mut centroids = Matrix::zeros(spec.clusters, spec.dim);
    for c in 0..spec.clusters {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x = *x / norm * spec.separation;
        }
        centroids.row_mut(c).copy_from_slice(&v);
    }

    // Gene universe and contiguous-block pathways; pathway 0 is the
    // hazard-linked block.
    let gene_names: Vec<String> = (0..spec.n_genes).map(|i| format!("GENE{i:05}")).collect();
    let block = spec.n_genes / spec.n_pathways;
    let mut gmt_lines = Vec::with_capacity(spec.n_pathways);
    for p in 0..spec.n_pathways {
        let start = p * block;
        let end = if p + 1 == spec.n_pathways {
            spec.n_genes
        } else {
            start + block
        };
        let genes: Vec<&str> = gene_names[start..end].iter().map(|s| s.as_str()).collect();
        gmt_lines.push(format!(
            "PATHWAY_{p:03}\tsynthetic pathway {p}\t{}",
            genes.join("\t")
        ));
    }
    let gmt_text = gmt_lines.join("\n");

    let censor_rate = if spec.censoring_rate > 0.0 {
        Some(solve_censoring_rate(
            spec.censoring_rate,
            spec.hazard_coefficient,
        ))
    } else {
        None
    };

    let mut patients = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let patient_id = format!("P{i:05}");
        let slide_id = format!("{patient_id}_s0");
        let n_patches = if spec.patches_min == spec.patches_max {
            spec.patches_min
        } else {
            spec.patches_min + rng.index(spec.patches_max - spec.patches_min + 1)
        };
        let fraction = rng.uniform();
        let mut patches = Matrix::zeros(n_patches, spec.dim);
        let mut tumor_count = 0usize;
        for p in 0..n_patches {
            let cluster = if rng.uniform() < fraction {
                tumor_count += 1;
                spec.tumor_prototype_index
            } else {
                // uniform over the non-tumor clusters (or the single cluster)
                if spec.clusters == 1 {
                    0
                } else {
                    let mut c = rng.index(spec.clusters - 1);
                    if c >= spec.tumor_prototype_index {
                        c += 1;
                    }
                    c
                }
            };
            let center = centroids.row(cluster);
            let row = patches.row_mut(p);
            for d in 0..spec.dim {
                row[d] = center[d] + spec.sigma * rng.normal();
            }
        }
        let realized_fraction = tumor_count as f64 / n_patches as f64;

        let rate = (spec.hazard_coefficient * fraction).exp();
        let death_time = rng.exponential(rate).max(1e-9);
        let (time, event) = match censor_rate {
            Some(lc) => {
                let censor_time = rng.exponential(lc).max(1e-9);
                if death_time <= censor_time {
                    (death_time, true)
                } else {
                    (censor_time, false)
                }
            }
            None => (death_time, true),
        };

        // Expression: noise everywhere, pathway-0 genes shifted by the tumor
        // fraction.
        let mut expression: Vec<f64> = (0..spec.n_genes).map(|_| 0.25 * rng.normal()).collect();
        for g in expression.iter_mut().take(block) {
            *g += 3.0 * fraction;
        }

        patients.push(SyntheticPatient {
            record: SurvivalRecord::new(&patient_id, time, event)?,
            patient_id,
            slide_id,
            patches,
            expression,
            truth: PlantedTruth {
                intended_fraction: fraction,
                realized_fraction,
            },
        });
    }

    Ok(SyntheticCohort {
        patients,
        centroids,
        gene_names,
        gmt_text,
    })
}

/// O(n^2) concordance oracle with the same comparability and tie rules as the
/// production metric: pair (i, j) comparable iff t_j < t_i and j had the
/// event; tied scores count one half; integer pair counting.
pub fn brute_cindex(scores: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if scores.len() != records.len() || scores.len() < 2 {
        return Err(Error::argument("brute_cindex needs n >= 2 aligned inputs"));
    }
    let n = scores.len();
    let mut twice_concordant: u64 = 0;
    let mut comparable: u64 = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if records[j].event && records[j].time < records[i].time {
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
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(twice_concordant as f64 / (2 * comparable) as f64)
}

/// Central-difference gradient oracle.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Dense reference solver for small balanced entropic OT instances
/// (m * k <= 64): classic alternating scaling on K = exp(-C/eps) in the exp
/// domain, run to a 1e-14 marginal residual.
pub fn exact_ot_small(
    cost: &Matrix,
    row_marginal: &[f64],
    col_marginal: &[f64],
    epsilon: f64,
) -> Result<Matrix> {
    let (m, k) = (cost.rows(), cost.cols());
    if m * k > 64 {
        return Err(Error::argument("reference solver is limited to m*k <= 64"));
    }
    if row_marginal.len() != m || col_marginal.len() != k {
        return Err(Error::argument("marginal lengths do not match cost"));
    }
    let mut kernel = Matrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            kernel.set(i, j, (-cost.get(i, j) / epsilon).exp());
        }
    }
    let mut u = vec![1.0f64; m];
    let mut v = vec![1.0f64; k];
    let plan_residual = |u: &[f64], v: &[f64]| -> (Matrix, f64) {
        let mut plan = Matrix::zeros(m, k);
        for i in 0..m {
            for j in 0..k {
                plan.set(i, j, u[i] * kernel.get(i, j) * v[j]);
            }
        }
        let mut worst = 0.0f64;
        for i in 0..m {
            let s: f64 = plan.row(i).iter().sum();
            worst = worst.max((s - row_marginal[i]).abs());
        }
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..m {
                s += plan.get(i, j);
            }
            worst = worst.max((s - col_marginal[j]).abs());
        }
        (plan, worst)
    };
    for _ in 0..100_000 {
        for i in 0..m {
            let mut s = 0.0;
            for j in 0..k {
                s += kernel.get(i, j) * v[j];
            }
            u[i] = row_marginal[i] / s;
        }
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..m {
                s += kernel.get(i, j) * u[i];
            }
            v[j] = col_marginal[j] / s;
        }
        let (_, res) = plan_residual(&u, &v);
        if res < 1e-14 {
            return Ok(plan_residual(&u, &v).0);
        }
    }
    Err(Error::Convergence {
        message: "reference OT solver failed at tiny size (indicates a bug)".into(),
        residual: plan_residual(&u, &v).1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::concordance_index;

    #[test]
    fn cohort_is_seed_reproducible() {
        let spec = SyntheticCohortSpec {
            n_patients: 8,
            ..Default::default()
        };
        let a = generate_cohort(&spec).unwrap();
        let b = generate_cohort(&spec).unwrap();
        for (x, y) in a.patients.iter().zip(&b.patients) {
            assert_eq!(x.patches.data(), y.patches.data());
            assert_eq!(x.record.time.to_bits(), y.record.time.to_bits());
            assert_eq!(x.expression, y.expression);
        }
    }

    #[test]
    fn zero_censoring_all_events() {
        let spec = SyntheticCohortSpec {
            n_patients: 30,
            censoring_rate: 0.0,
            ..Default::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        assert!(cohort.patients.iter().all(|p| p.record.event));
    }

    #[test]
    fn censoring_rate_approximately_hit() {
        let spec = SyntheticCohortSpec {
            n_patients: 2000,
            patches_min: 4,
            patches_max: 4,
            dim: 2,
            censoring_rate: 0.3,
            ..Default::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let censored = cohort.patients.iter().filter(|p| !p.record.event).count();
        let frac = censored as f64 / 2000.0;
        assert!((frac - 0.3).abs() < 0.05, "censored fraction {frac}");
    }

    #[test]
    fn null_hazard_gives_chance_level_cindex() {
        let spec = SyntheticCohortSpec {
            n_patients: 500,
            patches_min: 4,
            patches_max: 4,
            dim: 2,
            hazard_coefficient: 0.0,
            censoring_rate: 0.0,
            seed: 5,
            ..Default::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let scores: Vec<f64> = cohort
            .patients
            .iter()
            .map(|p| p.truth.intended_fraction)
            .collect();
        let records: Vec<SurvivalRecord> =
            cohort.patients.iter().map(|p| p.record.clone()).collect();
        let c = brute_cindex(&scores, &records).unwrap();
        assert!((c - 0.5).abs() < 0.05, "null-model C-index {c}");
    }

    #[test]
    fn brute_cindex_small_cases() {
        let r1 = SurvivalRecord::new("a", 1.0, true).unwrap();
        let r2 = SurvivalRecord::new("b", 2.0, true).unwrap();
        assert_eq!(brute_cindex(&[2.0, 1.0], &[r1.clone(), r2.clone()]).unwrap(), 1.0);
        assert_eq!(brute_cindex(&[1.0, 1.0], &[r1, r2]).unwrap(), 0.5);
    }

    #[test]
    fn brute_cindex_agrees_with_production_metric() {
        let mut rng = SeededRng::new(71);
        for trial in 0..50 {
            let n = 2 + rng.index(30);
            let records: Vec<SurvivalRecord> = (0..n)
                .map(|i| {
                    SurvivalRecord::new(
                        format!("p{i}"),
                        (rng.index(8) + 1) as f64,
                        rng.uniform() < 0.6,
                    )
                    .unwrap()
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.index(5) as f64) * 0.5).collect();
            let brute = brute_cindex(&scores, &records);
            let prod = concordance_index(&scores, &records);
            match (brute, prod) {
                (Ok(a), Ok(b)) => assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}"),
                (Err(_), Err(_)) => {}
                other => panic!("oracle/production disagree on definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_constant_zero() {
        let g = finite_diff_grad(|_| 3.75, &[0.1, 0.2, 0.3], 1e-5);
        assert!(g.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn exact_ot_uniform_cost_product_plan() {
        let cost = Matrix::zeros(3, 4);
        let a = vec![1.0 / 3.0; 3];
        let b = vec![0.25; 4];
        let plan = exact_ot_small(&cost, &a, &b, 1.0).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((plan.get(i, j) - 1.0 / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_ot_single_cell() {
        let cost = Matrix::from_vec(1, 1, vec![2.5]).unwrap();
        let plan = exact_ot_small(&cost, &[1.0], &[1.0], 0.7).unwrap();
        assert!((plan.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_ot_agrees_with_log_domain_solver() {
        let mut rng = SeededRng::new(44);
        let data: Vec<f64> = (0..12).map(|_| rng.uniform() * 3.0).collect();
        let cost = Matrix::from_vec(4, 3, data).unwrap();
        let a = vec![0.25; 4];
        let b = vec![1.0 / 3.0; 3];
        let reference = exact_ot_small(&cost, &a, &b, 0.3).unwrap();
        let solved =
            crate::sinkhorn::sinkhorn_balanced(&cost, &a, &b, 0.3, 200_000, 1e-13).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!(
                    (reference.get(i, j) - solved.plan.get(i, j)).abs() < 1e-10,
                    "plans differ at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn planted_fraction_recovered_by_gmm_at_high_separation() {
        use crate::aggregation::{aggregate_gmm, GmmConfig, PatchEmbeddingSet};
        use crate::prototypes::PrototypeBank;
        let spec = SyntheticCohortSpec {
            n_patients: 10,
            patches_min: 400,
            patches_max: 400,
            dim: 8,
            clusters: 4,
            separation: 50.0,
            sigma: 1.0,
            censoring_rate: 0.0,
            seed: 9,
            ..Default::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        // bank = planted centroids, so component 0 is the tumor component
        let bank = PrototypeBank::new(cohort.centroids.clone(), 0).unwrap();
        for p in &cohort.patients {
            let set = PatchEmbeddingSet::new(&p.slide_id, p.patches.clone()).unwrap();
            let sum = aggregate_gmm(&set, &bank, &GmmConfig::default()).unwrap();
            let pi0 = sum.gmm.as_ref().unwrap().pi[spec.tumor_prototype_index];
            assert!(
                (pi0 - p.truth.realized_fraction).abs() < 0.02,
                "pi {pi0} vs realized {}",
                p.truth.realized_fraction
            );
        }
    }
}
