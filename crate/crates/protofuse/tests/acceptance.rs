//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Criteria 6 and 7 run the full pipeline on a planted cohort; they share a
//! lock so wall-clock limits are measured without cross-test contention.

use protofuse::aggregation::AggregationBackend;
use protofuse::error::Error;
use protofuse::oracles::{brute_cindex, generate_cohort, SyntheticCohortSpec};
use protofuse::pipeline::{
    cmd_generate, cmd_run, cohort_from_synthetic, run_kfold, run_pipeline, run_verification, verify_cindex,
    verify_cox_gradient, verify_em_monotonicity, verify_lemma_sweep, verify_sinkhorn_marginals,
    CohortData, FusionBackend, LossKind, PipelineConfig,
};
use protofuse::survival::SurvivalRecord;
use std::sync::Mutex;
use std::time::Instant;

static HEAVY: Mutex<()> = Mutex::new(());

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn tmp_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("protofuse-acc-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn criterion_1_lemma_equivalence() {
    let start = Instant::now();
    let check = verify_lemma_sweep(200);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = check.pass && check.max_dev < 1e-8 && elapsed < 10.0;
    report(
        "1 lemma-equivalence",
        pass,
        &format!(
            "200 instances (C_g, C_h, d in 1..8), max |C_g*T - softmax| = {:.3e} (tol 1e-8), {:.2}s (limit 10s)",
            check.max_dev, elapsed
        ),
    );
    assert!(pass, "{}", check.line());
}

#[test]
fn criterion_2_em_monotonicity() {
    let check = verify_em_monotonicity(100);
    report(
        "2 em-monotonicity",
        check.pass,
        &format!(
            "100 instances x 5 iterations, worst log-likelihood drop = {:.3e} (tol 1e-9)",
            check.max_dev
        ),
    );
    assert!(check.pass, "{}", check.line());
}

#[test]
fn criterion_3_sinkhorn_marginals() {
    let check = verify_sinkhorn_marginals();
    report(
        "3 sinkhorn-marginals",
        check.pass,
        &format!("{} (marginal tol 1e-6, reference tol 1e-10)", check.detail),
    );
    assert!(check.pass, "{}", check.line());
}

#[test]
fn criterion_4_cox_gradient() {
    let check = verify_cox_gradient(50, false);
    report(
        "4 cox-gradient",
        check.pass,
        &format!(
            "50 instances (n <= 40, censoring 0-60%, tied times), max rel err = {:.3e} (tol 1e-5)",
            check.max_dev
        ),
    );
    assert!(check.pass, "{}", check.line());
}

#[test]
fn criterion_5_cindex_oracle() {
    let check = verify_cindex(1000);
    report(
        "5 cindex-oracle",
        check.pass,
        &format!(
            "1000 instances with score ties, {} mismatches (exact rational counting)",
            check.max_dev
        ),
    );
    assert!(check.pass, "{}", check.line());
}

/// The criterion-6/7/9 cohort: n = 500 patients, 1000 patches per slide,
/// separation/sigma = 20, hazard coefficient 3, censoring 30%.
fn criterion6_spec(seed: u64) -> SyntheticCohortSpec {
    SyntheticCohortSpec {
        n_patients: 500,
        patches_min: 1000,
        patches_max: 1000,
        dim: 8,
        clusters: 4,
        separation: 20.0,
        sigma: 1.0,
        tumor_prototype_index: 0,
        hazard_coefficient: 3.0,
        censoring_rate: 0.3,
        n_genes: 2000,
        n_pathways: 50,
        seed,
    }
}

fn criterion6_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        prototype_count: 16,
        aggregation: AggregationBackend::Gmm,
        fusion: FusionBackend::Transformer,
        loss: LossKind::Cox,
        batch: 64,
        seed,
        threads: Some(1),
        emit_interpretability: false,
        ..Default::default()
    }
}

fn oracle_ceiling(cohort: &CohortData, synth_fractions: &[f64]) -> f64 {
    let records: Vec<SurvivalRecord> = cohort.patients.iter().map(|p| p.record.clone()).collect();
    brute_cindex(synth_fractions, &records).unwrap()
}

#[test]
fn criterion_6_planted_end_to_end() {
    let _guard = HEAVY.lock().unwrap_or_else(|p| p.into_inner());
    let synth = generate_cohort(&criterion6_spec(601)).unwrap();
    let fractions: Vec<f64> = synth
        .patients
        .iter()
        .map(|p| p.truth.intended_fraction)
        .collect();
    let cohort = cohort_from_synthetic(&synth).unwrap();
    let ceiling = oracle_ceiling(&cohort, &fractions);

    let start = Instant::now();
    let gmm_run = run_pipeline(&cohort, &criterion6_config(601), None).unwrap();
    let mut hc_cfg = criterion6_config(601);
    hc_cfg.aggregation = AggregationBackend::Hc;
    let hc_run = run_pipeline(&cohort, &hc_cfg, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let gmm_c = gmm_run.test_c_index;
    let hc_c = hc_run.test_c_index;
    let pass = gmm_c >= 0.80 && hc_c >= 0.70 && elapsed < 120.0;
    report(
        "6 planted-end-to-end",
        pass,
        &format!(
            "held-out C-index: gmm = {gmm_c:.4} (threshold 0.80), hc = {hc_c:.4} (threshold 0.70), \
             runtime {elapsed:.1}s (limit 120s); oracle C-index of the planted tumor fraction \
             on this cohort = {ceiling:.4} — at hazard coefficient 3 the exponential survival \
             draw caps every feature-based score near that value"
        ),
    );
    assert!(
        pass,
        "gmm = {gmm_c:.4} (>= 0.80 required), hc = {hc_c:.4} (>= 0.70 required), \
         elapsed = {elapsed:.1}s (< 120 required); planted-fraction oracle itself scores {ceiling:.4}"
    );
}

#[test]
fn criterion_7_fusion_parity() {
    let _guard = HEAVY.lock().unwrap_or_else(|p| p.into_inner());
    // Cohort-level C-index per variant from risks pooled across the test
    // folds of a seeded 5-fold split (the same protocol the risk
    // stratification analysis uses), so each estimate sees all 500 patients.
    let mut max_gap = 0.0f64;
    let mut detail = String::new();
    for seed in 1..=5u64 {
        let synth = generate_cohort(&criterion6_spec(seed)).unwrap();
        let cohort = cohort_from_synthetic(&synth).unwrap();
        let transformer = run_kfold(&cohort, &criterion6_config(seed), 5)
            .unwrap()
            .c_index;
        let mut ot_cfg = criterion6_config(seed);
        ot_cfg.fusion = FusionBackend::Ot;
        let ot = run_kfold(&cohort, &ot_cfg, 5).unwrap().c_index;
        let gap = (transformer - ot).abs();
        max_gap = max_gap.max(gap);
        detail.push_str(&format!(
            "seed {seed}: transformer {transformer:.4} vs ot {ot:.4} (gap {gap:.4}); "
        ));
    }
    let pass = max_gap <= 0.05;
    report(
        "7 fusion-parity",
        pass,
        &format!("max |C(transformer) - C(ot)| = {max_gap:.4} over 5 seeds (tol 0.05); {detail}"),
    );
    assert!(pass, "max gap {max_gap}");
}

#[test]
fn criterion_8_compression_accounting() {
    let spec = SyntheticCohortSpec {
        n_patients: 12,
        patches_min: 5000,
        patches_max: 5000,
        dim: 8,
        clusters: 4,
        n_genes: 2000,
        n_pathways: 50,
        seed: 8,
        ..Default::default()
    };
    let cohort = cohort_from_synthetic(&generate_cohort(&spec).unwrap()).unwrap();
    let mut cfg = criterion6_config(8);
    cfg.epochs = 10;
    let run = run_pipeline(&cohort, &cfg, None).unwrap();
    let acc = &run.accounting;
    let ratio_exact = acc.reduction_ratio == 312.5;
    let tokens_exact = acc.fusion_tokens == 66 && acc.pathway_count == 50;
    let logs = acc.log_lines().join("\n");
    let logged = logs.contains("ratio = 312.5") && logs.contains("66 tokens");
    let pass = ratio_exact && tokens_exact && logged;
    report(
        "8 compression-accounting",
        pass,
        &format!(
            "N_h = 5000, C_h = 16 -> reported ratio {} (expected 312.5), fusion tokens {} (expected 66)",
            acc.reduction_ratio, acc.fusion_tokens
        ),
    );
    assert!(pass, "accounting: {logs}");
}

#[test]
fn criterion_9_batch_size_contract() {
    let _guard = HEAVY.lock().unwrap_or_else(|p| p.into_inner());
    // Cox with batch 1 is a hard argument error
    let spec = criterion6_spec(901);
    let cohort = cohort_from_synthetic(&generate_cohort(&spec).unwrap()).unwrap();
    let mut cox1 = criterion6_config(901);
    cox1.batch = 1;
    let rejected = matches!(run_pipeline(&cohort, &cox1, None), Err(Error::Argument(_)));

    // NLL with batch 1 and batch 16 both complete on the same cohort
    let mut nll_ok = true;
    for batch in [1usize, 16] {
        let mut cfg = criterion6_config(901);
        cfg.loss = LossKind::Nll;
        cfg.batch = batch;
        cfg.epochs = 30;
        match run_pipeline(&cohort, &cfg, None) {
            Ok(run) => nll_ok &= run.metrics.c_index.is_finite(),
            Err(e) => {
                nll_ok = false;
                eprintln!("nll batch {batch} failed: {e}");
            }
        }
    }
    let pass = rejected && nll_ok;
    report(
        "9 batch-size-contract",
        pass,
        &format!("cox batch 1 rejected = {rejected}, nll batch 1 and 16 completed = {nll_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let _guard = HEAVY.lock().unwrap_or_else(|p| p.into_inner());
    let data_dir = tmp_dir("det-data");
    let spec = SyntheticCohortSpec {
        n_patients: 60,
        patches_min: 150,
        patches_max: 250,
        dim: 6,
        clusters: 3,
        n_genes: 300,
        n_pathways: 10,
        seed: 10,
        ..Default::default()
    };
    cmd_generate(&spec, &data_dir).unwrap();

    let run_once = |out: &std::path::Path| -> Vec<u8> {
        let cfg = PipelineConfig {
            embeddings_dir: data_dir.join("embeddings"),
            expression_csv: data_dir.join("expression.csv"),
            survival_csv: data_dir.join("survival.csv"),
            gmt_file: data_dir.join("pathways.gmt"),
            output_dir: out.to_path_buf(),
            prototype_count: 8,
            epochs: 50,
            batch: 16,
            seed: 77,
            threads: Some(2),
            ..Default::default()
        };
        cmd_run(&cfg).unwrap();
        std::fs::read(out.join("metrics.json")).unwrap()
    };
    let a = run_once(&tmp_dir("det-out-a"));
    let b = run_once(&tmp_dir("det-out-b"));
    let pass = a == b;
    report(
        "10 determinism",
        pass,
        &format!(
            "two cmd_run invocations with identical config+seed produced {} metrics.json bytes, byte-identical = {pass}",
            a.len()
        ),
    );
    assert!(pass);
}

#[test]
fn verification_suite_matches_acceptance_checks() {
    // the CLI `verify` command runs the same pinned checks
    let checks = run_verification(None).unwrap();
    assert_eq!(checks.len(), 5);
    for c in &checks {
        assert!(c.pass, "{}", c.line());
    }
}
