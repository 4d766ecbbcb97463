//! End-to-end pipeline: ingestion, prototype building, per-patient forward
//! passes, risk-head training, evaluation, artifact emission, and the
//! verification suite behind `verify`.

use crate::aggregation::{
    aggregate_gmm, aggregate_hc, aggregate_ot, assignment_map, gmm_posteriors, AggregationBackend,
    GmmConfig, PatchEmbeddingSet, SlideSummary,
};
use crate::error::{Error, Result};
use crate::fusion::{
    attach_encodings, check_lemma1, fuse_ot, fuse_transformer, init_weights, match_dimensions,
    patient_embedding, AttentionRecord, EncodingMode, FusedTokens, FusionShapes, FusionWeights,
    ModalPool,
};
use crate::io::{self, EventConvention, Metrics};
use crate::numerics::{Matrix, SeededRng};
use crate::oracles::{
    brute_cindex, exact_ot_small, finite_diff_grad, generate_cohort, SyntheticCohort,
    SyntheticCohortSpec,
};
use crate::pathways::{tokenize, GeneIndex, GmtPolicy, PathwayCollection};
use crate::prototypes::{fit_kmeans, KMeansConfig, KMeansInit, PrototypeBank};
use crate::sinkhorn::{CostKind, SinkhornConfig};
use crate::survival::{
    concordance_index, cox_gradient, cox_loss, fit_cox_head, fit_nll_head, km_curve, logrank_test,
    stratify_median, DiscreteBins, SurvivalRecord,
};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Which fusion mechanism couples the two token sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionBackend {
    Transformer,
    Ot,
}

impl FusionBackend {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(FusionBackend::Transformer),
            "ot" => Ok(FusionBackend::Ot),
            other => Err(Error::argument(format!("unknown fusion backend '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionBackend::Transformer => "transformer",
            FusionBackend::Ot => "ot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Cox,
    Nll,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cox" => Ok(LossKind::Cox),
            "nll" => Ok(LossKind::Nll),
            other => Err(Error::argument(format!("unknown loss '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Cox => "cox",
            LossKind::Nll => "nll",
        }
    }
}

/// Full pipeline configuration. Flags mirror these fields; a key = value
/// config file may supply any of them, with flags taking precedence.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub embeddings_dir: PathBuf,
    pub expression_csv: PathBuf,
    pub survival_csv: PathBuf,
    pub gmt_file: PathBuf,
    pub output_dir: PathBuf,
    pub bank_file: Option<PathBuf>,
    pub build_prototypes: bool,

    pub prototype_count: usize,
    pub aggregation: AggregationBackend,
    pub fusion: FusionBackend,
    pub encoding: EncodingMode,
    pub d: usize,
    pub d_e: usize,
    pub d_out: usize,
    pub hidden_pre: usize,
    pub hidden_post: usize,
    pub shared_post: bool,
    pub pool_sum: bool,

    pub em_iters: usize,
    pub variance_floor: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub epsilon: f64,
    pub relative_epsilon: bool,
    pub sinkhorn_iters: usize,
    pub marginal_tol: f64,
    pub agg_cost: CostKind,
    pub fusion_cost: CostKind,
    pub normalize_columns: bool,

    pub loss: LossKind,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub n_bins: usize,

    pub seed: u64,
    pub split: f64,
    pub folds: Option<usize>,
    pub event_convention: EventConvention,
    pub log2_transform: bool,
    pub gmt_strict: bool,
    pub threads: Option<usize>,
    pub emit_interpretability: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embeddings_dir: PathBuf::new(),
            expression_csv: PathBuf::new(),
            survival_csv: PathBuf::new(),
            gmt_file: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            bank_file: None,
            build_prototypes: false,

            prototype_count: crate::prototypes::DEFAULT_PROTOTYPE_COUNT,
            aggregation: AggregationBackend::Gmm,
            fusion: FusionBackend::Transformer,
            encoding: EncodingMode::Learnable,
            d: 32,
            d_e: crate::fusion::DEFAULT_LEARNABLE_ENCODING_DIM,
            d_out: 32,
            hidden_pre: 64,
            hidden_post: 64,
            shared_post: false,
            pool_sum: false,

            em_iters: 1,
            variance_floor: 1e-6,
            kmeans_iters: 100,
            kmeans_tol: 1e-6,
            epsilon: 0.1,
            relative_epsilon: true,
            sinkhorn_iters: 1000,
            marginal_tol: 1e-6,
            agg_cost: CostKind::SqL2,
            fusion_cost: CostKind::NegDot,
            normalize_columns: false,

            loss: LossKind::Cox,
            batch: 64,
            lr: 1e-2,
            epochs: 200,
            n_bins: 4,

            seed: 0,
            split: 0.8,
            folds: None,
            event_convention: EventConvention::DeathIs1,
            log2_transform: false,
            gmt_strict: false,
            threads: None,
            emit_interpretability: true,
        }
    }
}

impl PipelineConfig {
    /// Apply one key = value pair from a config file.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::argument(format!("config key '{key}': invalid {what} '{value}'"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("integer"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("number"));
        let parse_bool = |v: &str| match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("boolean")),
        };
        match key {
            "embeddings_dir" => self.embeddings_dir = PathBuf::from(value),
            "expression_csv" => self.expression_csv = PathBuf::from(value),
            "survival_csv" => self.survival_csv = PathBuf::from(value),
            "gmt_file" => self.gmt_file = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "bank_file" => self.bank_file = Some(PathBuf::from(value)),
            "build_prototypes" => self.build_prototypes = parse_bool(value)?,
            "prototype_count" => self.prototype_count = parse_usize(value)?,
            "aggregation" => self.aggregation = AggregationBackend::parse(value)?,
            "fusion" => self.fusion = FusionBackend::parse(value)?,
            "encoding" => self.encoding = EncodingMode::parse(value)?,
            "d" => self.d = parse_usize(value)?,
            "d_e" => self.d_e = parse_usize(value)?,
            "d_out" => self.d_out = parse_usize(value)?,
            "hidden_pre" => self.hidden_pre = parse_usize(value)?,
            "hidden_post" => self.hidden_post = parse_usize(value)?,
            "shared_post" => self.shared_post = parse_bool(value)?,
            "pool_sum" => self.pool_sum = parse_bool(value)?,
            "em_iters" => self.em_iters = parse_usize(value)?,
            "variance_floor" => self.variance_floor = parse_f64(value)?,
            "kmeans_iters" => self.kmeans_iters = parse_usize(value)?,
            "kmeans_tol" => self.kmeans_tol = parse_f64(value)?,
            "epsilon" => self.epsilon = parse_f64(value)?,
            "relative_epsilon" => self.relative_epsilon = parse_bool(value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse_usize(value)?,
            "marginal_tol" => self.marginal_tol = parse_f64(value)?,
            "agg_cost" => self.agg_cost = CostKind::parse(value)?,
            "fusion_cost" => self.fusion_cost = CostKind::parse(value)?,
            "normalize_columns" => self.normalize_columns = parse_bool(value)?,
            "loss" => self.loss = LossKind::parse(value)?,
            "batch" => self.batch = parse_usize(value)?,
            "lr" => self.lr = parse_f64(value)?,
            "epochs" => self.epochs = parse_usize(value)?,
            "n_bins" => self.n_bins = parse_usize(value)?,
            "seed" => {
                self.seed = value.parse::<u64>().map_err(|_| bad("seed"))?;
            }
            "split" => self.split = parse_f64(value)?,
            "folds" => self.folds = Some(parse_usize(value)?),
            "event_convention" => self.event_convention = EventConvention::parse(value)?,
            "log2_transform" => self.log2_transform = parse_bool(value)?,
            "gmt_strict" => self.gmt_strict = parse_bool(value)?,
            "threads" => self.threads = Some(parse_usize(value)?),
            "emit_interpretability" => self.emit_interpretability = parse_bool(value)?,
            other => return Err(Error::argument(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a key = value config file (# starts a comment line).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected key = value".into(),
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn sinkhorn_for_aggregation(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_iters,
            marginal_tol: self.marginal_tol,
            cost: self.agg_cost,
            normalize_columns: self.normalize_columns,
            relative_epsilon: self.relative_epsilon,
        }
    }

    pub fn sinkhorn_for_fusion(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.sinkhorn_iters,
            marginal_tol: self.marginal_tol,
            cost: self.fusion_cost,
            normalize_columns: false,
            relative_epsilon: self.relative_epsilon,
        }
    }

    pub fn gmm(&self) -> GmmConfig {
        GmmConfig {
            em_iters: self.em_iters,
            variance_floor: self.variance_floor,
            init_sigma: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::argument("split fraction must be in (0, 1)"));
        }
        if self.prototype_count == 0 || self.d == 0 || self.d_out == 0 {
            return Err(Error::argument("model dimensions must be positive"));
        }
        if self.loss == LossKind::Cox && self.batch < 2 {
            return Err(Error::argument(
                "cox loss requires batch size >= 2; use --loss nll for single-patient batches",
            ));
        }
        Ok(())
    }
}

/// Worker count: the configured value (default 1), capped by the
/// PROTOFUSE_THREADS environment variable when it is set.
pub fn resolve_threads(configured: Option<usize>) -> usize {
    let cap = std::env::var("PROTOFUSE_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    let base = configured.or(cap).unwrap_or(1);
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Deterministic parallel map: items are processed in disjoint index chunks
/// and results land in their input slots, so the output order never depends
/// on thread scheduling.
fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.min(n).max(1);
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (t, out_chunk) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            let start = t * chunk;
            scope.spawn(move || {
                for (k, slot) in out_chunk.iter_mut().enumerate() {
                    *slot = Some(f(&items[start + k]));
                }
            });
        }
    });
    out.into_iter().map(|o| o.unwrap()).collect()
}

// ---------------------------------------------------------------------------
// cohort assembly

/// One patient with all modalities present.
#[derive(Debug, Clone)]
pub struct PatientData {
    pub patient_id: String,
    pub slide_ids: Vec<String>,
    /// Patches pooled across the patient's slides.
    pub patches: Matrix,
    pub expression: Vec<f64>,
    pub record: SurvivalRecord,
}

/// Assembled cohort plus the skipped-patient report.
#[derive(Debug)]
pub struct CohortData {
    pub patients: Vec<PatientData>,
    pub gene_index: GeneIndex,
    pub pathways: PathwayCollection,
    pub skipped: Vec<(String, String)>,
}

/// Slide files are named `<slide_id>.csv`; the patient id is the prefix
/// before the first underscore, and multi-slide patients pool their patches.
pub fn load_cohort(cfg: &PipelineConfig) -> Result<CohortData> {
    let records = io::load_survival_csv(&cfg.survival_csv, cfg.event_convention)?;
    let expression = io::load_expression_csv(&cfg.expression_csv)?;
    let gene_index = GeneIndex::new(expression.gene_names.clone())?;
    let policy = if cfg.gmt_strict {
        GmtPolicy::Strict
    } else {
        GmtPolicy::DropMissing
    };
    let pathways = crate::pathways::load_gmt(&cfg.gmt_file, &gene_index, policy)?;

    let mut expr_by_patient: HashMap<&str, &Vec<f64>> = HashMap::new();
    for (pid, values) in &expression.patients {
        expr_by_patient.insert(pid.as_str(), values);
    }

    // scan embeddings dir, group slides by patient prefix
    let mut slides_by_patient: HashMap<String, Vec<PathBuf>> = HashMap::new();
    let dir = std::fs::read_dir(&cfg.embeddings_dir)
        .map_err(|e| Error::io(cfg.embeddings_dir.display().to_string(), e))?;
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(cfg.embeddings_dir.display().to_string(), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let patient = stem.split('_').next().unwrap_or(&stem).to_string();
        slides_by_patient.entry(patient).or_default().push(path);
    }
    if slides_by_patient.is_empty() {
        return Err(Error::data(format!(
            "no slide CSV files found in {}",
            cfg.embeddings_dir.display()
        )));
    }

    let mut patients = Vec::new();
    let mut skipped = Vec::new();
    for record in &records {
        let pid = record.patient_id.as_str();
        let Some(slide_paths) = slides_by_patient.get(pid) else {
            skipped.push((pid.to_string(), "no slide embeddings".to_string()));
            continue;
        };
        let Some(expr) = expr_by_patient.get(pid) else {
            skipped.push((pid.to_string(), "no expression row".to_string()));
            continue;
        };
        let mut paths = slide_paths.clone();
        paths.sort();
        let mut slide_ids = Vec::with_capacity(paths.len());
        let mut pooled: Option<Matrix> = None;
        for p in &paths {
            let sid = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let set = io::load_embeddings_csv(p, &sid)?;
            pooled = Some(match pooled {
                None => set.embeddings().clone(),
                Some(acc) => acc.vstack(set.embeddings())?,
            });
            slide_ids.push(sid);
        }
        let mut expr_values = (*expr).clone();
        if cfg.log2_transform {
            for v in expr_values.iter_mut() {
                if *v < 0.0 {
                    return Err(Error::data(format!(
                        "log2 transform requires non-negative expression (patient {pid})"
                    )));
                }
                *v = (*v + 1.0).log2();
            }
        }
        patients.push(PatientData {
            patient_id: pid.to_string(),
            slide_ids,
            patches: pooled.unwrap(),
            expression: expr_values,
            record: record.clone(),
        });
    }
    if patients.is_empty() {
        return Err(Error::data(
            "all patients were skipped; no usable (embedding, expression, survival) triple",
        ));
    }
    patients.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(CohortData {
        patients,
        gene_index,
        pathways,
        skipped,
    })
}

/// Build an in-memory cohort directly from a generated synthetic cohort,
/// bypassing the filesystem. Pathways parse from the same GMT text the file
/// emitter writes.
pub fn cohort_from_synthetic(synth: &SyntheticCohort) -> Result<CohortData> {
    let gene_index = GeneIndex::new(synth.gene_names.clone())?;
    let pathways =
        crate::pathways::parse_gmt(&synth.gmt_text, "<generated>", &gene_index, GmtPolicy::Strict)?;
    let patients = synth
        .patients
        .iter()
        .map(|p| PatientData {
            patient_id: p.patient_id.clone(),
            slide_ids: vec![p.slide_id.clone()],
            patches: p.patches.clone(),
            expression: p.expression.clone(),
            record: p.record.clone(),
        })
        .collect();
    Ok(CohortData {
        patients,
        gene_index,
        pathways,
        skipped: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// splits

// derived-stream ids: 1 = split, 2 = folds, 3 = bank, 4 = head
const STREAM_SPLIT: u64 = 1;
const STREAM_FOLDS: u64 = 2;
const STREAM_BANK: u64 = 3;
const STREAM_HEAD: u64 = 4;

/// Seeded train/test split over patient indices (already sorted by id).
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed).derive(STREAM_SPLIT);
    rng.shuffle(&mut order);
    let n_train = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Seeded k-fold assignment: fold id per patient index.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed).derive(STREAM_FOLDS);
    rng.shuffle(&mut order);
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    assignment
}

// ---------------------------------------------------------------------------
// forward pass

/// Everything produced for one patient by the forward pass.
pub struct PatientForward {
    pub patient_id: String,
    pub summary: SlideSummary,
    pub posteriors: Option<Matrix>,
    pub assignment: Vec<usize>,
    pub fused: FusedTokens,
    pub embedding: Vec<f64>,
    pub n_patches: usize,
}

/// Affine feature normalization fitted on the training split.
///
/// The fusion network's projections are fixed random maps, so inputs must
/// arrive in the network's working range (a learned projection would absorb
/// scale and offset; a random one cannot). Three fits, all applied as
/// `out_j = offset_j + (x_j - mean_j) * scale_j`:
///
/// * `fit_operating_point` — token inputs. The per-feature mean, rescaled to
///   unit RMS, becomes a constant carrier (the operating point); the
///   variation around it is scaled globally by the inverse RMS standard
///   deviation so relative feature variances are preserved and low-variance
///   noise features stay small. Layer norm and SELU then see O(1) tokens
///   whose across-patient variation rides on a non-zero base.
/// * `fit_centered` — patient embeddings entering the trained risk head:
///   center per feature, one global scale.
/// * `fit` — full per-feature z-score (constant features map to zero).
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    offset: Vec<f64>,
    scale: Vec<f64>,
}

fn column_moments(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0f64; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for r in rows {
        for j in 0..dim {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

impl Standardizer {
    /// Per-feature z-score.
    pub fn fit(rows: &[&[f64]]) -> Standardizer {
        let (mean, var) = column_moments(rows);
        let scale = var
            .iter()
            .map(|v| {
                let sd = v.sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        Standardizer {
            offset: vec![0.0; mean.len()],
            mean,
            scale,
        }
    }

    /// Center per feature, scale globally by the RMS standard deviation.
    pub fn fit_centered(rows: &[&[f64]]) -> Standardizer {
        let (mean, var) = column_moments(rows);
        let dim = mean.len().max(1) as f64;
        let rms = (var.iter().sum::<f64>() / dim).sqrt();
        let g = if rms > 1e-8 { 1.0 / rms } else { 1.0 };
        Standardizer {
            offset: vec![0.0; mean.len()],
            scale: vec![g; mean.len()],
            mean,
        }
    }

    /// Unit-RMS constant carrier plus globally scaled variation.
    pub fn fit_operating_point(rows: &[&[f64]]) -> Standardizer {
        let (mean, var) = column_moments(rows);
        let dim = mean.len().max(1) as f64;
        let rms_mean = (mean.iter().map(|m| m * m).sum::<f64>() / dim).sqrt();
        let rms_sd = (var.iter().sum::<f64>() / dim).sqrt();
        let inv_mean = if rms_mean > 1e-8 { 1.0 / rms_mean } else { 1.0 };
        let g = if rms_sd > 1e-8 { 1.0 / rms_sd } else { 1.0 };
        Standardizer {
            offset: mean.iter().map(|m| m * inv_mean).collect(),
            scale: vec![g; mean.len()],
            mean,
        }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| self.offset[j] + (v - self.mean[j]) * self.scale[j])
            .collect()
    }
}

fn summarize_patient(
    patient: &PatientData,
    bank: &PrototypeBank,
    cfg: &PipelineConfig,
    want_posteriors: bool,
) -> Result<(SlideSummary, Option<Matrix>, Vec<usize>)> {
    let set = PatchEmbeddingSet::new(&patient.patient_id, patient.patches.clone())?;
    let summary = match cfg.aggregation {
        AggregationBackend::Gmm => aggregate_gmm(&set, bank, &cfg.gmm())?,
        AggregationBackend::Ot => aggregate_ot(&set, bank, &cfg.sinkhorn_for_aggregation())?,
        AggregationBackend::Hc => aggregate_hc(&set, bank)?,
    };
    let posteriors = if want_posteriors && cfg.aggregation == AggregationBackend::Gmm {
        Some(gmm_posteriors(&set, bank, &cfg.gmm())?)
    } else {
        None
    };
    let assignment = assignment_map(&set, bank)?;
    Ok((summary, posteriors, assignment))
}

/// Summarize, standardize on train statistics, fuse, and embed the whole
/// cohort. Returns per-patient artifacts (raw summaries for export) and the
/// standardized patient-embedding matrix used by the risk head.
fn forward_cohort(
    cohort: &CohortData,
    cfg: &PipelineConfig,
    bank: &PrototypeBank,
    weights: &FusionWeights,
    train_idx: &[usize],
    want_posteriors: bool,
) -> Result<(Vec<PatientForward>, Matrix)> {
    let threads = resolve_threads(cfg.threads);
    let n = cohort.patients.len();

    // phase 1: aggregation + tokenization (the expensive per-patient work)
    let stage1: Vec<Result<(SlideSummary, Option<Matrix>, Vec<usize>, Vec<f64>)>> =
        parallel_map(&cohort.patients, threads, |p| {
            let (summary, posteriors, assignment) =
                summarize_patient(p, bank, cfg, want_posteriors)?;
            let tokens = tokenize(&p.expression, &cohort.pathways)?;
            let flat_tokens: Vec<f64> = tokens.tokens().iter().flatten().copied().collect();
            Ok((summary, posteriors, assignment, flat_tokens))
        });
    let mut summaries = Vec::with_capacity(n);
    for r in stage1 {
        summaries.push(r?);
    }

    // train-split standardizers for both token families
    let train_summary_rows: Vec<&[f64]> = train_idx
        .iter()
        .map(|&i| summaries[i].0.rows.data())
        .collect();
    let summary_std = Standardizer::fit_operating_point(&train_summary_rows);
    let train_token_rows: Vec<&[f64]> = train_idx
        .iter()
        .map(|&i| summaries[i].3.as_slice())
        .collect();
    let token_std = Standardizer::fit_operating_point(&train_token_rows);

    let pathway_sizes = cohort.pathways.sizes();
    let inputs: Vec<(usize, Matrix, crate::pathways::PathwaySummary)> = summaries
        .iter()
        .enumerate()
        .map(|(i, (summary, _, _, flat_tokens))| {
            let std_rows = summary_std.apply(summary.rows.data());
            let std_summary =
                Matrix::from_vec(summary.rows.rows(), summary.rows.cols(), std_rows).unwrap();
            let std_flat = token_std.apply(flat_tokens);
            let mut tokens = Vec::with_capacity(pathway_sizes.len());
            let mut offset = 0;
            for &len in &pathway_sizes {
                tokens.push(std_flat[offset..offset + len].to_vec());
                offset += len;
            }
            (i, std_summary, crate::pathways::PathwaySummary::from_tokens(tokens))
        })
        .collect();

    // phase 2: fusion forward
    let stage2: Vec<Result<(FusedTokens, Vec<f64>)>> =
        parallel_map(&inputs, threads, |(_, std_summary, std_tokens)| {
            let (z_h, z_g) = match_dimensions(std_summary, std_tokens, weights)?;
            let (z_h_enc, z_g_enc) = attach_encodings(&z_h, &z_g, &weights.encoding)?;
            let fused = match cfg.fusion {
                FusionBackend::Transformer => fuse_transformer(&z_g_enc, &z_h_enc, weights)?,
                FusionBackend::Ot => {
                    fuse_ot(&z_g_enc, &z_h_enc, weights, &cfg.sinkhorn_for_fusion())?
                }
            };
            let embedding = patient_embedding(&fused, weights)?;
            Ok((fused, embedding))
        });

    let mut forwards = Vec::with_capacity(n);
    for (r, (summary, posteriors, assignment, _)) in stage2.into_iter().zip(summaries) {
        let (fused, embedding) = r?;
        let i = forwards.len();
        forwards.push(PatientForward {
            patient_id: cohort.patients[i].patient_id.clone(),
            summary,
            posteriors,
            assignment,
            fused,
            embedding,
            n_patches: cohort.patients[i].patches.rows(),
        });
    }

    // standardized embeddings for the linear head
    let emb_rows: Vec<&[f64]> = train_idx
        .iter()
        .map(|&i| forwards[i].embedding.as_slice())
        .collect();
    let emb_std = Standardizer::fit_centered(&emb_rows);
    let emb_dim = forwards[0].embedding.len();
    let mut embeddings = Matrix::zeros(n, emb_dim);
    for (i, f) in forwards.iter().enumerate() {
        embeddings
            .row_mut(i)
            .copy_from_slice(&emb_std.apply(&f.embedding));
    }
    Ok((forwards, embeddings))
}

// ---------------------------------------------------------------------------
// run

/// Token and compression accounting for one run.
#[derive(Debug, Clone)]
pub struct Accounting {
    pub patients_used: usize,
    pub mean_patches: f64,
    pub min_patches: usize,
    pub max_patches: usize,
    pub prototype_count: usize,
    pub pathway_count: usize,
    /// Tokens entering the fusion stage: C_g + C_h.
    pub fusion_tokens: usize,
    /// mean N_h / C_h.
    pub reduction_ratio: f64,
}

impl Accounting {
    pub fn log_lines(&self) -> Vec<String> {
        vec![
            format!(
                "token reduction: mean N_h = {}, C_h = {}, ratio = {}",
                self.mean_patches, self.prototype_count, self.reduction_ratio
            ),
            format!(
                "fusion stage processes {} tokens (C_g = {} + C_h = {})",
                self.fusion_tokens, self.pathway_count, self.prototype_count
            ),
        ]
    }
}

/// One patient's scored outcome.
#[derive(Debug, Clone)]
pub struct RiskRow {
    pub patient_id: String,
    pub risk: f64,
    /// "train" / "test" for a single split, "fold<k>" under k-fold.
    pub split: String,
}

/// Everything a run produces before any files are written.
pub struct RunArtifacts {
    pub metrics: Metrics,
    pub risks: Vec<RiskRow>,
    pub accounting: Accounting,
    pub bank: PrototypeBank,
    pub weights: FusionWeights,
    pub forwards: Vec<PatientForward>,
    pub skipped: Vec<(String, String)>,
    pub test_c_index: f64,
}

/// Pool the training patients' patches and fit the prototype bank.
pub fn build_bank(
    cohort: &CohortData,
    train_idx: &[usize],
    cfg: &PipelineConfig,
) -> Result<(PrototypeBank, f64, usize)> {
    let mut pooled: Option<Matrix> = None;
    for &i in train_idx {
        let p = &cohort.patients[i].patches;
        pooled = Some(match pooled {
            None => p.clone(),
            Some(acc) => acc.vstack(p)?,
        });
    }
    let pooled = pooled.ok_or_else(|| Error::data("no training patients to pool"))?;
    if pooled.rows() < cfg.prototype_count {
        return Err(Error::data(format!(
            "pooled training patches ({}) are fewer than the prototype count ({})",
            pooled.rows(),
            cfg.prototype_count
        )));
    }
    let kcfg = KMeansConfig {
        prototype_count: cfg.prototype_count,
        max_iters: cfg.kmeans_iters,
        tol: cfg.kmeans_tol,
        init: KMeansInit::KMeansPlusPlus,
    };
    let mut rng = SeededRng::new(cfg.seed).derive(STREAM_BANK);
    let fit = fit_kmeans(&pooled, &kcfg, &mut rng)?;
    Ok((fit.bank, fit.wcss, pooled.rows()))
}

fn mean_expression_dim_check(cohort: &CohortData) -> Result<()> {
    let n_g = cohort.gene_index.len();
    for p in &cohort.patients {
        if p.expression.len() != n_g {
            return Err(Error::data(format!(
                "patient {} expression length {} != gene index {}",
                p.patient_id,
                p.expression.len(),
                n_g
            )));
        }
    }
    Ok(())
}

/// Run the pipeline on an assembled cohort: build or accept a bank, forward
/// every patient, train the configured risk head on the training split, and
/// score the held-out split.
pub fn run_pipeline(
    cohort: &CohortData,
    cfg: &PipelineConfig,
    bank: Option<PrototypeBank>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    mean_expression_dim_check(cohort)?;
    let n = cohort.patients.len();
    if n < 2 {
        return Err(Error::data("pipeline needs at least two usable patients"));
    }
    let (train_idx, test_idx) = split_indices(n, cfg.split, cfg.seed);

    let bank = match bank {
        Some(b) => {
            if b.count() != cfg.prototype_count {
                return Err(Error::argument(format!(
                    "bank has {} prototypes, config asks for {}",
                    b.count(),
                    cfg.prototype_count
                )));
            }
            b
        }
        None => build_bank(cohort, &train_idx, cfg)?.0,
    };

    let d_h = match cfg.aggregation {
        AggregationBackend::Gmm => 2 * bank.dim() + 1,
        _ => bank.dim(),
    };
    let shapes = FusionShapes {
        c_g: cohort.pathways.len(),
        c_h: cfg.prototype_count,
        d_h,
        pathway_sizes: cohort.pathways.sizes(),
        d: cfg.d,
        hidden_pre: cfg.hidden_pre,
        d_out: cfg.d_out,
        hidden_post: cfg.hidden_post,
        d_e: cfg.d_e,
        per_prototype_post: !cfg.shared_post,
    };
    let pool = if cfg.pool_sum {
        ModalPool::Sum
    } else {
        ModalPool::Mean
    };
    let weights = init_weights(shapes, cfg.seed, cfg.encoding, pool)?;

    let want_posteriors = cfg.emit_interpretability;
    let (forwards, embeddings) =
        forward_cohort(cohort, cfg, &bank, &weights, &train_idx, want_posteriors)?;
    let records: Vec<SurvivalRecord> = cohort
        .patients
        .iter()
        .map(|p| p.record.clone())
        .collect();

    let train_emb_rows: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| embeddings.row(i).to_vec())
        .collect();
    let train_emb = Matrix::from_rows(&train_emb_rows)?;
    let train_rec: Vec<SurvivalRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();

    let mut head_rng = SeededRng::new(cfg.seed).derive(STREAM_HEAD);
    let scores: Vec<f64> = match cfg.loss {
        LossKind::Cox => {
            let head = fit_cox_head(
                &train_emb,
                &train_rec,
                cfg.lr,
                cfg.epochs,
                cfg.batch,
                &mut head_rng,
            )?;
            head.score_all(&embeddings)
        }
        LossKind::Nll => {
            let bins = DiscreteBins::from_quantiles(&train_rec, cfg.n_bins)?;
            let head = fit_nll_head(
                &train_emb,
                &train_rec,
                bins,
                cfg.lr,
                cfg.epochs,
                cfg.batch,
                &mut head_rng,
            )?;
            (0..n).map(|i| head.risk(embeddings.row(i))).collect()
        }
    };

    let test_scores: Vec<f64> = test_idx.iter().map(|&i| scores[i]).collect();
    let test_records: Vec<SurvivalRecord> = test_idx.iter().map(|&i| records[i].clone()).collect();
    let c_index = concordance_index(&test_scores, &test_records)?;
    let (high, low) = stratify_median(&test_scores, &test_records)?;
    let high_owned: Vec<SurvivalRecord> = high.into_iter().cloned().collect();
    let low_owned: Vec<SurvivalRecord> = low.into_iter().cloned().collect();
    let lr = logrank_test(&high_owned, &low_owned)?;
    let km_high = km_curve(&high_owned)?;
    let km_low = km_curve(&low_owned)?;

    let mut risks = Vec::with_capacity(n);
    let train_set: std::collections::HashSet<usize> = train_idx.iter().copied().collect();
    for i in 0..n {
        risks.push(RiskRow {
            patient_id: cohort.patients[i].patient_id.clone(),
            risk: scores[i],
            split: if train_set.contains(&i) { "train" } else { "test" }.to_string(),
        });
    }

    let patch_counts: Vec<usize> = forwards.iter().map(|f| f.n_patches).collect();
    let mean_patches = patch_counts.iter().sum::<usize>() as f64 / n as f64;
    let accounting = Accounting {
        patients_used: n,
        mean_patches,
        min_patches: *patch_counts.iter().min().unwrap(),
        max_patches: *patch_counts.iter().max().unwrap(),
        prototype_count: cfg.prototype_count,
        pathway_count: cohort.pathways.len(),
        fusion_tokens: cohort.pathways.len() + cfg.prototype_count,
        reduction_ratio: mean_patches / cfg.prototype_count as f64,
    };

    Ok(RunArtifacts {
        metrics: Metrics {
            c_index,
            logrank_chi_sq: lr.chi_sq,
            logrank_p: lr.p,
            km_high,
            km_low,
        },
        risks,
        accounting,
        bank,
        weights,
        forwards,
        skipped: cohort.skipped.clone(),
        test_c_index: c_index,
    })
}

/// Pooled out-of-fold evaluation: train on k-1 folds, score the held-out
/// fold, pool all out-of-fold scores for the cohort-level metrics.
pub fn run_kfold(cohort: &CohortData, cfg: &PipelineConfig, folds: usize) -> Result<Metrics> {
    Ok(run_kfold_full(cohort, cfg, folds)?.0)
}

/// K-fold evaluation returning both the pooled metrics and the per-patient
/// out-of-fold risks.
pub fn run_kfold_full(
    cohort: &CohortData,
    cfg: &PipelineConfig,
    folds: usize,
) -> Result<(Metrics, Vec<RiskRow>)> {
    if folds < 2 {
        return Err(Error::argument("k-fold needs at least 2 folds"));
    }
    let n = cohort.patients.len();
    if n < folds {
        return Err(Error::data("fewer patients than folds"));
    }
    let assignment = fold_assignment(n, folds, cfg.seed);
    let mut pooled_scores = vec![0.0f64; n];
    for fold in 0..folds {
        let train_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        let test_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let sub = run_pipeline_with_split(cohort, cfg, &train_idx, &test_idx)?;
        for (&i, s) in test_idx.iter().zip(&sub) {
            pooled_scores[i] = *s;
        }
    }
    let records: Vec<SurvivalRecord> = cohort.patients.iter().map(|p| p.record.clone()).collect();
    let c_index = concordance_index(&pooled_scores, &records)?;
    let (high, low) = stratify_median(&pooled_scores, &records)?;
    let high_owned: Vec<SurvivalRecord> = high.into_iter().cloned().collect();
    let low_owned: Vec<SurvivalRecord> = low.into_iter().cloned().collect();
    let lr = logrank_test(&high_owned, &low_owned)?;
    let risks = (0..n)
        .map(|i| RiskRow {
            patient_id: cohort.patients[i].patient_id.clone(),
            risk: pooled_scores[i],
            split: format!("fold{}", assignment[i]),
        })
        .collect();
    Ok((
        Metrics {
            c_index,
            logrank_chi_sq: lr.chi_sq,
            logrank_p: lr.p,
            km_high: km_curve(&high_owned)?,
            km_low: km_curve(&low_owned)?,
        },
        risks,
    ))
}

/// Train on the given indices and return held-out scores (fold machinery).
fn run_pipeline_with_split(
    cohort: &CohortData,
    cfg: &PipelineConfig,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<Vec<f64>> {
    let (bank, _, _) = build_bank(cohort, train_idx, cfg)?;
    let d_h = match cfg.aggregation {
        AggregationBackend::Gmm => 2 * bank.dim() + 1,
        _ => bank.dim(),
    };
    let shapes = FusionShapes {
        c_g: cohort.pathways.len(),
        c_h: cfg.prototype_count,
        d_h,
        pathway_sizes: cohort.pathways.sizes(),
        d: cfg.d,
        hidden_pre: cfg.hidden_pre,
        d_out: cfg.d_out,
        hidden_post: cfg.hidden_post,
        d_e: cfg.d_e,
        per_prototype_post: !cfg.shared_post,
    };
    let pool = if cfg.pool_sum {
        ModalPool::Sum
    } else {
        ModalPool::Mean
    };
    let weights = init_weights(shapes, cfg.seed, cfg.encoding, pool)?;
    let (_, embeddings) = forward_cohort(cohort, cfg, &bank, &weights, train_idx, false)?;
    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| embeddings.row(i).to_vec()).collect();
    let train_emb = Matrix::from_rows(&train_rows)?;
    let train_rec: Vec<SurvivalRecord> = train_idx
        .iter()
        .map(|&i| cohort.patients[i].record.clone())
        .collect();
    let mut head_rng = SeededRng::new(cfg.seed).derive(STREAM_HEAD);
    match cfg.loss {
        LossKind::Cox => {
            let head = fit_cox_head(
                &train_emb,
                &train_rec,
                cfg.lr,
                cfg.epochs,
                cfg.batch,
                &mut head_rng,
            )?;
            Ok(test_idx
                .iter()
                .map(|&i| head.score(embeddings.row(i)))
                .collect())
        }
        LossKind::Nll => {
            let bins = DiscreteBins::from_quantiles(&train_rec, cfg.n_bins)?;
            let head = fit_nll_head(
                &train_emb,
                &train_rec,
                bins,
                cfg.lr,
                cfg.epochs,
                cfg.batch,
                &mut head_rng,
            )?;
            Ok(test_idx
                .iter()
                .map(|&i| head.risk(embeddings.row(i)))
                .collect())
        }
    }
}

// ---------------------------------------------------------------------------
// file-level commands

/// Build the prototype bank from the training split and write it as CSV.
pub fn cmd_build_prototypes(cfg: &PipelineConfig) -> Result<PathBuf> {
    let cohort = load_cohort(cfg)?;
    let (train_idx, _) = split_indices(cohort.patients.len(), cfg.split, cfg.seed);
    let (bank, wcss, pooled_n) = build_bank(&cohort, &train_idx, cfg)?;
    let path = cfg.output_dir.join("bank.csv");
    io::write_bank_csv(&path, &bank)?;
    println!(
        "prototype bank: pooled N = {pooled_n}, C_h = {}, WCSS = {wcss}",
        bank.count()
    );
    println!("wrote {}", path.display());
    Ok(path)
}

/// Run the full pipeline from files and write every artifact.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<Option<RunArtifacts>> {
    let cohort = load_cohort(cfg)?;
    if let Some(folds) = cfg.folds {
        // k-fold mode: pooled out-of-fold metrics and risks, no per-patient
        // interpretability artifacts (each patient is scored by a different
        // fold's network)
        let (metrics, risks) = run_kfold_full(&cohort, cfg, folds)?;
        io::write_metrics_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
        let rows: Vec<(String, f64, &str)> = risks
            .iter()
            .map(|r| (r.patient_id.clone(), r.risk, r.split.as_str()))
            .collect();
        io::write_risk_csv(&cfg.output_dir.join("risk_scores.csv"), &rows)?;
        println!("{folds}-fold pooled c_index = {}", metrics.c_index);
        return Ok(None);
    }
    let bank = match (&cfg.bank_file, cfg.build_prototypes) {
        (Some(path), false) => Some(io::load_bank_csv(path)?),
        _ => None,
    };
    let artifacts = run_pipeline(&cohort, cfg, bank)?;
    write_artifacts(cfg, &artifacts)?;
    Ok(Some(artifacts))
}

fn write_artifacts(cfg: &PipelineConfig, artifacts: &RunArtifacts) -> Result<()> {
    let out = &cfg.output_dir;
    io::write_metrics_json(&out.join("metrics.json"), &artifacts.metrics)?;
    let rows: Vec<(String, f64, &str)> = artifacts
        .risks
        .iter()
        .map(|r| (r.patient_id.clone(), r.risk, r.split.as_str()))
        .collect();
    io::write_risk_csv(&out.join("risk_scores.csv"), &rows)?;
    io::write_bank_csv(&out.join("bank.csv"), &artifacts.bank)?;
    io::write_weights_csv(&out.join("weights.csv"), &artifacts.weights)?;

    let mut skipped = String::from("patient_id,reason\n");
    for (pid, reason) in &artifacts.skipped {
        skipped.push_str(&format!("{pid},{reason}\n"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    std::fs::write(out.join("skipped_patients.csv"), skipped)
        .map_err(|e| Error::io(out.display().to_string(), e))?;

    let mut log = artifacts.accounting.log_lines().join("\n");
    log.push('\n');
    log.push_str(&format!("held-out c_index = {}\n", artifacts.test_c_index));
    std::fs::write(out.join("run_log.txt"), &log)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    for line in artifacts.accounting.log_lines() {
        println!("{line}");
    }

    if cfg.emit_interpretability {
        for f in &artifacts.forwards {
            io::write_summary_csv(
                &out.join("summaries").join(format!("{}.csv", f.patient_id)),
                &f.summary,
            )?;
            if let Some(post) = &f.posteriors {
                io::write_posterior_csv(
                    &out.join("posteriors").join(format!("{}.csv", f.patient_id)),
                    &f.patient_id,
                    post,
                )?;
            }
            io::write_assignment_csv(
                &out.join("assignments").join(format!("{}.csv", f.patient_id)),
                &f.patient_id,
                &f.assignment,
            )?;
            match &f.fused.record {
                AttentionRecord::Transformer { full } => {
                    io::write_attention_csv(
                        &out.join("attention").join(format!("{}.csv", f.patient_id)),
                        full,
                    )?;
                }
                AttentionRecord::Ot {
                    plan,
                    self_g,
                    self_h,
                } => {
                    let dir = out.join("attention");
                    io::write_attention_csv(&dir.join(format!("{}_plan.csv", f.patient_id)), plan)?;
                    io::write_attention_csv(
                        &dir.join(format!("{}_self_g.csv", f.patient_id)),
                        self_g,
                    )?;
                    io::write_attention_csv(
                        &dir.join(format!("{}_self_h.csv", f.patient_id)),
                        self_h,
                    )?;
                }
            }
        }
    }
    println!("held-out c_index = {}", artifacts.test_c_index);
    println!("artifacts written to {}", out.display());
    Ok(())
}

/// Emit the synthetic cohort as the full CLI input file set.
pub fn cmd_generate(spec: &SyntheticCohortSpec, out_dir: &Path) -> Result<()> {
    let cohort = generate_cohort(spec)?;
    let emb_dir = out_dir.join("embeddings");
    std::fs::create_dir_all(&emb_dir).map_err(|e| Error::io(emb_dir.display().to_string(), e))?;
    for p in &cohort.patients {
        let set = PatchEmbeddingSet::new(&p.slide_id, p.patches.clone())?;
        io::write_embeddings_csv(&emb_dir.join(format!("{}.csv", p.slide_id)), &set)?;
    }
    let table = io::ExpressionTable {
        gene_names: cohort.gene_names.clone(),
        patients: cohort
            .patients
            .iter()
            .map(|p| (p.patient_id.clone(), p.expression.clone()))
            .collect(),
    };
    io::write_expression_csv(&out_dir.join("expression.csv"), &table)?;
    let records: Vec<SurvivalRecord> = cohort.patients.iter().map(|p| p.record.clone()).collect();
    io::write_survival_csv(&out_dir.join("survival.csv"), &records)?;
    std::fs::write(out_dir.join("pathways.gmt"), &cohort.gmt_text)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut truth = String::from("patient_id,intended_fraction,realized_fraction\n");
    for p in &cohort.patients {
        truth.push_str(&format!(
            "{},{},{}\n",
            p.patient_id, p.truth.intended_fraction, p.truth.realized_fraction
        ));
    }
    std::fs::write(out_dir.join("planted_truth.csv"), truth)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    println!(
        "generated {} patients under {}",
        cohort.patients.len(),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verification suite

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub max_dev: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{}: {} (max deviation {:.3e}) {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_dev,
            self.detail
        )
    }
}

/// Cross-attention equivalence sweep: random (C_g, C_h, d) instances, the
/// row-constrained OT plan times C_g must match row-softmax within 1e-8.
pub fn verify_lemma_sweep(instances: usize) -> CheckResult {
    let mut rng = SeededRng::new(0x1e44a);
    let mut max_dev = 0.0f64;
    let mut pass = true;
    for _ in 0..instances {
        let c_g = 1 + rng.index(8);
        let c_h = 1 + rng.index(8);
        let d = 1 + rng.index(8);
        let mat = |r: usize, c: usize, rng: &mut SeededRng| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
        };
        let z_g = mat(c_g, d, &mut rng);
        let z_h = mat(c_h, d, &mut rng);
        let w_q = mat(d, d, &mut rng);
        let w = mat(d, d, &mut rng);
        match check_lemma1(&z_g, &z_h, &w_q, &w, 1e-8) {
            Ok(rep) => {
                max_dev = max_dev.max(rep.max_abs_dev);
                pass &= rep.pass;
            }
            Err(e) => {
                return CheckResult {
                    name: "lemma1-equivalence",
                    pass: false,
                    max_dev: f64::INFINITY,
                    detail: format!("solver error: {e}"),
                };
            }
        }
    }
    CheckResult {
        name: "lemma1-equivalence",
        pass,
        max_dev,
        detail: format!("{instances} instances, tolerance 1e-8"),
    }
}

/// EM monotonicity sweep: the data log-likelihood must be non-decreasing
/// across iterations, violations bounded by 1e-9.
pub fn verify_em_monotonicity(instances: usize) -> CheckResult {
    let mut rng = SeededRng::new(0xe4);
    let dims = [2usize, 16, 64];
    let comps = [2usize, 8, 16];
    let mut worst_drop = 0.0f64;
    let mut pass = true;
    for inst in 0..instances {
        let n = 50 + rng.index(1951);
        let d = dims[inst % dims.len()];
        let c = comps[inst % comps.len()];
        // loose gaussian blobs so responsibilities stay mixed
        let mut centers = Matrix::zeros(c, d);
        for k in 0..c {
            for j in 0..d {
                centers.set(k, j, 3.0 * rng.normal());
            }
        }
        let mut data = Matrix::zeros(n, d);
        for i in 0..n {
            let k = rng.index(c);
            for j in 0..d {
                data.set(i, j, centers.get(k, j) + rng.normal());
            }
        }
        let set = PatchEmbeddingSet::new("v", data).unwrap();
        let bank = PrototypeBank::new(centers, 0).unwrap();
        let cfg = GmmConfig {
            em_iters: 5,
            ..Default::default()
        };
        let trace = match crate::aggregation::gmm_loglik_trace(&set, &bank, &cfg) {
            Ok(t) => t,
            Err(e) => {
                return CheckResult {
                    name: "em-monotonicity",
                    pass: false,
                    max_dev: f64::INFINITY,
                    detail: format!("EM error: {e}"),
                };
            }
        };
        for w in trace.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop);
            if drop > 1e-9 {
                pass = false;
            }
        }
    }
    CheckResult {
        name: "em-monotonicity",
        pass,
        max_dev: worst_drop,
        detail: format!("{instances} instances x 5 iterations, tolerance 1e-9"),
    }
}

/// Sinkhorn marginal constraints on aggregation- and fusion-shaped problems,
/// plus agreement with the small dense reference solver.
pub fn verify_sinkhorn_marginals() -> CheckResult {
    let mut rng = SeededRng::new(0x0c);
    let mut max_dev = 0.0f64;
    let mut pass = true;
    let mut detail_err = None;

    // aggregation-shaped problems
    for _ in 0..12 {
        let n = 20 + rng.index(81);
        let c = 2 + rng.index(7);
        let d = 2 + rng.index(7);
        let data = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let centroids =
            Matrix::from_vec(c, d, (0..c * d).map(|_| rng.normal()).collect()).unwrap();
        let set = PatchEmbeddingSet::new("v", data).unwrap();
        let bank = PrototypeBank::new(centroids, 0).unwrap();
        let cfg = SinkhornConfig::default();
        match crate::aggregation::ot_plan(&set, &bank, &cfg) {
            Ok(plan) => {
                for i in 0..n {
                    let s: f64 = plan.row(i).iter().sum();
                    max_dev = max_dev.max((s - 1.0 / n as f64).abs());
                }
                for j in 0..c {
                    let s: f64 = (0..n).map(|i| plan.get(i, j)).sum();
                    max_dev = max_dev.max((s - 1.0 / c as f64).abs());
                }
            }
            Err(e) => {
                pass = false;
                detail_err = Some(format!("aggregation OT failed: {e}"));
            }
        }
    }
    // fusion-shaped problems through the real fuse_ot path
    for _ in 0..12 {
        let c_g = 2 + rng.index(7);
        let c_h = 2 + rng.index(7);
        let d = 2 + rng.index(7);
        let shapes = FusionShapes {
            c_g,
            c_h,
            d_h: d,
            pathway_sizes: vec![2; c_g],
            d,
            hidden_pre: 4,
            d_out: 4,
            hidden_post: 4,
            d_e: 0,
            per_prototype_post: false,
        };
        let w = match init_weights(shapes, rng.index(1 << 30) as u64, EncodingMode::None, ModalPool::Mean) {
            Ok(w) => w,
            Err(e) => {
                return CheckResult {
                    name: "sinkhorn-marginals",
                    pass: false,
                    max_dev: f64::INFINITY,
                    detail: format!("weight init failed: {e}"),
                };
            }
        };
        let z_g = Matrix::from_vec(c_g, d, (0..c_g * d).map(|_| rng.normal()).collect()).unwrap();
        let z_h = Matrix::from_vec(c_h, d, (0..c_h * d).map(|_| rng.normal()).collect()).unwrap();
        let cfg = SinkhornConfig {
            cost: CostKind::NegDot,
            max_iters: 300_000,
            ..Default::default()
        };
        match fuse_ot(&z_g, &z_h, &w, &cfg) {
            Ok(ft) => {
                if let AttentionRecord::Ot { plan, .. } = &ft.record {
                    for i in 0..c_g {
                        let s: f64 = plan.row(i).iter().sum();
                        max_dev = max_dev.max((s - 1.0 / c_g as f64).abs());
                    }
                    for j in 0..c_h {
                        let s: f64 = (0..c_g).map(|i| plan.get(i, j)).sum();
                        max_dev = max_dev.max((s - 1.0 / c_h as f64).abs());
                    }
                }
            }
            Err(e) => {
                pass = false;
                detail_err = Some(format!("fusion OT failed: {e}"));
            }
        }
    }
    // reference agreement on small instances
    let mut ref_dev = 0.0f64;
    for _ in 0..12 {
        let m = 2 + rng.index(7);
        let k = 2 + rng.index(7.min(64 / m).max(2) - 1);
        let cost =
            Matrix::from_vec(m, k, (0..m * k).map(|_| rng.uniform() * 2.0).collect()).unwrap();
        let a = vec![1.0 / m as f64; m];
        let b = vec![1.0 / k as f64; k];
        let eps = 0.2 + rng.uniform();
        match (
            exact_ot_small(&cost, &a, &b, eps),
            crate::sinkhorn::sinkhorn_balanced(&cost, &a, &b, eps, 200_000, 1e-13),
        ) {
            (Ok(reference), Ok(sol)) => {
                for i in 0..m {
                    for j in 0..k {
                        ref_dev = ref_dev.max((reference.get(i, j) - sol.plan.get(i, j)).abs());
                    }
                }
            }
            (r, s) => {
                pass = false;
                detail_err = Some(format!(
                    "reference comparison failed: ref ok={}, solver ok={}",
                    r.is_ok(),
                    s.is_ok()
                ));
            }
        }
    }
    if max_dev >= 1e-6 || ref_dev >= 1e-10 {
        pass = false;
    }
    CheckResult {
        name: "sinkhorn-marginals",
        pass,
        max_dev: max_dev.max(ref_dev),
        detail: detail_err.unwrap_or_else(|| {
            format!("marginal dev {max_dev:.3e} (tol 1e-6), reference dev {ref_dev:.3e} (tol 1e-10)")
        }),
    }
}

/// Cox analytic gradient against central finite differences.
pub fn verify_cox_gradient(instances: usize, sabotage: bool) -> CheckResult {
    let mut rng = SeededRng::new(0xc0);
    let mut max_rel = 0.0f64;
    for _ in 0..instances {
        let n = 2 + rng.index(39);
        let censor_prob = rng.uniform() * 0.6;
        // integer-grid times so ties occur
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|i| {
                SurvivalRecord::new(
                    format!("p{i}"),
                    (1 + rng.index(10)) as f64,
                    rng.uniform() >= censor_prob,
                )
                .unwrap()
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut analytic = match cox_gradient(&scores, &records) {
            Ok(g) => g,
            Err(e) => {
                return CheckResult {
                    name: "cox-gradient",
                    pass: false,
                    max_dev: f64::INFINITY,
                    detail: format!("gradient error: {e}"),
                };
            }
        };
        if sabotage {
            for g in analytic.iter_mut() {
                *g = -*g;
            }
        }
        let fd = finite_diff_grad(
            |s| cox_loss(s, &records).unwrap(),
            &scores,
            1e-6,
        );
        for i in 0..n {
            let rel = (analytic[i] - fd[i]).abs() / fd[i].abs().max(1e-2);
            max_rel = max_rel.max(rel);
        }
    }
    CheckResult {
        name: "cox-gradient",
        pass: max_rel < 1e-5,
        max_dev: max_rel,
        detail: format!("{instances} instances vs central differences (h = 1e-6), tol 1e-5"),
    }
}

/// Concordance index equality against the pair-enumeration oracle.
pub fn verify_cindex(instances: usize) -> CheckResult {
    let mut rng = SeededRng::new(0xc1);
    let mut pass = true;
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let n = 2 + rng.index(40);
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|i| {
                SurvivalRecord::new(
                    format!("p{i}"),
                    (1 + rng.index(12)) as f64,
                    rng.uniform() < 0.7,
                )
                .unwrap()
            })
            .collect();
        // coarse score grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.index(6) as f64 * 0.5).collect();
        let a = concordance_index(&scores, &records);
        let b = brute_cindex(&scores, &records);
        match (a, b) {
            (Ok(x), Ok(y)) => {
                if x.to_bits() != y.to_bits() {
                    pass = false;
                    mismatches += 1;
                }
            }
            (Err(_), Err(_)) => {}
            _ => {
                pass = false;
                mismatches += 1;
            }
        }
    }
    CheckResult {
        name: "cindex-oracle",
        pass,
        max_dev: mismatches as f64,
        detail: format!("{instances} instances, bit-identical rational counting"),
    }
}

/// Full verification suite; any failing check makes the suite fail.
pub fn run_verification(sabotage: Option<&str>) -> Result<Vec<CheckResult>> {
    if let Some(mode) = sabotage {
        if mode != "cox-grad" {
            return Err(Error::argument(format!(
                "unknown sabotage mode '{mode}' (supported: cox-grad)"
            )));
        }
    }
    let checks = vec![
        verify_lemma_sweep(200),
        verify_em_monotonicity(100),
        verify_sinkhorn_marginals(),
        verify_cox_gradient(50, sabotage == Some("cox-grad")),
        verify_cindex(1000),
    ];
    Ok(checks)
}

/// Print and evaluate the verification suite (CLI entry).
pub fn cmd_verify(sabotage: Option<&str>) -> Result<()> {
    let checks = run_verification(sabotage)?;
    let mut all_pass = true;
    for c in &checks {
        println!("{}", c.line());
        all_pass &= c.pass;
    }
    if all_pass {
        println!("verification: all checks passed");
        Ok(())
    } else {
        Err(Error::Verification(
            "one or more verification checks failed".into(),
        ))
    }
}
