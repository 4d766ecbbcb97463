//! Pipeline driver: build prototype banks, run the multimodal survival
//! pipeline, verify the numerical kernels, and generate synthetic cohorts.

use clap::{Args, Parser, Subcommand};
use protofuse::aggregation::AggregationBackend;
use protofuse::error::Result;
use protofuse::fusion::EncodingMode;
use protofuse::io::EventConvention;
use protofuse::oracles::SyntheticCohortSpec;
use protofuse::pipeline::{
    cmd_build_prototypes, cmd_generate, cmd_run, cmd_verify, FusionBackend, LossKind,
    PipelineConfig,
};
use protofuse::sinkhorn::CostKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "protofuse",
    about = "Prototype-based multimodal survival pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool training-split patch embeddings and fit the K-means prototype bank
    BuildPrototypes(RunFlags),
    /// Run the full pipeline: aggregate, tokenize, fuse, train, evaluate
    Run(RunFlags),
    /// Run the self-contained verification suite (exit 5 on any failure)
    Verify {
        /// Inject a known fault to demonstrate detection (supported: cox-grad)
        #[arg(long)]
        sabotage: Option<String>,
    },
    /// Emit a planted synthetic cohort as the full input file set
    Generate(GenerateFlags),
}

/// Flags mirror PipelineConfig fields; a config file may supply any of them
/// and explicit flags win.
#[derive(Args)]
struct RunFlags {
    /// key = value config file applied before the flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    embeddings_dir: Option<PathBuf>,
    #[arg(long)]
    expression: Option<PathBuf>,
    #[arg(long)]
    survival: Option<PathBuf>,
    #[arg(long)]
    gmt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Existing bank CSV to load (init: provided)
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Fit the bank from the training split even if --bank is given
    #[arg(long)]
    build_prototypes: bool,
    /// Number of morphological prototypes C_h
    #[arg(long)]
    c_h: Option<usize>,
    /// Aggregation backend: gmm | ot | hc
    #[arg(long)]
    agg: Option<String>,
    /// Fusion backend: transformer | ot
    #[arg(long)]
    fusion: Option<String>,
    /// Prototype encoding: none | onehot | learnable
    #[arg(long)]
    encoding: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_e: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    hidden_pre: Option<usize>,
    #[arg(long)]
    hidden_post: Option<usize>,
    /// Share one post-attention FFN across prototypes
    #[arg(long)]
    shared_post: bool,
    /// Pool modal tokens by literal sum instead of mean
    #[arg(long)]
    pool_sum: bool,
    #[arg(long)]
    em_iters: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    marginal_tol: Option<f64>,
    /// Aggregation OT cost: sq_l2 | neg_dot
    #[arg(long)]
    agg_cost: Option<String>,
    /// Fusion OT cost: sq_l2 | neg_dot
    #[arg(long)]
    fusion_cost: Option<String>,
    /// Rescale OT-aggregated rows by C_h
    #[arg(long)]
    normalize_columns: bool,
    /// Survival loss: cox | nll
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train fraction for the single seeded split
    #[arg(long)]
    split: Option<f64>,
    /// Seeded k-fold evaluation instead of a single split
    #[arg(long)]
    folds: Option<usize>,
    /// Event column meaning: death1 | censor1
    #[arg(long)]
    event_convention: Option<String>,
    /// Apply log2(x+1) to expression values at load
    #[arg(long)]
    log2_transform: bool,
    /// Error on GMT genes missing from the expression header
    #[arg(long)]
    gmt_strict: bool,
    /// Worker pool size (overrides PROTOFUSE_THREADS)
    #[arg(long)]
    threads: Option<usize>,
    /// Skip per-patient interpretability CSVs
    #[arg(long)]
    no_interpretability: bool,
}

impl RunFlags {
    fn into_config(self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        if let Some(v) = self.embeddings_dir {
            cfg.embeddings_dir = v;
        }
        if let Some(v) = self.expression {
            cfg.expression_csv = v;
        }
        if let Some(v) = self.survival {
            cfg.survival_csv = v;
        }
        if let Some(v) = self.gmt {
            cfg.gmt_file = v;
        }
        if let Some(v) = self.out {
            cfg.output_dir = v;
        }
        if let Some(v) = self.bank {
            cfg.bank_file = Some(v);
        }
        if self.build_prototypes {
            cfg.build_prototypes = true;
        }
        if let Some(v) = self.c_h {
            cfg.prototype_count = v;
        }
        if let Some(v) = &self.agg {
            cfg.aggregation = AggregationBackend::parse(v)?;
        }
        if let Some(v) = &self.fusion {
            cfg.fusion = FusionBackend::parse(v)?;
        }
        if let Some(v) = &self.encoding {
            cfg.encoding = EncodingMode::parse(v)?;
        }
        if let Some(v) = self.d {
            cfg.d = v;
        }
        if let Some(v) = self.d_e {
            cfg.d_e = v;
        }
        if let Some(v) = self.d_out {
            cfg.d_out = v;
        }
        if let Some(v) = self.hidden_pre {
            cfg.hidden_pre = v;
        }
        if let Some(v) = self.hidden_post {
            cfg.hidden_post = v;
        }
        if self.shared_post {
            cfg.shared_post = true;
        }
        if self.pool_sum {
            cfg.pool_sum = true;
        }
        if let Some(v) = self.em_iters {
            cfg.em_iters = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.sinkhorn_iters {
            cfg.sinkhorn_iters = v;
        }
        if let Some(v) = self.marginal_tol {
            cfg.marginal_tol = v;
        }
        if let Some(v) = &self.agg_cost {
            cfg.agg_cost = CostKind::parse(v)?;
        }
        if let Some(v) = &self.fusion_cost {
            cfg.fusion_cost = CostKind::parse(v)?;
        }
        if self.normalize_columns {
            cfg.normalize_columns = true;
        }
        if let Some(v) = &self.loss {
            cfg.loss = LossKind::parse(v)?;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.n_bins {
            cfg.n_bins = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.split {
            cfg.split = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = Some(v);
        }
        if let Some(v) = &self.event_convention {
            cfg.event_convention = EventConvention::parse(v)?;
        }
        if self.log2_transform {
            cfg.log2_transform = true;
        }
        if self.gmt_strict {
            cfg.gmt_strict = true;
        }
        if let Some(v) = self.threads {
            cfg.threads = Some(v);
        }
        if self.no_interpretability {
            cfg.emit_interpretability = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateFlags {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_patients: usize,
    #[arg(long, default_value_t = 200)]
    patches_min: usize,
    #[arg(long, default_value_t = 400)]
    patches_max: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    #[arg(long, default_value_t = 20.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    tumor_prototype: usize,
    #[arg(long, default_value_t = 12.0)]
    hazard: f64,
    #[arg(long, default_value_t = 0.3)]
    censoring: f64,
    #[arg(long, default_value_t = 200)]
    n_genes: usize,
    #[arg(long, default_value_t = 10)]
    n_pathways: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::BuildPrototypes(flags) => {
            let cfg = flags.into_config()?;
            cmd_build_prototypes(&cfg)?;
            Ok(())
        }
        Command::Run(flags) => {
            let cfg = flags.into_config()?;
            cmd_run(&cfg)?;
            Ok(())
        }
        Command::Verify { sabotage } => cmd_verify(sabotage.as_deref()),
        Command::Generate(flags) => {
            let spec = SyntheticCohortSpec {
                n_patients: flags.n_patients,
                patches_min: flags.patches_min,
                patches_max: flags.patches_max,
                dim: flags.dim,
                clusters: flags.clusters,
                separation: flags.separation,
                sigma: flags.sigma,
                tumor_prototype_index: flags.tumor_prototype,
                hazard_coefficient: flags.hazard,
                censoring_rate: flags.censoring,
                n_genes: flags.n_genes,
                n_pathways: flags.n_pathways,
                seed: flags.seed,
            };
            cmd_generate(&spec, &flags.out)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
