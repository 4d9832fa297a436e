use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use tsl_cli::config::{parse_ablate, PipelineConfig, ThresholdFrom};
use tsl_cli::pipeline;
use tsl_core::data::{SyntheticCounts, SyntheticSpec};
use tsl_core::projector::InitScheme;
use tsl_core::Shrinkage;

/// Weakly-supervised OOD detection over embedding files: mine topological
/// pairs under a Mahalanobis metric, train a linear projector, score by
/// distance to the nearest class center, and evaluate.
#[derive(Parser)]
#[command(name = "tsl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the pipeline subcommands. Precedence: built-in defaults,
/// then --config file entries, then these flags.
#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled-ID embedding file (expects a .labels sidecar).
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Unlabeled mixture embedding file.
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    /// Test-ID embedding file.
    #[arg(long)]
    test_id: Option<PathBuf>,
    /// Test-OOD embedding file.
    #[arg(long)]
    test_ood: Option<PathBuf>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbor count for pair mining.
    #[arg(long)]
    k: Option<u32>,
    /// Negative-mining multiplier (negatives rank at or beyond beta*K).
    #[arg(long)]
    beta: Option<u32>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Margin for the negative-pair hinge.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Total pairs per SGD step, split evenly over the four loss terms.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Covariance shrinkage: "auto" or a non-negative number.
    #[arg(long)]
    shrinkage: Option<Shrinkage>,
    /// Modules to disable: none, or a comma list of ppm,npm,tsm.
    #[arg(long)]
    ablate: Option<String>,
    /// Also write per-point "score is_id" rows.
    #[arg(long)]
    dump_scores: bool,
    /// Where the decision threshold is selected: test | holdout.
    #[arg(long)]
    threshold_from: Option<ThresholdFrom>,
    /// TPR target for the threshold and FPR metric.
    #[arg(long)]
    tpr_target: Option<f64>,
    /// Repeat the run N times with seed offsets and aggregate.
    #[arg(long)]
    repeats: Option<u32>,
    /// Projector initialization: identity | scaled_random.
    #[arg(long)]
    init: Option<InitScheme>,
    /// Projector output dimension (0 or absent keeps the input dimension).
    #[arg(long)]
    d_out: Option<usize>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.labeled, self.labeled);
        set!(cfg.unlabeled, self.unlabeled);
        set!(cfg.test_id, self.test_id);
        set!(cfg.test_ood, self.test_ood);
        set!(cfg.out, self.out);
        set!(cfg.train.seed, self.seed);
        set!(cfg.train.k, self.k);
        set!(cfg.train.beta, self.beta);
        set!(cfg.train.lambda1, self.lambda1);
        set!(cfg.train.lambda2, self.lambda2);
        set!(cfg.train.lambda3, self.lambda3);
        set!(cfg.train.margin, self.margin);
        set!(cfg.train.learning_rate, self.lr);
        set!(cfg.train.epochs, self.epochs);
        set!(cfg.shrinkage, self.shrinkage);
        set!(cfg.threshold_from, self.threshold_from);
        set!(cfg.tpr_target, self.tpr_target);
        set!(cfg.repeats, self.repeats);
        set!(cfg.train.init, self.init);
        if let Some(batch) = self.batch_size {
            cfg.train.quotas = tsl_core::projector::Quotas::from_batch_size(batch);
        }
        if let Some(d) = self.d_out {
            cfg.train.d_out = if d == 0 { None } else { Some(d) };
        }
        if let Some(spec) = &self.ablate {
            let ablations = parse_ablate(spec).map_err(|e| anyhow::anyhow!(e))?;
            cfg.set_ablations(&ablations);
        }
        if self.dump_scores {
            cfg.dump_scores = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthOpts {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    id_center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    class_std: f64,
    #[arg(long, default_value_t = 4)]
    ood_modes: usize,
    #[arg(long, default_value_t = 2.5)]
    ood_offset: f64,
    #[arg(long, default_value_t = 25)]
    labeled_per_class: usize,
    #[arg(long, default_value_t = 500)]
    unlabeled_id_per_class: usize,
    #[arg(long, default_value_t = 2000)]
    unlabeled_ood: usize,
    #[arg(long, default_value_t = 1000)]
    test_id: usize,
    #[arg(long, default_value_t = 2000)]
    test_ood: usize,
    /// Reuse the unlabeled OOD sample as the OOD test set.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    share_ood: bool,
}

impl SynthOpts {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            dim: self.dim,
            id_center_scale: self.id_center_scale,
            class_std: self.class_std,
            ood_modes: self.ood_modes,
            ood_offset: self.ood_offset,
            counts: SyntheticCounts {
                n_labeled_per_class: self.labeled_per_class,
                n_unlabeled_id_per_class: self.unlabeled_id_per_class,
                n_unlabeled_ood: self.unlabeled_ood,
                n_test_id: self.test_id,
                n_test_ood: self.test_ood,
            },
            share_ood: self.share_ood,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic benchmark (four embedding files).
    Synth(SynthOpts),
    /// Mine pair inventories and write pairs.txt.
    Mine {
        #[command(flatten)]
        common: CommonOpts,
        /// Also export the covariance and class centers as binary matrices.
        #[arg(long)]
        export_metric: bool,
    },
    /// Train a projector from an existing pairs.txt.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Mined pairs file (defaults to <out>/pairs.txt).
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Score the test sets with an existing projector.
    Score {
        #[command(flatten)]
        common: CommonOpts,
        /// Trained projector file (defaults to <out>/projector.bin).
        #[arg(long)]
        projector: Option<PathBuf>,
    },
    /// Evaluate two precomputed score files (one real per line).
    Eval {
        /// ID score file.
        #[arg(long)]
        id_scores: PathBuf,
        /// OOD score file.
        #[arg(long)]
        ood_scores: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        tpr_target: f64,
    },
    /// Run the whole pipeline: metric, mining, training, scoring, report.
    Run {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the four-row ablation ladder and emit a comparison table.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn print_report(report: &tsl_core::MetricsReport) {
    print!("{}", report.to_text());
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::Synth(opts) => {
            let paths = pipeline::synth_to_dir(&opts.spec(), &opts.out)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Mine { common, export_metric } => {
            let cfg = common.resolve()?;
            let path = pipeline::mine_to_dir(&cfg, export_metric)?;
            println!("wrote {}", path.display());
        }
        Command::Train { common, pairs } => {
            let cfg = common.resolve()?;
            let pairs = pairs.unwrap_or_else(|| cfg.out.join("pairs.txt"));
            let artifacts = pipeline::train_from_pairs(&cfg, &pairs)?;
            print_report(&artifacts.report);
        }
        Command::Score { common, projector } => {
            let cfg = common.resolve()?;
            let projector = projector.unwrap_or_else(|| cfg.out.join("projector.bin"));
            let report = pipeline::score_with_projector(&cfg, &projector)?;
            print_report(&report);
        }
        Command::Eval { id_scores, ood_scores, tpr_target } => {
            let report = pipeline::eval_files(&id_scores, &ood_scores, tpr_target)?;
            print_report(&report);
        }
        Command::Run { common } => {
            let cfg = common.resolve()?;
            let runs = pipeline::run_repeated(&cfg)?;
            for run in &runs {
                print_report(&run.report);
            }
        }
        Command::Ablate { common } => {
            let cfg = common.resolve()?;
            let rows = pipeline::run_ablation(&cfg)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
    }
    Ok(())
}
