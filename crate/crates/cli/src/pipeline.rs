//! End-to-end pipeline stages: synthesize or load data, estimate the metric,
//! mine pairs, train the projector, score the test sets, and evaluate.
//!
//! Fixed artifact names under the output directory: `projector.bin`,
//! `pairs.txt`, `history.txt`, `scores_id.txt`, `scores_ood.txt`,
//! `report.txt`, `manifest.txt` (plus `scores_dump.txt` with `--dump-scores`
//! and `ablation.txt` from the ablation ladder).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use tsl_core::data::{self, EmbeddingSet, Role, SyntheticSpec};
use tsl_core::metric::{class_centers, estimate_metric, ClassCenters, MahalanobisMetric};
use tsl_core::mining::{build_neighbor_table, NeighborTable, PairInventory};
use tsl_core::projector::{train, LossBreakdown, Projector};
use tsl_core::scoring::{self, choose_threshold, score_set, MetricsReport, ScoreReport};

use crate::config::{PipelineConfig, ThresholdFrom};

/// Everything produced by one pipeline run, alongside the files on disk.
pub struct RunArtifacts {
    pub report: MetricsReport,
    pub history: Vec<LossBreakdown>,
    pub projector: Projector,
    pub scores_id: Vec<f64>,
    pub scores_ood: Vec<f64>,
    pub score_report: ScoreReport,
    pub out_dir: PathBuf,
}

/// Loaded inputs plus the mined structures shared by training runs.
pub struct PreparedData {
    pub labeled: EmbeddingSet,
    pub test_id: EmbeddingSet,
    pub test_ood: EmbeddingSet,
    pub pool: EmbeddingSet,
    pub metric: MahalanobisMetric,
    pub centers: ClassCenters,
    pub table: NeighborTable,
    pub inventory: PairInventory,
}

/// Caps the negative rank bound for pools smaller than `beta * K`, keeping
/// at least one sampleable position. Logs when the bound moves.
pub fn rescale_negative_bound(k: u32, beta: u32, n_points: usize) -> usize {
    let full = beta as u64 * k as u64;
    let cap = (0.8 * n_points as f64).ceil() as u64;
    let mut bound = full.min(cap) as usize;
    if bound + 1 >= n_points {
        bound = n_points.saturating_sub(2);
    }
    if (bound as u64) < full {
        log::warn!(
            "negative rank bound rescaled from beta*K = {full} to {bound} for a pool of {n_points} points"
        );
    }
    bound
}

fn load_inputs(cfg: &PipelineConfig) -> Result<(EmbeddingSet, EmbeddingSet, EmbeddingSet, EmbeddingSet)> {
    let labeled = data::load_embeddings(&cfg.labeled)
        .with_context(|| format!("loading labeled set {}", cfg.labeled.display()))?;
    if labeled.role() != Role::LabeledId {
        bail!(
            "labeled set {} has no label sidecar ({}.labels)",
            cfg.labeled.display(),
            cfg.labeled.display()
        );
    }
    let unlabeled = data::load_embeddings_as(&cfg.unlabeled, Role::UnlabeledMix)
        .with_context(|| format!("loading unlabeled set {}", cfg.unlabeled.display()))?;
    let test_id = data::load_embeddings_as(&cfg.test_id, Role::TestId)
        .with_context(|| format!("loading test-ID set {}", cfg.test_id.display()))?;
    let test_ood = data::load_embeddings_as(&cfg.test_ood, Role::TestOod)
        .with_context(|| format!("loading test-OOD set {}", cfg.test_ood.display()))?;
    for (name, set) in
        [("unlabeled", &unlabeled), ("test-id", &test_id), ("test-ood", &test_ood)]
    {
        if set.dim() != labeled.dim() {
            bail!("{name} set dim {} does not match labeled dim {}", set.dim(), labeled.dim());
        }
    }
    Ok((labeled, unlabeled, test_id, test_ood))
}

/// Loads the four input files, estimates the metric, ranks the pool, and
/// mines the pair inventories.
pub fn prepare(cfg: &PipelineConfig) -> Result<PreparedData> {
    cfg.validate()?;
    cfg.require_paths()?;
    let (labeled, unlabeled, test_id, test_ood) = load_inputs(cfg)?;
    let metric = estimate_metric(&labeled, cfg.shrinkage).context("estimating the metric")?;
    let centers = class_centers(&labeled)?;
    let pool = EmbeddingSet::concat_pool(&labeled, &unlabeled)?;
    let table = build_neighbor_table(&pool, &metric).context("ranking the pool")?;
    let bound = rescale_negative_bound(cfg.train.k, cfg.train.beta, pool.n_rows());
    let inventory = PairInventory::mine(&table, &labeled, cfg.train.k, cfg.train.beta, bound)
        .context("mining pairs")?;
    Ok(PreparedData { labeled, test_id, test_ood, pool, metric, centers, table, inventory })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn history_to_text(history: &[LossBreakdown]) -> String {
    let mut out = String::from("# epoch l_a l_c l_l l_f total\n");
    for (epoch, h) in history.iter().enumerate() {
        let _ = writeln!(out, "{epoch} {} {} {} {} {}", h.l_a, h.l_c, h.l_l, h.l_f, h.total);
    }
    out
}

/// Trains on prepared data, scores the test sets, evaluates, and writes all
/// artifacts under `out_dir`.
pub fn run_prepared(
    prepared: &PreparedData,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let (projector, history) = train(
        &prepared.pool,
        &prepared.labeled,
        &prepared.table,
        &prepared.inventory,
        &prepared.metric,
        &cfg.train,
    )
    .context("training the projector")?;

    projector.save(&out_dir.join("projector.bin")).context("writing projector.bin")?;
    write_file(out_dir, "pairs.txt", &prepared.inventory.to_text())?;
    write_file(out_dir, "history.txt", &history_to_text(&history))?;

    let scores_id = score_set(&projector, &prepared.centers, &prepared.test_id)
        .context("scoring test-ID set")?;
    let scores_ood = score_set(&projector, &prepared.centers, &prepared.test_ood)
        .context("scoring test-OOD set")?;
    let threshold = match cfg.threshold_from {
        ThresholdFrom::Test => choose_threshold(&scores_id, cfg.tpr_target)?,
        ThresholdFrom::Holdout => {
            let holdout = score_set(&projector, &prepared.centers, &prepared.labeled)
                .context("scoring the labeled holdout")?;
            choose_threshold(&holdout, cfg.tpr_target)?
        }
    };
    let mut report = MetricsReport::compute(&scores_id, &scores_ood, cfg.tpr_target)?;
    report.threshold = threshold;

    let mut all_scores = scores_id.clone();
    all_scores.extend_from_slice(&scores_ood);
    let score_report = ScoreReport::new(all_scores, threshold)?;

    write_file(out_dir, "scores_id.txt", &scoring::scores_to_text(&scores_id))?;
    write_file(out_dir, "scores_ood.txt", &scoring::scores_to_text(&scores_ood))?;
    write_file(out_dir, "report.txt", &report.to_text())?;
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.out = out_dir.to_path_buf();
    write_file(out_dir, "manifest.txt", &manifest_cfg.to_manifest())?;
    if cfg.dump_scores {
        let mut dump = String::new();
        for s in &scores_id {
            let _ = writeln!(dump, "{s} 1");
        }
        for s in &scores_ood {
            let _ = writeln!(dump, "{s} 0");
        }
        write_file(out_dir, "scores_dump.txt", &dump)?;
    }

    Ok(RunArtifacts {
        report,
        history,
        projector,
        scores_id,
        scores_ood,
        score_report,
        out_dir: out_dir.to_path_buf(),
    })
}

/// The full pipeline: prepare, train, score, evaluate, write artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunArtifacts> {
    let prepared = prepare(cfg)?;
    run_prepared(&prepared, cfg, &cfg.out)
}

/// Runs the pipeline `repeats` times with seed offsets, writing each run to
/// `r<i>/` and an aggregate summary beside them.
pub fn run_repeated(cfg: &PipelineConfig) -> Result<Vec<RunArtifacts>> {
    if cfg.repeats <= 1 {
        return Ok(vec![run_pipeline(cfg)?]);
    }
    let mut runs = Vec::with_capacity(cfg.repeats as usize);
    for i in 0..cfg.repeats {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = cfg.train.seed.wrapping_add(i as u64);
        run_cfg.out = cfg.out.join(format!("r{i}"));
        runs.push(run_pipeline(&run_cfg)?);
    }
    let mut summary = String::from("# metric mean std\n");
    for (name, get) in [
        ("auroc", (|r: &MetricsReport| r.auroc) as fn(&MetricsReport) -> f64),
        ("fpr95", |r| r.fpr95),
        ("detection_error", |r| r.detection_error),
        ("aupr_in", |r| r.aupr_in),
        ("aupr_out", |r| r.aupr_out),
    ] {
        let values: Vec<f64> = runs.iter().map(|r| get(&r.report)).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        let _ = writeln!(summary, "{name} {mean} {}", var.sqrt());
    }
    fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out, "aggregate.txt", &summary)?;
    Ok(runs)
}

/// One row of the ablation ladder.
pub struct AblationRow {
    pub name: &'static str,
    pub enable_ppm: bool,
    pub enable_npm: bool,
    pub enable_tsm: bool,
    pub report: MetricsReport,
}

/// The four-row ablation ladder on a shared mined pool: baseline, +PPM,
/// +PPM+NPM, then the full method. Every row trains from the same seed.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let prepared = prepare(cfg)?;
    let rows: [(&'static str, &'static str, bool, bool, bool); 4] = [
        ("baseline", "ablate_baseline", false, false, false),
        ("+ppm", "ablate_ppm", true, false, false),
        ("+ppm+npm", "ablate_ppm_npm", true, true, false),
        ("full", "ablate_full", true, true, true),
    ];
    let mut out_rows = Vec::with_capacity(rows.len());
    for (name, dir_name, ppm, npm, tsm) in rows {
        let mut row_cfg = cfg.clone();
        row_cfg.train.enable_ppm = ppm;
        row_cfg.train.enable_npm = npm;
        row_cfg.train.enable_tsm = tsm;
        let artifacts = run_prepared(&prepared, &row_cfg, &cfg.out.join(dir_name))?;
        out_rows.push(AblationRow {
            name,
            enable_ppm: ppm,
            enable_npm: npm,
            enable_tsm: tsm,
            report: artifacts.report,
        });
    }
    let table = ablation_table(&out_rows);
    fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out, "ablation.txt", &table)?;
    Ok(out_rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "# row ppm npm tsm auroc fpr95 detection_error aupr_in aupr_out\n",
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            row.name,
            row.enable_ppm as u8,
            row.enable_npm as u8,
            row.enable_tsm as u8,
            row.report.auroc,
            row.report.fpr95,
            row.report.detection_error,
            row.report.aupr_in,
            row.report.aupr_out,
        );
    }
    out
}

/// Writes the four synthetic splits plus a manifest of the spec. The test
/// splits must be non-empty because every metric needs both sides.
pub fn synth_to_dir(spec: &SyntheticSpec, out: &Path) -> Result<[PathBuf; 4]> {
    if spec.counts.n_test_ood == 0 {
        bail!("n_test_ood is 0: evaluation metrics need at least one OOD test point");
    }
    if spec.counts.n_test_id == 0 {
        bail!("n_test_id is 0: evaluation metrics need at least one ID test point");
    }
    if spec.counts.n_unlabeled_id_per_class == 0 && spec.counts.n_unlabeled_ood == 0 {
        bail!("unlabeled mixture is empty: mining needs unlabeled points");
    }
    let (labeled, unlabeled, test_id, test_ood) = data::generate_synthetic(spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating output dir {}", out.display()))?;
    let paths = [
        out.join("labeled.bin"),
        out.join("unlabeled.bin"),
        out.join("test_id.bin"),
        out.join("test_ood.bin"),
    ];
    data::save_embeddings(&labeled, &paths[0])?;
    data::save_embeddings(&unlabeled, &paths[1])?;
    data::save_embeddings(&test_id, &paths[2])?;
    data::save_embeddings(&test_ood, &paths[3])?;
    let c = spec.counts;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "num_classes={}", spec.num_classes);
    let _ = writeln!(manifest, "dim={}", spec.dim);
    let _ = writeln!(manifest, "id_center_scale={}", spec.id_center_scale);
    let _ = writeln!(manifest, "class_std={}", spec.class_std);
    let _ = writeln!(manifest, "ood_modes={}", spec.ood_modes);
    let _ = writeln!(manifest, "ood_offset={}", spec.ood_offset);
    let _ = writeln!(manifest, "n_labeled_per_class={}", c.n_labeled_per_class);
    let _ = writeln!(manifest, "n_unlabeled_id_per_class={}", c.n_unlabeled_id_per_class);
    let _ = writeln!(manifest, "n_unlabeled_ood={}", c.n_unlabeled_ood);
    let _ = writeln!(manifest, "n_test_id={}", c.n_test_id);
    let _ = writeln!(manifest, "n_test_ood={}", c.n_test_ood);
    let _ = writeln!(manifest, "share_ood={}", spec.share_ood);
    let _ = writeln!(manifest, "seed={}", spec.seed);
    write_file(out, "synth_manifest.txt", &manifest)?;
    Ok(paths)
}

/// Mines pairs without training: writes `pairs.txt` and optionally the
/// covariance and class centers as binary matrices.
pub fn mine_to_dir(cfg: &PipelineConfig, export_metric: bool) -> Result<PathBuf> {
    let prepared = prepare(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out, "pairs.txt", &prepared.inventory.to_text())?;
    if export_metric {
        let cov = prepared.metric.covariance();
        let flat: Vec<f64> = (0..cov.nrows())
            .flat_map(|r| (0..cov.ncols()).map(move |c| cov[(r, c)]))
            .collect();
        data::save_matrix(&cfg.out.join("sigma.bin"), cov.ncols(), cov.nrows(), &flat)?;
        let centers = &prepared.centers;
        let flat: Vec<f64> = centers
            .centers()
            .iter()
            .flat_map(|c| c.iter().copied().collect::<Vec<f64>>())
            .collect();
        data::save_matrix(
            &cfg.out.join("centers.bin"),
            centers.dim(),
            centers.n_classes(),
            &flat,
        )?;
    }
    Ok(cfg.out.join("pairs.txt"))
}

/// Trains from a previously mined `pairs.txt` (the neighbor ranking is
/// re-derived from the data, which is deterministic for identical inputs).
pub fn train_from_pairs(cfg: &PipelineConfig, pairs_path: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    cfg.require_paths()?;
    let (labeled, unlabeled, test_id, test_ood) = load_inputs(cfg)?;
    let text = fs::read_to_string(pairs_path)
        .with_context(|| format!("reading {}", pairs_path.display()))?;
    let inventory = PairInventory::from_text(&text)?;
    let metric = estimate_metric(&labeled, cfg.shrinkage)?;
    let centers = class_centers(&labeled)?;
    let pool = EmbeddingSet::concat_pool(&labeled, &unlabeled)?;
    let table = build_neighbor_table(&pool, &metric)?;
    let prepared = PreparedData { labeled, test_id, test_ood, pool, metric, centers, table, inventory };
    run_prepared(&prepared, cfg, &cfg.out)
}

/// Scores the test sets with a previously trained projector.
pub fn score_with_projector(cfg: &PipelineConfig, projector_path: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    cfg.require_paths()?;
    let (labeled, _, test_id, test_ood) = load_inputs(cfg)?;
    let projector = Projector::load(projector_path)
        .with_context(|| format!("loading projector {}", projector_path.display()))?;
    let centers = class_centers(&labeled)?;
    let scores_id = score_set(&projector, &centers, &test_id)?;
    let scores_ood = score_set(&projector, &centers, &test_ood)?;
    fs::create_dir_all(&cfg.out)?;
    write_file(&cfg.out, "scores_id.txt", &scoring::scores_to_text(&scores_id))?;
    write_file(&cfg.out, "scores_ood.txt", &scoring::scores_to_text(&scores_ood))?;
    let mut report = MetricsReport::compute(&scores_id, &scores_ood, cfg.tpr_target)?;
    if cfg.threshold_from == ThresholdFrom::Holdout {
        let holdout = score_set(&projector, &centers, &labeled)?;
        report.threshold = choose_threshold(&holdout, cfg.tpr_target)?;
    }
    Ok(report)
}

/// Evaluates precomputed score files (one real per line).
pub fn eval_files(id_path: &Path, ood_path: &Path, tpr_target: f64) -> Result<MetricsReport> {
    let id_text = fs::read_to_string(id_path)
        .with_context(|| format!("reading {}", id_path.display()))?;
    let ood_text = fs::read_to_string(ood_path)
        .with_context(|| format!("reading {}", ood_path.display()))?;
    let id = scoring::parse_scores_text(&id_text)
        .with_context(|| format!("parsing {}", id_path.display()))?;
    let ood = scoring::parse_scores_text(&ood_text)
        .with_context(|| format!("parsing {}", ood_path.display()))?;
    Ok(MetricsReport::compute(&id, &ood, tpr_target)?)
}
