// Scratch calibration harness; not part of the deliverable surface.
use std::time::Instant;

use tsl_core::data::{generate_synthetic, EmbeddingSet, SyntheticCounts, SyntheticSpec};
use tsl_core::metric::{class_centers, estimate_metric, Shrinkage};
use tsl_core::mining::{build_neighbor_table, PairInventory};
use tsl_core::projector::{init_projector, train, InitScheme, TrainConfig};
use tsl_core::scoring::{auroc, score_set};

fn spec_with_offset(offset: f64, scale: f64, intrinsic: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        dim: 32,
        intrinsic_dim: intrinsic,
        id_center_scale: scale,
        class_std: 1.0,
        ood_modes: 4,
        ood_offset: offset,
        counts: SyntheticCounts {
            n_labeled_per_class: 25,
            n_unlabeled_id_per_class: 500,
            n_unlabeled_ood: 2000,
            n_test_id: 1000,
            n_test_ood: 2000,
        },
        share_ood: true,
        seed: 1,
    }
}

fn baseline_auroc(spec: &SyntheticSpec) -> f64 {
    let (labeled, _, test_id, test_ood) = generate_synthetic(spec).unwrap();
    let centers = class_centers(&labeled).unwrap();
    let p = init_projector(spec.dim, spec.dim, InitScheme::Identity, 0).unwrap();
    let id = score_set(&p, &centers, &test_id).unwrap();
    let ood = score_set(&p, &centers, &test_ood).unwrap();
    auroc(&id, &ood).unwrap()
}

fn full_run(spec: &SyntheticSpec, epochs: u32) -> (f64, f64, f64, f64) {
    let t0 = Instant::now();
    let (labeled, unlabeled, test_id, test_ood) = generate_synthetic(spec).unwrap();
    let metric = estimate_metric(&labeled, Shrinkage::Auto).unwrap();
    let centers = class_centers(&labeled).unwrap();
    let pool = EmbeddingSet::concat_pool(&labeled, &unlabeled).unwrap();
    let table = build_neighbor_table(&pool, &metric).unwrap();
    eprintln!("  table built in {:?}", t0.elapsed());
    let n = pool.n_rows();
    let bound = tsl_cli::pipeline::rescale_negative_bound(12, 4000, n);
    let inventory = PairInventory::mine(&table, &labeled, 12, 4000, bound).unwrap();
    eprintln!(
        "  mined close={} loose={} labeled={} bound={} in {:?}",
        inventory.close.len(),
        inventory.loose.len(),
        inventory.labeled_intra.len(),
        bound,
        t0.elapsed()
    );
    let config = TrainConfig { epochs, seed: 1, ..TrainConfig::default() };
    let (p, history) = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap();
    eprintln!("  trained in {:?}", t0.elapsed());
    let id = score_set(&p, &centers, &test_id).unwrap();
    let ood = score_set(&p, &centers, &test_ood).unwrap();
    let trained = auroc(&id, &ood).unwrap();
    let first = history.first().map(|h| h.total).unwrap_or(0.0);
    let last = history.last().map(|h| h.total).unwrap_or(0.0);
    (trained, first, last, t0.elapsed().as_secs_f64())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("baseline");
    match mode {
        "baseline" => {
            let intrinsic: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
            for scale in [0.75, 1.0, 1.5, 2.0] {
                for offset in [1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0] {
                    let spec = spec_with_offset(offset, scale, intrinsic);
                    println!(
                        "intrinsic={intrinsic} scale={scale} offset={offset} baseline_auroc={:.4}",
                        baseline_auroc(&spec)
                    );
                }
            }
        }
        "train" => {
            let scale: f64 = args[2].parse().unwrap();
            let offset: f64 = args[3].parse().unwrap();
            let epochs: u32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(300);
            let intrinsic: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
            let spec = spec_with_offset(offset, scale, intrinsic);
            let base = baseline_auroc(&spec);
            let (trained, first, last, secs) = full_run(&spec, epochs);
            println!(
                "intrinsic={intrinsic} scale={scale} offset={offset} base={base:.4} \
                 trained={trained:.4} loss {first:.2} -> {last:.2} in {secs:.1}s"
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
