use latent_ofer::config::ExperimentConfig;
use latent_ofer::dataset::ingest;
use latent_ofer::patchgrid::partition;
use latent_ofer::pipeline::*;
use latent_ofer::svdd::detection_metrics_over;
use latent_ofer::toydata::{make_occluder, OccluderKind, EVAL_OCCLUDERS};
use latent_ofer::util::stream_rng;
use rand::Rng;

#[test]
#[ignore]
fn svdd_capacity_and_kinds() {
    let mut cfg = ExperimentConfig::default();
    cfg.recon_epochs = 2;
    let dir = std::env::temp_dir().join("lofer_tuning_data");
    let train = ingest(dir.join("train/labels.csv")).unwrap();
    let eval = ingest(dir.join("eval/labels.csv")).unwrap();
    let semantic = train_semantic_stage(&ExperimentConfig { semantic_epochs: 2, ..cfg.clone() }, &train, 7).unwrap();
    let trainer = train_recon_stage(&cfg, &train, &semantic, 7, None).unwrap();
    let recon = trainer.model;

    for (depth, hidden, pre, ft, lambda, lr, q) in [
        (0usize, 128usize, 60usize, 10usize, 1e-4, 1e-3, 0.95),
        (0, 128, 100, 10, 1e-4, 1e-3, 0.95),
        (0, 128, 100, 10, 1e-4, 1e-3, 0.96),
        (0, 128, 100, 20, 1e-4, 1e-3, 0.97),
        (0, 160, 100, 10, 1e-4, 1e-3, 0.96),
    ] {
        let mut c2 = cfg.clone();
        c2.svdd_latent_depth = depth;
        c2.svdd_hidden_dim = hidden;
        c2.svdd_pretrain_epochs = pre;
        c2.svdd_epochs = ft;
        c2.svdd_lambda = lambda;
        c2.svdd_lr = lr;
        c2.svdd_out_dim = 16;
        c2.svdd_quantile = q;
        let t = std::time::Instant::now();
        let svdd = train_svdd_stage(&c2, &recon, &train, 7).unwrap();
        // per-kind metrics at side 40
        for kind in EVAL_OCCLUDERS {
            let mut pairs = Vec::new();
            for (i, item) in eval.items().iter().enumerate() {
                let mut rng = stream_rng(7 ^ 0xcafe, "synth-occlusion", i as u64);
                let side = 40;
                let sprite = make_occluder(kind, side, rng.random());
                let row = rng.random_range(0..=(64 - side));
                let col = rng.random_range(0..=(64 - side));
                let (occ, truth) = latent_ofer::patchgrid::synth_occlude(&item.image, 16, &sprite, (row, col)).unwrap();
                let grid = partition(&occ, 16).unwrap();
                let lat = recon.embed_at(&grid, None, depth).unwrap();
                let (pred, _) = svdd.classify_patches(&lat).unwrap();
                pairs.push((pred, truth));
            }
            let m = detection_metrics_over(&pairs).unwrap();
            let k = match kind { OccluderKind::Blob => "blob", OccluderKind::Stripes => "stripes", OccluderKind::Mug => "mug", _ => "?" };
            println!("d{depth} h{hidden} pre{pre} ft{ft} q{q}: {k:8} P {:.3} R {:.3}", m.precision, m.recall);
        }
        println!("  ({:?})", t.elapsed());
    }
}
