//! Manual tuning harness: `cargo test -p latent-ofer --test tuning -- --ignored --nocapture`

use std::time::Instant;

use latent_ofer::config::ExperimentConfig;
use latent_ofer::dataset::{ingest, Dataset};
use latent_ofer::ferhead::LatentMode;
use latent_ofer::patchgrid::partition;
use latent_ofer::pipeline::*;
use latent_ofer::svdd::detection_metrics_over;
use latent_ofer::toydata::{generate_toy_dataset, EVAL_OCCLUDERS};

fn tuned_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.recon_epochs = 14;
    cfg.svdd_quantile = 0.975;
    cfg.fer_epochs = 40;
    cfg.fer_lr = 2e-3;
    cfg.semantic_epochs = 60;
    cfg
}

fn datasets(cfg: &ExperimentConfig, seed: u64) -> (Dataset, Dataset) {
    let dir = std::env::temp_dir().join("lofer_tuning2");
    let train_dir = dir.join("train");
    let eval_dir = dir.join("eval");
    let tm = train_dir.join("labels.csv");
    let em = eval_dir.join("labels.csv");
    let train = if tm.is_file() { tm } else { generate_toy_dataset(cfg.toy_train, seed, &train_dir).unwrap() };
    let eval = if em.is_file() { em } else { generate_toy_dataset(cfg.toy_eval, seed ^ 0xe7a1, &eval_dir).unwrap() };
    (ingest(&train).unwrap(), ingest(&eval).unwrap())
}

#[test]
#[ignore]
fn tune_stack() {
    let cfg = tuned_config();
    let seed = cfg.seed;
    let t_all = Instant::now();
    let (train, eval) = datasets(&cfg, seed);
    println!("datasets: {} train, {} eval", train.len(), eval.len());

    let t = Instant::now();
    let semantic = train_semantic_stage(&cfg, &train, seed).unwrap();
    let sem_acc = eval.items().iter().filter(|it| semantic.predict(&it.image, None).unwrap().0.label() == it.label).count() as f64 / eval.len() as f64;
    println!("semantic: clean eval {:.3} ({:?})", sem_acc, t.elapsed());

    let t = Instant::now();
    let trainer = train_recon_stage(&cfg, &train, &semantic, seed, None).unwrap();
    let recon = trainer.model;
    println!("recon: {:?}", t.elapsed());

    let t = Instant::now();
    let svdd = train_svdd_stage(&cfg, &recon, &train, seed).unwrap();
    let mut pairs = Vec::new();
    for (i, item) in eval.items().iter().enumerate() {
        let (occ, truth) = occlude_item(&item.image, 16, &EVAL_OCCLUDERS, 0.4, seed ^ 0xcafe, i as u64).unwrap();
        let grid = partition(&occ, 16).unwrap();
        let latents = recon.embed_at(&grid, None, svdd.latent_depth).unwrap();
        let (pred, _) = svdd.classify_patches(&latents).unwrap();
        pairs.push((pred, truth));
    }
    let m = detection_metrics_over(&pairs).unwrap();
    println!("svdd ({:?}): P {:.3} R {:.3} acc {:.3}", t.elapsed(), m.precision, m.recall, m.accuracy);

    for (name, row) in [
        ("full-only  norec", RowSpec { reconstruction: false, cnn_features: false, latent_mode: LatentMode::Full }),
        ("ext-only   norec", RowSpec { reconstruction: false, cnn_features: false, latent_mode: LatentMode::Extracted }),
        ("cnn-only   norec", RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::None }),
        ("cnn+full   norec", RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::Full }),
        ("cnn+ext    norec", RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::Extracted }),
        ("cnn-only   recon", RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::None }),
        ("cnn+full   recon", RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::Full }),
        ("cnn+ext    recon", RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::Extracted }),
    ] {
        let t = Instant::now();
        let fer = train_fer_stage(&cfg, &recon, &svdd, &train, row, seed).unwrap();
        let mut ok = 0;
        for (i, item) in eval.items().iter().enumerate() {
            let (occ, _) = occlude_item(&item.image, 16, &EVAL_OCCLUDERS, cfg.eval_proportion, seed ^ 0xe7a1, i as u64).unwrap();
            let grid = partition(&occ, 16).unwrap();
            let pred = if row.reconstruction {
                let latents_in = recon.embed_at(&grid, None, svdd.latent_depth).unwrap();
                let (mask, _) = svdd.classify_patches(&latents_in).unwrap();
                let rec = recon.reconstruct(&grid, &mask).unwrap();
                fer.predict(&rec.refined, Some(&rec.latents)).unwrap().0.label()
            } else {
                let latents = recon.embed(&grid, None).unwrap();
                fer.predict(&occ, Some(&latents)).unwrap().0.label()
            };
            if pred == item.label { ok += 1; }
        }
        println!("fer {name}: acc {:.3} ({:?})", ok as f64 / eval.len() as f64, t.elapsed());
    }
    println!("total {:?}", t_all.elapsed());
}
