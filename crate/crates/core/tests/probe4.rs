use latent_ofer::config::ExperimentConfig;
use latent_ofer::dataset::ingest;
use latent_ofer::ferhead::*;
use latent_ofer::patchgrid::partition;
use latent_ofer::pipeline::*;

fn quantiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
    (q(0.5), q(0.9), q(0.99))
}

#[test]
#[ignore]
fn diagnose() {
    let mut cfg = ExperimentConfig::default();
    cfg.recon_epochs = 8;
    let dir = std::env::temp_dir().join("lofer_tuning_data");
    let train = ingest(dir.join("train/labels.csv")).unwrap();
    let eval = ingest(dir.join("eval/labels.csv")).unwrap();
    let semantic = train_semantic_stage(&ExperimentConfig { semantic_epochs: 2, ..cfg.clone() }, &train, 7).unwrap();
    let t = std::time::Instant::now();
    let trainer = train_recon_stage(&cfg, &train, &semantic, 7, None).unwrap();
    println!("recon {:?}", t.elapsed());
    let recon = trainer.model;

    // --- svdd distances: train vs eval clean
    let svdd = train_svdd_stage(&cfg, &recon, &train, 7).unwrap();
    let train_lat = clean_patch_latents(&cfg, &recon, &train).unwrap();
    let d_train = svdd.distances(&train_lat).unwrap();
    println!("radius {:.4} | train clean {:?}", svdd.radius, quantiles(d_train));
    let eval_lat = clean_patch_latents(&cfg, &recon, &eval).unwrap();
    let d_eval = svdd.distances(&eval_lat).unwrap();
    println!("eval clean {:?}", quantiles(d_eval));

    // --- latent statistics across eval images (pooled full-latent vectors)
    let mut pooled: Vec<Vec<f64>> = Vec::new();
    for item in eval.items().iter().take(30) {
        let grid = partition(&item.image, 16).unwrap();
        let lat = recon.embed(&grid, None).unwrap();
        let sel = LatentSelection::all(&lat);
        pooled.push(sel.pooled(64).to_vec());
    }
    let dim_var: f64 = (0..64).map(|d| {
        let m: f64 = pooled.iter().map(|p| p[d]).sum::<f64>() / 30.0;
        pooled.iter().map(|p| (p[d] - m) * (p[d] - m)).sum::<f64>() / 30.0
    }).sum::<f64>() / 64.0;
    let dim_scale: f64 = pooled.iter().flat_map(|p| p.iter().map(|v| v * v)).sum::<f64>() / (30.0 * 64.0);
    println!("pooled latent mean-square {:.4}, across-image variance {:.6}", dim_scale, dim_var);

    // --- FER latent-row loss curve
    let samples = prepare_fer_samples(&cfg, &recon, &svdd, &train, false, 7).unwrap();
    let tc = FerTrainConfig { epochs: 12, batch_size: 16, learning_rate: 3e-3 };
    let (_, hist) = train_fer(&samples, cfg.fer_config(LatentMode::Full, true), &tc, 7).unwrap();
    println!("cnn+full loss: {:?}", hist.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    let (_, hist2) = train_fer(&samples, cfg.fer_config(LatentMode::None, true), &tc, 7).unwrap();
    println!("cnn-only loss: {:?}", hist2.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}
