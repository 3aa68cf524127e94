use latent_ofer::config::ExperimentConfig;
use latent_ofer::image::Image;
use latent_ofer::nn::{Adam, Tape};
use latent_ofer::patchgrid::{partition, OcclusionMask};
use latent_ofer::reconstruct::*;
use latent_ofer::toydata::{render_face, sample_params};
use latent_ofer::util::stream_rng;

fn faces(n: usize) -> Vec<Image> {
    (0..n).map(|i| {
        let mut rng = stream_rng(40 + i as u64, "probe7", 0);
        render_face(&sample_params(i % 7, &mut rng).unwrap())
    }).collect()
}

/// Can the full generator overfit 8 images with pure L_re (no GAN, no sc)?
#[test]
#[ignore]
fn generator_micro_overfit() {
    let cfg = ExperimentConfig::default();
    let mut rc = cfg.recon_config();
    rc.weights.sc = 0.0;
    rc.weights.d = 0.0;
    rc.weights.c = 0.0;
    rc.epochs = 40;
    rc.batch_size = 4;
    rc.lr_generator = 2e-3;
    rc.mask_proportion_range = (0.25, 0.25);
    let imgs = faces(8);

    let model = ReconModel::new(rc.clone(), 3).unwrap();
    let mut adam = Adam::new(&model.params, rc.lr_generator);
    let mut model = model;
    // plain training loop without the trainer (isolates the loss path)
    for step in 0..400 {
        let mut tape = Tape::new();
        let bind = tape.bind(&model.params);
        let mut losses = Vec::new();
        for (i, img) in imgs.iter().enumerate() {
            let (_, mask) = latent_ofer::patchgrid::random_sampling_occlusion(img, 16, 0.25, (step % 7) as u64 * 100 + i as u64).unwrap();
            let grid = partition(img, 16).unwrap();
            let l = model.debug_re_loss_on(&mut tape, &bind, img, &grid, &mask).unwrap();
            losses.push(l);
        }
        let mut acc = losses[0];
        for l in &losses[1..] { acc = tape.add(acc, *l); }
        let loss = tape.scale(acc, 1.0 / losses.len() as f64);
        if step % 50 == 0 {
            println!("step {step}: L_re {:.4}", tape.scalar_value(loss));
        }
        let grads = tape.backward(loss);
        adam.step(&mut model.params, &grads.for_binding(&bind));
    }
    // masked psnr after overfit
    let img = &imgs[0];
    let grid = partition(img, 16).unwrap();
    let mut mask = OcclusionMask::all_false(4, 4);
    mask.set(5, true);
    let rec = model.reconstruct(&grid, &mask).unwrap();
    let mp = latent_ofer::metrics::masked_psnr(img, &rec.refined, &mask, 16).unwrap();
    let (p, _) = latent_ofer::metrics::image_quality(img, &rec.refined).unwrap();
    println!("after overfit: full psnr {p:.2}, masked {mp:.2}");
}
