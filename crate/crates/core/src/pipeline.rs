//! Orchestration: stage training drivers, the full detect-mask-reconstruct-
//! classify path, the occlusion sweep, and the ablation grid.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::encoder::LatentSet;
use crate::error::{Error, Result};
use crate::ferhead::{
    train_fer, FerModel, FerSample, LatentMode, NUM_EXPRESSIONS,
};
use crate::image::Image;
use crate::metrics::psnr;
use crate::patchgrid::{grad_occlusion, partition, random_sampling_occlusion, synth_occlude, OcclusionMask};
use crate::reconstruct::{train_reconstructor, ReconModel, ReconTrainer};
use crate::report::{accuracy_of, AblationRow, PredictionRecord, SweepPoint, SweepReport};
use crate::svdd::{train_svdd, SvddModel, SvddSidecar};
use crate::toydata::{make_occluder, OccluderKind, EVAL_OCCLUDERS, TRAIN_OCCLUDERS};
use crate::util::stream_rng;

impl ReconModel {
    /// Latents only, no pixel head: the embedding used by the detector and
    /// by classification without reconstruction.
    pub fn embed(
        &self,
        grid: &crate::patchgrid::PatchGrid,
        mask: Option<&OcclusionMask>,
    ) -> Result<LatentSet> {
        let (_, latents) = self.coarse_reconstruct(grid, mask)?;
        Ok(latents)
    }
}

/// All trained stages of the pipeline.
pub struct StageModels {
    pub semantic: FerModel,
    pub recon: ReconModel,
    pub svdd: SvddModel,
    pub fer: FerModel,
}

/// Prediction plus the diagnostics the wire format carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictOutcome {
    pub label: usize,
    pub probabilities: [f64; NUM_EXPRESSIONS],
    pub occluded_patch_indices: Vec<usize>,
    pub selected_keys: Vec<usize>,
    /// PSNR of the reconstruction against the (possibly occluded) input.
    pub psnr_vs_input: Option<f64>,
}

/// detect -> mask -> reconstruct -> select -> classify.
pub fn predict_pipeline(
    image: &Image,
    patch_size: usize,
    recon: &ReconModel,
    svdd: &SvddModel,
    fer: &FerModel,
) -> Result<PredictOutcome> {
    let grid = partition(image, patch_size)?;
    let latents_in = recon.embed_at(&grid, None, svdd.latent_depth)?;
    let (mask, _scores) = svdd.classify_patches(&latents_in)?;
    if mask.is_full() {
        return Err(Error::FullyOccluded);
    }
    let rec = recon.reconstruct(&grid, &mask)?;
    let (dist, selection) = fer.predict(&rec.refined, Some(&rec.latents))?;
    let p = psnr(image, &rec.refined)?;
    Ok(PredictOutcome {
        label: dist.label(),
        probabilities: *dist.probabilities(),
        occluded_patch_indices: mask.occluded_indices(),
        selected_keys: selection.map(|s| s.keys().to_vec()).unwrap_or_default(),
        psnr_vs_input: p.is_finite().then_some(p),
    })
}

/// Classification without the reconstruction stage: latents come straight
/// from embedding the (possibly occluded) input.
pub fn predict_without_reconstruction(
    image: &Image,
    patch_size: usize,
    recon: &ReconModel,
    fer: &FerModel,
) -> Result<usize> {
    let grid = partition(image, patch_size)?;
    let latents = recon.embed(&grid, None)?;
    let (dist, _) = fer.predict(image, Some(&latents))?;
    Ok(dist.label())
}

// ---------------------------------------------------------------------------
// synthetic occlusion for training/evaluation items
// ---------------------------------------------------------------------------

/// Pastes one procedural occluder; the sprite family is cycled by item
/// index, the size targets the requested patch coverage, and the position is
/// drawn from the item's stream.
pub fn occlude_item(
    image: &Image,
    patch_size: usize,
    family: &[OccluderKind],
    coverage: f64,
    seed: u64,
    index: u64,
) -> Result<(Image, OcclusionMask)> {
    if coverage == 0.0 {
        let grid = partition(image, patch_size)?;
        return Ok((
            image.clone(),
            OcclusionMask::all_false(grid.grid_rows(), grid.grid_cols()),
        ));
    }
    let mut rng = stream_rng(seed, "synth-occlusion", index);
    let kind = family[(index as usize) % family.len()];
    let side = ((coverage.sqrt() * image.height() as f64).round() as usize)
        .clamp(patch_size / 2, image.height());
    let sprite = make_occluder(kind, side, rng.random());
    let max_r = image.height() - side;
    let max_c = image.width() - side;
    let row = if max_r == 0 { 0 } else { rng.random_range(0..=max_r) };
    let col = if max_c == 0 { 0 } else { rng.random_range(0..=max_c) };
    synth_occlude(image, patch_size, &sprite, (row, col))
}

// ---------------------------------------------------------------------------
// stage training drivers
// ---------------------------------------------------------------------------

/// The frozen expression network used by the semantic consistency loss and
/// the feature discriminator: CNN-only, trained on clean images.
pub fn train_semantic_stage(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
) -> Result<FerModel> {
    let samples: Vec<FerSample> = train
        .items()
        .iter()
        .map(|item| FerSample {
            image: item.image.clone(),
            label: item.label,
            latents: None,
        })
        .collect();
    let mut train_cfg = cfg.fer_train_config();
    train_cfg.epochs = cfg.semantic_epochs;
    let (model, _) = train_fer(
        &samples,
        cfg.fer_config(LatentMode::None, true),
        &train_cfg,
        seed ^ 0xface,
    )?;
    Ok(model)
}

pub fn train_recon_stage(
    cfg: &ExperimentConfig,
    train: &Dataset,
    semantic: &FerModel,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<ReconTrainer> {
    let images = train.images();
    let (trainer, _history) =
        train_reconstructor(&images, cfg.recon_config(), semantic, seed, checkpoint_dir)?;
    Ok(trainer)
}

/// Latent matrix of every patch of every clean training image, tapped at
/// the detector's configured depth.
pub fn clean_patch_latents(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    train: &Dataset,
) -> Result<ndarray::Array2<f64>> {
    let n_patches = cfg.grid_rows() * cfg.grid_cols();
    let mut all = ndarray::Array2::zeros((train.len() * n_patches, cfg.latent_dim));
    for (i, item) in train.items().iter().enumerate() {
        let grid = partition(&item.image, cfg.patch_size)?;
        let latents = recon.embed_at(&grid, None, cfg.svdd_latent_depth)?;
        for p in 0..n_patches {
            all.row_mut(i * n_patches + p).assign(&latents.vector(p));
        }
    }
    Ok(all)
}

/// Trains the occlusion detector on latents of unoccluded patches only.
pub fn train_svdd_stage(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    train: &Dataset,
    seed: u64,
) -> Result<SvddModel> {
    let latents = clean_patch_latents(cfg, recon, train)?;
    let (model, _history) = train_svdd(&latents, &cfg.svdd_config(), seed ^ 0x57dd)?;
    Ok(model)
}

/// One ablation-row configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSpec {
    pub reconstruction: bool,
    pub cnn_features: bool,
    pub latent_mode: LatentMode,
}

/// The ten rows of the module-ablation grid, in report order.
pub const ABLATION_ROWS: [RowSpec; 10] = [
    RowSpec { reconstruction: false, cnn_features: false, latent_mode: LatentMode::Full },
    RowSpec { reconstruction: false, cnn_features: false, latent_mode: LatentMode::Extracted },
    RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::None },
    RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::Full },
    RowSpec { reconstruction: false, cnn_features: true, latent_mode: LatentMode::Extracted },
    RowSpec { reconstruction: true, cnn_features: false, latent_mode: LatentMode::Full },
    RowSpec { reconstruction: true, cnn_features: false, latent_mode: LatentMode::Extracted },
    RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::None },
    RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::Full },
    RowSpec { reconstruction: true, cnn_features: true, latent_mode: LatentMode::Extracted },
];

fn latent_mode_name(mode: LatentMode) -> &'static str {
    match mode {
        LatentMode::None => "none",
        LatentMode::Full => "full",
        LatentMode::Extracted => "extracted",
    }
}

/// Builds training samples for one row: every second item is occluded with
/// training-family sprites (the rest stay clean, so heads see both regimes),
/// then either the deocclusion path runs (detect + reconstruct) or the
/// occluded image is kept, with the matching latents attached.
pub fn prepare_fer_samples(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    svdd: &SvddModel,
    data: &Dataset,
    use_reconstruction: bool,
    seed: u64,
) -> Result<Vec<FerSample>> {
    let mut samples = Vec::with_capacity(data.len());
    for (i, item) in data.items().iter().enumerate() {
        let coverage = if i % 2 == 0 {
            cfg.fer_train_occlusion
        } else {
            0.0
        };
        let (occluded, _truth) = occlude_item(
            &item.image,
            cfg.patch_size,
            &TRAIN_OCCLUDERS,
            coverage,
            seed,
            i as u64,
        )?;
        let grid = partition(&occluded, cfg.patch_size)?;
        let (image, latents) = if use_reconstruction {
            let latents_in = recon.embed_at(&grid, None, cfg.svdd_latent_depth)?;
            let (mask, _) = svdd.classify_patches(&latents_in)?;
            if mask.is_full() {
                return Err(Error::FullyOccluded);
            }
            let rec = recon.reconstruct(&grid, &mask)?;
            (rec.refined, rec.latents)
        } else {
            (occluded.clone(), recon.embed(&grid, None)?)
        };
        samples.push(FerSample {
            image,
            label: item.label,
            latents: Some(latents),
        });
    }
    Ok(samples)
}

/// Trains the recognition head for one row configuration.
pub fn train_fer_stage(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    svdd: &SvddModel,
    train: &Dataset,
    row: RowSpec,
    seed: u64,
) -> Result<FerModel> {
    let samples = prepare_fer_samples(cfg, recon, svdd, train, row.reconstruction, seed)?;
    let (model, _) = train_fer(
        &samples,
        cfg.fer_config(row.latent_mode, row.cnn_features),
        &cfg.fer_train_config(),
        seed ^ 0xfe2,
    )?;
    Ok(model)
}

/// Classifies one evaluation image under a row configuration.
fn classify_row(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    svdd: &SvddModel,
    fer: &FerModel,
    occluded: &Image,
    use_reconstruction: bool,
) -> Result<usize> {
    let grid = partition(occluded, cfg.patch_size)?;
    if use_reconstruction {
        let latents_in = recon.embed_at(&grid, None, cfg.svdd_latent_depth)?;
        let (mask, _) = svdd.classify_patches(&latents_in)?;
        if mask.is_full() {
            return Err(Error::FullyOccluded);
        }
        let rec = recon.reconstruct(&grid, &mask)?;
        let (dist, _) = fer.predict(&rec.refined, Some(&rec.latents))?;
        Ok(dist.label())
    } else {
        let latents = recon.embed(&grid, None)?;
        let (dist, _) = fer.predict(occluded, Some(&latents))?;
        Ok(dist.label())
    }
}

/// Evaluates the ten-row ablation grid: each row trains its own head, then
/// classifies the evaluation set occluded by held-out sprites.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    svdd: &SvddModel,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (ri, spec) in ABLATION_ROWS.iter().enumerate() {
        let fer = train_fer_stage(cfg, recon, svdd, train, *spec, seed ^ (ri as u64) << 8)?;
        let mut predictions: Vec<PredictionRecord> = Vec::with_capacity(eval.len());
        for (i, item) in eval.items().iter().enumerate() {
            let (occluded, _) = occlude_item(
                &item.image,
                cfg.patch_size,
                &EVAL_OCCLUDERS,
                cfg.eval_proportion,
                seed ^ 0xe7a1,
                i as u64,
            )?;
            let predicted =
                classify_row(cfg, recon, svdd, &fer, &occluded, spec.reconstruction)?;
            predictions.push((item.label, predicted));
        }
        rows.push(AblationRow {
            reconstruction: spec.reconstruction,
            cnn_features: spec.cnn_features,
            latents: latent_mode_name(spec.latent_mode).to_string(),
            accuracy: accuracy_of(&predictions),
            predictions,
        });
    }
    Ok(rows)
}

/// Accuracy at each occlusion proportion for both protocols. Attention for
/// the gradient protocol comes from the model's own activation map on the
/// clean image at its predicted class.
pub fn run_occlusion_sweep(
    cfg: &ExperimentConfig,
    recon: &ReconModel,
    svdd: &SvddModel,
    fer: &FerModel,
    eval: &Dataset,
    use_reconstruction: bool,
    seed: u64,
) -> Result<SweepReport> {
    // per-image activation maps and clean predictions, computed once
    let mut attention_maps = Vec::with_capacity(eval.len());
    for item in eval.items() {
        let grid = partition(&item.image, cfg.patch_size)?;
        let latents = recon.embed(&grid, None)?;
        let (dist, _) = fer.predict(&item.image, Some(&latents))?;
        let cam = fer.grad_cam(&item.image, Some(&latents), dist.label())?;
        attention_maps.push(cam);
    }

    let classify = |image: &Image| -> Result<usize> {
        classify_row(cfg, recon, svdd, fer, image, use_reconstruction)
    };

    let mut random_points = Vec::new();
    let mut grad_points = Vec::new();
    for (pi, &p) in cfg.sweep_proportions.iter().enumerate() {
        let mut rand_preds: Vec<PredictionRecord> = Vec::with_capacity(eval.len());
        let mut grad_preds: Vec<PredictionRecord> = Vec::with_capacity(eval.len());
        for (i, item) in eval.items().iter().enumerate() {
            let occ_seed = seed ^ ((pi as u64) << 24 | i as u64);
            let (rand_img, _) =
                random_sampling_occlusion(&item.image, cfg.patch_size, p, occ_seed)?;
            rand_preds.push((item.label, classify(&rand_img)?));
            let (grad_img, _) =
                grad_occlusion(&item.image, cfg.patch_size, p, &attention_maps[i])?;
            grad_preds.push((item.label, classify(&grad_img)?));
        }
        random_points.push(SweepPoint {
            proportion: p,
            accuracy: accuracy_of(&rand_preds),
            predictions: rand_preds,
        });
        grad_points.push(SweepPoint {
            proportion: p,
            accuracy: accuracy_of(&grad_preds),
            predictions: grad_preds,
        });
    }
    Ok(SweepReport {
        random: random_points,
        grad: grad_points,
    })
}

/// Renders the sweep as the standard two-curve plot.
pub fn plot_sweep(report: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    let random: Vec<(f64, f64)> = report
        .random
        .iter()
        .map(|p| (p.proportion, p.accuracy))
        .collect();
    let grad: Vec<(f64, f64)> = report
        .grad
        .iter()
        .map(|p| (p.proportion, p.accuracy))
        .collect();
    let max_x = random
        .iter()
        .map(|&(x, _)| x)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    crate::plot::line_plot(
        path,
        "accuracy by occlusion proportion",
        "occlusion proportion",
        "accuracy",
        &[
            crate::plot::Series {
                label: "random",
                points: &random,
                color: [0.12, 0.33, 0.85],
            },
            crate::plot::Series {
                label: "grad",
                points: &grad,
                color: [0.85, 0.2, 0.12],
            },
        ],
        (0.0, max_x),
        (0.0, 1.0),
    )
}

// ---------------------------------------------------------------------------
// model persistence
// ---------------------------------------------------------------------------

pub fn save_semantic(cfg: &ExperimentConfig, model: &FerModel) -> Result<()> {
    std::fs::create_dir_all(&cfg.models_dir).map_err(|e| Error::io(&cfg.models_dir, e))?;
    crate::checkpoint::save(
        cfg.semantic_path(),
        &crate::checkpoint::params_entries("semantic", &model.params),
    )
}

pub fn load_semantic(cfg: &ExperimentConfig) -> Result<FerModel> {
    let path = cfg.semantic_path();
    if !path.is_file() {
        return Err(Error::MissingModel("semantic"));
    }
    let mut model = FerModel::new(cfg.fer_config(LatentMode::None, true), 0);
    let entries = crate::checkpoint::load(path)?;
    crate::checkpoint::apply_params("semantic", &mut model.params, &entries)?;
    Ok(model)
}

pub fn save_recon(cfg: &ExperimentConfig, model: &ReconModel) -> Result<()> {
    std::fs::create_dir_all(&cfg.models_dir).map_err(|e| Error::io(&cfg.models_dir, e))?;
    model.save(cfg.recon_path())
}

pub fn load_recon(cfg: &ExperimentConfig) -> Result<ReconModel> {
    let path = cfg.recon_path();
    if !path.is_file() {
        return Err(Error::MissingModel("recon"));
    }
    ReconModel::load(cfg.recon_config(), path)
}

pub fn save_svdd(cfg: &ExperimentConfig, model: &SvddModel) -> Result<()> {
    std::fs::create_dir_all(&cfg.models_dir).map_err(|e| Error::io(&cfg.models_dir, e))?;
    crate::checkpoint::save(
        cfg.svdd_path(),
        &crate::checkpoint::params_entries("svdd", &model.params),
    )?;
    let sidecar = serde_json::to_string_pretty(&model.sidecar())?;
    std::fs::write(cfg.svdd_sidecar_path(), sidecar)
        .map_err(|e| Error::io(cfg.svdd_sidecar_path(), e))
}

pub fn load_svdd(cfg: &ExperimentConfig) -> Result<SvddModel> {
    let path = cfg.svdd_path();
    let sidecar_path = cfg.svdd_sidecar_path();
    if !path.is_file() || !sidecar_path.is_file() {
        return Err(Error::MissingModel("svdd"));
    }
    let mut model = SvddModel::new(&cfg.svdd_config(), 0);
    let entries = crate::checkpoint::load(path)?;
    crate::checkpoint::apply_params("svdd", &mut model.params, &entries)?;
    let text = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: SvddSidecar = serde_json::from_str(&text)?;
    model.apply_sidecar(&sidecar)?;
    Ok(model)
}

pub fn save_fer(cfg: &ExperimentConfig, model: &FerModel) -> Result<()> {
    std::fs::create_dir_all(&cfg.models_dir).map_err(|e| Error::io(&cfg.models_dir, e))?;
    crate::checkpoint::save(
        cfg.fer_path(),
        &crate::checkpoint::params_entries("fer", &model.params),
    )
}

pub fn load_fer(cfg: &ExperimentConfig) -> Result<FerModel> {
    let path = cfg.fer_path();
    if !path.is_file() {
        return Err(Error::MissingModel("fer"));
    }
    let mut model = FerModel::new(cfg.fer_config(cfg.fer_latent_mode, cfg.fer_use_cnn), 0);
    let entries = crate::checkpoint::load(path)?;
    crate::checkpoint::apply_params("fer", &mut model.params, &entries)?;
    Ok(model)
}
