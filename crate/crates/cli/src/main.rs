//! Command-line driver: dataset generation, stage training, detection,
//! reconstruction, prediction, the occlusion sweep, and the ablation grid.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 model error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latent_ofer::config::ExperimentConfig;
use latent_ofer::dataset::ingest;
use latent_ofer::error::{Error, ErrorClass};
use latent_ofer::ferhead::EXPRESSION_NAMES;
use latent_ofer::image::Image;
use latent_ofer::metrics::image_quality;
use latent_ofer::patchgrid::{partition, OcclusionMask};
use latent_ofer::pipeline;
use latent_ofer::report::EvaluationReport;
use latent_ofer::reconstruct::LossParts;
use latent_ofer::toydata::generate_toy_dataset;

#[derive(Parser)]
#[command(name = "latent-ofer", about = "Occlusion-aware facial expression recognition")]
struct Cli {
    /// Experiment config file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (highest precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative config paths are resolved against it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Renders the procedural face dataset (train and eval splits).
    GenData,
    /// Trains the hybrid reconstruction network (and the frozen semantic
    /// classifier first, if missing).
    TrainRecon,
    /// Trains the patch-occlusion detector on clean-image latents.
    TrainSvdd,
    /// Trains the expression recognition head.
    TrainFer,
    /// Detects occluded patches of one image and writes the mask JSON.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Reconstructs one image; the mask comes from a file or the detector.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Full pipeline prediction for one image.
    Predict {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Accuracy across occlusion proportions for both protocols.
    Sweep,
    /// The ten-row module ablation grid.
    Ablate,
    /// Re-validates and summarizes a saved evaluation report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Model => 3,
            })
        }
    }
}

/// Relative config paths resolve against the output directory.
fn rebase(cfg: &mut ExperimentConfig, out: &Path) {
    for p in [
        &mut cfg.data_dir,
        &mut cfg.train_manifest,
        &mut cfg.eval_manifest,
        &mut cfg.models_dir,
    ] {
        if p.is_relative() {
            *p = out.join(&p);
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.apply_env_seed(std::env::var(latent_ofer::config::SEED_ENV_VAR).ok().as_deref())?;
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    rebase(&mut cfg, &cli.out);
    cfg.validate()?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".to_string())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::GenData => {
            let train_dir = cfg.train_manifest.parent().unwrap().to_path_buf();
            let eval_dir = cfg.eval_manifest.parent().unwrap().to_path_buf();
            let train = generate_toy_dataset(cfg.toy_train, cfg.seed, &train_dir)?;
            let eval = generate_toy_dataset(cfg.toy_eval, cfg.seed ^ 0xe7a1, &eval_dir)?;
            println!("wrote {} and {}", train.display(), eval.display());
            Ok(())
        }
        Command::TrainRecon => {
            cfg.validate_train_data()?;
            let train = ingest(&cfg.train_manifest)?;
            let semantic = match pipeline::load_semantic(&cfg) {
                Ok(m) => m,
                Err(Error::MissingModel(_)) => {
                    println!("training frozen semantic classifier first");
                    let m = pipeline::train_semantic_stage(&cfg, &train, cfg.seed)?;
                    pipeline::save_semantic(&cfg, &m)?;
                    m
                }
                Err(e) => return Err(e),
            };
            let trainer = pipeline::train_recon_stage(&cfg, &train, &semantic, cfg.seed, None)?;
            pipeline::save_recon(&cfg, &trainer.model)?;
            println!("wrote {}", cfg.recon_path().display());
            Ok(())
        }
        Command::TrainSvdd => {
            cfg.validate_train_data()?;
            let train = ingest(&cfg.train_manifest)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::train_svdd_stage(&cfg, &recon, &train, cfg.seed)?;
            pipeline::save_svdd(&cfg, &svdd)?;
            println!(
                "wrote {} (radius {:.4})",
                cfg.svdd_path().display(),
                svdd.radius
            );
            Ok(())
        }
        Command::TrainFer => {
            cfg.validate_train_data()?;
            let train = ingest(&cfg.train_manifest)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::load_svdd(&cfg)?;
            let row = pipeline::RowSpec {
                reconstruction: cfg.eval_use_reconstruction,
                cnn_features: cfg.fer_use_cnn,
                latent_mode: cfg.fer_latent_mode,
            };
            let fer = pipeline::train_fer_stage(&cfg, &recon, &svdd, &train, row, cfg.seed)?;
            pipeline::save_fer(&cfg, &fer)?;
            println!("wrote {}", cfg.fer_path().display());
            Ok(())
        }
        Command::Detect { input } => {
            let image = Image::load_png(&input)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::load_svdd(&cfg)?;
            let grid = partition(&image, cfg.patch_size)?;
            let latents = recon.embed(&grid, None)?;
            let (mask, _) = svdd.classify_patches(&latents)?;
            let path = out.join(format!("{}_mask.json", stem(&input)));
            std::fs::write(&path, mask.to_json()).map_err(|e| Error::io(&path, e))?;
            println!(
                "wrote {} ({} of {} patches occluded)",
                path.display(),
                mask.occluded_count(),
                mask.len()
            );
            Ok(())
        }
        Command::Reconstruct { input, mask } => {
            let image = Image::load_png(&input)?;
            let recon = pipeline::load_recon(&cfg)?;
            let grid = partition(&image, cfg.patch_size)?;
            let mask = match mask {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    OcclusionMask::from_json(&text)?
                }
                None => {
                    let svdd = pipeline::load_svdd(&cfg)?;
                    let latents = recon.embed(&grid, None)?;
                    svdd.classify_patches(&latents)?.0
                }
            };
            let rec = recon.reconstruct(&grid, &mask)?;
            let png_path = out.join(format!("{}_recon.png", stem(&input)));
            rec.refined.save_png(&png_path)?;
            let (p, s) = image_quality(&image, &rec.refined)?;
            let quality = latent_ofer::report::QualityReport {
                psnr: p.is_finite().then_some(p),
                ssim: s,
                loss_means: Some(LossParts {
                    re: latent_ofer::reconstruct::reconstruction_loss(
                        &image,
                        &rec.refined,
                        &mask,
                        cfg.patch_size,
                    )?,
                    c: 0.0,
                    sc: 0.0,
                    d: 0.0,
                    df: 0.0,
                }),
                mask_proportion: mask.proportion(),
            };
            let json_path = out.join(format!("{}_recon.json", stem(&input)));
            std::fs::write(&json_path, serde_json::to_string_pretty(&quality)?)
                .map_err(|e| Error::io(&json_path, e))?;
            println!("wrote {} and {}", png_path.display(), json_path.display());
            Ok(())
        }
        Command::Predict { input } => {
            let image = Image::load_png(&input)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::load_svdd(&cfg)?;
            let fer = pipeline::load_fer(&cfg)?;
            let outcome = pipeline::predict_pipeline(&image, cfg.patch_size, &recon, &svdd, &fer)?;
            let path = out.join(format!("{}_prediction.json", stem(&input)));
            std::fs::write(&path, serde_json::to_string_pretty(&outcome)?)
                .map_err(|e| Error::io(&path, e))?;
            println!(
                "{} ({}), wrote {}",
                EXPRESSION_NAMES[outcome.label],
                outcome.label,
                path.display()
            );
            Ok(())
        }
        Command::Sweep => {
            cfg.validate_eval_data()?;
            let eval = ingest(&cfg.eval_manifest)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::load_svdd(&cfg)?;
            let fer = pipeline::load_fer(&cfg)?;
            let sweep = pipeline::run_occlusion_sweep(
                &cfg,
                &recon,
                &svdd,
                &fer,
                &eval,
                cfg.eval_use_reconstruction,
                cfg.seed,
            )?;
            let report = EvaluationReport {
                seed: cfg.seed,
                sweep: Some(sweep),
                ..Default::default()
            };
            let json_path = out.join("sweep.json");
            report.save(&json_path)?;
            let plot_path = out.join("sweep.png");
            pipeline::plot_sweep(report.sweep.as_ref().unwrap(), &plot_path)?;
            println!("wrote {} and {}", json_path.display(), plot_path.display());
            Ok(())
        }
        Command::Ablate => {
            cfg.validate_train_data()?;
            cfg.validate_eval_data()?;
            let train = ingest(&cfg.train_manifest)?;
            let eval = ingest(&cfg.eval_manifest)?;
            let recon = pipeline::load_recon(&cfg)?;
            let svdd = pipeline::load_svdd(&cfg)?;
            let rows = pipeline::run_ablation(&cfg, &recon, &svdd, &train, &eval, cfg.seed)?;
            let report = EvaluationReport {
                seed: cfg.seed,
                ablation: Some(rows),
                ..Default::default()
            };
            let path = out.join("ablation.json");
            report.save(&path)?;
            print_ablation(&report);
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Report { input } => {
            let report = EvaluationReport::load(&input)?;
            report.verify_accuracies()?;
            if let Some(sweep) = &report.sweep {
                println!("sweep (proportion: random / grad):");
                for (r, g) in sweep.random.iter().zip(sweep.grad.iter()) {
                    println!(
                        "  {:.2}: {:.4} / {:.4}",
                        r.proportion, r.accuracy, g.accuracy
                    );
                }
                let plot_path = out.join("report_sweep.png");
                pipeline::plot_sweep(sweep, &plot_path)?;
                println!("wrote {}", plot_path.display());
            }
            if let Some(d) = &report.detection {
                println!(
                    "detection: accuracy {:.4} precision {:.4} recall {:.4}",
                    d.accuracy, d.precision, d.recall
                );
            }
            if let Some(q) = &report.reconstruction {
                println!(
                    "reconstruction: psnr {} ssim {:.4} (mask {:.2})",
                    q.psnr.map(|p| format!("{p:.2}")).unwrap_or("inf".into()),
                    q.ssim,
                    q.mask_proportion
                );
            }
            print_ablation(&report);
            Ok(())
        }
    }
}

fn print_ablation(report: &EvaluationReport) {
    if let Some(rows) = &report.ablation {
        println!("ablation (reconstruction | cnn | latents -> accuracy):");
        for r in rows {
            println!(
                "  {} | {} | {:9} -> {:.4}",
                if r.reconstruction { "yes" } else { " no" },
                if r.cnn_features { "yes" } else { " no" },
                r.latents,
                r.accuracy
            );
        }
    }
}
