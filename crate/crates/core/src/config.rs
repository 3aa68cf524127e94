//! Experiment configuration: a flat key-value text format with `[section]`
//! headers, `#` comments, and an environment override for the seed.

use std::path::{Path, PathBuf};

use crate::encoder::{CnnConfig, VitConfig};
use crate::error::{Error, Result};
use crate::ferhead::{FerConfig, FerTrainConfig, LatentMode};
use crate::reconstruct::{LossWeights, ReconConfig};
use crate::svdd::SvddConfig;

pub const SEED_ENV_VAR: &str = "LATENT_OFER_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // geometry
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    // transformer
    pub latent_dim: usize,
    pub vit_blocks: usize,
    pub vit_heads: usize,
    pub vit_mlp_dim: usize,
    // convolutional branch
    pub cnn_channels: Vec<usize>,
    pub cnn_reduction: usize,
    // svdd
    pub svdd_hidden_dim: usize,
    pub svdd_out_dim: usize,
    pub svdd_lambda: f64,
    pub svdd_pretrain_epochs: usize,
    /// Transformer depth the detector taps for its latents (0 = patch
    /// embedding plus positions).
    pub svdd_latent_depth: usize,
    pub svdd_quantile: f64,
    pub svdd_epochs: usize,
    pub svdd_batch: usize,
    pub svdd_lr: f64,
    // reconstruction
    pub unet_channels: Vec<usize>,
    pub self_assembly: bool,
    /// Desk-scale trade-offs. The published full-scale defaults
    /// (`LossWeights::default()`) put far more weight on the semantic term
    /// than a from-scratch frozen classifier can support: its gradients act
    /// as adversarial noise inside the mask and stall the pixel loss.
    pub loss_weights: LossWeights,
    pub recon_epochs: usize,
    pub recon_batch: usize,
    pub recon_lr: f64,
    pub recon_disc_lr: f64,
    pub recon_mask_lo: f64,
    pub recon_mask_hi: f64,
    // recognition
    pub fer_epochs: usize,
    pub fer_batch: usize,
    pub fer_lr: f64,
    pub fer_latent_mode: LatentMode,
    pub fer_use_cnn: bool,
    pub fer_train_occlusion: f64,
    pub semantic_epochs: usize,
    // evaluation
    pub eval_protocol: String,
    pub eval_proportion: f64,
    pub eval_use_reconstruction: bool,
    pub sweep_proportions: Vec<f64>,
    // paths
    pub data_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub models_dir: PathBuf,
    // toy data generation
    pub toy_train: usize,
    pub toy_eval: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 64,
            patch_size: 16,
            channels: 1,
            latent_dim: 64,
            vit_blocks: 4,
            vit_heads: 4,
            vit_mlp_dim: 128,
            cnn_channels: vec![8, 16, 32, 32],
            cnn_reduction: 4,
            svdd_hidden_dim: 160,
            svdd_out_dim: 16,
            svdd_lambda: 1e-4,
            svdd_pretrain_epochs: 100,
            svdd_latent_depth: 0,
            svdd_quantile: 0.96,
            svdd_epochs: 10,
            svdd_batch: 64,
            svdd_lr: 1e-3,
            unet_channels: vec![12, 16, 24, 32],
            self_assembly: true,
            loss_weights: LossWeights {
                re: 1.0,
                c: 0.01,
                sc: 0.05,
                d: 0.002,
            },
            recon_epochs: 12,
            recon_batch: 4,
            recon_lr: 2e-3,
            recon_disc_lr: 1e-3,
            recon_mask_lo: 0.1,
            recon_mask_hi: 0.4,
            fer_epochs: 60,
            fer_batch: 16,
            fer_lr: 3e-3,
            fer_latent_mode: LatentMode::Extracted,
            fer_use_cnn: true,
            fer_train_occlusion: 0.25,
            semantic_epochs: 80,
            eval_protocol: "random".to_string(),
            eval_proportion: 0.25,
            eval_use_reconstruction: true,
            sweep_proportions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            data_dir: PathBuf::from("data"),
            train_manifest: PathBuf::from("data/train/labels.csv"),
            eval_manifest: PathBuf::from("data/eval/labels.csv"),
            models_dir: PathBuf::from("models"),
            toy_train: 350,
            toy_eval: 140,
        }
    }
}

impl ExperimentConfig {
    pub fn grid_rows(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            patch_size: self.patch_size,
            grid_rows: self.grid_rows(),
            grid_cols: self.grid_cols(),
            channels: self.channels,
            dim: self.latent_dim,
            blocks: self.vit_blocks,
            heads: self.vit_heads,
            mlp_dim: self.vit_mlp_dim,
            use_pos: true,
        }
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig {
            channels_in: self.channels,
            stage_channels: self.cnn_channels.clone(),
            cbam_reduction: self.cnn_reduction,
            grid_rows: self.grid_rows(),
            grid_cols: self.grid_cols(),
        }
    }

    pub fn svdd_config(&self) -> SvddConfig {
        SvddConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.svdd_hidden_dim,
            out_dim: self.svdd_out_dim,
            lambda: self.svdd_lambda,
            pretrain_epochs: self.svdd_pretrain_epochs,
            quantile: self.svdd_quantile,
            latent_depth: self.svdd_latent_depth,
            epochs: self.svdd_epochs,
            batch_size: self.svdd_batch,
            learning_rate: self.svdd_lr,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            vit: self.vit_config(),
            unet_channels: self.unet_channels.clone(),
            self_assembly: self.self_assembly,
            weights: self.loss_weights,
            epochs: self.recon_epochs,
            batch_size: self.recon_batch,
            lr_generator: self.recon_lr,
            lr_discriminator: self.recon_disc_lr,
            mask_proportion_range: (self.recon_mask_lo, self.recon_mask_hi),
        }
    }

    pub fn fer_config(&self, latent_mode: LatentMode, use_cnn: bool) -> FerConfig {
        FerConfig {
            cnn: self.cnn_config(),
            latent_mode,
            latent_dim: self.latent_dim,
            use_cnn_features: use_cnn,
        }
    }

    pub fn fer_train_config(&self) -> FerTrainConfig {
        FerTrainConfig {
            epochs: self.fer_epochs,
            batch_size: self.fer_batch,
            learning_rate: self.fer_lr,
        }
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if 1usize << self.cnn_channels.len() != self.patch_size {
            return Err(Error::Config(format!(
                "{} cnn stages cannot downsample to a patch-{} grid",
                self.cnn_channels.len(),
                self.patch_size
            )));
        }
        if 1usize << self.unet_channels.len() != self.patch_size {
            return Err(Error::Config(format!(
                "{} unet stages cannot downsample to a patch-{} grid",
                self.unet_channels.len(),
                self.patch_size
            )));
        }
        if self.svdd_latent_depth > self.vit_blocks {
            return Err(Error::Config(format!(
                "svdd latent depth {} exceeds {} transformer blocks",
                self.svdd_latent_depth, self.vit_blocks
            )));
        }
        if !(0.0 < self.svdd_quantile && self.svdd_quantile <= 1.0) {
            return Err(Error::Config(format!(
                "svdd quantile {} outside (0, 1]",
                self.svdd_quantile
            )));
        }
        if self.latent_dim % self.vit_heads != 0 {
            return Err(Error::Config(format!(
                "latent dim {} not divisible by {} heads",
                self.latent_dim, self.vit_heads
            )));
        }
        self.loss_weights.validate()?;
        if !(0.0..=1.0).contains(&self.eval_proportion) {
            return Err(Error::Config(format!(
                "eval proportion {} outside [0, 1]",
                self.eval_proportion
            )));
        }
        Ok(())
    }

    /// Path existence checks for commands that consume data or models.
    pub fn validate_train_data(&self) -> Result<()> {
        if !self.train_manifest.is_file() {
            return Err(Error::ManifestMissing(self.train_manifest.clone()));
        }
        Ok(())
    }

    pub fn validate_eval_data(&self) -> Result<()> {
        if !self.eval_manifest.is_file() {
            return Err(Error::ManifestMissing(self.eval_manifest.clone()));
        }
        Ok(())
    }

    pub fn semantic_path(&self) -> PathBuf {
        self.models_dir.join("semantic.ckpt")
    }

    pub fn recon_path(&self) -> PathBuf {
        self.models_dir.join("recon.ckpt")
    }

    pub fn svdd_path(&self) -> PathBuf {
        self.models_dir.join("svdd.ckpt")
    }

    pub fn svdd_sidecar_path(&self) -> PathBuf {
        self.models_dir.join("svdd.json")
    }

    pub fn fer_path(&self) -> PathBuf {
        self.models_dir.join("fer.ckpt")
    }

    /// Parses the sectioned key-value text into a config starting from
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got `{raw}`",
                    ln + 1
                )));
            };
            let key = format!("{}.{}", section, key.trim());
            cfg.apply(&key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env_seed(std::env::var(SEED_ENV_VAR).ok().as_deref())?;
        Ok(cfg)
    }

    /// The environment seed takes precedence over the config file.
    pub fn apply_env_seed(&mut self, env_value: Option<&str>) -> Result<()> {
        if let Some(v) = env_value {
            self.seed = v
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={v} is not a seed")))?;
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        fn plist(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| p::<usize>(key, s.trim()))
                .collect()
        }
        fn pflist(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|s| p::<f64>(key, s.trim())).collect()
        }
        match key {
            "experiment.seed" => self.seed = p(key, value)?,
            "model.image_size" => self.image_size = p(key, value)?,
            "model.patch_size" => self.patch_size = p(key, value)?,
            "model.channels" => self.channels = p(key, value)?,
            "model.latent_dim" => self.latent_dim = p(key, value)?,
            "model.vit_blocks" => self.vit_blocks = p(key, value)?,
            "model.vit_heads" => self.vit_heads = p(key, value)?,
            "model.vit_mlp_dim" => self.vit_mlp_dim = p(key, value)?,
            "model.cnn_channels" => self.cnn_channels = plist(key, value)?,
            "model.cnn_reduction" => self.cnn_reduction = p(key, value)?,
            "svdd.hidden_dim" => self.svdd_hidden_dim = p(key, value)?,
            "svdd.out_dim" => self.svdd_out_dim = p(key, value)?,
            "svdd.lambda" => self.svdd_lambda = p(key, value)?,
            "svdd.latent_depth" => self.svdd_latent_depth = p(key, value)?,
            "svdd.pretrain_epochs" => self.svdd_pretrain_epochs = p(key, value)?,
            "svdd.quantile" => self.svdd_quantile = p(key, value)?,
            "svdd.epochs" => self.svdd_epochs = p(key, value)?,
            "svdd.batch" => self.svdd_batch = p(key, value)?,
            "svdd.lr" => self.svdd_lr = p(key, value)?,
            "recon.unet_channels" => self.unet_channels = plist(key, value)?,
            "recon.self_assembly" => self.self_assembly = p(key, value)?,
            "recon.lambda_re" => self.loss_weights.re = p(key, value)?,
            "recon.lambda_c" => self.loss_weights.c = p(key, value)?,
            "recon.lambda_sc" => self.loss_weights.sc = p(key, value)?,
            "recon.lambda_d" => self.loss_weights.d = p(key, value)?,
            "recon.epochs" => self.recon_epochs = p(key, value)?,
            "recon.batch" => self.recon_batch = p(key, value)?,
            "recon.lr" => self.recon_lr = p(key, value)?,
            "recon.disc_lr" => self.recon_disc_lr = p(key, value)?,
            "recon.mask_lo" => self.recon_mask_lo = p(key, value)?,
            "recon.mask_hi" => self.recon_mask_hi = p(key, value)?,
            "fer.epochs" => self.fer_epochs = p(key, value)?,
            "fer.batch" => self.fer_batch = p(key, value)?,
            "fer.lr" => self.fer_lr = p(key, value)?,
            "fer.latent_mode" => self.fer_latent_mode = value.parse()?,
            "fer.use_cnn" => self.fer_use_cnn = p(key, value)?,
            "fer.train_occlusion" => self.fer_train_occlusion = p(key, value)?,
            "fer.semantic_epochs" => self.semantic_epochs = p(key, value)?,
            "eval.protocol" => self.eval_protocol = value.to_string(),
            "eval.proportion" => self.eval_proportion = p(key, value)?,
            "eval.use_reconstruction" => self.eval_use_reconstruction = p(key, value)?,
            "eval.sweep_proportions" => self.sweep_proportions = pflist(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.train_manifest" => self.train_manifest = PathBuf::from(value),
            "data.eval_manifest" => self.eval_manifest = PathBuf::from(value),
            "data.models_dir" => self.models_dir = PathBuf::from(value),
            "data.toy_train" => self.toy_train = p(key, value)?,
            "data.toy_eval" => self.toy_eval = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}
