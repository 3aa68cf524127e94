//! Patch-level occlusion detector: a one-class hypersphere objective over
//! transformer latents.
//!
//! A bias-free projection MLP is trained on latents of unoccluded patches
//! only, pulling them toward a fixed center; the decision radius is the
//! configured quantile of the training distances and a patch whose projected
//! latent falls strictly outside is classified occluded.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::LatentSet;
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::{Adam, ParamSet, Tape, TapeBinding, Var};
use crate::patchgrid::OcclusionMask;
use crate::util::{quantile, stream_rng};

/// Center coordinates with magnitude below this are clamped away from zero,
/// the usual guard against the all-zero collapse solution.
pub const CENTER_CLAMP: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SvddConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Weight-decay strength in the objective; must be positive.
    pub lambda: f64,
    /// Autoencoder pretraining epochs for the projection network. The
    /// hypersphere objective alone admits a degenerate norm-only solution;
    /// starting from a reconstruction-trained encoder keeps the projection
    /// informative, after which the quadratic objective only tightens it.
    pub pretrain_epochs: usize,
    /// Training-distance quantile that sets the radius.
    pub quantile: f64,
    /// Transformer depth the latents are tapped at (recorded so detection
    /// always embeds at the depth the model was trained on).
    pub latent_depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SvddConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden_dim: 64,
            out_dim: 32,
            lambda: 1e-3,
            pretrain_epochs: 60,
            quantile: 0.99,
            latent_depth: 1,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Distance and verdict for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScore {
    pub index: usize,
    pub distance: f64,
    pub occluded: bool,
}

/// JSON sidecar stored next to the projection-weight checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct SvddSidecar {
    pub center: Vec<f64>,
    pub radius: f64,
    pub quantile: f64,
    pub lambda: f64,
    pub n_train: usize,
    #[serde(default)]
    pub latent_depth: usize,
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_std: Vec<f64>,
}

pub struct SvddModel {
    pub params: ParamSet,
    l1: Linear,
    l2: Linear,
    pub center: Array1<f64>,
    pub radius: f64,
    pub lambda: f64,
    pub quantile: f64,
    pub n_train: usize,
    pub latent_dim: usize,
    pub latent_depth: usize,
    /// Frozen input standardization fitted on the training latents. A
    /// bias-free network is positively homogeneous, so centering the data
    /// at the origin is what lets it wrap the manifold around the offset
    /// center at all.
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
}

impl SvddModel {
    /// Fresh, untrained model with zero center and radius.
    pub fn new(config: &SvddConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "svdd-init", 0);
        let mut ps = ParamSet::new();
        // No bias terms anywhere in the projection network (collapse guard).
        let l1 = Linear::new(
            &mut ps,
            "svdd.l1",
            config.latent_dim,
            config.hidden_dim,
            false,
            &mut rng,
        );
        let l2 = Linear::new(
            &mut ps,
            "svdd.l2",
            config.hidden_dim,
            config.out_dim,
            false,
            &mut rng,
        );
        Self {
            params: ps,
            l1,
            l2,
            center: Array1::zeros(config.out_dim),
            radius: 0.0,
            lambda: config.lambda,
            quantile: config.quantile,
            n_train: 0,
            latent_dim: config.latent_dim,
            latent_depth: config.latent_depth,
            input_mean: Array1::zeros(config.latent_dim),
            input_std: Array1::ones(config.latent_dim),
        }
    }

    /// Fits the frozen standardizer.
    pub fn fit_normalizer(&mut self, latents: &Array2<f64>) {
        let n = latents.nrows() as f64;
        let mean = latents.mean_axis(Axis(0)).unwrap();
        let mut std = Array1::zeros(latents.ncols());
        for j in 0..latents.ncols() {
            let var: f64 = latents
                .column(j)
                .iter()
                .map(|v| (v - mean[j]) * (v - mean[j]))
                .sum::<f64>()
                / n;
            std[j] = var.sqrt().max(1e-6);
        }
        self.input_mean = mean;
        self.input_std = std;
    }

    fn standardize(&self, latents: &Array2<f64>) -> Array2<f64> {
        let mut out = latents.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.input_mean[j]) / self.input_std[j];
            }
        }
        out
    }

    pub fn out_dim(&self) -> usize {
        self.center.len()
    }

    fn check_dim(&self, latents: &Array2<f64>) -> Result<()> {
        if latents.ncols() != self.latent_dim {
            return Err(Error::LatentDimMismatch {
                expected: self.latent_dim,
                got: latents.ncols(),
            });
        }
        Ok(())
    }

    fn project_on(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let h = self.l1.forward(t, bind, x);
        let h = t.relu(h);
        self.l2.forward(t, bind, h)
    }

    /// Projects latents [n, latent_dim] -> [n, out_dim], inference only.
    pub fn project(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(latents)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(self.standardize(latents).into_dyn());
        let y = self.project_on(&mut tape, &bind, x);
        Ok(tape
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("projection is 2-D"))
    }

    /// Distances ||phi(x) - c|| for each row.
    pub fn distances(&self, latents: &Array2<f64>) -> Result<Vec<f64>> {
        let proj = self.project(latents)?;
        Ok(proj
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(self.center.iter())
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// Scores every latent; a patch is occluded iff its distance strictly
    /// exceeds the radius.
    pub fn classify_patches(&self, latents: &LatentSet) -> Result<(OcclusionMask, Vec<PatchScore>)> {
        if self.n_train == 0 {
            return Err(Error::MissingModel("svdd"));
        }
        let dists = self.distances(latents.vectors())?;
        let scores: Vec<PatchScore> = dists
            .iter()
            .enumerate()
            .map(|(index, &distance)| PatchScore {
                index,
                distance,
                occluded: distance > self.radius,
            })
            .collect();
        let mask = OcclusionMask::new(
            scores.iter().map(|s| s.occluded).collect(),
            latents.rows(),
            latents.cols(),
        )?;
        Ok((mask, scores))
    }

    /// The objective value on a batch, forward only.
    pub fn svdd_loss(&self, latents: &Array2<f64>) -> Result<f64> {
        self.check_dim(latents)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(self.standardize(latents).into_dyn());
        let loss = self.loss_on(&mut tape, &bind, x, latents.nrows());
        Ok(tape.scalar_value(loss))
    }

    /// Builds (1/n) sum ||phi(x_i) - c||^2 + (lambda/2) sum_l ||w_l||_F^2 on
    /// a tape. `x` must already be standardized.
    pub fn loss_on(&self, t: &mut Tape, bind: &TapeBinding, x: Var, n: usize) -> Var {
        let proj = self.project_on(t, bind, x);
        let neg_c = t.leaf(self.center.mapv(|v| -v).into_dyn());
        let diff = t.add_row(proj, neg_c);
        let sq = t.mul(diff, diff);
        let total = t.sum(sq);
        let data_term = t.scale(total, 1.0 / n as f64);

        let w1 = bind.var(self.l1.w);
        let w2 = bind.var(self.l2.w);
        let w1sq = t.mul(w1, w1);
        let w2sq = t.mul(w2, w2);
        let r1 = t.sum(w1sq);
        let r2 = t.sum(w2sq);
        let reg = t.add(r1, r2);
        let reg = t.scale(reg, self.lambda / 2.0);
        t.add(data_term, reg)
    }

    pub fn sidecar(&self) -> SvddSidecar {
        SvddSidecar {
            center: self.center.to_vec(),
            radius: self.radius,
            quantile: self.quantile,
            lambda: self.lambda,
            n_train: self.n_train,
            latent_depth: self.latent_depth,
            input_mean: self.input_mean.to_vec(),
            input_std: self.input_std.to_vec(),
        }
    }

    pub fn apply_sidecar(&mut self, side: &SvddSidecar) -> Result<()> {
        if side.center.len() != self.center.len() {
            return Err(Error::CheckpointFormat(format!(
                "svdd center has {} coords, expected {}",
                side.center.len(),
                self.center.len()
            )));
        }
        self.center = Array1::from_vec(side.center.clone());
        self.radius = side.radius;
        self.quantile = side.quantile;
        self.lambda = side.lambda;
        self.n_train = side.n_train;
        self.latent_depth = side.latent_depth;
        if !side.input_mean.is_empty() {
            self.input_mean = Array1::from_vec(side.input_mean.clone());
            self.input_std = Array1::from_vec(side.input_std.clone());
        }
        Ok(())
    }
}

/// Mean of initially projected latents, with small coordinates clamped to
/// +/- [`CENTER_CLAMP`] (zero-mean coordinates clamp positive).
pub fn init_center(projected: &Array2<f64>) -> Result<Array1<f64>> {
    if projected.nrows() == 0 {
        return Err(Error::EmptyInput("init_center needs at least one latent"));
    }
    let mut c = projected.mean_axis(Axis(0)).unwrap();
    c.mapv_inplace(|v| {
        if v.abs() < CENTER_CLAMP {
            if v < 0.0 {
                -CENTER_CLAMP
            } else {
                CENTER_CLAMP
            }
        } else {
            v
        }
    });
    Ok(c)
}

/// The radius rule: the q-quantile (linear interpolation) of training
/// distances.
pub fn determine_radius(train_distances: &[f64], q: f64) -> Result<f64> {
    if train_distances.is_empty() {
        return Err(Error::EmptyInput("determine_radius needs distances"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::ProportionOutOfRange(q));
    }
    let mut sorted = train_distances.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantile(&sorted, q))
}

/// Per-epoch mean objective values from a training run.
pub type LossHistory = Vec<f64>;

/// Autoencoder pretraining: the projection is the encoder of a bias-free
/// bottleneck autoencoder fitted to the standardized latents; the decoder is
/// discarded afterwards.
fn pretrain_projection(
    model: &mut SvddModel,
    standardized: &Array2<f64>,
    config: &SvddConfig,
    seed: u64,
) {
    use crate::nn::layers::Linear;
    let mut rng = stream_rng(seed, "svdd-ae-init", 0);
    let mut dec_params = ParamSet::new();
    let d1 = Linear::new(
        &mut dec_params,
        "dec.l1",
        config.out_dim,
        config.hidden_dim,
        false,
        &mut rng,
    );
    let d2 = Linear::new(
        &mut dec_params,
        "dec.l2",
        config.hidden_dim,
        config.latent_dim,
        false,
        &mut rng,
    );
    let mut adam_enc = Adam::new(&model.params, config.learning_rate);
    let mut adam_dec = Adam::new(&dec_params, config.learning_rate);
    let n = standardized.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.pretrain_epochs {
        let mut rng = stream_rng(seed, "svdd-ae-epoch", epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Array2::zeros((chunk.len(), config.latent_dim));
            for (bi, &si) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&standardized.row(si));
            }
            let mut tape = Tape::new();
            let enc_bind = tape.bind(&model.params);
            let dec_bind = tape.bind(&dec_params);
            let x = tape.leaf(batch.into_dyn());
            let z = model.project_on(&mut tape, &enc_bind, x);
            let h = d1.forward(&mut tape, &dec_bind, z);
            let h = tape.relu(h);
            let y = d2.forward(&mut tape, &dec_bind, h);
            let diff = tape.sub(y, x);
            let sq = tape.mul(diff, diff);
            let loss = tape.mean(sq);
            let grads = tape.backward(loss);
            adam_enc.step(&mut model.params, &grads.for_binding(&enc_bind));
            adam_dec.step(&mut dec_params, &grads.for_binding(&dec_bind));
        }
    }
}

/// Trains the projection network on latents of unoccluded patches only,
/// fixes the center from the initial forward pass, then sets the radius from
/// the training-distance quantile.
pub fn train_svdd(
    unoccluded_latents: &Array2<f64>,
    config: &SvddConfig,
    seed: u64,
) -> Result<(SvddModel, LossHistory)> {
    if unoccluded_latents.nrows() == 0 {
        return Err(Error::EmptyInput("train_svdd needs a nonempty dataset"));
    }
    let mut model = SvddModel::new(config, seed);
    model.check_dim(unoccluded_latents)?;
    model.fit_normalizer(unoccluded_latents);
    if config.pretrain_epochs > 0 {
        let standardized = model.standardize(unoccluded_latents);
        pretrain_projection(&mut model, &standardized, config, seed);
    }

    let initial = model.project(unoccluded_latents)?;
    model.center = init_center(&initial)?;

    let n = unoccluded_latents.nrows();
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let mut rng = stream_rng(seed, "svdd-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Array2::zeros((chunk.len(), config.latent_dim));
            for (bi, &si) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&unoccluded_latents.row(si));
            }
            let batch = model.standardize(&batch);
            let mut tape = Tape::new();
            let bind = tape.bind(&model.params);
            let x = tape.leaf(batch.into_dyn());
            let loss = model.loss_on(&mut tape, &bind, x, chunk.len());
            epoch_loss += tape.scalar_value(loss);
            batches += 1.0;
            let grads = tape.backward(loss);
            adam.step(&mut model.params, &grads.for_binding(&bind));
        }
        history.push(epoch_loss / batches);
    }

    let dists = model.distances(unoccluded_latents)?;
    model.radius = determine_radius(&dists, config.quantile)?;
    model.n_train = n;
    Ok((model, history))
}

/// Detection quality with occluded as the positive class. Zero-denominator
/// precision/recall return the defined value 1.0 and set the warning flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// True when a zero-denominator case forced a defined value.
    pub degenerate: bool,
}

pub fn detection_metrics(predicted: &OcclusionMask, truth: &OcclusionMask) -> Result<DetectionMetrics> {
    if predicted.rows() != truth.rows() || predicted.cols() != truth.cols() {
        return Err(Error::GridShapeMismatch {
            expected_rows: truth.rows(),
            expected_cols: truth.cols(),
            rows: predicted.rows(),
            cols: predicted.cols(),
        });
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut tn = 0.0;
    let mut fnn = 0.0;
    for i in 0..truth.len() {
        match (predicted.get(i), truth.get(i)) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fnn += 1.0,
        }
    }
    let total = tp + fp + tn + fnn;
    let mut degenerate = false;
    let precision = if tp + fp == 0.0 {
        degenerate = true;
        1.0
    } else {
        tp / (tp + fp)
    };
    let recall = if tp + fnn == 0.0 {
        degenerate = true;
        1.0
    } else {
        tp / (tp + fnn)
    };
    Ok(DetectionMetrics {
        accuracy: (tp + tn) / total,
        precision,
        recall,
        degenerate,
    })
}

/// Aggregates per-image masks into one metric triple.
pub fn detection_metrics_over(
    pairs: &[(OcclusionMask, OcclusionMask)],
) -> Result<DetectionMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no mask pairs"));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut tn = 0.0;
    let mut fnn = 0.0;
    for (predicted, truth) in pairs {
        if predicted.rows() != truth.rows() || predicted.cols() != truth.cols() {
            return Err(Error::GridShapeMismatch {
                expected_rows: truth.rows(),
                expected_cols: truth.cols(),
                rows: predicted.rows(),
                cols: predicted.cols(),
            });
        }
        for i in 0..truth.len() {
            match (predicted.get(i), truth.get(i)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fnn += 1.0,
            }
        }
    }
    let total = tp + fp + tn + fnn;
    let mut degenerate = false;
    let precision = if tp + fp == 0.0 {
        degenerate = true;
        1.0
    } else {
        tp / (tp + fp)
    };
    let recall = if tp + fnn == 0.0 {
        degenerate = true;
        1.0
    } else {
        tp / (tp + fnn)
    };
    Ok(DetectionMetrics {
        accuracy: (tp + tn) / total,
        precision,
        recall,
        degenerate,
    })
}
