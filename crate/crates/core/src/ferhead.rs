//! Expression recognition head: attention-keyed latent selection, fusion of
//! convolutional features with pooled latent vectors, the 7-class softmax
//! classifier, and gradient-weighted activation maps.

use ndarray::{Array1, Array2, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionMap, CnnConfig, CnnCore, FeatureMap, LatentSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::Linear;
use crate::nn::{Adam, ParamSet, Tape, TapeBinding, Tensor, Var};
use crate::util::{rank_desc, stream_rng};

pub const NUM_EXPRESSIONS: usize = 7;

/// Label order used everywhere, including labels.csv.
pub const EXPRESSION_NAMES: [&str; NUM_EXPRESSIONS] = [
    "neutral", "happy", "sad", "surprise", "fear", "disgust", "anger",
];

/// Probabilities over the seven basic expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionDistribution {
    probabilities: [f64; NUM_EXPRESSIONS],
}

impl ExpressionDistribution {
    pub fn new(probabilities: [f64; NUM_EXPRESSIONS]) -> Result<Self> {
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("expression probabilities"));
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::ProbabilityNotNormalized(sum));
        }
        Ok(Self { probabilities })
    }

    pub fn probabilities(&self) -> &[f64; NUM_EXPRESSIONS] {
        &self.probabilities
    }

    /// Argmax label; ties break toward the lower index.
    pub fn label(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_EXPRESSIONS {
            if self.probabilities[i] > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

/// The latent vectors at the selected attention keys.
#[derive(Debug, Clone)]
pub struct LatentSelection {
    keys: Vec<usize>,
    values: Array2<f64>,
    rule: &'static str,
}

impl LatentSelection {
    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn rule(&self) -> &'static str {
        self.rule
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Mean of the selected latent vectors; zero vector when empty.
    pub fn pooled(&self, dim: usize) -> Array1<f64> {
        if self.keys.is_empty() {
            Array1::zeros(dim)
        } else {
            self.values.mean_axis(Axis(0)).unwrap()
        }
    }

    fn from_keys(latents: &LatentSet, mut keys: Vec<usize>, rule: &'static str) -> Self {
        keys.sort_unstable();
        let mut values = Array2::zeros((keys.len(), latents.dim()));
        for (row, &k) in keys.iter().enumerate() {
            values.row_mut(row).assign(&latents.vector(k));
        }
        Self { keys, values, rule }
    }

    /// Every key, used by the full-latent fusion mode.
    pub fn all(latents: &LatentSet) -> Self {
        Self::from_keys(latents, (0..latents.len()).collect(), "all")
    }
}

/// Picks the top half of patches by attention rank (count rule:
/// ceil(N/2) keys), ties at the cutoff broken toward the lower index.
/// Occluded patches are not removed explicitly; after reconstruction the
/// attention simply stops selecting them.
pub fn select_latents(latents: &LatentSet, attention: &AttentionMap) -> Result<LatentSelection> {
    if latents.rows() != attention.rows() || latents.cols() != attention.cols() {
        return Err(Error::GridShapeMismatch {
            expected_rows: latents.rows(),
            expected_cols: latents.cols(),
            rows: attention.rows(),
            cols: attention.cols(),
        });
    }
    let n = latents.len();
    let k = n.div_ceil(2);
    let ranked = rank_desc(attention.weights());
    Ok(LatentSelection::from_keys(
        latents,
        ranked[..k].to_vec(),
        "top50-rank",
    ))
}

/// Which latent vectors the classifier fuses with CNN features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    None,
    Full,
    Extracted,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LatentMode::None),
            "full" => Ok(LatentMode::Full),
            "extracted" => Ok(LatentMode::Extracted),
            other => Err(Error::Config(format!("unknown latent mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FerConfig {
    pub cnn: CnnConfig,
    pub latent_mode: LatentMode,
    pub latent_dim: usize,
    /// When false the pooled CNN features are zeroed before fusion (the
    /// latents-only ablation rows).
    pub use_cnn_features: bool,
}

impl FerConfig {
    fn fused_dim(&self) -> usize {
        let cnn = *self.cnn.stage_channels.last().unwrap();
        match self.latent_mode {
            LatentMode::None => cnn,
            _ => cnn + self.latent_dim,
        }
    }
}

/// CNN branch plus linear classifier over fused pooled features.
pub struct FerModel {
    pub config: FerConfig,
    pub params: ParamSet,
    cnn: CnnCore,
    classifier: Linear,
}

/// Tape handles from one forward pass, for training and activation maps.
pub struct FerForward {
    pub features: Var,
    pub attention: Var,
    pub logits: Var,
    pub selection: Option<LatentSelection>,
}

impl FerModel {
    pub fn new(config: FerConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "fer-init", 0);
        let mut ps = ParamSet::new();
        let cnn = CnnCore::build(&mut ps, "fer.cnn", config.cnn.clone(), &mut rng);
        let classifier = Linear::new(
            &mut ps,
            "fer.classifier",
            config.fused_dim(),
            NUM_EXPRESSIONS,
            true,
            &mut rng,
        );
        Self {
            config,
            params: ps,
            cnn,
            classifier,
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.config.cnn.grid_rows
    }

    pub fn grid_cols(&self) -> usize {
        self.config.cnn.grid_cols
    }

    /// Feature map and CAM (same contract as the standalone backbone).
    pub fn cnn_forward(&self, image: &Image) -> Result<(FeatureMap, AttentionMap)> {
        self.cnn.check_image(image)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(image.to_chw().into_dyn());
        let (features, gate) = self.cnn.forward_on(&mut tape, &bind, x);
        let weights = self.cnn.attention_weights(&tape, gate);
        Ok((
            FeatureMap::new(
                tape.value(features)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("features are 3-D"),
            ),
            AttentionMap::from_weights(weights, self.grid_rows(), self.grid_cols())?,
        ))
    }

    /// Full forward on a tape. When the latent mode needs vectors the caller
    /// passes the (frozen) latent matrix; selection happens against the
    /// attention values of this very pass.
    pub fn forward_parts_on(
        &self,
        t: &mut Tape,
        bind: &TapeBinding,
        image_chw: Var,
        latents: Option<&LatentSet>,
    ) -> Result<FerForward> {
        let (features, gate) = self.cnn.forward_on(t, bind, image_chw);

        let pooled_feat = t.global_avg_pool(features);
        let cnn_c = self.cnn.out_channels();
        let mut pooled_feat = t.reshape(pooled_feat, &[1, cnn_c]);
        if !self.config.use_cnn_features {
            pooled_feat = t.scale(pooled_feat, 0.0);
        }

        let (fused, selection) = match self.config.latent_mode {
            LatentMode::None => (pooled_feat, None),
            mode => {
                let latents = latents.ok_or(Error::MissingModel("latents"))?;
                if latents.dim() != self.config.latent_dim {
                    return Err(Error::LatentDimMismatch {
                        expected: self.config.latent_dim,
                        got: latents.dim(),
                    });
                }
                let selection = match mode {
                    LatentMode::Full => LatentSelection::all(latents),
                    _ => {
                        let weights = self.cnn.attention_weights(t, gate);
                        let att =
                            AttentionMap::from_weights(weights, latents.rows(), latents.cols())?;
                        select_latents(latents, &att)?
                    }
                };
                let pooled_latent = selection.pooled(self.config.latent_dim);
                let pl = t.leaf(
                    pooled_latent
                        .into_shape_with_order(IxDyn(&[1, self.config.latent_dim]))
                        .unwrap(),
                );
                (t.concat(1, &[pooled_feat, pl]), Some(selection))
            }
        };
        let logits = self.classifier.forward(t, bind, fused);
        Ok(FerForward {
            features,
            attention: gate,
            logits,
            selection,
        })
    }

    /// Pooled convolutional features concatenated with mean-pooled selected
    /// latents, then the linear classifier and softmax. An empty selection
    /// contributes a zero latent vector.
    pub fn fuse_and_classify(
        &self,
        features: &FeatureMap,
        selection: Option<&LatentSelection>,
    ) -> Result<ExpressionDistribution> {
        let cnn_c = self.cnn.out_channels();
        let mut fused = Vec::with_capacity(self.config.fused_dim());
        let mut pooled_feat: Vec<f64> = (0..cnn_c)
            .map(|c| features.data().index_axis(Axis(0), c).mean().unwrap())
            .collect();
        if !self.config.use_cnn_features {
            pooled_feat.iter_mut().for_each(|v| *v = 0.0);
        }
        fused.extend_from_slice(&pooled_feat);
        if self.config.latent_mode != LatentMode::None {
            let pooled_latent = match selection {
                Some(sel) => sel.pooled(self.config.latent_dim),
                None => Array1::zeros(self.config.latent_dim),
            };
            fused.extend(pooled_latent.iter());
        }
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(Tensor::from_shape_vec(IxDyn(&[1, fused.len()]), fused).unwrap());
        let logits = self.classifier.forward(&mut tape, &bind, x);
        let probs = tape.softmax_rows(logits);
        let v = tape.value(probs);
        let mut out = [0.0; NUM_EXPRESSIONS];
        for i in 0..NUM_EXPRESSIONS {
            out[i] = v[[0, i]];
        }
        ExpressionDistribution::new(out)
    }

    /// End-to-end classification of one image.
    pub fn predict(
        &self,
        image: &Image,
        latents: Option<&LatentSet>,
    ) -> Result<(ExpressionDistribution, Option<LatentSelection>)> {
        self.cnn.check_image(image)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(image.to_chw().into_dyn());
        let parts = self.forward_parts_on(&mut tape, &bind, x, latents)?;
        let probs = tape.softmax_rows(parts.logits);
        let v = tape.value(probs);
        let mut out = [0.0; NUM_EXPRESSIONS];
        for i in 0..NUM_EXPRESSIONS {
            out[i] = v[[0, i]];
        }
        Ok((ExpressionDistribution::new(out)?, parts.selection))
    }

    /// Class probabilities; the frozen-copy entry point used by the semantic
    /// consistency loss.
    pub fn probabilities(&self, image: &Image) -> Result<[f64; NUM_EXPRESSIONS]> {
        let (dist, _) = self.predict(image, None)?;
        Ok(*dist.probabilities())
    }

    /// Gradient-weighted activation map at patch-grid resolution: channel
    /// weights are spatial means of d logit / d feature, the map is the
    /// relu'd weighted channel sum, normalized to sum 1. A zero map falls
    /// back to uniform.
    pub fn grad_cam(
        &self,
        image: &Image,
        latents: Option<&LatentSet>,
        target_class: usize,
    ) -> Result<AttentionMap> {
        if target_class >= NUM_EXPRESSIONS {
            return Err(Error::InvalidClassIndex(target_class));
        }
        self.cnn.check_image(image)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(image.to_chw().into_dyn());
        let parts = self.forward_parts_on(&mut tape, &bind, x, latents)?;
        let logit = tape.narrow(parts.logits, 1, target_class, 1);
        let scalar = tape.sum(logit);
        let grads = tape.backward(scalar);

        let (rows, cols) = (self.grid_rows(), self.grid_cols());
        let uniform = || Ok(AttentionMap::uniform(rows, cols));
        let Some(gfeat) = grads.get(parts.features) else {
            return uniform();
        };
        let gfeat = gfeat
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("feature grad is 3-D");
        let feat = tape
            .value(parts.features)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("features are 3-D");
        let (c, h, w) = feat.dim();
        let mut cam = vec![0.0; h * w];
        for ch in 0..c {
            let alpha = gfeat.index_axis(Axis(0), ch).mean().unwrap();
            for y in 0..h {
                for xx in 0..w {
                    cam[y * w + xx] += alpha * feat[[ch, y, xx]];
                }
            }
        }
        for v in cam.iter_mut() {
            *v = v.max(0.0);
        }
        if cam.iter().sum::<f64>() <= 0.0 {
            return uniform();
        }
        AttentionMap::from_weights(cam, rows, cols)
    }
}

/// One prepared training example: the image the CNN sees and the (frozen)
/// latents it may fuse.
pub struct FerSample {
    pub image: Image,
    pub label: usize,
    pub latents: Option<LatentSet>,
}

#[derive(Debug, Clone)]
pub struct FerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for FerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

/// Cross-entropy training over prepared samples. Latent inputs stay frozen;
/// only the CNN branch and classifier learn.
pub fn train_fer(
    samples: &[FerSample],
    config: FerConfig,
    train: &FerTrainConfig,
    seed: u64,
) -> Result<(FerModel, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("train_fer needs samples"));
    }
    for s in samples {
        if s.label >= NUM_EXPRESSIONS {
            return Err(Error::InvalidClassIndex(s.label));
        }
    }
    let mut model = FerModel::new(config, seed);
    let mut adam = Adam::new(&model.params, train.learning_rate);
    let mut history = Vec::with_capacity(train.epochs);
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..train.epochs {
        use rand::seq::SliceRandom;
        let mut rng = stream_rng(seed, "fer-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let mut tape = Tape::new();
            let bind = tape.bind(&model.params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let s = &samples[si];
                let x = tape.leaf(s.image.to_chw().into_dyn());
                let parts = model.forward_parts_on(&mut tape, &bind, x, s.latents.as_ref())?;
                let probs = tape.softmax_rows(parts.logits);
                let logp = tape.log_clamped(probs, 1e-12);
                let target = tape.narrow(logp, 1, s.label, 1);
                let nll = tape.sum(target);
                losses.push(tape.scale(nll, -1.0));
            }
            let total = if losses.len() == 1 {
                losses[0]
            } else {
                let mut acc = losses[0];
                for l in &losses[1..] {
                    acc = tape.add(acc, *l);
                }
                acc
            };
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            epoch_loss += tape.scalar_value(loss);
            batches += 1.0;
            let grads = tape.backward(loss);
            adam.step(&mut model.params, &grads.for_binding(&bind));
        }
        history.push(epoch_loss / batches);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LatentSource;
    use crate::util::stream_rng;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_latents(n_rows: usize, n_cols: usize, dim: usize, seed: u64) -> LatentSet {
        let mut rng = stream_rng(seed, "fer-test", 0);
        LatentSet::new(
            Array2::from_shape_fn((n_rows * n_cols, dim), |_| rng.random_range(-1.0..1.0)),
            n_rows,
            n_cols,
            LatentSource::ReconstructionPass,
        )
        .unwrap()
    }

    fn toy_config(mode: LatentMode) -> FerConfig {
        FerConfig {
            cnn: CnnConfig {
                channels_in: 1,
                stage_channels: vec![4, 8],
                cbam_reduction: 4,
                grid_rows: 2,
                grid_cols: 2,
            },
            latent_mode: mode,
            latent_dim: 8,
            use_cnn_features: true,
        }
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = stream_rng(seed, "fer-test-img", 0);
        Image::new(Array3::from_shape_fn((8, 8, 1), |_| {
            rng.random_range(0.0..=1.0)
        }))
        .unwrap()
    }

    #[test]
    fn select_uniform_attention_takes_prefix() {
        let latents = toy_latents(2, 2, 8, 1);
        let att = AttentionMap::uniform(2, 2);
        let sel = select_latents(&latents, &att).unwrap();
        assert_eq!(sel.keys(), &[0, 1]);
    }

    #[test]
    fn select_ranked_attention() {
        let latents = toy_latents(2, 2, 8, 2);
        let att = AttentionMap::from_weights(vec![0.4, 0.3, 0.2, 0.1], 2, 2).unwrap();
        let sel = select_latents(&latents, &att).unwrap();
        assert_eq!(sel.keys(), &[0, 1]);
    }

    #[test]
    fn select_matches_sort_oracle_on_196() {
        let latents = toy_latents(14, 14, 4, 3);
        let mut rng = stream_rng(5, "fer-test-att", 0);
        let w: Vec<f64> = (0..196).map(|_| rng.random_range(0.0..1.0)).collect();
        let att = AttentionMap::from_weights(w.clone(), 14, 14).unwrap();
        let sel = select_latents(&latents, &att).unwrap();
        assert_eq!(sel.keys().len(), 98);

        let mut order: Vec<usize> = (0..196).collect();
        order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
        let mut expected = order[..98].to_vec();
        expected.sort_unstable();
        assert_eq!(sel.keys(), expected.as_slice());
    }

    #[test]
    fn select_rejects_misaligned() {
        let latents = toy_latents(2, 2, 8, 4);
        let att = AttentionMap::uniform(3, 3);
        assert!(select_latents(&latents, &att).is_err());
    }

    proptest! {
        /// The rule is rank-based, so any strictly monotone transform of the
        /// weights leaves the selection unchanged.
        #[test]
        fn prop_selection_monotone_invariant(seed in 0u64..500) {
            let latents = toy_latents(3, 3, 4, seed);
            let mut rng = stream_rng(seed, "fer-prop", 1);
            let w: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..1.0)).collect();
            let att = AttentionMap::from_weights(w.clone(), 3, 3).unwrap();
            let base = select_latents(&latents, &att).unwrap();
            // strictly monotone transforms
            let squared = AttentionMap::from_weights(w.iter().map(|v| v * v).collect(), 3, 3).unwrap();
            let expd = AttentionMap::from_weights(w.iter().map(|v| v.exp()).collect(), 3, 3).unwrap();
            let sel_sq = select_latents(&latents, &squared).unwrap();
            let sel_exp = select_latents(&latents, &expd).unwrap();
            prop_assert_eq!(sel_sq.keys(), base.keys());
            prop_assert_eq!(sel_exp.keys(), base.keys());
        }
    }

    #[test]
    fn softmax_output_sums_to_one_and_is_stable() {
        let model = FerModel::new(toy_config(LatentMode::Extracted), 7);
        let img = random_image(1);
        let latents = toy_latents(2, 2, 8, 8);
        let (d1, sel) = model.predict(&img, Some(&latents)).unwrap();
        let (d2, _) = model.predict(&img, Some(&latents)).unwrap();
        assert!((d1.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d1, d2);
        assert_eq!(d1.label(), d2.label());
        assert_eq!(sel.unwrap().keys().len(), 2);
    }

    /// Zeroing the latent branch changes logits iff its classifier weights
    /// are nonzero.
    #[test]
    fn latent_branch_wiring() {
        let model = FerModel::new(toy_config(LatentMode::Full), 9);
        let img = random_image(2);
        let latents = toy_latents(2, 2, 8, 9);
        let zero_latents = LatentSet::new(
            Array2::zeros((4, 8)),
            2,
            2,
            LatentSource::ReconstructionPass,
        )
        .unwrap();
        let (with, _) = model.predict(&img, Some(&latents)).unwrap();
        let (without, _) = model.predict(&img, Some(&zero_latents)).unwrap();
        assert_ne!(with, without, "nonzero latent weights must matter");

        // Zero the latent rows of the classifier weight: now it cannot.
        let mut zeroed = FerModel::new(toy_config(LatentMode::Full), 9);
        {
            let wid = zeroed.params.id_by_name("fer.classifier.w").unwrap();
            let w = zeroed.params.value_mut(wid);
            let cnn_c = 8; // stage_channels.last()
            for r in cnn_c..w.shape()[0] {
                for c in 0..w.shape()[1] {
                    w[[r, c]] = 0.0;
                }
            }
        }
        let (a, _) = zeroed.predict(&img, Some(&latents)).unwrap();
        let (b, _) = zeroed.predict(&img, Some(&zero_latents)).unwrap();
        assert_eq!(a, b, "zeroed latent weights must not matter");
    }

    #[test]
    fn fuse_empty_selection_uses_zero_vector() {
        let model = FerModel::new(toy_config(LatentMode::Extracted), 11);
        let img = random_image(3);
        let (features, _) = model.cnn_forward(&img).unwrap();
        let d_none = model.fuse_and_classify(&features, None).unwrap();
        // empty selection behaves like the zero latent vector
        let latents = LatentSet::new(
            Array2::zeros((4, 8)),
            2,
            2,
            LatentSource::ReconstructionPass,
        )
        .unwrap();
        let empty = LatentSelection::from_keys(&latents, vec![], "top50-rank");
        let d_empty = model.fuse_and_classify(&features, Some(&empty)).unwrap();
        assert_eq!(d_none, d_empty);
    }

    #[test]
    fn grad_cam_is_normalized_and_nonnegative() {
        let model = FerModel::new(toy_config(LatentMode::None), 13);
        let img = random_image(4);
        let cam = model.grad_cam(&img, None, 3).unwrap();
        assert!((cam.sum() - 1.0).abs() < 1e-9);
        assert!(cam.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn grad_cam_rejects_bad_class() {
        let model = FerModel::new(toy_config(LatentMode::None), 13);
        let img = random_image(5);
        assert!(matches!(
            model.grad_cam(&img, None, 9),
            Err(Error::InvalidClassIndex(9))
        ));
    }

    /// Center-tap convolutions keep spatial support exact, so a model whose
    /// input lights up one patch concentrates its activation map there.
    #[test]
    fn grad_cam_concentrates_on_single_active_region() {
        let mut model = FerModel::new(toy_config(LatentMode::None), 17);
        for stage in 0..2 {
            let wid = model
                .params
                .id_by_name(&format!("fer.cnn.stage{stage}.w"))
                .unwrap();
            let w = model.params.value_mut(wid);
            let (co, ci) = (w.shape()[0], w.shape()[1]);
            w.fill(0.0);
            for o in 0..co {
                for i in 0..ci {
                    w[[o, i, 1, 1]] = 1.0 / ci as f64;
                }
            }
            let bid = model
                .params
                .id_by_name(&format!("fer.cnn.stage{stage}.b"))
                .unwrap();
            model.params.value_mut(bid).fill(0.0);
        }
        // classifier reads every channel positively for class 0
        let wid = model.params.id_by_name("fer.classifier.w").unwrap();
        let w = model.params.value_mut(wid);
        w.fill(0.0);
        for r in 0..w.shape()[0] {
            w[[r, 0]] = 1.0;
        }
        let bid = model.params.id_by_name("fer.classifier.b").unwrap();
        model.params.value_mut(bid).fill(0.0);

        // light up only the bottom-right 4x4 patch (grid cell 3)
        let mut data = Array3::zeros((8, 8, 1));
        for y in 4..8 {
            for x in 4..8 {
                data[[y, x, 0]] = 1.0;
            }
        }
        let img = Image::new(data).unwrap();
        let cam = model.grad_cam(&img, None, 0).unwrap();
        assert!(
            cam.weight(3) > 0.99,
            "mass not concentrated: {:?}",
            cam.weights()
        );
    }

    /// A class whose logit is constant has zero gradient everywhere; the map
    /// falls back to uniform.
    #[test]
    fn grad_cam_zero_gradient_falls_back_to_uniform() {
        let mut model = FerModel::new(toy_config(LatentMode::None), 19);
        let wid = model.params.id_by_name("fer.classifier.w").unwrap();
        let w = model.params.value_mut(wid);
        for r in 0..w.shape()[0] {
            w[[r, 5]] = 0.0;
        }
        let img = random_image(6);
        let cam = model.grad_cam(&img, None, 5).unwrap();
        let expected = 1.0 / 4.0;
        for &w in cam.weights() {
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn training_reduces_loss_and_learns_trivial_split() {
        // Two visually distinct classes: bright top half vs bright bottom.
        let mut samples = Vec::new();
        for i in 0..24 {
            let label = i % 2;
            let mut data = Array3::from_elem((8, 8, 1), 0.1);
            let rows = if label == 0 { 0..4 } else { 4..8 };
            for y in rows {
                for x in 0..8 {
                    data[[y, x, 0]] = 0.9;
                }
            }
            // a little noise so samples are not byte-identical
            let mut rng = stream_rng(100 + i as u64, "fer-train-test", 0);
            data.mapv_inplace(|v| (v + rng.random_range(-0.05..0.05f64)).clamp(0.0, 1.0));
            samples.push(FerSample {
                image: Image::new(data).unwrap(),
                label,
                latents: None,
            });
        }
        let train = FerTrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 5e-3,
        };
        let (model, history) = train_fer(&samples, toy_config(LatentMode::None), &train, 23).unwrap();
        assert!(history.first().unwrap() > history.last().unwrap());
        let correct = samples
            .iter()
            .filter(|s| model.predict(&s.image, None).unwrap().0.label() == s.label)
            .count();
        assert!(correct >= 22, "only {correct}/24 correct");
    }
}
