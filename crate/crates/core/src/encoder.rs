//! The two feature extractors: a transformer patch embedder producing
//! per-patch latent vectors, and a convolutional branch with channel/spatial
//! attention producing a feature map plus a normalized attention map (CAM).

use ndarray::{Array1, Array2, Array3, IxDyn};


use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::{normal_tensor, Cbam, Conv2dLayer, LayerNorm, Linear, TransformerBlock};
use crate::nn::{Padding, ParamId, ParamSet, Tape, TapeBinding, Tensor, Var};
use crate::patchgrid::{OcclusionMask, PatchGrid};
use crate::util::stream_rng;

/// Where a latent set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    OccludedInput,
    ReconstructionPass,
}

/// Per-patch embedding vectors, keyed 0..N-1 in the owning grid's raster
/// order.
#[derive(Debug, Clone)]
pub struct LatentSet {
    vectors: Array2<f64>,
    rows: usize,
    cols: usize,
    source: LatentSource,
}

impl LatentSet {
    pub fn new(vectors: Array2<f64>, rows: usize, cols: usize, source: LatentSource) -> Result<Self> {
        if vectors.nrows() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} latents for a {rows}x{cols} grid",
                vectors.nrows()
            )));
        }
        Ok(Self {
            vectors,
            rows,
            cols,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn source(&self) -> LatentSource {
        self.source
    }

    pub fn with_source(mut self, source: LatentSource) -> Self {
        self.source = source;
        self
    }

    pub fn vector(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(index)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
}

/// Per-patch nonnegative weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl AttentionMap {
    /// Normalizes nonnegative weights to sum 1.
    pub fn from_weights(weights: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} attention weights for a {rows}x{cols} grid",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite("attention weights"));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::EmptyInput("attention weights sum to zero"));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / sum).collect(),
            rows,
            cols,
        })
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            weights: vec![1.0 / n as f64; n],
            rows,
            cols,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.weights[index]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Output of the convolutional branch, channel-first.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

#[derive(Debug, Clone)]
pub struct VitConfig {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Positional embedding can be disabled to expose the content-only path.
    pub use_pos: bool,
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Transformer patch-embedder weights, buildable into any [`ParamSet`].
/// Tokens are linear patch projections; masked positions are swapped for a
/// learned mask token before the positional embedding is added.
pub struct VitCore {
    pub config: VitConfig,
    embed: Linear,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
}

impl VitCore {
    pub fn build(ps: &mut ParamSet, prefix: &str, config: VitConfig, rng: &mut impl rand::Rng) -> Self {
        let embed = Linear::new(
            ps,
            &format!("{prefix}.embed"),
            config.patch_dim(),
            config.dim,
            true,
            rng,
        );
        let pos = ps.add(
            format!("{prefix}.pos"),
            normal_tensor(&[config.num_patches(), config.dim], 0.02, rng),
        );
        let mask_token = ps.add(
            format!("{prefix}.mask_token"),
            normal_tensor(&[config.dim], 0.02, rng),
        );
        let blocks = (0..config.blocks)
            .map(|i| {
                TransformerBlock::new(
                    ps,
                    &format!("{prefix}.block{i}"),
                    config.dim,
                    config.heads,
                    config.mlp_dim,
                    rng,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{prefix}.final_ln"), config.dim);
        Self {
            config,
            embed,
            pos,
            mask_token,
            blocks,
            final_ln,
        }
    }

    /// Row-major token matrix [N, patch_dim] for a grid.
    pub fn tokens_tensor(&self, grid: &PatchGrid) -> Tensor {
        let n = grid.num_patches();
        let pd = self.config.patch_dim();
        let mut m = Array2::zeros((n, pd));
        for i in 0..n {
            for (j, v) in grid.patch_flat(i).into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m.into_dyn()
    }

    /// Full forward on an existing tape. Returns per-token latents [N, dim].
    pub fn forward_on(
        &self,
        t: &mut Tape,
        bind: &TapeBinding,
        tokens: Var,
        mask: Option<&OcclusionMask>,
    ) -> Var {
        self.forward_depth_on(t, bind, tokens, mask, self.config.blocks)
    }

    /// Forward truncated after `depth` blocks. Depth 0 is the content-only
    /// patch embedding (no positional term), so a patch's latent depends on
    /// its pixels alone. The final layer norm applies only at full depth.
    pub fn forward_depth_on(
        &self,
        t: &mut Tape,
        bind: &TapeBinding,
        tokens: Var,
        mask: Option<&OcclusionMask>,
        depth: usize,
    ) -> Var {
        assert!(depth <= self.config.blocks, "depth beyond block count");
        let n = self.config.num_patches();
        let mut x = self.embed.forward(t, bind, tokens);
        if let Some(mask) = mask {
            // Swap masked rows for the learned mask token:
            // x := x * keep_rows + mask_col (x) mask_token
            let keep = Tensor::from_shape_fn(IxDyn(&[n, self.config.dim]), |ix| {
                if mask.get(ix[0]) {
                    0.0
                } else {
                    1.0
                }
            });
            let mask_col = Tensor::from_shape_fn(IxDyn(&[n, 1]), |ix| {
                if mask.get(ix[0]) {
                    1.0
                } else {
                    0.0
                }
            });
            let keep = t.leaf(keep);
            let mask_col = t.leaf(mask_col);
            let kept = t.mul(x, keep);
            let token_row = t.reshape(bind.var(self.mask_token), &[1, self.config.dim]);
            let filled = t.matmul(mask_col, token_row);
            x = t.add(kept, filled);
        }
        if self.config.use_pos && depth > 0 {
            x = t.add(x, bind.var(self.pos));
        }
        for block in self.blocks.iter().take(depth) {
            x = block.forward(t, bind, x);
        }
        if depth == self.config.blocks {
            self.final_ln.forward(t, bind, x)
        } else {
            x
        }
    }
}

/// Standalone patch embedder owning its parameters.
pub struct VitEncoder {
    pub core: VitCore,
    pub params: ParamSet,
}

impl VitEncoder {
    pub fn new(config: VitConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "vit-init", 0);
        let mut ps = ParamSet::new();
        let core = VitCore::build(&mut ps, "vit", config, &mut rng);
        Self { core, params: ps }
    }

    pub fn config(&self) -> &VitConfig {
        &self.core.config
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        let config = &self.core.config;
        if grid.grid_rows() != config.grid_rows
            || grid.grid_cols() != config.grid_cols
            || grid.patch_size() != config.patch_size
            || grid.channels() != config.channels
        {
            return Err(Error::GridShapeMismatch {
                expected_rows: config.grid_rows,
                expected_cols: config.grid_cols,
                rows: grid.grid_rows(),
                cols: grid.grid_cols(),
            });
        }
        Ok(())
    }

    /// One latent per patch; deterministic for fixed weights.
    pub fn embed_patches(&self, grid: &PatchGrid, mask: Option<&OcclusionMask>) -> Result<LatentSet> {
        self.check_grid(grid)?;
        if let Some(m) = mask {
            if !m.matches_grid(grid) {
                return Err(Error::GridShapeMismatch {
                    expected_rows: grid.grid_rows(),
                    expected_cols: grid.grid_cols(),
                    rows: m.rows(),
                    cols: m.cols(),
                });
            }
        }
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let tokens = tape.leaf(self.core.tokens_tensor(grid));
        let out = self.core.forward_on(&mut tape, &bind, tokens, mask);
        let vectors = tape
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("latents are 2-D");
        LatentSet::new(
            vectors,
            grid.grid_rows(),
            grid.grid_cols(),
            LatentSource::OccludedInput,
        )
    }
}

#[derive(Debug, Clone)]
pub struct CnnConfig {
    pub channels_in: usize,
    pub stage_channels: Vec<usize>,
    pub cbam_reduction: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Convolutional-branch weights, buildable into any [`ParamSet`]: stride-2
/// stages with replicate padding and a CBAM gate on the last stage. The
/// CBAM spatial gate (bias-free, trained through the classification loss)
/// normalized over grid cells is the CAM. The stage count must bring the
/// input resolution down to exactly the patch grid so CAM keys align 1:1
/// with latent keys.
pub struct CnnCore {
    pub config: CnnConfig,
    convs: Vec<Conv2dLayer>,
    cbam: Cbam,
}

impl CnnCore {
    pub fn build(ps: &mut ParamSet, prefix: &str, config: CnnConfig, rng: &mut impl rand::Rng) -> Self {
        let mut convs = Vec::new();
        let mut c_in = config.channels_in;
        for (i, &c_out) in config.stage_channels.iter().enumerate() {
            convs.push(Conv2dLayer::new(
                ps,
                &format!("{prefix}.stage{i}"),
                c_in,
                c_out,
                3,
                2,
                Padding::Replicate(1),
                true,
                rng,
            ));
            c_in = c_out;
        }
        let cbam = Cbam::new(ps, &format!("{prefix}.cbam"), c_in, config.cbam_reduction, rng);
        Self { config, convs, cbam }
    }

    pub fn out_channels(&self) -> usize {
        *self.config.stage_channels.last().unwrap()
    }

    pub fn input_height(&self) -> usize {
        self.config.grid_rows << self.convs.len()
    }

    pub fn input_width(&self) -> usize {
        self.config.grid_cols << self.convs.len()
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() != self.input_height()
            || image.width() != self.input_width()
            || image.channels() != self.config.channels_in
        {
            return Err(Error::ShapeMismatch(format!(
                "cnn expects {}x{}x{} input, got {}x{}x{}",
                self.input_height(),
                self.input_width(),
                self.config.channels_in,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Returns (refined feature map [C,gr,gc], raw spatial gate [1,gr,gc]).
    /// Input pixels are centered around mid-gray before the first stage.
    pub fn forward_on(&self, t: &mut Tape, bind: &TapeBinding, image_chw: Var) -> (Var, Var) {
        let mut x = t.add_scalar(image_chw, -0.5);
        for conv in &self.convs {
            x = conv.forward(t, bind, x);
            x = t.relu(x);
        }
        self.cbam.forward(t, bind, x)
    }

    /// Grid-cell weights of the gate, normalized to sum 1. The gate is
    /// strictly positive (sigmoid), so the normalization is always defined.
    pub fn attention_weights(&self, t: &Tape, gate: Var) -> Vec<f64> {
        let raw: Vec<f64> = t.value(gate).iter().copied().collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Standalone convolutional branch owning its parameters.
pub struct CnnBackbone {
    pub core: CnnCore,
    pub params: ParamSet,
}

impl CnnBackbone {
    pub fn new(config: CnnConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "cnn-init", 0);
        let mut ps = ParamSet::new();
        let core = CnnCore::build(&mut ps, "cnn", config, &mut rng);
        Self { core, params: ps }
    }

    /// Feature map plus normalized attention map for an image.
    pub fn cnn_forward(&self, image: &Image) -> Result<(FeatureMap, AttentionMap)> {
        self.core.check_image(image)?;
        let mut tape = Tape::new();
        let bind = tape.bind(&self.params);
        let x = tape.leaf(image.to_chw().into_dyn());
        let (features, gate) = self.core.forward_on(&mut tape, &bind, x);
        let weights = self.core.attention_weights(&tape, gate);
        let fm = FeatureMap::new(
            tape.value(features)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("features are 3-D"),
        );
        let att = AttentionMap::from_weights(
            weights,
            self.core.config.grid_rows,
            self.core.config.grid_cols,
        )?;
        Ok((fm, att))
    }
}

/// Pools a latent matrix [N, D] to a mean vector [D].
pub fn mean_pool_latents(latents: &LatentSet) -> Array1<f64> {
    latents
        .vectors()
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty latent set")
}
