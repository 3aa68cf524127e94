//! Reusable layers: linear, conv, layer norm, transformer block, CBAM.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Padding, ParamId, ParamSet, Tape, TapeBinding, Tensor, Var};

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), he_tensor(&[in_dim, out_dim], in_dim, rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[out_dim]))));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// x: [n, in_dim] -> [n, out_dim]
    pub fn forward(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let y = t.matmul(x, bind.var(self.w));
        match self.b {
            Some(b) => t.add_row(y, bind.var(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[dim])));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[dim])));
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        t.layer_norm_rows(x, bind.var(self.gamma), bind.var(self.beta), 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            he_tensor(&[c_out, c_in, k, k], c_in * k * k, rng),
        );
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[c_out]))));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        t.conv2d(
            x,
            bind.var(self.w),
            self.b.map(|b| bind.var(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Pre-norm transformer block: LN -> multi-head attention -> residual,
/// LN -> GELU MLP -> residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

impl TransformerBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, true, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, mlp_dim, true, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), mlp_dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// x: [n_tokens, dim] -> [n_tokens, dim]
    pub fn forward(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> Var {
        let dh = self.dim / self.heads;
        let h = self.ln1.forward(t, bind, x);
        let q = self.wq.forward(t, bind, h);
        let k = self.wk.forward(t, bind, h);
        let v = self.wv.forward(t, bind, h);
        let mut head_outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qi = t.narrow(q, 1, i * dh, dh);
            let ki = t.narrow(k, 1, i * dh, dh);
            let vi = t.narrow(v, 1, i * dh, dh);
            let kt = t.transpose2(ki);
            let scores = t.matmul(qi, kt);
            let scaled = t.scale(scores, 1.0 / (dh as f64).sqrt());
            let att = t.softmax_rows(scaled);
            head_outs.push(t.matmul(att, vi));
        }
        let merged = t.concat(1, &head_outs);
        let projected = self.wo.forward(t, bind, merged);
        let x = t.add(x, projected);

        let h2 = self.ln2.forward(t, bind, x);
        let m = self.fc1.forward(t, bind, h2);
        let m = t.gelu(m);
        let m = self.fc2.forward(t, bind, m);
        t.add(x, m)
    }
}

/// Channel-then-spatial attention gate. The shared channel MLP sees both the
/// average- and max-pooled descriptors; the spatial gate convolves the
/// channel mean/max maps. All heads are bias-free.
#[derive(Debug, Clone)]
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2dLayer,
    channels: usize,
}

impl Cbam {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), channels, hidden, false, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, channels, false, rng),
            spatial: Conv2dLayer::new(
                ps,
                &format!("{name}.spatial"),
                2,
                1,
                3,
                1,
                Padding::Replicate(1),
                false,
                rng,
            ),
            channels,
        }
    }

    fn channel_mlp(&self, t: &mut Tape, bind: &TapeBinding, pooled: Var) -> Var {
        let row = t.reshape(pooled, &[1, self.channels]);
        let h = self.fc1.forward(t, bind, row);
        let h = t.relu(h);
        self.fc2.forward(t, bind, h)
    }

    /// x: [C,H,W] -> (gated [C,H,W], spatial gate [1,H,W]).
    ///
    /// The spatial gate doubles as the activation map: it is inside the
    /// classification path, so training sharpens it toward informative
    /// cells.
    pub fn forward(&self, t: &mut Tape, bind: &TapeBinding, x: Var) -> (Var, Var) {
        let avg = t.global_avg_pool(x);
        let mx = t.global_max_pool(x);
        let a = self.channel_mlp(t, bind, avg);
        let m = self.channel_mlp(t, bind, mx);
        let sum = t.add(a, m);
        let gate = t.sigmoid(sum);
        let gate = t.reshape(gate, &[self.channels]);
        let x = t.mul_channel_gate(x, gate);

        let cm = t.channel_mean(x);
        let cx = t.channel_max(x);
        let stacked = t.concat(0, &[cm, cx]);
        let s = self.spatial.forward(t, bind, stacked);
        let s = t.sigmoid(s);
        (t.mul_spatial_gate(x, s), s)
    }
}
