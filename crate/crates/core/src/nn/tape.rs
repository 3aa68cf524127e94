//! The autodiff tape: node arena, forward ops, and the backward sweep.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem(IxDyn(&[1]), v)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter storage. Order is insertion order and is the layout used
/// by checkpoints and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter_mut())
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Spatial padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of the given width.
    Zero(usize),
    /// Edge-replicate padding of the given width. Keeps spatially constant
    /// inputs constant, which the attention head relies on.
    Replicate(usize),
}

impl Padding {
    fn width(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Replicate(p) => p,
        }
    }

    /// Maps a padded coordinate to a source coordinate, or None when the tap
    /// falls into zero padding.
    fn source(self, y: isize, len: usize) -> Option<usize> {
        match self {
            Padding::Zero(_) => {
                if y < 0 || y >= len as isize {
                    None
                } else {
                    Some(y as usize)
                }
            }
            Padding::Replicate(_) => Some(y.clamp(0, len as isize - 1) as usize),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// [m,k] x [k,n]
    Matmul(Var, Var),
    /// [m,n] + [n] broadcast over rows
    AddRow(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    /// softmax over the last axis of a 2-D tensor
    SoftmaxRows(Var),
    /// ln(max(x, clamp))
    LogClamped(Var, f64),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    /// [m,n] -> [n], mean over rows
    MeanRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose2(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
        /// im2col matrix saved for the backward pass
        cols: Array2<f64>,
    },
    UpsampleNearest2(Var),
    /// [C,H,W] -> [C]
    GlobalAvgPool(Var),
    /// [C,H,W] -> [C]; flat spatial argmax per channel
    GlobalMaxPool(Var, Vec<usize>),
    /// [C,H,W] -> [1,H,W]
    ChannelMean(Var),
    /// [C,H,W] -> [1,H,W]; argmax channel per pixel
    ChannelMax(Var, Vec<usize>),
    /// x[C,H,W] * gate[C]
    MulChannelGate(Var, Var),
    /// x[C,H,W] * gate[1,H,W]
    MulSpatialGate(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Marks where a [`ParamSet`] was inserted on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeBinding {
    offset: usize,
    len: usize,
}

impl TapeBinding {
    pub fn var(&self, p: ParamId) -> Var {
        assert!(p.0 < self.len, "param id outside bound set");
        Var(self.offset + p.0)
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }

    /// Gradients of one bound parameter set, aligned with its param indices.
    pub fn for_binding(&self, b: &TapeBinding) -> Vec<Option<Tensor>> {
        (0..b.len)
            .map(|i| self.g[b.offset + i].clone())
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Inserts every parameter of `set` as a leaf, in order.
    pub fn bind(&mut self, set: &ParamSet) -> TapeBinding {
        let offset = self.nodes.len();
        for (_, v) in set.iter() {
            self.push(v.clone(), Op::Leaf);
        }
        TapeBinding {
            offset,
            len: set.len(),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Var {
        self.leaf(scalar(v))
    }

    /// Copies the value of `v` into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar, got shape {:?}", t.shape());
        t[[0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = same_shape_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = same_shape_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = same_shape_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_clamped(&mut self, a: Var, clamp: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(clamp).ln());
        self.push(v, Op::LogClamped(a, clamp))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = as2(self.value(a));
        let rv = as1(self.value(row));
        assert_eq!(av.ncols(), rv.len(), "add_row width");
        let v = (&av + &rv).into_dyn();
        self.push(v, Op::AddRow(a, row))
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        self.push(v, Op::Transpose2(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(self.value(x));
        let g = as1(self.value(gamma));
        let b = as1(self.value(beta));
        assert_eq!(xv.ncols(), g.len());
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * (*v - mean) * inv + b[j];
            }
        }
        self.push(out.into_dyn(), Op::LayerNormRows { x, gamma, beta, eps })
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).mean().unwrap());
        self.push(v, Op::Mean(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = as2(self.value(a));
        let v = av.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(v, Op::MeanRows(a))
    }

    // ---- shape ----

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(
            v,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::Narrow { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(v, Op::Reshape(x))
    }

    // ---- convolution and pooling ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Var {
        let xv = as3(self.value(x));
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 4, "conv weight must be [Cout,Cin,kh,kw]");
        let (c_out, c_in, kh, kw) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(xv.dim().0, c_in, "conv input channels");
        let (h, wdt) = (xv.dim().1, xv.dim().2);
        let p = pad.width();
        assert!(h + 2 * p >= kh && wdt + 2 * p >= kw, "conv kernel fits");
        let ho = (h + 2 * p - kh) / stride + 1;
        let wo = (wdt + 2 * p - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad, ho, wo);
        let w2 = self
            .value(w)
            .clone()
            .into_shape_with_order(IxDyn(&[c_out, c_in * kh * kw]))
            .unwrap();
        let mut out2 = as2(&w2).dot(&cols);
        if let Some(bv) = b {
            let bias = as1(self.value(bv));
            assert_eq!(bias.len(), c_out);
            for (i, mut row) in out2.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v + bias[i]);
            }
        }
        let out = out2
            .into_shape_with_order((c_out, ho, wo))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::zeros((c, h * 2, w * 2));
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ch, y, xx]];
                    out[[ch, 2 * y, 2 * xx]] = v;
                    out[[ch, 2 * y + 1, 2 * xx]] = v;
                    out[[ch, 2 * y, 2 * xx + 1]] = v;
                    out[[ch, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array1::zeros(c);
        for ch in 0..c {
            out[ch] = xv.index_axis(Axis(0), ch).mean().unwrap();
        }
        let _ = (h, w);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array1::zeros(c);
        let mut arg = vec![0usize; c];
        for ch in 0..c {
            let mut best = f64::NEG_INFINITY;
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ch, y, xx]];
                    if v > best {
                        best = v;
                        arg[ch] = y * w + xx;
                    }
                }
            }
            out[ch] = best;
        }
        self.push(out.into_dyn(), Op::GlobalMaxPool(x, arg))
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::zeros((1, h, w));
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ch in 0..c {
                    s += xv[[ch, y, xx]];
                }
                out[[0, y, xx]] = s / c as f64;
            }
        }
        self.push(out.into_dyn(), Op::ChannelMean(x))
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::zeros((1, h, w));
        let mut arg = vec![0usize; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut best = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = xv[[ch, y, xx]];
                    if v > best {
                        best = v;
                        arg[y * w + xx] = ch;
                    }
                }
                out[[0, y, xx]] = best;
            }
        }
        self.push(out.into_dyn(), Op::ChannelMax(x, arg))
    }

    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = as3(self.value(x));
        let g = as1(self.value(gate));
        let (c, h, w) = xv.dim();
        assert_eq!(g.len(), c);
        let mut out = xv.to_owned();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ch, y, xx]] *= g[ch];
                }
            }
        }
        self.push(out.into_dyn(), Op::MulChannelGate(x, gate))
    }

    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Var {
        let xv = as3(self.value(x));
        let gv = as3(self.value(gate));
        let (c, h, w) = xv.dim();
        assert_eq!(gv.dim(), (1, h, w));
        let mut out = xv.to_owned();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ch, y, xx]] *= gv[[0, y, xx]];
                }
            }
        }
        self.push(out.into_dyn(), Op::MulSpatialGate(x, gate))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward must start from a scalar"
        );
        let mut g: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gout.clone());
                    accumulate(&mut g, *b, gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut g, *a, gout.clone());
                    accumulate(&mut g, *b, gout.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = same_shape_zip(&gout, self.value(*b), |g, v| g * v);
                    let gb = same_shape_zip(&gout, self.value(*a), |g, v| g * v);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::Scale(a, k) => accumulate(&mut g, *a, gout.mapv(|v| v * k)),
                Op::AddScalar(a) => accumulate(&mut g, *a, gout),
                Op::Matmul(a, b) => {
                    let go = as2(&gout);
                    let av = as2(self.value(*a));
                    let bv = as2(self.value(*b));
                    accumulate(&mut g, *a, go.dot(&bv.t()).into_dyn());
                    accumulate(&mut g, *b, av.t().dot(&go).into_dyn());
                }
                Op::AddRow(a, row) => {
                    let go = as2(&gout);
                    accumulate(&mut g, *a, gout.clone());
                    accumulate(&mut g, *row, go.sum_axis(Axis(0)).into_dyn());
                }
                Op::Relu(a) => {
                    let ga =
                        same_shape_zip(&gout, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut g, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = same_shape_zip(&gout, self.value(*a), |g, x| g * gelu_grad(x));
                    accumulate(&mut g, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = same_shape_zip(&gout, y, |g, s| g * s * (1.0 - s));
                    accumulate(&mut g, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = as2(&self.nodes[i].value);
                    let go = as2(&gout);
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| go[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (go[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut g, *a, ga.into_dyn());
                }
                Op::LogClamped(a, clamp) => {
                    let ga = same_shape_zip(&gout, self.value(*a), |g, x| {
                        if x > *clamp {
                            g / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut g, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = same_shape_zip(&gout, self.value(*a), |g, x| g * sign(x));
                    accumulate(&mut g, *a, ga);
                }
                Op::Sum(a) => {
                    let k = gout[[0]];
                    accumulate(&mut g, *a, self.value(*a).mapv(|_| k));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let k = gout[[0]] / n;
                    accumulate(&mut g, *a, self.value(*a).mapv(|_| k));
                }
                Op::MeanRows(a) => {
                    let av = as2(self.value(*a));
                    let go = as1(&gout);
                    let m = av.nrows() as f64;
                    let mut ga = Array2::zeros(av.raw_dim());
                    for r in 0..av.nrows() {
                        for c in 0..av.ncols() {
                            ga[[r, c]] = go[c] / m;
                        }
                    }
                    accumulate(&mut g, *a, ga.into_dyn());
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = as2(self.value(*x));
                    let gm = as1(self.value(*gamma));
                    let go = as2(&gout);
                    let n = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggamma = Array1::zeros(gm.len());
                    let mut gbeta = Array1::zeros(gm.len());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dy_g: Vec<f64> =
                            (0..gm.len()).map(|c| go[[r, c]] * gm[c]).collect();
                        let m1: f64 = dy_g.iter().sum::<f64>() / n;
                        let m2: f64 = dy_g
                            .iter()
                            .zip(xhat.iter())
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n;
                        for c in 0..gm.len() {
                            gx[[r, c]] = inv * (dy_g[c] - m1 - xhat[c] * m2);
                            ggamma[c] += go[[r, c]] * xhat[c];
                            gbeta[c] += go[[r, c]];
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                    accumulate(&mut g, *gamma, ggamma.into_dyn());
                    accumulate(&mut g, *beta, gbeta.into_dyn());
                }
                Op::Concat { axis, parts } => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[*axis];
                        let gp = gout
                            .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                            .to_owned();
                        accumulate(&mut g, *p, gp);
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).raw_dim());
                    let len = gout.shape()[*axis];
                    gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                        .assign(&gout);
                    accumulate(&mut g, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = gout
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .unwrap();
                    accumulate(&mut g, *x, gx);
                }
                Op::Transpose2(x) => {
                    accumulate(&mut g, *x, as2(&gout).t().to_owned().into_dyn());
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let (c_out, ho, wo) = {
                        let o = as3(&self.nodes[i].value);
                        o.dim()
                    };
                    let go2 = gout
                        .clone()
                        .into_shape_with_order(IxDyn(&[c_out, ho * wo]))
                        .unwrap();
                    let go2 = as2(&go2);
                    // weight gradient
                    let gw2 = go2.dot(&cols.t());
                    let gw = gw2
                        .into_shape_with_order(self.value(*w).raw_dim())
                        .unwrap();
                    accumulate(&mut g, *w, gw);
                    // bias gradient
                    if let Some(bv) = b {
                        accumulate(&mut g, *bv, go2.sum_axis(Axis(1)).into_dyn());
                    }
                    // input gradient via col2im
                    let wv = self.value(*w);
                    let (c_in, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                    let w2 = wv
                        .clone()
                        .into_shape_with_order(IxDyn(&[c_out, c_in * kh * kw]))
                        .unwrap();
                    let gcols = as2(&w2).t().dot(&go2);
                    let xv = as3(self.value(*x));
                    let gx = col2im(&gcols, xv.dim(), kh, kw, *stride, *pad, ho, wo);
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::UpsampleNearest2(x) => {
                    let xv = as3(self.value(*x));
                    let (c, h, w) = xv.dim();
                    let go = as3(&gout);
                    let mut gx = Array3::zeros((c, h, w));
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[ch, y, xx]] = go[[ch, 2 * y, 2 * xx]]
                                    + go[[ch, 2 * y + 1, 2 * xx]]
                                    + go[[ch, 2 * y, 2 * xx + 1]]
                                    + go[[ch, 2 * y + 1, 2 * xx + 1]];
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::GlobalAvgPool(x) => {
                    let xv = as3(self.value(*x));
                    let (c, h, w) = xv.dim();
                    let go = as1(&gout);
                    let k = 1.0 / (h * w) as f64;
                    let mut gx = Array3::zeros((c, h, w));
                    for ch in 0..c {
                        gx.index_axis_mut(Axis(0), ch).fill(go[ch] * k);
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::GlobalMaxPool(x, arg) => {
                    let xv = as3(self.value(*x));
                    let (c, _h, w) = xv.dim();
                    let go = as1(&gout);
                    let mut gx = Array3::zeros(xv.dim());
                    for ch in 0..c {
                        gx[[ch, arg[ch] / w, arg[ch] % w]] = go[ch];
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::ChannelMean(x) => {
                    let xv = as3(self.value(*x));
                    let (c, h, w) = xv.dim();
                    let go = as3(&gout);
                    let mut gx = Array3::zeros((c, h, w));
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[ch, y, xx]] = go[[0, y, xx]] / c as f64;
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::ChannelMax(x, arg) => {
                    let xv = as3(self.value(*x));
                    let (_c, h, w) = xv.dim();
                    let go = as3(&gout);
                    let mut gx = Array3::zeros(xv.dim());
                    for y in 0..h {
                        for xx in 0..w {
                            gx[[arg[y * w + xx], y, xx]] = go[[0, y, xx]];
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                }
                Op::MulChannelGate(x, gate) => {
                    let xv = as3(self.value(*x));
                    let gv = as1(self.value(*gate));
                    let go = as3(&gout);
                    let (c, h, w) = xv.dim();
                    let mut gx = Array3::zeros((c, h, w));
                    let mut gg = Array1::zeros(c);
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[ch, y, xx]] = go[[ch, y, xx]] * gv[ch];
                                gg[ch] += go[[ch, y, xx]] * xv[[ch, y, xx]];
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                    accumulate(&mut g, *gate, gg.into_dyn());
                }
                Op::MulSpatialGate(x, gate) => {
                    let xv = as3(self.value(*x));
                    let gv = as3(self.value(*gate));
                    let go = as3(&gout);
                    let (c, h, w) = xv.dim();
                    let mut gx = Array3::zeros((c, h, w));
                    let mut gg = Array3::zeros((1, h, w));
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[[ch, y, xx]] = go[[ch, y, xx]] * gv[[0, y, xx]];
                                gg[[0, y, xx]] += go[[ch, y, xx]] * xv[[ch, y, xx]];
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx.into_dyn());
                    accumulate(&mut g, *gate, gg.into_dyn());
                }
            }
        }
        Grads { g }
    }
}

fn accumulate(g: &mut [Option<Tensor>], v: Var, grad: Tensor) {
    match &mut g[v.0] {
        Some(existing) => *existing += &grad,
        slot => *slot = Some(grad),
    }
}

fn same_shape_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let mut out = a.clone();
    out.zip_mut_with(b, |x, &y| *x = f(*x, y));
    out
}

fn as1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view().into_dimensionality().expect("expected 1-D")
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality().expect("expected 2-D")
}

fn as3(t: &Tensor) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality().expect("expected 3-D")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let p = pad.width() as isize;
    let mut cols = Array2::zeros((c_in * kh * kw, ho * wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let col = oy * wo + ox;
            for c in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = (oy * stride + ky) as isize - p;
                        let sx = (ox * stride + kx) as isize - p;
                        let v = match (pad.source(sy, h), pad.source(sx, w)) {
                            (Some(yy), Some(xx)) => x[[c, yy, xx]],
                            _ => 0.0,
                        };
                        cols[[c * kh * kw + ky * kw + kx, col]] = v;
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    gcols: &Array2<f64>,
    xdim: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Padding,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let (c_in, h, w) = xdim;
    let p = pad.width() as isize;
    let mut gx = Array3::zeros((c_in, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let col = oy * wo + ox;
            for c in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let sy = (oy * stride + ky) as isize - p;
                        let sx = (ox * stride + kx) as isize - p;
                        if let (Some(yy), Some(xx)) = (pad.source(sy, h), pad.source(sx, w)) {
                            gx[[c, yy, xx]] += gcols[[c * kh * kw + ky * kw + kx, col]];
                        }
                    }
                }
            }
        }
    }
    gx
}
