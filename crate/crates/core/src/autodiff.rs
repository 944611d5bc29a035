//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operator call evaluates eagerly, appends one node to the [`Tape`]
//! and returns a [`Var`] handle. Nodes are stored in execution order, which
//! is a topological order of the computation graph, so [`Tape::backward`]
//! is a single reverse sweep that visits each node once.
//!
//! Image-like tensors use the `[batch, channels, height, width]` layout.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        /// im2col buffers of every sample, kept when the kernel needs a gradient.
        cols: Vec<f64>,
    },
    UpNearest(Var),
    UpBilinear(Var),
    AvgPool(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxChannels(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`; panics if `v` did not require a gradient.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for {v:?}"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected rank-4 NCHW, got {s:?}"))),
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-axis source taps of a 2x bilinear upsample (half-pixel centers,
/// edge-clamped): output `o` reads `w0 * in[i0] + w1 * in[i1]`.
fn bilinear_taps(len_in: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len_in)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                (i, i.saturating_sub(1), 0.75, 0.25)
            } else {
                (i, (i + 1).min(len_in - 1), 0.75, 0.25)
            }
        })
        .collect()
}

fn im2col(src: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, kx, pad);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = (y + ky).wrapping_sub(pad);
                    if sy >= h {
                        out.fill(0.0);
                        continue;
                    }
                    let s = sy * w + x0 + kx - pad;
                    out[..x0].fill(0.0);
                    out[x0..x1].copy_from_slice(&plane[s..s + x1 - x0]);
                    out[x1..].fill(0.0);
                }
            }
        }
    }
}

/// Output columns `[x0, x1)` whose tap `kx` lands inside a row of width `w`.
fn valid_span(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let x0 = pad.saturating_sub(kx).min(w);
    let x1 = (w + pad).saturating_sub(kx).min(w).max(x0);
    (x0, x1)
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, kx, pad);
                for y in 0..h {
                    let sy = (y + ky).wrapping_sub(pad);
                    if sy >= h {
                        continue;
                    }
                    let d = sy * w + x0 + kx - pad;
                    let target = &mut plane[d..d + x1 - x0];
                    for (t, v) in target.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *t += v;
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map_unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    fn zip_binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.map_unary(
            x,
            "leaky_relu",
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    /// Stride-1 convolution with zero padding that preserves resolution.
    /// `w` is `[out, in, k, k]` with odd `k`; `b` is `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, ci, h, wd) = nchw(self.value(x), "conv2d")?;
        let (co, wci, k, k2) = nchw(self.value(w), "conv2d")?;
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} vs input {:?}", self.value(w).shape(), self.value(x).shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = vec![0.0; n * co * hw];
        let keep = k > 1 && self.nodes[w.0].requires_grad;
        let mut cols = match (k, keep) {
            (1, _) => Vec::new(),
            (_, true) => vec![0.0; n * ckk * hw],
            _ => vec![0.0; ckk * hw],
        };
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            for s in 0..n {
                let src = &xd[s * ci * hw..(s + 1) * ci * hw];
                let dst = &mut out[s * co * hw..(s + 1) * co * hw];
                let colref: &[f64] = if k == 1 {
                    src
                } else {
                    let c = if keep { &mut cols[s * ckk * hw..(s + 1) * ckk * hw] } else { &mut cols[..] };
                    im2col(src, ci, h, wd, k, c);
                    c
                };
                gemm(co, ckk, hw, 1.0, wdata, false, colref, false, 0.0, dst);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for s in 0..n {
                    for (o, &bv) in bd.iter().enumerate() {
                        let base = (s * co + o) * hw;
                        out[base..base + hw].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, co, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        if !keep {
            cols = Vec::new();
        }
        self.push("conv2d", t, Op::Conv2d { x, w, b, k, cols }, &inputs)
    }

    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "upsample_nearest")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push("upsample_nearest", t, Op::UpNearest(x), &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "upsample_bilinear")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    d[y * w2 + xx] = wy0 * (wx0 * s[y0 * w + x0] + wx1 * s[y0 * w + x1])
                        + wy1 * (wx0 * s[y1 * w + x0] + wx1 * s[y1 * w + x1]);
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push("upsample_bilinear", t, Op::UpBilinear(x), &[x])
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "avg_pool")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool", format!("odd extent {h}x{w}")));
        }
        let src = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    d[y * w2 + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![n, c, h2, w2], out)?;
        self.push("avg_pool", t, Op::AvgPool(x), &[x])
    }

    /// `y = x W^T + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (n, fin, fout) = match (xs, ws, bs) {
            ([n, i], [o, i2], [o2]) if i == i2 && o == o2 => (*n, *i, *o),
            _ => return Err(Error::shape("affine", format!("x {xs:?}, w {ws:?}, b {bs:?}"))),
        };
        let mut out = vec![0.0; n * fout];
        for s in 0..n {
            out[s * fout..(s + 1) * fout].copy_from_slice(self.value(b).data());
        }
        gemm(n, fin, fout, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let t = Tensor::new(vec![n, fout], out)?;
        self.push("affine", t, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and (biased) variance for running averages.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = nchw(self.value(x), "batchnorm")?;
        self.check_channel_param("batchnorm", gamma, c)?;
        self.check_channel_param("batchnorm", beta, c)?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &src[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let plane = &src[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in r {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            "batchnorm",
            t,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalization with frozen statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "batchnorm")?;
        self.check_channel_param("batchnorm", gamma, c)?;
        self.check_channel_param("batchnorm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batchnorm", "running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let hw = h * w;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                    out[i] = g[ch] * (src[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            "batchnorm",
            t,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn check_channel_param(&self, op: &'static str, p: Var, c: usize) -> Result<()> {
        if self.value(p).shape() == [c] {
            Ok(())
        } else {
            Err(Error::shape(op, format!("per-channel parameter {:?} for {c} channels", self.value(p).shape())))
        }
    }

    /// `y[n,c,:,:] = x[n,c,:,:] * scale[n,c] + shift[n,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "channel_affine")?;
        for p in [scale, shift] {
            if self.value(p).shape() != [n, c] {
                return Err(Error::shape("channel_affine", format!("{:?} for [{n}, {c}]", self.value(p).shape())));
            }
        }
        let hw = h * w;
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![0.0; src.len()];
        for p in 0..n * c {
            for i in p * hw..(p + 1) * hw {
                out[i] = src[i] * sc[p] + sh[p];
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("channel_affine", t, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Inverted dropout: drops with probability `p` and scales survivors by
    /// `1 / (1 - p)`. Pass `None` for evaluation mode, where it is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut SeededRng>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p}")));
        }
        let Some(rng) = rng else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "softmax")?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for s in 0..n {
            let base = s * c * hw;
            for i in 0..hw {
                let mx = (0..c).map(|ch| src[base + ch * hw + i]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * hw + i] - mx).exp();
                    out[base + ch * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + i] /= z;
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], out)?;
        self.push("softmax", t, Op::SoftmaxChannels(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of squared elements.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push("squared_norm", Tensor::scalar(s), Op::SquaredNorm(x), &[x])
    }

    /// Pixel-wise cross-entropy against class indices, averaged over the
    /// pixels with positive weight. `weights` of `None` means all ones;
    /// zero-weight pixels are excluded from the loss and its normalization.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(logits), "cross_entropy")?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(Error::shape("cross_entropy", format!("{} targets for {} pixels", targets.len(), n * hw)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("class index {bad} >= {c}")));
        }
        let weights: Vec<f64> = match weights {
            Some(ws) if ws.len() == targets.len() => ws.to_vec(),
            Some(ws) => return Err(Error::shape("cross_entropy", format!("{} weights", ws.len()))),
            None => vec![1.0; targets.len()],
        };
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        let mut total_weight = 0.0;
        for s in 0..n {
            let base = s * c * hw;
            for i in 0..hw {
                let mx = (0..c).map(|ch| src[base + ch * hw + i]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * hw + i] - mx).exp();
                    probs[base + ch * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    probs[base + ch * hw + i] /= z;
                }
                let wt = weights[s * hw + i];
                if wt > 0.0 {
                    let t = targets[s * hw + i];
                    loss += wt * (z.ln() + mx - src[base + t * hw + i]);
                    total_weight += wt;
                }
            }
        }
        let value = if total_weight > 0.0 { loss / total_weight } else { 0.0 };
        self.push(
            "cross_entropy",
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                total_weight,
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = nchw(self.value(first), "concat")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (n2, c2, h2, w2) = nchw(self.value(v), "concat")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", self.value(v).shape(), self.value(first).shape())));
            }
            channels.push(c2);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (&v, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let t = Tensor::new(vec![n, ctot, h, w], out)?;
        self.push("concat", t, Op::ConcatChannels(xs.to_vec()), xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "slice_channels")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let t = Tensor::new(vec![n, len, h, w], out)?;
        self.push("slice_channels", t, Op::SliceChannels { x, start }, &[x])
    }

    /// Reverse sweep from a scalar loss. Every leaf created with
    /// `requires_grad` receives a gradient, zero if it did not participate.
    /// The tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let len = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; len];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(grads, v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(grads, *b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(grads, *x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = out.data();
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Conv2d { x, w, b, k, cols } => self.conv2d_backward(*x, *w, *b, *k, cols, g, grads),
            Op::UpNearest(x) => {
                let (n, c, h, w) = nchw(self.value(*x), "upsample_nearest").unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                acc(grads, *x, &mut |d| {
                    for p in 0..n * c {
                        let go = &g[p * h2 * w2..(p + 1) * h2 * w2];
                        let di = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                di[(y / 2) * w + xx / 2] += go[y * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::UpBilinear(x) => {
                let (n, c, h, w) = nchw(self.value(*x), "upsample_bilinear").unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                let ty = bilinear_taps(h);
                let tx = bilinear_taps(w);
                acc(grads, *x, &mut |d| {
                    for p in 0..n * c {
                        let go = &g[p * h2 * w2..(p + 1) * h2 * w2];
                        let di = &mut d[p * h * w..(p + 1) * h * w];
                        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let gv = go[y * w2 + xx];
                                di[y0 * w + x0] += gv * wy0 * wx0;
                                di[y0 * w + x1] += gv * wy0 * wx1;
                                di[y1 * w + x0] += gv * wy1 * wx0;
                                di[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x) => {
                let (n, c, h, w) = nchw(self.value(*x), "avg_pool").unwrap();
                let (h2, w2) = (h / 2, w / 2);
                acc(grads, *x, &mut |d| {
                    for p in 0..n * c {
                        let go = &g[p * h2 * w2..(p + 1) * h2 * w2];
                        let di = &mut d[p * h * w..(p + 1) * h * w];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let v = 0.25 * go[y * w2 + xx];
                                let i = 2 * y * w + 2 * xx;
                                di[i] += v;
                                di[i + 1] += v;
                                di[i + w] += v;
                                di[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.value(*w).shape()[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                acc(grads, *x, &mut |d| gemm(n, fout, fin, 1.0, g, false, wv, false, 1.0, d));
                acc(grads, *w, &mut |d| gemm(fout, n, fin, 1.0, g, true, xv, false, 1.0, d));
                acc(grads, *b, &mut |d| {
                    for s in 0..n {
                        for o in 0..fout {
                            d[o] += g[s * fout + o];
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(self.value(*x), "batchnorm").unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(grads, *gamma, &mut |d| d.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v));
                acc(grads, *beta, &mut |d| d.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v));
                acc(grads, *x, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch] / m;
                            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                d[i] += k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = nchw(self.value(*x), "batchnorm").unwrap();
                let hw = h * w;
                let xv = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                acc(grads, *gamma, &mut |d| d.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v));
                acc(grads, *beta, &mut |d| d.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v));
                acc(grads, *x, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                d[i] += k * g[i];
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, h, w) = nchw(self.value(*x), "channel_affine").unwrap();
                let hw = h * w;
                let xv = self.value(*x).data();
                let sc = self.value(*scale).data();
                acc(grads, *x, &mut |d| {
                    for p in 0..n * c {
                        for i in p * hw..(p + 1) * hw {
                            d[i] += g[i] * sc[p];
                        }
                    }
                });
                acc(grads, *scale, &mut |d| {
                    for p in 0..n * c {
                        d[p] += (p * hw..(p + 1) * hw).map(|i| g[i] * xv[i]).sum::<f64>();
                    }
                });
                acc(grads, *shift, &mut |d| {
                    for p in 0..n * c {
                        d[p] += g[p * hw..(p + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Dropout { x, mask } => acc(grads, *x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = nchw(out, "softmax").unwrap();
                let hw = h * w;
                let y = out.data();
                acc(grads, *x, &mut |d| {
                    for s in 0..n {
                        let base = s * c * hw;
                        for i in 0..hw {
                            let dot: f64 = (0..c).map(|ch| g[base + ch * hw + i] * y[base + ch * hw + i]).sum();
                            for ch in 0..c {
                                let j = base + ch * hw + i;
                                d[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let k = g[0] / self.value(*x).numel() as f64;
                acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d += k));
            }
            Op::SquaredNorm(x) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[0] * xv[i];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if *total_weight <= 0.0 {
                    acc(grads, *logits, &mut |_| {});
                    return;
                }
                let (n, c, h, w) = nchw(self.value(*logits), "cross_entropy").unwrap();
                let hw = h * w;
                let k = g[0] / total_weight;
                acc(grads, *logits, &mut |d| {
                    for s in 0..n {
                        let base = s * c * hw;
                        for i in 0..hw {
                            let wt = weights[s * hw + i];
                            if wt <= 0.0 {
                                continue;
                            }
                            let t = targets[s * hw + i];
                            for ch in 0..c {
                                let j = base + ch * hw + i;
                                let onehot = if ch == t { 1.0 } else { 0.0 };
                                d[j] += k * wt * (probs[j] - onehot);
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(grads, *x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::ConcatChannels(xs) => {
                let (n, ctot, h, w) = nchw(out, "concat").unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    acc(grads, v, &mut |d| {
                        for s in 0..n {
                            let src = &g[(s * ctot + offset) * hw..(s * ctot + offset + c) * hw];
                            d[s * c * hw..(s + 1) * c * hw]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = nchw(self.value(*x), "slice_channels").unwrap();
                let len = out.shape()[1];
                let hw = h * w;
                acc(grads, *x, &mut |d| {
                    for s in 0..n {
                        let dst = &mut d[(s * c + start) * hw..(s * c + start + len) * hw];
                        dst.iter_mut()
                            .zip(&g[s * len * hw..(s + 1) * len * hw])
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        saved: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, ci, h, wd) = nchw(self.value(x), "conv2d").unwrap();
        let co = self.value(w).shape()[0];
        let hw = h * wd;
        let ckk = ci * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        if let Some(b) = b {
            if self.nodes[b.0].requires_grad {
                let d = grads[b.0].get_or_insert_with(|| vec![0.0; co]);
                for s in 0..n {
                    for (o, dv) in d.iter_mut().enumerate() {
                        let base = (s * co + o) * hw;
                        *dv += g[base..base + hw].iter().sum::<f64>();
                    }
                }
            }
        }
        if !need_x && !need_w {
            return;
        }
        let mut dcols = vec![0.0; if need_x { ckk * hw } else { 0 }];
        let mut dw = if need_w { grads[w.0].take().unwrap_or_else(|| vec![0.0; co * ckk]) } else { Vec::new() };
        let mut dx = if need_x { grads[x.0].take().unwrap_or_else(|| vec![0.0; n * ci * hw]) } else { Vec::new() };
        for s in 0..n {
            let gs = &g[s * co * hw..(s + 1) * co * hw];
            let src = &xv[s * ci * hw..(s + 1) * ci * hw];
            if need_w {
                let colref = if k == 1 { src } else { &saved[s * ckk * hw..(s + 1) * ckk * hw] };
                gemm(co, hw, ckk, 1.0, gs, false, colref, true, 1.0, &mut dw);
            }
            if need_x {
                let dst = &mut dx[s * ci * hw..(s + 1) * ci * hw];
                if k == 1 {
                    gemm(ckk, co, hw, 1.0, wv, true, gs, false, 1.0, dst);
                } else {
                    gemm(ckk, co, hw, 1.0, wv, true, gs, false, 0.0, &mut dcols);
                    col2im_add(&dcols, ci, h, wd, k, dst);
                }
            }
        }
        if need_w {
            grads[w.0] = Some(dw);
        }
        if need_x {
            grads[x.0] = Some(dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = tape.squared_norm(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.variable(Tensor::from_vec(vec![5.0]));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::new(vec![1, 2, 5, 5], data.clone()).unwrap());
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // out 0 <- in 0 center
        k[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let w = tape.constant(Tensor::new(vec![2, 2, 3, 3], k).unwrap());
        let y = tape.conv2d(x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.5, None).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }
}
