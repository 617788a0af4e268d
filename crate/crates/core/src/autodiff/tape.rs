use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Ids increase in recording order, so the node list is always in
/// topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities are clamped into this interval before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Per-channel statistics of a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values averaged per channel.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Act {
        x: Var,
        kind: ActivationKind,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Columns {
        x: Var,
        rows: usize,
        cols: usize,
        start: usize,
        width: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: ChannelLayout,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    External {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ChannelLayout {
    batch: usize,
    channels: usize,
    spatial: usize,
}

impl ChannelLayout {
    fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "channel op needs [N, C, ...] input, got {shape:?}"
            )));
        }
        Ok(Self {
            batch: shape[0],
            channels: shape[1],
            spatial: shape[2..].iter().product(),
        })
    }

    fn channel_of(&self, flat: usize) -> usize {
        (flat / self.spatial) % self.channels
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one `cin x h x w` image into a `(cin*k*k) x (h*w)` matrix with
    /// zero padding of `k / 2` on every side.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = k / 2;
        let plane = self.plane();
        for ci in 0..self.cin {
            let src = &image[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let x_lo = pad.saturating_sub(kj);
                    let x_hi = (w + pad).saturating_sub(kj).min(w);
                    for y in 0..h {
                        let out = &mut dst[y * w..(y + 1) * w];
                        let sy = y + ki;
                        if sy < pad || sy - pad >= h || x_lo >= x_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let sy = sy - pad;
                        out[..x_lo].fill(0.0);
                        out[x_hi..].fill(0.0);
                        let sx_lo = x_lo + kj - pad;
                        let sx_hi = x_hi + kj - pad;
                        out[x_lo..x_hi].copy_from_slice(&src[sy * w + sx_lo..sy * w + sx_hi]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` back into `image`.
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (h, w, k) = (self.h, self.w, self.k);
        let pad = k / 2;
        let plane = self.plane();
        for ci in 0..self.cin {
            let dst = &mut image[ci * plane..(ci + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let x_lo = pad.saturating_sub(kj);
                    let x_hi = (w + pad).saturating_sub(kj).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y + ki;
                        if sy < pad || sy - pad >= h {
                            continue;
                        }
                        let sy = sy - pad;
                        let base = sy * w + kj;
                        for x in x_lo..x_hi {
                            dst[base + x - pad] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Build a fresh tape (or [`Tape::clear`] an old one) for every forward
/// pass; [`Tape::backward`] walks the nodes in reverse id order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node so the tape can record a new pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Elementwise `a (op) b`. `b` may also be a single element, which is
    /// broadcast over `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sa != sb;
        if broadcast && self.value(b).len() != 1 {
            return Err(Error::shape(format!(
                "elementwise {kind:?} on {sa:?} and {sb:?}"
            )));
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = if broadcast {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            },
            rg,
        ))
    }

    /// `factor * x` for a constant factor.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|v| v * factor).collect();
        let t = Tensor::from_parts(value.shape().to_vec(), data);
        let rg = self.needs(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// Matrix product of `a: [m, k]` with `b: [k, n]` or `b: [k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Matmul { a, b, m, k, n },
            rg,
        ))
    }

    /// Dense layer `x · wᵀ + b` with `x: [rows, in]` (or `[in]`),
    /// `w: [out, in]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || sx.len() > 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::shape(format!("linear x {sx:?} with w {sw:?}")));
        }
        let (out, inp) = (sw[0], sw[1]);
        let rows = if sx.len() == 2 { sx[0] } else { 1 };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape(format!(
                    "linear bias {:?}, expected [{out}]",
                    self.shape(b)
                )));
            }
        }
        let mut y = vec![0.0; rows * out];
        gemm(rows, inp, out, self.data(x), false, self.data(w), true, &mut y, 0.0);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_exact_mut(out) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let shape = if sx.len() == 2 { vec![rows, out] } else { vec![out] };
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        ))
    }

    /// Same-size 2-D cross-correlation with zero padding `(k - 1) / 2`.
    ///
    /// `input` is `[C_in, H, W]` or `[N, C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k]` with odd `k`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, cin, h, w) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape(format!("conv2d input {si:?}"))),
        };
        let [cout, kc, kh, kw] = sk.as_slice() else {
            return Err(Error::shape(format!("conv2d kernel {sk:?}")));
        };
        let (cout, k) = (*cout, *kh);
        if *kc != cin {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kc}"
            )));
        }
        if kh != kw || k % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must be odd and square, got {sk:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            k,
        };
        let plane = geom.plane();
        let mut cols = vec![0.0; geom.col_rows() * plane];
        let mut out = vec![0.0; batch * cout * plane];
        let x = self.data(input);
        let kd = self.data(kernel);
        for n in 0..batch {
            geom.im2col(&x[n * cin * plane..(n + 1) * cin * plane], &mut cols);
            let dst = &mut out[n * cout * plane..(n + 1) * cout * plane];
            gemm(cout, geom.col_rows(), plane, kd, false, &cols, false, dst, 0.0);
            if let Some(b) = bias {
                for (co, chan) in dst.chunks_exact_mut(plane).enumerate() {
                    let bv = self.data(b)[co];
                    chan.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let shape = if si.len() == 3 {
            vec![cout, h, w]
        } else {
            vec![batch, cout, h, w]
        };
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: ActivationKind) -> Var {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::from_parts(value.shape().to_vec(), data);
        let rg = self.needs(x);
        self.push(t, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, ActivationKind::Tanh)
    }

    /// Mean squared difference, as a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(format!(
                "mse {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let (p, t) = (self.data(pred), self.data(target));
        let sum: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = sum / p.len() as f64;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(value), Op::Mse { pred, target }, rg))
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with `pred` clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`. Clamped entries
    /// pass no gradient. `target` is treated as data.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(format!(
                "bce {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let (p, t) = (self.data(pred), self.data(target));
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = sum / p.len() as f64;
        let rg = self.needs(pred);
        Ok(self.push(Tensor::scalar(value), Op::Bce { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Flat range `[start, start + len)` of `x` as a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let d = self.data(x);
        if len == 0 || start + len > d.len() {
            return Err(Error::shape(format!(
                "slice {start}..{} of {} values",
                start + len,
                d.len()
            )));
        }
        let t = Tensor::from_parts(vec![len], d[start..start + len].to_vec());
        let rg = self.needs(x);
        Ok(self.push(t, Op::Slice { x, start }, rg))
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn columns(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return Err(Error::shape(format!(
                "columns {start}..{} of {s:?}",
                start + width
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + width]);
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::Columns {
                x,
                rows,
                cols,
                start,
                width,
            },
            rg,
        ))
    }

    /// Train-mode batch normalization over every axis but the channel axis
    /// (axis 1) of `x: [N, C, ...]`, followed by the per-channel affine map
    /// `gamma * x̂ + beta`. Requires `N >= 2`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let layout = ChannelLayout::of(self.shape(x))?;
        if layout.batch < 2 {
            return Err(Error::Contract(format!(
                "train-mode batch norm needs a batch of at least 2, got {}",
                layout.batch
            )));
        }
        self.check_channel_params(gamma, beta, layout.channels)?;
        let c = layout.channels;
        let count = layout.batch * layout.spatial;
        let d = self.data(x);
        let mut mean = vec![0.0; c];
        for (i, v) in d.iter().enumerate() {
            mean[layout.channel_of(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for (i, v) in d.iter().enumerate() {
            let ch = layout.channel_of(i);
            var[ch] += (v - mean[ch]) * (v - mean[ch]);
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(d.len());
        let mut y = Vec::with_capacity(d.len());
        for (i, v) in d.iter().enumerate() {
            let ch = layout.channel_of(i);
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            y.push(g[ch] * xh + b[ch]);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = BatchStats { mean, var, count };
        let out = self.push(
            Tensor::from_parts(shape, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, stats))
    }

    /// Per-channel `gamma * (x - mean) / sqrt(var + eps) + beta` with fixed
    /// statistics (eval-mode batch normalization).
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let layout = ChannelLayout::of(self.shape(x))?;
        self.check_channel_params(gamma, beta, layout.channels)?;
        if mean.len() != layout.channels || var.len() != layout.channels {
            return Err(Error::shape("running statistics length mismatch"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let y = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = layout.channel_of(i);
                g[ch] * (v - mean[ch]) * inv_std[ch] + b[ch]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                layout,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    /// Records a scalar function of `x` whose value and gradient were
    /// computed elsewhere. Backward propagates `upstream * grad` into `x`.
    pub fn external(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "external gradient has {} entries for {} values",
                grad.len(),
                self.value(x).len()
            )));
        }
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // interior adjoints are dropped once consumed to bound memory
            if matches!(node.op, Op::Leaf) || id == loss.0 {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                broadcast,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                let bval = |i: usize| if broadcast { db[0] } else { db[i] };
                if let Some(ga) = self.slot(grads, a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)
                        }
                        BinaryKind::Mul => {
                            for (i, (x, gi)) in ga.iter_mut().zip(g).enumerate() {
                                *x += gi * bval(i);
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let contrib = |i: usize| match kind {
                        BinaryKind::Add => g[i],
                        BinaryKind::Sub => -g[i],
                        BinaryKind::Mul => g[i] * da[i],
                    };
                    if broadcast {
                        gb[0] += (0..g.len()).map(contrib).sum::<f64>();
                    } else {
                        for (i, x) in gb.iter_mut().enumerate() {
                            *x += contrib(i);
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(v, gi)| *v += factor * gi);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (da, db) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, g, false, db, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, m, n, da, true, g, false, gb, 1.0);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out: width,
            } => {
                let (dx, dw) = (self.data(x), self.data(w));
                if let Some(gx) = self.slot(grads, x) {
                    gemm(rows, width, inp, g, false, dw, false, gx, 1.0);
                }
                if let Some(gw) = self.slot(grads, w) {
                    gemm(width, rows, inp, g, true, dx, false, gw, 1.0);
                }
                if let Some(gb) = b.and_then(|b| self.slot(grads, b)) {
                    for row in g.chunks_exact(width) {
                        gb.iter_mut().zip(row).for_each(|(v, gi)| *v += gi);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => self.conv_backward(input, kernel, bias, geom, g, grads),
            Op::Act { x, kind } => {
                let (dx, y) = (self.data(x), out.data());
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..gx.len() {
                        let local = match kind {
                            ActivationKind::Relu => {
                                if dx[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ActivationKind::Sigmoid => y[i] * (1.0 - y[i]),
                            ActivationKind::Tanh => 1.0 - y[i] * y[i],
                        };
                        gx[i] += g[i] * local;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.data(pred), self.data(target));
                let scale = 2.0 * g[0] / p.len() as f64;
                if let Some(gp) = self.slot(grads, pred) {
                    for i in 0..gp.len() {
                        gp[i] += scale * (p[i] - t[i]);
                    }
                }
                if let Some(gt) = self.slot(grads, target) {
                    for i in 0..gt.len() {
                        gt[i] -= scale * (p[i] - t[i]);
                    }
                }
            }
            Op::Bce { pred, target } => {
                let (p, t) = (self.data(pred), self.data(target));
                let scale = g[0] / p.len() as f64;
                if let Some(gp) = self.slot(grads, pred) {
                    for i in 0..gp.len() {
                        if p[i] < BCE_CLAMP || p[i] > 1.0 - BCE_CLAMP {
                            continue;
                        }
                        gp[i] += scale * (-t[i] / p[i] + (1.0 - t[i]) / (1.0 - p[i]));
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
                }
            }
            Op::Slice { x, start } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(v, gi)| *v += gi);
                }
            }
            Op::Columns {
                x,
                rows,
                cols,
                start,
                width,
            } => {
                if let Some(gx) = self.slot(grads, x) {
                    for r in 0..rows {
                        let dst = &mut gx[r * cols + start..r * cols + start + width];
                        let src = &g[r * width..(r + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(v, gi)| *v += gi);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                ref xhat,
                ref inv_std,
            } => {
                let c = layout.channels;
                let count = (layout.batch * layout.spatial) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..g.len() {
                    let ch = layout.channel_of(i);
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                }
                if let Some(gg) = self.slot(grads, gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(v, s)| *v += s);
                }
                if let Some(gb) = self.slot(grads, beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(v, s)| *v += s);
                }
                let gam = self.data(gamma);
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..gx.len() {
                        let ch = layout.channel_of(i);
                        gx[i] += gam[ch] * inv_std[ch] / count
                            * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                    }
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                layout,
                ref mean,
                ref inv_std,
            } => {
                let dx = self.data(x);
                let gam = self.data(gamma);
                if let Some(gg) = self.slot(grads, gamma) {
                    for i in 0..g.len() {
                        let ch = layout.channel_of(i);
                        gg[ch] += g[i] * (dx[i] - mean[ch]) * inv_std[ch];
                    }
                }
                if let Some(gb) = self.slot(grads, beta) {
                    for i in 0..g.len() {
                        gb[layout.channel_of(i)] += g[i];
                    }
                }
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..gx.len() {
                        let ch = layout.channel_of(i);
                        gx[i] += g[i] * gam[ch] * inv_std[ch];
                    }
                }
            }
            Op::External { x, ref grad } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(grad).for_each(|(v, d)| *v += g[0] * d);
                }
            }
        }
    }

    fn conv_backward(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let plane = geom.plane();
        let rows = geom.col_rows();
        let in_len = geom.cin * plane;
        let out_len = geom.cout * plane;
        let x = self.data(input);
        let kd = self.data(kernel);
        if let Some(gb) = bias.and_then(|b| self.slot(grads, b)) {
            for n in 0..geom.batch {
                for (co, chan) in g[n * out_len..(n + 1) * out_len]
                    .chunks_exact(plane)
                    .enumerate()
                {
                    gb[co] += chan.iter().sum::<f64>();
                }
            }
        }
        let mut cols = vec![0.0; rows * plane];
        if let Some(gk) = self.slot(grads, kernel) {
            for n in 0..geom.batch {
                geom.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
                let gn = &g[n * out_len..(n + 1) * out_len];
                gemm(geom.cout, plane, rows, gn, false, &cols, true, gk, 1.0);
            }
        }
        if let Some(gx) = self.slot(grads, input) {
            for n in 0..geom.batch {
                let gn = &g[n * out_len..(n + 1) * out_len];
                gemm(rows, geom.cout, plane, kd, true, gn, false, &mut cols, 0.0);
                geom.col2im(&cols, &mut gx[n * in_len..(n + 1) * in_len]);
            }
        }
    }
}

/// Result of [`Tape::backward`]: adjoints of the leaves (and of the loss).
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, zeros when nothing reached it. Only leaves and the
    /// loss keep their adjoints.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.shape(v)),
        }
    }

    /// Flat adjoint of `v`, `None` when nothing reached it.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_ref().map(|t| t.data())
    }

    /// Flat adjoint of `v` moved out of the map; zeros when nothing reached it.
    pub fn take(&mut self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.grads[v.0].take() {
            Some(g) => g.into_data(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}
