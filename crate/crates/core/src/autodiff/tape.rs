use super::conv::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to row norms by [`Tape::l2_normalize_rows`].
pub const L2_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Depthwise { input: Var, kernel: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    MeanPool2d { x: Var, window: usize },
    GlobalMeanPool { x: Var },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Transpose { x: Var },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var },
    Log { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    AngularMargin { cos: Var, labels: Vec<usize>, factors: Vec<f64> },
    NllMasked { logp: Var, labels: Vec<usize>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of a computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so the recording order is already
/// topological.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::shape(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced consistent shape")
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

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copies `x` into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "conv2d")?;
        let [f, kc, kh, kw] = dims4(self.value(kernel), "conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {c} channels, kernel {:?} expects {kc}",
                    self.value(input).shape(),
                    self.value(kernel).shape()
                ),
            ));
        }
        let geom = ConvGeom::new(n, c, h, w, f, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} padding {padding} does not fit {h}x{w}"),
            )
        })?;
        let out = conv::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = tensor(vec![n, f, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    /// Per-channel convolution with a `[C, 1, kh, kw]` kernel.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "depthwise_conv2d")?;
        let [kc, one, kh, kw] = dims4(self.value(kernel), "depthwise_conv2d")?;
        if kc != c || one != 1 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!(
                    "input {:?} needs kernel [{c}, 1, kh, kw], got {:?}",
                    self.value(input).shape(),
                    self.value(kernel).shape()
                ),
            ));
        }
        let geom = ConvGeom::new(n, c, h, w, c, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape("depthwise_conv2d", format!("kernel {kh}x{kw} does not fit {h}x{w}"))
        })?;
        let out = conv::depthwise_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = tensor(vec![n, c, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Depthwise { input, kernel, geom }, &[input, kernel]))
    }

    /// Depthwise `k×k` convolution followed by a `1×1` pointwise convolution.
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        depthwise_kernel: Var,
        pointwise_kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let pk = self.value(pointwise_kernel).shape().to_vec();
        if pk.len() != 4 || pk[2] != 1 || pk[3] != 1 {
            return Err(Error::shape(
                "depthwise_separable_conv",
                format!("pointwise kernel must be [F, C, 1, 1], got {pk:?}"),
            ));
        }
        let mid = self.depthwise_conv2d(input, depthwise_kernel, stride, padding)?;
        self.conv2d(mid, pointwise_kernel, 1, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(a), "matmul")?;
        let (d2, k) = dims2(self.value(b), "matmul")?;
        if d != d2 {
            return Err(Error::shape("matmul", format!("[{n}, {d}] x [{d2}, {k}]")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            for p in 0..d {
                let x = av[i * d + p];
                for (o, &w) in row.iter_mut().zip(&bv[p * k..(p + 1) * k]) {
                    *o += x * w;
                }
            }
        }
        Ok(self.push(tensor(vec![n, k], out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Affine map `input · weight + bias`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(input, weight)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(x), "add_row_bias")?;
        if self.value(bias).shape() != [k] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for rows of width {k}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &bj) in out[i * k..(i + 1) * k].iter_mut().zip(b) {
                *o += bj;
            }
        }
        Ok(self.push(tensor(vec![n, k], out), Op::AddRowBias { x, bias }, &[x, bias]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "add_channel_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        let plane = h * w;
        for (idx, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b[idx % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(tensor(vec![n, c, h, w], out), Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(tensor(self.value(a).shape().to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        tensor(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.map(x, |e| e * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |e| e.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::ln);
        self.push(value, Op::Log { x }, &[x])
    }

    /// Non-overlapping `window × window` average pooling.
    pub fn mean_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "mean_pool2d")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "mean_pool2d",
                format!("window {window} does not tile {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let inv = 1.0 / (window * window) as f64;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(plane * oh + y / window) * ow + xx / window] += src[(plane * h + y) * w + xx] * inv;
                }
            }
        }
        Ok(self.push(tensor(vec![n, c, oh, ow], out), Op::MeanPool2d { x, window }, &[x]))
    }

    /// `[N, C, H, W] → [N, C]` spatial average.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "global_mean_pool")?;
        let plane = h * w;
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(tensor(vec![n, c], out), Op::GlobalMeanPool { x }, &[x]))
    }

    /// Divides each row by `max(‖row‖, L2_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2(self.value(x), "l2_normalize_rows")?;
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(tensor(vec![n, d], out), Op::L2NormalizeRows { x, norms }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(tensor(vec![c, r], out), Op::Transpose { x }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(x), "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.push(tensor(vec![n, k], out), Op::SoftmaxRows { x }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(x), "log_softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(tensor(vec![n, k], out), Op::LogSoftmaxRows { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let inner = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.rank() == 0 || v.shape()[1..] != inner[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs trailing {inner:?}", v.shape()),
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(inner);
        Ok(self.push(tensor(shape, data), Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape().first().copied().unwrap_or(0);
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let stride: usize = v.shape()[1..].iter().product();
        let data = v.data()[start * stride..end * stride].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        Ok(self.push(tensor(shape, data), Op::SliceRows { x, start }, &[x]))
    }

    /// Replaces each row's target cosine `c` with `cos(acos(c) + margin)`.
    ///
    /// The target cosine is clamped to `[-1 + clamp_eps, 1 - clamp_eps]` before
    /// `acos`; clamped entries pass no gradient.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], margin: f64, clamp_eps: f64) -> Result<Var> {
        let (n, k) = dims2(self.value(cos), "angular_margin")?;
        if labels.len() != n {
            return Err(Error::shape("angular_margin", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("angular_margin", format!("label {bad} out of range for {k} classes")));
        }
        let mut out = self.value(cos).data().to_vec();
        let mut factors = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            let c = out[i * k + y];
            let lo = -1.0 + clamp_eps;
            let hi = 1.0 - clamp_eps;
            let clamped = c.clamp(lo, hi);
            let theta = clamped.acos();
            out[i * k + y] = (theta + margin).cos();
            // d cos(θ + m) / dc = sin(θ + m) / sin θ
            let factor = if c < lo || c > hi { 0.0 } else { (theta + margin).sin() / theta.sin() };
            factors.push(factor);
        }
        let op = Op::AngularMargin {
            cos,
            labels: labels.to_vec(),
            factors,
        };
        Ok(self.push(tensor(vec![n, k], out), op, &[cos]))
    }

    /// `−(1/|mask|) Σ_{i ∈ mask} logp[i, labels[i]]`, or zero for an empty mask.
    pub fn nll_masked(&mut self, logp: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, k) = dims2(self.value(logp), "nll_masked")?;
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "nll_masked",
                format!("{} labels / {} mask entries for {n} rows", labels.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        let lp = self.value(logp).data();
        let mut total = 0.0;
        for i in (0..n).filter(|&i| mask[i]) {
            if labels[i] >= k {
                return Err(Error::shape("nll_masked", format!("label {} out of range for {k} classes", labels[i])));
            }
            total -= lp[i * k + labels[i]];
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::NllMasked {
            logp,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(value), op, &[logp]))
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every
    /// differentiable node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[id].grad.as_ref() else { continue };
            let contributions = self.local_grads(id, grad.data());
            for (parent, g) in contributions {
                self.accumulate(parent, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => node.grad = Some(tensor(node.value.shape().to_vec(), g)),
        }
    }

    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = conv::conv2d_backward(geom, g, val(*input), val(*kernel));
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::Depthwise { input, kernel, geom } => {
                let (gi, gk) = conv::depthwise_backward(geom, g, val(*input), val(*kernel));
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::MatMul { a, b } => {
                let (n, d) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let k = self.value(*b).shape()[1];
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; d * k];
                for i in 0..n {
                    let gr = &g[i * k..(i + 1) * k];
                    for p in 0..d {
                        let brow = &bv[p * k..(p + 1) * k];
                        ga[i * d + p] = gr.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let x = av[i * d + p];
                        for (o, &gv) in gb[p * k..(p + 1) * k].iter_mut().zip(gr) {
                            *o += x * gv;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRowBias { x, bias } => {
                let k = self.value(*bias).len();
                let mut gb = vec![0.0; k];
                for row in g.chunks(k) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::AddChannelBias { x, bias } => {
                let s = self.value(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (idx, chunk) in g.chunks(plane).enumerate() {
                    gb[idx % c] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Log { x } => vec![(*x, g.iter().zip(val(*x)).map(|(gv, xv)| gv / xv).collect())],
            Op::MeanPool2d { x, window } => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f64;
                let mut gx = vec![0.0; self.value(*x).len()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(plane * h + y) * w + xx] = g[(plane * oh + y / window) * ow + xx / window] * inv;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::GlobalMeanPool { x } => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                vec![(*x, gx)]
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = self.value(*x).shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]);
                    let out = &mut gx[i * d..(i + 1) * d];
                    if norm > L2_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / norm;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Transpose { x } => {
                let s = self.value(*x).shape();
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::SoftmaxRows { x } => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((out, gr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmaxRows { x } => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for ((out, gr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        out[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean { x } => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = self.value(*p).len();
                        let piece = g[offset..offset + len].to_vec();
                        offset += len;
                        (*p, piece)
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let stride: usize = src.shape()[1..].iter().product();
                let mut gx = vec![0.0; src.len()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::AngularMargin { cos, labels, factors } => {
                let k = node.value.shape()[1];
                let mut gx = g.to_vec();
                for (i, (&y, &f)) in labels.iter().zip(factors).enumerate() {
                    gx[i * k + y] *= f;
                }
                vec![(*cos, gx)]
            }
            Op::NllMasked {
                logp,
                labels,
                mask,
                count,
            } => {
                let k = self.value(*logp).shape()[1];
                let mut gx = vec![0.0; self.value(*logp).len()];
                if *count > 0 {
                    let scale = -g[0] / *count as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        if mask[i] {
                            gx[i * k + y] = scale;
                        }
                    }
                }
                vec![(*logp, gx)]
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
