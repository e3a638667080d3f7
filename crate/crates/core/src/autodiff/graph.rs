use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const COSINE_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cin: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Relu(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    UpsampleNearest2x(Var),
    DownsampleNearest2x(Var),
    ResizeBilinear(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1 {
        pred: Var,
        target: Var,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    IndexSelect {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape is
/// topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn dims4(t: &Tensor<impl Float>, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected 4-D tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor<impl Float>, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::shape(op, format!("expected 2-D tensor, got {s:?}"))),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`, optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = dims4(self.value(x), "conv2d")?;
        let [cout, wcin, kh, kw] = dims4(self.value(w), "conv2d")?;
        if cin != wcin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} stride {stride} does not fit {h}x{wd} padded by {pad}")));
        }
        self.check_bias(b, cout, "conv2d")?;
        let geom = ConvGeom {
            channels: cin,
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![T::zero(); batch * cout * geom.col_cols()];
        kernels::conv_forward(self.value(x).data(), batch, self.value(w).data(), cout, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.col_cols());
        }
        let value = Tensor::new([batch, cout, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cout }, rg))
    }

    /// Transposed convolution of `x: [B,Cin,H,W]` with `w: [Cin,Cout,kh,kw]`; the
    /// adjoint of [`Graph::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, cin, h, wd] = dims4(self.value(x), "conv_transpose2d")?;
        let [wcin, cout, kh, kw] = dims4(self.value(w), "conv_transpose2d")?;
        if cin != wcin {
            return Err(Error::shape("conv_transpose2d", format!("input has {cin} channels, kernel expects {wcin}")));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if stride == 0 || full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("conv_transpose2d", "output would be empty"));
        }
        self.check_bias(b, cout, "conv_transpose2d")?;
        let geom = ConvGeom {
            channels: cout,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let mut out = vec![T::zero(); batch * geom.in_len()];
        kernels::conv_backward_input(self.value(x).data(), batch, self.value(w).data(), cin, &geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.in_h * geom.in_w);
        }
        let value = Tensor::new([batch, cout, geom.in_h, geom.in_w], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, cin }, rg))
    }

    fn check_bias(&self, b: Option<Var>, n: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(op, format!("bias shape {:?}, expected [{n}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// `x·Wᵀ + b` for `x: [B,D]`, `w: [O,D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, d] = dims2(self.value(x), "linear")?;
        let [o, wd] = dims2(self.value(w), "linear")?;
        if d != wd {
            return Err(Error::shape("linear", format!("input width {d}, weight expects {wd}")));
        }
        self.check_bias(b, o, "linear")?;
        let mut out = vec![T::zero(); batch * o];
        T::gemm(batch, d, o, T::one(), self.value(x).data(), (d, 1), self.value(w).data(), (1, d), T::zero(), &mut out, (o, 1));
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::new([batch, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = dims2(self.value(a), "matmul")?;
        let [k2, n] = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), T::zero(), &mut out, (n, 1));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    /// Elementwise `min(max(x, lo), hi)`. The gradient passes only where `lo < x < hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Clamp { x, lo, hi }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.numel()).unwrap());
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of several equally shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_all over no terms"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let data = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "upsample_nearest2x")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c, oh, ow], out)?, Op::UpsampleNearest2x(x), rg))
    }

    /// Nearest-neighbour ×0.5 downsampling (keeps even rows and columns).
    pub fn downsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "downsample_nearest2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("downsample_nearest2x", format!("spatial dims {h}x{w} must be even")));
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = plane[2 * y * w + 2 * xx];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c, oh, ow], out)?, Op::DownsampleNearest2x(x), rg))
    }

    /// Half-pixel-centred bilinear resize of `[B,C,H,W]` to `[B,C,out_h,out_w]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = dims4(self.value(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "empty output"));
        }
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        kernels::bilinear_forward(self.value(x).data(), b * c, (h, w), (out_h, out_w), &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new([b, c, out_h, out_w], out)?, Op::ResizeBilinear(x), rg))
    }

    /// Mean softmax cross-entropy. Logits are `[B,C]` or `[B,C,H,W]` (class axis 1);
    /// labels hold one class per sample or per pixel, in row-major order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (batch, classes, spatial) = match *t.shape() {
            [b, c] => (b, c, 1),
            [b, c, h, w] => (b, c, h * w),
            ref s => return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?}"))),
        };
        if classes < 2 {
            return Err(Error::shape("softmax_cross_entropy", "need at least two classes"));
        }
        if labels.len() != batch * spatial {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {} positions", labels.len(), batch * spatial),
            ));
        }
        if let Some((pos, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                context: format!("cross-entropy position {pos}"),
            });
        }
        let data = t.data();
        let mut probs = vec![T::zero(); data.len()];
        let mut total = 0.0f64;
        for b in 0..batch {
            for s in 0..spatial {
                let at = |c: usize| b * classes * spatial + c * spatial + s;
                let max = (0..classes).map(|c| data[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..classes {
                    let e = (data[at(c)] - max).exp();
                    probs[at(c)] = e;
                    z += e;
                }
                for c in 0..classes {
                    probs[at(c)] = probs[at(c)] / z;
                }
                let label = labels[b * spatial + s];
                total += (z.ln() - (data[at(label)] - max)).as_f64();
            }
        }
        let loss = T::from_f64_lossy(total / (batch * spatial) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute error between equally shaped `pred` and `target`.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.value(pred).sub(self.value(target))?;
        let n = T::from_usize(diff.numel()).unwrap();
        let value = Tensor::scalar(diff.data().iter().map(|v| v.abs()).sum::<T>() / n);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(value, Op::L1 { pred, target }, rg))
    }

    /// `⟨a,b⟩ / (‖a‖‖b‖ + 1e-12)` over the flattened tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let dot = ta.dot(tb);
        let na = ta.dot(ta).sqrt();
        let nb = tb.dot(tb).sqrt();
        let value = Tensor::scalar(dot / (na * nb + T::from_f64_lossy(COSINE_EPS)));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Cosine { a, b }, rg))
    }

    /// Concatenates `[B,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
        let [b, _, h, w] = dims4(self.value(first), "concat_channels")?;
        let mut channels = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = dims4(self.value(p), "concat_channels")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(first)),
                ));
            }
            channels += pc;
        }
        let mut out = Vec::with_capacity(b * channels * h * w);
        for s in 0..b {
            for &p in parts {
                let t = self.value(p);
                out.extend_from_slice(t.row(s));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new([b, channels, h, w], out)?, Op::ConcatChannels(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Gathers entries of `x` along its leading axis.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::IndexSelect { x, idx: idx.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `root`. Every node on the tape is visited at most once,
    /// in reverse insertion order.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rt.shape().to_vec(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop(node, &gy, &mut grads)?;
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cout } => {
                let batch = self.shape(*x)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * geom.in_len()];
                    kernels::conv_backward_input(gy.data(), batch, self.value(*w).data(), *cout, geom, &mut dx);
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); self.value(*w).numel()];
                    kernels::conv_backward_weight(gy.data(), batch, self.value(*x).data(), *cout, geom, &mut dw);
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    acc(b, Tensor::new([*cout], channel_sums(gy.data(), *cout, geom.col_cols()))?);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => {
                let batch = self.shape(*x)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    kernels::conv_forward(gy.data(), batch, self.value(*w).data(), *cin, geom, &mut dx);
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); self.value(*w).numel()];
                    kernels::conv_backward_weight(self.value(*x).data(), batch, gy.data(), *cin, geom, &mut dw);
                    acc(*w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    acc(b, Tensor::new([geom.channels], channel_sums(gy.data(), geom.channels, geom.in_h * geom.in_w))?);
                }
            }
            Op::Linear { x, w, b } => {
                let [batch, d] = dims2(self.value(*x), "linear")?;
                let o = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * d];
                    T::gemm(batch, o, d, T::one(), gy.data(), (o, 1), self.value(*w).data(), (d, 1), T::zero(), &mut dx, (d, 1));
                    acc(*x, Tensor::new([batch, d], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(o, batch, d, T::one(), gy.data(), (1, o), self.value(*x).data(), (d, 1), T::zero(), &mut dw, (d, 1));
                    acc(*w, Tensor::new([o, d], dw)?);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); o];
                    for row in gy.data().chunks(o) {
                        for (s, &g) in db.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                    acc(b, Tensor::new([o], db)?);
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = dims2(self.value(*a), "matmul")?;
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gy.data(), (n, 1), self.value(*b).data(), (1, n), T::zero(), &mut da, (k, 1));
                    acc(*a, Tensor::new([m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), (1, k), gy.data(), (n, 1), T::zero(), &mut db, (n, 1));
                    acc(*b, Tensor::new([k, n], db)?);
                }
            }
            Op::Relu(x) => {
                let g = gy.zip_with(self.value(*x), "relu", |g, v| if v > T::zero() { g } else { T::zero() })?;
                acc(*x, g);
            }
            Op::Abs(x) => {
                let g = gy.zip_with(self.value(*x), "abs", |g, v| g * sign(v))?;
                acc(*x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let g = gy.zip_with(self.value(*x), "clamp", |g, v| if v > lo && v < hi { g } else { T::zero() })?;
                acc(*x, g);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.clone());
                }
                if self.wants(*b) {
                    acc(*b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.clone());
                }
                if self.wants(*b) {
                    acc(*b, gy.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, gy.zip_with(self.value(*b), "mul", |g, v| g * v)?);
                }
                if self.wants(*b) {
                    acc(*b, gy.zip_with(self.value(*a), "mul", |g, v| g * v)?);
                }
            }
            Op::Scale(x, c) => acc(*x, gy.scale(*c)),
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x).to_vec(), gy.item())),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gy.item() / n));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = dims4(self.value(*x), "global_avg_pool")?;
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::UpsampleNearest2x(x) => {
                let [_, _, h, w] = dims4(self.value(*x), "upsample_nearest2x")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (p, g) in gy.data().chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(y / 2) * w + xx / 2] += g[y * ow + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::DownsampleNearest2x(x) => {
                let [_, _, h, w] = dims4(self.value(*x), "downsample_nearest2x")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (p, g) in gy.data().chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[2 * y * w + 2 * xx] += g[y * ow + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::ResizeBilinear(x) => {
                let [b, c, h, w] = dims4(self.value(*x), "resize_bilinear")?;
                let [_, _, oh, ow] = dims4(gy, "resize_bilinear")?;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                kernels::bilinear_backward(gy.data(), b * c, (h, w), (oh, ow), &mut dx);
                acc(*x, Tensor::new(self.shape(*x).to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.shape(*logits);
                let (classes, spatial) = match *shape {
                    [_, c] => (c, 1),
                    [_, c, h, w] => (c, h * w),
                    _ => unreachable!("validated in forward"),
                };
                let scale = gy.item() / T::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (pos, &label) in labels.iter().enumerate() {
                    let (b, s) = (pos / spatial, pos % spatial);
                    d[b * classes * spatial + label * spatial + s] -= T::one();
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                acc(*logits, Tensor::new(shape.to_vec(), d)?);
            }
            Op::L1 { pred, target } => {
                let n = T::from_usize(self.value(*pred).numel()).unwrap();
                let g = self
                    .value(*pred)
                    .zip_with(self.value(*target), "l1", |p, t| sign(p - t) * gy.item() / n)?;
                if self.wants(*target) {
                    acc(*target, g.scale(-T::one()));
                }
                if self.wants(*pred) {
                    acc(*pred, g);
                }
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dot = ta.dot(tb);
                let na = ta.dot(ta).sqrt();
                let nb = tb.dot(tb).sqrt();
                let denom = na * nb + T::from_f64_lossy(COSINE_EPS);
                let g = gy.item();
                // d/da = b/D - dot * nb * a / (na * D^2); the second term vanishes when a = 0.
                let grad_for = |own: &Tensor<T>, other: &Tensor<T>, n_own: T, n_other: T| {
                    let coef = if n_own > T::zero() {
                        dot * n_other / (n_own * denom * denom)
                    } else {
                        T::zero()
                    };
                    own.zip_with(other, "cosine", |o, p| g * (p / denom - coef * o))
                };
                if self.wants(*a) {
                    acc(*a, grad_for(ta, tb, na, nb)?);
                }
                if self.wants(*b) {
                    acc(*b, grad_for(tb, ta, nb, na)?);
                }
            }
            Op::ConcatChannels(parts) => {
                let batch = gy.shape()[0];
                let row = gy.row_len();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).row_len();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(batch * len);
                        for s in 0..batch {
                            d.extend_from_slice(&gy.data()[s * row + offset..s * row + offset + len]);
                        }
                        acc(p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, gy.clone().reshape(self.shape(*x).to_vec())?),
            Op::IndexSelect { x, idx } => {
                let mut d = Tensor::zeros(self.shape(*x).to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &g) in d.row_mut(i).iter_mut().zip(gy.row(r)) {
                        *dst += g;
                    }
                }
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums<T: Float>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().copied().sum::<T>();
    }
    out
}
