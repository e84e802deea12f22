use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding policy of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// `(k-1)/2` zeros on each side; odd kernels only.
    Same,
    /// Fixed zeros on each side.
    Explicit(usize),
}

impl Padding {
    fn amount(self, kernel: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Explicit(p) => Ok(p),
            Padding::Same if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            Padding::Same => Err(Error::Shape(format!(
                "same padding needs an odd kernel, got {kernel}"
            ))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Up2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    CropCenter {
        x: Var,
        top: usize,
        left: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    BceWithLogits {
        x: Var,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation tape.
///
/// Nodes are stored in creation order, which is a valid topological order.
/// A graph supports exactly one call to [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

fn require_rank(op: &str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{op} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Graph("graph is consumed; build a new one".into()));
        }
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, out, op, &[a])
    }

    fn broadcast_shape(&self, name: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.numel() == 1 {
            Ok(sa.shape().to_vec())
        } else if sa.numel() == 1 {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                sa.shape(),
                sb.shape()
            )))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| f(da[i % da.len()], db[i % db.len()]))
            .collect();
        let out = Tensor::new(shape, data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", a, Op::MulScalar(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    fn require_positive(&self, op: &'static str, a: Var) -> Result<()> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain { op, index, value });
        }
        Ok(())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.require_positive("log", a)?;
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.require_positive("sqrt", a)?;
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    /// Elementwise power with a scalar exponent. Non-integer exponents need
    /// strictly positive inputs.
    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        if exponent.fract() != 0.0 {
            self.require_positive("pow", a)?;
        }
        self.unary("pow", a, Op::Pow(a, exponent), |x| x.powf(exponent))
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sums over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = layout(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, out)?;
        self.push("sum_axis", out, Op::SumAxis(a, axis), &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = layout(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", out, Op::Softmax(a, axis), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_rank("matmul", ta, 2)?;
        require_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(Error::Shape(format!(
                "matmul: inner dims {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]`, plus an
    /// optional per-filter bias `[F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        require_rank("conv2d input", tx, 4)?;
        require_rank("conv2d weight", tw, 4)?;
        let [batch, channels, height, width] = tx.shape().try_into().expect("rank 4");
        let [filters, wc, kh, kw] = tw.shape().try_into().expect("rank 4");
        if wc != channels {
            return Err(Error::Shape(format!(
                "conv2d: input has {channels} channels, weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let pad = padding.amount(kh.max(kw))?;
        if kh > height + 2 * pad || kw > width + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [filters] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{filters}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        };
        let mut out = vec![0.0; batch * filters * geom.out_h * geom.out_w];
        kernels::conv2d_forward(
            &geom,
            batch,
            filters,
            tx.data(),
            tw.data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let out = Tensor::new(vec![batch, filters, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                w,
                b: bias,
                geom,
            },
            &inputs,
        )
    }

    /// 2×2 stride-2 transposed convolution: `x: [N,C,H,W]`, `w: [C,F,2,2]`,
    /// output `[N,F,2H,2W]`.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        require_rank("transposed_conv2d input", tx, 4)?;
        require_rank("transposed_conv2d weight", tw, 4)?;
        let [batch, channels, h, wd] = tx.shape().try_into().expect("rank 4");
        let [wc, filters, kh, kw] = tw.shape().try_into().expect("rank 4");
        if wc != channels || kh != 2 || kw != 2 {
            return Err(Error::Shape(format!(
                "transposed_conv2d: weight {:?} incompatible with input {:?} (need [C,F,2,2])",
                tw.shape(),
                tx.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [filters] {
                return Err(Error::Shape("transposed_conv2d: bias shape".into()));
            }
        }
        let mut out = vec![0.0; batch * filters * 4 * h * wd];
        kernels::up2_forward(
            batch,
            channels,
            filters,
            h,
            wd,
            tx.data(),
            tw.data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let out = Tensor::new(vec![batch, filters, 2 * h, 2 * wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("transposed_conv2d", out, Op::Up2 { x, w, b: bias }, &inputs)
    }

    /// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped;
    /// ties go to the first maximal element in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_rank("maxpool2d", t, 4)?;
        let [n, c, h, w] = t.shape().try_into().expect("rank 4");
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!(
                "maxpool2d: spatial dims {h}x{w} smaller than pool size 2"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("maxpool2d", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Central `h×w` window of the last two axes of a rank-4 tensor.
    pub fn crop_center(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        require_rank("crop_center", t, 4)?;
        let [n, c, ih, iw] = t.shape().try_into().expect("rank 4");
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop_center: cannot crop {ih}x{iw} to {h}x{w}"
            )));
        }
        let (top, left) = ((ih - h) / 2, (iw - w) / 2);
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in t.data().chunks(ih * iw) {
            for r in top..top + h {
                out.extend_from_slice(&plane[r * iw + left..r * iw + left + w]);
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push("crop_center", out, Op::CropCenter { x, top, left }, &[x])
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let compatible = ta.rank() == tb.rank()
            && axis < ta.rank()
            && (0..ta.rank()).all(|d| d == axis || ta.shape()[d] == tb.shape()[d]);
        if !compatible {
            return Err(Error::Shape(format!(
                "concat on axis {axis}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (outer, na, inner) = layout(ta.shape(), axis);
        let nb = tb.shape()[axis];
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * na * inner..(o + 1) * na * inner]);
            out.extend_from_slice(&tb.data()[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = na + nb;
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat { a, b, axis }, &[a, b])
    }

    /// Summed binary cross-entropy of logits against a constant target in
    /// `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Result<Var> {
        let total = self
            .value(x)
            .data()
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            "bce_with_logits",
            Tensor::scalar(total),
            Op::BceWithLogits { x, target },
            &[x],
        )
    }

    /// Reverse pass from a one-element `loss`. Afterwards every leaf created
    /// with [`Graph::param`] holds `d loss / d leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], contrib);
        }
    }

    /// Reduces a broadcast gradient back onto operand `v`.
    fn send_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).numel();
        if n == contrib.len() {
            accumulate(&mut grads[v.0], contrib);
        } else {
            accumulate(&mut grads[v.0], vec![contrib.iter().sum()]);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        let val = |v: Var| self.value(v).data();
        let elementwise = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            val(v)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&x, &y), &gy)| f(x, y, gy))
                .collect()
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send_broadcast(grads, *a, g.to_vec());
                self.send_broadcast(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send_broadcast(grads, *a, g.to_vec());
                self.send_broadcast(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if self.wants(*a) {
                    let c = (0..g.len()).map(|k| g[k] * db[k % db.len()]).collect();
                    self.send_broadcast(grads, *a, c);
                }
                if self.wants(*b) {
                    let c = (0..g.len()).map(|k| g[k] * da[k % da.len()]).collect();
                    self.send_broadcast(grads, *b, c);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if self.wants(*a) {
                    let c = (0..g.len()).map(|k| g[k] / db[k % db.len()]).collect();
                    self.send_broadcast(grads, *a, c);
                }
                if self.wants(*b) {
                    let c = (0..g.len())
                        .map(|k| {
                            let y = db[k % db.len()];
                            -g[k] * da[k % da.len()] / (y * y)
                        })
                        .collect();
                    self.send_broadcast(grads, *b, c);
                }
            }
            Op::AddScalar(a) => self.send(grads, *a, g.to_vec()),
            Op::MulScalar(a, c) => self.send(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Neg(a) => self.send(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Exp(a) => self.send(grads, *a, elementwise(*a, &|_, y, gy| gy * y)),
            Op::Log(a) => self.send(grads, *a, elementwise(*a, &|x, _, gy| gy / x)),
            Op::Sqrt(a) => self.send(grads, *a, elementwise(*a, &|_, y, gy| gy * 0.5 / y)),
            Op::Pow(a, p) => {
                let p = *p;
                self.send(
                    grads,
                    *a,
                    elementwise(*a, &|x, _, gy| gy * p * x.powf(p - 1.0)),
                )
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                self.send(
                    grads,
                    *a,
                    elementwise(*a, &|x, _, gy| if x > floor { gy } else { 0.0 }),
                )
            }
            Op::Relu(a) => self.send(
                grads,
                *a,
                elementwise(*a, &|x, _, gy| if x > 0.0 { gy } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.send(
                    grads,
                    *a,
                    elementwise(*a, &|x, _, gy| if x > 0.0 { gy } else { slope * gy }),
                )
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = layout(self.value(*a).shape(), *axis);
                let mut c = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        c[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.send(grads, *a, c);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = layout(self.value(*a).shape(), *axis);
                let mut c = vec![0.0; out.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..n {
                            c[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.send(grads, *a, c);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut c = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut c, false);
                    self.send(grads, *a, c);
                }
                if self.wants(*b) {
                    let mut c = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut c, false);
                    self.send(grads, *b, c);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let batch = tx.shape()[0];
                let filters = tw.shape()[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; tx.numel()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; tw.numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![0.0; filters]);
                kernels::conv2d_backward(
                    geom,
                    batch,
                    filters,
                    tx.data(),
                    tw.data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.send(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.send(grads, *b, db);
                }
            }
            Op::Up2 { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [batch, channels, h, wd] = tx.shape().try_into().expect("rank 4");
                let filters = tw.shape()[1];
                let mut dx = self.wants(*x).then(|| vec![0.0; tx.numel()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; tw.numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![0.0; filters]);
                kernels::up2_backward(
                    batch,
                    channels,
                    filters,
                    h,
                    wd,
                    tx.data(),
                    tw.data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.send(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.send(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut c = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    c[src] += gv;
                }
                self.send(grads, *x, c);
            }
            Op::CropCenter { x, top, left } => {
                let [_, _, ih, iw] = self.value(*x).shape().try_into().expect("rank 4");
                let [_, _, h, w] = self.nodes[i].value.shape().try_into().expect("rank 4");
                let mut c = vec![0.0; self.value(*x).numel()];
                for (plane, gp) in c.chunks_mut(ih * iw).zip(g.chunks(h * w)) {
                    for r in 0..h {
                        let dst = (top + r) * iw + left;
                        plane[dst..dst + w].copy_from_slice(&gp[r * w..(r + 1) * w]);
                    }
                }
                self.send(grads, *x, c);
            }
            Op::Concat { a, b, axis } => {
                let (outer, na, inner) = layout(self.value(*a).shape(), *axis);
                let nb = self.value(*b).shape()[*axis];
                let mut ga = Vec::with_capacity(outer * na * inner);
                let mut gb = Vec::with_capacity(outer * nb * inner);
                for chunk in g.chunks((na + nb) * inner) {
                    ga.extend_from_slice(&chunk[..na * inner]);
                    gb.extend_from_slice(&chunk[na * inner..]);
                }
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::BceWithLogits { x, target } => {
                let t = *target;
                let c = val(*x)
                    .iter()
                    .map(|&z| g[0] * (1.0 / (1.0 + (-z).exp()) - t))
                    .collect();
                self.send(grads, *x, c);
            }
        }
    }
}
