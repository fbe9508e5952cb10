use super::linalg::gemm;
use super::{ensure_finite, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Bilinear with the align-corners=false sampling grid.
    Bilinear,
}

/// Deliberately wrong backward rules, used to prove the gradient checker
/// catches a broken primitive.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Halves the gradient passed through every ReLU.
    HalveRelu,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var, T),
    SumAll(Var),
    MeanAll(Var),
    SumChannels(Var),
    DotChannels(Var, Var),
    Concat(Vec<Var>),
    L2Normalize(Var, T),
    Upsample(Var, usize, UpsampleMode),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BceWithLogits(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// tape is topologically sorted by construction.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.record(name, shape, data, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        self.record(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.map("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), |x| x.ln())
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x,0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, Op::Softplus(a), softplus)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::param("sqrt", format!("eps must be >= 0, got {eps}")));
        }
        let e = T::of(eps);
        self.map("sqrt", a, Op::Sqrt(a, e), |x| (x + e).sqrt())
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.record("sum_all", vec![1], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.record("mean_all", vec![1], vec![m], Op::MeanAll(a), &[a])
    }

    /// Sum over the channel axis of `[N,C,H,W]`, keeping it as size 1.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            let dst = &mut out[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(plane) {
                    *d += s;
                }
            }
        }
        self.record("sum_channels", vec![n, 1, h, w], out, Op::SumChannels(a), &[a])
    }

    /// Per-pixel dot product of two `[N,C,H,W]` tensors along channels.
    pub fn dot_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot_channels", a, b)?;
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            let dst = &mut out[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += xa[off + i] * xb[off + i];
                }
            }
        }
        self.record("dot_channels", vec![n, 1, h, w], out, Op::DotChannels(a, b), &[a, b])
    }

    /// Concatenates `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "nothing to concatenate"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!(
                        "operand {:?} disagrees with {:?} on N/H/W",
                        self.shape(p),
                        self.shape(first)
                    ),
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for ni in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        self.record("concat_channels", vec![n, total_c, h, w], out, Op::Concat(parts.to_vec()), parts)
    }

    /// Divides every per-pixel channel vector by `sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::param("l2_normalize", format!("eps must be > 0, got {eps}")));
        }
        let e = T::of(eps);
        let v = self.value(a);
        let (n, c, h, w) = v.dims4()?;
        let norms = channel_norms(v.data(), n, c, h * w, e);
        let hw = h * w;
        let mut out = v.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[off + i] /= norms[ni * hw + i];
                }
            }
        }
        let shape = v.shape().to_vec();
        self.record("l2_normalize", shape, out, Op::L2Normalize(a, e), &[a])
    }

    pub fn upsample(&mut self, a: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor < 1 {
            return Err(Error::param("upsample", format!("factor must be >= 1, got {factor}")));
        }
        let v = self.value(a);
        let (n, c, h, w) = v.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); n * c * ho * wo];
        match mode {
            UpsampleMode::Nearest => {
                for (plane, dst) in v.data().chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
                    for y in 0..ho {
                        let src_row = &plane[(y / factor) * w..];
                        for x in 0..wo {
                            dst[y * wo + x] = src_row[x / factor];
                        }
                    }
                }
            }
            UpsampleMode::Bilinear => {
                let ty = bilinear_taps::<T>(h, factor);
                let tx = bilinear_taps::<T>(w, factor);
                for (plane, dst) in v.data().chunks_exact(h * w).zip(out.chunks_exact_mut(ho * wo)) {
                    for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            dst[y * wo + x] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                                + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                        }
                    }
                }
            }
        }
        self.record("upsample", vec![n, c, ho, wo], out, Op::Upsample(a, factor, mode), &[a])
    }

    /// 2-D cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus a
    /// per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(input), self.value(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.k] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", self.shape(b), geo.k),
                ));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let p = geo.ho * geo.wo;
        let mut out = vec![T::zero(); geo.n * geo.k * p];
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { geo.ckk() * p }];
        for ni in 0..geo.n {
            let xn = &x[ni * geo.c * geo.h * geo.w..(ni + 1) * geo.c * geo.h * geo.w];
            let cols_ref: &[T] = if geo.is_pointwise() {
                xn
            } else {
                geo.im2col(xn, &mut cols);
                &cols
            };
            gemm(false, false, geo.k, p, geo.ckk(), w, cols_ref, T::zero(), &mut out[ni * geo.k * p..(ni + 1) * geo.k * p]);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_exact_mut(p).enumerate() {
                let bk = bv[i % geo.k];
                chunk.iter_mut().for_each(|o| *o += bk);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            "conv2d",
            vec![geo.n, geo.k, geo.ho, geo.wo],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        )
    }

    /// Mean binary cross-entropy with logits:
    /// `mean(max(x,0) - x·t + ln(1 + e^{-|x|}))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, target)?;
        let (x, t) = (self.value(logits).data(), self.value(target).data());
        let s: T = x
            .iter()
            .zip(t)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let m = s / T::of(x.len() as f64);
        self.record("bce_with_logits", vec![1], vec![m], Op::BceWithLogits(logits, target), &[logits, target])
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a
    /// gradient. Leaves used several times receive the sum of all uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                ensure_finite("backward", &g)?;
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = self.nodes[i].value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc(grads, a, || g.to_vec());
                self.acc(grads, b, || g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, || g.to_vec());
                self.acc(grads, b, || g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                self.acc(grads, a, || g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect());
                self.acc(grads, b, || g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect());
            }
            &Op::Div(a, b) => {
                self.acc(grads, a, || g.iter().zip(val(b)).map(|(&g, &y)| g / y).collect());
                self.acc(grads, b, || {
                    g.iter()
                        .zip(val(a))
                        .zip(val(b))
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect()
                });
            }
            &Op::Scale(a, s) => self.acc(grads, a, || g.iter().map(|&x| x * s).collect()),
            &Op::AddScalar(a) => self.acc(grads, a, || g.to_vec()),
            &Op::Relu(a) => {
                let k = match self.fault {
                    Some(BackwardFault::HalveRelu) => T::of(0.5),
                    None => T::one(),
                };
                self.acc(grads, a, || {
                    g.iter()
                        .zip(val(a))
                        .map(|(&g, &x)| if x > T::zero() { g * k } else { T::zero() })
                        .collect()
                });
            }
            &Op::Sigmoid(a) => {
                self.acc(grads, a, || g.iter().zip(out).map(|(&g, &s)| g * s * (T::one() - s)).collect());
            }
            &Op::Log(a) => self.acc(grads, a, || g.iter().zip(val(a)).map(|(&g, &x)| g / x).collect()),
            &Op::Softplus(a) => {
                self.acc(grads, a, || g.iter().zip(val(a)).map(|(&g, &x)| g * sigmoid(x)).collect());
            }
            &Op::Sqrt(a, _) => {
                self.acc(grads, a, || g.iter().zip(out).map(|(&g, &r)| g / (T::of(2.0) * r)).collect());
            }
            &Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.acc(grads, a, || vec![g[0]; n]);
            }
            &Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                self.acc(grads, a, || vec![g[0] / T::of(n as f64); n]);
            }
            &Op::SumChannels(a) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
                let hw = h * w;
                self.acc(grads, a, || {
                    let mut d = Vec::with_capacity(n * c * hw);
                    for ni in 0..n {
                        for _ in 0..c {
                            d.extend_from_slice(&g[ni * hw..(ni + 1) * hw]);
                        }
                    }
                    d
                });
            }
            &Op::DotChannels(a, b) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
                let hw = h * w;
                let spread = |other: &[T]| {
                    let mut d = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                d[off + p] = g[ni * hw + p] * other[off + p];
                            }
                        }
                    }
                    d
                };
                self.acc(grads, a, || spread(val(b)));
                self.acc(grads, b, || spread(val(a)));
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = self.nodes[i].value.dims4()?;
                let hw = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    self.acc(grads, p, || {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for ni in 0..n {
                            let start = (ni * total_c + c_off) * hw;
                            d.extend_from_slice(&g[start..start + pc * hw]);
                        }
                        d
                    });
                    c_off += pc;
                }
            }
            &Op::L2Normalize(a, eps) => {
                let x = &self.nodes[a.0].value;
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                self.acc(grads, a, || {
                    let norms = channel_norms(x.data(), n, c, hw, eps);
                    // dx = (g - y·<y,g>) / |x|
                    let mut yg = vec![T::zero(); n * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                yg[ni * hw + p] += out[off + p] * g[off + p];
                            }
                        }
                    }
                    let mut d = vec![T::zero(); n * c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                let q = ni * hw + p;
                                d[off + p] = (g[off + p] - out[off + p] * yg[q]) / norms[q];
                            }
                        }
                    }
                    d
                });
            }
            &Op::Upsample(a, factor, mode) => {
                let (n, c, h, w) = self.nodes[a.0].value.dims4()?;
                let (ho, wo) = (h * factor, w * factor);
                self.acc(grads, a, || {
                    let mut d = vec![T::zero(); n * c * h * w];
                    match mode {
                        UpsampleMode::Nearest => {
                            for (gp, dp) in g.chunks_exact(ho * wo).zip(d.chunks_exact_mut(h * w)) {
                                for y in 0..ho {
                                    for x in 0..wo {
                                        dp[(y / factor) * w + x / factor] += gp[y * wo + x];
                                    }
                                }
                            }
                        }
                        UpsampleMode::Bilinear => {
                            let ty = bilinear_taps::<T>(h, factor);
                            let tx = bilinear_taps::<T>(w, factor);
                            for (gp, dp) in g.chunks_exact(ho * wo).zip(d.chunks_exact_mut(h * w)) {
                                for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                                    for (x, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                        let gv = gp[y * wo + x];
                                        dp[y0 * w + x0] += gv * wy0 * wx0;
                                        dp[y0 * w + x1] += gv * wy0 * wx1;
                                        dp[y1 * w + x0] += gv * wy1 * wx0;
                                        dp[y1 * w + x1] += gv * wy1 * wx1;
                                    }
                                }
                            }
                        }
                    }
                    d
                });
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xv = &self.nodes[input.0].value;
                let wv = &self.nodes[weight.0].value;
                let geo = ConvGeometry::new(xv, wv, stride, pad)?;
                let p = geo.ho * geo.wo;
                let ckk = geo.ckk();
                let in_len = geo.c * geo.h * geo.w;
                if let Some(b) = bias {
                    self.acc(grads, b, || {
                        let mut db = vec![T::zero(); geo.k];
                        for (j, chunk) in g.chunks_exact(p).enumerate() {
                            db[j % geo.k] += chunk.iter().copied().sum();
                        }
                        db
                    });
                }
                let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * p }];
                self.acc(grads, weight, || {
                    let mut dw = vec![T::zero(); geo.k * ckk];
                    for ni in 0..geo.n {
                        let xn = &xv.data()[ni * in_len..(ni + 1) * in_len];
                        let cols_ref: &[T] = if geo.is_pointwise() {
                            xn
                        } else {
                            geo.im2col(xn, &mut cols);
                            &cols
                        };
                        let gn = &g[ni * geo.k * p..(ni + 1) * geo.k * p];
                        gemm(false, true, geo.k, ckk, p, gn, cols_ref, T::one(), &mut dw);
                    }
                    dw
                });
                self.acc(grads, input, || {
                    let mut dx = vec![T::zero(); geo.n * in_len];
                    let mut dcols = vec![T::zero(); ckk * p];
                    for ni in 0..geo.n {
                        let gn = &g[ni * geo.k * p..(ni + 1) * geo.k * p];
                        let dxn = &mut dx[ni * in_len..(ni + 1) * in_len];
                        if geo.is_pointwise() {
                            gemm(true, false, ckk, p, geo.k, wv.data(), gn, T::zero(), dxn);
                        } else {
                            gemm(true, false, ckk, p, geo.k, wv.data(), gn, T::zero(), &mut dcols);
                            geo.col2im(&dcols, dxn);
                        }
                    }
                    dx
                });
            }
            &Op::BceWithLogits(logits, target) => {
                let (x, t) = (val(logits), val(target));
                let inv_n = g[0] / T::of(x.len() as f64);
                self.acc(grads, logits, || x.iter().zip(t).map(|(&x, &t)| (sigmoid(x) - t) * inv_n).collect());
                self.acc(grads, target, || x.iter().map(|&x| -x * inv_n).collect());
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: impl FnOnce() -> Vec<T>) {
        if !self.wants(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, &x)| *e += x),
            slot @ None => *slot = Some(c),
        }
    }
}

/// Overflow-free logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn channel_norms<T: Real>(x: &[T], n: usize, c: usize, hw: usize, eps: T) -> Vec<T> {
    let mut sq = vec![T::zero(); n * hw];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for p in 0..hw {
                sq[ni * hw + p] += x[off + p] * x[off + p];
            }
        }
    }
    sq.iter().map(|&s| (s + eps).sqrt()).collect()
}

/// `(i0, i1, w0, w1)` per output index for align-corners=false resampling.
fn bilinear_taps<T: Real>(len: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, T::of(1.0 - l1), T::of(l1))
        })
        .collect()
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = x.dims4()?;
        let (k, wc, kh, kw) = weight.dims4()?;
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis (C={c}) does not match weight axis 1 (C={wc})"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::param("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}x{kw} on axes H/W", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (k, _, kh, kw) = w.dims4().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * ho * wo];
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[ki];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((ki * c + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((ni * k + ki) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let w = random(&[1, 1, 3, 3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &[0.0], stride, pad);
            let diff = g
                .value(y)
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
        }
        // multi-channel, batched, with bias
        let x = random(&[2, 3, 5, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let want = conv_oracle(&x, &w, b.data(), 2, 1);
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel_and_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 1, 5, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        let zero = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(random(&[3, 2, 3, 3], &mut rng));
        let b = g.constant(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.conv2d(zero, w, Some(b), 1, 1).unwrap();
        for (i, plane) in g.value(y).data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][i]));
        }
    }

    #[test]
    fn conv_shape_mismatch_names_axes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("C=2") && err.contains("C=3"), "{err}");
    }

    #[test]
    fn upsample_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let same = g.upsample(x, 1, UpsampleMode::Bilinear).unwrap();
        assert_eq!(g.value(same).data(), g.value(x).data());
        let one = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
        let up = g.upsample(one, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(g.value(up).data(), &[3.0; 4]);
        assert!(matches!(g.upsample(x, 0, UpsampleMode::Nearest), Err(Error::Parameter { .. })));

        // Hand evaluation on the ramp [[0,1],[2,3]], factor 2, align-corners=false.
        // Output coordinate o maps to src = (o+0.5)/2-0.5, clamped at 0:
        // o=0 -> 0, o=1 -> 0.25, o=2 -> 0.75, o=3 -> 1.25 (taps clamp to index 1).
        // Per axis the interpolated coordinate is therefore [0, 0.25, 0.75, 1].
        // value(y, x) = 2·cy + cx.
        let axis = [0.0, 0.25, 0.75, 1.0];
        let want: Vec<f64> = (0..16).map(|i| 2.0 * axis[i / 4] + axis[i % 4]).collect();
        let bl = g.upsample(x, 2, UpsampleMode::Bilinear).unwrap();
        for (a, b) in g.value(bl).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize(x, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 0.6).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.8).abs() < 1e-12);
        let u = g.constant(Tensor::new(vec![1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let v = g.l2_normalize(u, 1e-12).unwrap();
        let got = g.value(v).data();
        assert!(got[0] == 0.0 && got[2] == 0.0 && (got[1] - 1.0).abs() < 1e-12);
        assert!(g.l2_normalize(u, 0.0).is_err());
    }

    #[test]
    fn backward_of_simple_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 2], &mut rng);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let s = g.sum_all(xv).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(xv).unwrap().iter().all(|&d| d == 1.0));

        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum_all(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        g.backward(half).unwrap();
        for (d, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
            assert!((d - v).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1], vec![-1.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn bce_matches_hand_formula() {
        // logits (0.5, -1.2, 2.0, 0.0), targets (1, 0, 0, 1)
        let xs = [0.5f64, -1.2, 2.0, 0.0];
        let ts = [1.0f64, 0.0, 0.0, 1.0];
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let want = -xs
            .iter()
            .zip(&ts)
            .map(|(&x, &t)| t * s(x).ln() + (1.0 - t) * (1.0 - s(x)).ln())
            .sum::<f64>()
            / 4.0;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], xs.to_vec()).unwrap());
        let t = g.constant(Tensor::new(vec![1, 1, 2, 2], ts.to_vec()).unwrap());
        let l = g.bce_with_logits(x, t).unwrap();
        assert!((g.scalar_value(l).unwrap() - want).abs() < 1e-14);
    }
}
