use crate::autograd::kernels;
use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Variance floor of batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistic in a batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance buffers of one batch-norm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, cols: Vec<T> },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Concat { a: Var, b: Var },
    Softmax { input: Var },
    Dice { probs: Var, target: Vec<T>, num: Vec<T>, den: Vec<T> },
    Sum { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations in creation (hence topological) order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// First node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes.iter().position(|n| !n.value.all_finite()).map(Var)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stride-1 convolution with zero padding that preserves H and W.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let [n, c, h, w] = x.dims4("conv2d")?;
        let [o, ci, kh, kw] = k.dims4("conv2d")?;
        if ci != c {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square with odd size, got {kh}x{kw}")));
        }
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", k.shape(), b.shape()));
        }
        let (out, cols) = kernels::conv2d_forward(x.data(), [n, c, h, w], k.data(), o, kh, b.data());
        let rg = self.any_grad(&[input, kernel, bias]);
        let value = Tensor::new(vec![n, o, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, cols }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        // NaN passes through so a broken upstream value is never masked
        let value = self.value(input).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Per-channel batch normalization over N, H and W.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_, T>,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("batchnorm2d")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::invalid(
                    "batchnorm2d",
                    format!("{name} shape {:?} does not match {c} channels", self.value(v).shape()),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::invalid("batchnorm2d", "running statistics length differs from channel count"));
        }
        let count = n * h * w;
        if mode == Mode::Train && count < 2 {
            return Err(Error::invalid("batchnorm2d", "train mode needs at least two values per channel"));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let hw = h * w;
        let eps = T::lit(BN_EPS);
        let xd = x.data();

        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                let m = T::lit(BN_MOMENTUM);
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / cnt;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    let var = ss / cnt;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = ss / (cnt - T::one());
                    stats.mean[ch] = m * stats.mean[ch] + (T::one() - m) * mu;
                    stats.var[ch] = m * stats.var[ch] + (T::one() - m) * unbiased;
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch];
                    inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
                }
            }
        }

        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.any_grad(&[input, gamma, beta]);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats: mode == Mode::Train }, rg))
    }

    /// 2×2 max-pooling with stride 2; ties go to the first position in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("maxpool2d", format!("spatial size {h}x{w} must be even")));
        }
        let (out, argmax) = kernels::maxpool_forward(x.data(), [n, c, h, w]);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("upsample_nearest2x")?;
        let xd = x.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample { input }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let [na, ca, ha, wa] = ta.dims4("concat_channels")?;
        let [nb, cb, hb, wb] = tb.dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", ta.shape(), tb.shape()));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..na {
            out.extend_from_slice(&ta.data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&tb.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Softmax over the channel axis at each pixel.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("softmax_channels")?;
        if c == 0 {
            return Err(Error::invalid("softmax_channels", "needs at least one channel"));
        }
        let out = kernels::softmax_channels(x.data(), [n, c, h, w]);
        let rg = self.any_grad(&[input]);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// `1 − mean_c (2·Σ p·t + ε) / (Σ p + Σ t + ε)`, sums taken over batch and pixels.
    pub fn dice_loss(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(probs);
        let [n, c, h, w] = p.dims4("dice_loss")?;
        if target.shape() != p.shape() {
            return Err(Error::shape("dice_loss", p.shape(), target.shape()));
        }
        let hw = h * w;
        let eps = T::lit(DICE_EPS);
        let two = T::lit(2.0);
        let (pd, td) = (p.data(), target.data());
        let mut num = vec![T::zero(); c];
        let mut den = vec![T::zero(); c];
        for ch in 0..c {
            let (mut inter, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    inter += pd[i] * td[i];
                    ps += pd[i];
                    ts += td[i];
                }
            }
            num[ch] = two * inter + eps;
            den[ch] = ps + ts + eps;
        }
        let mean_dice = num.iter().zip(&den).map(|(&a, &b)| a / b).sum::<T>() / T::from_usize(c).unwrap();
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(T::one() - mean_dice),
            Op::Dice { probs, target: target.data().to_vec(), num, den },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let v = self.value(root);
        if !v.is_scalar() {
            return Err(Error::invalid("backward", format!("root must be scalar, got shape {:?}", v.shape())));
        }
        self.backward_with(root, &[T::one()])
    }

    /// Backpropagates an upstream gradient `seed` that has the shape of `root`.
    ///
    /// Gradients from a previous call are discarded first. Afterwards every
    /// node that requires a gradient has one, zero if `root` does not depend on it.
    pub fn backward_with(&mut self, root: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::invalid(
                "backward",
                format!("seed has {} elements, root has {}", seed.len(), self.value(root).len()),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if self.nodes[root.0].requires_grad {
            self.grads[root.0] = Some(seed.to_vec());
        }
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let Graph { nodes, grads } = self;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, cols } => {
                let dims = nodes[input.0].value.dims4("conv2d").expect("checked in forward");
                let kt = &nodes[kernel.0].value;
                let o = kt.shape()[0];
                let k = kt.shape()[2];
                acc(*kernel, &mut |dk| kernels::conv2d_grad_kernel(g, cols, dims, o, k, dk));
                acc(*bias, &mut |db| kernels::conv2d_grad_bias(g, dims, o, db));
                acc(*input, &mut |dx| kernels::conv2d_grad_input(g, kt.data(), dims, o, k, dx));
            }
            Op::Relu { input } => {
                let x = nodes[input.0].value.data();
                acc(*input, &mut |dx| {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += gv;
                        } else if xv.is_nan() {
                            *d += xv;
                        }
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = nodes[input.0].value.dims4("batchnorm2d").expect("checked in forward");
                let hw = h * w;
                let gm = nodes[gamma.0].value.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for idx in base..base + hw {
                            sum_g[ch] += g[idx];
                            sum_gx[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                acc(*gamma, &mut |dg| dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s));
                acc(*beta, &mut |db| db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s));
                let cnt = T::from_usize(n * hw).unwrap();
                acc(*input, &mut |dx| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let scale = gm[ch] * inv_std[ch];
                            for idx in base..base + hw {
                                if *batch_stats {
                                    dx[idx] += scale * (g[idx] - sum_g[ch] / cnt - xhat[idx] * sum_gx[ch] / cnt);
                                } else {
                                    dx[idx] += scale * g[idx];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { input, argmax } => {
                acc(*input, &mut |dx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                });
            }
            Op::Upsample { input } => {
                let [n, c, h, w] = nodes[input.0].value.dims4("upsample").expect("checked in forward");
                let w2 = 2 * w;
                acc(*input, &mut |dx| {
                    for plane in 0..n * c {
                        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..w2 {
                                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = nodes[a.0].value.dims4("concat").expect("checked in forward");
                let cb = nodes[b.0].value.shape()[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                acc(*a, &mut |da| {
                    for i in 0..n {
                        let src = &g[i * stride..i * stride + ca * hw];
                        da[i * ca * hw..(i + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..n {
                        let src = &g[i * stride + ca * hw..(i + 1) * stride];
                        db[i * cb * hw..(i + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let dims = node.value.dims4("softmax").expect("checked in forward");
                acc(*input, &mut |dx| kernels::softmax_backward(y, g, dims, dx));
            }
            Op::Dice { probs, target, num, den } => {
                let [n, c, h, w] = nodes[probs.0].value.dims4("dice").expect("checked in forward");
                let hw = h * w;
                let scale = g[0] / T::from_usize(c).unwrap();
                let two = T::lit(2.0);
                acc(*probs, &mut |dp| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let d = den[ch];
                            let q = num[ch] / (d * d);
                            for idx in base..base + hw {
                                dp[idx] -= scale * (two * target[idx] / d - q);
                            }
                        }
                    }
                });
            }
            Op::Sum { input } => {
                acc(*input, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for ((d, &s), &o) in da.iter_mut().zip(g).zip(vb) {
                        *d += s * o;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &s), &o) in db.iter_mut().zip(g).zip(va) {
                        *d += s * o;
                    }
                });
            }
        }
    }
}
