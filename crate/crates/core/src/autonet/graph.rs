//! Tape of differentiable operations.
//!
//! Nodes are appended in evaluation order, so a reverse walk over the tape is
//! a valid topological order for the backward pass. Every forward result is
//! checked for non-finite values.

use crate::scalar::Scalar;

use super::{NetError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
        kernel: usize,
        /// im2col buffers, one `(C_in * k * k) x (H * W)` block per sample.
        cols: Vec<T>,
    },
    ReluPool {
        x: Var,
        /// Source index in `x` for each output, `usize::MAX` when ReLU clipped it.
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MinMax {
        x: Var,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        /// `max - min` per (sample, channel); zero marks a degenerate channel.
        range: Vec<T>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Bce {
        z: Var,
        y: Vec<T>,
    },
    SoftmaxCe {
        z: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A single computation graph, built for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var, NetError> {
        if !value.all_finite() {
            return Err(NetError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, NetError> {
        self.push(t, Op::Leaf, false, "input")
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var, NetError> {
        self.push(t, Op::Leaf, true, "param")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient or zeros when nothing reached the node.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.value(v).len()])
    }

    /// Same-size cross-correlation (stride 1, zero padding `k / 2`).
    ///
    /// `w` is `(C_out, C_in, k, k)` with odd `k`; `b` is `(C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NetError> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(NetError::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(NetError::Shape(format!(
                "conv2d: kernel must be square and odd, got {kh}x{kw}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(NetError::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let k = kh;
        let kk = cin * k * k;
        let hw = h * wd;
        let mut cols = vec![T::zero(); n * kk * hw];
        let mut out = vec![T::zero(); n * cout * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let col = &mut cols[s * kk * hw..(s + 1) * kk * hw];
                im2col(&xv[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, k, col);
                let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, plane) in o.chunks_exact_mut(hw).enumerate() {
                        plane.fill(bv[oc]);
                    }
                }
                T::gemm(false, false, cout, hw, kk, wv, col, T::one(), o);
            }
        }
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(vec![n, cout, h, wd], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                kernel: k,
                cols,
            },
            rg,
            "conv2d",
        )
    }

    /// `max(0, .)` followed by 2x2 max pooling with stride 2.
    pub fn relu_pool(&mut self, x: Var) -> Result<Var, NetError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NetError::OddDims(h, w));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![usize::MAX; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::zero();
                    let mut at = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // strict comparison: first maximum wins ties
                        if xv[i] > best {
                            best = xv[i];
                            at = i;
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let rg = self.needs(x);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::ReluPool { x, argmax },
            rg,
            "relu_pool",
        )
    }

    /// `y = x W^T + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NetError> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin {
            return Err(NetError::Shape(format!(
                "linear: input width {fin}, weight expects {win}"
            )));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(NetError::Shape(format!(
                    "linear: bias length {}, expected {fout}",
                    bv.len()
                )));
            }
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            false,
            true,
            n,
            fout,
            fin,
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(vec![n, fout], out)?,
            Op::Linear { x, w, b },
            rg,
            "linear",
        )
    }

    /// Per-channel min-max normalisation over the spatial extent; constant
    /// channels map to zeros.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var, NetError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut argmin = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        let mut range = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let base = plane * hw;
            let vals = &xv[base..base + hw];
            let (mut lo, mut hi) = (0usize, 0usize);
            for (i, &v) in vals.iter().enumerate() {
                if v < vals[lo] {
                    lo = i;
                }
                if v > vals[hi] {
                    hi = i;
                }
            }
            let (mn, mx) = (vals[lo], vals[hi]);
            let r = mx - mn;
            if r > T::zero() {
                for (o, &v) in out[base..base + hw].iter_mut().zip(vals) {
                    *o = ((v - mn) / r).min(T::one()).max(T::zero());
                }
            }
            argmin.push(base + lo);
            argmax.push(base + hi);
            range.push(if r > T::zero() { r } else { T::zero() });
        }
        let rg = self.needs(x);
        self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
            },
            rg,
            "minmax_normalize",
        )
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NetError::Shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg, "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NetError::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg, "add")
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NetError> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.needs(x);
        self.push(
            Tensor::new(vec![n, c], data)?,
            Op::GlobalAvgPool { x },
            rg,
            "global_avg_pool",
        )
    }

    /// Feature-axis concatenation of two `(N, F)` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (na, fa) = self.value(a).dims2()?;
        let (nb, fb) = self.value(b).dims2()?;
        if na != nb {
            return Err(NetError::Shape(format!("concat: batch {na} vs {nb}")));
        }
        let mut data = Vec::with_capacity(na * (fa + fb));
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * fa..(s + 1) * fa]);
            data.extend_from_slice(&self.value(b).data()[s * fb..(s + 1) * fb]);
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![na, fa + fb], data)?,
            Op::Concat { a, b },
            rg,
            "concat",
        )
    }

    /// Mean over all entries of the per-class binary cross-entropy on logits,
    /// evaluated in the stable form `max(z, 0) - z y + ln(1 + exp(-|z|))`.
    pub fn bce_multilabel_loss(&mut self, z: Var, labels: &[T]) -> Result<Var, NetError> {
        let zv = self.value(z).data();
        if labels.len() != zv.len() {
            return Err(NetError::Shape(format!(
                "bce: {} labels for {} logits",
                labels.len(),
                zv.len()
            )));
        }
        check_labels(labels)?;
        let total: T = zv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::lit(zv.len() as f64);
        let rg = self.needs(z);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                z,
                y: labels.to_vec(),
            },
            rg,
            "bce_multilabel_loss",
        )
    }

    /// Softmax cross-entropy against the label vector normalised to a
    /// distribution, averaged over the batch.
    pub fn softmax_ce_loss(&mut self, z: Var, labels: &[T]) -> Result<Var, NetError> {
        let (n, c) = self.value(z).dims2()?;
        if labels.len() != n * c {
            return Err(NetError::Shape(format!(
                "softmax_ce: {} labels for {n}x{c} logits",
                labels.len()
            )));
        }
        check_labels(labels)?;
        let zv = self.value(z).data();
        let mut target = vec![T::zero(); n * c];
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for s in 0..n {
            let row = &zv[s * c..(s + 1) * c];
            let y = &labels[s * c..(s + 1) * c];
            let ysum: T = y.iter().copied().sum();
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..c {
                let t = if ysum > T::zero() {
                    y[j] / ysum
                } else {
                    T::one() / T::lit(c as f64)
                };
                target[s * c + j] = t;
                probs[s * c + j] = (row[j] - lse).exp();
                total -= t * (row[j] - lse);
            }
        }
        let loss = total / T::lit(n as f64);
        let rg = self.needs(z);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { z, target, probs },
            rg,
            "softmax_ce_loss",
        )
    }

    /// `sum(weights * x)`, a scalar probe for gradient checks and saliency.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var, NetError> {
        if weights.len() != self.value(x).len() {
            return Err(NetError::Shape(format!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(x);
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum { x, weights },
            rg,
            "weighted_sum",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NetError> {
        let w = vec![T::one(); self.value(x).len()];
        self.weighted_sum(x, w)
    }

    fn accumulate(&mut self, v: Var, delta: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.len();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); n]);
        delta(g);
    }

    /// Reverse pass from a scalar node; gradients accumulate on every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), NetError> {
        if self.value(loss).len() != 1 {
            return Err(NetError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &g, i)?;
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NetError::NonFinite("backward"));
                }
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, g: &[T], node: usize) -> Result<(), NetError> {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let cout = self.value(*w).shape()[0];
                let hw = h * wd;
                let kk = cin * kernel * kernel;
                if let Some(b) = *b {
                    self.accumulate(b, |gb| {
                        for s in 0..n {
                            for (oc, plane) in g[s * cout * hw..(s + 1) * cout * hw]
                                .chunks_exact(hw)
                                .enumerate()
                            {
                                gb[oc] += plane.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); cout * kk];
                    for s in 0..n {
                        T::gemm(
                            false,
                            true,
                            cout,
                            kk,
                            hw,
                            &g[s * cout * hw..(s + 1) * cout * hw],
                            &cols[s * kk * hw..(s + 1) * kk * hw],
                            T::one(),
                            &mut gw,
                        );
                    }
                    self.accumulate(*w, |acc| add_into(acc, &gw));
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let mut gcol = vec![T::zero(); kk * hw];
                    let mut gx = vec![T::zero(); n * cin * hw];
                    for s in 0..n {
                        T::gemm(
                            true,
                            false,
                            kk,
                            hw,
                            cout,
                            &wv,
                            &g[s * cout * hw..(s + 1) * cout * hw],
                            T::zero(),
                            &mut gcol,
                        );
                        col2im(&gcol, cin, h, wd, *kernel, &mut gx[s * cin * hw..(s + 1) * cin * hw]);
                    }
                    self.accumulate(*x, |acc| add_into(acc, &gx));
                }
            }
            Op::ReluPool { x, argmax } => {
                self.accumulate(*x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            gx[src] += g[o];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2()?;
                let fout = self.value(*w).shape()[0];
                if let Some(b) = *b {
                    self.accumulate(b, |gb| {
                        for row in g.chunks_exact(fout) {
                            add_into(gb, row);
                        }
                    });
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    T::gemm(true, false, fout, fin, n, g, self.value(*x).data(), T::zero(), &mut gw);
                    self.accumulate(*w, |acc| add_into(acc, &gw));
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * fin];
                    T::gemm(false, false, n, fin, fout, g, self.value(*w).data(), T::zero(), &mut gx);
                    self.accumulate(*x, |acc| add_into(acc, &gx));
                }
            }
            Op::MinMax {
                x,
                argmin,
                argmax,
                range,
            } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let out = self.nodes[node].value.data().to_vec();
                self.accumulate(*x, |gx| {
                    for (plane, &r) in range.iter().enumerate() {
                        if r == T::zero() {
                            continue;
                        }
                        let base = plane * hw;
                        let inv = T::one() / r;
                        let mut gmin = T::zero();
                        let mut gmax = T::zero();
                        for i in base..base + hw {
                            gx[i] += g[i] * inv;
                            gmin += g[i] * (out[i] - T::one());
                            gmax -= g[i] * out[i];
                        }
                        gx[argmin[plane]] += gmin * inv;
                        gx[argmax[plane]] += gmax * inv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                self.accumulate(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |ga| add_into(ga, g));
                self.accumulate(*b, |gb| add_into(gb, g));
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::lit(hw as f64);
                self.accumulate(*x, |gx| {
                    for (plane, &gp) in g.iter().enumerate() {
                        for v in &mut gx[plane * hw..(plane + 1) * hw] {
                            *v += gp * inv;
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let (n, fa) = self.value(*a).dims2()?;
                let fb = self.value(*b).shape()[1];
                self.accumulate(*a, |ga| {
                    for s in 0..n {
                        add_into(&mut ga[s * fa..(s + 1) * fa], &g[s * (fa + fb)..s * (fa + fb) + fa]);
                    }
                });
                self.accumulate(*b, |gb| {
                    for s in 0..n {
                        add_into(
                            &mut gb[s * fb..(s + 1) * fb],
                            &g[s * (fa + fb) + fa..(s + 1) * (fa + fb)],
                        );
                    }
                });
            }
            Op::Bce { z, y } => {
                let zv = self.value(*z).data().to_vec();
                let scale = g[0] / T::lit(zv.len() as f64);
                self.accumulate(*z, |gz| {
                    for i in 0..zv.len() {
                        gz[i] += (sigmoid(zv[i]) - y[i]) * scale;
                    }
                });
            }
            Op::SoftmaxCe { z, target, probs } => {
                let (n, _) = self.value(*z).dims2()?;
                let scale = g[0] / T::lit(n as f64);
                self.accumulate(*z, |gz| {
                    for i in 0..gz.len() {
                        gz[i] += (probs[i] - target[i]) * scale;
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(*x, |gx| {
                    for (v, &w) in gx.iter_mut().zip(weights) {
                        *v += w * g[0];
                    }
                });
            }
        }
        Ok(())
    }
}

fn check_labels<T: Scalar>(labels: &[T]) -> Result<(), NetError> {
    if let Some(bad) = labels
        .iter()
        .find(|&&y| y != T::zero() && y != T::one())
    {
        return Err(NetError::InvalidLabel(bad.as_f64()));
    }
    Ok(())
}

#[inline]
fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// Unfolds `(C, H, W)` into `(C * k * k) x (H * W)` patches with zero padding.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * hw + sy as usize * w..][..w];
                    let sx0 = (x0 as isize + dx) as usize;
                    add_into(&mut dst[sx0..sx0 + (x1 - x0)], &row[y * w + x0..y * w + x1]);
                }
            }
        }
    }
}
