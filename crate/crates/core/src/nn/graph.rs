//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op as it runs. `backward` walks the tape in
//! reverse creation order, so gradient accumulation order is fixed and
//! results are reproducible bit for bit. Convolutions process batch items
//! one at a time, which keeps each item's result independent of its
//! position in the batch.

use super::kernels::{col2im, gemm, im2col, order_free_sum, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        groups: usize,
        cols: Vec<f32>,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Silu(Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SumBatch {
        x: Var,
        scale: f32,
    },
    RepeatBatch(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of a batch-normalised input.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulate operations executed so far by convolutions and
    /// linear layers.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the graph, returning the value of `v`.
    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A leaf holding `value`. Gradients are collected for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// 2D convolution with zero padding. `w` is `Cout x Cin/groups x k x k`,
    /// `b` (if any) is `1 x Cout x 1 x 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let [n, cin, h, wd] = xs;
        let [cout, cpg, k, k2] = ws;
        if k != k2 || groups == 0 || cin != cpg * groups || cout % groups != 0 {
            return Err(Error::shape(
                format!("weight [_, {}, k, k] for {cin} inputs in {groups} groups", cin / groups.max(1)),
                ws,
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!("input of at least {k}x{k}"), xs));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [1, cout, 1, 1] {
                return Err(Error::shape([1, cout, 1, 1], self.value(b).shape()));
            }
        }
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (rows, p) = (geom.rows(), geom.cols());
        let opg = cout / groups;
        let rows_g = cpg * k * k;
        let requires_grad = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));

        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = vec![0.0; if requires_grad { n * rows * p } else { rows * p }];
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for s in 0..n {
                let buf = if requires_grad {
                    &mut cols[s * rows * p..(s + 1) * rows * p]
                } else {
                    &mut cols[..]
                };
                im2col(xv.sample(s), &geom, buf);
                let o = &mut out.data_mut()[s * cout * p..(s + 1) * cout * p];
                for gi in 0..groups {
                    gemm(
                        opg,
                        rows_g,
                        p,
                        &wv[gi * opg * rows_g..],
                        false,
                        &buf[gi * rows_g * p..],
                        false,
                        &mut o[gi * opg * p..(gi + 1) * opg * p],
                        0.0,
                    );
                }
                if let Some(b) = b {
                    let bv = self.nodes[b.0].value.data();
                    for (c, plane) in o.chunks_mut(p).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        self.macs += (n * cout * rows_g * p) as u64;
        if !requires_grad {
            cols = Vec::new();
        }
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                geom,
                groups,
                cols,
            },
            requires_grad,
        ))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.map(x, Op::LeakyRelu(x, slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for plane in 0..n * c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[plane * 4 * h * w + y * 2 * w + xx] = src[plane * h * w + (y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(sa, sb));
        }
        let [n, ca, h, w] = sa;
        let cb = sb[1];
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        {
            let (av, bv) = (self.value(a), self.value(b));
            let la = av.sample_len();
            let lb = bv.sample_len();
            let dst = out.data_mut();
            for s in 0..n {
                dst[s * (la + lb)..s * (la + lb) + la].copy_from_slice(av.sample(s));
                dst[s * (la + lb) + la..(s + 1) * (la + lb)].copy_from_slice(bv.sample(s));
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|v| self.value(*v).clone()).collect();
        let out = Tensor::stack(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatBatch(parts.to_vec()), rg))
    }

    /// Reduces the batch axis to a single item by an order-independent sum,
    /// optionally scaled (`1/N` gives the mean).
    pub fn sum_batch(&mut self, x: Var, mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        if n == 0 {
            return Err(Error::EmptySupport);
        }
        let items: Vec<&[f32]> = (0..n).map(|s| xv.sample(s)).collect();
        let mut out = Tensor::zeros([1, c, h, w]);
        order_free_sum(&items, out.data_mut());
        let scale = if mean { 1.0 / n as f32 } else { 1.0 };
        if mean {
            out.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SumBatch { x, scale }, rg))
    }

    /// Repeats a single-item tensor `n` times along the batch axis.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.n() != 1 {
            return Err(Error::shape("batch of 1", xv.shape()));
        }
        let [_, c, h, w] = xv.shape();
        let mut data = Vec::with_capacity(n * xv.numel());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_vec([n, c, h, w], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::RepeatBatch(x), rg))
    }

    /// Batch normalisation. With `running = None` the batch's own
    /// statistics are used and returned; otherwise the given running
    /// mean/variance are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, c, 1, 1] {
                return Err(Error::shape([1, c, 1, 1], self.value(p).shape()));
            }
        }
        let hw = h * w;
        let m = (n * hw) as f32;
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        let off = s * c * hw + ch * hw;
                        acc += xv.data()[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let off = s * c * hw + ch * hw;
                        sq += xv.data()[off..off + hw]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / m as f64) as f32;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut out = Tensor::zeros(xv.shape());
        for s in 0..n {
            for ch in 0..c {
                let off = s * c * hw + ch * hw;
                for i in off..off + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data_mut()[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    /// Multiplies by a precomputed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape(xv.numel(), mask.len()));
        }
        let mut out = xv.clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let hw = (h * w) as f32;
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for (i, plane) in xv.data().chunks(h * w).enumerate() {
            out.data_mut()[i] = plane.iter().sum::<f32>() / hw;
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Fully connected layer on `N x In x 1 x 1` input; `w` is
    /// `Out x In x 1 x 1`, `b` is `1 x Out x 1 x 1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).shape();
        let [cout, win, _, _] = self.value(w).shape();
        if h != 1 || wd != 1 || win != cin {
            return Err(Error::shape([n, win, 1, 1], [n, cin, h, wd]));
        }
        let mut out = Tensor::zeros([n, cout, 1, 1]);
        gemm(
            n,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            0.0,
        );
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cout) {
            row.iter_mut().zip(&bv).for_each(|(v, b)| *v += b);
        }
        self.macs += (n * cin * cout) as u64;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Scales each channel of `x` (`N x C x H x W`) by `s` (`N x C x 1 x 1`).
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if self.value(s).shape() != [n, c, 1, 1] {
            return Err(Error::shape([n, c, 1, 1], self.value(s).shape()));
        }
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Gradient of the seeded outputs with respect to `v`, after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from one or more seeded outputs. Each seed gives the
    /// gradient of the scalar objective with respect to that node.
    pub fn backward(&mut self, seeds: Vec<(Var, Tensor)>) -> Result<()> {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(Error::shape(self.value(v).shape(), g.shape()));
            }
            self.accumulate(v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, dy: &Tensor) {
        // Temporarily take the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                groups,
                cols,
            } => self.backprop_conv(dy, *x, *w, *b, geom, *groups, cols),
            Op::Relu(x) => {
                let g = zip_map(dy, self.value(*x), |d, x| if x > 0.0 { d } else { 0.0 });
                self.accumulate(*x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let g = zip_map(dy, self.value(*x), |d, x| if x > 0.0 { d } else { s * d });
                self.accumulate(*x, g);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let g = zip_map(dy, y, |d, y| d * y * (1.0 - y));
                self.accumulate(*x, g);
            }
            Op::Silu(x) => {
                let g = zip_map(dy, self.value(*x), |d, x| {
                    let s = sigmoid(x);
                    d * (s + x * s * (1.0 - s))
                });
                self.accumulate(*x, g);
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut g = Tensor::zeros([n, c, h, w]);
                let src = dy.data();
                let dst = g.data_mut();
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[plane * h * w + (y / 2) * w + xx / 2] += src[plane * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(*x, g);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut ga = Vec::with_capacity(sa[0] * la);
                let mut gb = Vec::with_capacity(sb[0] * lb);
                for s in 0..sa[0] {
                    let item = dy.sample(s);
                    ga.extend_from_slice(&item[..la]);
                    gb.extend_from_slice(&item[la..]);
                }
                self.accumulate(*a, Tensor::from_vec(sa, ga).expect("shape"));
                self.accumulate(*b, Tensor::from_vec(sb, gb).expect("shape"));
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape();
                    let len: usize = shape.iter().product();
                    let g = Tensor::from_vec(shape, dy.data()[offset..offset + len].to_vec())
                        .expect("shape");
                    offset += len;
                    self.accumulate(*p, g);
                }
            }
            Op::SumBatch { x, scale } => {
                let n = self.value(*x).n();
                let mut data = Vec::with_capacity(n * dy.numel());
                for _ in 0..n {
                    data.extend(dy.data().iter().map(|d| d * scale));
                }
                let g = Tensor::from_vec(self.value(*x).shape(), data).expect("shape");
                self.accumulate(*x, g);
            }
            Op::RepeatBatch(x) => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for s in 0..dy.n() {
                    g.data_mut()
                        .iter_mut()
                        .zip(dy.sample(s))
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(*x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = self.value(*x).shape();
                let hw = h * w;
                let m = (n * hw) as f32;
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * c * hw + ch * hw;
                        for j in off..off + hw {
                            dgamma[ch] += dy.data()[j] * xhat[j];
                            dbeta[ch] += dy.data()[j];
                        }
                    }
                }
                let mut dx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let off = s * c * hw + ch * hw;
                        let k = gv[ch] * inv_std[ch];
                        for j in off..off + hw {
                            dx.data_mut()[j] = if *batch_stats {
                                k / m * (m * dy.data()[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            } else {
                                k * dy.data()[j]
                            };
                        }
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, Tensor::from_vec([1, c, 1, 1], dgamma).expect("shape"));
                self.accumulate(*beta, Tensor::from_vec([1, c, 1, 1], dbeta).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let mut g = dy.clone();
                g.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                self.accumulate(*x, g);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let mut g = Tensor::zeros(shape);
                for (plane, d) in g.data_mut().chunks_mut(hw).zip(dy.data()) {
                    plane.iter_mut().for_each(|v| *v = d / hw as f32);
                }
                self.accumulate(*x, g);
            }
            Op::Linear { x, w, b } => {
                let [n, cin, _, _] = self.value(*x).shape();
                let cout = self.value(*w).n();
                let mut dw = Tensor::zeros(self.value(*w).shape());
                gemm(cout, n, cin, dy.data(), true, self.value(*x).data(), false, dw.data_mut(), 0.0);
                let mut dx = Tensor::zeros(self.value(*x).shape());
                gemm(n, cout, cin, dy.data(), false, self.value(*w).data(), false, dx.data_mut(), 0.0);
                let mut db = Tensor::zeros([1, cout, 1, 1]);
                for row in dy.data().chunks(cout) {
                    db.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*x, dx);
                self.accumulate(*w, dw);
                self.accumulate(*b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy.clone());
                self.accumulate(*b, dy.clone());
            }
            Op::ScaleChannels { x, s } => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let sv = self.value(*s).data().to_vec();
                let mut dx = dy.clone();
                let mut ds = Tensor::zeros(self.value(*s).shape());
                for (i, (dplane, xplane)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(self.value(*x).data().chunks(hw))
                    .enumerate()
                {
                    let mut acc = 0.0;
                    for (d, xv) in dplane.iter_mut().zip(xplane) {
                        acc += *d * xv;
                        *d *= sv[i];
                    }
                    ds.data_mut()[i] = acc;
                }
                self.accumulate(*x, dx);
                self.accumulate(*s, ds);
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &mut self,
        dy: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeometry,
        groups: usize,
        cols: &[f32],
    ) {
        let n = self.value(x).n();
        let wshape = self.value(w).shape();
        let cout = wshape[0];
        let opg = cout / groups;
        let rows_g = wshape[1] * wshape[2] * wshape[3];
        let (rows, p) = (geom.rows(), geom.cols());
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        let mut dw = Tensor::zeros(wshape);
        let mut dx = Tensor::zeros(self.value(x).shape());
        let mut db = vec![0.0f32; cout];
        let mut dcols = vec![0.0f32; rows * p];
        let wv = self.value(w).data().to_vec();
        for s in 0..n {
            let d = dy.sample(s);
            let c = &cols[s * rows * p..(s + 1) * rows * p];
            for (ch, plane) in d.chunks(p).enumerate() {
                db[ch] += plane.iter().sum::<f32>();
            }
            for gi in 0..groups {
                let dg = &d[gi * opg * p..(gi + 1) * opg * p];
                if need_w {
                    gemm(
                        opg,
                        p,
                        rows_g,
                        dg,
                        false,
                        &c[gi * rows_g * p..],
                        true,
                        &mut dw.data_mut()[gi * opg * rows_g..(gi + 1) * opg * rows_g],
                        1.0,
                    );
                }
                if need_x {
                    gemm(
                        rows_g,
                        opg,
                        p,
                        &wv[gi * opg * rows_g..],
                        true,
                        dg,
                        false,
                        &mut dcols[gi * rows_g * p..(gi + 1) * rows_g * p],
                        0.0,
                    );
                }
            }
            if need_x {
                let len = dx.sample_len();
                col2im(&dcols, geom, &mut dx.data_mut()[s * len..(s + 1) * len]);
            }
        }
        if need_x {
            self.accumulate(x, dx);
        }
        if need_w {
            self.accumulate(w, dw);
        }
        if let Some(b) = b {
            self.accumulate(b, Tensor::from_vec([1, cout, 1, 1], db).expect("shape"));
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn zip_map(dy: &Tensor, x: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = dy.data().iter().zip(x.data()).map(|(&d, &x)| f(d, x)).collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}
