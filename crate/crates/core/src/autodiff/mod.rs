//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose inputs
//! precede it, so node order is already a topological order and the backward
//! sweep is a single reverse pass.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable parameter living outside the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2 {
        input: Var,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity blended into running statistics.
    pub var: Vec<f64>,
}

/// Which statistics a batch-norm node normalizes with.
pub enum BnMode<'a> {
    Train,
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient left by the last [`Graph::backward`] call. Always `None` for
    /// nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Registers an externally owned parameter. Gradients of every node bound
    /// to the same id are summed by [`Graph::param_grads`].
    pub fn param(&mut self, value: Tensor, id: ParamId) -> Var {
        let v = self.push(value, true, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// A gradient-free copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `(id, gradient)` pairs accumulated over every node bound to each id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let g = match self.grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(node.value.shape()),
            };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => out.push((id, g)),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- forward ops -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin || kh != kw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?} incompatible with kernel {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape()
                ),
            ));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d", "kernel larger than padded input"));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(Error::dim("conv2d", "bias length must equal out channels"));
            }
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: cin,
            in_h: h,
            in_w: w,
            out_ch: cout,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
        );
        let shape = vec![b, cout, geom.out_h(), geom.out_w()];
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4("upsample2")?;
        let out = kernels::upsample2_forward(b * c, h, w, self.value(input).data());
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::Upsample2 { input }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(input);
        self.push(value, rg, Op::Relu { input })
    }

    /// Batch normalization over `(batch, height, width)` per channel. In
    /// training mode the observed statistics are returned for the caller to
    /// fold into its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, c, h, w) = self.value(input).dims4("batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim("batch_norm", "affine parameters must have one entry per channel"));
        }
        let plane = h * w;
        let n = b * plane;
        if n == 0 {
            return Err(Error::dim("batch_norm", "needs at least one spatial element"));
        }
        let x = self.value(input).data();
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += x[(bi * c + ch) * plane..(bi * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / n as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics length mismatch"));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], y)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let train = stats.is_some();
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// Concatenates two 4-D tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4("concat")?;
        let (bb, cb, hb, wb) = self.value(b).dims4("concat")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::dim(
                "concat",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&xb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.item();
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} do not conform", ta.shape(), tb.shape()),
            ));
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, node))
    }

    /// Elementwise ops accept equal shapes, or a single-element right operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, rg, Op::MulScalar(a, c))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, rg, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, rg, Op::Exp(a))
    }

    /// `max(a, floor)`; the gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor));
        let rg = self.rg(a);
        self.push(value, rg, Op::ClampMin(a, floor))
    }

    /// Softmax over axis 1 (the channel axis) for rank >= 2, over the only
    /// axis for rank 1.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (outer, c, inner) = softmax_layout(t.shape())?;
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(x[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    let e = (x[base + k * inner] - m).exp();
                    y[base + k * inner] = e;
                    s += e;
                }
                for k in 0..c {
                    y[base + k * inner] /= s;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Mean(a)))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Slice { input: a, axis, start }))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of every node reachable from the scalar `loss`.
    /// Any previous gradients are discarded first, so repeated calls on the
    /// same graph produce identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            self.grads[i] = Some(g);
            for (target, delta) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn shaped_like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape matches value")
    }

    /// Gradient of a right operand that may have been broadcast from one element.
    fn reduce_rhs(&self, b: Var, full: Vec<f64>) -> Tensor {
        if self.value(b).numel() == full.len() {
            self.shaped_like(b, full)
        } else {
            Tensor::new(self.value(b).shape().to_vec(), vec![full.iter().sum()])
                .expect("scalar operand")
        }
    }

    fn rhs_at(&self, b: Var, i: usize) -> f64 {
        let t = self.value(b);
        if t.numel() == 1 {
            t.data()[0]
        } else {
            t.data()[i]
        }
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gd,
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(gi) = grads.input {
                    res.push((*input, self.shaped_like(*input, gi)));
                }
                if let Some(gw) = grads.weight {
                    res.push((*weight, self.shaped_like(*weight, gw)));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    res.push((*b, self.shaped_like(*b, gb)));
                }
            }
            Op::Upsample2 { input } => {
                let (b, c, h, w) = self.value(*input).dims4("upsample2")?;
                res.push((
                    *input,
                    self.shaped_like(*input, kernels::upsample2_backward(b * c, h, w, gd)),
                ));
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let d = x.iter().zip(gd).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                res.push((*input, self.shaped_like(*input, d)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (b, c, h, w) = self.value(*input).dims4("batch_norm")?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for k in off..off + plane {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + plane {
                                dx[k] = if *train {
                                    scale * (gd[k] - dbeta[ch] / n - xhat[k] * dgamma[ch] / n)
                                } else {
                                    scale * gd[k]
                                };
                            }
                        }
                    }
                    res.push((*input, self.shaped_like(*input, dx)));
                }
                res.push((*gamma, self.shaped_like(*gamma, dgamma)));
                res.push((*beta, self.shaped_like(*beta, dbeta)));
            }
            Op::Concat { a, b } => {
                let (bsz, ca, h, w) = self.value(*a).dims4("concat")?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(bsz * ca * plane);
                let mut gb = Vec::with_capacity(bsz * cb * plane);
                for bi in 0..bsz {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&gd[base..base + ca * plane]);
                    gb.extend_from_slice(&gd[base + ca * plane..base + (ca + cb) * plane]);
                }
                res.push((*a, self.shaped_like(*a, ga)));
                res.push((*b, self.shaped_like(*b, gb)));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, self.reduce_rhs(*b, gd.to_vec())));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, self.reduce_rhs(*b, gd.iter().map(|v| -v).collect())));
            }
            Op::Mul(a, b) => {
                let xa = self.value(*a).data();
                if self.rg(*a) {
                    let d = gd.iter().enumerate().map(|(k, g)| g * self.rhs_at(*b, k)).collect();
                    res.push((*a, self.shaped_like(*a, d)));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(xa).map(|(g, x)| g * x).collect();
                    res.push((*b, self.reduce_rhs(*b, d)));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().enumerate().map(|(k, g)| g / self.rhs_at(*b, k)).collect();
                    res.push((*a, self.shaped_like(*a, d)));
                }
                if self.rg(*b) {
                    let d = gd
                        .iter()
                        .zip(out)
                        .enumerate()
                        .map(|(k, (g, y))| -g * y / self.rhs_at(*b, k))
                        .collect();
                    res.push((*b, self.reduce_rhs(*b, d)));
                }
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::MulScalar(a, c) => res.push((*a, g.map(|v| v * c))),
            Op::Log(a) => {
                let x = self.value(*a).data();
                res.push((*a, self.shaped_like(*a, gd.iter().zip(x).map(|(g, x)| g / x).collect())));
            }
            Op::Exp(a) => {
                res.push((*a, self.shaped_like(*a, gd.iter().zip(out).map(|(g, y)| g * y).collect())));
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| if *x > *floor { *g } else { 0.0 }).collect();
                res.push((*a, self.shaped_like(*a, d)));
            }
            Op::Softmax(a) => {
                let (outer, c, inner) = softmax_layout(node.value.shape())?;
                let mut d = vec![0.0; gd.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let base = o * c * inner + p;
                        let dot: f64 = (0..c).map(|k| gd[base + k * inner] * out[base + k * inner]).sum();
                        for k in 0..c {
                            let idx = base + k * inner;
                            d[idx] = out[idx] * (gd[idx] - dot);
                        }
                    }
                }
                res.push((*a, self.shaped_like(*a, d)));
            }
            Op::Sum(a) => {
                res.push((*a, Tensor::full(self.value(*a).shape(), gd[0])));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                res.push((*a, Tensor::full(self.value(*a).shape(), gd[0] / n)));
            }
            Op::Slice { input, axis, start } => {
                let shape = self.value(*input).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let dst = o * shape[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                res.push((*input, self.shaped_like(*input, d)));
            }
        }
        Ok(res)
    }
}

fn softmax_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (outer, c, inner) = match shape.len() {
        0 => return Err(Error::domain("softmax", "scalar has no class axis")),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    };
    if c == 0 {
        return Err(Error::domain("softmax", "empty channel axis"));
    }
    Ok((outer, c, inner))
}
