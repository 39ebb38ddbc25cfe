//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a valid topological order. [`Graph::backward`] walks the tape in reverse
//! and visits each node at most once, accumulating gradients by summation
//! over fan-out.
//!
//! Image-like tensors are laid out channel-first (`[C, H, W]`) inside the
//! graph; [`Graph::hwc_to_chw`] converts an `[H, W, C]` input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u64,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, spec: Conv2dSpec },
    Dense { x: usize, w: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    MaxPool2d { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    MaxOver { x: usize, winner: usize },
    Sum(usize),
    Index { x: usize, index: usize },
    Reshape(usize),
    HwcToChw { x: usize, h: usize, w: usize, c: usize },
    BceWithLogits { logits: usize, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat",
            Op::MaxOver { .. } => "reduce_max",
            Op::Sum(_) => "reduce_sum",
            Op::Index { .. } => "index",
            Op::Reshape(_) => "reshape",
            Op::HwcToChw { .. } => "hwc_to_chw",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    generation: u64,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u64,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
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

    /// Drops every node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::GraphFreed);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let id = self.check(v)?;
        Ok(&self.nodes[id].value)
    }

    fn val(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { id: self.nodes.len() - 1, generation: self.generation })
    }

    /// Inserts a leaf. Gradients are reported for leaves with
    /// `requires_grad` and for everything computed from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var { id: self.nodes.len() - 1, generation: self.generation })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// 2-D convolution. `x: [Ci, H, W]`, `w: [Co, Ci, Kh, Kw]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[0] || bs[0] != ws[0] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        if spec.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (s, p) = (spec.stride, spec.pad);
        if h + 2 * p < kh || wd + 2 * p < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let xd = self.val(xi).data();
        let wdt = self.val(wi).data();
        let bd = self.val(bi).data();
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..ci {
                let xplane = &xd[c * h * wd..(c + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdt[((o * ci + c) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (j0, j1) = valid_range(ow, s, kj, p, wd);
                        for r in 0..oh {
                            let ih = (r * s + ki) as isize - p as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                            let orow = &mut plane[r * ow..(r + 1) * ow];
                            for j in j0..j1 {
                                orow[j] += wv * xrow[j * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![co, oh, ow], out)?;
        self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, spec }, &[xi, wi, bi])
    }

    /// Affine layer. `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::shape("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        let xd = self.val(xi).data();
        let wd = self.val(wi).data();
        let bd = self.val(bi).data();
        let out: Vec<f64> = (0..m)
            .map(|r| bd[r] + wd[r * n..(r + 1) * n].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(Tensor::from_vec(out), Op::Dense { x: xi, w: wi, b: bi }, &[xi, wi, bi])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.val(xi).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(xi), &[xi])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.val(xi).map(sigmoid);
        self.push(v, Op::Sigmoid(xi), &[xi])
    }

    /// Max pooling without padding over `[C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.val(xi).shape().to_vec();
        if xs.len() != 3 || size == 0 || stride == 0 || xs[1] < size || xs[2] < size {
            return Err(Error::shape("max_pool2d", format!("x {xs:?}, size {size}, stride {stride}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let xd = self.val(xi).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = (ch * h + r * stride + i) * w + q * stride + j;
                            if xd[idx] > best_v {
                                best_v = xd[idx];
                                best = idx;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push(value, Op::MaxPool2d { x: xi, argmax }, &[xi])
    }

    /// Mean over the spatial dims of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let xs = self.val(xi).shape();
        if xs.len() != 3 || xs[1] * xs[2] == 0 {
            return Err(Error::shape("global_avg_pool", format!("x {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let xd = self.val(xi).data();
        let out = (0..c).map(|ch| xd[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::from_vec(out), Op::GlobalAvgPool(xi), &[xi])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.val(ai).shape(), self.val(bi).shape()),
            ));
        }
        Ok((ai, bi))
    }

    fn zip_with(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "add")?;
        let v = self.zip_with(ai, bi, |x, y| x + y);
        self.push(v, Op::Add(ai, bi), &[ai, bi])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "sub")?;
        let v = self.zip_with(ai, bi, |x, y| x - y);
        self.push(v, Op::Sub(ai, bi), &[ai, bi])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary(a, b, "mul")?;
        let v = self.zip_with(ai, bi, |x, y| x * y);
        self.push(v, Op::Mul(ai, bi), &[ai, bi])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.val(xi).scaled(factor);
        self.push(v, Op::Scale(xi, factor), &[xi])
    }

    /// Concatenates along the leading (channel) axis. Trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = self.val(ids[0]).shape().to_vec();
        if first.is_empty() {
            return Err(Error::shape("concat", "cannot concatenate scalars"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let s = self.val(i).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.val(i).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat(ids.clone()), &ids)
    }

    /// Maximum over the listed flat indices, as a scalar. Ties resolve to the
    /// first listed index.
    pub fn max_over(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let xd = self.val(xi).data();
        if indices.is_empty() {
            return Err(Error::shape("reduce_max", "empty index set"));
        }
        let mut winner = indices[0];
        for &i in indices {
            if i >= xd.len() {
                return Err(Error::OutOfRange { what: "reduce_max", index: i, len: xd.len() });
            }
            if xd[i] > xd[winner] {
                winner = i;
            }
        }
        let v = Tensor::scalar(xd[winner]);
        self.push(v, Op::MaxOver { x: xi, winner }, &[xi])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let v = Tensor::scalar(self.val(xi).data().iter().sum());
        self.push(v, Op::Sum(xi), &[xi])
    }

    /// Selects one element by flat index as a scalar.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let len = self.val(xi).len();
        if index >= len {
            return Err(Error::OutOfRange { what: "index", index, len });
        }
        let v = Tensor::scalar(self.val(xi).data()[index]);
        self.push(v, Op::Index { x: xi, index }, &[xi])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let v = self.val(xi).clone().reshape(shape)?;
        self.push(v, Op::Reshape(xi), &[xi])
    }

    /// `[H, W, C]` to `[C, H, W]`.
    pub fn hwc_to_chw(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.val(xi).shape();
        if s.len() != 3 {
            return Err(Error::shape("hwc_to_chw", format!("x {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let xd = self.val(xi).data();
        let mut out = vec![0.0; h * w * c];
        for r in 0..h {
            for q in 0..w {
                for ch in 0..c {
                    out[(ch * h + r) * w + q] = xd[(r * w + q) * c + ch];
                }
            }
        }
        let v = Tensor::new(vec![c, h, w], out)?;
        self.push(v, Op::HwcToChw { x: xi, h, w, c }, &[xi])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the overflow-safe logits form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let li = self.check(logits)?;
        let z = self.val(li).data();
        if z.len() != targets.len() || z.is_empty() {
            return Err(Error::shape("bce_with_logits", format!("{} logits vs {} targets", z.len(), targets.len())));
        }
        let total: f64 = z.iter().zip(targets).map(|(&z, &t)| bce_logit(z, t)).sum();
        let v = Tensor::scalar(total / z.len() as f64);
        self.push(v, Op::BceWithLogits { logits: li, targets: targets.to_vec() }, &[li])
    }

    /// Gradients of a scalar output with respect to every node that requires
    /// them.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let oi = self.check(out)?;
        if self.val(oi).len() != 1 {
            return Err(Error::NotScalar(self.val(oi).shape().to_vec()));
        }
        self.backward_with_seed(out, Tensor::new(self.val(oi).shape().to_vec(), vec![1.0])?)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back
    /// through the tape.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        let oi = self.check(out)?;
        if seed.shape() != self.val(oi).shape() {
            return Err(Error::shape("backward", format!("seed {:?} vs output {:?}", seed.shape(), self.val(oi).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; oi + 1];
        grads[oi] = Some(seed.into_data());
        for id in (0..=oi).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads, generation: self.generation })
    }

    fn propagate(&self, op: &Op, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(i) {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
            f(slot);
        };
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let xs = self.val(*x).shape();
                let ws = self.val(*w).shape();
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.val(id).shape();
                let (oh, ow) = (os[1], os[2]);
                let (s, p) = (spec.stride, spec.pad);
                let xd = self.val(*x).data();
                let wdt = self.val(*w).data();
                acc(grads, *b, &mut |gb| {
                    for o in 0..co {
                        gb[o] += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
                acc(grads, *w, &mut |gw| {
                    for o in 0..co {
                        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let xplane = &xd[c * h * wd..(c + 1) * h * wd];
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let (j0, j1) = valid_range(ow, s, kj, p, wd);
                                    let mut total = 0.0;
                                    for r in 0..oh {
                                        let ih = (r * s + ki) as isize - p as isize;
                                        if ih < 0 || ih as usize >= h {
                                            continue;
                                        }
                                        let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                                        let grow = &gplane[r * ow..(r + 1) * ow];
                                        for j in j0..j1 {
                                            total += grow[j] * xrow[j * s + kj - p];
                                        }
                                    }
                                    gw[((o * ci + c) * kh + ki) * kw + kj] += total;
                                }
                            }
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for o in 0..co {
                        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                        for c in 0..ci {
                            let gxplane = &mut gx[c * h * wd..(c + 1) * h * wd];
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wv = wdt[((o * ci + c) * kh + ki) * kw + kj];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    let (j0, j1) = valid_range(ow, s, kj, p, wd);
                                    for r in 0..oh {
                                        let ih = (r * s + ki) as isize - p as isize;
                                        if ih < 0 || ih as usize >= h {
                                            continue;
                                        }
                                        let ih = ih as usize;
                                        let grow = &gplane[r * ow..(r + 1) * ow];
                                        let xrow = &mut gxplane[ih * wd..(ih + 1) * wd];
                                        for j in j0..j1 {
                                            xrow[j * s + kj - p] += wv * grow[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let n = self.val(*x).len();
                let m = g.len();
                let xd = self.val(*x).data();
                let wd = self.val(*w).data();
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(a, v)| *a += v));
                acc(grads, *w, &mut |gw| {
                    for r in 0..m {
                        for (c, xv) in xd.iter().enumerate() {
                            gw[r * n + c] += g[r] * xv;
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for r in 0..m {
                        let row = &wd[r * n..(r + 1) * n];
                        for c in 0..n {
                            gx[c] += g[r] * row[c];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.val(*x).data();
                acc(grads, *x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = self.val(id).data();
                acc(grads, *x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                acc(grads, *x, &mut |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.val(*x).shape();
                let hw = s[1] * s[2];
                acc(grads, *x, &mut |gx| {
                    for (ch, gv) in g.iter().enumerate() {
                        let share = gv / hw as f64;
                        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
                acc(grads, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
            }
            Op::Mul(a, b) => {
                let ad = self.val(*a).data();
                let bd = self.val(*b).data();
                acc(grads, *a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(grads, *x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += f * v));
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for &i in ids {
                    let n = self.val(i).len();
                    acc(grads, i, &mut |gi| gi.iter_mut().zip(&g[offset..offset + n]).for_each(|(a, v)| *a += v));
                    offset += n;
                }
            }
            Op::MaxOver { x, winner } => {
                acc(grads, *x, &mut |gx| gx[*winner] += g[0]);
            }
            Op::Sum(x) => {
                acc(grads, *x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Index { x, index } => {
                acc(grads, *x, &mut |gx| gx[*index] += g[0]);
            }
            Op::Reshape(x) => {
                acc(grads, *x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, v)| *a += v));
            }
            Op::HwcToChw { x, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                acc(grads, *x, &mut |gx| {
                    for r in 0..h {
                        for q in 0..w {
                            for ch in 0..c {
                                gx[(r * w + q) * c + ch] += g[(ch * h + r) * w + q];
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.val(*logits).data();
                let n = z.len() as f64;
                acc(grads, *logits, &mut |gz| {
                    for i in 0..gz.len() {
                        gz[i] += g[0] * (sigmoid(z[i]) - targets[i]) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

/// Output columns `j` in `[j0, j1)` whose input column `j*s + kj - p` lies
/// inside `[0, width)`.
fn valid_range(ow: usize, s: usize, kj: usize, p: usize, width: usize) -> (usize, usize) {
    let j0 = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // need j*s + kj - p <= width - 1
    let limit = width + p;
    let j1 = if limit <= kj { 0 } else { ((limit - kj - 1) / s + 1).min(ow) };
    (j0.min(j1), j1)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against target `t`.
pub fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_and_its_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]), true).unwrap();
        let y = g.sigmoid(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.5]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn identity_scaled_conv() {
        let mut g = Graph::new();
        let x4 = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let x = g.reshape(x4, &[1, 2, 2]).unwrap();
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, Conv2dSpec { stride: 1, pad: 0 }).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn conv_stride_and_padding_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 7, 9], 1.0)).unwrap();
        let w = g.constant(Tensor::full(&[3, 2, 3, 3], 1.0)).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.conv2d(x, w, b, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[3, 4, 5]);
        // corner sees a 2x2 window of ones in each of 2 channels
        assert_eq!(g.value(y).unwrap().data()[0], 8.0);
        // interior sees the full 3x3
        assert_eq!(g.value(y).unwrap().data()[5 + 1], 18.0);
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.3, 0.7]), true).unwrap();
        let w = g.constant(Tensor::from_vec(vec![2.0, -1.0])).unwrap();
        let p = g.mul(w, x).unwrap();
        let f = g.sum(p).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0]), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_freed_graph() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.clear();
        assert!(matches!(g.backward(s), Err(Error::GraphFreed)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2])).unwrap();
        let b = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1e300])).unwrap();
        assert!(matches!(g.mul(a, a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0]), true).unwrap();
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn max_pool_routes_to_first_max() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2, 2], &[1.0, 3.0, 3.0, 0.0]), true).unwrap();
        let y = g.max_pool2d(x, 2, 2).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[3.0]);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(vec![0.0, 0.0]), true).unwrap();
        let l = g.bce_with_logits(z, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).unwrap().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[-0.25, 0.25]);
    }

    #[test]
    fn hwc_to_chw_permutes() {
        let mut g = Graph::new();
        // 1x2 image with 3 channels
        let x = g.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.hwc_to_chw(x).unwrap();
        assert_eq!(g.value(y).unwrap().shape(), &[3, 1, 2]);
        assert_eq!(g.value(y).unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
