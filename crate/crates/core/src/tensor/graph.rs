use super::kernels::{self, ConvGeometry};
use super::{broadcast_index_map, broadcast_shape, sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Sigmoid(Var),
    Relu(Var),
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var, usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        /// Per-pixel softmax probabilities saved from the forward pass.
        probs: Vec<T>,
        /// Per-pixel target class, `None` for ignored pixels.
        targets: Vec<Option<usize>>,
        /// Per-pixel weight already divided by the normalizer.
        scale: Vec<T>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<T>,
        /// Per-element weight already divided by the normalizer.
        scale: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A tape of recorded tensor operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep over the tape is a valid topological order for
/// backpropagation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inputs of the node behind `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        op_inputs(&self.nodes[v.0].op)
    }

    /// Whether `target` is reachable from `from` by following inputs backwards.
    pub fn depends_on(&self, from: Var, target: Var) -> bool {
        let mut stack = vec![from];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if v.0 < target.0 || std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            stack.extend(self.inputs(v));
        }
        false
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        let node = Node {
            value,
            op,
            requires_grad,
            grad: None,
        };
        debug_assert!(
            !op_inputs(&node.op).iter().all(|v| self.nodes[v.0].value.all_finite()) || node.value.all_finite(),
            "non-finite output from finite inputs at node {}",
            id.0
        );
        self.nodes.push(node);
        id
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ------------------------------------------------------------------ ops

    /// 2-D cross-correlation over NCHW input with an `O×C×k×k` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let [n, c_in, h, w] = self.value(input).dims4()?;
        let [c_out, wc, kh, kw] = self.value(weight).dims4().map_err(|_| {
            Error::shape(format!(
                "conv2d weight must be O×C×k×k, got {:?}",
                self.value(weight).shape()
            ))
        })?;
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d channel axis: input has {c_in}, weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel axes differ: {kh}×{kw}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(format!(
                    "conv2d bias axis: expected [{c_out}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(Error::arg("conv2d stride and dilation must be ≥ 1"));
        }
        let span = p.dilation * (kh - 1) + 1;
        let out_dim = |len: usize, axis: &str| -> Result<usize> {
            let padded = len + 2 * p.padding;
            if padded < span {
                return Err(Error::shape(format!(
                    "conv2d {axis} axis: padded size {padded} smaller than kernel span {span}"
                )));
            }
            Ok((padded - span) / p.stride + 1)
        };
        let geom = ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride: p.stride,
            padding: p.padding,
            dilation: p.dilation,
            out_h: out_dim(h, "height")?,
            out_w: out_dim(w, "width")?,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, c_out, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Affine map `N×C · C×D + D`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        let (n, c, d) = match (xs, ws) {
            ([n, c], [wc, d]) if c == wc => (*n, *c, *d),
            _ => {
                return Err(Error::shape(format!(
                    "linear expects N×C input and C×D weight, got {xs:?} and {ws:?}"
                )))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [d] {
                return Err(Error::shape(format!(
                    "linear bias axis: expected [{d}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &mut out[i * d..][..d];
            if let Some(b) = bias {
                row.copy_from_slice(self.value(b).data());
            }
            for k in 0..c {
                let xv = x[i * c + k];
                for (o, &wv) in row.iter_mut().zip(&wt[k * d..][..d]) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.any_grad(&[input, weight]) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean over each H×W plane; output is N×C×1×1.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let hw = h * w;
        let inv: T = sc(1.0 / hw as f64);
        let data = self.value(input).data();
        let out = (0..n * c)
            .map(|p| data[p * hw..][..hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(stable_sigmoid);
        let rg = self.requires_grad(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.max(T::zero()));
        let rg = self.requires_grad(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::arg("upsample factor must be ≥ 1"));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = kernels::upsample_nearest_forward(self.value(input).data(), n * c, h, w, factor);
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::UpsampleNearest(input, factor), rg))
    }

    /// Bilinear upsample with the align-corners-false sampling convention.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::arg("upsample factor must be ≥ 1"));
        }
        let [n, c, h, w] = self.value(input).dims4()?;
        let out = kernels::upsample_bilinear_forward(self.value(input).data(), n * c, h, w, factor);
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::UpsampleBilinear(input, factor), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(va.shape(), &shape);
            let mb = broadcast_index_map(vb.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        let rg = self.requires_grad(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(value, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let value = Tensor::scalar(v.sum() / sc(v.len() as f64));
        let rg = self.requires_grad(input);
        self.push(value, Op::Mean(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Per-pixel softmax cross-entropy over the channel axis of N×C×H×W
    /// logits, returning `Σ weight·(−log p_target) / normalizer` as a scalar.
    /// `targets` holds one entry per pixel (N·H·W, row-major); `None` pixels
    /// contribute nothing. `weights` is per pixel.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<T>,
        normalizer: T,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != n * hw || weights.len() != n * hw {
            return Err(Error::shape(format!(
                "cross-entropy targets cover {} pixels, logits have {}",
                targets.len(),
                n * hw
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::shape(format!("target class {bad} outside {c} logit channels")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let scale: Vec<T> = weights.iter().map(|&wt| wt / normalizer).collect();
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                let m = (0..c).map(|ch| x[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (x[at(ch)] - m).exp();
                    probs[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    probs[at(ch)] = probs[at(ch)] / z;
                }
                if let Some(t) = targets[b * hw + p] {
                    let nll = z.ln() + m - x[at(t)];
                    total += scale[b * hw + p] * nll;
                }
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                scale,
            },
            rg,
        ))
    }

    /// Binary cross-entropy on probabilities clamped to `[eps, 1 − eps]`,
    /// returning `Σ weight·−[y·ln p + (1−y)·ln(1−p)] / normalizer`.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        normalizer: T,
        eps: T,
    ) -> Result<Var> {
        let p = self.value(probs);
        if targets.len() != p.len() || weights.len() != p.len() {
            return Err(Error::shape(format!(
                "binary cross-entropy: {} probabilities vs {} targets",
                p.len(),
                targets.len()
            )));
        }
        let scale: Vec<T> = weights.iter().map(|&wt| wt / normalizer).collect();
        let hi = T::one() - eps;
        let mut total = T::zero();
        for ((&pv, &y), &s) in p.data().iter().zip(&targets).zip(&scale) {
            if s == T::zero() {
                continue;
            }
            let q = pv.max(eps).min(hi);
            total += -s * (y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy {
                probs,
                targets,
                scale,
                eps,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------- backward

    /// Clears all gradients so [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d(root)/d(node) to every node on the tape that requires a
    /// gradient. Gradients accumulate into leaves, so a second call without
    /// [`Graph::zero_grad`] is rejected.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::arg(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if self.backward_done {
            return Err(Error::arg("backward already ran on this graph; call zero_grad first"));
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (var, contrib) in self.local_grads(id, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += *c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad = Some(Tensor { shape, data: g });
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_input = self.requires_grad(*input);
                let (gi, gw, gb) = kernels::conv2d_backward(val(*input), val(*weight), g, geom, need_input);
                let mut out = vec![(*weight, gw)];
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
                out
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.nodes[input.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let d = g.len() / n;
                let (x, wt) = (val(*input), val(*weight));
                let mut gx = vec![T::zero(); n * c];
                let mut gw = vec![T::zero(); c * d];
                for i in 0..n {
                    let grow = &g[i * d..][..d];
                    for k in 0..c {
                        let wrow = &wt[k * d..][..d];
                        gx[i * c + k] = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                        let xv = x[i * c + k];
                        for (acc, &gv) in gw[k * d..][..d].iter_mut().zip(grow) {
                            *acc += xv * gv;
                        }
                    }
                }
                let mut out = vec![(*input, gx), (*weight, gw)];
                if let Some(b) = bias {
                    let mut gb = vec![T::zero(); d];
                    for i in 0..n {
                        for (acc, &gv) in gb.iter_mut().zip(&g[i * d..][..d]) {
                            *acc += gv;
                        }
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let hw = xv.shape()[2] * xv.shape()[3];
                let inv: T = sc(1.0 / hw as f64);
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                vec![(*x, gx)]
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::UpsampleNearest(x, f) => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4().expect("rank checked in forward");
                vec![(*x, kernels::upsample_nearest_backward(g, n * c, h, w, *f))]
            }
            Op::UpsampleBilinear(x, f) => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4().expect("rank checked in forward");
                vec![(*x, kernels::upsample_bilinear_backward(g, n * c, h, w, *f))]
            }
            Op::Add(a, b) => {
                let out_shape = node.value.shape();
                vec![
                    (*a, reduce_broadcast(g, self.nodes[a.0].value.shape(), out_shape, None)),
                    (*b, reduce_broadcast(g, self.nodes[b.0].value.shape(), out_shape, None)),
                ]
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                vec![
                    (*a, reduce_broadcast(g, va.shape(), out_shape, Some(vb))),
                    (*b, reduce_broadcast(g, vb.shape(), out_shape, Some(va))),
                ]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|&gv| gv * *f).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / sc(n as f64); n])]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                scale,
            } => {
                let [n, c, h, w] = self.nodes[logits.0].value.dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut gx = vec![T::zero(); probs.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let Some(t) = targets[b * hw + p] else { continue };
                        let s = scale[b * hw + p] * g[0];
                        for ch in 0..c {
                            let at = (b * c + ch) * hw + p;
                            let onehot = if ch == t { T::one() } else { T::zero() };
                            gx[at] = s * (probs[at] - onehot);
                        }
                    }
                }
                vec![(*logits, gx)]
            }
            Op::BinaryCrossEntropy {
                probs,
                targets,
                scale,
                eps,
            } => {
                let hi = T::one() - *eps;
                let gx = val(*probs)
                    .iter()
                    .zip(targets)
                    .zip(scale)
                    .map(|((&p, &y), &s)| {
                        if s == T::zero() || p < *eps || p > hi {
                            T::zero()
                        } else {
                            g[0] * s * ((T::one() - y) / (T::one() - p) - y / p)
                        }
                    })
                    .collect();
                vec![(*probs, gx)]
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input, weight, bias, ..
        }
        | Op::Linear {
            input, weight, bias, ..
        } => {
            let mut out = vec![*input, *weight];
            out.extend(bias);
            out
        }
        Op::GlobalAvgPool(x)
        | Op::Sigmoid(x)
        | Op::Relu(x)
        | Op::UpsampleNearest(x, _)
        | Op::UpsampleBilinear(x, _)
        | Op::Scale(x, _)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Reshape(x) => vec![*x],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::BinaryCrossEntropy { probs, .. } => vec![*probs],
    }
}

/// Sums `grad` (shaped like `out_shape`) back onto an operand of `src_shape`,
/// optionally multiplying elementwise by the other operand first.
fn reduce_broadcast<T: Scalar>(
    grad: &[T],
    src_shape: &[usize],
    out_shape: &[usize],
    other: Option<&Tensor<T>>,
) -> Vec<T> {
    let n: usize = src_shape.iter().product();
    if src_shape == out_shape {
        return match other {
            None => grad.to_vec(),
            Some(o) if o.shape() == out_shape => grad.iter().zip(o.data()).map(|(&g, &v)| g * v).collect(),
            Some(o) => {
                let map = broadcast_index_map(o.shape(), out_shape);
                grad.iter().zip(&map).map(|(&g, &j)| g * o.data()[j]).collect()
            }
        };
    }
    let map = broadcast_index_map(src_shape, out_shape);
    let other_map = other.map(|o| (o, broadcast_index_map(o.shape(), out_shape)));
    let mut out = vec![T::zero(); n];
    for (i, (&g, &dst)) in grad.iter().zip(&map).enumerate() {
        let v = match &other_map {
            Some((o, m)) => g * o.data()[m[i]],
            None => g,
        };
        out[dst] += v;
    }
    out
}

/// `1 / (1 + e^{-x})` evaluated without overflow for large |x|.
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
