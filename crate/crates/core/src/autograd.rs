//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Nodes that do not (transitively) depend on a trainable parameter skip
//! gradient computation entirely, which is how frozen sub-networks stay cheap.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom, RoiPlan};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor inside every cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the result of [`Tape::backward_all`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    RoiAlign {
        x: Var,
        plan: RoiPlan,
    },
    Reshape(Var),
    MeanRows(Var),
    SpatialMean(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    CrossEntropyMap {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    CrossEntropyRows {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceLogits {
        x: Var,
        idx: Vec<usize>,
        targets: Vec<T>,
    },
    SmoothL1 {
        x: Var,
        idx: Vec<usize>,
        targets: Vec<T>,
        denom: T,
    },
    SoftmaxDistance {
        a: Var,
        b: Var,
        pa: Vec<T>,
        pb: Vec<T>,
    },
    CosineSim {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Gradients of trainable parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Per-row softmax of a `rows x k` buffer.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Per-location softmax over the channel axis of a `C x h x w` buffer,
/// returned in the same layout.
pub fn softmax_channels<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let hw = x.len() / c;
    let mut out = vec![T::zero(); x.len()];
    for p in 0..hw {
        let mx = (0..c)
            .map(|ch| x[ch * hw + p])
            .fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for ch in 0..c {
            let e = (x[ch * hw + p] - mx).exp();
            out[ch * hw + p] = e;
            s += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= s;
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn floored_nll<T: Scalar>(p: T) -> T {
    -p.max(T::of(CE_EPS)).ln()
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<(ParamId, bool), Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked but not mapped to a parameter
    /// (used by gradient checks on raw inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter. Repeated calls return the same node so gradients
    /// from every use accumulate. `trainable = false` yields a constant copy.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&(id, trainable)) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.param_vars.insert((id, trainable), v);
        v
    }

    /// Parameters inserted as trainable, in ascending id order.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .param_vars
            .keys()
            .filter(|k| k.1)
            .map(|k| k.0)
            .collect();
        ids.sort_by_key(|id| id.index());
        ids
    }

    /// Value-only copy cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects C x H x W input");
        assert_eq!(ws.len(), 4, "conv2d expects O x C x k x k weight");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let g = ConvGeom {
            in_c: xs[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            pad,
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            g,
        );
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::from_vec(&[ws[0], g.out_h(), g.out_w()], y),
            Op::Conv2d { x, w, b, pad },
            grad,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let grad = self.needs(x);
        self.push(y, Op::Relu(x), grad)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (y, argmax) = kernels::maxpool2(self.value(x).data(), s[0], s[1], s[2]);
        let grad = self.needs(x);
        self.push(
            Tensor::from_vec(&[s[0], s[1] / 2, s[2] / 2], y),
            Op::MaxPool2 { x, argmax },
            grad,
        )
    }

    /// `x (N x I) * w (I x O) + b (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2, "linear expects N x I input");
        assert_eq!(xs[1], ws[0], "linear input width mismatch");
        let (n, i, o) = (xs[0], ws[0], ws[1]);
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i,
            1,
            self.value(w).data(),
            o,
            1,
            T::one(),
            &mut y,
            o,
            1,
        );
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_vec(&[n, o], y), Op::Linear { x, w, b }, grad)
    }

    /// Identity forward; scales the incoming gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        assert!(
            lambda >= 0.0,
            "gradient reversal coefficient must be non-negative"
        );
        let y = self.value(x).clone();
        let grad = self.needs(x);
        self.push(y, Op::Grl { x, lambda }, grad)
    }

    /// Identity forward; scales the incoming gradient by `lambda` (two
    /// stacked reversals).
    pub fn scale_grad(&mut self, x: Var, lambda: f64) -> Var {
        let r = self.grl(x, 1.0);
        self.grl(r, lambda)
    }

    /// Pools `boxes` (image coordinates) from a `C x h x w` feature into `R x (C*k*k)`.
    pub fn roi_align(&mut self, x: Var, boxes: &[[f64; 4]], scale: f64, out_size: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        let plan = kernels::roi_align_plan(boxes, scale, s[1], s[2], out_size);
        let y = kernels::roi_align_forward(self.value(x).data(), s[0], &plan);
        let grad = self.needs(x);
        self.push(
            Tensor::from_vec(&[boxes.len(), s[0] * out_size * out_size], y),
            Op::RoiAlign { x, plan },
            grad,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape);
        let grad = self.needs(x);
        self.push(y, Op::Reshape(x), grad)
    }

    /// Column means of an `N x D` matrix, as a `D` vector.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (n, d) = (s[0], s[1]);
        assert!(n > 0, "mean_rows of an empty matrix");
        let mut y = vec![T::zero(); d];
        for r in self.value(x).data().chunks(d) {
            for (a, &v) in y.iter_mut().zip(r) {
                *a += v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        y.iter_mut().for_each(|v| *v *= inv);
        let grad = self.needs(x);
        self.push(Tensor::from_vec(&[d], y), Op::MeanRows(x), grad)
    }

    /// Spatial average of a `C x h x w` map, as a `C` vector.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let hw = s[1] * s[2];
        let inv = T::one() / T::of(hw as f64);
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let grad = self.needs(x);
        self.push(Tensor::from_vec(&[s[0]], y), Op::SpatialMean(x), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let grad = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(&self.value(b).scale(-T::one()));
        let grad = self.needs(a) || self.needs(b);
        self.push(y, Op::Sub(a, b), grad)
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v + c);
        let grad = self.needs(x);
        self.push(y, Op::AddConst(x), grad)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).scale(c);
        let grad = self.needs(x);
        self.push(y, Op::Scale(x, c), grad)
    }

    /// Sum of scalar nodes; an empty list yields a constant zero.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(Tensor::scalar(T::zero())),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Mean over spatial locations of the cross-entropy between a `K x h x w`
    /// logit map and a single class label.
    pub fn cross_entropy_map(&mut self, logits: Var, label: usize) -> Var {
        let s = self.value(logits).shape().to_vec();
        let k = s[0];
        assert!(label < k, "label {label} out of range for {k} classes");
        let hw = self.value(logits).len() / k;
        let probs = softmax_channels(self.value(logits).data(), k);
        let loss: T = (0..hw)
            .map(|p| floored_nll(probs[label * hw + p]))
            .sum::<T>()
            / T::of(hw as f64);
        let grad = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMap {
                logits,
                label,
                probs,
            },
            grad,
        )
    }

    /// Mean cross-entropy of an `N x K` logit matrix against per-row labels.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.value(logits).shape().to_vec();
        let (n, k) = (s[0], s[1]);
        assert_eq!(n, labels.len(), "one label per row");
        let probs = softmax_rows(self.value(logits).data(), k);
        let loss = if n == 0 {
            T::zero()
        } else {
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| floored_nll(probs[r * k + l]))
                .sum::<T>()
                / T::of(n as f64)
        };
        let grad = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            grad,
        )
    }

    /// Mean binary cross-entropy of the selected logits (flat indices into `x`).
    pub fn bce_logits(&mut self, x: Var, idx: &[usize], targets: &[T]) -> Var {
        assert_eq!(idx.len(), targets.len());
        let xv = self.value(x).data();
        let loss = if idx.is_empty() {
            T::zero()
        } else {
            idx.iter()
                .zip(targets)
                .map(|(&i, &t)| {
                    let p = sigmoid(xv[i]);
                    t * floored_nll(p) + (T::one() - t) * floored_nll(T::one() - p)
                })
                .sum::<T>()
                / T::of(idx.len() as f64)
        };
        let grad = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
            },
            grad,
        )
    }

    /// `sum_i smooth_l1(x[idx_i] - targets_i) / denom` with unit transition point.
    pub fn smooth_l1(&mut self, x: Var, idx: &[usize], targets: &[T], denom: f64) -> Var {
        assert_eq!(idx.len(), targets.len());
        assert!(denom > 0.0);
        let xv = self.value(x).data();
        let denom = T::of(denom);
        let loss = idx
            .iter()
            .zip(targets)
            .map(|(&i, &t)| smooth_l1_value(xv[i] - t))
            .sum::<T>()
            / denom;
        let grad = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                x,
                idx: idx.to_vec(),
                targets: targets.to_vec(),
                denom,
            },
            grad,
        )
    }

    /// Spatial mean of the squared Euclidean distance between the per-location
    /// channel softmaxes of two `K x h x w` logit maps.
    pub fn softmax_distance(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        assert_eq!(sa, self.value(b).shape(), "softmax_distance shape mismatch");
        let k = sa[0];
        let hw = self.value(a).len() / k;
        let pa = softmax_channels(self.value(a).data(), k);
        let pb = softmax_channels(self.value(b).data(), k);
        let d = pa
            .iter()
            .zip(&pb)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::of(hw as f64);
        let grad = self.needs(a) || self.needs(b);
        self.push(
            Tensor::scalar(d),
            Op::SoftmaxDistance { a, b, pa, pb },
            grad,
        )
    }

    /// Cosine similarity of two equal-length vectors; zero if either is zero.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "cosine_sim length mismatch"
        );
        let s = cosine_value(self.value(a).data(), self.value(b).data());
        let grad = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::CosineSim { a, b }, grad)
    }

    /// Back-propagates from scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads = self.backward_all(loss);
        let n_params = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(id) => Some(id.index() + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut out = vec![None; n_params];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                out[id.index()] = grads[i].take();
            }
        }
        Gradients { grads: out }
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    pub fn backward_all(&self, loss: Var) -> Vec<Option<Tensor<T>>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return grads;
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let geom = ConvGeom {
                    in_c: xs[0],
                    h: xs[1],
                    w: xs[2],
                    k: ws[2],
                    pad: *pad,
                };
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    geom,
                    ws[0],
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx));
                }
                self.accumulate(grads, *w, Tensor::from_vec(ws, cg.dw));
                self.accumulate(grads, *b, Tensor::from_vec(&[ws[0]], cg.db));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), d));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&a, &g) in argmax.iter().zip(gd) {
                    d[a as usize] += g;
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), d));
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, inp) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * inp];
                    // dX = dY * W^T
                    T::gemm(
                        n,
                        o,
                        inp,
                        T::one(),
                        gd,
                        o,
                        1,
                        self.value(*w).data(),
                        1,
                        o,
                        T::zero(),
                        &mut dx,
                        inp,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); inp * o];
                    // dW = X^T * dY
                    T::gemm(
                        inp,
                        n,
                        o,
                        T::one(),
                        self.value(*x).data(),
                        1,
                        inp,
                        gd,
                        o,
                        1,
                        T::zero(),
                        &mut dw,
                        o,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[inp, o], dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for r in gd.chunks(o) {
                        for (a, &v) in db.iter_mut().zip(r) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
            }
            Op::Grl { x, lambda } => {
                self.accumulate(grads, *x, g.scale(T::of(-lambda)));
            }
            Op::RoiAlign { x, plan } => {
                let s = self.value(*x).shape();
                let dx = kernels::roi_align_backward(gd, s[0], plan);
                self.accumulate(grads, *x, Tensor::from_vec(s, dx));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape();
                self.accumulate(grads, *x, g.clone().reshape(s));
            }
            Op::MeanRows(x) => {
                let s = self.value(*x).shape();
                let inv = T::one() / T::of(s[0] as f64);
                let mut d = Vec::with_capacity(s[0] * s[1]);
                for _ in 0..s[0] {
                    d.extend(gd.iter().map(|&v| v * inv));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, d));
            }
            Op::SpatialMean(x) => {
                let s = self.value(*x).shape();
                let hw = s[1] * s[2];
                let inv = T::one() / T::of(hw as f64);
                let mut d = Vec::with_capacity(s[0] * hw);
                for &v in gd {
                    d.extend(std::iter::repeat_n(v * inv, hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::CrossEntropyMap {
                logits,
                label,
                probs,
            } => {
                let s = self.value(*logits).shape();
                let k = s[0];
                let hw = probs.len() / k;
                let scale = gd[0] / T::of(hw as f64);
                let eps = T::of(CE_EPS);
                let mut d = vec![T::zero(); probs.len()];
                for p in 0..hw {
                    if probs[*label * hw + p] <= eps {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == *label { T::one() } else { T::zero() };
                        d[c * hw + p] = (probs[c * hw + p] - onehot) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(s, d));
            }
            Op::CrossEntropyRows {
                logits,
                labels,
                probs,
            } => {
                let s = self.value(*logits).shape();
                let k = s[1];
                let n = labels.len();
                let mut d = vec![T::zero(); probs.len()];
                if n > 0 {
                    let scale = gd[0] / T::of(n as f64);
                    let eps = T::of(CE_EPS);
                    for (r, &l) in labels.iter().enumerate() {
                        if probs[r * k + l] <= eps {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c == l { T::one() } else { T::zero() };
                            d[r * k + c] = (probs[r * k + c] - onehot) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(s, d));
            }
            Op::BceLogits { x, idx, targets } => {
                let xv = self.value(*x).data();
                let mut d = vec![T::zero(); xv.len()];
                if !idx.is_empty() {
                    let scale = gd[0] / T::of(idx.len() as f64);
                    let eps = T::of(CE_EPS);
                    for (&i, &t) in idx.iter().zip(targets) {
                        let p = sigmoid(xv[i]);
                        // d/dx of -t ln p - (1-t) ln(1-p), honouring the floor.
                        let pos = if p > eps {
                            -t * (T::one() - p)
                        } else {
                            T::zero()
                        };
                        let neg = if T::one() - p > eps {
                            (T::one() - t) * p
                        } else {
                            T::zero()
                        };
                        let dp = pos + neg;
                        d[i] += dp * scale;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), d));
            }
            Op::SmoothL1 {
                x,
                idx,
                targets,
                denom,
            } => {
                let xv = self.value(*x).data();
                let mut d = vec![T::zero(); xv.len()];
                let scale = gd[0] / *denom;
                for (&i, &t) in idx.iter().zip(targets) {
                    let r = xv[i] - t;
                    let dr = if r.abs() < T::one() { r } else { r.signum() };
                    d[i] += dr * scale;
                }
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), d));
            }
            Op::SoftmaxDistance { a, b, pa, pb } => {
                let s = self.value(*a).shape();
                let k = s[0];
                let hw = pa.len() / k;
                let two = T::of(2.0) * gd[0] / T::of(hw as f64);
                // dL/dp = 2 (pa - pb) / hw, then through each softmax Jacobian.
                let mut da = vec![T::zero(); pa.len()];
                let mut db = vec![T::zero(); pb.len()];
                for p in 0..hw {
                    let mut dot_a = T::zero();
                    let mut dot_b = T::zero();
                    for c in 0..k {
                        let gp = two * (pa[c * hw + p] - pb[c * hw + p]);
                        dot_a += pa[c * hw + p] * gp;
                        dot_b += pb[c * hw + p] * (-gp);
                    }
                    for c in 0..k {
                        let gp = two * (pa[c * hw + p] - pb[c * hw + p]);
                        da[c * hw + p] = pa[c * hw + p] * (gp - dot_a);
                        db[c * hw + p] = pb[c * hw + p] * (-gp - dot_b);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(s, da));
                self.accumulate(grads, *b, Tensor::from_vec(s, db));
            }
            Op::CosineSim { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let na = av.iter().map(|&v| v * v).sum::<T>().sqrt();
                let nb = bv.iter().map(|&v| v * v).sum::<T>().sqrt();
                let shape = self.value(*a).shape();
                if na == T::zero() || nb == T::zero() {
                    return;
                }
                let s = cosine_value(av, bv);
                let inv = T::one() / (na * nb);
                let da: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| gd[0] * (y * inv - s * x / (na * na)))
                    .collect();
                let db: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| gd[0] * (x * inv - s * y / (nb * nb)))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(shape, da));
                self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
            }
        }
    }
}

pub fn smooth_l1_value<T: Scalar>(r: T) -> T {
    let a = r.abs();
    if a < T::one() {
        T::of(0.5) * r * r
    } else {
        a - T::of(0.5)
    }
}

/// `a.b / (|a| |b|)`, defined as zero when either vector is zero.
pub fn cosine_value<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grl_forward_identity_backward_flip() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]));
        let y = t.grl(x, 1.0);
        assert_eq!(t.value(y), t.value(x));
        let w = t.constant(Tensor::full(&[3, 1], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let sum = t.linear(y, w, b);
        let sum = t.reshape(sum, &[]);
        let g = t.backward_all(sum);
        assert_eq!(g[x.0].as_ref().unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn frozen_branch_gets_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_f64(&[2], &[1.0, 2.0]));
        let b = t.input(Tensor::from_f64(&[2], &[0.5, 0.1]));
        let s = t.cosine_sim(a, b);
        let g = t.backward_all(s);
        assert!(g[a.0].is_none());
        assert!(g[b.0].is_some());
    }

    #[test]
    fn zero_vector_cosine_is_zero_without_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.input(Tensor::zeros(&[3]));
        let b = t.input(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
        let s = t.cosine_sim(a, b);
        assert_eq!(t.scalar(s), 0.0);
        let g = t.backward_all(s);
        assert!(g[a.0].is_none() && g[b.0].is_none());
    }
}
