//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Every forward op appends a node holding its output value. `backward`
//! walks the tape in reverse and accumulates gradients for nodes that
//! (transitively) depend on a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Var, geom: ConvGeom, output_padding: usize },
    /// Standardization over contiguous groups; the node value is x̂.
    Norm { x: Var, group: usize, inv_std: Vec<T> },
    /// Per-channel affine with coefficients read from `scale`/`shift` at
    /// `offset`.
    Affine { x: Var, scale: Var, shift: Var, offset: usize },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    MeanAbsDiff { a: Var, b: Var },
    MeanSquaredTo { x: Var, target: T },
    BceLogits { x: Var, target: T },
    WeightedSum { terms: Vec<(Var, T)> },
    Concat { parts: Vec<Var> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameters of one [`ParamStore`] bound into a graph, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Add every tensor of `store` as a leaf. With `trainable == false` the
    /// parameters act as constants.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b), &geom)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, output_padding: usize) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), self.value(b), &geom, output_padding)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            y,
            Op::ConvT {
                x,
                w,
                b,
                geom,
                output_padding,
            },
            rg,
        ))
    }

    /// Per-sample, per-channel standardization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.value(x).dims4();
        self.norm(x, h * w)
    }

    /// Per-sample standardization over channels and spatial axes.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let [_, c, h, w] = self.value(x).dims4();
        self.norm(x, c * h * w)
    }

    fn norm(&mut self, x: Var, group: usize) -> Var {
        let xv = self.value(x);
        let (y, inv_std) = kernels::normalize_groups(xv.data(), group);
        let y = Tensor::from_vec(xv.shape(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Norm { x, group, inv_std }, rg)
    }

    /// `y[n, c] = scale[offset + c] * x[n, c] + shift[offset + c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        let [nb, c, h, w] = xv.dims4();
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        if offset + c > s.len() || offset + c > t.len() {
            return Err(Error::Shape(format!(
                "affine coefficients too short for {c} channels at offset {offset}"
            )));
        }
        let mut y = xv.clone();
        let hw = h * w;
        for n in 0..nb {
            for ch in 0..c {
                let (a, b) = (s[offset + ch], t[offset + ch]);
                let plane = &mut y.data_mut()[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                plane.iter_mut().for_each(|v| *v = a * *v + b);
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            y,
            Op::Affine {
                x,
                scale,
                shift,
                offset,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("L1: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = T::lit(av.len() as f64);
        let s: T = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAbsDiff { a, b }, rg))
    }

    /// `mean((x - target)^2)`.
    pub fn mean_squared_to(&mut self, x: Var, target: f64) -> Var {
        let target = T::lit(target);
        let xv = self.value(x);
        let n = T::lit(xv.len() as f64);
        let s: T = xv.data().iter().map(|&v| (v - target) * (v - target)).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::MeanSquaredTo { x, target }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let target = T::lit(target);
        let xv = self.value(x);
        let n = T::lit(xv.len() as f64);
        let s: T = xv
            .data()
            .iter()
            .map(|&v| v.max(T::zero()) - target * v + (-v.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::BceLogits { x, target }, rg)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let s: T = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum { terms }, rg)
    }

    /// Concatenate along the batch axis.
    pub fn concat(&mut self, parts: Vec<Var>) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(y, Op::Concat { parts }, rg))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [nb, c, h, w] = xv.dims4();
        let hw = T::lit((h * w) as f64);
        let data = xv.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / hw).collect();
        let y = Tensor::from_vec(&[nb, c], data).expect("pool shape");
        let rg = self.rg(x);
        self.push(y, Op::GlobalAvgPool { x }, rg)
    }

    /// `[n, in] x [out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (nb, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        if wv.shape() != [fout, fin] || bv.len() != fout {
            return Err(Error::Shape(format!("linear: x {:?}, w {:?}", xv.shape(), wv.shape())));
        }
        let mut y = Tensor::zeros(&[nb, fout]);
        crate::tensor::matmul(nb, fin, fout, xv.data(), false, wv.data(), true, y.data_mut(), T::zero());
        for row in y.data_mut().chunks_mut(fout) {
            row.iter_mut().zip(bv.data()).for_each(|(v, &b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (nb, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != nb || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape("labels do not match logits".into()));
        }
        let probs = softmax_rows(lv.data(), k);
        let loss: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].max(T::min_positive_value()).ln())
            .sum::<T>()
            / T::lit(nb as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let g = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    gy,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                )?;
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let (Some(dw), Some(db)) = (g.dw, g.db) {
                    acc(*w, dw);
                    acc(*b, db);
                }
            }
            Op::ConvT {
                x,
                w,
                b,
                geom,
                output_padding,
            } => {
                let g = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    geom,
                    *output_padding,
                    gy,
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                )?;
                if let Some(dx) = g.dx {
                    acc(*x, dx);
                }
                if let (Some(dw), Some(db)) = (g.dw, g.db) {
                    acc(*w, dw);
                    acc(*b, db);
                }
            }
            Op::Norm { x, group, inv_std } => {
                let dx = kernels::normalize_groups_backward(node.value.data(), inv_std, gy.data(), *group);
                acc(*x, Tensor::from_vec(node.value.shape(), dx)?);
            }
            Op::Affine {
                x,
                scale,
                shift,
                offset,
            } => {
                let xv = self.value(*x);
                let [nb, c, h, w] = xv.dims4();
                let hw = h * w;
                let s = self.value(*scale);
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for n in 0..nb {
                        for ch in 0..c {
                            let a = s.data()[offset + ch];
                            dx.data_mut()[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                                .iter_mut()
                                .for_each(|v| *v *= a);
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*scale) || self.rg(*shift) {
                    let mut ds = Tensor::zeros(s.shape());
                    let mut dt = Tensor::zeros(self.value(*shift).shape());
                    for n in 0..nb {
                        for ch in 0..c {
                            let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                            let g = &gy.data()[r.clone()];
                            ds.data_mut()[offset + ch] += g.iter().zip(&xv.data()[r]).map(|(&a, &b)| a * b).sum::<T>();
                            dt.data_mut()[offset + ch] += g.iter().copied().sum::<T>();
                        }
                    }
                    acc(*scale, ds);
                    acc(*shift, dt);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                acc(*x, zip_map(gy, xv, |g, v| if v > T::zero() { g } else { T::zero() }));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                acc(*x, zip_map(gy, xv, |g, v| if v > T::zero() { g } else { g * *slope }));
            }
            Op::Tanh { x } => {
                acc(*x, zip_map(gy, &node.value, |g, y| g * (T::one() - y * y)));
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = gy.item() / T::lit(av.len() as f64);
                let da = zip_map(av, bv, |p, q| {
                    let d = p - q;
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                });
                acc(*b, da.map(|v| -v));
                acc(*a, da);
            }
            Op::MeanSquaredTo { x, target } => {
                let xv = self.value(*x);
                let k = T::lit(2.0) * gy.item() / T::lit(xv.len() as f64);
                acc(*x, xv.map(|v| k * (v - *target)));
            }
            Op::BceLogits { x, target } => {
                let xv = self.value(*x);
                let k = gy.item() / T::lit(xv.len() as f64);
                acc(*x, xv.map(|v| k * (sigmoid(v) - *target)));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(w * gy.item()));
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    acc(p, Tensor::from_vec(pv.shape(), gy.data()[off..off + len].to_vec())?);
                    off += len;
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let [_, _, h, w] = xv.dims4();
                let hw = T::lit((h * w) as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for (plane, &g) in dx.data_mut().chunks_mut(h * w).zip(gy.data()) {
                    plane.iter_mut().for_each(|v| *v = g / hw);
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (nb, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    crate::tensor::matmul(nb, fout, fin, gy.data(), false, wv.data(), false, dx.data_mut(), T::zero());
                    acc(*x, dx);
                }
                if self.rg(*w) || self.rg(*b) {
                    let mut dw = Tensor::zeros(wv.shape());
                    crate::tensor::matmul(fout, nb, fin, gy.data(), true, xv.data(), false, dw.data_mut(), T::zero());
                    let mut db = Tensor::zeros(&[fout]);
                    for row in gy.data().chunks(fout) {
                        db.data_mut().iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    acc(*w, dw);
                    acc(*b, db);
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let lv = self.value(*logits);
                let (nb, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = gy.item() / T::lit(nb as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::from_vec(lv.shape(), d)?);
            }
        }
        Ok(())
    }

    /// Sign pattern of every non-smooth op input (ReLU, LeakyReLU, L1),
    /// hashed. Two evaluations with equal signatures lie on the same smooth
    /// piece of the computation.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let sign = |v: T| -> u8 {
            if v > T::zero() {
                2
            } else if v < T::zero() {
                0
            } else {
                1
            }
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => {
                    self.value(*x).data().iter().for_each(|&v| sign(v).hash(&mut h));
                }
                Op::MeanAbsDiff { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    av.data().iter().zip(bv.data()).for_each(|(&p, &q)| sign(p - q).hash(&mut h));
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes")
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn softmax_rows<T: Float>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of a bound store; parameters that the
    /// loss does not reach get zeros.
    pub fn for_store(&self, bound: &Bound, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        bound
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
