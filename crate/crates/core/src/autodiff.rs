//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op evaluates eagerly, appends a node holding its output value, and
//! remembers which earlier nodes it read. [`Tape::backward`] walks the nodes
//! in reverse, accumulating gradients additively, so a leaf used several
//! times (a parameter shared across recurrent iterations) receives the sum
//! of all its contributions.

use crate::error::{Error, Result};
use crate::ops::{conv, loss, norm, pool};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        stats: norm::GroupStats,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Blend {
        z: Var,
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Bce {
        logits: Var,
        target: Tensor<T>,
    },
    SoftmaxCe {
        logits: Var,
        classes: Vec<usize>,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of executed ops. Cleared by [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands checked for equal shape")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = pool::maxpool2x2(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (out, stats) = norm::group_norm(self.value(x), groups, self.value(scale), self.value(shift), eps)?;
        let rg = self.any_grad(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::from_f64_lossy(loss::sigmoid(v.as_f64())));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = loss::softmax_channels(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `z * a + (1 - z) * b`, elementwise.
    pub fn affine_blend(&mut self, z: Var, a: Var, b: Var) -> Result<Var> {
        same_shape("affine_blend", self.value(z), self.value(a))?;
        same_shape("affine_blend", self.value(z), self.value(b))?;
        let (zv, av, bv) = (self.value(z), self.value(a), self.value(b));
        let data = zv
            .data()
            .iter()
            .zip(av.data())
            .zip(bv.data())
            .map(|((&g, &x), &y)| g * x + (T::one() - g) * y)
            .collect();
        let out = Tensor::new(zv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[z, a, b]);
        Ok(self.push(out, Op::Blend { z, a, b }, rg))
    }

    /// Concatenates along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("N,H,W must match: ({}, {}, {}) vs ({}, {}, {})", na, ha, wa, nb, hb, wb),
            ));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_channels(start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Mean binary cross-entropy on logits; returns a scalar.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let l = loss::bce_with_logits(self.value(logits), target)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(l)),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over channels; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let l = loss::softmax_cross_entropy(self.value(logits), classes)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(l)),
            Op::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
            },
            rg,
        ))
    }

    /// `sum(x * weights)` for a constant `weights`; returns a scalar.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let v = self.value(x).dot(weights)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(v)),
            Op::DotConst {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `loss` and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::shape("backward", "tape is empty"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(seed_shape, T::one()));
        self.nodes.truncate(loss.0 + 1);

        while let Some(node) = self.nodes.pop() {
            let id = self.nodes.len();
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contributions = self.local_grads(&node, &g)?;
            for (v, d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d)?,
                    slot @ None => *slot = Some(d),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs(*x))?;
                if let Some(dx) = cg.input {
                    res.push((*x, dx));
                }
                res.push((*w, cg.weight));
                res.push((*b, cg.bias));
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let cg =
                    conv::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs(*x))?;
                if let Some(dx) = cg.input {
                    res.push((*x, dx));
                }
                res.push((*w, cg.weight));
                res.push((*b, cg.bias));
            }
            Op::MaxPool { x, argmax } => {
                res.push((*x, pool::maxpool2x2_backward(self.value(*x).shape(), argmax, g)?));
            }
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                stats,
            } => {
                let gg = norm::group_norm_backward(self.value(*x), *groups, self.value(*scale), stats, g)?;
                res.push((*x, gg.input));
                res.push((*scale, gg.scale));
                res.push((*shift, gg.shift));
            }
            Op::Relu(x) => {
                res.push((
                    *x,
                    zip_map(self.value(*x), g, |v, d| if v > T::zero() { d } else { T::zero() }),
                ));
            }
            Op::Sigmoid(x) => {
                res.push((*x, zip_map(out, g, |s, d| d * s * (T::one() - s))));
            }
            Op::Tanh(x) => {
                res.push((*x, zip_map(out, g, |t, d| d * (T::one() - t * t))));
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = out.shape().try_into().expect("softmax is 4-d");
                let plane = h * w;
                let (s, d) = (out.data(), g.data());
                let mut dx = vec![T::zero(); s.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let idx = |ch: usize| (b * c + ch) * plane + p;
                        let inner = (0..c).fold(T::zero(), |acc, ch| acc + s[idx(ch)] * d[idx(ch)]);
                        for ch in 0..c {
                            dx[idx(ch)] = s[idx(ch)] * (d[idx(ch)] - inner);
                        }
                    }
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), dx)?));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                res.push((*a, zip_map(g, self.value(*b), |d, y| d * y)));
                res.push((*b, zip_map(g, self.value(*a), |d, x| d * x)));
            }
            Op::Scale(x, c) => {
                let c = *c;
                res.push((*x, g.map(|d| d * c)));
            }
            Op::Blend { z, a, b } => {
                let (zv, av, bv) = (self.value(*z), self.value(*a), self.value(*b));
                let dz = zv
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .zip(g.data())
                    .map(|((_, (&x, &y)), &d)| d * (x - y))
                    .collect();
                res.push((*z, Tensor::new(zv.shape().to_vec(), dz)?));
                res.push((*a, zip_map(g, zv, |d, s| d * s)));
                res.push((*b, zip_map(g, zv, |d, s| d * (T::one() - s))));
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                res.push((*a, g.slice_channels(0, ca)?));
                res.push((*b, g.slice_channels(ca, cb)?));
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = self.value(*x).dims4("slice_channels")?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(vec![n, c, h, w]);
                for s in 0..n {
                    let dst = (s * c + start) * plane;
                    dx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[s * len * plane..(s + 1) * len * plane]);
                }
                res.push((*x, dx));
            }
            Op::Bce { logits, target } => {
                let up = g.data()[0].as_f64();
                res.push((*logits, loss::bce_with_logits_backward(self.value(*logits), target, up)));
            }
            Op::SoftmaxCe { logits, classes } => {
                let up = g.data()[0].as_f64();
                res.push((
                    *logits,
                    loss::softmax_cross_entropy_backward(self.value(*logits), classes, up)?,
                ));
            }
            Op::DotConst { x, weights } => {
                let up = g.data()[0];
                res.push((*x, weights.map(|w| w * up)));
            }
        }
        Ok(res)
    }
}
