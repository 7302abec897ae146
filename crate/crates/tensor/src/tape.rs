use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Powf(Var, F),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Sum { x: Var, keepdim_shape: Vec<usize> },
    Max { x: Var, arg: Vec<usize> },
    MatMul(Var, Var),
    Transpose { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool2d { x: Var, arg: Vec<usize> },
    PadCircular { x: Var, pad: usize },
    CrossEntropy { logits: Var, probs: Tensor<F>, labels: Vec<usize> },
    StraightThrough { soft: Var },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to every tape node that required one.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn record(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::div(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.record(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.record(v, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, F::one())
    }

    pub fn powf(&mut self, x: Var, p: F) -> Var {
        let v = self.value(x).map(|e| e.powf(p));
        self.record(v, Op::Powf(x, p), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.record(v, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = ops::sigmoid(self.value(x));
        self.record(v, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = ops::silu(self.value(x));
        self.record(v, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.record(v, Op::Relu(x), &[x])
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let keep = ops::sum_axes(self.value(x), axes, true)?;
        let keepdim_shape = keep.shape().to_vec();
        let v = if keepdim { keep } else { ops::sum_axes(self.value(x), axes, false)? };
        Ok(self.record(v, Op::Sum { x, keepdim_shape }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes, keepdim)?;
        Ok(self.scale(s, F::one() / F::lit(count as f64)))
    }

    pub fn max_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (v, arg) = ops::max_axes(self.value(x), axes, keepdim)?;
        Ok(self.record(v, Op::Max { x, arg }, &[x]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = ops::transpose(self.value(x), perm)?;
        Ok(self.record(v, Op::Transpose { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(shape_err!("transpose_last needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape.to_vec())?;
        Ok(self.record(v, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = xs.iter().map(|&v| self.value(v)).collect();
        let v = ops::concat(&vals, axis)?;
        Ok(self.record(v, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice(self.value(x), axis, start, len)?;
        Ok(self.record(v, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        if axis >= shape.len() || parts == 0 || shape[axis] % parts != 0 {
            return Err(shape_err!("cannot split axis {axis} of {shape:?} into {parts}"));
        }
        let len = shape[axis] / parts;
        (0..parts).map(|i| self.slice(x, axis, i * len, len)).collect()
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.record(v, Op::Softmax { x, axis }, &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(v, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (v, arg) = ops::maxpool2d(self.value(x), k, stride, pad)?;
        Ok(self.record(v, Op::MaxPool2d { x, arg }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.mean_axes(x, &[2, 3], true)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.max_axes(x, &[2, 3], true)
    }

    pub fn pad_circular(&mut self, x: Var, pad: usize) -> Result<Var> {
        let v = ops::pad_circular(self.value(x), pad)?;
        Ok(self.record(v, Op::PadCircular { x, pad }, &[x]))
    }

    /// Mean cross-entropy of `[N,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.record(Tensor::scalar(loss), Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits]))
    }

    /// Forward value `hard`, backward as if the output were `soft`.
    pub fn straight_through(&mut self, hard: Tensor<F>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(shape_err!("straight-through shapes differ: {:?} vs {:?}", hard.shape(), self.shape(soft)));
        }
        Ok(self.record(hard, Op::StraightThrough { soft }, &[soft]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(self.value(loss).ones_like());
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let g = ops::reduce_to_shape(&g, self.shape(v))?;
        grads[v.0] = Some(match grads[v.0].take() {
            Some(prev) => ops::add(&prev, &g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|e| -e))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::mul(g, val(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ops::mul(g, val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::div(g, val(*b))?)?;
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let t = ops::div(&node.value, val(*b))?;
                    self.accumulate(grads, *b, ops::binary(g, &t, |x, y| -x * y)?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|e| e * *c))?,
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone())?,
            Op::Powf(x, p) => {
                let p = *p;
                let d = val(*x).map(|e| p * e.powf(p - F::one()));
                self.accumulate(grads, *x, ops::mul(g, &d)?)?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, ops::mul(g, &node.value)?)?,
            Op::Sigmoid(x) => {
                let d = node.value.map(|s| s * (F::one() - s));
                self.accumulate(grads, *x, ops::mul(g, &d)?)?;
            }
            Op::Silu(x) => {
                let d = val(*x).map(|e| {
                    let s = ops::sigmoid_scalar(e);
                    s + e * s * (F::one() - s)
                });
                self.accumulate(grads, *x, ops::mul(g, &d)?)?;
            }
            Op::Relu(x) => {
                let d = val(*x).map(|e| if e > F::zero() { F::one() } else { F::zero() });
                self.accumulate(grads, *x, ops::mul(g, &d)?)?;
            }
            Op::Sum { x, keepdim_shape } => {
                let g = g.reshape(keepdim_shape.clone())?;
                self.accumulate(grads, *x, ops::expand(&g, self.shape(*x))?)?;
            }
            Op::Max { x, arg } => {
                self.accumulate(grads, *x, ops::scatter_add(g, arg, self.shape(*x))?)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::matmul_nt(g, bv)?)?;
                }
                if self.requires_grad(*b) {
                    let db = if bv.rank() == 2 && av.rank() > 2 {
                        let k = av.shape()[av.rank() - 1];
                        let n = g.shape()[g.rank() - 1];
                        let af = av.reshape(vec![av.numel() / k, k])?;
                        let gf = g.reshape(vec![g.numel() / n, n])?;
                        ops::matmul_tn(&af, &gf)?
                    } else {
                        ops::matmul_tn(av, g)?
                    };
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose { x, perm } => {
                self.accumulate(grads, *x, ops::transpose(g, &ops::invert_perm(perm))?)?;
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.reshape(self.shape(*x).to_vec())?)?,
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        self.accumulate(grads, x, ops::slice(g, *axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = self.shape(*x);
                let len = g.shape()[*axis];
                let mut parts: Vec<Tensor<F>> = Vec::with_capacity(3);
                let side = |n: usize| {
                    let mut s = full.to_vec();
                    s[*axis] = n;
                    Tensor::zeros(s)
                };
                if *start > 0 {
                    parts.push(side(*start));
                }
                parts.push(g.clone());
                let rest = full[*axis] - start - len;
                if rest > 0 {
                    parts.push(side(rest));
                }
                let refs: Vec<&Tensor<F>> = parts.iter().collect();
                self.accumulate(grads, *x, ops::concat(&refs, *axis)?)?;
            }
            Op::Softmax { x, axis } => {
                self.accumulate(grads, *x, ops::softmax_backward(&node.value, g, *axis)?)?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::MaxPool2d { x, arg } => {
                self.accumulate(grads, *x, ops::scatter_add(g, arg, self.shape(*x))?)?;
            }
            Op::PadCircular { x, pad } => {
                self.accumulate(grads, *x, ops::pad_circular_backward(g, self.shape(*x), *pad)?)?;
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let (n, k) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item()? / F::lit(n as f64);
                let mut d = probs.to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - F::one();
                }
                let d = Tensor::new(vec![n, k], d.into_iter().map(|e| e * scale).collect())?;
                self.accumulate(grads, *logits, d)?;
            }
            Op::StraightThrough { soft } => self.accumulate(grads, *soft, g.clone())?,
        }
        Ok(())
    }
}
