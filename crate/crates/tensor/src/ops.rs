//! Pure numeric kernels on [`Tensor`]s. The tape records these and the
//! backward pass is written in terms of them as well.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::shape::{broadcast_shapes, broadcast_strides, check_axes, numel, strides, Odometer};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// Broadcasting elementwise combination.
pub fn binary<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let mut data = Vec::with_capacity(n);
    let mut odo = Odometer::new(&out_shape);
    let mut offs = [0usize; 2];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        data.push(f(ad[offs[0]], bd[offs[1]]));
        if i + 1 < n {
            odo.step([&sa, &sb], &mut offs);
        }
    }
    Tensor::new(out_shape, data)
}

pub fn add<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x + y)
}

pub fn sub<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x - y)
}

pub fn mul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x * y)
}

pub fn div<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary(a, b, |x, y| x / y)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<F: Element>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(sigmoid_scalar)
}

pub fn silu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn relu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Broadcast `x` up to `shape`.
pub fn expand<F: Element>(x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    let out = broadcast_shapes(x.shape(), shape)?;
    if out != shape {
        return Err(shape_err!("cannot expand {:?} to {shape:?}", x.shape()));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let sx = broadcast_strides(x.shape(), shape);
    let n = numel(shape);
    let mut data = Vec::with_capacity(n);
    let mut odo = Odometer::new(shape);
    let mut offs = [0usize];
    for i in 0..n {
        data.push(x.data()[offs[0]]);
        if i + 1 < n {
            odo.step([&sx], &mut offs);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    if keepdim {
        shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
    } else {
        let v: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        v
    }
}

/// Sum over `axes`.
pub fn sum_axes<F: Element>(x: &Tensor<F>, axes: &[usize], keepdim: bool) -> Result<Tensor<F>> {
    let axes = check_axes(axes, x.rank())?;
    let keep = reduced_shape(x.shape(), &axes, true);
    let so = broadcast_strides(&keep, x.shape());
    let mut acc = vec![F::zero(); numel(&keep)];
    let mut odo = Odometer::new(x.shape());
    let mut offs = [0usize];
    let n = x.numel();
    for (i, &v) in x.data().iter().enumerate() {
        acc[offs[0]] = acc[offs[0]] + v;
        if i + 1 < n {
            odo.step([&so], &mut offs);
        }
    }
    Tensor::new(reduced_shape(x.shape(), &axes, keepdim), acc)
}

/// Maximum over `axes`, with the row-major first maximal input index per
/// output element.
pub fn max_axes<F: Element>(x: &Tensor<F>, axes: &[usize], keepdim: bool) -> Result<(Tensor<F>, Vec<usize>)> {
    let axes = check_axes(axes, x.rank())?;
    let keep = reduced_shape(x.shape(), &axes, true);
    let so = broadcast_strides(&keep, x.shape());
    let m = numel(&keep);
    let mut best = vec![F::neg_infinity(); m];
    let mut arg = vec![usize::MAX; m];
    let mut odo = Odometer::new(x.shape());
    let mut offs = [0usize];
    let n = x.numel();
    for (i, &v) in x.data().iter().enumerate() {
        let o = offs[0];
        if arg[o] == usize::MAX || v > best[o] {
            best[o] = v;
            arg[o] = i;
        }
        if i + 1 < n {
            odo.step([&so], &mut offs);
        }
    }
    Ok((Tensor::new(reduced_shape(x.shape(), &axes, keepdim), best)?, arg))
}

/// Sum `grad` down to `target`, the inverse of broadcasting `target` up to
/// `grad`'s shape.
pub fn reduce_to_shape<F: Element>(grad: &Tensor<F>, target: &[usize]) -> Result<Tensor<F>> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    let g = grad.shape();
    if target.len() > g.len() {
        return Err(shape_err!("cannot reduce {g:?} to {target:?}"));
    }
    let lead = g.len() - target.len();
    let axes: Vec<usize> = (0..g.len()).filter(|&i| i < lead || (target[i - lead] == 1 && g[i] != 1)).collect();
    sum_axes(grad, &axes, true)?.reshape(target.to_vec())
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<F: Element>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn last_two(t: &[usize], name: &str) -> Result<(usize, usize)> {
    if t.len() < 2 {
        return Err(shape_err!("{name} needs rank >= 2, got {t:?}"));
    }
    Ok((t[t.len() - 2], t[t.len() - 1]))
}

#[derive(Clone, Copy)]
enum Trans {
    NN,
    NT,
    TN,
}

fn batched_product<F: Element>(a: &Tensor<F>, b: &Tensor<F>, mode: Trans) -> Result<Tensor<F>> {
    let (a0, a1) = last_two(a.shape(), "matmul lhs")?;
    let (b0, b1) = last_two(b.shape(), "matmul rhs")?;
    let (m, k, kb, n) = match mode {
        Trans::NN => (a0, a1, b0, b1),
        Trans::NT => (a0, a1, b1, b0),
        Trans::TN => (a1, a0, b0, b1),
    };
    if k != kb {
        return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let a_batch = &a.shape()[..a.rank() - 2];
    let b_batch = &b.shape()[..b.rank() - 2];
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    let batch = numel(a_batch);
    let shared_b = b.rank() == 2;
    if !shared_b && a_batch != b_batch {
        return Err(shape_err!("matmul batch extents differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    match (mode, shared_b) {
        (Trans::NN, true) => gemm_nn(batch * m, k, n, ad, bd, &mut out),
        (Trans::NT, true) => gemm_nt(batch * m, k, n, ad, bd, &mut out),
        _ => {
            if matches!(mode, Trans::TN) && shared_b && batch > 1 {
                return Err(shape_err!("transposed-lhs product needs matching batches"));
            }
            let b_step = if shared_b { 0 } else { k * n };
            for i in 0..batch {
                let a_s = &ad[i * m * k..(i + 1) * m * k];
                let b_s = &bd[i * b_step..i * b_step + k * n];
                let c_s = &mut out[i * m * n..(i + 1) * m * n];
                match mode {
                    Trans::NN => gemm_nn(m, k, n, a_s, b_s, c_s),
                    Trans::NT => gemm_nt(m, k, n, a_s, b_s, c_s),
                    Trans::TN => gemm_tn(m, k, n, a_s, b_s, c_s),
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// `a · b` over the last two axes; leading axes are batch axes and must match,
/// unless `b` is a plain matrix shared by every batch entry.
pub fn matmul<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    batched_product(a, b, Trans::NN)
}

/// `a · bᵀ` over the last two axes.
pub fn matmul_nt<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    batched_product(a, b, Trans::NT)
}

/// `aᵀ · b` over the last two axes.
pub fn matmul_tn<F: Element>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    batched_product(a, b, Trans::TN)
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
pub fn transpose<F: Element>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {perm:?} for rank {r}"));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut odo = Odometer::new(&out_shape);
    let mut offs = [0usize];
    for i in 0..n {
        data.push(x.data()[offs[0]]);
        if i + 1 < n {
            odo.step([&src], &mut offs);
        }
    }
    Tensor::new(out_shape, data)
}

/// Inverse of a permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<F: Element>(xs: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let r = first.rank();
    if axis >= r {
        return Err(shape_err!("concat axis {axis} out of range for rank {r}"));
    }
    for t in xs {
        let ok =
            t.rank() == r && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(shape_err!("concat extents differ: {:?} vs {:?}", first.shape(), t.shape()));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let mut shape = first.shape().to_vec();
    shape[axis] = xs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in xs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

/// `len` entries of `axis` starting at `start`.
pub fn slice<F: Element>(x: &Tensor<F>, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(shape_err!("slice {start}..{} of axis {axis} out of range for {:?}", start + len, x.shape()));
    }
    let outer = numel(&x.shape()[..axis]);
    let inner = numel(&x.shape()[axis + 1..]);
    let full = x.shape()[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

/// Split `axis` into `parts` equal pieces.
pub fn split<F: Element>(x: &Tensor<F>, axis: usize, parts: usize) -> Result<Vec<Tensor<F>>> {
    if axis >= x.rank() || parts == 0 || x.shape()[axis] % parts != 0 {
        return Err(shape_err!("cannot split axis {axis} of {:?} into {parts}", x.shape()));
    }
    let len = x.shape()[axis] / parts;
    (0..parts).map(|i| slice(x, axis, i * len, len)).collect()
}

// ---------------------------------------------------------------------------
// Softmax and loss
// ---------------------------------------------------------------------------

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn softmax<F: Element>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(shape_err!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![F::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| xd[at(j)]).fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for j in 0..len {
                let e = (xd[at(j)] - m).exp();
                out[at(j)] = e;
                s = s + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given softmax output `y` and upstream `dy`: `y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_backward<F: Element>(y: &Tensor<F>, dy: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![F::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: F = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Mean cross-entropy of `logits[N,K]` against integer labels, returning the
/// loss and the softmax probabilities.
pub fn cross_entropy<F: Element>(logits: &Tensor<F>, labels: &[usize]) -> Result<(F, Tensor<F>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(shape_err!(
            "cross_entropy wants [N,K] logits for {} labels, got {:?}",
            labels.len(),
            logits.shape()
        ));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(TensorError::Usage(format!("label {l} at row {i} out of range for {k} classes")));
    }
    let mut probs = vec![F::zero(); n * k];
    let mut total = F::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        total = total + (lse - row[label]);
    }
    Ok((total / F::lit(n as f64), Tensor::new(vec![n, k], probs)?))
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

/// Spatial geometry of a 2-D sliding window over NCHW input.
#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(shape_err!("stride must be >= 1"));
        }
        if self.kh > h + 2 * self.pad || self.kw > w + 2 * self.pad {
            return Err(shape_err!(
                "window {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                h + 2 * self.pad,
                w + 2 * self.pad
            ));
        }
        Ok(((h + 2 * self.pad - self.kh) / self.stride + 1, (w + 2 * self.pad - self.kw) / self.stride + 1))
    }
}

fn nchw(x: &[usize], what: &str) -> Result<[usize; 4]> {
    match *x {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err!("{what} expects NCHW input, got {x:?}")),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.win.kh * self.win.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<F: Element>(&self, x: &[F], cols: &mut [F]) {
        let (kh, kw, s, p) = (self.win.kh, self.win.kw, self.win.stride, self.win.pad);
        let l = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * s + kj) as isize - p as isize;
                            dst[oy * self.wo + ox] =
                                if iy >= 0 && (iy as usize) < self.h && ix >= 0 && (ix as usize) < self.w {
                                    plane[iy as usize * self.w + ix as usize]
                                } else {
                                    F::zero()
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Element>(&self, cols: &[F], dx: &mut [F]) {
        let (kh, kw, s, p) = (self.win.kh, self.win.kw, self.win.stride, self.win.pad);
        let l = self.cols();
        for c in 0..self.c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let src = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let at = c * self.h * self.w + iy as usize * self.w + ix as usize;
                            dx[at] = dx[at] + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<F: Element>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, c, h, wd] = nchw(x.shape(), "conv2d")?;
    let [o, wc, kh, kw] = nchw(w.shape(), "conv2d weight")?;
    if wc != c {
        return Err(shape_err!("conv2d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape()));
    }
    let win = Window { kh, kw, stride, pad };
    let (ho, wo) = win.output_hw(h, wd)?;
    Ok((n, o, ConvGeom { c, h, w: wd, win, ho, wo }))
}

/// 2-D cross-correlation with zero padding (im2col + GEMM per sample).
pub fn conv2d<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (n, o, g) = conv_geom(x, w, stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{o}]", b.shape()));
        }
    }
    let l = g.cols();
    let in_plane = g.c * g.h * g.w;
    let mut out = vec![F::zero(); n * o * l];
    out.par_chunks_mut(o * l).zip(x.data().par_chunks(in_plane)).for_each(|(y, xn)| {
        let mut cols = vec![F::zero(); g.rows() * l];
        g.im2col(xn, &mut cols);
        gemm_nn(o, g.rows(), l, w.data(), &cols, y);
        if let Some(b) = b {
            for (oc, &bv) in b.data().iter().enumerate() {
                for v in &mut y[oc * l..(oc + 1) * l] {
                    *v = *v + bv;
                }
            }
        }
    });
    Tensor::new(vec![n, o, g.ho, g.wo], out)
}

/// Samples per weight-gradient accumulation group. Fixed so the summation
/// order never depends on the thread count.
const CONV_GRAD_GROUP: usize = 4;

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (n, o, g) = conv_geom(x, w, stride, pad)?;
    let l = g.cols();
    let rows = g.rows();
    let in_plane = g.c * g.h * g.w;
    if dy.shape() != [n, o, g.ho, g.wo] {
        return Err(shape_err!("conv2d upstream grad {:?} does not match output", dy.shape()));
    }

    let mut db = vec![F::zero(); o];
    for yn in dy.data().chunks(o * l) {
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc = *acc + yn[oc * l..(oc + 1) * l].iter().copied().sum::<F>();
        }
    }

    let partial: Vec<Vec<F>> = x
        .data()
        .par_chunks(in_plane * CONV_GRAD_GROUP)
        .zip(dy.data().par_chunks(o * l * CONV_GRAD_GROUP))
        .map(|(xs, ys)| {
            let mut dw = vec![F::zero(); o * rows];
            let mut cols = vec![F::zero(); rows * l];
            for (xn, yn) in xs.chunks(in_plane).zip(ys.chunks(o * l)) {
                g.im2col(xn, &mut cols);
                gemm_nt(o, l, rows, yn, &cols, &mut dw);
            }
            dw
        })
        .collect();
    let mut dw = vec![F::zero(); o * rows];
    for p in partial {
        for (a, v) in dw.iter_mut().zip(p) {
            *a = *a + v;
        }
    }

    let mut dx = vec![F::zero(); x.numel()];
    dx.par_chunks_mut(in_plane).zip(dy.data().par_chunks(o * l)).for_each(|(dxn, yn)| {
        let mut dcols = vec![F::zero(); rows * l];
        gemm_tn(rows, o, l, w.data(), yn, &mut dcols);
        g.col2im(&dcols, dxn);
    });

    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(w.shape().to_vec(), dw)?, Tensor::new(vec![o], db)?))
}

/// Max pooling; padded cells never win. Returns the pooled map and the input
/// index chosen for each output (first maximal element in row-major window
/// order).
pub fn maxpool2d<F: Element>(x: &Tensor<F>, k: usize, stride: usize, pad: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let [n, c, h, w] = nchw(x.shape(), "maxpool2d")?;
    if 2 * pad > k {
        return Err(shape_err!("maxpool padding {pad} exceeds half the window {k}"));
    }
    let win = Window { kh: k, kw: k, stride, pad };
    let (ho, wo) = win.output_hw(h, w)?;
    let planes = n * c;
    let mut out = vec![F::zero(); planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    let xd = x.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = F::neg_infinity();
                let mut at = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if at == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            at = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = at;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

/// Route each upstream gradient entry to the input index recorded in `arg`.
pub fn scatter_add<F: Element>(dy: &Tensor<F>, arg: &[usize], input_shape: &[usize]) -> Result<Tensor<F>> {
    let mut dx = vec![F::zero(); numel(input_shape)];
    for (&g, &i) in dy.data().iter().zip(arg) {
        dx[i] = dx[i] + g;
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Wraparound padding of the two spatial axes.
pub fn pad_circular<F: Element>(x: &Tensor<F>, pad: usize) -> Result<Tensor<F>> {
    let [n, c, h, w] = nchw(x.shape(), "pad_circular")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in x.data().chunks(h * w) {
        for y in 0..hp {
            let sy = (y as isize - pad as isize).rem_euclid(h as isize) as usize;
            for xx in 0..wp {
                let sx = (xx as isize - pad as isize).rem_euclid(w as isize) as usize;
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(vec![n, c, hp, wp], out)
}

pub fn pad_circular_backward<F: Element>(dy: &Tensor<F>, input_shape: &[usize], pad: usize) -> Result<Tensor<F>> {
    let [_, _, h, w] = nchw(input_shape, "pad_circular")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![F::zero(); numel(input_shape)];
    for (plane, g) in dx.chunks_mut(h * w).zip(dy.data().chunks(hp * wp)) {
        for y in 0..hp {
            let sy = (y as isize - pad as isize).rem_euclid(h as isize) as usize;
            for xx in 0..wp {
                let sx = (xx as isize - pad as isize).rem_euclid(w as isize) as usize;
                plane[sy * w + sx] = plane[sy * w + sx] + g[y * wp + xx];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
