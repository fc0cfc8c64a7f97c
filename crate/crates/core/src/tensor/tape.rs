//! Reverse-mode gradient tape.
//!
//! Forward values are computed eagerly and stored on the tape together with
//! the operation that produced them; [`Tape::backward`] walks the nodes in
//! reverse insertion order. Parameters are borrowed, not copied.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{matmul_into, softmax_row, ConvGeometry};
use super::{dot_f64, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatVec {
        a: usize,
        x: usize,
        transpose: bool,
    },
    Conv {
        x: usize,
        k: usize,
        geom: ConvGeometry,
    },
    ChannelBias {
        x: usize,
        b: usize,
    },
    Add(usize, usize),
    Sum(Vec<usize>),
    Relu(usize),
    Reshape(usize),
    Crop {
        x: usize,
        top: usize,
        left: usize,
    },
    Softmax(usize),
    L2Normalize {
        x: usize,
        norm: f64,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<f32>,
    },
    Dot(usize, usize),
    Affine {
        x: usize,
        scale: f32,
    },
    Log(usize),
    MulConst {
        x: usize,
        c: Vec<f32>,
    },
    Index {
        x: usize,
        i: usize,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for one backward pass. Single-threaded.
#[derive(Debug)]
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<(usize, &Tensor, bool)> {
        let i = self.idx(v)?;
        let n = &self.nodes[i];
        Ok((i, n.value.as_ref(), n.needs_grad))
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned trainable leaf.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.node(v)?.1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at, ag) = self.node(a)?;
        let (bi, bt, bg) = self.node(b)?;
        let out = super::matmul(at, bt)?;
        Ok(self.push(Cow::Owned(out), Op::MatMul(ai, bi), ag || bg))
    }

    /// `a·x` for `a[r×k]`, `x[k]`, or `aᵀ·x` for `x[r]` when `transpose` is set.
    pub fn matvec(&mut self, a: Var, x: Var, transpose: bool) -> Result<Var> {
        let (ai, at, ag) = self.node(a)?;
        let (xi, xt, xg) = self.node(x)?;
        let (r, k) = match at.shape() {
            [r, k] => (*r, *k),
            _ => return Err(Error::shape("matvec", at.shape(), xt.shape())),
        };
        let (inner, outer) = if transpose { (r, k) } else { (k, r) };
        if xt.rank() != 1 || xt.len() != inner {
            return Err(Error::shape("matvec", at.shape(), xt.shape()));
        }
        let a_data = at.data();
        let x_data = xt.data();
        let out: Vec<f32> = if transpose {
            (0..outer)
                .map(|j| {
                    (0..r)
                        .map(|i| f64::from(a_data[i * k + j]) * f64::from(x_data[i]))
                        .sum::<f64>() as f32
                })
                .collect()
        } else {
            (0..outer)
                .map(|i| dot_f64(&a_data[i * k..(i + 1) * k], x_data) as f32)
                .collect()
        };
        let out = Tensor::checked("matvec", vec![outer], out)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::MatVec {
                a: ai,
                x: xi,
                transpose,
            },
            ag || xg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let (ki, kt, kg) = self.node(k)?;
        let geom = ConvGeometry::new(xt.shape(), kt.shape(), stride)?;
        let mut out = vec![0.0; geom.output_len()];
        geom.forward(xt.data(), kt.data(), &mut out);
        let out = Tensor::checked("conv2d", vec![geom.filters, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Cow::Owned(out), Op::Conv { x: xi, k: ki, geom }, xg || kg))
    }

    /// Adds `b[F]` to every spatial position of channel `f` in `x[F×H×W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let (bi, bt, bg) = self.node(b)?;
        if xt.rank() != 3 || bt.rank() != 1 || bt.len() != xt.shape()[0] {
            return Err(Error::shape("channel_bias", xt.shape(), bt.shape()));
        }
        let plane = xt.shape()[1] * xt.shape()[2];
        let data = xt
            .data()
            .chunks(plane)
            .zip(bt.data())
            .flat_map(|(ch, &bv)| ch.iter().map(move |&v| v + bv))
            .collect();
        let out = Tensor::checked("channel_bias", xt.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::ChannelBias { x: xi, b: bi }, xg || bg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at, ag) = self.node(a)?;
        let (bi, bt, bg) = self.node(b)?;
        if at.shape() != bt.shape() {
            return Err(Error::shape("add", at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::checked("add", at.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Add(ai, bi), ag || bg))
    }

    /// Elementwise sum of same-shaped values, accumulated in input order.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::invalid("sum", "no inputs"))?;
        let shape = self.value(first)?.shape().to_vec();
        let mut acc = vec![0.0f64; self.value(first)?.len()];
        let mut idxs = Vec::with_capacity(vars.len());
        let mut needs = false;
        for &v in vars {
            let (i, t, g) = self.node(v)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("sum", &shape, t.shape()));
            }
            for (a, &x) in acc.iter_mut().zip(t.data()) {
                *a += f64::from(x);
            }
            idxs.push(i);
            needs |= g;
        }
        let out = Tensor::checked("sum", shape, acc.into_iter().map(|v| v as f32).collect())?;
        Ok(self.push(Cow::Owned(out), Op::Sum(idxs), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let out = super::relu(xt);
        Ok(self.push(Cow::Owned(out), Op::Relu(xi), xg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let out = xt.reshape(shape)?;
        Ok(self.push(Cow::Owned(out), Op::Reshape(xi), xg))
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        self.reshape(x, &[n])
    }

    /// Spatial window `[top..top+height, left..left+width]` of `x[C×H×W]`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let (c, h, w) = match xt.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::invalid("crop", format!("expected C×H×W input, got {s:?}"))),
        };
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(Error::invalid(
                "crop",
                format!("window {height}×{width} at ({top},{left}) exceeds input {h}×{w}"),
            ));
        }
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in top..top + height {
                let row = (ch * h + y) * w;
                data.extend_from_slice(&xt.data()[row + left..row + left + width]);
            }
        }
        let out = Tensor::checked("crop", vec![c, height, width], data)?;
        Ok(self.push(Cow::Owned(out), Op::Crop { x: xi, top, left }, xg))
    }

    /// Softmax of a 1-D vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        if xt.rank() != 1 {
            return Err(Error::invalid(
                "softmax",
                format!("expected 1-D input, got {:?}", xt.shape()),
            ));
        }
        let mut out = vec![0.0; xt.len()];
        softmax_row(xt.data(), &mut out);
        let out = Tensor::checked("softmax", xt.shape().to_vec(), out)?;
        Ok(self.push(Cow::Owned(out), Op::Softmax(xi), xg))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let norm = dot_f64(xt.data(), xt.data()).sqrt();
        let out = super::l2_normalize(xt)?;
        Ok(self.push(Cow::Owned(out), Op::L2Normalize { x: xi, norm }, xg))
    }

    /// Scalar `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (li, lt, lg) = self.node(logits)?;
        let loss = super::cross_entropy(lt, label)?;
        let mut probs = vec![0.0; lt.len()];
        softmax_row(lt.data(), &mut probs);
        let out = Tensor::scalar(loss)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::CrossEntropy {
                logits: li,
                label,
                probs,
            },
            lg,
        ))
    }

    /// Scalar inner product.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at, ag) = self.node(a)?;
        let (bi, bt, bg) = self.node(b)?;
        let v = at.dot(bt)?;
        let out = Tensor::scalar(v)?;
        Ok(self.push(Cow::Owned(out), Op::Dot(ai, bi), ag || bg))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let data = xt.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::checked("affine", xt.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Affine { x: xi, scale }, xg))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        if xt.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log"));
        }
        let data = xt.data().iter().map(|&v| (f64::from(v).ln()) as f32).collect();
        let out = Tensor::checked("log", xt.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Log(xi), xg))
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f32]) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        if xt.len() != c.len() {
            return Err(Error::shape("mul_const", xt.shape(), &[c.len()]));
        }
        let data = xt.data().iter().zip(c).map(|(a, b)| a * b).collect();
        let out = Tensor::checked("mul_const", xt.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::MulConst { x: xi, c: c.to_vec() }, xg))
    }

    /// Scalar element `x[i]` of the flattened value.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let (xi, xt, xg) = self.node(x)?;
        let v = *xt
            .data()
            .get(i)
            .ok_or_else(|| Error::invalid("index", format!("index {i} out of range for {} elements", xt.len())))?;
        let out = Tensor::scalar(v)?;
        Ok(self.push(Cow::Owned(out), Op::Index { x: xi, i }, xg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[li].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, node.value.as_ref(), &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        self.nodes[i].value.as_ref()
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let (r, k, c) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.wants(*a) {
                    // dA = dC·Bᵀ
                    let da = acc(grads, *a, r * k);
                    for i in 0..r {
                        for t in 0..k {
                            let s: f64 = (0..c)
                                .map(|j| f64::from(g[i * c + j]) * f64::from(bt.data()[t * c + j]))
                                .sum();
                            da[i * k + t] += s as f32;
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = Aᵀ·dC
                    let mut at_t = vec![0.0f32; k * r];
                    for i in 0..r {
                        for t in 0..k {
                            at_t[t * r + i] = at.data()[i * k + t];
                        }
                    }
                    let mut tmp = vec![0.0f32; k * c];
                    matmul_into(&at_t, g, k, r, c, &mut tmp);
                    add_into(acc(grads, *b, k * c), &tmp);
                }
            }
            Op::MatVec { a, x, transpose } => {
                let (at, xt) = (self.val(*a), self.val(*x));
                let (r, k) = (at.shape()[0], at.shape()[1]);
                if *transpose {
                    // y[j] = Σ_i a[i,j] x[i]
                    if self.wants(*a) {
                        let da = acc(grads, *a, r * k);
                        for i in 0..r {
                            let xv = xt.data()[i];
                            for j in 0..k {
                                da[i * k + j] += xv * g[j];
                            }
                        }
                    }
                    if self.wants(*x) {
                        let dx = acc(grads, *x, r);
                        for (d, row) in dx.iter_mut().zip(at.data().chunks_exact(k)) {
                            *d += dot_f64(row, g) as f32;
                        }
                    }
                } else {
                    // y[i] = Σ_j a[i,j] x[j]
                    if self.wants(*a) {
                        let da = acc(grads, *a, r * k);
                        for i in 0..r {
                            let gi = g[i];
                            for j in 0..k {
                                da[i * k + j] += gi * xt.data()[j];
                            }
                        }
                    }
                    if self.wants(*x) {
                        let dx = acc(grads, *x, k);
                        for (j, d) in dx.iter_mut().enumerate() {
                            let s: f64 = (0..r).map(|i| f64::from(at.data()[i * k + j]) * f64::from(g[i])).sum();
                            *d += s as f32;
                        }
                    }
                }
            }
            Op::Conv { x, k, geom } => {
                if self.wants(*k) {
                    let n = self.val(*k).len();
                    let xd = self.val(*x).data();
                    geom.backward_kernel(xd, g, acc(grads, *k, n));
                }
                if self.wants(*x) {
                    let n = self.val(*x).len();
                    let kd = self.val(*k).data();
                    geom.backward_input(kd, g, acc(grads, *x, n));
                }
            }
            Op::ChannelBias { x, b } => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if self.wants(*b) {
                    let f = self.val(*b).len();
                    let plane = g.len() / f;
                    let db = acc(grads, *b, f);
                    for (d, ch) in db.iter_mut().zip(g.chunks(plane)) {
                        *d += ch.iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
                    }
                }
            }
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if self.wants(i) {
                        add_into(acc(grads, i, g.len()), g);
                    }
                }
            }
            Op::Sum(inputs) => {
                for &i in inputs {
                    if self.wants(i) {
                        add_into(acc(grads, i, g.len()), g);
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
            }
            Op::Crop { x, top, left } => {
                if self.wants(*x) {
                    let xs = self.val(*x).shape().to_vec();
                    let (h, w) = (xs[1], xs[2]);
                    let (c, ch, cw) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                    let dx = acc(grads, *x, xs.iter().product());
                    for cc in 0..c {
                        for y in 0..ch {
                            let src = (cc * ch + y) * cw;
                            let dst = (cc * h + top + y) * w + left;
                            add_into(&mut dx[dst..dst + cw], &g[src..src + cw]);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let s = out.data();
                    let gs = dot_f64(g, s) as f32;
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &sv) in dx.iter_mut().zip(g).zip(s) {
                        *d += sv * (gv - gs);
                    }
                }
            }
            Op::L2Normalize { x, norm } => {
                if self.wants(*x) {
                    let y = out.data();
                    let yg = dot_f64(y, g);
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += ((f64::from(gv) - f64::from(yv) * yg) / norm) as f32;
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if self.wants(*logits) {
                    let dl = acc(grads, *logits, probs.len());
                    for (j, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - onehot);
                    }
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.val(*a).data().to_vec(), self.val(*b).data().to_vec());
                if self.wants(*a) {
                    let da = acc(grads, *a, bv.len());
                    for (d, &v) in da.iter_mut().zip(&bv) {
                        *d += g[0] * v;
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, av.len());
                    for (d, &v) in db.iter_mut().zip(&av) {
                        *d += g[0] * v;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += scale * gv;
                    }
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x).data();
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                }
            }
            Op::MulConst { x, c } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gv), &cv) in dx.iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            Op::Index { x, i } => {
                if self.wants(*x) {
                    let n = self.val(*x).len();
                    acc(grads, *x, n)[*i] += g[0];
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], i: usize, len: usize) -> &mut [f32] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(match &self.grads[v.index] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.index]),
        })
    }

    /// Gradients for a list of leaves, in order.
    pub fn wrt_all(&self, vars: &[Var]) -> Result<Vec<Tensor>> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}
