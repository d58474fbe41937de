//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and backward is a single reverse sweep. A node carries
//! gradient only if some parent does; `stop_grad` produces a fresh leaf that
//! shares the value but never propagates.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::{GradMap, ParamStore, Tensor};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Silu(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    BceWithLogits(Var, Arc<[F]>),
    Concat(Vec<Var>),
    Reshape(Var),
    Embed {
        table: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    grad: bool,
}

#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    leaves: IndexMap<String, Var>,
    memo: HashMap<String, Var>,
    grad_enabled: bool,
    activations: usize,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
/// Numerically stable logistic function.
pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[inline]
/// Numerically stable `ln(1 + e^z)`.
pub fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

/// Dot product with eight independent accumulators, combined in a fixed
/// order so the result is reproducible and still vectorizes.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let chunks = n / 8;
    let mut acc = [F::zero(); 8];
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn trailing_broadcast(ld: &[usize], rd: &[usize]) -> bool {
    let rd: Vec<usize> = rd.iter().copied().skip_while(|&d| d == 1).collect();
    rd.len() <= ld.len() && ld[ld.len() - rd.len()..] == rd[..]
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (h + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: IndexMap::new(),
            memo: HashMap::new(),
            grad_enabled: true,
            activations: 0,
        }
    }

    /// A graph in which nothing requires gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of gradient-carrying network evaluations recorded so far.
    pub fn activations(&self) -> usize {
        self.activations
    }

    pub fn note_activation(&mut self) {
        if self.grad_enabled {
            self.activations += 1;
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<F>> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, grad: bool, kind: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{kind} produced a non-finite value"
            )));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            grad: grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor<F>>) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Numeric("constant is non-finite".into()));
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Named leaf. Leaves registered with `requires_grad` appear in the
    /// `GradMap` returned by [`Graph::backward`]. Re-registering a name
    /// returns the existing node.
    pub fn leaf(&mut self, name: &str, t: Arc<Tensor<F>>, requires_grad: bool) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("leaf `{name}` is non-finite")));
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad: requires_grad && self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter from a store; frozen entries become constants.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        self.leaf(name, t, !store.is_frozen(name))
    }

    /// Cache a derived node under `key` for the lifetime of the graph.
    pub fn memo(&mut self, key: &str, build: impl FnOnce(&mut Self) -> Result<Var>) -> Result<Var> {
        if let Some(&v) = self.memo.get(key) {
            return Ok(v);
        }
        let v = build(self)?;
        self.memo.insert(key.to_string(), v);
        Ok(v)
    }

    /// Same value, no gradient through this edge.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.dims(), bv.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape(format!("matmul {ad:?} x {bd:?}")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av.data()[i * k + p];
                if aip != F::zero() {
                    axpy(aip, &bv.data()[p * n..(p + 1) * n], row);
                }
            }
        }
        let g = self.g(a) || self.g(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g, "matmul")
    }

    /// `x · wᵀ + b` with `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xd, wd) = (xv.dims(), wv.dims());
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::shape(format!("linear {xd:?} with weight {wd:?}")));
        }
        let (m, inp, outp) = (xd[0], xd[1], wd[0]);
        if let Some(b) = b {
            if self.value(b).numel() != outp {
                return Err(Error::shape(format!(
                    "linear bias {:?}",
                    self.value(b).dims()
                )));
            }
        }
        let mut out = vec![F::zero(); m * outp];
        for i in 0..m {
            let xr = &xv.data()[i * inp..(i + 1) * inp];
            for o in 0..outp {
                out[i * outp + o] = dot(xr, &wv.data()[o * inp..(o + 1) * inp]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(outp) {
                for (r, bb) in row.iter_mut().zip(bv) {
                    *r += *bb;
                }
            }
        }
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push(
            Tensor::new(vec![m, outp], out)?,
            Op::Linear { x, w, b },
            g,
            "linear",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.dims();
        if d.len() != 2 {
            return Err(Error::shape(format!("transpose of {d:?}")));
        }
        let (r, c) = (d[0], d[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let g = self.g(a);
        self.push(
            Tensor::new(vec![c, r], out)?,
            Op::Transpose(a),
            g,
            "transpose",
        )
    }

    /// Direct 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xd, wd) = (xv.dims(), wv.dims());
        if xd.len() != 4 || wd.len() != 4 || xd[1] != wd[1] || wd[2] != wd[3] || stride == 0 {
            return Err(Error::shape(format!("conv2d {xd:?} with kernel {wd:?}")));
        }
        let (n, c, h, wdt) = (xd[0], xd[1], xd[2], xd[3]);
        let (o, k) = (wd[0], wd[2]);
        let (ho, wo) = match (conv_out(h, k, stride, pad), conv_out(wdt, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {k} larger than padded input"
                )))
            }
        };
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return Err(Error::shape("conv2d bias size"));
            }
        }
        let xs = xv.data();
        let ws = wv.data();
        let mut out = vec![F::zero(); n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                let base = if let Some(b) = b {
                    self.value(b).data()[oc]
                } else {
                    F::zero()
                };
                let dst = &mut out[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                dst.iter_mut().for_each(|v| *v = base);
                for ic in 0..c {
                    let src = &xs[(ni * c + ic) * h * wdt..(ni * c + ic + 1) * h * wdt];
                    let ker = &ws[(oc * c + ic) * k * k..(oc * c + ic + 1) * k * k];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut s = F::zero();
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wdt as isize {
                                        continue;
                                    }
                                    s += ker[ky * k + kx] * src[iy as usize * wdt + ix as usize];
                                }
                            }
                            dst[oy * wo + ox] += s;
                        }
                    }
                }
            }
        }
        let g = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        self.push(
            Tensor::new(vec![n, o, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            g,
            "conv2d",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        kind: &str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if !trailing_broadcast(av.dims(), bv.dims()) {
            return Err(Error::shape(format!(
                "{kind} {:?} with {:?}",
                av.dims(),
                bv.dims()
            )));
        }
        let nb = bv.numel();
        let out: Vec<F> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % nb]))
            .collect();
        Ok((
            Tensor::new(av.dims().to_vec(), out)?,
            self.g(a) || self.g(b),
        ))
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), g, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), g, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), g, "mul")
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let g = self.g(a);
        self.push(t, Op::Scale(a, s), g, "scale")
    }

    fn unary(&mut self, a: Var, op: Op<F>, kind: &str, f: impl Fn(F) -> F) -> Result<Var> {
        let t = self.value(a).map(f);
        let g = self.g(a);
        self.push(t, op, g, kind)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), "softplus", softplus)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(F::zero()))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), "silu", |x| x * sigmoid(x))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        let g = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s: F = av.data().iter().copied().sum::<F>() / F::c(av.numel() as f64);
        let g = self.g(a);
        self.push(Tensor::scalar(s), Op::Mean(a), g, "mean")
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape(format!(
                "mse {:?} vs {:?}",
                av.dims(),
                bv.dims()
            )));
        }
        let s: F = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum::<F>()
            / F::c(av.numel() as f64);
        let g = self.g(a) || self.g(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), g, "mse")
    }

    /// Mean of `softplus(z) − y·z`, the binary cross-entropy of logits `z`
    /// against targets `y ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Result<Var> {
        let zv = self.value(logits);
        if zv.numel() != targets.len() {
            return Err(Error::shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                zv.numel(),
                targets.len()
            )));
        }
        let s: F = zv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<F>()
            / F::c(zv.numel() as f64);
        let g = self.g(logits);
        self.push(
            Tensor::scalar(s),
            Op::BceWithLogits(logits, targets.into()),
            g,
            "bce_with_logits",
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = self.value(*first).dims()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.dims()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat {:?} with trailing {tail:?}",
                    v.dims()
                )));
            }
            lead += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let g = parts.iter().any(|p| self.g(*p));
        self.push(
            Tensor::new(dims, data)?,
            Op::Concat(parts.to_vec()),
            g,
            "concat",
        )
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let t = (*self.value_arc(a)).clone().reshape(dims)?;
        let g = self.g(a);
        self.push(t, Op::Reshape(a), g, "reshape")
    }

    /// Gather rows `idx` of `table: [V, d]`.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.dims();
        if d.len() != 2 {
            return Err(Error::shape(format!("embedding table {d:?}")));
        }
        let (v, w) = (d[0], d[1]);
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= v {
                return Err(Error::shape(format!("embedding index {i} >= {v}")));
            }
            data.extend_from_slice(&tv.data()[i * w..(i + 1) * w]);
        }
        let g = self.g(table);
        self.push(
            Tensor::new(vec![idx.len(), w], data)?,
            Op::Embed {
                table,
                idx: idx.to_vec(),
            },
            g,
            "embed",
        )
    }

    /// Gradients of a scalar loss with respect to every named leaf that
    /// requires gradient. Unreachable leaves receive zeros.
    pub fn backward(&self, loss: Var) -> Result<GradMap<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        let mut out = GradMap::new();
        for (name, v) in &self.leaves {
            if !self.nodes[v.0].grad {
                continue;
            }
            let dims = self.value(*v).dims().to_vec();
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => Tensor::new(dims, g)?,
                None => Tensor::zeros(&dims),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(slot);
    }

    fn acc_broadcast(&self, grads: &mut [Option<Vec<F>>], v: Var, gout: &[F], sign: F) {
        self.acc(grads, v, |s| {
            let nb = s.len();
            for (i, g) in gout.iter().enumerate() {
                s[i % nb] += sign * *g;
            }
        });
    }

    fn backprop_node(&self, node: &Node<F>, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                self.acc(grads, *a, |s| {
                    for i in 0..m {
                        for p in 0..k {
                            s[i * k + p] +=
                                dot(&gout[i * n..(i + 1) * n], &bv.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            axpy(aip, &gout[i * n..(i + 1) * n], &mut s[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, inp, outp) = (xv.dims()[0], xv.dims()[1], wv.dims()[0]);
                self.acc(grads, *x, |s| {
                    for i in 0..m {
                        let row = &mut s[i * inp..(i + 1) * inp];
                        for o in 0..outp {
                            let go = gout[i * outp + o];
                            if go != F::zero() {
                                axpy(go, &wv.data()[o * inp..(o + 1) * inp], row);
                            }
                        }
                    }
                });
                self.acc(grads, *w, |s| {
                    for i in 0..m {
                        let xr = &xv.data()[i * inp..(i + 1) * inp];
                        for o in 0..outp {
                            let go = gout[i * outp + o];
                            if go != F::zero() {
                                axpy(go, xr, &mut s[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |s| {
                        for row in gout.chunks(outp) {
                            for (sb, g) in s.iter_mut().zip(row) {
                                *sb += *g;
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let d = self.value(*a).dims();
                let (r, c) = (d[0], d[1]);
                self.acc(grads, *a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, &node.value, gout, grads);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| {
                    for (si, g) in s.iter_mut().zip(gout) {
                        *si += *g;
                    }
                });
                self.acc_broadcast(grads, *b, gout, F::one());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| {
                    for (si, g) in s.iter_mut().zip(gout) {
                        *si += *g;
                    }
                });
                self.acc_broadcast(grads, *b, gout, -F::one());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.numel();
                self.acc(grads, *a, |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += gout[i] * bv.data()[i % nb];
                    }
                });
                self.acc(grads, *b, |s| {
                    for (i, g) in gout.iter().enumerate() {
                        s[i % nb] += *g * av.data()[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |s| {
                    for (si, g) in s.iter_mut().zip(gout) {
                        *si += *g * *k;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += gout[i] * y[i] * (F::one() - y[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += gout[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        if x[i] > F::zero() {
                            s[i] += gout[i];
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(x[i]);
                        s[i] += gout[i] * sg * (F::one() + x[i] * (F::one() - sg));
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gout[0];
                self.acc(grads, *a, |s| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(a) => {
                let n = F::c(self.value(*a).numel() as f64);
                let g0 = gout[0] / n;
                self.acc(grads, *a, |s| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = F::c(2.0) * gout[0] / F::c(av.numel() as f64);
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += k * (av.data()[i] - bv.data()[i]);
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] -= k * (av.data()[i] - bv.data()[i]);
                    }
                });
            }
            Op::BceWithLogits(z, y) => {
                let zv = self.value(*z).data();
                let k = gout[0] / F::c(zv.len() as f64);
                self.acc(grads, *z, |s| {
                    for i in 0..s.len() {
                        s[i] += k * (sigmoid(zv[i]) - y[i]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.acc(grads, *p, |s| {
                        for (si, g) in s.iter_mut().zip(&gout[off..off + n]) {
                            *si += *g;
                        }
                    });
                    off += n;
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |s| {
                    for (si, g) in s.iter_mut().zip(gout) {
                        *si += *g;
                    }
                });
            }
            Op::Embed { table, idx } => {
                let w = self.value(*table).dims()[1];
                self.acc(grads, *table, |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            s[i * w + j] += gout[r * w + j];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out: &Tensor<F>,
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, c, h, wdt) = (xv.dims()[0], xv.dims()[1], xv.dims()[2], xv.dims()[3]);
        let (o, k) = (wv.dims()[0], wv.dims()[2]);
        let (ho, wo) = (out.dims()[2], out.dims()[3]);
        let xs = xv.data();
        let ws = wv.data();
        // Visit every (output, tap) pair once; `f` receives flat indices of
        // the input pixel and the kernel weight.
        let visit = |mut f: Box<dyn FnMut(usize, usize, F) + '_>| {
            for ni in 0..n {
                for oc in 0..o {
                    let gbase = (ni * o + oc) * ho * wo;
                    for ic in 0..c {
                        let xbase = (ni * c + ic) * h * wdt;
                        let kbase = (oc * c + ic) * k * k;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = gout[gbase + oy * wo + ox];
                                if g == F::zero() {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wdt as isize {
                                            continue;
                                        }
                                        f(
                                            xbase + iy as usize * wdt + ix as usize,
                                            kbase + ky * k + kx,
                                            g,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        if self.g(x) {
            let mut dx = vec![F::zero(); xs.len()];
            visit(Box::new(|xi, ki, g| dx[xi] += g * ws[ki]));
            self.acc(grads, x, |s| {
                for (si, d) in s.iter_mut().zip(&dx) {
                    *si += *d;
                }
            });
        }
        if self.g(w) {
            let mut dw = vec![F::zero(); ws.len()];
            visit(Box::new(|xi, ki, g| dw[ki] += g * xs[xi]));
            self.acc(grads, w, |s| {
                for (si, d) in s.iter_mut().zip(&dw) {
                    *si += *d;
                }
            });
        }
        if let Some(b) = b {
            self.acc(grads, b, |s| {
                for ni in 0..n {
                    for oc in 0..o {
                        let base = (ni * o + oc) * ho * wo;
                        s[oc] += gout[base..base + ho * wo].iter().copied().sum::<F>();
                    }
                }
            });
        }
    }
}
