use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{ensure, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle of a tensor's record on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

type Backward<S> = Box<dyn Fn(&[S]) -> Vec<Vec<S>>>;

struct Node<S> {
    numel: usize,
    inputs: Vec<Option<usize>>,
    // None marks a leaf.
    backward: Option<Backward<S>>,
}

/// Second operand of [`Tape::elementwise`]. Only exact-shape tensors and
/// scalars are accepted; there is no general broadcasting.
#[derive(Clone, Copy)]
pub enum Operand<'a, S: Real> {
    Tensor(&'a Tensor<S>),
    Scalar(S),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
}

/// Records differentiable ops in creation order, which is a topological
/// order, so backward is a single reverse sweep.
pub struct Tape<S: Real> {
    id: u64,
    recording: bool,
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<S: Real> {
    tape: u64,
    grads: HashMap<usize, Vec<S>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of a leaf registered on the tape; `None` for anything else.
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(&node.index).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A tape that never records; ops only compute values.
    pub fn no_grad() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register `t` as a grad-enabled leaf. On a non-recording tape the
    /// tensor comes back untracked.
    pub fn leaf(&self, t: &Tensor<S>) -> Tensor<S> {
        if !self.recording {
            return t.detached();
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { numel: t.numel(), inputs: Vec::new(), backward: None });
        t.detached().with_node(Some(NodeId { tape: self.id, index }))
    }

    fn resolve(&self, t: &Tensor<S>) -> Result<Option<usize>> {
        if !self.recording {
            return Ok(None);
        }
        match t.node() {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::Contract("tensor is tracked on a different tape".into())),
        }
    }

    fn record<F>(&self, op: &str, shape: Vec<usize>, data: Vec<S>, inputs: &[&Tensor<S>], backward: F) -> Result<Tensor<S>>
    where
        F: Fn(&[S]) -> Vec<Vec<S>> + 'static,
    {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        let out = Tensor::from_parts(shape, data);
        let ids = inputs.iter().map(|t| self.resolve(t)).collect::<Result<Vec<_>>>()?;
        if ids.iter().all(Option::is_none) {
            return Ok(out);
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { numel: out.numel(), inputs: ids, backward: Some(Box::new(backward)) });
        Ok(out.with_node(Some(NodeId { tape: self.id, index })))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape. Every leaf on the
    /// tape gets a gradient (zeros when the loss does not depend on it).
    pub fn backward(self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        ensure!(loss.numel() == 1, Contract, "backward needs a scalar loss, got shape {:?}", loss.shape());
        let root = match loss.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => return Err(Error::Contract("loss is not recorded on this tape".into())),
        };
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    leaves.insert(i, g);
                }
                Some(bw) => {
                    let parts = bw(&g);
                    for (input, part) in node.inputs.iter().zip(parts) {
                        let Some(j) = *input else { continue };
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&part).for_each(|(a, p)| *a += *p),
                            slot @ None => *slot = Some(part),
                        }
                    }
                }
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.backward.is_none() {
                leaves.entry(i).or_insert_with(|| vec![S::zero(); node.numel]);
            }
        }
        Ok(Gradients { tape: self.id, grads: leaves })
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        ensure!(k == k2, Dimension, "matmul inner dims {}x{} · {}x{}", m, k, k2, n);
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let (ad, bd) = (Arc::clone(&a.data), Arc::clone(&b.data));
        self.record("matmul", vec![m, n], out, &[a, b], move |g| {
            let mut ga = vec![S::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += g[i * n + j] * bd[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            let mut gb = vec![S::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    for j in 0..n {
                        gb[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        })
    }

    pub fn transpose(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = a.dims2()?;
        let out = transpose_raw(a.data(), m, n);
        self.record("transpose", vec![n, m], out, &[a], move |g| vec![transpose_raw(g, n, m)])
    }

    // ----- elementwise ----------------------------------------------------

    pub fn elementwise(&self, op: ElementwiseOp, a: &Tensor<S>, b: Operand<'_, S>) -> Result<Tensor<S>> {
        match (op, b) {
            (ElementwiseOp::Scale, Operand::Tensor(_)) => {
                Err(Error::Dimension("scale takes a scalar operand".into()))
            }
            (ElementwiseOp::Add, Operand::Scalar(s)) => {
                let out = a.data().iter().map(|&x| x + s).collect();
                self.record("add_scalar", a.shape().to_vec(), out, &[a], |g| vec![g.to_vec()])
            }
            (ElementwiseOp::Sub, Operand::Scalar(s)) => {
                let out = a.data().iter().map(|&x| x - s).collect();
                self.record("sub_scalar", a.shape().to_vec(), out, &[a], |g| vec![g.to_vec()])
            }
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => {
                let out = a.data().iter().map(|&x| x * s).collect();
                self.record("scale", a.shape().to_vec(), out, &[a], move |g| {
                    vec![g.iter().map(|&v| v * s).collect()]
                })
            }
            (_, Operand::Tensor(b)) => {
                ensure!(
                    a.shape() == b.shape(),
                    Dimension,
                    "elementwise shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let (ad, bd) = (a.data(), b.data());
                match op {
                    ElementwiseOp::Add => {
                        let out = ad.iter().zip(bd).map(|(&x, &y)| x + y).collect();
                        self.record("add", a.shape().to_vec(), out, &[a, b], |g| vec![g.to_vec(), g.to_vec()])
                    }
                    ElementwiseOp::Sub => {
                        let out = ad.iter().zip(bd).map(|(&x, &y)| x - y).collect();
                        self.record("sub", a.shape().to_vec(), out, &[a, b], |g| {
                            vec![g.to_vec(), g.iter().map(|&v| -v).collect()]
                        })
                    }
                    _ => {
                        let out = ad.iter().zip(bd).map(|(&x, &y)| x * y).collect();
                        let (ac, bc) = (Arc::clone(&a.data), Arc::clone(&b.data));
                        self.record("mul", a.shape().to_vec(), out, &[a, b], move |g| {
                            vec![
                                g.iter().zip(bc.iter()).map(|(&v, &y)| v * y).collect(),
                                g.iter().zip(ac.iter()).map(|(&v, &x)| v * x).collect(),
                            ]
                        })
                    }
                }
            }
        }
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(ElementwiseOp::Add, a, Operand::Tensor(b))
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(ElementwiseOp::Sub, a, Operand::Tensor(b))
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        self.elementwise(ElementwiseOp::Mul, a, Operand::Tensor(b))
    }

    pub fn scale(&self, a: &Tensor<S>, s: S) -> Result<Tensor<S>> {
        self.elementwise(ElementwiseOp::Scale, a, Operand::Scalar(s))
    }

    pub fn add_scalar(&self, a: &Tensor<S>, s: S) -> Result<Tensor<S>> {
        self.elementwise(ElementwiseOp::Add, a, Operand::Scalar(s))
    }

    /// `x[n×d] + b[d]` row-wise; the one broadcast the model needs for biases.
    pub fn add_row(&self, x: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = x.dims2()?;
        ensure!(b.numel() == d, Dimension, "row bias of {} for width {}", b.numel(), d);
        let bd = b.data();
        let out = x.data().chunks(d).flat_map(|row| row.iter().zip(bd).map(|(&v, &c)| v + c)).collect();
        self.record("add_row", vec![n, d], out, &[x, b], move |g| {
            let mut gb = vec![S::zero(); d];
            for row in g.chunks(d) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            vec![g.to_vec(), gb]
        })
    }

    fn unary<F, D>(&self, op: &str, a: &Tensor<S>, f: F, df: D) -> Result<Tensor<S>>
    where
        F: Fn(S) -> S,
        D: Fn(S, S) -> S + 'static,
    {
        let out: Vec<S> = a.data().iter().map(|&x| f(x)).collect();
        let (xs, ys) = (Arc::clone(&a.data), Arc::new(out.clone()));
        self.record(op, a.shape().to_vec(), out, &[a], move |g| {
            vec![g.iter().zip(xs.iter().zip(ys.iter())).map(|(&v, (&x, &y))| v * df(x, y)).collect()]
        })
    }

    pub fn exp(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary("exp", a, S::exp, |_, y| y)
    }

    pub fn log(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(a.data().iter().all(|&x| x > S::zero()), Contract, "log of non-positive value");
        self.unary("log", a, S::ln, |x, _| S::one() / x)
    }

    pub fn abs(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        self.unary("abs", a, S::abs, |x, _| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: &Tensor<S>, lo: S, hi: S) -> Result<Tensor<S>> {
        ensure!(lo <= hi, Contract, "clamp bounds {} > {}", lo, hi);
        self.unary("clamp", a, move |x| x.max(lo).min(hi), move |x, _| {
            if x < lo || x > hi {
                S::zero()
            } else {
                S::one()
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
        let k = S::lit(0.044715);
        let half = S::lit(0.5);
        self.unary(
            "gelu",
            a,
            move |x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (S::one() + t)
                    + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x)
            },
        )
    }

    /// Per-component Huber: `r²/2` for `|r| ≤ ε`, `ε(|r| − ε/2)` beyond.
    pub fn huber(&self, a: &Tensor<S>, epsilon: S) -> Result<Tensor<S>> {
        ensure!(epsilon > S::zero(), Config, "huber epsilon must be positive");
        let half = S::lit(0.5);
        self.unary(
            "huber",
            a,
            move |x| if x.abs() <= epsilon { half * x * x } else { epsilon * (x.abs() - half * epsilon) },
            move |x, _| if x.abs() <= epsilon { x } else { epsilon * x.signum() },
        )
    }

    // ----- reductions and reshaping ----------------------------------------

    pub fn sum(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        let n = a.numel();
        let total = a.data().iter().copied().sum();
        self.record("sum", vec![], vec![total], &[a], move |g| vec![vec![g[0]; n]])
    }

    pub fn mean(&self, a: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(a.numel() > 0, Dimension, "mean of empty tensor");
        let s = self.sum(a)?;
        self.scale(&s, S::one() / S::lit(a.numel() as f64))
    }

    /// Column means of `x[n×d]`, shape `[d]`.
    pub fn mean_rows(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = x.dims2()?;
        ensure!(n > 0, Dimension, "mean_rows of zero rows");
        let inv = S::one() / S::lit(n as f64);
        let mut out = vec![S::zero(); d];
        for row in x.data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.record("mean_rows", vec![d], out, &[x], move |g| {
            vec![(0..n * d).map(|i| g[i % d] * inv).collect()]
        })
    }

    pub fn reshape(&self, a: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>> {
        ensure!(
            shape.iter().product::<usize>() == a.numel(),
            Dimension,
            "cannot reshape {:?} to {:?}",
            a.shape(),
            shape
        );
        self.record("reshape", shape.to_vec(), a.data().to_vec(), &[a], |g| vec![g.to_vec()])
    }

    pub fn slice_rows(&self, x: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
        let (n, d) = x.dims2()?;
        ensure!(start <= end && end <= n, Bounds, "row slice {}..{} of {}", start, end, n);
        let out = x.data()[start * d..end * d].to_vec();
        self.record("slice_rows", vec![end - start, d], out, &[x], move |g| {
            let mut gx = vec![S::zero(); n * d];
            gx[start * d..end * d].copy_from_slice(g);
            vec![gx]
        })
    }

    pub fn slice_cols(&self, x: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
        let (n, d) = x.dims2()?;
        ensure!(start <= end && end <= d, Bounds, "column slice {}..{} of {}", start, end, d);
        let w = end - start;
        let out = x.data().chunks(d).flat_map(|row| row[start..end].iter().copied()).collect();
        self.record("slice_cols", vec![n, w], out, &[x], move |g| {
            let mut gx = vec![S::zero(); n * d];
            for (r, row) in g.chunks(w.max(1)).enumerate().take(n) {
                gx[r * d + start..r * d + end].copy_from_slice(&row[..w]);
            }
            vec![gx]
        })
    }

    pub fn concat_rows(&self, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        ensure!(!parts.is_empty(), Dimension, "concat of zero tensors");
        let d = parts[0].dims2()?.1;
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (n, pd) = p.dims2()?;
            ensure!(pd == d, Dimension, "concat_rows widths {} vs {}", pd, d);
            rows.push(n);
            out.extend_from_slice(p.data());
        }
        let total: usize = rows.iter().sum();
        self.record("concat_rows", vec![total, d], out, parts, move |g| {
            let mut off = 0;
            rows.iter()
                .map(|&n| {
                    let part = g[off * d..(off + n) * d].to_vec();
                    off += n;
                    part
                })
                .collect()
        })
    }

    pub fn concat_cols(&self, parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        ensure!(!parts.is_empty(), Dimension, "concat of zero tensors");
        let n = parts[0].dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, w) = p.dims2()?;
            ensure!(pn == n, Dimension, "concat_cols heights {} vs {}", pn, n);
            widths.push(w);
        }
        let d: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        self.record("concat_cols", vec![n, d], out, parts, move |g| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut part = Vec::with_capacity(n * w);
                    for r in 0..n {
                        part.extend_from_slice(&g[r * d + off..r * d + off + w]);
                    }
                    off += w;
                    part
                })
                .collect()
        })
    }

    /// `out[i] = flat(x)[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: &Tensor<S>, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<S>> {
        ensure!(
            shape.iter().product::<usize>() == indices.len(),
            Dimension,
            "gather shape {:?} for {} indices",
            shape,
            indices.len()
        );
        let n = x.numel();
        ensure!(indices.iter().all(|&i| i < n), Bounds, "gather index out of range for {} elements", n);
        let xd = x.data();
        let out = indices.iter().map(|&i| xd[i]).collect();
        self.record("gather", shape.to_vec(), out, &[x], move |g| {
            let mut gx = vec![S::zero(); n];
            for (&i, &v) in indices.iter().zip(g) {
                gx[i] += v;
            }
            vec![gx]
        })
    }

    // ----- normalisation and attention ---------------------------------------

    /// Row softmax with max subtraction. Masked entries (`false`) are exactly 0.
    pub fn softmax_rows(&self, x: &Tensor<S>, mask: Option<&[bool]>) -> Result<Tensor<S>> {
        let (r, c) = x.dims2()?;
        if let Some(m) = mask {
            ensure!(m.len() == r * c, Dimension, "mask of {} for {}x{}", m.len(), r, c);
        }
        let allowed = |i: usize| mask.is_none_or(|m| m[i]);
        let xd = x.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = i * c;
            let mut max = S::neg_infinity();
            for j in 0..c {
                if allowed(row + j) && xd[row + j] > max {
                    max = xd[row + j];
                }
            }
            ensure!(max > S::neg_infinity(), Contract, "softmax row {} is fully masked", i);
            let mut sum = S::zero();
            for j in 0..c {
                if allowed(row + j) {
                    let e = (xd[row + j] - max).exp();
                    out[row + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                out[row + j] /= sum;
            }
        }
        let y = Arc::new(out.clone());
        self.record("softmax_rows", vec![r, c], out, &[x], move |g| {
            let mut gx = vec![S::zero(); r * c];
            for i in 0..r {
                let row = i * c..(i + 1) * c;
                let dot: S = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                for j in row {
                    gx[j] = y[j] * (g[j] - dot);
                }
            }
            vec![gx]
        })
    }

    /// Layer norm over the last axis with epsilon 1e-5 inside the root.
    pub fn layer_norm(&self, x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let d = x.last_dim();
        ensure!(x.rank() >= 1 && d >= 2, Dimension, "layer_norm needs d >= 2, got {:?}", x.shape());
        ensure!(gain.numel() == d && bias.numel() == d, Dimension, "layer_norm affine params must have {} entries", d);
        let eps = S::lit(1e-5);
        let inv_d = S::one() / S::lit(d as f64);
        let rows = x.numel() / d;
        let mut xhat = vec![S::zero(); x.numel()];
        let mut rstd = vec![S::zero(); rows];
        for (r, row) in x.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (gd, bd) = (gain.data(), bias.data());
        let out = xhat.chunks(d).flat_map(|row| (0..d).map(move |j| row[j] * gd[j] + bd[j])).collect();
        let gain_c = Arc::clone(&gain.data);
        self.record("layer_norm", x.shape().to_vec(), out, &[x, gain, bias], move |g| {
            let mut gx = vec![S::zero(); rows * d];
            let mut gg = vec![S::zero(); d];
            let mut gb = vec![S::zero(); d];
            for r in 0..rows {
                let span = r * d..(r + 1) * d;
                let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                let mut mean_gx = S::zero();
                let mut mean_gxx = S::zero();
                for j in 0..d {
                    let gxh = gr[j] * gain_c[j];
                    mean_gx += gxh;
                    mean_gxx += gxh * xr[j];
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
                mean_gx *= inv_d;
                mean_gxx *= inv_d;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] * gain_c[j] - mean_gx - xr[j] * mean_gxx);
                }
            }
            vec![gx, gg, gb]
        })
    }

    // ----- small geometric primitives ------------------------------------------

    /// Euclidean norm of every row of `x[n×c]`, shape `[n]`.
    pub fn row_norm(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c) = x.dims2()?;
        let out: Vec<S> = x.data().chunks(c).map(|row| row.iter().map(|&v| v * v).sum::<S>().sqrt()).collect();
        let (xs, norms) = (Arc::clone(&x.data), Arc::new(out.clone()));
        self.record("row_norm", vec![n], out, &[x], move |g| {
            let mut gx = vec![S::zero(); n * c];
            for r in 0..n {
                if norms[r] > S::zero() {
                    let k = g[r] / norms[r];
                    for j in 0..c {
                        gx[r * c + j] = k * xs[r * c + j];
                    }
                }
            }
            vec![gx]
        })
    }

    /// Scale a vector to unit length. A vector with norm below 1e-12 is
    /// nudged along its first axis before normalising.
    pub fn normalize(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut v = x.data().to_vec();
        let mut norm = v.iter().map(|&a| a * a).sum::<S>().sqrt();
        if norm < S::lit(1e-12) {
            log::warn!("normalize: near-zero vector (norm {}), perturbing first component", norm);
            v[0] += S::lit(1e-6);
            norm = v.iter().map(|&a| a * a).sum::<S>().sqrt();
        }
        let out: Vec<S> = v.iter().map(|&a| a / norm).collect();
        let y = Arc::new(out.clone());
        self.record("normalize", x.shape().to_vec(), out, &[x], move |g| {
            let dot: S = g.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
            vec![g.iter().zip(y.iter()).map(|(&gi, &yi)| (gi - yi * dot) / norm).collect()]
        })
    }

    /// Hamilton product of `(w, x, y, z)` quaternions.
    pub fn quat_mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(a.numel() == 4 && b.numel() == 4, Dimension, "quat_mul needs 4-vectors");
        let (qa, qb) = (quat4(a.data()), quat4(b.data()));
        let out = quat_mul_raw(qa, qb).to_vec();
        self.record("quat_mul", vec![4], out, &[a, b], move |g| {
            let ra = right_mat(qb);
            let la = left_mat(qa);
            let ga = (0..4).map(|c| (0..4).map(|r| ra[r][c] * g[r]).sum()).collect();
            let gb = (0..4).map(|c| (0..4).map(|r| la[r][c] * g[r]).sum()).collect();
            vec![ga, gb]
        })
    }

    /// `(w, x, y, z)` → `(w, −x, −y, −z)`.
    pub fn quat_conj(&self, q: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(q.numel() == 4, Dimension, "quat_conj needs a 4-vector");
        let sign = Tensor::from_vec(vec![S::one(), -S::one(), -S::one(), -S::one()]);
        self.mul(&self.reshape(q, &[4])?, &sign)
    }

    /// Rotation matrix `[3×3]` of a unit quaternion `(w, x, y, z)`.
    pub fn quat_to_rotmat(&self, q: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(q.numel() == 4, Dimension, "quat_to_rotmat needs a 4-vector");
        let [w, x, y, z] = quat4(q.data());
        let out = rotmat_raw([w, x, y, z]).to_vec();
        self.record("quat_to_rotmat", vec![3, 3], out, &[q], move |g| {
            let two = S::lit(2.0);
            let four = S::lit(4.0);
            let zero = S::zero();
            let dw = [zero, -two * z, two * y, two * z, zero, -two * x, -two * y, two * x, zero];
            let dx = [zero, two * y, two * z, two * y, -four * x, -two * w, two * z, two * w, -four * x];
            let dy = [-four * y, two * x, two * w, two * x, zero, two * z, -two * w, two * z, -four * y];
            let dz = [-four * z, -two * w, two * x, two * w, -four * z, two * y, two * x, two * y, zero];
            let dot = |d: &[S; 9]| d.iter().zip(g).map(|(&a, &b)| a * b).sum::<S>();
            vec![vec![dot(&dw), dot(&dx), dot(&dy), dot(&dz)]]
        })
    }

    /// Rotation vector (axis × angle) of a unit quaternion, taking the
    /// shortest arc.
    pub fn quat_log(&self, q: &Tensor<S>) -> Result<Tensor<S>> {
        ensure!(q.numel() == 4, Dimension, "quat_log needs a 4-vector");
        let raw = quat4(q.data());
        let sign = if raw[0] < S::zero() { -S::one() } else { S::one() };
        let [w, x, y, z] = raw.map(|c| c * sign);
        let n = (x * x + y * y + z * z).sqrt();
        let two = S::lit(2.0);
        let (k, dk_over_n) = if n < S::lit(1e-4) {
            let w3 = w * w * w;
            (two / w - S::lit(2.0 / 3.0) * n * n / w3, -S::lit(4.0 / 3.0) / w3)
        } else {
            let theta = two * n.atan2(w);
            let k = theta / n;
            let dtheta_dn = two * w / (n * n + w * w);
            (k, (dtheta_dn - k) / (n * n))
        };
        let out = vec![k * x, k * y, k * z];
        let dk_dw = -two / (n * n + w * w);
        self.record("quat_log", vec![3], out, &[q], move |g| {
            let v = [x, y, z];
            let gv: S = g.iter().zip(&v).map(|(&a, &b)| a * b).sum();
            let gw = gv * dk_dw;
            let gxyz: Vec<S> = (0..3).map(|i| k * g[i] + gv * dk_over_n * v[i]).collect();
            vec![vec![sign * gw, sign * gxyz[0], sign * gxyz[1], sign * gxyz[2]]]
        })
    }

    /// Forward difference of an `[h·w × c]` image along x (`axis = 0`) or
    /// y (`axis = 1`); the last column / row is 0.
    pub fn spatial_diff(&self, x: &Tensor<S>, h: usize, w: usize, axis: usize) -> Result<Tensor<S>> {
        let (n, c) = x.dims2()?;
        ensure!(n == h * w, Dimension, "spatial_diff: {} rows for {}x{}", n, h, w);
        ensure!(h >= 2 && w >= 2 && axis < 2, Dimension, "spatial_diff needs h, w >= 2");
        let step = if axis == 0 { 1 } else { w };
        let has_next = move |p: usize| if axis == 0 { p % w + 1 < w } else { p / w + 1 < h };
        let xd = x.data();
        let mut out = vec![S::zero(); n * c];
        for p in 0..n {
            if has_next(p) {
                for ch in 0..c {
                    out[p * c + ch] = xd[(p + step) * c + ch] - xd[p * c + ch];
                }
            }
        }
        self.record("spatial_diff", vec![n, c], out, &[x], move |g| {
            let mut gx = vec![S::zero(); n * c];
            for p in 0..n {
                if has_next(p) {
                    for ch in 0..c {
                        let v = g[p * c + ch];
                        gx[(p + step) * c + ch] += v;
                        gx[p * c + ch] -= v;
                    }
                }
            }
            vec![gx]
        })
    }
}

pub(crate) fn matmul_raw<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<S: Real>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn quat4<S: Real>(d: &[S]) -> [S; 4] {
    [d[0], d[1], d[2], d[3]]
}

pub(crate) fn quat_mul_raw<S: Real>(a: [S; 4], b: [S; 4]) -> [S; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

// a ⊗ b = right_mat(b) · a
fn right_mat<S: Real>(b: [S; 4]) -> [[S; 4]; 4] {
    let [w, x, y, z] = b;
    [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
}

// a ⊗ b = left_mat(a) · b
fn left_mat<S: Real>(a: [S; 4]) -> [[S; 4]; 4] {
    let [w, x, y, z] = a;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}

pub(crate) fn rotmat_raw<S: Real>(q: [S; 4]) -> [S; 9] {
    let [w, x, y, z] = q;
    let one = S::one();
    let two = S::lit(2.0);
    [
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    ]
}
