//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients additively into each input, so a value used twice
//! receives the sum of both contributions.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    L2Normalize {
        a: Var,
        axis: usize,
        norms: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<i32>,
        known: usize,
    },
    Kl {
        p: Var,
        q: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: kernels::ConvGeom,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Kl { .. } => "kl_divergence",
            Op::BatchNorm { .. } => "batch_norm",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, format!("{:?} vs {:?}", a, b));
    }
    Ok(())
}

/// (outer, n, inner) split of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn raw(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.check_finite("leaf")?;
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn variable(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same handle so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let entry = store.entry(id);
        let mut t = entry.tensor.clone();
        t.requires_grad = entry.trainable;
        let v = self.leaf(t)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `a[r×k] · b[k×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{:?} · {:?}", sa, sb));
        }
        let out = kernels::matmul(self.raw(a), self.raw(b), sa[0], sa[1], sb[1]);
        self.push(
            Tensor::new(vec![sa[0], sb[1]], out)?,
            Op::MatMul { a, b },
            &[a, b],
        )
    }

    /// Affine map `x · wᵀ + b` with `w[out×in]`. `x` is `[in]` or `[n×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return shape_err("linear", format!("weight must be 2-D, got {:?}", sw));
        }
        let (out_f, in_f) = (sw[0], sw[1]);
        let (rows, vector) = match sx.as_slice() {
            [n] if *n == in_f => (1, true),
            [r, n] if *n == in_f => (*r, false),
            _ => return shape_err("linear", format!("input {:?} vs weight {:?}", sx, sw)),
        };
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return shape_err(
                    "linear",
                    format!("bias {:?} vs {} outputs", self.shape(b), out_f),
                );
            }
        }
        let xd = self.raw(x);
        let wd = self.raw(w);
        let mut out = vec![T::zero(); rows * out_f];
        for r in 0..rows {
            let xr = &xd[r * in_f..(r + 1) * in_f];
            for o in 0..out_f {
                out[r * out_f + o] = kernels::dot(xr, &wd[o * in_f..(o + 1) * in_f]);
            }
        }
        if let Some(b) = b {
            let bd = self.raw(b);
            for r in 0..rows {
                for o in 0..out_f {
                    out[r * out_f + o] += bd[o];
                }
            }
        }
        let shape = if vector {
            vec![out_f]
        } else {
            vec![rows, out_f]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::Linear { x, w, b, rows },
            &inputs,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err("transpose", format!("needs 2-D, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.raw(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }, &[a])
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (numel(&sa), numel(&sb));
        let (ad, bd) = (self.raw(a), self.raw(b));
        let (shape, out): (Vec<usize>, Vec<T>) = if sa == sb {
            (sa, ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect())
        } else if nb == 1 {
            let y = bd[0];
            (sa, ad.iter().map(|&x| f(x, y)).collect())
        } else if na == 1 {
            let x = ad[0];
            (sb, bd.iter().map(|&y| f(x, y)).collect())
        } else {
            return shape_err(
                name,
                format!("{:?} vs {:?} (only scalar broadcasting)", sa, sb),
            );
        };
        self.push(Tensor::new(shape, out)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.raw(a).iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::Scale { a, s }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.raw(a).iter().map(|&x| x + s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, Op::AddScalar { a }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.raw(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu { a },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err(
                "concat",
                format!("axis {} out of range for {:?}", axis, first),
            );
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err("concat", format!("{:?} vs {:?} on axis {}", s, first, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.raw(*p)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return shape_err(
                "slice",
                format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, s),
            );
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.raw(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.raw(a).to_vec())?;
        self.push(t, Op::Reshape { a }, &[a])
    }

    /// Rows `rows` of a 2-D tensor, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return shape_err("gather_rows", format!("needs 2-D, got {:?}", s));
        }
        if let Some(r) = rows.iter().find(|&&r| r >= s[0]) {
            return shape_err("gather_rows", format!("row {} out of {}", r, s[0]));
        }
        if rows.is_empty() {
            return shape_err("gather_rows", "no rows selected");
        }
        let d = self.raw(a);
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            out.extend_from_slice(&d[r * s[1]..(r + 1) * s[1]]);
        }
        let t = Tensor::new(vec![rows.len(), s[1]], out)?;
        self.push(
            t,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// Token embedding lookup: rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.raw(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s: T = self.raw(a).iter().copied().sum();
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean { a }, &[a])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("mean_axis", format!("axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.raw(a);
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += *v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s;
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis { a, axis }, &[a])
    }

    // ── normalization ───────────────────────────────────────────────

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err("softmax", format!("axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let out = kernels::softmax(self.raw(a), outer, n, inner);
        self.push(Tensor::new(s, out)?, Op::Softmax { a, axis }, &[a])
    }

    /// Divides each fiber along `axis` by its L2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err("l2_normalize", format!("axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.raw(a);
        let floor = T::of(1e-12);
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = d[(o * n + k) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt().max(floor));
        let mut out = d.to_vec();
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[(o * n + k) * inner + i] /= norms[o * inner + i];
                }
            }
        }
        self.push(
            Tensor::new(s, out)?,
            Op::L2Normalize { a, axis, norms },
            &[a],
        )
    }

    /// Training-mode batch norm over `x[C×H×W]`, statistics per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (c, hw) = self.bn_check(x, gamma, beta)?;
        let d = self.raw(x);
        let n = T::of(hw as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); c * hw];
        for ch in 0..c {
            let xs = &d[ch * hw..(ch + 1) * hw];
            let mu = xs.iter().copied().sum::<T>() / n;
            let v = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let inv = T::one() / (v + T::of(eps)).sqrt();
            for (h, &x) in xhat[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *h = (x - mu) * inv;
            }
            mean[ch] = mu;
            var[ch] = v;
            inv_std[ch] = inv;
        }
        let out = self.bn_affine(&xhat, gamma, beta, c, hw);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (c, hw) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batch_norm_eval", "running statistics length");
        }
        let d = self.raw(x);
        let mut xhat = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let inv = T::one() / (running_var[ch] + T::of(eps)).sqrt();
            inv_std[ch] = inv;
            for i in 0..hw {
                xhat[ch * hw + i] = (d[ch * hw + i] - running_mean[ch]) * inv;
            }
        }
        let out = self.bn_affine(&xhat, gamma, beta, c, hw);
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return shape_err("batch_norm", format!("needs C×H×W, got {:?}", s));
        }
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", "gamma/beta must have one entry per channel");
        }
        Ok((c, s[1] * s[2]))
    }

    fn bn_affine(&self, xhat: &[T], gamma: Var, beta: Var, c: usize, hw: usize) -> Vec<T> {
        let (g, b) = (self.raw(gamma), self.raw(beta));
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for i in 0..hw {
                out[ch * hw + i] = g[ch] * xhat[ch * hw + i] + b[ch];
            }
        }
        out
    }

    // ── convolution ─────────────────────────────────────────────────

    /// Cross-correlation of `x[C×H×W]` with `w[O×C×KH×KW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = kernels::ConvGeom::conv(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return shape_err("conv2d", "bias length must equal output channels");
            }
        }
        let out = kernels::conv2d_forward(self.raw(x), self.raw(w), b.map(|b| self.raw(b)), &geom);
        let shape = vec![geom.out_c, geom.out_h, geom.out_w];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d { x, w, b, geom },
            &inputs,
        )
    }

    /// Transposed convolution of `x[C×H×W]` with `w[C×O×KH×KW]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let geom =
            kernels::ConvGeom::transposed(self.shape(x), self.shape(w), stride, pad, out_pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_c] {
                return shape_err("conv_transpose2d", "bias length must equal output channels");
            }
        }
        let out = kernels::conv_t_forward(self.raw(x), self.raw(w), b.map(|b| self.raw(b)), &geom);
        let shape = vec![geom.out_c, geom.out_h, geom.out_w];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Tensor::new(shape, out)?,
            Op::ConvTranspose2d { x, w, b, geom },
            &inputs,
        )
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let n = self.value(a).len();
        if n == 0 {
            return shape_err("mse", "empty tensor");
        }
        let s: T = self
            .raw(a)
            .iter()
            .zip(self.raw(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(
            Tensor::scalar(s / T::of(n as f64)),
            Op::Mse { a, b },
            &[a, b],
        )
    }

    /// Mean per-pixel cross-entropy of class probabilities `probs[C×H×W]`
    /// against `targets[H·W]`. Negative targets mark unknown pixels and are
    /// excluded. Returns the loss and the number of known pixels; with no
    /// known pixels the loss is 0.
    pub fn cross_entropy_per_pixel(&mut self, probs: Var, targets: &[i32]) -> Result<(Var, usize)> {
        let s = self.shape(probs).to_vec();
        if s.len() != 3 || s[1] * s[2] != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("probs {:?} vs {} targets", s, targets.len()),
            );
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        if let Some(t) = targets.iter().find(|&&t| t >= c as i32) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: format!("target class {} with {} channels", t, c),
            });
        }
        let d = self.raw(probs);
        let floor = T::of(PROB_FLOOR);
        let mut total = T::zero();
        let mut known = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            known += 1;
            total -= d[t as usize * hw + i].max(floor).ln();
        }
        let loss = if known == 0 {
            T::zero()
        } else {
            total / T::of(known as f64)
        };
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                known,
            },
            &[probs],
        )?;
        Ok((v, known))
    }

    /// `Σ p·ln(p / q)` with `0·ln 0 = 0` and `q` floored at [`PROB_FLOOR`].
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        same_shape("kl_divergence", self.shape(p), self.shape(q))?;
        let v = kernels::kl(self.raw(p), self.raw(q));
        self.push(Tensor::scalar(v), Op::Kl { p, q }, &[p, q])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss`. Gradients are stored on
    /// every node that needs one and read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(
                "backward",
                format!("loss must be a single value, got {:?}", self.shape(loss)),
            );
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot => *slot = Some(g),
        }
    }

    fn acc_broadcast(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if self.value(v).len() == 1 && g.len() != 1 {
            let s = g.into_iter().sum();
            self.acc(grads, v, vec![s]);
        } else {
            self.acc(grads, v, g);
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let (ga, gb) = kernels::matmul_backward(self.raw(*a), self.raw(*b), g, r, k, c);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Linear { x, w, b, rows } => {
                let sw = self.shape(*w);
                let (out_f, in_f) = (sw[0], sw[1]);
                let (xd, wd) = (self.raw(*x), self.raw(*w));
                let mut gx = vec![T::zero(); rows * in_f];
                let mut gw = vec![T::zero(); out_f * in_f];
                for r in 0..*rows {
                    let xr = &xd[r * in_f..(r + 1) * in_f];
                    for o in 0..out_f {
                        let go = g[r * out_f + o];
                        if go == T::zero() {
                            continue;
                        }
                        kernels::axpy(
                            go,
                            &wd[o * in_f..(o + 1) * in_f],
                            &mut gx[r * in_f..(r + 1) * in_f],
                        );
                        kernels::axpy(go, xr, &mut gw[o * in_f..(o + 1) * in_f]);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); out_f];
                    for r in 0..*rows {
                        for o in 0..out_f {
                            gb[o] += g[r * out_f + o];
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                self.acc_broadcast(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.raw(*a), self.raw(*b));
                let pick = |d: &[T], j: usize| if d.len() == 1 { d[0] } else { d[j] };
                let ga = (0..g.len()).map(|j| g[j] * pick(bd, j)).collect();
                let gb = (0..g.len()).map(|j| g[j] * pick(ad, j)).collect();
                self.acc_broadcast(grads, *a, ga);
                self.acc_broadcast(grads, *b, gb);
            }
            Op::Scale { a, s } => self.acc(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar { a } => self.acc(grads, *a, g.to_vec()),
            Op::Relu { a } => {
                let ad = self.raw(*a);
                let ga = g
                    .iter()
                    .zip(ad)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid { a } => {
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Tanh { a } => {
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.acc(grads, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + n * inner]);
                    }
                    offset += n;
                    self.acc(grads, *p, gp);
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, n, inner) = axis_split(sa, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape { a } => self.acc(grads, *a, g.to_vec()),
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![T::zero(); r * c];
                for ii in 0..r {
                    for j in 0..c {
                        ga[ii * c + j] = g[j * r + ii];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum { a } => self.acc(grads, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean { a } => {
                let n = self.value(*a).len();
                self.acc(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::MeanAxis { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let inv = T::one() / T::of(n as f64);
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for ii in 0..inner {
                            ga[(o * n + k) * inner + ii] = g[o * inner + ii] * inv;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                self.acc(
                    grads,
                    *a,
                    kernels::softmax_backward(out, g, outer, n, inner),
                );
            }
            Op::L2Normalize { a, axis, norms } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let mut ga = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + ii;
                        let dot: T = (0..n).map(|k| out[idx(k)] * g[idx(k)]).sum();
                        let nrm = norms[o * inner + ii];
                        for k in 0..n {
                            ga[idx(k)] = (g[idx(k)] - out[idx(k)] * dot) / nrm;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Mse { a, b } => {
                let n = T::of(self.value(*a).len() as f64);
                let k = T::of(2.0) * g[0] / n;
                let ga: Vec<T> = self
                    .raw(*a)
                    .iter()
                    .zip(self.raw(*b))
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::CrossEntropy {
                probs,
                targets,
                known,
            } => {
                let d = self.raw(*probs);
                let mut gp = vec![T::zero(); d.len()];
                if *known > 0 {
                    let hw = targets.len();
                    let scale = g[0] / T::of(*known as f64);
                    let floor = T::of(PROB_FLOOR);
                    for (px, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let j = t as usize * hw + px;
                        if d[j] > floor {
                            gp[j] = -scale / d[j];
                        }
                    }
                }
                self.acc(grads, *probs, gp);
            }
            Op::Kl { p, q } => {
                let (gp, gq) = kernels::kl_backward(self.raw(*p), self.raw(*q), g[0]);
                self.acc(grads, *p, gp);
                self.acc(grads, *q, gq);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let hw = xhat.len() / c;
                let gm = self.raw(*gamma);
                let n = T::of(hw as f64);
                let mut gx = vec![T::zero(); c * hw];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    let gs = &g[ch * hw..(ch + 1) * hw];
                    let xs = &xhat[ch * hw..(ch + 1) * hw];
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    gb[ch] = sum_g;
                    gg[ch] = sum_gx;
                    let k = gm[ch] * inv_std[ch] / n;
                    for j in 0..hw {
                        gx[ch * hw + j] = k * (n * gs[j] - sum_g - xs[j] * sum_gx);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let hw = xhat.len() / c;
                let gm = self.raw(*gamma);
                let mut gx = vec![T::zero(); c * hw];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    for j in 0..hw {
                        let gv = g[ch * hw + j];
                        gx[ch * hw + j] = gv * gm[ch] * inv_std[ch];
                        gg[ch] += gv * xhat[ch * hw + j];
                        gb[ch] += gv;
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_x = self.nodes[x.0].needs_grad;
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.raw(*x), self.raw(*w), g, geom, need_x);
                if need_x {
                    self.acc(grads, *x, gx);
                }
                self.acc(grads, *w, gw);
                if let Some(b) = b {
                    self.acc(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv_t_backward(self.raw(*x), self.raw(*w), g, geom);
                self.acc(grads, *x, gx);
                self.acc(grads, *w, gw);
                if let Some(b) = b {
                    self.acc(grads, *b, gb);
                }
            }
            Op::GatherRows { a, rows } => {
                let s = self.shape(*a);
                let d = s[1];
                let mut ga = vec![T::zero(); s[0] * d];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        ga[r * d + j] += g[k * d + j];
                    }
                }
                self.acc(grads, *a, ga);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), d).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let r = g.matmul(i, m).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 3., 4.]);
        let p = g.constant(t(&[2, 2], &[1., 0., 0., 0.])).unwrap();
        let m2 = g.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        let r2 = g.matmul(p, m2).unwrap();
        assert_eq!(g.value(r2).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[2.0][..]));

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[0., 0.])).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let b = g.constant(t(&[2], &[1., 0.])).unwrap();
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.73106).abs() < 1e-5);
        assert!((g.value(s).data()[1] - 0.26894).abs() < 1e-5);
        let c = g.constant(t(&[2], &[1000., 0.])).unwrap();
        let s = g.softmax(c, 0).unwrap();
        assert_eq!(g.value(s).data()[0], 1.0);
        assert!(g.value(s).data()[1] < 1e-300);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::<f32>::new();
        let r = g.constant(Tensor::from_vec(vec![1.0, f32::NAN]));
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn conv_identity_and_sum() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let w = g.constant(t(&[1, 1, 1, 1], &[1.])).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(Tensor::full(vec![1, 3, 3], 1.0)).unwrap();
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(ones, k, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 2])).unwrap();
        let w = g.constant(Tensor::zeros(vec![1, 1, 3, 3])).unwrap();
        assert!(matches!(
            g.conv2d(x, w, None, 1, 0),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn kl_self_is_exactly_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[4], &[0.5, 0.0, 0.25, 0.25])).unwrap();
        let k = g.kl_divergence(p, p).unwrap();
        assert_eq!(g.value(k).item(), 0.0);
    }

    #[test]
    fn cross_entropy_all_unknown_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(vec![2, 1, 2], 0.5)).unwrap();
        let (l, known) = g.cross_entropy_per_pixel(p, &[-1, -1]).unwrap();
        assert_eq!(known, 0);
        assert_eq!(g.value(l).item(), 0.0);
    }
}
