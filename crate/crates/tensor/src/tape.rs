//! Define-by-run tape. Every op appends a node holding its forward value;
//! `backward` walks the tape in reverse index order, which is a reverse
//! topological order because inputs always precede their consumers.

use crate::error::{Result, TensorError};
use crate::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool, trans_b: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat { xs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    ReduceAxis { x: Var, outer: usize, axis_len: usize, inner: usize, mean: bool },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, indices: Vec<usize> },
    Gather { x: Var, indices: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::shape(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::shape(op, format!("needs a non-empty trailing axis, got {shape:?}"))),
    }
}

/// Scatter-accumulate helper: returns the pass buffer for `v` if it wants a gradient.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    pass: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(pass[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf copying `t`; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a trainable leaf from raw parts.
    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, true))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes keep shape and data consistent")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the accumulated gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !ok {
            return Err(TensorError::shape(
                op,
                format!("rhs {sb:?} must equal lhs {sa:?} or a trailing suffix of it"),
            ));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let nb = bv.len();
        if nb == av.len() {
            Ok(av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
        } else {
            Ok(av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect())
        }
    }

    /// Elementwise `a + b`; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), v, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product.
    ///
    /// * `a: [.., m, k]`, `b: [k, n]`: leading dims of `a` are folded into rows.
    /// * `a: [B, m, k]`, `b: [B, k, n]`: batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `b: [n, k]` or `[B, n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 {
            return Err(TensorError::shape("matmul", format!("lhs must be at least 2-D, got {sa:?}")));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_b, bk) = match sb.len() {
            2 => {
                let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                (1, numel(&sa[..sa.len() - 1]), n, true, bk)
            }
            3 if sa.len() == 3 && sa[0] == sb[0] => {
                let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                (sa[0], sa[1], n, false, bk)
            }
            _ => {
                return Err(TensorError::shape(
                    "matmul",
                    format!("incompatible operands {sa:?} x {sb:?}"),
                ))
            }
        };
        if bk != k {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for bi in 0..batch {
            let boff = if shared_b { 0 } else { bi * k * n };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &bv[boff..boff + k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, shared_b, trans_b }, rg))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].shape;
        if numel(shape) != numel(src) {
            return Err(TensorError::shape("reshape", format!("cannot view {src:?} as {shape:?}")));
        }
        let v = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = permute_data(&self.nodes[a.0].value, &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(out_shape, v, Op::Permute { x: a, perm: perm.to_vec() }, rg))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let nd = self.nodes[a.0].shape.len();
        if d0 >= nd || d1 >= nd {
            return Err(TensorError::shape("transpose", format!("axes ({d0},{d1}) out of range for rank {nd}")));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, axis_len, inner) = split_axis("slice", &shape, axis)?;
        if start + len > axis_len {
            return Err(TensorError::shape(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            v.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(out_shape, v, Op::Slice { x: a, outer, axis_len, inner, start, len }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.nodes[first.0].shape.clone();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for x in xs {
            let s = &self.nodes[x.0].shape;
            let same = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !same {
                return Err(TensorError::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut v = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &l) in xs.iter().zip(&lens) {
                let src = &self.nodes[x.0].value;
                v.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, v, Op::Concat { xs: xs.to_vec(), outer, inner, lens }, rg))
    }

    /// Flat gather: output `[indices.len()]` with `out[i] = x.flat[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::shape("gather", format!("index {bad} out of range for {} elements", src.len())));
        }
        let v = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![indices.len()], v, Op::Gather { x: a, indices: indices.to_vec() }, rg))
    }

    /// Row lookup in `table: [V, D]`, giving `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::shape("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape("embedding", format!("index {bad} out of range for {rows} rows")));
        }
        let src = &self.nodes[table.0].value;
        let mut v = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            v.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![indices.len(), d], v, Op::Embedding { table, indices: indices.to_vec() }, rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = &self.nodes[a.0].value;
        let n = T::of(vals.len().max(1) as f64);
        let s: T = vals.iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s / n], Op::MeanAll(a), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, axis_len, inner) = split_axis(if mean { "mean" } else { "sum" }, &shape, axis)?;
        let src = &self.nodes[a.0].value;
        let mut v = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..axis_len {
                let row = &src[(o * axis_len + j) * inner..(o * axis_len + j + 1) * inner];
                v[o * inner..(o + 1) * inner].iter_mut().zip(row).for_each(|(d, &s)| *d += s);
            }
        }
        if mean {
            let c = T::of(axis_len as f64);
            v.iter_mut().for_each(|x| *x /= c);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(out_shape, v, Op::ReduceAxis { x: a, outer, axis_len, inner, mean }, rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ---------------------------------------------------------------- nn ops

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim("softmax", &self.nodes[a.0].shape)?;
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(d) {
            softmax_row(row);
        }
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = last_dim("log_softmax", &self.nodes[a.0].shape)?;
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::LogSoftmax(a), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let d = last_dim("layernorm", &shape)?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [d] {
                return Err(TensorError::shape(
                    "layernorm",
                    format!("affine parameter {:?} must be [{d}]", self.nodes[p.0].shape),
                ));
            }
        }
        let eps = T::of(eps);
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let rows = x.len() / d;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(shape, out, Op::LayerNorm { x: a, gamma, beta, xhat, rstd }, rg))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let d = last_dim("l2_normalize", &self.nodes[a.0].shape)?;
        let mut v = self.nodes[a.0].value.clone();
        let mut norms = Vec::with_capacity(v.len() / d);
        let floor = T::of(1e-12);
        for row in v.chunks_mut(d) {
            let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|x| *x /= nrm);
            norms.push(nrm);
        }
        let rg = self.rg(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::L2Normalize { x: a, norms }, rg))
    }

    /// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::config("conv2d", "stride must be positive"));
        }
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", format!("input {sx:?} incompatible with kernel {sw:?}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {sx:?}")));
        }
        if let Some(b) = b {
            if self.nodes[b.0].shape != [o] {
                return Err(TensorError::shape("conv2d", format!("bias {:?} must be [{o}]", self.nodes[b.0].shape)));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w: wd, o, kh, kw, oh, ow, stride, pad };
        let l = oh * ow;
        let ckk = c * kh * kw;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![T::zero(); n * o * l];
        let mut cols = vec![T::zero(); ckk * l];
        for s in 0..n {
            im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
            T::gemm(o, ckk, l, T::one(), wv, ckk as isize, 1, &cols, l as isize, 1, T::zero(), &mut out[s * o * l..(s + 1) * o * l], l as isize, 1);
        }
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for s in 0..n {
                for oc in 0..o {
                    let base = (s * o + oc) * l;
                    out[base..base + l].iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, o, oh, ow], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Max pooling over `k×k` windows, no padding. Ties go to the first maximal element.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        if k == 0 || stride == 0 {
            return Err(TensorError::config("maxpool2d", "kernel and stride must be positive"));
        }
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 4 || sx[2] < k || sx[3] < k {
            return Err(TensorError::shape("maxpool2d", format!("input {sx:?} too small for kernel {k}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * stride * w + j * stride;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * stride + di) * w + j * stride + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { x, argmax }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse-mode sweep from the scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(TensorError::Contract("loss does not depend on any trainable tensor".into()));
        }
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            } else {
                self.propagate(i, &g, &mut pass);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], pass: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if let Some(ga) = slot(nodes, pass, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = slot(nodes, pass, *b) {
                    let nb = gb.len();
                    for (idx, &s) in g.iter().enumerate() {
                        if neg {
                            gb[idx % nb] -= s;
                        } else {
                            gb[idx % nb] += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                if let Some(ga) = slot(nodes, pass, *a) {
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d += g[idx] * bv[idx % nb];
                    }
                }
                if let Some(gb) = slot(nodes, pass, *b) {
                    for (idx, &s) in g.iter().enumerate() {
                        gb[idx % nb] += s * av[idx];
                    }
                }
            }
            Op::Div(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                if let Some(ga) = slot(nodes, pass, *a) {
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d += g[idx] / bv[idx % nb];
                    }
                }
                if let Some(gb) = slot(nodes, pass, *b) {
                    for (idx, &s) in g.iter().enumerate() {
                        let y = bv[idx % nb];
                        gb[idx % nb] -= s * av[idx] / (y * y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, pass, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, pass, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Relu(a) => {
                let xv = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(xv) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * yv;
                    }
                }
            }
            Op::Log(a) => {
                let xv = &nodes[a.0].value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *d += s / x;
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    let two = T::of(2.0);
                    for ((d, &s), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += s / (two * yv);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    // dA = dC · Bᵀ  (B stored as k×n, or n×k when trans_b)
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..*batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        T::gemm(m, n, k, T::one(), &g[bi * m * n..(bi + 1) * m * n], n as isize, 1, &bv[boff..boff + k * n], rs, cs, T::one(), &mut ga[bi * m * k..(bi + 1) * m * k], k as isize, 1);
                    }
                }
                if let Some(gb) = slot(nodes, pass, *b) {
                    for bi in 0..*batch {
                        let boff = if *shared_b { 0 } else { bi * k * n };
                        let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let dst = &mut gb[boff..boff + k * n];
                        if *trans_b {
                            // dB (n×k) = dCᵀ · A
                            T::gemm(n, m, k, T::one(), g_blk, 1, n as isize, a_blk, k as isize, 1, T::one(), dst, k as isize, 1);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            T::gemm(k, m, n, T::one(), a_blk, 1, k as isize, g_blk, n as isize, 1, T::one(), dst, n as isize, 1);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = slot(nodes, pass, *x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(g, &node.shape, &inv);
                    gx.iter_mut().zip(back).for_each(|(d, s)| *d += s);
                }
            }
            Op::Slice { x, outer, axis_len, inner, start, len } => {
                if let Some(gx) = slot(nodes, pass, *x) {
                    for o in 0..*outer {
                        let dst = o * axis_len * inner + start * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Concat { xs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (x, &l) in xs.iter().zip(lens) {
                    if let Some(gx) = slot(nodes, pass, *x) {
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            gx[o * l * inner..(o + 1) * l * inner].iter_mut().zip(&g[src..src + l * inner]).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += l;
                }
            }
            Op::Gather { x, indices } => {
                if let Some(gx) = slot(nodes, pass, *x) {
                    for (&idx, &s) in indices.iter().zip(g) {
                        gx[idx] += s;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = nodes[table.0].shape[1];
                if let Some(gt) = slot(nodes, pass, *table) {
                    for (r, &idx) in indices.iter().enumerate() {
                        gt[idx * d..(idx + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let len = nodes[a.0].value.len();
                let s = if matches!(node.op, Op::MeanAll(_)) { g[0] / T::of(len.max(1) as f64) } else { g[0] };
                if let Some(ga) = slot(nodes, pass, *a) {
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::ReduceAxis { x, outer, axis_len, inner, mean } => {
                let scale = if *mean { T::one() / T::of(*axis_len as f64) } else { T::one() };
                if let Some(gx) = slot(nodes, pass, *x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..*axis_len {
                            let base = (o * axis_len + j) * inner;
                            gx[base..base + inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s * scale);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(ga) = slot(nodes, pass, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = &nodes[gamma.0].value;
                if let Some(gg) = slot(nodes, pass, *gamma) {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, pass, *beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                if let Some(gx) = slot(nodes, pass, *x) {
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for (r, ((gr, xr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1: T = dxhat.iter().copied().sum::<T>() / dn;
                        let m2: T = dxhat.iter().zip(xr).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for j in 0..d {
                            dr[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(gx) = slot(nodes, pass, *x) {
                    for (r, ((gr, yr), dr)) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            dr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let ConvGeom { n, c, h, w: wd, o, kh, kw, oh, ow, .. } = *geom;
                let l = oh * ow;
                let ckk = c * kh * kw;
                if let Some(b) = b {
                    if let Some(gb) = slot(nodes, pass, *b) {
                        for s in 0..n {
                            for oc in 0..o {
                                let base = (s * o + oc) * l;
                                gb[oc] += g[base..base + l].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let mut cols = vec![T::zero(); ckk * l];
                if nodes[w.0].requires_grad {
                    let mut gw_local = vec![T::zero(); o * ckk];
                    for s in 0..n {
                        im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], geom, &mut cols);
                        // dW += dOut (o×l) · colsᵀ (l×ckk)
                        T::gemm(o, l, ckk, T::one(), &g[s * o * l..(s + 1) * o * l], l as isize, 1, &cols, 1, l as isize, T::one(), &mut gw_local, ckk as isize, 1);
                    }
                    if let Some(gw) = slot(nodes, pass, *w) {
                        gw.iter_mut().zip(&gw_local).for_each(|(a, &b)| *a += b);
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut gx_local = vec![T::zero(); n * c * h * wd];
                    for s in 0..n {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        // dcols (ckk×l) = Wᵀ (ckk×o) · dOut (o×l)
                        T::gemm(ckk, o, l, T::one(), wv, 1, ckk as isize, &g[s * o * l..(s + 1) * o * l], l as isize, 1, T::zero(), &mut cols, l as isize, 1);
                        col2im(&cols, geom, &mut gx_local[s * c * h * wd..(s + 1) * c * h * wd]);
                    }
                    if let Some(gx) = slot(nodes, pass, *x) {
                        gx.iter_mut().zip(&gx_local).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = slot(nodes, pass, *x) {
                    for (&idx, &s) in argmax.iter().zip(g) {
                        gx[idx] += s;
                    }
                }
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if nd == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(src[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for i in 0..g.oh {
                    let yi = (i * g.stride + ki) as isize - g.pad as isize;
                    for j in 0..g.ow {
                        let xj = (j * g.stride + kj) as isize - g.pad as isize;
                        dst[i * g.ow + j] = if yi >= 0 && (yi as usize) < g.h && xj >= 0 && (xj as usize) < g.w {
                            x[(ch * g.h + yi as usize) * g.w + xj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.oh * g.ow;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for i in 0..g.oh {
                    let yi = (i * g.stride + ki) as isize - g.pad as isize;
                    if yi < 0 || yi as usize >= g.h {
                        continue;
                    }
                    for j in 0..g.ow {
                        let xj = (j * g.stride + kj) as isize - g.pad as isize;
                        if xj >= 0 && (xj as usize) < g.w {
                            dx[(ch * g.h + yi as usize) * g.w + xj as usize] += src[i * g.ow + j];
                        }
                    }
                }
            }
        }
    }
}
