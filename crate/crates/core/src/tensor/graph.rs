use super::{gemm, numel, Mask, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Broadcast,
    Softmax,
    MeanAxis,
    SumAll,
    Concat,
    Narrow,
    Reshape,
    Permute,
    GruStep,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::BatchMatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Broadcast,
        OpKind::Softmax,
        OpKind::MeanAxis,
        OpKind::SumAll,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::GruStep,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "bmm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Broadcast => "broadcast",
            OpKind::Softmax => "softmax",
            OpKind::MeanAxis => "mean_axis",
            OpKind::SumAll => "sum_all",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::GruStep => "gru_step",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        r: usize,
        k: usize,
        c: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Broadcast {
        a: Var,
        reps: usize,
    },
    Softmax {
        a: Var,
        n: usize,
    },
    MeanAxis {
        a: Var,
        inner: usize,
        weights: Vec<T>,
        axis_len: usize,
    },
    SumAll(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        a: Var,
        outer: usize,
        src_width: usize,
        offset: usize,
        width: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    GruStep(Box<GruSaved<T>>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct GruSaved<T> {
    xp: Var,
    h: Var,
    u_zr: Var,
    u_h: Var,
    keep: Vec<bool>,
    batch: usize,
    hidden: usize,
    z: Vec<T>,
    r: Vec<T>,
    hh: Vec<T>,
    rh: Vec<T>,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Broadcast { .. } => OpKind::Broadcast,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::GruStep(..) => OpKind::GruStep,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices. A graph is confined to one thread; build a fresh one per
/// forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, T)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output of `out[idx] = in[idx permuted]` where `out.shape[i] = in.shape[perm[i]]`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank > 0 && perm[rank - 1] == rank - 1 {
        // innermost axis stays put: copy contiguous runs
        let run = shape[rank - 1];
        if run == 0 {
            return (out, out_shape);
        }
        let mut idx = vec![0usize; rank - 1];
        let mut src = 0usize;
        for _ in 0..n / run {
            out.extend_from_slice(&data[src..src + run]);
            for ax in (0..rank - 1).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales every input adjoint produced by ops of `kind` by `factor`.
    ///
    /// Only meaningful for negative controls of the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, T::lit(factor)));
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite() || inputs.iter().any(|v| !self.value(*v).is_finite()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn raw(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, inputs)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes a rank-2 operand when its flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (rank 2 required)")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), ta, self.value(b).data(), tb, m, k, n, &mut out, false);
        Ok(self.raw(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    /// Batched product `[B×r×k] · [B×k×c] -> [B×r×c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, r, k, k2, c) = match (sa, sb) {
            ([ba, r, k], [bb, k2, c]) if ba == bb => (*ba, *r, *k, *k2, *c),
            _ => return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("bmm", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); batch * r * c];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &av[i * r * k..(i + 1) * r * k],
                    false,
                    &bv[i * k * c..(i + 1) * k * c],
                    false,
                    r,
                    k,
                    c,
                    &mut out[i * r * c..(i + 1) * r * c],
                    false,
                );
            }
        }
        Ok(self.raw(vec![batch, r, c], out, Op::BatchMatMul { a, b, batch, r, k, c }, &[a, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.raw(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.raw(shape, data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Tiles `a` across new leading axes: shape `leading ++ a.shape`.
    pub fn broadcast(&mut self, a: Var, leading: &[usize]) -> Result<Var> {
        if leading.contains(&0) {
            return Err(Error::shape("broadcast", format!("zero extent in {leading:?}")));
        }
        let reps = numel(leading);
        let v = self.value(a);
        let mut data = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(v.data());
        }
        let mut shape = leading.to_vec();
        shape.extend_from_slice(v.shape());
        Ok(self.raw(shape, data, Op::Broadcast { a, reps }, &[a]))
    }

    /// `x + bias` with `bias` broadcast over the leading axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let b = self.broadcast(bias, &sx[..sx.len() - sb.len()])?;
        self.add(x, b)
    }

    /// Softmax over the last axis. Masked entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::mask("softmax", format!("mask {:?} vs input {shape:?}", m.shape())));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for (row, (xs, ys)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = |j: usize| mask.is_none_or(|m| m.get(row * n + j));
            let mut max = T::neg_infinity();
            for (j, &v) in xs.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::mask("softmax", format!("row {row} has no valid entries")));
            }
            let mut sum = T::zero();
            for (j, (&v, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
                if valid(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= sum;
            }
        }
        Ok(self.raw(shape, out, Op::Softmax { a, n }, &[a]))
    }

    /// Mean over `axis`; masked positions are excluded from numerator and
    /// denominator. The mask, if given, has shape `x.shape[..=axis]`.
    pub fn mean_axis(&mut self, a: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for {shape:?}")));
        }
        if let Some(m) = mask {
            if m.shape() != &shape[..=axis] {
                return Err(Error::mask(
                    "mean_axis",
                    format!("mask {:?} vs prefix {:?}", m.shape(), &shape[..=axis]),
                ));
            }
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut weights = vec![T::zero(); outer * len];
        for o in 0..outer {
            let count = (0..len)
                .filter(|&j| mask.is_none_or(|m| m.get(o * len + j)))
                .count();
            if count == 0 {
                return Err(Error::mask("mean_axis", format!("slice {o} has no valid positions")));
            }
            let w = T::one() / T::lit(count as f64);
            for j in 0..len {
                if mask.is_none_or(|m| m.get(o * len + j)) {
                    weights[o * len + j] = w;
                }
            }
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let w = weights[o * len + j];
                if w == T::zero() {
                    continue;
                }
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.raw(
            out_shape,
            out,
            Op::MeanAxis {
                a,
                inner,
                weights,
                axis_len: len,
            },
            &[a],
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.raw(Vec::new(), vec![s], Op::SumAll(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total_axis += s[axis];
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.raw(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src_width = shape[axis] * inner;
        let width = len * inner;
        let offset = start * inner;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&x[o * src_width + offset..o * src_width + offset + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.raw(
            out_shape,
            out,
            Op::Narrow {
                a,
                outer,
                src_width,
                offset,
                width,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if numel(shape) != v.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", v.shape())));
        }
        let value = v.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("perm {perm:?} for {shape:?}")));
        }
        let (out, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        Ok(self.raw(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", format!("{:?} is not rank 2", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// One GRU update for a batch of rows.
    ///
    /// `xp` is the input projection `x·W + b` laid out as `[z | r | h]` blocks
    /// (`B × 3H`), `u_zr` is `H × 2H` and `u_h` is `H × H`:
    ///
    /// ```text
    /// z  = σ(xp_z + h·U_z)        r = σ(xp_r + h·U_r)
    /// ĥ  = tanh(xp_h + (r⊙h)·U_h)
    /// h' = (1 − z)⊙h + z⊙ĥ
    /// ```
    ///
    /// Rows whose `keep` flag is false pass `h` through unchanged.
    pub fn gru_step(&mut self, xp: Var, h: Var, u_zr: Var, u_h: Var, keep: &[bool]) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        let [batch, hidden] = sh[..] else {
            return Err(Error::shape("gru_step", format!("state {sh:?} must be rank 2")));
        };
        if self.shape(xp) != [batch, 3 * hidden]
            || self.shape(u_zr) != [hidden, 2 * hidden]
            || self.shape(u_h) != [hidden, hidden]
            || keep.len() != batch
        {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "xp {:?}, h {sh:?}, u_zr {:?}, u_h {:?}, keep {}",
                    self.shape(xp),
                    self.shape(u_zr),
                    self.shape(u_h),
                    keep.len()
                ),
            ));
        }
        let hv = self.value(h).data();
        let xv = self.value(xp).data();
        let mut hzr = vec![T::zero(); batch * 2 * hidden];
        gemm(hv, false, self.value(u_zr).data(), false, batch, hidden, 2 * hidden, &mut hzr, false);
        let mut z = vec![T::zero(); batch * hidden];
        let mut r = vec![T::zero(); batch * hidden];
        let mut rh = vec![T::zero(); batch * hidden];
        for b in 0..batch {
            for j in 0..hidden {
                let i = b * hidden + j;
                z[i] = sigmoid(xv[b * 3 * hidden + j] + hzr[b * 2 * hidden + j]);
                r[i] = sigmoid(xv[b * 3 * hidden + hidden + j] + hzr[b * 2 * hidden + hidden + j]);
                rh[i] = r[i] * hv[i];
            }
        }
        let mut hh = vec![T::zero(); batch * hidden];
        gemm(&rh, false, self.value(u_h).data(), false, batch, hidden, hidden, &mut hh, false);
        let mut out = vec![T::zero(); batch * hidden];
        for b in 0..batch {
            for j in 0..hidden {
                let i = b * hidden + j;
                hh[i] = (xv[b * 3 * hidden + 2 * hidden + j] + hh[i]).tanh();
                out[i] = if keep[b] {
                    (T::one() - z[i]) * hv[i] + z[i] * hh[i]
                } else {
                    hv[i]
                };
            }
        }
        let saved = GruSaved {
            xp,
            h,
            u_zr,
            u_h,
            keep: keep.to_vec(),
            batch,
            hidden,
            z,
            r,
            hh,
            rh,
        };
        Ok(self.raw(sh, out, Op::GruStep(Box::new(saved)), &[xp, h, u_zr, u_h]))
    }

    /// Mean cross-entropy of `logits` (`B × C`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [batch, classes] = s[..] else {
            return Err(Error::shape("cross_entropy", format!("logits {s:?} must be rank 2")));
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= classes) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {batch} rows of {classes} classes", labels.len()),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (b, (row, p)) in x.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                sum += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= sum;
            }
            loss += max + sum.ln() - row[labels[b]];
        }
        loss /= T::lit(batch as f64);
        Ok(self.raw(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Replays adjoints from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            if let Op::Narrow {
                a,
                outer,
                src_width,
                offset,
                width,
            } = node.op
            {
                // scattered in place: a full-size contribution per slice would
                // make per-step slicing of a sequence quadratic
                if self.nodes[a.0].requires_grad {
                    let factor = match self.fault {
                        Some((OpKind::Narrow, f)) => f,
                        _ => T::one(),
                    };
                    let acc = grads[a.0].get_or_insert_with(|| vec![T::zero(); outer * src_width]);
                    for o in 0..outer {
                        let dst = &mut acc[o * src_width + offset..o * src_width + offset + width];
                        for (d, &s) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                            *d += factor * s;
                        }
                    }
                }
                continue;
            }
            let mut contribs = self.adjoint(node, &g);
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|x| *x *= factor);
                    }
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let y = node.value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        gemm(self.data(b), tb, g, true, k, n, m, &mut da, false);
                    } else {
                        gemm(g, false, self.data(b), !tb, m, n, k, &mut da, false);
                    }
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        gemm(g, true, self.data(a), ta, n, m, k, &mut db, false);
                    } else {
                        gemm(self.data(a), !ta, g, false, k, m, n, &mut db, false);
                    }
                    out.push((b, db));
                }
            }
            &Op::BatchMatMul { a, b, batch, r, k, c } => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * r * k];
                    for i in 0..batch {
                        gemm(
                            &g[i * r * c..(i + 1) * r * c],
                            false,
                            &bv[i * k * c..(i + 1) * k * c],
                            true,
                            r,
                            c,
                            k,
                            &mut da[i * r * k..(i + 1) * r * k],
                            false,
                        );
                    }
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); batch * k * c];
                    for i in 0..batch {
                        gemm(
                            &av[i * r * k..(i + 1) * r * k],
                            true,
                            &g[i * r * c..(i + 1) * r * c],
                            false,
                            k,
                            r,
                            c,
                            &mut db[i * k * c..(i + 1) * k * c],
                            false,
                        );
                    }
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&x| -x).collect()));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.wants(a) {
                    out.push((a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().zip(av).map(|(&x, &y)| x * y).collect()));
                }
            }
            &Op::Scale(a, f) => out.push((a, g.iter().map(|&x| x * f).collect())),
            &Op::AddScalar(a) => out.push((a, g.to_vec())),
            &Op::Sigmoid(a) => out.push((
                a,
                g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect(),
            )),
            &Op::Tanh(a) => out.push((
                a,
                g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
            )),
            &Op::Broadcast { a, reps } => {
                let len = g.len() / reps;
                let mut da = vec![T::zero(); len];
                for chunk in g.chunks(len) {
                    da.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
                out.push((a, da));
            }
            &Op::Softmax { a, n } => {
                let mut da = vec![T::zero(); g.len()];
                for ((gs, ys), ds) in g.chunks(n).zip(y.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: T = gs.iter().zip(ys).map(|(&x, &p)| x * p).sum();
                    for ((d, &x), &p) in ds.iter_mut().zip(gs).zip(ys) {
                        *d = p * (x - dot);
                    }
                }
                out.push((a, da));
            }
            Op::MeanAxis {
                a,
                inner,
                weights,
                axis_len,
            } => {
                let (inner, len) = (*inner, *axis_len);
                let mut da = vec![T::zero(); weights.len() * inner];
                for (p, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let o = p / len;
                    let src = &g[o * inner..(o + 1) * inner];
                    for (d, &x) in da[p * inner..(p + 1) * inner].iter_mut().zip(src) {
                        *d = w * x;
                    }
                }
                out.push((*a, da));
            }
            &Op::SumAll(a) => {
                let len = self.nodes[a.0].value.len();
                out.push((a, vec![g[0]; len]));
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            dp.extend_from_slice(&g[o * total + off..o * total + off + w]);
                        }
                        out.push((p, dp));
                    }
                    off += w;
                }
            }
            Op::Narrow { .. } => unreachable!("narrow adjoints are scattered in backward"),
            &Op::Reshape(a) => out.push((a, g.to_vec())),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (da, _) = permute_data(g, node.value.shape(), &inv);
                out.push((*a, da));
            }
            Op::GruStep(s) => self.gru_adjoint(s, g, &mut out),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / T::lit(batch as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    d[b * classes + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }

    fn gru_adjoint(&self, s: &GruSaved<T>, g: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        let (batch, hidden) = (s.batch, s.hidden);
        let hv = self.data(s.h);
        let one = T::one();
        let mut dh = vec![T::zero(); batch * hidden];
        let mut dxp = vec![T::zero(); batch * 3 * hidden];
        let mut dah = vec![T::zero(); batch * hidden];
        for b in 0..batch {
            for j in 0..hidden {
                let i = b * hidden + j;
                if !s.keep[b] {
                    dh[i] = g[i];
                    continue;
                }
                let (z, hh) = (s.z[i], s.hh[i]);
                dh[i] = g[i] * (one - z);
                let dz = g[i] * (hh - hv[i]);
                dah[i] = g[i] * z * (one - hh * hh);
                dxp[b * 3 * hidden + j] = dz * z * (one - z);
                dxp[b * 3 * hidden + 2 * hidden + j] = dah[i];
            }
        }
        // d(r⊙h) = dah·U_hᵀ
        let mut drh = vec![T::zero(); batch * hidden];
        gemm(&dah, false, self.data(s.u_h), true, batch, hidden, hidden, &mut drh, false);
        for b in 0..batch {
            if !s.keep[b] {
                continue;
            }
            for j in 0..hidden {
                let i = b * hidden + j;
                let r = s.r[i];
                dh[i] += drh[i] * r;
                let dr = drh[i] * hv[i];
                dxp[b * 3 * hidden + hidden + j] = dr * r * (one - r);
            }
        }
        let mut dzr = vec![T::zero(); batch * 2 * hidden];
        for b in 0..batch {
            dzr[b * 2 * hidden..(b + 1) * 2 * hidden]
                .copy_from_slice(&dxp[b * 3 * hidden..b * 3 * hidden + 2 * hidden]);
        }
        gemm(&dzr, false, self.data(s.u_zr), true, batch, 2 * hidden, hidden, &mut dh, true);
        if self.wants(s.u_zr) {
            let mut du = vec![T::zero(); hidden * 2 * hidden];
            gemm(hv, true, &dzr, false, hidden, batch, 2 * hidden, &mut du, false);
            out.push((s.u_zr, du));
        }
        if self.wants(s.u_h) {
            let mut du = vec![T::zero(); hidden * hidden];
            gemm(&s.rh, true, &dah, false, hidden, batch, hidden, &mut du, false);
            out.push((s.u_h, du));
        }
        out.push((s.xp, dxp));
        out.push((s.h, dh));
    }
}
