//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node to the tape. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that depends on
//! a parameter or a differentiable input.

use std::collections::HashMap;
use std::sync::Arc;

use crate::counter::OpCounter;
use crate::error::{Result, TensorError};
use crate::real::{gemm, Layout};
use crate::tensor::{matmul_dims, softmax_in_place};
use crate::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    ScaleRows(Var, Var),
    ShiftRows(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    Reshape(Var),
    Gather { x: Var, index: Arc<[usize]> },
    Concat(Var, Var),
    SliceLast { x: Var, start: usize },
    ReplaceRows { x: Var, token: Var, mask: Arc<[bool]> },
    ConstMul { x: Var, factor: Arc<[T]> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Opaque { name: &'static str, inputs: Vec<Var> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddSuffix(..) => "add_broadcast",
            Op::ScaleRows(..) => "scale_rows",
            Op::ShiftRows(..) => "shift_rows",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat(..) => "concat",
            Op::SliceLast { .. } => "slice_last",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::ConstMul { .. } => "const_mul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Opaque { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddSuffix(a, b)
            | Op::ScaleRows(a, b)
            | Op::ShiftRows(a, b)
            | Op::Concat(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::ReplaceRows { x, token, .. } => vec![*x, *token],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceLast { x, .. }
            | Op::ConstMul { x, .. } => vec![*x],
            Op::Opaque { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded node, if it received one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to parameter `id`, if it was used.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }
}

/// `tanh` through a single double-precision `exp`, rounded once; libm's
/// `tanh` dominated GELU cost. Near zero the exp form cancels, so a Taylor
/// polynomial takes over.
fn tanh_exp<T: Real>(u: T) -> T {
    let u = u.as_f64();
    if u.abs() < 0.125 {
        let u2 = u * u;
        let tail = -1.0 / 3.0 + u2 * (2.0 / 15.0 + u2 * (-17.0 / 315.0 + u2 * (62.0 / 2835.0)));
        return T::of(u + u * u2 * tail);
    }
    T::of(1.0 - 2.0 / ((2.0 * u).exp() + 1.0))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !T::all_finite(value.data()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let needs_grad = match &op {
            Op::Param => true,
            Op::Input => false,
            other => other.inputs().iter().any(|&v| self.needs(v)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input)
    }

    /// Differentiable leaf not tied to a parameter id (used for gradient
    /// checks with respect to inputs).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Makes later [`Graph::param`] calls for `id` return `var`, so a
    /// differentiable leaf can stand in for a stored parameter.
    pub fn bind_param(&mut self, id: usize, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(TensorError::InvalidArgument(format!("unknown node {}", var.0)));
        }
        match self.params.get(&id) {
            Some(&v) if v != var => Err(TensorError::InvalidArgument(format!("parameter {id} already bound"))),
            _ => {
                self.params.insert(id, var);
                Ok(())
            }
        }
    }

    /// Parameter leaf. Repeated calls with the same `id` return the same node,
    /// so a parameter used by several sub-computations receives the sum of
    /// their gradients.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// `[m,k] @ [k,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, p) = matmul_dims("matmul", self.shape(a), self.shape(b))?;
        OpCounter::record((m * k * p) as u64);
        let mut out = vec![T::zero(); m * p];
        gemm(
            m,
            k,
            p,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        self.push(Tensor::new(&[m, p], out)?, Op::MatMul(a, b))
    }

    /// Batched product `[B,m,k] @ [B,k,p]`, or `[B,m,k] @ [B,p,k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shape("batch_matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(TensorError::shape(
                "batch_matmul",
                format!("{sa:?} @ {sb:?} (trans_b={trans_b})"),
            ));
        }
        OpCounter::record((bt * m * k * p) as u64);
        let mut out = vec![T::zero(); bt * m * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let bl = if trans_b { Layout::Transposed } else { Layout::Normal };
        for i in 0..bt {
            gemm(
                m,
                k,
                p,
                &av[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &bv[i * k * p..(i + 1) * k * p],
                bl,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        self.push(
            Tensor::new(&[bt, m, p], out)?,
            Op::BatchMatMul { a, b, trans_b },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (bias vectors,
    /// positional tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::shape(
                "add_broadcast",
                format!("{sx:?} + {sy:?}"),
            ));
        }
        let yv = self.value(y).data();
        let block = yv.len().max(1);
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(block) {
            add_into(chunk, yv);
        }
        let shape = sx.to_vec();
        self.push(Tensor::new(&shape, out)?, Op::AddSuffix(x, y))
    }

    fn rows_dims(&self, op: &'static str, x: Var, g: Var) -> Result<(usize, usize, usize)> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() < 2 || sg.len() != 2 || sx[0] != sg[0] || sx[sx.len() - 1] != sg[1] {
            return Err(TensorError::shape(op, format!("{sx:?} with {sg:?}")));
        }
        let (b, d) = (sg[0], sg[1]);
        Ok((b, self.value(x).numel() / (b * d).max(1), d))
    }

    /// `x[b, .., j] * g[b, j]` for per-sample feature scaling.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, mid, d) = self.rows_dims("scale_rows", x, g)?;
        let (xv, gv) = (self.value(x).data(), self.value(g).data());
        let mut out = xv.to_vec();
        for bi in 0..b {
            let gr = &gv[bi * d..(bi + 1) * d];
            for row in out[bi * mid * d..(bi + 1) * mid * d].chunks_mut(d) {
                for (o, &s) in row.iter_mut().zip(gr) {
                    *o *= s;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::ScaleRows(x, g))
    }

    /// `x[b, .., j] + g[b, j]` for per-sample feature shifts.
    pub fn shift_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, mid, d) = self.rows_dims("shift_rows", x, g)?;
        let gv = self.value(g).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let gr = &gv[bi * d..(bi + 1) * d];
            for row in out[bi * mid * d..(bi + 1) * mid * d].chunks_mut(d) {
                add_into(row, gr);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::ShiftRows(x, g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x))
    }

    /// Normalization over the trailing axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let v = self
            .value(x)
            .map(|a| half * a * (T::one() + tanh_exp(c * (a + k * a * a * a))));
        self.push(v, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        self.push(v, Op::Silu(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        softmax_in_place(&mut out, xv.last_dim());
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Covers
    /// permutations, embedding lookups and patch rearrangements.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of range for {} elements", xv.len()),
            ));
        }
        let out: Vec<T> = index.iter().map(|&i| xv[i]).collect();
        self.push(Tensor::new(shape, out)?, Op::Gather { x, index })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) = permutation_index(&shape, perm)?;
        self.gather(x, index.into(), &out_shape)
    }

    /// Row lookup: `table` is `[rows, d]`, output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::shape("embedding", format!("table {s:?}")));
        }
        let d = s[1];
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::shape(
                "embedding",
                format!("id {bad} out of range for {} rows", s[0]),
            ));
        }
        let index: Vec<usize> = ids
            .iter()
            .flat_map(|&r| (0..d).map(move |j| r * d + j))
            .collect();
        self.gather(table, index.into(), &[ids.len(), d])
    }

    /// Concatenation along the trailing axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat", format!("{sa:?} ++ {sb:?}")));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let rows = av.len() / da.max(1);
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        self.push(Tensor::new(&shape, out)?, Op::Concat(a, b))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if start + len > d {
            return Err(TensorError::shape(
                "slice_last",
                format!("{start}..{} of {d}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = xv
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(&shape, out)?, Op::SliceLast { x, start })
    }

    /// Replaces the token rows of `x` (`[B, n, d]`) flagged in `mask`
    /// (length `n`) with `token` (`[d]`). The output never depends on the
    /// replaced content.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: Arc<[bool]>) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(token).to_vec());
        if sx.len() != 3 || st != [sx[2]] || mask.len() != sx[1] {
            return Err(TensorError::shape(
                "replace_rows",
                format!("tokens {sx:?}, placeholder {st:?}, mask of {}", mask.len()),
            ));
        }
        let (n, d) = (sx[1], sx[2]);
        let tv = self.value(token).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            if mask[i % n] {
                row.copy_from_slice(&tv);
            }
        }
        self.push(Tensor::new(&sx, out)?, Op::ReplaceRows { x, token, mask })
    }

    /// Elementwise product with a constant matrix broadcast over leading
    /// axes. Records one MAC per output element.
    pub fn const_mul(&mut self, x: Var, factor: Arc<[T]>) -> Result<Var> {
        let xv = self.value(x);
        if factor.is_empty() || !xv.numel().is_multiple_of(factor.len()) {
            return Err(TensorError::shape(
                "const_mul",
                format!("{:?} with factor of {}", xv.shape(), factor.len()),
            ));
        }
        OpCounter::record(xv.numel() as u64);
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(factor.len()) {
            for (o, &f) in chunk.iter_mut().zip(factor.iter()) {
                *o *= f;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::ConstMul { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(total / T::of(av.len().max(1) as f64));
        self.push(v, Op::Mse(a, b))
    }

    /// Records a value computed outside the graph from `inputs`. Forward
    /// evaluation works; backward through it fails with
    /// [`TensorError::Unsupported`].
    pub fn opaque(&mut self, name: &'static str, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        self.push(
            value,
            Op::Opaque {
                name,
                inputs: inputs.to_vec(),
            },
        )
    }

    /// `x @ w + b` applied to the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let din = *sx.last().ok_or_else(|| TensorError::shape("linear", "scalar input"))?;
        let dout = self.shape(w).get(1).copied().unwrap_or(0);
        let rows = self.value(x).numel() / din.max(1);
        let flat = if sx.len() == 2 { x } else { self.reshape(x, &[rows, din])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b)?;
        }
        if sx.len() == 2 {
            Ok(y)
        } else {
            let mut shape = sx;
            *shape.last_mut().unwrap() = dout;
            self.reshape(y, &shape)
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let p = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    gemm(m, p, k, gd, Layout::Normal, bv, Layout::Transposed, ga, true)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, p, av, Layout::Transposed, gd, Layout::Normal, gb, true)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let p = g.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bl = if *trans_b { Layout::Normal } else { Layout::Transposed };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bt {
                        // dA = dC · Bmᵀ where Bm = b or bᵀ
                        gemm(
                            m,
                            p,
                            k,
                            &gd[i * m * p..(i + 1) * m * p],
                            Layout::Normal,
                            &bv[i * k * p..(i + 1) * k * p],
                            bl,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bt {
                        let gi = &gd[i * m * p..(i + 1) * m * p];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            // b is [p,k]: db = dCᵀ · A
                            gemm(p, m, k, gi, Layout::Transposed, ai, Layout::Normal, gbi, true);
                        } else {
                            gemm(k, m, p, ai, Layout::Transposed, gi, Layout::Normal, gbi, true);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(gd) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(gd).zip(bv) {
                        *d += s * o;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(gd).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::AddSuffix(x, y) => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                let block = self.value(*y).numel().max(1);
                self.accumulate(grads, *y, |gy| {
                    for chunk in gd.chunks(block) {
                        add_into(gy, chunk);
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let (b, mid, d) = self.rows_dims("scale_rows", *x, *s)?;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..b {
                        let sr = &sv[bi * d..(bi + 1) * d];
                        let span = bi * mid * d..(bi + 1) * mid * d;
                        for (grow, orow) in gx[span.clone()].chunks_mut(d).zip(gd[span].chunks(d)) {
                            for ((dst, &gg), &sc) in grow.iter_mut().zip(orow).zip(sr) {
                                *dst += gg * sc;
                            }
                        }
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    for bi in 0..b {
                        let dst = &mut gs[bi * d..(bi + 1) * d];
                        let span = bi * mid * d..(bi + 1) * mid * d;
                        for (grow, xrow) in gd[span.clone()].chunks(d).zip(xv[span].chunks(d)) {
                            for ((o, &gg), &xx) in dst.iter_mut().zip(grow).zip(xrow) {
                                *o += gg * xx;
                            }
                        }
                    }
                });
            }
            Op::ShiftRows(x, s) => {
                let (b, mid, d) = self.rows_dims("shift_rows", *x, *s)?;
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
                self.accumulate(grads, *s, |gs| {
                    for bi in 0..b {
                        let dst = &mut gs[bi * d..(bi + 1) * d];
                        for row in gd[bi * mid * d..(bi + 1) * mid * d].chunks(d) {
                            add_into(dst, row);
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (d, &s) in gx.iter_mut().zip(gd) {
                        *d += s * *c;
                    }
                });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
            }
            Op::LayerNorm { x, rstd } => {
                let d = node.value.last_dim();
                let inv_d = T::one() / T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    for (((grow, yrow), dst), &r) in gd
                        .chunks(d)
                        .zip(out.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(rstd)
                    {
                        let mg = grow.iter().copied().sum::<T>() * inv_d;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for ((o, &gg), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                            *o += r * (gg - mg - y * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_K));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gg), &a) in gx.iter_mut().zip(gd).zip(xv) {
                        let th = tanh_exp(c * (a + k * a * a * a));
                        let dudx = c * (T::one() + three * k * a * a);
                        let dy = half * (T::one() + th) + half * a * (T::one() - th * th) * dudx;
                        *o += gg * dy;
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gg), &a) in gx.iter_mut().zip(gd).zip(xv) {
                        let s = T::one() / (T::one() + (-a).exp());
                        *o += gg * s * (T::one() + a * (T::one() - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for ((grow, yrow), dst) in gd.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gg), &y) in dst.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gg - dot);
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (&i, &gg) in index.iter().zip(gd) {
                        gx[i] += gg;
                    }
                });
            }
            Op::Concat(a, b) => {
                let da = self.value(*a).last_dim();
                let db = self.value(*b).last_dim();
                self.accumulate(grads, *a, |ga| {
                    for (dst, row) in ga.chunks_mut(da).zip(gd.chunks(da + db)) {
                        add_into(dst, &row[..da]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (dst, row) in gb.chunks_mut(db).zip(gd.chunks(da + db)) {
                        add_into(dst, &row[da..]);
                    }
                });
            }
            Op::SliceLast { x, start } => {
                let d = self.value(*x).last_dim();
                let len = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (dst, row) in gx.chunks_mut(d).zip(gd.chunks(len)) {
                        add_into(&mut dst[*start..*start + len], row);
                    }
                });
            }
            Op::ReplaceRows { x, token, mask } => {
                let n = mask.len();
                let d = node.value.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (i, (dst, row)) in gx.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        if !mask[i % n] {
                            add_into(dst, row);
                        }
                    }
                });
                self.accumulate(grads, *token, |gt| {
                    for (i, row) in gd.chunks(d).enumerate() {
                        if mask[i % n] {
                            add_into(gt, row);
                        }
                    }
                });
            }
            Op::ConstMul { x, factor } => {
                self.accumulate(grads, *x, |gx| {
                    for (dst, row) in gx.chunks_mut(factor.len()).zip(gd.chunks(factor.len())) {
                        for ((o, &gg), &f) in dst.iter_mut().zip(row).zip(factor.iter()) {
                            *o += gg * f;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gg = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gg));
            }
            Op::Mean(x) => {
                let gg = gd[0] / T::of(self.value(*x).numel().max(1) as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += gg));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let scale = T::of(2.0) * gd[0] / T::of(av.len().max(1) as f64);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += scale * (x - y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= scale * (x - y);
                    }
                });
            }
            Op::Opaque { name, .. } => {
                return Err(TensorError::Unsupported((*name).to_string()));
            }
        }
        Ok(())
    }
}

/// Flat gather index realizing an axis permutation.
pub fn permutation_index(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::shape(
            "permute",
            format!("{perm:?} is not a permutation of rank {rank}"),
        ));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        let flat: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        index.push(flat);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((index, out_shape))
}

/// Value and parameter gradients of a scalar computation.
///
/// `f` receives a fresh graph and one leaf per entry of `params` (registered
/// as parameter ids `0..params.len()`), and returns the scalar output.
pub fn grad<T, F>(params: &[Tensor<T>], f: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(i, p))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    let grads = g.backward(out)?;
    let per_param = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            grads
                .param(i)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();
    Ok((value, per_param))
}

#[cfg(test)]
mod tests {
    use super::tanh_exp;

    #[test]
    fn tanh_exp_is_accurate_near_zero_and_beyond() {
        let mut worst32: f64 = 0.0;
        let mut worst64: f64 = 0.0;
        for i in -4000i32..=4000 {
            let u = f64::signum(i as f64) * 10f64.powf(i.abs() as f64 / 400.0 - 8.0);
            let want = u.tanh();
            let got32 = tanh_exp(u as f32) as f64;
            let want32 = (u as f32 as f64).tanh();
            worst32 = worst32.max((got32 - want32).abs() / want32.abs());
            worst64 = worst64.max((tanh_exp(u) - want).abs() / want.abs());
        }
        assert!(worst32 < 1e-7, "f32 relative error {worst32:e}");
        assert!(worst64 < 1e-10, "f64 relative error {worst64:e}");
    }
}
