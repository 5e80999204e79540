//! Define-by-run computation graph with symbolic reverse mode.
//!
//! Every builder call evaluates its node eagerly and appends it to the
//! graph, so node ids are already a topological order. [`Graph::gradient`]
//! does not produce numbers directly: it appends adjoint nodes built from the
//! same op set, which is what makes gradients of gradients available.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use super::DiffError;

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors used to rebind leaves in [`Graph::evaluate`].
pub type Bindings = HashMap<String, Tensor>;

#[derive(Clone, Debug)]
pub enum LeafKind {
    Constant,
    Param(String),
    Input(String),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf(LeafKind),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumTo(NodeId, Vec<usize>),
    Broadcast(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Pow(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    L2Norm(NodeId),
    AvgPool2d(NodeId, usize),
    Upsample2d(NodeId, usize),
    Gather(NodeId, Arc<[usize]>, Vec<usize>),
    ScatterAdd(NodeId, Arc<[usize]>, Vec<usize>),
    Clamp(NodeId, Arc<[f64]>, Arc<[f64]>),
    StopGradient(NodeId),
}

impl Op {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Constant) => "constant",
            Op::Leaf(LeafKind::Param(_)) => "param",
            Op::Leaf(LeafKind::Input(_)) => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumTo(..) => "sum_to",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Pow(..) => "pow",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::L2Norm(_) => "l2_norm",
            Op::AvgPool2d(..) => "avg_pool2d",
            Op::Upsample2d(..) => "upsample2d",
            Op::Gather(..) => "gather",
            Op::ScatterAdd(..) => "scatter_add",
            Op::Clamp(..) => "clamp",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumTo(a, _)
            | Op::Broadcast(a, _)
            | Op::Reshape(a, _)
            | Op::Pow(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::L2Norm(a)
            | Op::AvgPool2d(a, _)
            | Op::Upsample2d(a, _)
            | Op::Gather(a, ..)
            | Op::ScatterAdd(a, ..)
            | Op::Clamp(a, ..)
            | Op::StopGradient(a) => vec![*a],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A computation tape. Rebuilt per use; nodes are immutable once pushed.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(tag: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { tag, detail }
}

fn same_shape(tag: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(mismatch(tag, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_with(tag: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
    same_shape(tag, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pool_dims(tag: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), DiffError> {
    if shape.len() < 2 {
        return Err(mismatch(tag, format!("needs at least 2 dims, got {:?}", shape)));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let lead: usize = shape[..shape.len() - 2].iter().product();
    Ok((lead, h, w))
}

fn avg_pool_kernel(x: &Tensor, f: usize) -> Result<Tensor, DiffError> {
    let (lead, h, w) = pool_dims("avg_pool2d", x.shape())?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(mismatch(
            "avg_pool2d",
            format!("extents {}x{} not divisible by factor {}", h, w, f),
        ));
    }
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    let src = x.data();
    let mut out = vec![0.0; lead * oh * ow];
    for l in 0..lead {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for di in 0..f {
                    for dj in 0..f {
                        acc += src[l * h * w + (oi * f + di) * w + oj * f + dj];
                    }
                }
                out[l * oh * ow + oi * ow + oj] = acc * inv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

fn upsample_kernel(x: &Tensor, f: usize) -> Result<Tensor, DiffError> {
    let (lead, h, w) = pool_dims("upsample2d", x.shape())?;
    if f == 0 {
        return Err(mismatch("upsample2d", "factor 0".into()));
    }
    let (oh, ow) = (h * f, w * f);
    let src = x.data();
    let mut out = vec![0.0; lead * oh * ow];
    for l in 0..lead {
        for i in 0..oh {
            for j in 0..ow {
                out[l * oh * ow + i * ow + j] = src[l * h * w + (i / f) * w + j / f];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Ok(Tensor::from_parts(shape, out))
}

fn broadcast_kernel(x: &Tensor, to: &[usize]) -> Result<Tensor, DiffError> {
    match broadcast_shape(x.shape(), to) {
        Some(s) if s == to => {}
        _ => return Err(mismatch("broadcast", format!("{:?} -> {:?}", x.shape(), to))),
    }
    let total: usize = to.iter().product();
    if x.shape() == to {
        return Ok(x.clone());
    }
    if x.len() == 1 {
        return Ok(Tensor::full(to, x.data()[0]));
    }
    // Fast path: x matches the trailing dims of `to` exactly.
    if x.ndim() <= to.len() && &to[to.len() - x.ndim()..] == x.shape() {
        let reps = total / x.len();
        let mut data = Vec::with_capacity(total);
        for _ in 0..reps {
            data.extend_from_slice(x.data());
        }
        return Ok(Tensor::from_parts(to.to_vec(), data));
    }
    let map = broadcast_index_map(x.shape(), to);
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_parts(to.to_vec(), data))
}

fn sum_to_kernel(x: &Tensor, to: &[usize]) -> Result<Tensor, DiffError> {
    match broadcast_shape(to, x.shape()) {
        Some(s) if s == x.shape() => {}
        _ => return Err(mismatch("sum_to", format!("{:?} -> {:?}", x.shape(), to))),
    }
    if x.shape() == to {
        return Ok(x.clone());
    }
    let mut out = vec![0.0; to.iter().product()];
    // Fast path: reduce leading rows of a matrix-like layout onto a trailing block.
    if to.len() <= x.ndim() && &x.shape()[x.ndim() - to.len()..] == to {
        let block = out.len();
        for chunk in x.data().chunks(block) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Ok(Tensor::from_parts(to.to_vec(), out));
    }
    let map = broadcast_index_map(to, x.shape());
    for (i, &dst) in map.iter().enumerate() {
        out[dst] += x.data()[i];
    }
    Ok(Tensor::from_parts(to.to_vec(), out))
}

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn transpose_kernel(a: &Tensor) -> Result<Tensor, DiffError> {
    let &[m, n] = a.shape() else {
        return Err(mismatch("transpose", format!("needs rank 2, got {:?}", a.shape())));
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn kernel<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Tensor) -> Result<Tensor, DiffError> {
    let unary = |a: NodeId, f: &dyn Fn(f64) -> f64| get(a).map(f);
    Ok(match op {
        Op::Leaf(_) => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => zip_with("add", get(*a), get(*b), |x, y| x + y)?,
        Op::Sub(a, b) => zip_with("sub", get(*a), get(*b), |x, y| x - y)?,
        Op::Mul(a, b) => zip_with("mul", get(*a), get(*b), |x, y| x * y)?,
        Op::Neg(a) => unary(*a, &|x| -x),
        Op::Scale(a, c) => {
            let c = *c;
            unary(*a, &move |x| x * c)
        }
        Op::MatMul(a, b) => matmul_kernel(get(*a), get(*b))?,
        Op::Transpose(a) => transpose_kernel(get(*a))?,
        Op::Sum(a) => Tensor::scalar(get(*a).data().iter().sum()),
        Op::Mean(a) => {
            let t = get(*a);
            if t.is_empty() {
                return Err(mismatch("mean", "empty tensor".into()));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        Op::SumTo(a, shape) => sum_to_kernel(get(*a), shape)?,
        Op::Broadcast(a, shape) => broadcast_kernel(get(*a), shape)?,
        Op::Reshape(a, shape) => get(*a).reshape(shape)?,
        Op::Pow(a, p) => {
            let p = *p;
            unary(*a, &move |x| x.powf(p))
        }
        Op::Exp(a) => unary(*a, &f64::exp),
        Op::Log(a) => unary(*a, &f64::ln),
        Op::Softplus(a) => unary(*a, &softplus),
        Op::Sigmoid(a) => unary(*a, &sigmoid),
        Op::Tanh(a) => unary(*a, &f64::tanh),
        Op::Square(a) => unary(*a, &|x| x * x),
        Op::L2Norm(a) => Tensor::scalar(get(*a).norm()),
        Op::AvgPool2d(a, f) => avg_pool_kernel(get(*a), *f)?,
        Op::Upsample2d(a, f) => upsample_kernel(get(*a), *f)?,
        Op::Gather(a, idx, shape) => {
            let src = get(*a);
            if idx.len() != shape.iter().product::<usize>() {
                return Err(mismatch("gather", format!("{} indices for shape {:?}", idx.len(), shape)));
            }
            let mut data = Vec::with_capacity(idx.len());
            for &i in idx.iter() {
                match src.data().get(i) {
                    Some(&v) => data.push(v),
                    None => return Err(mismatch("gather", format!("index {} out of {}", i, src.len()))),
                }
            }
            Tensor::from_parts(shape.clone(), data)
        }
        Op::ScatterAdd(a, idx, shape) => {
            let src = get(*a);
            if idx.len() != src.len() {
                return Err(mismatch("scatter_add", format!("{} indices for {} values", idx.len(), src.len())));
            }
            let mut out = vec![0.0; shape.iter().product()];
            for (&i, &v) in idx.iter().zip(src.data()) {
                match out.get_mut(i) {
                    Some(slot) => *slot += v,
                    None => return Err(mismatch("scatter_add", format!("index {} out of {}", i, shape.iter().product::<usize>()))),
                }
            }
            Tensor::from_parts(shape.clone(), out)
        }
        Op::Clamp(a, lo, hi) => {
            let src = get(*a);
            let period = lo.len();
            let data = src
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v.max(lo[i % period]).min(hi[i % period]))
                .collect();
            Tensor::from_parts(src.shape().to_vec(), data)
        }
        Op::StopGradient(a) => get(*a).clone(),
    })
}

/// Maps parameter names to the graph nodes that carry them.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId, DiffError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, id: NodeId) {
        self.nodes.insert(name.into(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.values().copied().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamNodes {
        let nodes = self
            .nodes
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), *v)))
            .collect();
        ParamNodes { nodes }
    }

    /// Same parameters seen through `stop_gradient`: values flow, gradients do not.
    pub fn frozen(&self, g: &mut Graph) -> ParamNodes {
        let nodes = self
            .nodes
            .iter()
            .map(|(k, &v)| (k.clone(), g.stop_gradient(v)))
            .collect();
        ParamNodes { nodes }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    fn push_leaf(&mut self, kind: LeafKind, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
            requires_grad,
        });
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId, DiffError> {
        let value = kernel(&op, |id| &self.nodes[id.0].value)?;
        let requires_grad = match &op {
            Op::StopGradient(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(LeafKind::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// A named parameter leaf (requires grad).
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push_leaf(LeafKind::Param(name.into()), value, true)
    }

    /// A named input leaf. Inputs are differentiable so that ∇x is available.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push_leaf(LeafKind::Input(name.into()), value, true)
    }

    fn broadcast_pair(&mut self, tag: &'static str, a: NodeId, b: NodeId) -> Result<(NodeId, NodeId), DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let target = broadcast_shape(&sa, &sb).ok_or_else(|| mismatch(tag, format!("{:?} vs {:?}", sa, sb)))?;
        let a = if sa == target { a } else { self.broadcast_to(a, &target)? };
        let b = if sb == target { b } else { self.broadcast_to(b, &target)? };
        Ok((a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (a, b) = self.broadcast_pair("sub", a, b)?;
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let inv = self.pow(b, -1.0)?;
        self.mul(a, inv)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Neg(a))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let c = self.scalar(c);
        self.add(a, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Transpose(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mean(a))
    }

    pub fn sum_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::SumTo(a, shape.to_vec()))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::Broadcast(a, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Row sums of a `[n, m]` matrix, as a `[n]` vector.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.shape(a).to_vec();
        let [n, _] = shape[..] else {
            return Err(mismatch("sum_rows", format!("needs rank 2, got {:?}", shape)));
        };
        let s = self.sum_to(a, &[n, 1])?;
        self.reshape(s, &[n])
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Pow(a, p))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.pow(a, 0.5)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Log(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Tanh(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Square(a))
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::L2Norm(a))
    }

    /// Average pooling over the last two dims with a square window and stride `factor`.
    pub fn avg_pool2d(&mut self, a: NodeId, factor: usize) -> Result<NodeId, DiffError> {
        self.push(Op::AvgPool2d(a, factor))
    }

    /// Nearest-neighbour upsampling over the last two dims.
    pub fn upsample2d(&mut self, a: NodeId, factor: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Upsample2d(a, factor))
    }

    /// `out.flat[i] = a.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: NodeId, indices: impl Into<Arc<[usize]>>, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::Gather(a, indices.into(), shape.to_vec()))
    }

    /// Adjoint of [`Graph::gather`]: `out.flat[indices[i]] += a.flat[i]`.
    pub fn scatter_add(&mut self, a: NodeId, indices: impl Into<Arc<[usize]>>, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::ScatterAdd(a, indices.into(), shape.to_vec()))
    }

    /// Element-wise clamp. Bounds repeat with period `lo.len()` along the flat
    /// layout, so per-column bounds for a `[n, d]` matrix have length `d`.
    pub fn clamp(&mut self, a: NodeId, lo: &[f64], hi: &[f64]) -> Result<NodeId, DiffError> {
        let last = self.shape(a).last().copied().unwrap_or(1);
        if lo.len() != hi.len() || lo.is_empty() || (lo.len() != 1 && lo.len() != last) {
            return Err(mismatch(
                "clamp",
                format!("bounds of length {}/{} for shape {:?}", lo.len(), hi.len(), self.shape(a)),
            ));
        }
        self.push(Op::Clamp(a, lo.into(), hi.into()))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient(a))
            .expect("stop_gradient cannot fail")
    }

    /// Binds every entry of `params` as a named parameter leaf.
    pub fn bind_params(&mut self, params: &super::ParamSet) -> ParamNodes {
        let mut out = ParamNodes::default();
        for (name, t) in params.iter() {
            let id = self.param(name, t.clone());
            out.insert(name, id);
        }
        out
    }

    /// Binds every entry of `params` as a constant leaf (no gradient tracking).
    pub fn bind_constants(&mut self, params: &super::ParamSet) -> ParamNodes {
        let mut out = ParamNodes::default();
        for (name, t) in params.iter() {
            let id = self.constant(t.clone());
            out.insert(name, id);
        }
        out
    }

    /// Symbolic gradient of the scalar `root` with respect to each of `wrt`.
    ///
    /// The returned nodes live in this graph and can be differentiated again.
    /// A `wrt` node that `root` does not depend on gets a zero constant.
    pub fn gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, DiffError> {
        if !self.value(root).is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        for &w in wrt {
            if !self.requires_grad(w) {
                return Err(DiffError::NotDifferentiable { tag: self.tag(w) });
            }
        }
        let lo = wrt.iter().map(|w| w.0).min().unwrap_or(root.0 + 1);
        let mut adjoint: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        if lo <= root.0 {
            // depends[i]: node i is reachable from some wrt through differentiable edges.
            let mut depends = vec![false; root.0 + 1];
            for &w in wrt {
                if w.0 <= root.0 {
                    depends[w.0] = true;
                }
            }
            for i in lo..=root.0 {
                if depends[i] || !self.nodes[i].requires_grad {
                    continue;
                }
                if matches!(self.nodes[i].op, Op::StopGradient(_)) {
                    continue;
                }
                depends[i] = self.nodes[i].op.parents().iter().any(|p| p.0 >= lo && depends[p.0]);
            }
            if depends[root.0] {
                adjoint[root.0] = Some(self.scalar(1.0));
                for i in (lo..=root.0).rev() {
                    let Some(g) = adjoint[i] else { continue };
                    if !depends[i] {
                        continue;
                    }
                    for (parent, contrib) in self.backward(NodeId(i), g, &depends)? {
                        adjoint[parent.0] = Some(match adjoint[parent.0] {
                            Some(prev) => self.add(prev, contrib)?,
                            None => contrib,
                        });
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let found = adjoint.get(w.0).copied().flatten();
            out.push(match found {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            });
        }
        Ok(out)
    }

    fn backward(&mut self, id: NodeId, g: NodeId, depends: &[bool]) -> Result<Vec<(NodeId, NodeId)>, DiffError> {
        let op = self.nodes[id.0].op.clone();
        let wants = |n: NodeId| n.0 < depends.len() && depends[n.0];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf(_) | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    let ng = self.neg(g)?;
                    out.push((b, ng));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let ga = self.mul(g, b)?;
                    out.push((a, ga));
                }
                if wants(b) {
                    let gb = self.mul(g, a)?;
                    out.push((b, gb));
                }
            }
            Op::Neg(a) => {
                let ga = self.neg(g)?;
                out.push((a, ga));
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, c)?;
                out.push((a, ga));
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    out.push((a, ga));
                }
                if wants(b) {
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    out.push((b, gb));
                }
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g)?;
                out.push((a, ga));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast_to(g, &shape)?;
                out.push((a, ga));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len() as f64;
                let b = self.broadcast_to(g, &shape)?;
                let ga = self.scale(b, 1.0 / n)?;
                out.push((a, ga));
            }
            Op::SumTo(a, _) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast_to(g, &shape)?;
                out.push((a, ga));
            }
            Op::Broadcast(a, _) => {
                let shape = self.shape(a).to_vec();
                let ga = self.sum_to(g, &shape)?;
                out.push((a, ga));
            }
            Op::Reshape(a, _) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape)?;
                out.push((a, ga));
            }
            Op::Pow(a, p) => {
                if p != 0.0 {
                    let ga = if p == 1.0 {
                        g
                    } else if p == 2.0 {
                        let d = self.scale(a, 2.0)?;
                        self.mul(g, d)?
                    } else {
                        let d = self.pow(a, p - 1.0)?;
                        let d = self.scale(d, p)?;
                        self.mul(g, d)?
                    };
                    out.push((a, ga));
                }
            }
            Op::Exp(a) => {
                let ga = self.mul(g, id)?;
                out.push((a, ga));
            }
            Op::Log(a) => {
                let inv = self.pow(a, -1.0)?;
                let ga = self.mul(g, inv)?;
                out.push((a, ga));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let ga = self.mul(g, s)?;
                out.push((a, ga));
            }
            Op::Sigmoid(a) => {
                let sq = self.square(id)?;
                let d = self.sub(id, sq)?;
                let ga = self.mul(g, d)?;
                out.push((a, ga));
            }
            Op::Tanh(a) => {
                let sq = self.square(id)?;
                let gsq = self.mul(g, sq)?;
                let ga = self.sub(g, gsq)?;
                out.push((a, ga));
            }
            Op::Square(a) => {
                let d = self.scale(a, 2.0)?;
                let ga = self.mul(g, d)?;
                out.push((a, ga));
            }
            Op::L2Norm(a) => {
                let inv = self.pow(id, -1.0)?;
                let coef = self.mul(g, inv)?;
                let ga = self.mul(a, coef)?;
                out.push((a, ga));
            }
            Op::AvgPool2d(a, f) => {
                let up = self.upsample2d(g, f)?;
                let ga = self.scale(up, 1.0 / (f * f) as f64)?;
                out.push((a, ga));
            }
            Op::Upsample2d(a, f) => {
                let down = self.avg_pool2d(g, f)?;
                let ga = self.scale(down, (f * f) as f64)?;
                out.push((a, ga));
            }
            Op::Gather(a, idx, _) => {
                let shape = self.shape(a).to_vec();
                let ga = self.scatter_add(g, idx, &shape)?;
                out.push((a, ga));
            }
            Op::ScatterAdd(a, idx, _) => {
                let shape = self.shape(a).to_vec();
                let ga = self.gather(g, idx, &shape)?;
                out.push((a, ga));
            }
            Op::Clamp(a, lo, hi) => {
                let src = self.value(a);
                let period = lo.len();
                let mask: Vec<f64> = src
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if v >= lo[i % period] && v <= hi[i % period] { 1.0 } else { 0.0 })
                    .collect();
                let mask = self.constant(Tensor::from_parts(src.shape().to_vec(), mask));
                let ga = self.mul(g, mask)?;
                out.push((a, ga));
            }
        }
        Ok(out)
    }

    /// Re-evaluates `root` with every named leaf taken from `bindings`.
    ///
    /// Constants keep their recorded values. Only ancestors of `root` are
    /// visited, so unrelated leaves need no binding.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Tensor, DiffError> {
        let ancestors = self.ancestors(root);
        let mut values: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        for i in 0..=root.0 {
            if !ancestors[i] {
                continue;
            }
            let node = &self.nodes[i];
            let v = match &node.op {
                Op::Leaf(LeafKind::Constant) => node.value.clone(),
                Op::Leaf(LeafKind::Param(name)) | Op::Leaf(LeafKind::Input(name)) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| DiffError::UnboundLeaf { name: name.clone() })?,
                op => kernel(op, |p| values[p.0].as_ref().expect("ancestor evaluated"))?,
            };
            values[i] = Some(v);
        }
        Ok(values[root.0].take().expect("root evaluated"))
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if seen[n.0] {
                continue;
            }
            seen[n.0] = true;
            stack.extend(self.nodes[n.0].op.parents());
        }
        seen
    }

    /// Text outline of the subgraph feeding `root`: id, tag, shape, grad flag.
    pub fn outline(&self, root: NodeId) -> String {
        let ancestors = self.ancestors(root);
        let mut s = String::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if !ancestors[i] {
                continue;
            }
            let name = match &node.op {
                Op::Leaf(LeafKind::Param(n)) | Op::Leaf(LeafKind::Input(n)) => format!(" '{}'", n),
                _ => String::new(),
            };
            let parents: Vec<String> = node.op.parents().iter().map(|p| format!("#{}", p.0)).collect();
            let _ = writeln!(
                s,
                "#{:<4} {:<13}{} {:?}{}{}",
                i,
                node.op.tag(),
                name,
                node.value.shape(),
                if node.requires_grad { " grad" } else { "" },
                if parents.is_empty() { String::new() } else { format!(" <- {}", parents.join(", ")) },
            );
        }
        s
    }
}
