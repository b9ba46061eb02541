use std::collections::BTreeMap;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Named leaf tensors that receive gradients. Insertion order is the canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradients keyed by parameter, for every parameter that appeared in the graph.
pub type Gradients<T> = BTreeMap<ParamId, Tensor<T>>;

/// Target of the fused softmax cross-entropy.
#[derive(Clone, Debug)]
pub enum CeTarget<T: Scalar> {
    Labels(Vec<usize>),
    /// Row-stochastic target distribution, same shape as the logits.
    Probs(Tensor<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Input,
    Param,
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Pool {
        x: NodeId,
        kind: PoolKind,
        size: usize,
        /// For max pooling, the flat input index chosen for every output element.
        argmax: Vec<usize>,
    },
    GlobalMeanPool(NodeId),
    L2NormRows {
        x: NodeId,
        norms: Vec<T>,
    },
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    SoftmaxCe {
        logits: NodeId,
        target: CeTarget<T>,
        probs: Vec<T>,
    },
    Log(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    Mean(NodeId),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Pool { .. } => "pool",
            Op::GlobalMeanPool(_) => "global_mean_pool",
            Op::L2NormRows { .. } => "l2norm",
            Op::ConcatRows(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Define-by-run tape. Every op evaluates eagerly and records what backward needs.
#[derive(Clone, Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(id))
    }

    /// Constant leaf. Inputs are validated at construction, so this cannot fail on values.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Input,
            value,
        });
        NodeId(id)
    }

    /// Parameter leaf. Repeated requests for the same parameter share one node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param,
            value: params.get(id).clone(),
        });
        self.param_nodes.insert(id, n);
        n
    }

    /// `x · w + b` with `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(shape_err(format!(
                "affine x{:?} w{:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, k) = (xv.shape()[0], xv.shape()[1]);
        let m = wv.shape()[1];
        let mut out = matmul(xv.data(), wv.data(), n, k, m);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err(format!("affine bias {:?} for width {m}", bv.shape())));
            }
            for row in out.chunks_mut(m) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        self.push(Op::Affine { x, w, b }, Tensor::raw(vec![n, m], out))
    }

    /// `a · bᵀ` with `a: [n, k]`, `b: [m, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(shape_err(format!(
                "matmul_nt {:?} {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let out = matmul_nt(av.data(), bv.data(), n, k, m);
        self.push(Op::MatMulNt { a, b }, Tensor::raw(vec![n, m], out))
    }

    /// 2-D convolution. `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv2d x{xs:?} w{ws:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(invalid(format!("conv2d stride {stride}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err(format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != o {
                    return Err(shape_err("conv2d bias"));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let out = conv_forward(xv.data(), wv.data(), bias.as_deref(), &geom);
        self.push(
            Op::Conv2d { x, w, b, geom },
            Tensor::raw(vec![n, o, ho, wo], out),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(Op::Relu(x), v)
    }

    /// Non-overlapping `size × size` pooling over `[n, c, h, w]`; trailing rows/cols that do
    /// not fill a window are dropped.
    pub fn pool2d(&mut self, x: NodeId, kind: PoolKind, size: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(shape_err(format!("pool{size} over {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::one() / T::of((size * size) as f64);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    let mut acc = T::zero();
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + (j * size + dj);
                            let v = d[idx];
                            acc += v;
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_idx);
                        }
                        PoolKind::Mean => out.push(acc * inv),
                    }
                }
            }
        }
        self.push(
            Op::Pool {
                x,
                kind,
                size,
                argmax,
            },
            Tensor::raw(vec![n, c, ho, wo], out),
        )
    }

    /// `[n, c, h, w] → [n, c]`.
    pub fn global_mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("global_mean_pool over {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(hw as f64);
        let out = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
            .collect();
        self.push(Op::GlobalMeanPool(x), Tensor::raw(vec![n, c], out))
    }

    /// Row-wise `x / ‖x‖`; norms are floored at 1e-12.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.rows_cols();
        let floor = T::of(1e-12);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = xv.row(i);
            let nrm = row.iter().fold(T::zero(), |a, &b| a + b * b).sqrt().max(floor);
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        let shape = xv.shape().to_vec();
        self.push(Op::L2NormRows { x, norms }, Tensor::raw(shape, out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        self.push(Op::Reshape(x), v)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "elementwise {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::raw(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(x).map(|a| a * c);
        self.push(Op::Scale(x, c), v)
    }

    /// Mean over rows of `−Σ_k t_k log softmax(logits)_k`. Fused for stability.
    pub fn softmax_ce(&mut self, logits: NodeId, target: CeTarget<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(shape_err(format!("softmax_ce logits {:?}", lv.shape())));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        match &target {
            CeTarget::Labels(y) => {
                if y.len() != n {
                    return Err(shape_err(format!("{} labels for {n} rows", y.len())));
                }
                if let Some(&bad) = y.iter().find(|&&c| c >= k) {
                    return Err(invalid(format!("label {bad} out of range for {k} classes")));
                }
            }
            CeTarget::Probs(p) => {
                if p.shape() != lv.shape() {
                    return Err(shape_err(format!(
                        "soft targets {:?} for logits {:?}",
                        p.shape(),
                        lv.shape()
                    )));
                }
            }
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z = row.iter().fold(T::zero(), |a, &b| a + (b - mx).exp());
            let lse = mx + z.ln();
            for &v in row {
                probs.push((v - lse).exp());
            }
            match &target {
                CeTarget::Labels(y) => total += lse - row[y[i]],
                CeTarget::Probs(p) => {
                    for (&t, &v) in p.row(i).iter().zip(row) {
                        if t != T::zero() {
                            total += t * (lse - v);
                        }
                    }
                }
            }
        }
        let loss = total / T::of(n as f64);
        self.push(
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(T::ln);
        self.push(Op::Log(x), v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(T::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// `[n, m] → [n]`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, _) = xv.rows_cols();
        let data = (0..r)
            .map(|i| xv.row(i).iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        self.push(Op::SumRows(x), Tensor::raw(vec![r], data))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / T::of(xv.len() as f64));
        self.push(Op::Mean(x), v)
    }

    /// Reverse pass from a scalar node. Every parameter present in the graph gets a gradient,
    /// zero when the loss does not depend on it. Accumulation runs in reverse node order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss.0));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[1];
                    accumulate(&mut grads, *x, matmul_nt(&g, wv.data(), n, m, k));
                    accumulate(&mut grads, *w, matmul_tn(xv.data(), &g, n, k, m));
                    if let Some(b) = b {
                        let mut gb = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                    accumulate(&mut grads, *a, matmul(&g, bv.data(), n, m, k));
                    accumulate(&mut grads, *b, matmul_tn(&g, av.data(), n, m, k));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw, gb) =
                        conv_backward(self.value(*x).data(), self.value(*w).data(), &g, geom);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    let gx = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Pool {
                    x,
                    kind,
                    size,
                    argmax,
                } => {
                    let xv = self.value(*x);
                    let s = xv.shape();
                    let mut gx = vec![T::zero(); xv.len()];
                    match kind {
                        PoolKind::Max => {
                            for (&gv, &src) in g.iter().zip(argmax) {
                                gx[src] += gv;
                            }
                        }
                        PoolKind::Mean => {
                            let (h, w) = (s[2], s[3]);
                            let (ho, wo) = (h / size, w / size);
                            let inv = T::one() / T::of((size * size) as f64);
                            for plane in 0..s[0] * s[1] {
                                for i in 0..ho {
                                    for j in 0..wo {
                                        let gv = g[(plane * ho + i) * wo + j] * inv;
                                        for di in 0..*size {
                                            for dj in 0..*size {
                                                let idx = plane * h * w
                                                    + (i * size + di) * w
                                                    + (j * size + dj);
                                                gx[idx] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GlobalMeanPool(x) => {
                    let s = self.value(*x).shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::of(hw as f64);
                    let mut gx = Vec::with_capacity(g.len() * hw);
                    for &gv in &g {
                        gx.extend(std::iter::repeat_n(gv * inv, hw));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2NormRows { x, norms } => {
                    let y = &node.value;
                    let (r, c) = y.rows_cols();
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        gx.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(&yv, &gv)| (gv - yv * dot) / norms[i]),
                        );
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut grads, p, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    let gb = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => {
                    accumulate(&mut grads, *x, g.iter().map(|&v| v * *c).collect());
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let (n, k) = (lv.shape()[0], lv.shape()[1]);
                    let coef = g[0] / T::of(n as f64);
                    let mut gl: Vec<T> = probs.clone();
                    match target {
                        CeTarget::Labels(y) => {
                            for (i, &c) in y.iter().enumerate() {
                                gl[i * k + c] -= T::one();
                            }
                        }
                        CeTarget::Probs(p) => {
                            // Σ_k t_k = 1 is not assumed.
                            for i in 0..n {
                                let tr = p.row(i);
                                let mass = tr.iter().fold(T::zero(), |a, &b| a + b);
                                for j in 0..k {
                                    gl[i * k + j] = gl[i * k + j] * mass - tr[j];
                                }
                            }
                        }
                    }
                    for v in gl.iter_mut() {
                        *v *= coef;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    accumulate(
                        &mut grads,
                        *x,
                        g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect(),
                    );
                }
                Op::Exp(x) => {
                    let out = node.value.data();
                    accumulate(
                        &mut grads,
                        *x,
                        g.iter().zip(out).map(|(&gv, &v)| gv * v).collect(),
                    );
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::SumRows(x) => {
                    let (r, c) = self.value(*x).rows_cols();
                    let mut gx = Vec::with_capacity(r * c);
                    for &gv in &g {
                        gx.extend(std::iter::repeat_n(gv, c));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let v = g[0] / T::of(n as f64);
                    accumulate(&mut grads, *x, vec![v; n]);
                }
            }
        }

        let mut out = Gradients::new();
        for (&pid, &nid) in &self.param_nodes {
            let shape = self.value(nid).shape().to_vec();
            let data = grads
                .get_mut(nid.0)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![T::zero(); self.value(nid).len()]);
            out.insert(pid, Tensor::raw(shape, data));
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], node: NodeId, g: Vec<T>) {
    match &mut grads[node.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.o * g.ho * g.wo];
    for ni in 0..g.n {
        for oc in 0..g.o {
            let bias = b.map_or(T::zero(), |b| b[oc]);
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let mut acc = bias;
                    for ic in 0..g.c {
                        for ki in 0..g.k {
                            let yi = (i * g.stride + ki) as isize - g.pad as isize;
                            if yi < 0 || yi as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.k {
                                let xj = (j * g.stride + kj) as isize - g.pad as isize;
                                if xj < 0 || xj as usize >= g.w {
                                    continue;
                                }
                                let xv = x[((ni * g.c + ic) * g.h + yi as usize) * g.w + xj as usize];
                                let wv = w[((oc * g.c + ic) * g.k + ki) * g.k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * g.o + oc) * g.ho + i) * g.wo + j] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.o];
    for ni in 0..g.n {
        for oc in 0..g.o {
            for i in 0..g.ho {
                for j in 0..g.wo {
                    let gv = gy[((ni * g.o + oc) * g.ho + i) * g.wo + j];
                    gb[oc] += gv;
                    if gv == T::zero() {
                        continue;
                    }
                    for ic in 0..g.c {
                        for ki in 0..g.k {
                            let yi = (i * g.stride + ki) as isize - g.pad as isize;
                            if yi < 0 || yi as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.k {
                                let xj = (j * g.stride + kj) as isize - g.pad as isize;
                                if xj < 0 || xj as usize >= g.w {
                                    continue;
                                }
                                let xi = ((ni * g.c + ic) * g.h + yi as usize) * g.w + xj as usize;
                                let wi = ((oc * g.c + ic) * g.k + ki) * g.k + kj;
                                gx[xi] += gv * w[wi];
                                gw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_affine() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[1., 2.]));
        let w = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.input(t(&[2], &[0., 0.]));
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2.]);
    }

    #[test]
    fn relu_and_l2norm() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &[-1., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 2.]);
        let v = g.input(t(&[1, 2], &[3., 4.]));
        let n = g.l2_normalize_rows(v).unwrap();
        let d = g.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", t(&[3], &[1., 2., 3.])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&ps, id);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&id].data(), &[2., 4., 6.]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", t(&[2], &[1., 2.])).unwrap();
        let b = ps.insert("b", t(&[2], &[5., 6.])).unwrap();
        let mut g = Graph::new();
        let an = g.param(&ps, a);
        let _bn = g.param(&ps, b);
        let l = g.sum(an).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&b].data(), &[0., 0.]);
    }

    #[test]
    fn ce_gradient_on_uniform_logits() {
        let mut ps = ParamSet::new();
        let id = ps.insert("z", t(&[1, 2], &[0., 0.])).unwrap();
        let mut g = Graph::new();
        let z = g.param(&ps, id);
        let l = g.softmax_ce(z, CeTarget::Labels(vec![0])).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads[&id].data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_errors() {
        let g: Graph<f64> = Graph::new();
        assert!(matches!(g.backward(NodeId(0)), Err(Error::NoForward)));
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_is_reported_with_node() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[800.0]));
        let e = g.exp(x).unwrap_err();
        assert!(matches!(e, Error::NonFinite { node: 1, op: "exp" }));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 3], &[1., 2., 3.]));
        let w = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        assert!(matches!(g.affine(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.input(t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
        let p = g.pool2d(y, PoolKind::Max, 2).unwrap();
        assert_eq!(g.value(p).data(), &[4.]);
    }
}
