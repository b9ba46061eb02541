//! Desk-scale backbones with per-block taps, per-task heads and an optional projection head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamId, ParamSet, PoolKind, RngStream, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `[affine → relu] × depth`.
    Mlp,
    /// `[conv3x3 → relu → maxpool2] × depth`, then global mean pooling.
    Smallconv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub representation_dim: usize,
    #[serde(default)]
    pub projection_dim: Option<usize>,
    /// `[d]` for mlp, `[channels, height, width]` for smallconv.
    pub input_shape: Vec<usize>,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, depth: usize, width: usize) -> Self {
        Self {
            family: Family::Mlp,
            depth,
            width,
            representation_dim: width,
            projection_dim: None,
            input_shape: vec![input_dim],
        }
    }

    pub fn smallconv(input_shape: [usize; 3], depth: usize, width: usize) -> Self {
        Self {
            family: Family::Smallconv,
            depth,
            width,
            representation_dim: width,
            projection_dim: None,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn with_projection(mut self, dim: usize) -> Self {
        self.projection_dim = Some(dim);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.representation_dim == 0 {
            return Err(invalid("depth, width and representation_dim must be ≥ 1"));
        }
        if self.projection_dim == Some(0) {
            return Err(invalid("projection_dim must be ≥ 1"));
        }
        if self.input_shape.contains(&0) {
            return Err(invalid("input dimensions must be ≥ 1"));
        }
        match (self.family, self.input_shape.len()) {
            (Family::Mlp, 1) | (Family::Smallconv, 3) => Ok(()),
            (f, n) => Err(invalid(format!("{f:?} expects {} input dims, got {n}", if f == Family::Mlp { 1 } else { 3 }))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn block_out(&self, b: usize) -> usize {
        if b + 1 == self.depth {
            self.representation_dim
        } else {
            self.width
        }
    }

    /// Spatial size after each smallconv block (pooling is skipped once a side drops below 2).
    fn conv_sides(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        (0..self.depth)
            .map(|_| {
                if h >= 2 && w >= 2 {
                    h /= 2;
                    w /= 2;
                }
                (h, w)
            })
            .collect()
    }

    /// Feature dimension at a tap.
    pub fn tap_dim(&self, tap: Tap) -> Result<usize> {
        match tap {
            Tap::Final => Ok(self.representation_dim),
            Tap::Block(b) if b < self.depth => Ok(match self.family {
                Family::Mlp => self.block_out(b),
                Family::Smallconv => {
                    let (h, w) = self.conv_sides()[b];
                    self.block_out(b) * h * w
                }
            }),
            Tap::Block(b) => Err(Error::UnknownTap(b.to_string())),
        }
    }
}

/// Where features are read from: a block's (pooled) output or the representation.
/// Serialized as `"final"` or the block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "TapRepr", into = "TapRepr")]
pub enum Tap {
    Block(usize),
    Final,
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Block(b) => write!(f, "{b}"),
            Tap::Final => f.write_str("final"),
        }
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            return Ok(Tap::Final);
        }
        s.parse::<usize>()
            .map(Tap::Block)
            .map_err(|_| Error::UnknownTap(s.to_string()))
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum TapRepr {
    Index(usize),
    Name(String),
}

impl TryFrom<TapRepr> for Tap {
    type Error = Error;
    fn try_from(r: TapRepr) -> Result<Self> {
        match r {
            TapRepr::Index(b) => Ok(Tap::Block(b)),
            TapRepr::Name(s) => s.parse(),
        }
    }
}

impl From<Tap> for TapRepr {
    fn from(t: Tap) -> Self {
        match t {
            Tap::Block(b) => TapRepr::Index(b),
            Tap::Final => TapRepr::Name("final".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadInfo {
    pub classes: usize,
    w: ParamId,
    b: ParamId,
}

/// Graph nodes produced by one backbone pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub taps: Vec<NodeId>,
    pub representation: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    spec: ModelSpec,
    params: ParamSet<T>,
    blocks: Vec<Layer>,
    projection: Option<(Layer, Layer)>,
    heads: BTreeMap<usize, HeadInfo>,
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

impl<T: Scalar> Network<T> {
    /// Weights are drawn from `U(±√(6/fan_in))`, biases start at zero.
    pub fn build(spec: &ModelSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(spec.depth);
        let mut fan_in_dim = match spec.family {
            Family::Mlp => spec.input_shape[0],
            Family::Smallconv => spec.input_shape[0],
        };
        for b in 0..spec.depth {
            let out = spec.block_out(b);
            let (wshape, fan_in) = match spec.family {
                Family::Mlp => (vec![fan_in_dim, out], fan_in_dim),
                Family::Smallconv => (vec![out, fan_in_dim, 3, 3], fan_in_dim * 9),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = params.insert(format!("block{b}.weight"), uniform_tensor(&wshape, bound, rng))?;
            let bias = params.insert(format!("block{b}.bias"), Tensor::zeros(&[out]))?;
            blocks.push(Layer { w, b: bias });
            fan_in_dim = out;
        }
        let projection = match spec.projection_dim {
            Some(pd) => {
                let r = spec.representation_dim;
                let bound = (6.0 / r as f64).sqrt();
                let w0 = params.insert("proj.0.weight", uniform_tensor(&[r, r], bound, rng))?;
                let b0 = params.insert("proj.0.bias", Tensor::zeros(&[r]))?;
                let w1 = params.insert("proj.1.weight", uniform_tensor(&[r, pd], bound, rng))?;
                let b1 = params.insert("proj.1.bias", Tensor::zeros(&[pd]))?;
                Some((Layer { w: w0, b: b0 }, Layer { w: w1, b: b1 }))
            }
            None => None,
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            blocks,
            projection,
            heads: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn heads(&self) -> &BTreeMap<usize, HeadInfo> {
        &self.heads
    }

    pub fn has_head(&self, task: usize) -> bool {
        self.heads.contains_key(&task)
    }

    /// Parameter ids of the backbone (all blocks), in build order.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Parameter ids of the projection head, empty when the model has none.
    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.projection
            .iter()
            .flat_map(|(a, b)| [a.w, a.b, b.w, b.b])
            .collect()
    }

    pub fn head_ids(&self, task: usize) -> Option<[ParamId; 2]> {
        self.heads.get(&task).map(|h| [h.w, h.b])
    }

    /// Adds an affine head `representation → classes` with fan-in uniform weights.
    pub fn add_head(&mut self, task: usize, classes: usize, rng: &mut RngStream) -> Result<()> {
        if self.heads.contains_key(&task) {
            return Err(invalid(format!("head for task {task} already exists")));
        }
        if classes == 0 {
            return Err(invalid("head needs at least one class"));
        }
        let r = self.spec.representation_dim;
        let bound = 1.0 / (r as f64).sqrt();
        let w = self
            .params
            .insert(format!("head{task}.weight"), uniform_tensor(&[r, classes], bound, rng))?;
        let b = self
            .params
            .insert(format!("head{task}.bias"), Tensor::zeros(&[classes]))?;
        self.heads.insert(task, HeadInfo { classes, w, b });
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(shape_err(format!(
                "input {:?} for model input {:?}",
                s, self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Backbone pass on a graph; `x` must be `[n, input_shape...]`.
    pub fn backbone(&self, g: &mut Graph<T>, x: NodeId) -> Result<Trace> {
        self.check_input(g.value(x))?;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.blocks.len());
        match self.spec.family {
            Family::Mlp => {
                for l in &self.blocks {
                    let w = g.param(&self.params, l.w);
                    let b = g.param(&self.params, l.b);
                    let a = g.affine(h, w, Some(b))?;
                    h = g.relu(a)?;
                    taps.push(h);
                }
                Ok(Trace {
                    taps,
                    representation: h,
                })
            }
            Family::Smallconv => {
                for l in &self.blocks {
                    let w = g.param(&self.params, l.w);
                    let b = g.param(&self.params, l.b);
                    let c = g.conv2d(h, w, Some(b), 1, 1)?;
                    let r = g.relu(c)?;
                    let s = g.value(r).shape();
                    h = if s[2] >= 2 && s[3] >= 2 {
                        g.pool2d(r, PoolKind::Max, 2)?
                    } else {
                        r
                    };
                    taps.push(h);
                }
                let rep = g.global_mean_pool(h)?;
                Ok(Trace {
                    taps,
                    representation: rep,
                })
            }
        }
    }

    pub fn head(&self, g: &mut Graph<T>, task: usize, representation: NodeId) -> Result<NodeId> {
        let h = self.heads.get(&task).ok_or(Error::MissingHead(task))?;
        let w = g.param(&self.params, h.w);
        let b = g.param(&self.params, h.b);
        g.affine(representation, w, Some(b))
    }

    /// Projection head `affine → relu → affine`; normalization happens inside the similarity.
    pub fn project(&self, g: &mut Graph<T>, representation: NodeId) -> Result<NodeId> {
        let (l0, l1) = self
            .projection
            .ok_or_else(|| invalid("model has no projection head"))?;
        let w0 = g.param(&self.params, l0.w);
        let b0 = g.param(&self.params, l0.b);
        let a = g.affine(representation, w0, Some(b0))?;
        let r = g.relu(a)?;
        let w1 = g.param(&self.params, l1.w);
        let b1 = g.param(&self.params, l1.b);
        g.affine(r, w1, Some(b1))
    }

    /// Frozen features at a tap, one row per sample. Block taps are flattened.
    pub fn features(&self, x: &Tensor<T>, tap: Tap) -> Result<Tensor<T>> {
        if let Tap::Block(b) = tap {
            if b >= self.spec.depth {
                return Err(Error::UnknownTap(b.to_string()));
            }
        }
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let tr = self.backbone(&mut g, xn)?;
        let node = match tap {
            Tap::Final => tr.representation,
            Tap::Block(b) => tr.taps[b],
        };
        Ok(g.value(node).flatten_rows())
    }

    pub fn head_logits(&self, task: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.has_head(task) {
            return Err(Error::MissingHead(task));
        }
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let tr = self.backbone(&mut g, xn)?;
        let l = self.head(&mut g, task, tr.representation)?;
        Ok(g.value(l).clone())
    }

    /// Reorders the units of the last backbone block: representation feature `i` of the
    /// result equals feature `perm[i]` of the original. Heads are left untouched; the
    /// projection input is permuted to match so the projection output is unchanged.
    pub fn permute_representation(&mut self, perm: &[usize]) -> Result<()> {
        let r = self.spec.representation_dim;
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("not a permutation of the representation units"));
        }
        let last = *self.blocks.last().expect("depth ≥ 1");
        let w = self.params.get(last.w).clone();
        let b = self.params.get(last.b).clone();
        let mut nw = w.clone();
        match self.spec.family {
            Family::Mlp => {
                let (rows, cols) = w.rows_cols();
                for i in 0..rows {
                    for (j, &src) in perm.iter().enumerate() {
                        nw.data_mut()[i * cols + j] = w.data()[i * cols + src];
                    }
                }
            }
            Family::Smallconv => {
                let per = w.len() / r;
                for (j, &src) in perm.iter().enumerate() {
                    nw.data_mut()[j * per..(j + 1) * per]
                        .copy_from_slice(&w.data()[src * per..(src + 1) * per]);
                }
            }
        }
        let nb: Vec<T> = perm.iter().map(|&src| b.data()[src]).collect();
        *self.params.get_mut(last.w) = nw;
        self.params.get_mut(last.b).data_mut().copy_from_slice(&nb);
        if let Some((l0, _)) = self.projection {
            let pw = self.params.get(l0.w).clone();
            let (_, cols) = pw.rows_cols();
            let target = self.params.get_mut(l0.w).data_mut();
            for (j, &src) in perm.iter().enumerate() {
                target[j * cols..(j + 1) * cols]
                    .copy_from_slice(&pw.data()[src * cols..(src + 1) * cols]);
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, step: usize) -> Snapshot<T> {
        Snapshot {
            step,
            network: self.clone(),
        }
    }
}

/// Immutable copy of a network at a sequence step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T: Scalar> {
    step: usize,
    network: Network<T>,
}

const MAGIC: &[u8; 4] = b"RPSN";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    spec: ModelSpec,
    /// task id → class count
    heads: BTreeMap<usize, usize>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptSnapshot(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptSnapshot("length overflow".into()))
    }
}

impl<T: Scalar> Snapshot<T> {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    /// A live network equal to the one captured.
    pub fn restore(&self) -> Network<T> {
        self.network.clone()
    }

    /// Layout: magic, u32 version, u32 header length, JSON header (spec and heads), u64 step,
    /// u32 parameter count, then per parameter: u32 name length, name, u32 rank,
    /// u64 dims, f64 values. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let header = SnapshotHeader {
            spec: net.spec.clone(),
            heads: net.heads.iter().map(|(&t, h)| (t, h.classes)).collect(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + hjson.len() + net.params.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
        for (_, name, t) in net.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptSnapshot(m.to_string());
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptSnapshot(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: SnapshotHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::CorruptSnapshot(format!("header: {e}")))?;
        let step = r.len()?;
        let count = r.u32()? as usize;
        let mut stored: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| corrupt("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt("implausible tensor rank"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("shape overflow"))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::CorruptSnapshot(format!("{name}: {e}")))?;
            stored.insert(name, t);
        }
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes"));
        }

        // Rebuild the layout from the spec, then overwrite every parameter.
        let mut net = Network::<T>::build(&header.spec, &mut RngStream::new(0))
            .map_err(|e| Error::CorruptSnapshot(format!("spec: {e}")))?;
        for (&task, &classes) in &header.heads {
            net.add_head(task, classes, &mut RngStream::new(0))
                .map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        }
        if net.params.len() != stored.len() {
            return Err(Error::CorruptSnapshot(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                stored.len()
            )));
        }
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            let name = net.params.name(id).to_string();
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::CorruptSnapshot(format!("missing parameter {name}")))?;
            if t.shape() != net.params.get(id).shape() {
                return Err(Error::CorruptSnapshot(format!("shape of {name}")));
            }
            *net.params.get_mut(id) = t;
        }
        Ok(Snapshot { step, network: net })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
