//! Training objectives: cross-entropy, supervised and self-supervised contrastive losses,
//! distillation, and the EWC quadratic penalty with diagonal Fisher estimation.

use crate::diff::{CeTarget, Graph, NodeId, ParamId, ParamSet, RngStream, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::models::Network;
use crate::scalar::Scalar;

/// How per-anchor contrastive terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Sum divided by the number of anchors (rows).
    Mean,
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(invalid("cross-entropy on an empty batch"));
    }
    g.softmax_ce(logits, CeTarget::Labels(labels.to_vec()))
}

/// `exp(aᵀb / (τ‖a‖‖b‖))`.
pub fn sim<T: Scalar>(a: &[T], b: &[T], tau: T) -> Result<T> {
    if a.len() != b.len() {
        return Err(shape_err(format!("sim of lengths {} and {}", a.len(), b.len())));
    }
    if !(tau > T::zero()) {
        return Err(invalid("temperature must be positive"));
    }
    let na = a.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
    let nb = b.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(invalid("sim of a zero vector"));
    }
    let dot = a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
    Ok((dot / (tau * na * nb)).exp())
}

/// Rows `2k` and `2k + 1` are two views of source sample `k`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Scalar> {
    pub embeddings: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub temperature: T,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn new(embeddings: Tensor<T>, labels: Option<Vec<usize>>, temperature: T) -> Result<Self> {
        let b = Self {
            embeddings,
            labels,
            temperature,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let n = self.embeddings.shape()[0];
        if self.embeddings.shape().len() != 2 || !n.is_multiple_of(2) {
            return Err(invalid(format!(
                "contrastive batch needs view pairs, got shape {:?}",
                self.embeddings.shape()
            )));
        }
        if !(self.temperature > T::zero()) {
            return Err(invalid("temperature must be positive"));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(shape_err(format!("{} labels for {n} rows", l.len())));
            }
        }
        Ok(())
    }

    pub fn supcon(&self, reduction: Reduction) -> Result<T> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| invalid("SupCon needs labels"))?;
        let mut g = Graph::new();
        let z = g.input(self.embeddings.clone());
        let l = supcon(&mut g, z, labels, self.temperature, reduction)?;
        Ok(g.value(l).item())
    }

    pub fn simclr(&self, reduction: Reduction) -> Result<T> {
        if self.labels.is_some() {
            return Err(invalid("SimCLR batches carry no labels"));
        }
        let mut g = Graph::new();
        let z = g.input(self.embeddings.clone());
        let l = simclr(&mut g, z, self.temperature, reduction)?;
        Ok(g.value(l).item())
    }
}

/// Shared contrastive core: anchor `i`'s positives are the other rows with the same group id;
/// the denominator runs over every row except `i`.
fn grouped_contrastive<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    groups: &[usize],
    tau: T,
    reduction: Reduction,
) -> Result<NodeId> {
    if !(tau > T::zero()) {
        return Err(invalid("temperature must be positive"));
    }
    let zs = g.value(z).shape().to_vec();
    if zs.len() != 2 || zs[0] != groups.len() {
        return Err(shape_err(format!(
            "{} group ids for embeddings {:?}",
            groups.len(),
            zs
        )));
    }
    let n = zs[0];
    let mut others = vec![T::zero(); n * n];
    let mut positives = vec![T::zero(); n * n];
    for i in 0..n {
        let count = (0..n).filter(|&j| j != i && groups[j] == groups[i]).count();
        if count == 0 {
            return Err(invalid(format!("anchor {i} has no positive in the batch")));
        }
        let w = T::one() / T::of(count as f64);
        for j in 0..n {
            if j != i {
                others[i * n + j] = T::one();
                if groups[j] == groups[i] {
                    positives[i * n + j] = w;
                }
            }
        }
    }
    let zn = g.l2_normalize_rows(z)?;
    let cos = g.matmul_nt(zn, zn)?;
    let logits = g.scale(cos, T::one() / tau)?;
    let e = g.exp(logits)?;
    let others = g.input(Tensor::raw(vec![n, n], others));
    let masked = g.mul(e, others)?;
    let denom = g.sum_rows(masked)?;
    let log_denom = g.log(denom)?;
    let positives = g.input(Tensor::raw(vec![n, n], positives));
    let pos = g.mul(logits, positives)?;
    let pos_mean = g.sum_rows(pos)?;
    let per_anchor = g.sub(log_denom, pos_mean)?;
    match reduction {
        Reduction::Sum => g.sum(per_anchor),
        Reduction::Mean => g.mean(per_anchor),
    }
}

/// Supervised contrastive loss over embedding rows with class labels.
pub fn supcon<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    labels: &[usize],
    tau: T,
    reduction: Reduction,
) -> Result<NodeId> {
    grouped_contrastive(g, z, labels, tau, reduction)
}

/// SimCLR loss; rows `2k` and `2k + 1` are the two views of sample `k`.
pub fn simclr<T: Scalar>(g: &mut Graph<T>, z: NodeId, tau: T, reduction: Reduction) -> Result<NodeId> {
    let n = g.value(z).shape()[0];
    if !n.is_multiple_of(2) {
        return Err(invalid(format!("unpaired row: {n} rows")));
    }
    let pairs: Vec<usize> = (0..n).map(|i| i / 2).collect();
    grouped_contrastive(g, z, &pairs, tau, reduction)
}

/// Row-wise `softmax(logits / t)` as plain values.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, t: T) -> Tensor<T> {
    let (r, c) = logits.rows_cols();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = logits.row(i);
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b / t));
        let z = row.iter().fold(T::zero(), |a, &b| a + (b / t - mx).exp());
        out.extend(row.iter().map(|&b| (b / t - mx).exp() / z));
    }
    Tensor::raw(vec![r, c], out)
}

/// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`. The teacher is a constant.
pub fn distillation<T: Scalar>(
    g: &mut Graph<T>,
    student: NodeId,
    teacher: &Tensor<T>,
    t_kd: T,
) -> Result<NodeId> {
    if !(t_kd > T::zero()) {
        return Err(invalid("distillation temperature must be positive"));
    }
    if g.value(student).shape() != teacher.shape() {
        return Err(shape_err(format!(
            "student {:?} vs teacher {:?}",
            g.value(student).shape(),
            teacher.shape()
        )));
    }
    let p = softmax_rows(teacher, t_kd);
    let (r, _) = p.rows_cols();
    let mut entropy = T::zero();
    for &v in p.data() {
        if v > T::zero() {
            entropy -= v * v.ln();
        }
    }
    let mean_entropy = entropy / T::of(r as f64);
    let scaled = g.scale(student, T::one() / t_kd)?;
    let ce = g.softmax_ce(scaled, CeTarget::Probs(p))?;
    let h = g.input(Tensor::scalar(mean_entropy));
    let kl = g.sub(ce, h)?;
    g.scale(kl, t_kd * t_kd)
}

/// Anchor parameters and diagonal Fisher captured at the end of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherAnchor<T: Scalar> {
    pub task: usize,
    /// `(parameter, θ*, F)` for every parameter that existed at capture time.
    pub entries: Vec<(ParamId, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> FisherAnchor<T> {
    pub fn fisher(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.0 == id).map(|e| &e.2)
    }
}

fn check_anchor<T: Scalar>(params: &ParamSet<T>, a: &FisherAnchor<T>) -> Result<()> {
    for (id, star, f) in &a.entries {
        if id.0 >= params.len() {
            return Err(shape_err(format!("anchor references unknown parameter {}", id.0)));
        }
        let s = params.get(*id).shape();
        if star.shape() != s || f.shape() != s {
            return Err(shape_err(format!("anchor shape for {}", params.name(*id))));
        }
    }
    Ok(())
}

/// `(λ/2) Σ_anchors Σ F·(θ − θ*)²` on the graph.
pub fn ewc_penalty<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    anchors: &[FisherAnchor<T>],
    lambda: T,
) -> Result<NodeId> {
    if lambda < T::zero() {
        return Err(invalid("EWC λ must be ≥ 0"));
    }
    let mut total: Option<NodeId> = None;
    for a in anchors {
        check_anchor(params, a)?;
        for (id, star, f) in &a.entries {
            if f.data().iter().all(|&v| v == T::zero()) {
                continue;
            }
            let p = g.param(params, *id);
            let s = g.input(star.clone());
            let d = g.sub(p, s)?;
            let d2 = g.mul(d, d)?;
            let fw = g.input(f.clone());
            let w = g.mul(d2, fw)?;
            let term = g.sum(w)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.input(Tensor::scalar(T::zero())),
    };
    g.scale(total, lambda / T::of(2.0))
}

/// Plain-value EWC penalty.
pub fn ewc_penalty_value<T: Scalar>(params: &ParamSet<T>, anchors: &[FisherAnchor<T>], lambda: T) -> Result<T> {
    let mut g = Graph::new();
    let n = ewc_penalty(&mut g, params, anchors, lambda)?;
    Ok(g.value(n).item())
}

/// Diagonal Fisher with labels sampled from the model's own predictive distribution.
///
/// Draws `n_samples` times, cycling over `inputs` rows in order. For each draw, `logits_fn`
/// builds `[1, K]` logits for the row, a label is sampled from their softmax, and the squared
/// gradient of its log-likelihood is accumulated. Parameters not reached by the graph get 0.
pub fn fisher_diagonal<T, F>(
    params: &ParamSet<T>,
    inputs: &Tensor<T>,
    n_samples: usize,
    logits_fn: F,
    rng: &mut RngStream,
) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
{
    if n_samples == 0 {
        return Err(invalid("n_samples must be ≥ 1"));
    }
    let rows = inputs.shape()[0];
    let mut acc: Vec<Vec<T>> = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
    for s in 0..n_samples {
        let x = inputs.select_rows(&[s % rows]);
        let mut g = Graph::new();
        let xn = g.input(x);
        let logits = logits_fn(&mut g, xn)?;
        let lv = g.value(logits);
        if lv.shape()[0] != 1 {
            return Err(shape_err("fisher logits must have one row"));
        }
        let probs: Vec<f64> = softmax_rows(lv, T::one())
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let y = rng.categorical(&probs);
        let nll = g.softmax_ce(logits, CeTarget::Labels(vec![y]))?;
        for (id, gr) in g.backward(nll)? {
            for (a, &v) in acc[id.0].iter_mut().zip(gr.data()) {
                *a += v * v;
            }
        }
    }
    let inv = T::one() / T::of(n_samples as f64);
    Ok(params
        .iter()
        .zip(acc)
        .map(|((_, _, t), a)| Tensor::raw(t.shape().to_vec(), a.into_iter().map(|v| v * inv).collect()))
        .collect())
}

/// Fisher anchor for `task` through the network's head for that task. `n_samples = None`
/// uses every row once.
pub fn estimate_fisher<T: Scalar>(
    net: &Network<T>,
    task: usize,
    inputs: &Tensor<T>,
    n_samples: Option<usize>,
    rng: &mut RngStream,
) -> Result<FisherAnchor<T>> {
    if inputs.is_empty() {
        return Err(invalid("empty task data"));
    }
    if !net.has_head(task) {
        return Err(crate::Error::MissingHead(task));
    }
    let n = n_samples.unwrap_or(inputs.shape()[0]);
    let fisher = fisher_diagonal(
        net.params(),
        inputs,
        n,
        |g, x| {
            let tr = net.backbone(g, x)?;
            net.head(g, task, tr.representation)
        },
        rng,
    )?;
    Ok(FisherAnchor {
        task,
        entries: net
            .params()
            .iter()
            .zip(fisher)
            .map(|((id, _, t), f)| (id, t.clone(), f))
            .collect(),
    })
}
