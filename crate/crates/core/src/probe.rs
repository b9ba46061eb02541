//! Optimal linear probes on frozen features, observed accuracy and representation forgetting.

use serde::{Deserialize, Serialize};

use crate::data::{Split, Task};
use crate::diff::{matmul, matmul_nt, Tensor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::models::{Network, Snapshot, Tap};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub tap: Tap,
    pub max_iterations: usize,
    /// Stop once the gradient norm falls to this value.
    pub tolerance: f64,
    /// Strength of the `(l2/2)‖W‖²` penalty; the bias is not penalized.
    pub l2: f64,
    /// Fit on the training inputs plus one augmented copy of each.
    pub augment: bool,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            tap: Tap::Final,
            max_iterations: 5000,
            tolerance: 1e-6,
            l2: 1e-4,
            augment: false,
            seed: 0,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.l2 >= 0.0) || self.max_iterations == 0 {
            return Err(invalid(format!("probe spec {self:?}")));
        }
        Ok(())
    }
}

/// Affine multinomial classifier fitted on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult<T: Scalar> {
    /// `[features, classes]`
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub train_accuracy: f64,
    /// Objective value after every accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
    /// Accuracy on a designated evaluation set, when one was given.
    pub accuracy: Option<f64>,
}

impl<T: Scalar> ProbeResult<T> {
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = features.rows_cols();
        let k = self.bias.len();
        if d != self.weights.shape()[0] {
            return Err(shape_err(format!("probe over {} features got {d}", self.weights.shape()[0])));
        }
        let mut z = matmul(features.data(), self.weights.data(), n, d, k);
        for row in z.chunks_mut(k) {
            for (v, &b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(Tensor::raw(vec![n, k], z))
    }

    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(features)?))
    }

    pub fn accuracy_on(&self, features: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(features)?, labels))
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let (r, _) = logits.rows_cols();
    (0..r)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

struct Problem<'a, T: Scalar> {
    x: &'a [T],
    y: &'a [usize],
    n: usize,
    d: usize,
    k: usize,
    l2: T,
}

impl<T: Scalar> Problem<'_, T> {
    /// Objective and (optionally) gradient at `theta = [Wᵀ (k×d) | b (k)]`.
    fn eval(&self, theta: &[T], grad: Option<&mut [T]>) -> T {
        let (n, d, k) = (self.n, self.d, self.k);
        let (wt, b) = theta.split_at(d * k);
        let mut z = matmul_nt(self.x, wt, n, d, k);
        let mut loss = T::zero();
        for (i, row) in z.chunks_mut(k).enumerate() {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let s = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp());
            let lse = mx + s.ln();
            loss += lse - row[self.y[i]];
            // Turn the row into dL/dz = softmax − onehot.
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            row[self.y[i]] -= T::one();
        }
        let inv_n = T::one() / T::of(n as f64);
        let reg = wt.iter().fold(T::zero(), |a, &v| a + v * v) * self.l2 / T::of(2.0);
        if let Some(gr) = grad {
            let (gw, gb) = gr.split_at_mut(d * k);
            gw.fill(T::zero());
            gb.fill(T::zero());
            for (xrow, zrow) in self.x.chunks(d).zip(z.chunks(k)) {
                for (c, &r) in zrow.iter().enumerate() {
                    gb[c] += r;
                    for (g, &xv) in gw[c * d..(c + 1) * d].iter_mut().zip(xrow) {
                        *g += r * xv;
                    }
                }
            }
            for (g, &wv) in gw.iter_mut().zip(wt) {
                *g = *g * inv_n + self.l2 * wv;
            }
            for g in gb.iter_mut() {
                *g *= inv_n;
            }
        }
        loss * inv_n + reg
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// Minimizes mean cross-entropy + `(l2/2)‖W‖²` by full-batch gradient descent with
/// Armijo backtracking. Trial steps start from the Barzilai–Borwein estimate; every
/// accepted step strictly decreases the objective.
pub fn fit_linear_probe<T: Scalar>(features: &Tensor<T>, labels: &[usize], spec: &ProbeSpec) -> Result<ProbeResult<T>> {
    spec.validate()?;
    if features.shape().len() != 2 {
        return Err(shape_err(format!("probe features must be 2-D, got {:?}", features.shape())));
    }
    let (n, d) = features.rows_cols();
    if n != labels.len() {
        return Err(shape_err(format!("{n} feature rows for {} labels", labels.len())));
    }
    if !features.is_finite() {
        return Err(Error::NonFiniteInput("probe features".into()));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; k];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(invalid("linear probe needs at least two classes"));
    }
    let prob = Problem {
        x: features.data(),
        y: labels,
        n,
        d,
        k,
        l2: T::of(spec.l2),
    };
    let dim = d * k + k;
    let mut theta = vec![T::zero(); dim];
    let mut grad = vec![T::zero(); dim];
    let mut f = prob.eval(&theta, Some(&mut grad));
    let mut trace = vec![f.to_f64_lossy()];
    let tol = T::of(spec.tolerance);
    let c1 = T::of(1e-4);
    let mut step = T::one();
    let mut prev: Option<(Vec<T>, Vec<T>)> = None;
    let mut trial = vec![T::zero(); dim];
    let mut trial_grad = vec![T::zero(); dim];
    let mut iterations = 0;
    let mut gnorm = norm(&grad);

    while gnorm > tol && iterations < spec.max_iterations {
        iterations += 1;
        if let Some((pt, pg)) = &prev {
            let mut sy = T::zero();
            let mut ss = T::zero();
            for i in 0..dim {
                let s = theta[i] - pt[i];
                let y = grad[i] - pg[i];
                sy += s * y;
                ss += s * s;
            }
            if sy > T::zero() {
                step = (ss / sy).min(T::of(1e8)).max(T::of(1e-10));
            } else {
                step = step * T::of(2.0);
            }
        }
        let g2 = gnorm * gnorm;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..dim {
                trial[i] = theta[i] - step * grad[i];
            }
            let ft = prob.eval(&trial, Some(&mut trial_grad));
            if ft.is_finite() && ft <= f - c1 * step * g2 && ft < f {
                accepted = Some(ft);
                break;
            }
            step = step * T::of(0.5);
        }
        let Some(ft) = accepted else {
            // No representable decrease along the gradient: at the precision floor.
            break;
        };
        prev = Some((theta.clone(), grad.clone()));
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = ft;
        gnorm = norm(&grad);
        trace.push(f.to_f64_lossy());
    }

    let (wt, b) = theta.split_at(d * k);
    let mut result = ProbeResult {
        weights: Tensor::raw(vec![k, d], wt.to_vec()).transpose(),
        bias: b.to_vec(),
        train_loss: f.to_f64_lossy(),
        grad_norm: gnorm.to_f64_lossy(),
        converged: gnorm <= tol,
        iterations,
        train_accuracy: 0.0,
        objective_trace: trace,
        accuracy: None,
    };
    result.train_accuracy = result.accuracy_on(features, labels)?;
    Ok(result)
}

/// Fits on `train` features and scores on `eval` features.
pub fn fit_and_evaluate<T: Scalar>(
    train: &Tensor<T>,
    train_labels: &[usize],
    eval: &Tensor<T>,
    eval_labels: &[usize],
    spec: &ProbeSpec,
) -> Result<ProbeResult<T>> {
    let mut r = fit_linear_probe(train, train_labels, spec)?;
    r.accuracy = Some(r.accuracy_on(eval, eval_labels)?);
    Ok(r)
}

/// Task-head accuracy on the task's test split; ties go to the lowest class index.
pub fn observed_accuracy<T: Scalar>(net: &Network<T>, task: &Task) -> Result<f64> {
    let logits = net.head_logits(task.head, &task.test.x.cast())?;
    Ok(accuracy(&argmax_rows(&logits), &task.test.labels))
}

fn probe_inputs<T: Scalar>(split: &Split, spec: &ProbeSpec, augment: Option<&crate::data::AugmentationSpec>) -> Result<(Tensor<T>, Vec<usize>)> {
    match (spec.augment, augment) {
        (true, Some(aug)) => {
            let mut rng = crate::diff::RngStream::new(spec.seed).fork("probe-augment");
            let extra = aug.apply(&split.x, &mut rng)?;
            let x = Tensor::concat_rows(&[&split.x, &extra])?;
            let labels = split.labels.iter().chain(&split.labels).copied().collect();
            Ok((x.cast(), labels))
        }
        _ => Ok((split.x.cast(), split.labels.clone())),
    }
}

/// Probe test accuracy of `net` on `task` at `spec.tap`.
pub fn probe_task<T: Scalar>(
    net: &Network<T>,
    task: &Task,
    spec: &ProbeSpec,
    augment: Option<&crate::data::AugmentationSpec>,
) -> Result<ProbeResult<T>> {
    let (x, labels) = probe_inputs::<T>(&task.train, spec, augment)?;
    let train = net.features(&x, spec.tap)?;
    let test = net.features(&task.test.x.cast(), spec.tap)?;
    fit_and_evaluate(&train, &labels, &test, &task.test.labels, spec)
}

/// Probe accuracy under `a` minus probe accuracy under `b`, each probe fitted fresh on the
/// task's training data. Positive values mean forgetting.
pub fn representation_forgetting<T: Scalar>(
    a: &Snapshot<T>,
    b: &Snapshot<T>,
    task: &Task,
    spec: &ProbeSpec,
) -> Result<f64> {
    let da = a.network().spec().tap_dim(spec.tap)?;
    let db = b.network().spec().tap_dim(spec.tap)?;
    if da != db {
        return Err(shape_err(format!("tap dimensions differ: {da} vs {db}")));
    }
    let pa = probe_task(a.network(), task, spec, None)?;
    let pb = probe_task(b.network(), task, spec, None)?;
    Ok(pa.accuracy.unwrap_or(0.0) - pb.accuracy.unwrap_or(0.0))
}

/// One probe per tap, each scored on the task's test split.
pub fn blockwise_probe<T: Scalar>(
    snapshot: &Snapshot<T>,
    task: &Task,
    taps: &[Tap],
    spec: &ProbeSpec,
) -> Result<Vec<ProbeResult<T>>> {
    taps.iter()
        .map(|&tap| {
            let s = ProbeSpec { tap, ..*spec };
            probe_task(snapshot.network(), task, &s, None)
        })
        .collect()
}

/// Probe over the union label space of all tasks, scored on the union test set.
pub fn all_lp<T: Scalar>(snapshot: &Snapshot<T>, dataset: &crate::data::Dataset, spec: &ProbeSpec) -> Result<f64> {
    let net = snapshot.network();
    let train = net.features(&dataset.train.x.cast(), spec.tap)?;
    let test = net.features(&dataset.test.x.cast(), spec.tap)?;
    let r = fit_and_evaluate(&train, &dataset.train.labels, &test, &dataset.test.labels, spec)?;
    Ok(r.accuracy.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::RngStream;

    fn blobs(n_per: usize, sep: f64, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut r = RngStream::new(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            for _ in 0..n_per {
                data.push(if c == 0 { -sep } else { sep } + 0.3 * r.normal());
                data.push(0.5 * r.normal());
                y.push(c);
            }
        }
        (Tensor::new(vec![2 * n_per, 2], data).unwrap(), y)
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let (x, y) = blobs(30, 2.0, 1);
        let r = fit_linear_probe(&x, &y, &ProbeSpec::default()).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn objective_is_monotone_and_converged_means_small_gradient() {
        let (x, y) = blobs(20, 0.5, 2);
        let spec = ProbeSpec { l2: 0.05, ..Default::default() };
        let r = fit_linear_probe(&x, &y, &spec).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(r.converged);
        assert!(r.grad_norm <= spec.tolerance);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(fit_linear_probe(&x, &[0, 0, 0], &ProbeSpec::default()).is_err());
        assert!(fit_linear_probe(&x, &[0, 1], &ProbeSpec::default()).is_err());
        let bad = ProbeSpec { tolerance: 0.0, ..Default::default() };
        assert!(fit_linear_probe(&x, &[0, 1, 0], &bad).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let z = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1]);
    }
}
