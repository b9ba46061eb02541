use std::collections::BTreeMap;

use crate::data::Task;
use crate::diff::{RngStream, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::models::{Snapshot, Tap};
use crate::probe::accuracy;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean<T: Scalar> {
    /// Mean of the l2-normalized exemplar features.
    pub mean: Vec<T>,
    pub count: usize,
    pub exemplar_ids: Vec<usize>,
    /// The normalized exemplars cancel out (zero mean).
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMeanStore<T: Scalar> {
    pub classes: BTreeMap<usize, ClassMean<T>>,
}

fn normalized<T: Scalar>(row: &[T]) -> Vec<T> {
    let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if n == T::zero() {
        row.to_vec()
    } else {
        row.iter().map(|&v| v / n).collect()
    }
}

/// Per-class means of l2-normalized feature rows.
pub fn build_class_means<T: Scalar>(features: &Tensor<T>, labels: &[usize], exemplar_ids: &[usize]) -> Result<ClassMeanStore<T>> {
    let (m, d) = features.rows_cols();
    if labels.len() != m || exemplar_ids.len() != m {
        return Err(shape_err(format!(
            "{m} feature rows, {} labels, {} ids",
            labels.len(),
            exemplar_ids.len()
        )));
    }
    if m == 0 {
        return Err(invalid("no exemplars"));
    }
    let mut acc: BTreeMap<usize, (Vec<T>, usize, Vec<usize>)> = BTreeMap::new();
    for i in 0..m {
        let e = acc.entry(labels[i]).or_insert_with(|| (vec![T::zero(); d], 0, Vec::new()));
        for (a, v) in e.0.iter_mut().zip(normalized(features.row(i))) {
            *a += v;
        }
        e.1 += 1;
        e.2.push(exemplar_ids[i]);
    }
    let classes = acc
        .into_iter()
        .map(|(c, (sum, count, ids))| {
            let inv = T::one() / T::of(count as f64);
            let mean: Vec<T> = sum.into_iter().map(|v| v * inv).collect();
            let degenerate = mean.iter().all(|&v| v.abs() < T::of(1e-12));
            (
                c,
                ClassMean {
                    mean,
                    count,
                    exemplar_ids: ids,
                    degenerate,
                },
            )
        })
        .collect();
    Ok(ClassMeanStore { classes })
}

/// Nearest class mean (Euclidean, on l2-normalized queries). Ties go to the lowest class id.
pub fn nme_classify<T: Scalar>(queries: &Tensor<T>, store: &ClassMeanStore<T>) -> Result<Vec<usize>> {
    let Some(first) = store.classes.values().next() else {
        return Err(invalid("empty class-mean store"));
    };
    let (m, d) = queries.rows_cols();
    if d != first.mean.len() {
        return Err(shape_err(format!("queries have {d} features, means {}", first.mean.len())));
    }
    Ok((0..m)
        .map(|i| {
            let q = normalized(queries.row(i));
            let mut best: Option<(usize, T)> = None;
            for (&c, cm) in &store.classes {
                let dist = q
                    .iter()
                    .zip(&cm.mean)
                    .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
                if best.is_none_or(|(_, b)| dist < b) {
                    best = Some((c, dist));
                }
            }
            best.expect("store nonempty").0
        })
        .collect())
}

/// Outcome of rebuilding class means from a few random exemplars.
#[derive(Clone, Debug, PartialEq)]
pub struct FastRemember {
    pub accuracies: Vec<f64>,
    /// `(task, local class, available)` for classes with fewer than `M` training samples.
    pub shortfalls: Vec<(usize, usize, usize)>,
}

impl FastRemember {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

/// For every task: sample `m` training exemplars per class, build means from the snapshot's
/// representation, and score NME on the task's test split. The snapshot is only read.
pub fn fast_remember<T: Scalar>(snapshot: &Snapshot<T>, tasks: &[Task], m: usize, rng: &RngStream) -> Result<FastRemember> {
    if m == 0 {
        return Err(invalid("M must be ≥ 1"));
    }
    let net = snapshot.network();
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut shortfalls = Vec::new();
    for task in tasks {
        let mut r = rng.fork_idx("fast-remember", task.id as u64);
        let mut picked = Vec::new();
        for c in 0..task.n_classes() {
            let idx: Vec<usize> = (0..task.train.len()).filter(|&i| task.train.labels[i] == c).collect();
            if idx.len() < m {
                shortfalls.push((task.id, c, idx.len()));
            }
            picked.extend(r.sample_without_replacement(idx.len(), m).into_iter().map(|k| idx[k]));
        }
        let ex = task.train.select(&picked);
        let feats = net.features(&ex.x.cast(), Tap::Final)?;
        let store = build_class_means(&feats, &ex.labels, &ex.ids)?;
        let q = net.features(&task.test.x.cast(), Tap::Final)?;
        accuracies.push(accuracy(&nme_classify(&q, &store)?, &task.test.labels));
    }
    Ok(FastRemember { accuracies, shortfalls })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_exemplar_mean_is_normalized_exemplar() {
        let s = build_class_means(&t(&[&[3.0, 4.0]]), &[2], &[17]).unwrap();
        let cm = &s.classes[&2];
        assert_eq!(cm.mean, vec![0.6, 0.8]);
        assert_eq!(cm.exemplar_ids, vec![17]);
    }

    #[test]
    fn antipodal_exemplars_are_degenerate() {
        let s = build_class_means(&t(&[&[1.0, 0.0], &[-2.0, 0.0]]), &[0, 0], &[0, 1]).unwrap();
        assert!(s.classes[&0].degenerate);
    }

    #[test]
    fn nearest_mean_and_tie_rule() {
        let s = build_class_means(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &[3, 1], &[0, 1]).unwrap();
        assert_eq!(nme_classify(&t(&[&[0.9, 0.0]]), &s).unwrap(), vec![3]);
        assert_eq!(nme_classify(&t(&[&[1.0, 1.0]]), &s).unwrap(), vec![1]);
        let empty = ClassMeanStore::<f64>::default();
        assert!(nme_classify(&t(&[&[1.0, 1.0]]), &empty).is_err());
    }
}
