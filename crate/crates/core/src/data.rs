//! Synthetic datasets, task splits, augmentation views and CSV ingestion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::{RngStream, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianClusters,
    ConcentricSpirals,
    GridImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// Vector length for vector kinds; ignored for grid images.
    #[serde(default = "default_dim")]
    pub input_dim: usize,
    /// Side length for grid images.
    #[serde(default = "default_side")]
    pub image_side: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_dim() -> usize {
    64
}

fn default_side() -> usize {
    8
}

impl DatasetSpec {
    /// 20 gaussian clusters in 16 dimensions, 200 samples each, split 10 × 2 by the runner.
    pub fn synth_split_10(seed: u64) -> Self {
        Self {
            kind: DatasetKind::GaussianClusters,
            n_classes: 20,
            samples_per_class: 200,
            input_dim: 16,
            image_side: 8,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(invalid("n_classes must be ≥ 2"));
        }
        if self.samples_per_class < 2 {
            return Err(invalid("samples_per_class must be ≥ 2"));
        }
        if !(self.class_separation > 0.0) {
            return Err(invalid("class_separation must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be ≥ 0"));
        }
        match self.kind {
            DatasetKind::GridImages if self.image_side < 2 => Err(invalid("image_side must be ≥ 2")),
            DatasetKind::ConcentricSpirals if self.input_dim < 2 => {
                Err(invalid("spirals need input_dim ≥ 2"))
            }
            _ if self.input_dim == 0 => Err(invalid("input_dim must be ≥ 1")),
            _ => Ok(()),
        }
    }
}

/// Rows of inputs with labels and stable sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Tensor<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    fn from_parts(shape: &[usize], rows: Vec<Vec<f64>>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        let mut full = vec![rows.len()];
        full.extend_from_slice(shape);
        Ok(Split {
            x: Tensor::new(full, rows.concat())?,
            labels,
            ids,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Per-sample shape: `[d]` or `[1, side, side]`.
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    pub train: Split,
    pub test: Split,
    /// Original label of each contiguous class id.
    pub label_map: Vec<i64>,
}

impl Dataset {
    fn from_class_rows(input_shape: Vec<usize>, per_class: Vec<Vec<Vec<f64>>>, label_map: Vec<i64>) -> Result<Self> {
        let mut train = (Vec::new(), Vec::new(), Vec::new());
        let mut test = (Vec::new(), Vec::new(), Vec::new());
        let mut next_id = 0;
        for (c, rows) in per_class.into_iter().enumerate() {
            let n = rows.len();
            let n_train = if n >= 2 { (n * 4 / 5).max(1) } else { n };
            for (i, r) in rows.into_iter().enumerate() {
                let dst = if i < n_train { &mut train } else { &mut test };
                dst.0.push(r);
                dst.1.push(c);
                dst.2.push(next_id);
                next_id += 1;
            }
        }
        let n_classes = label_map.len();
        Ok(Dataset {
            train: Split::from_parts(&input_shape, train.0, train.1, train.2)?,
            test: Split::from_parts(&input_shape, test.0, test.1, test.2)?,
            input_shape,
            n_classes,
            label_map,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Writes `label,f0,f1,…`; per class, train rows precede test rows so that reloading
    /// reproduces the same split.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.feature_dim();
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..d).map(|i| format!("f{i}")))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for c in 0..self.n_classes {
            for split in [&self.train, &self.test] {
                for (i, &l) in split.labels.iter().enumerate() {
                    if l != c {
                        continue;
                    }
                    let row: Vec<String> = split.x.row(i).iter().map(|v| format!("{v:?}")).collect();
                    writeln!(w, "{},{}", self.label_map[c], row.join(","))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn random_orthogonal(d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    // Gram-Schmidt on a gaussian matrix.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn rotate(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for (k, row) in basis.iter().enumerate() {
        for i in 0..d {
            out[i] += v[k] * row[i];
        }
    }
    out
}

fn gaussian_clusters(spec: &DatasetSpec, rng: &mut RngStream) -> Vec<Vec<Vec<f64>>> {
    let (k, d) = (spec.n_classes, spec.input_dim);
    let scale = spec.class_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = if d >= k {
        // Regular simplex with pairwise distance = separation, rotated into general position.
        let q = random_orthogonal(d, &mut rng.fork("layout"));
        (0..k)
            .map(|c| {
                let mut v = vec![0.0; d];
                for (i, x) in v.iter_mut().take(k).enumerate() {
                    *x = scale * (f64::from(u8::from(i == c)) - 1.0 / k as f64);
                }
                rotate(&q, &v)
            })
            .collect()
    } else {
        let mut r = rng.fork("layout");
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| r.normal()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * scale / n).collect()
            })
            .collect()
    };
    // Anisotropic per-class covariance: axis scales in [0.5, 1.5] (mean 1), randomly rotated.
    let axis: Vec<f64> = (0..d)
        .map(|i| if d == 1 { 1.0 } else { 0.5 + i as f64 / (d - 1) as f64 })
        .collect();
    (0..k)
        .map(|c| {
            let mut r = rng.fork_idx("class", c as u64);
            let rot = random_orthogonal(d, &mut r);
            (0..spec.samples_per_class)
                .map(|_| {
                    let eps: Vec<f64> = axis.iter().map(|a| a * spec.noise_sigma * r.normal()).collect();
                    rotate(&rot, &eps)
                        .into_iter()
                        .zip(&means[c])
                        .map(|(e, m)| e + m)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn spirals(spec: &DatasetSpec, rng: &mut RngStream) -> Vec<Vec<Vec<f64>>> {
    let k = spec.n_classes;
    (0..k)
        .map(|c| {
            let mut r = rng.fork_idx("class", c as u64);
            (0..spec.samples_per_class)
                .map(|_| {
                    let t = r.uniform();
                    let radius = spec.class_separation * (0.2 + t);
                    let angle = 2.0 * std::f64::consts::PI * (c as f64 / k as f64 + 0.75 * t);
                    let mut v = vec![0.0; spec.input_dim];
                    v[0] = radius * angle.cos() + spec.noise_sigma * r.normal();
                    v[1] = radius * angle.sin() + spec.noise_sigma * r.normal();
                    for x in v.iter_mut().skip(2) {
                        *x = spec.noise_sigma * r.normal();
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn grid_images(spec: &DatasetSpec, rng: &mut RngStream) -> Vec<Vec<Vec<f64>>> {
    let s = spec.image_side;
    (0..spec.n_classes)
        .map(|c| {
            let mut r = rng.fork_idx("class", c as u64);
            let proto: Vec<f64> = (0..s * s)
                .map(|_| if r.bernoulli(0.3) { spec.class_separation } else { 0.0 })
                .collect();
            (0..spec.samples_per_class)
                .map(|_| {
                    // Random cyclic shift by at most one pixel in each direction.
                    let dy = r.below(3) as isize - 1;
                    let dx = r.below(3) as isize - 1;
                    let mut img = vec![0.0; s * s];
                    for i in 0..s {
                        for j in 0..s {
                            let si = (i as isize - dy).rem_euclid(s as isize) as usize;
                            let sj = (j as isize - dx).rem_euclid(s as isize) as usize;
                            img[i * s + j] = proto[si * s + sj] + spec.noise_sigma * r.normal();
                        }
                    }
                    img
                })
                .collect()
        })
        .collect()
}

/// Deterministic synthetic dataset with an 80/20 per-class train/test split.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let (shape, rows) = match spec.kind {
        DatasetKind::GaussianClusters => (vec![spec.input_dim], gaussian_clusters(spec, &mut rng)),
        DatasetKind::ConcentricSpirals => (vec![spec.input_dim], spirals(spec, &mut rng)),
        DatasetKind::GridImages => (vec![1, spec.image_side, spec.image_side], grid_images(spec, &mut rng)),
    };
    Dataset::from_class_rows(shape, rows, (0..spec.n_classes as i64).collect())
}

/// One task: a class subset with train/test rows. Labels in the splits are task-local
/// (position in `classes`).
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    /// Head the task trains and is evaluated through.
    pub head: usize,
    pub classes: Vec<usize>,
    pub train: Split,
    pub test: Split,
}

impl Task {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub input_shape: Vec<usize>,
    /// True for iid-split sequences where every task shares the full label space and one head.
    pub shared_head: bool,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn task_from_classes(ds: &Dataset, id: usize, head: usize, classes: Vec<usize>) -> Task {
    let local: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let pick = |s: &Split| {
        let idx: Vec<usize> = (0..s.len()).filter(|&i| local.contains_key(&s.labels[i])).collect();
        let mut out = s.select(&idx);
        for l in &mut out.labels {
            *l = local[l];
        }
        out
    };
    Task {
        id,
        head,
        train: pick(&ds.train),
        test: pick(&ds.test),
        classes,
    }
}

/// Assigns classes to tasks by a seeded permutation.
pub fn split_tasks(ds: &Dataset, n_tasks: usize, classes_per_task: usize, order_seed: u64) -> Result<TaskSequence> {
    if n_tasks == 0 || classes_per_task == 0 || n_tasks * classes_per_task != ds.n_classes {
        return Err(invalid(format!(
            "{n_tasks} tasks × {classes_per_task} classes ≠ {} classes",
            ds.n_classes
        )));
    }
    let perm = RngStream::new(order_seed).permutation(ds.n_classes);
    let tasks = perm
        .chunks(classes_per_task)
        .enumerate()
        .map(|(t, cls)| task_from_classes(ds, t, t, cls.to_vec()))
        .collect();
    Ok(TaskSequence {
        tasks,
        input_shape: ds.input_shape.clone(),
        shared_head: false,
    })
}

/// Partitions iid training data into class-balanced subsets trained in sequence through one
/// shared head; every subset is evaluated on the full test set.
pub fn iid_split(ds: &Dataset, n_subsets: usize, seed: u64) -> Result<TaskSequence> {
    if n_subsets == 0 {
        return Err(invalid("n_subsets must be ≥ 1"));
    }
    let mut rng = RngStream::new(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_subsets];
    for c in 0..ds.n_classes {
        let mut idx: Vec<usize> = (0..ds.train.len()).filter(|&i| ds.train.labels[i] == c).collect();
        if idx.len() < n_subsets {
            return Err(invalid(format!(
                "class {c} has {} training samples for {n_subsets} subsets",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        for (k, i) in idx.into_iter().enumerate() {
            parts[k % n_subsets].push(i);
        }
    }
    let classes: Vec<usize> = (0..ds.n_classes).collect();
    let tasks = parts
        .into_iter()
        .enumerate()
        .map(|(t, mut idx)| {
            idx.sort_unstable();
            Task {
                id: t,
                head: 0,
                classes: classes.clone(),
                train: ds.train.select(&idx),
                test: ds.test.clone(),
            }
        })
        .collect();
    Ok(TaskSequence {
        tasks,
        input_shape: ds.input_shape.clone(),
        shared_head: true,
    })
}

/// Stochastic view transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentationSpec {
    Vector {
        noise_sigma: f64,
        dropout: f64,
    },
    Image {
        crop_padding: usize,
        flip_probability: f64,
        brightness: f64,
    },
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::Vector {
            noise_sigma: 0.3,
            dropout: 0.1,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Vector { noise_sigma, dropout } => noise_sigma >= 0.0 && (0.0..=1.0).contains(&dropout),
            Self::Image {
                flip_probability,
                brightness,
                ..
            } => (0.0..=1.0).contains(&flip_probability) && brightness >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("augmentation {self:?}")))
        }
    }

    /// Augmentation suited to a per-sample shape.
    pub fn default_for(input_shape: &[usize]) -> Self {
        if input_shape.len() == 3 {
            Self::Image {
                crop_padding: 1,
                flip_probability: 0.5,
                brightness: 0.5,
            }
        } else {
            Self::default()
        }
    }

    fn apply_one(&self, shape: &[usize], x: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        match *self {
            Self::Vector { noise_sigma, dropout } => {
                if shape.len() != 1 {
                    return Err(invalid("vector augmentation on image data"));
                }
                Ok(x.iter()
                    .map(|&v| {
                        let noisy = if noise_sigma > 0.0 { v + noise_sigma * rng.normal() } else { v };
                        if dropout > 0.0 && rng.bernoulli(dropout) {
                            0.0
                        } else {
                            noisy
                        }
                    })
                    .collect())
            }
            Self::Image {
                crop_padding,
                flip_probability,
                brightness,
            } => {
                if shape.len() != 3 {
                    return Err(invalid("image augmentation on vector data"));
                }
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let p = crop_padding as isize;
                let oy = rng.below(2 * crop_padding + 1) as isize - p;
                let ox = rng.below(2 * crop_padding + 1) as isize - p;
                let flip = flip_probability > 0.0 && rng.bernoulli(flip_probability);
                let gain = if brightness > 0.0 {
                    1.0 + rng.uniform_range(-brightness, brightness)
                } else {
                    1.0
                };
                let mut out = vec![0.0; x.len()];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let sj = if flip { w - 1 - j } else { j };
                            let (yi, xj) = (i as isize + oy, sj as isize + ox);
                            if yi >= 0 && (yi as usize) < h && xj >= 0 && (xj as usize) < w {
                                out[(ch * h + i) * w + j] =
                                    gain * x[(ch * h + yi as usize) * w + xj as usize];
                            }
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Independently augments every row of a batch.
    pub fn apply(&self, x: &Tensor<f64>, rng: &mut RngStream) -> Result<Tensor<f64>> {
        let shape = &x.shape()[1..];
        let n = x.shape()[0];
        let mut data = Vec::with_capacity(x.len());
        for i in 0..n {
            data.extend(self.apply_one(shape, x.row(i), rng)?);
        }
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Two independent views of one sample (`[input_shape...]`, no batch dimension).
pub fn two_views(sample: &Tensor<f64>, aug: &AugmentationSpec, rng: &mut RngStream) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let shape = sample.shape().to_vec();
    let a = aug.apply_one(&shape, sample.data(), rng)?;
    let b = aug.apply_one(&shape, sample.data(), rng)?;
    Ok((Tensor::new(shape.clone(), a)?, Tensor::new(shape, b)?))
}

/// Interleaved two-view batch: rows `2k` and `2k + 1` are views of row `k`.
pub fn two_view_batch(x: &Tensor<f64>, aug: &AugmentationSpec, rng: &mut RngStream) -> Result<Tensor<f64>> {
    let shape = &x.shape()[1..];
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(2 * x.len());
    for i in 0..n {
        data.extend(aug.apply_one(shape, x.row(i), rng)?);
        data.extend(aug.apply_one(shape, x.row(i), rng)?);
    }
    let mut full = x.shape().to_vec();
    full[0] = 2 * n;
    Tensor::new(full, data)
}

/// Parses a `label,f0,f1,…` CSV. Labels are relabeled to `0..K` in ascending order of the
/// original values; `label_map` records the original label of each class.
pub fn load_table(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_table(file)
}

pub fn read_table(reader: impl std::io::Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `label,f0,f1,…`".into(),
        });
    }
    let d = header.len() - 1;
    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 1, rec.len()),
            });
        }
        let label: i64 = rec[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label {:?}", &rec[0]),
        })?;
        let mut feats = Vec::with_capacity(d);
        for f in rec.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value {f:?}"),
                });
            }
            feats.push(v);
        }
        rows.push((label, feats));
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let mut originals: Vec<i64> = rows.iter().map(|r| r.0).collect();
    originals.sort_unstable();
    originals.dedup();
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); originals.len()];
    for (label, feats) in rows {
        let c = originals.binary_search(&label).expect("label collected");
        per_class[c].push(feats);
    }
    Dataset::from_class_rows(vec![d], per_class, originals)
}
