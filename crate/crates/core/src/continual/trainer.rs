use std::collections::{BTreeMap, BTreeSet};

use crate::data::{two_view_batch, AugmentationSpec, Task};
use crate::diff::{Graph, NodeId, Optimizer, ParamId, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, distillation, estimate_fisher, ewc_penalty, simclr, supcon, FisherAnchor, Reduction};
use crate::models::Network;
use crate::scalar::Scalar;

use super::buffer::{BufferItem, ReplayBuffer};
use super::method::{Method, MethodConfig, RunMode};

/// What one call to [`TrainerState::train_task`] did.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    pub task: usize,
    pub steps: usize,
    /// Times each training row of the task entered a minibatch.
    pub visits: Vec<u32>,
}

pub struct TrainerState<T: Scalar> {
    pub network: Network<T>,
    optimizer: Optimizer<T>,
    config: MethodConfig,
    mode: RunMode,
    pub completed: Vec<usize>,
    seen_classes: BTreeSet<usize>,
    seen_heads: BTreeSet<usize>,
    pub anchors: Vec<FisherAnchor<T>>,
    /// Copy of the network taken when the current task started (lwf only).
    teacher: Option<Network<T>>,
    pub buffer: ReplayBuffer,
    pub step: usize,
    rng: RngStream,
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(network: Network<T>, config: MethodConfig, mode: RunMode, rng: RngStream) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(mode.optimizer(config.optimizer)?)?;
        let m = match config.method {
            Method::Er { m, .. } => m,
            _ => 0,
        };
        Ok(Self {
            network,
            optimizer,
            config,
            mode,
            completed: Vec::new(),
            seen_classes: BTreeSet::new(),
            seen_heads: BTreeSet::new(),
            anchors: Vec::new(),
            teacher: None,
            buffer: ReplayBuffer::new(m, rng.fork("buffer")),
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &MethodConfig {
        &self.config
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    fn begin_task(&mut self, task: &Task) -> Result<()> {
        let fail = |msg: String| Error::Task { task: task.id, msg };
        if task.train.is_empty() {
            return Err(fail("empty training split".into()));
        }
        if self.completed.contains(&task.id) {
            return Err(fail("task already trained".into()));
        }
        let method = self.config.method;
        if self.seen_heads.contains(&task.head) {
            if method.uses_heads() && self.network.heads()[&task.head].classes != task.n_classes() {
                return Err(fail("shared head has a different class count".into()));
            }
        } else {
            if let Some(c) = task.classes.iter().find(|c| self.seen_classes.contains(c)) {
                return Err(fail(format!("class {c} already appeared in an earlier task")));
            }
            if method.uses_heads() {
                let mut r = self.rng.fork_idx("head", task.head as u64);
                self.network.add_head(task.head, task.n_classes(), &mut r)?;
            }
        }
        self.optimizer.reset();
        self.teacher = match method {
            Method::Lwf { alpha, .. } if alpha > 0.0 && !self.completed.is_empty() => Some(self.network.clone()),
            _ => None,
        };
        Ok(())
    }

    fn trainable(&self, task: &Task) -> BTreeSet<ParamId> {
        let mut ids: BTreeSet<ParamId> = self.network.backbone_ids().into_iter().collect();
        if self.config.method.is_contrastive() {
            ids.extend(self.network.projection_ids());
        } else if let Some(h) = self.network.head_ids(task.head) {
            ids.extend(h);
        }
        ids
    }

    fn contrastive_loss(&self, g: &mut Graph<T>, xb: &Tensor<f64>, labels: &[usize], rng: &mut RngStream) -> Result<NodeId> {
        let aug = self
            .config
            .augment
            .unwrap_or_else(|| AugmentationSpec::default_for(&self.network.spec().input_shape));
        let views = two_view_batch(xb, &aug, rng)?;
        let x = g.input(views.cast());
        let tr = self.network.backbone(g, x)?;
        let z = if self.network.spec().projection_dim.is_some() {
            self.network.project(g, tr.representation)?
        } else {
            tr.representation
        };
        match self.config.method {
            Method::FtSupcon { temperature } => {
                let doubled: Vec<usize> = labels.iter().flat_map(|&y| [y, y]).collect();
                supcon(g, z, &doubled, T::of(temperature), Reduction::Mean)
            }
            Method::FtSimclr { temperature } => simclr(g, z, T::of(temperature), Reduction::Mean),
            _ => unreachable!("not a contrastive method"),
        }
    }

    fn supervised_loss(&self, g: &mut Graph<T>, task: &Task, xb: &Tensor<f64>, labels: &[usize], rng: &mut RngStream) -> Result<NodeId> {
        let net = &self.network;
        let xt: Tensor<T> = xb.cast();
        let x = g.input(xt.clone());
        let tr = net.backbone(g, x)?;
        let logits = net.head(g, task.head, tr.representation)?;
        let mut loss = cross_entropy(g, logits, labels)?;
        match self.config.method {
            Method::Ewc { lambda, .. } if lambda > 0.0 && !self.anchors.is_empty() => {
                let p = ewc_penalty(g, net.params(), &self.anchors, T::of(lambda))?;
                loss = g.add(loss, p)?;
            }
            Method::Lwf { alpha, t_kd } => {
                if let Some(teacher) = &self.teacher {
                    for &h in teacher.heads().keys().filter(|&&h| h != task.head) {
                        let target = teacher.head_logits(h, &xt)?;
                        let student = net.head(g, h, tr.representation)?;
                        let d = distillation(g, student, &target, T::of(t_kd))?;
                        let d = g.scale(d, T::of(alpha))?;
                        loss = g.add(loss, d)?;
                    }
                }
            }
            Method::Er { replay_ratio, .. } if replay_ratio > 0.0 => {
                let b = labels.len();
                let n = ((b as f64) * replay_ratio / (1.0 - replay_ratio)).round() as usize;
                let done = &self.completed;
                let drawn = self.buffer.sample(n, rng, |it| done.contains(&it.task));
                if !drawn.is_empty() {
                    let mut groups: BTreeMap<usize, Vec<&BufferItem>> = BTreeMap::new();
                    for it in drawn {
                        groups.entry(it.head).or_default().push(it);
                    }
                    let mut total = g.scale(loss, T::of(b as f64))?;
                    let mut count = b;
                    for (head, items) in groups {
                        let mut shape = vec![items.len()];
                        shape.extend_from_slice(&net.spec().input_shape);
                        let data: Vec<T> = items.iter().flat_map(|it| it.x.iter().map(|&v| T::of(v))).collect();
                        let rx = g.input(Tensor::new(shape, data)?);
                        let rtr = net.backbone(g, rx)?;
                        let rl = net.head(g, head, rtr.representation)?;
                        let ry: Vec<usize> = items.iter().map(|it| it.label).collect();
                        let ce = cross_entropy(g, rl, &ry)?;
                        let w = g.scale(ce, T::of(items.len() as f64))?;
                        total = g.add(total, w)?;
                        count += items.len();
                    }
                    loss = g.scale(total, T::one() / T::of(count as f64))?;
                }
            }
            _ => {}
        }
        Ok(loss)
    }

    fn step(&mut self, task: &Task, rows: &[usize], trainable: &BTreeSet<ParamId>, aug_rng: &mut RngStream, replay_rng: &mut RngStream) -> Result<()> {
        let xb = task.train.x.select_rows(rows);
        let labels: Vec<usize> = rows.iter().map(|&r| task.train.labels[r]).collect();
        let mut g = Graph::new();
        let loss = if self.config.method.is_contrastive() {
            self.contrastive_loss(&mut g, &xb, &labels, aug_rng)?
        } else {
            self.supervised_loss(&mut g, task, &xb, &labels, replay_rng)?
        };
        let mut grads = g.backward(loss)?;
        grads.retain(|id, _| trainable.contains(id));
        self.optimizer.step(self.network.params_mut(), &grads)?;
        self.step += 1;
        if let Method::Er { .. } = self.config.method {
            for (k, &r) in rows.iter().enumerate() {
                let item = BufferItem {
                    x: xb.row(k).to_vec(),
                    label: labels[k],
                    task: task.id,
                    head: task.head,
                    id: task.train.ids[r],
                };
                self.buffer.insert(task.classes[labels[k]], item);
            }
        }
        Ok(())
    }

    /// Trains on one task under the configured method and mode.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskStats> {
        self.begin_task(task)?;
        let n = task.train.len();
        let trainable = self.trainable(task);
        let id = task.id as u64;
        let mut batch_rng = self.rng.fork_idx("batches", id);
        let mut aug_rng = self.rng.fork_idx("augment", id);
        let mut replay_rng = self.rng.fork_idx("replay", id);
        let mut visits = vec![0u32; n];
        let start = self.step;
        for _ in 0..self.mode.epochs(self.config.epochs) {
            let order = batch_rng.permutation(n);
            for rows in order.chunks(self.config.batch_size) {
                for &r in rows {
                    visits[r] += 1;
                }
                self.step(task, rows, &trainable, &mut aug_rng, &mut replay_rng)
                    .map_err(|e| Error::Task {
                        task: task.id,
                        msg: format!("step {}: {e}", self.step),
                    })?;
            }
        }
        if let Method::Ewc { fisher_samples, .. } = self.config.method {
            let mut r = self.rng.fork_idx("fisher", id);
            let anchor = estimate_fisher(&self.network, task.head, &task.train.x.cast(), fisher_samples, &mut r)?;
            self.anchors.push(FisherAnchor { task: task.id, ..anchor });
        }
        self.teacher = None;
        self.completed.push(task.id);
        self.seen_classes.extend(task.classes.iter().copied());
        self.seen_heads.insert(task.head);
        Ok(TaskStats {
            task: task.id,
            steps: self.step - start,
            visits,
        })
    }
}
