use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fast_remember, linear_cka, BlockwiseRecord, MetricsLedger};
use crate::data::{iid_split, AugmentationSpec, Dataset, Split, TaskSequence};
use crate::diff::{RngStream, Tensor};
use crate::error::{invalid, Result};
use crate::models::{ModelSpec, Network, Snapshot, Tap};
use crate::probe::{all_lp, observed_accuracy, probe_task, ProbeSpec};
use crate::scalar::Scalar;

use super::method::{MethodConfig, RunMode};
use super::trainer::{TaskStats, TrainerState};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub method: MethodConfig,
    pub mode: RunMode,
}

/// Per-block probes for one tracked task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockwiseSpec {
    pub task: usize,
    pub taps: Vec<Tap>,
}

/// Evaluations performed after every task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalConfig {
    pub probe: ProbeSpec,
    /// Transform for augmented probes; a shape default when absent.
    pub probe_augment: Option<AugmentationSpec>,
    /// Exemplars per class for fast remembering; off when absent.
    pub nme_m: Option<usize>,
    pub cka: bool,
    pub blockwise: Option<BlockwiseSpec>,
    pub all_lp: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T: Scalar> {
    pub ledger: MetricsLedger,
    /// Network after each task, in order.
    pub snapshots: Vec<Snapshot<T>>,
    pub stats: Vec<TaskStats>,
}

impl<T: Scalar> RunOutput<T> {
    pub fn new(cfg: &RunConfig, n_tasks: usize) -> Self {
        let mut ledger = MetricsLedger::new(cfg.method.method.name(), n_tasks, cfg.seed);
        ledger.partial = true;
        Self {
            ledger,
            snapshots: Vec::new(),
            stats: Vec::new(),
        }
    }
}

/// Partitions iid training data into `n_subsets` class-balanced tasks sharing one head.
pub fn iid_split_baseline(ds: &Dataset, n_subsets: usize, seed: u64) -> Result<TaskSequence> {
    iid_split(ds, n_subsets, seed)
}

fn concat_splits(parts: &[Split], relabel: impl Fn(usize, usize) -> usize) -> Result<Split> {
    let xs: Vec<&Tensor<f64>> = parts.iter().map(|s| &s.x).collect();
    Ok(Split {
        x: Tensor::concat_rows(&xs)?,
        labels: parts
            .iter()
            .enumerate()
            .flat_map(|(t, s)| s.labels.iter().map(move |&l| (t, l)))
            .map(|(t, l)| relabel(t, l))
            .collect(),
        ids: parts.iter().flat_map(|s| s.ids.iter().copied()).collect(),
    })
}

/// The union of all tasks with global class ids, for the all-tasks probe.
pub fn union_dataset(seq: &TaskSequence) -> Result<Dataset> {
    let first = seq.tasks.first().ok_or_else(|| invalid("empty sequence"))?;
    let trains: Vec<Split> = seq.tasks.iter().map(|t| t.train.clone()).collect();
    if seq.shared_head {
        let n = first.n_classes();
        return Ok(Dataset {
            input_shape: seq.input_shape.clone(),
            n_classes: n,
            train: concat_splits(&trains, |_, l| l)?,
            test: first.test.clone(),
            label_map: (0..n as i64).collect(),
        });
    }
    let mut classes: Vec<usize> = seq.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
    classes.sort_unstable();
    let index = |c: usize| classes.binary_search(&c).expect("class present");
    let relabel = |t: usize, l: usize| index(seq.tasks[t].classes[l]);
    let tests: Vec<Split> = seq.tasks.iter().map(|t| t.test.clone()).collect();
    Ok(Dataset {
        input_shape: seq.input_shape.clone(),
        n_classes: classes.len(),
        train: concat_splits(&trains, relabel)?,
        test: concat_splits(&tests, relabel)?,
        label_map: classes.iter().map(|&c| c as i64).collect(),
    })
}

/// Trains through the sequence and evaluates after every task.
pub fn run_sequence<T: Scalar>(seq: &TaskSequence, cfg: &RunConfig, eval: &EvalConfig) -> Result<RunOutput<T>> {
    let mut out = RunOutput::new(cfg, seq.len());
    run_sequence_into(seq, cfg, eval, &mut out)?;
    Ok(out)
}

/// As [`run_sequence`], filling `out` as it goes. On error `out` keeps every completed
/// checkpoint, `partial` stays set and `error` records the failure.
pub fn run_sequence_into<T: Scalar>(
    seq: &TaskSequence,
    cfg: &RunConfig,
    eval: &EvalConfig,
    out: &mut RunOutput<T>,
) -> Result<()> {
    let r = drive(seq, cfg, eval, out);
    match &r {
        Ok(()) => out.ledger.partial = false,
        Err(e) => {
            out.ledger.partial = true;
            out.ledger.error = Some(e.to_string());
        }
    }
    r
}

fn validate(seq: &TaskSequence, cfg: &RunConfig, eval: &EvalConfig) -> Result<()> {
    if seq.is_empty() {
        return Err(invalid("empty task sequence"));
    }
    cfg.model.validate()?;
    if cfg.model.input_shape != seq.input_shape {
        return Err(invalid(format!(
            "model input {:?} vs data {:?}",
            cfg.model.input_shape, seq.input_shape
        )));
    }
    cfg.method.validate()?;
    eval.probe.validate()?;
    cfg.model.tap_dim(eval.probe.tap)?;
    if eval.nme_m == Some(0) {
        return Err(invalid("nme M must be ≥ 1"));
    }
    if let Some(b) = &eval.blockwise {
        if b.task >= seq.len() || b.taps.is_empty() {
            return Err(invalid(format!("blockwise task {} / taps {:?}", b.task, b.taps)));
        }
        for &t in &b.taps {
            cfg.model.tap_dim(t)?;
        }
    }
    Ok(())
}

fn drive<T: Scalar>(seq: &TaskSequence, cfg: &RunConfig, eval: &EvalConfig, out: &mut RunOutput<T>) -> Result<()> {
    validate(seq, cfg, eval)?;
    let rng = RngStream::new(cfg.seed);
    let net = Network::build(&cfg.model, &mut rng.fork("init"))?;
    let mut state = TrainerState::new(net, cfg.method.clone(), cfg.mode, rng.fork("train"))?;
    let uses_heads = cfg.method.method.uses_heads();
    let probe_aug = if eval.probe.augment {
        Some(eval.probe_augment.unwrap_or_else(|| AugmentationSpec::default_for(&seq.input_shape)))
    } else {
        None
    };
    let tasks = &seq.tasks;
    if eval.nme_m.is_some() {
        out.ledger.nme = Some(Vec::new());
    }
    if eval.cka {
        out.ledger.cka = Some(Vec::new());
    }
    if let Some(b) = &eval.blockwise {
        out.ledger.blockwise = Some(BlockwiseRecord {
            task: b.task,
            taps: b.taps.iter().map(Tap::to_string).collect(),
            accuracy: Vec::new(),
        });
    }
    for (i, task) in tasks.iter().enumerate() {
        out.stats.push(state.train_task(task)?);
        let snap = state.network.snapshot(state.step);
        let net = snap.network();

        let observed = (0..=i)
            .map(|j| if uses_heads { observed_accuracy(net, &tasks[j]).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        let probe = (0..=i)
            .into_par_iter()
            .map(|j| probe_task(net, &tasks[j], &eval.probe, probe_aug.as_ref()).map(|r| r.accuracy))
            .collect::<Result<Vec<_>>>()?;

        if let Some(m) = eval.nme_m {
            let fr = fast_remember(&snap, &tasks[..=i], m, &rng.fork_idx("nme", i as u64))?;
            if let Some(nme) = out.ledger.nme.as_mut() {
                nme.push(fr.accuracies.into_iter().map(Some).collect());
            }
        }
        if eval.cka {
            let tap = eval.probe.tap;
            let earlier = &out.snapshots;
            let row = (0..=i)
                .into_par_iter()
                .map(|j| {
                    let x = tasks[j].test.x.cast::<T>();
                    let then = if j == i { net } else { earlier[j].network() };
                    let a = then.features(&x, tap)?;
                    let b = net.features(&x, tap)?;
                    linear_cka(&a, &b, true).map(|v| Some(v.to_f64_lossy()))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(cka) = out.ledger.cka.as_mut() {
                cka.push(row);
            }
        }
        if let Some(b) = &eval.blockwise {
            if i >= b.task {
                let accs = b
                    .taps
                    .par_iter()
                    .map(|&tap| {
                        let s = ProbeSpec { tap, ..eval.probe };
                        probe_task(net, &tasks[b.task], &s, probe_aug.as_ref()).map(|r| r.accuracy.unwrap_or(0.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if let Some(rec) = out.ledger.blockwise.as_mut() {
                    rec.accuracy.push(accs);
                }
            }
        }
        if eval.all_lp && i + 1 == tasks.len() {
            out.ledger.all_lp = Some(all_lp(&snap, &union_dataset(seq)?, &eval.probe)?);
        }
        out.ledger.observed.push(observed);
        out.ledger.probe.push(probe);
        out.snapshots.push(snap);
    }
    Ok(())
}
