use reprobe::continual::{
    run_sequence, run_sequence_into, BufferItem, EvalConfig, Method, MethodConfig, ReplayBuffer, RunConfig, RunMode,
    RunOutput, TrainerState,
};
use reprobe::data::{generate, split_tasks, DatasetKind, DatasetSpec, TaskSequence};
use reprobe::diff::RngStream;
use reprobe::models::{ModelSpec, Network};
use reprobe::probe::ProbeSpec;

fn sequence(n_tasks: usize) -> TaskSequence {
    let ds = generate(&DatasetSpec {
        kind: DatasetKind::GaussianClusters,
        n_classes: 2 * n_tasks,
        samples_per_class: 25,
        input_dim: 6,
        image_side: 8,
        class_separation: 3.0,
        noise_sigma: 1.0,
        seed: 10,
    })
    .unwrap();
    split_tasks(&ds, n_tasks, 2, 3).unwrap()
}

fn config(method: Method) -> RunConfig {
    RunConfig {
        seed: 42,
        model: ModelSpec::mlp(6, 2, 8),
        method: MethodConfig {
            epochs: 2,
            batch_size: 8,
            ..MethodConfig::new(method)
        },
        mode: RunMode::Offline,
    }
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        probe: ProbeSpec {
            max_iterations: 200,
            ..ProbeSpec::default()
        },
        ..EvalConfig::default()
    }
}

fn item(id: usize) -> BufferItem {
    BufferItem {
        x: vec![id as f64],
        label: 0,
        task: 0,
        head: 0,
        id,
    }
}

#[test]
fn reservoir_retention_within_binomial_bounds() {
    let (trials, k, m) = (10_000, 10, 2);
    let mut kept = vec![0u32; k];
    for t in 0..trials {
        let mut buf = ReplayBuffer::new(m, RngStream::new(t as u64));
        for i in 0..k {
            buf.insert(0, item(i));
        }
        assert_eq!(buf.len(), m);
        for it in buf.class_items(0) {
            kept[it.id] += 1;
        }
    }
    let p = m as f64 / k as f64;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in kept.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "item {i}: kept {c} times");
    }
}

#[test]
fn zero_capacity_buffer_stays_empty() {
    let mut buf = ReplayBuffer::new(0, RngStream::new(0));
    buf.insert(3, item(1));
    assert!(buf.is_empty());
}

fn same_trajectory(a: &RunOutput<f64>, b: &RunOutput<f64>) {
    let mut la = a.ledger.clone();
    let mut lb = b.ledger.clone();
    la.method = String::new();
    lb.method = String::new();
    assert_eq!(la.to_json(), lb.to_json());
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        assert_eq!(sa.network().params(), sb.network().params());
    }
}

#[test]
fn null_hyperparameters_reduce_to_finetuning() {
    let seq = sequence(3);
    let base = run_sequence::<f64>(&seq, &config(Method::FtCe {}), &quick_eval()).unwrap();
    for m in [Method::ewc(0.0), Method::lwf(0.0), Method::er(0)] {
        let other = run_sequence::<f64>(&seq, &config(m), &quick_eval()).unwrap();
        same_trajectory(&base, &other);
    }
}

#[test]
fn old_heads_are_frozen() {
    let seq = sequence(3);
    for m in [Method::FtCe {}, Method::ewc(50.0), Method::lwf(1.0), Method::er(4)] {
        let out = run_sequence::<f64>(&seq, &config(m), &quick_eval()).unwrap();
        let after0 = out.snapshots[0].network();
        let last = out.snapshots[2].network();
        let [w, b] = after0.head_ids(0).unwrap();
        assert_eq!(after0.params().get(w), last.params().get(w), "{}", m.name());
        assert_eq!(after0.params().get(b), last.params().get(b), "{}", m.name());
        assert_ne!(
            after0.params().get(after0.backbone_ids()[0]),
            last.params().get(after0.backbone_ids()[0])
        );
    }
}

#[test]
fn online_mode_visits_each_row_once() {
    let seq = sequence(2);
    let mut cfg = config(Method::FtCe {});
    cfg.mode = RunMode::Online;
    cfg.method.epochs = 7;
    let out = run_sequence::<f64>(&seq, &cfg, &quick_eval()).unwrap();
    for s in &out.stats {
        assert!(s.visits.iter().all(|&v| v == 1));
    }
    let offline = run_sequence::<f64>(&seq, &config(Method::FtCe {}), &quick_eval()).unwrap();
    assert!(offline.stats[0].visits.iter().all(|&v| v == 2));
}

#[test]
fn runs_are_deterministic() {
    let seq = sequence(2);
    let eval = EvalConfig {
        cka: true,
        nme_m: Some(3),
        all_lp: true,
        ..quick_eval()
    };
    for m in [Method::er(3), Method::supcon()] {
        let a = run_sequence::<f64>(&seq, &config(m), &eval).unwrap();
        let b = run_sequence::<f64>(&seq, &config(m), &eval).unwrap();
        assert_eq!(a.ledger.to_json(), b.ledger.to_json());
        assert!(a.ledger.is_complete());
    }
}

#[test]
fn contrastive_runs_have_no_observed_accuracy() {
    let seq = sequence(2);
    let out = run_sequence::<f64>(&seq, &config(Method::supcon()), &quick_eval()).unwrap();
    assert!(out.ledger.observed.iter().flatten().all(|v| v.is_none()));
    assert_eq!(out.ledger.probe.len(), 2);
}

#[test]
fn replay_buffer_holds_only_seen_tasks() {
    let seq = sequence(3);
    let cfg = config(Method::er(3));
    let net = Network::<f64>::build(&cfg.model, &mut RngStream::new(1)).unwrap();
    let mut tr = TrainerState::new(net, cfg.method.clone(), cfg.mode, RngStream::new(2)).unwrap();
    for (i, task) in seq.tasks.iter().enumerate() {
        tr.train_task(task).unwrap();
        assert!(tr.buffer.items().all(|it| it.task <= i));
        assert_eq!(tr.buffer.len(), 3 * 2 * (i + 1));
    }
}

#[test]
fn overlapping_or_repeated_tasks_are_rejected() {
    let seq = sequence(2);
    let cfg = config(Method::FtCe {});
    let net = Network::<f64>::build(&cfg.model, &mut RngStream::new(1)).unwrap();
    let mut tr = TrainerState::new(net, cfg.method.clone(), cfg.mode, RngStream::new(2)).unwrap();
    tr.train_task(&seq.tasks[0]).unwrap();
    assert!(tr.train_task(&seq.tasks[0]).is_err());
    let mut clash = seq.tasks[1].clone();
    clash.classes[0] = seq.tasks[0].classes[0];
    assert!(tr.train_task(&clash).is_err());
    let mut empty = seq.tasks[1].clone();
    empty.train = empty.train.select(&[]);
    assert!(tr.train_task(&empty).is_err());
}

#[test]
fn failed_task_leaves_partial_ledger() {
    let mut seq = sequence(3);
    seq.tasks[2].train = seq.tasks[2].train.select(&[]);
    let cfg = config(Method::FtCe {});
    let mut out = RunOutput::<f64>::new(&cfg, 3);
    assert!(run_sequence_into(&seq, &cfg, &quick_eval(), &mut out).is_err());
    assert!(out.ledger.partial);
    assert!(out.ledger.error.is_some());
    assert_eq!(out.ledger.checkpoints(), 2);
    assert!(reprobe::analysis::summarize(&out.ledger).is_err());
}
