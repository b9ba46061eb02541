//! Executes experiments and writes their bundles.

use std::fs;
use std::path::{Path, PathBuf};

use reprobe::analysis::MetricsLedger;
use reprobe::continual::{iid_split_baseline, run_sequence_into, RunOutput};
use reprobe::data::{generate, load_table, split_tasks, Dataset, TaskSequence};
use reprobe::Scalar;
use sha2::{Digest, Sha256};

use crate::config::{hex, ConfigError, ExperimentConfig};
use crate::report::{write_report, ReportFiles};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Core(#[from] reprobe::Error),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    /// Process exit status: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(cfg: &ExperimentConfig, base: &Path) -> Result<Dataset, RunError> {
    match (cfg.dataset.synthetic(), &cfg.dataset.path) {
        (Some(spec), _) => Ok(generate(&spec)?),
        (None, Some(p)) => {
            let p = if p.is_absolute() { p.clone() } else { base.join(p) };
            Ok(load_table(&p)?)
        }
        (None, None) => Err(ConfigError::Invalid {
            field: "dataset.path".into(),
            msg: "missing".into(),
        }
        .into()),
    }
}

pub fn build_sequence(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TaskSequence, RunError> {
    let s = &cfg.split;
    if s.iid {
        return Ok(iid_split_baseline(ds, s.n_tasks, s.order_seed)?);
    }
    let cpt = s.classes_per_task.unwrap_or(ds.n_classes / s.n_tasks.max(1));
    Ok(split_tasks(ds, s.n_tasks, cpt, s.order_seed)?)
}

/// sha256 over task class lists, labels and input values.
pub fn data_fingerprint(seq: &TaskSequence) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}|{}", seq.input_shape, seq.shared_head).as_bytes());
    for t in &seq.tasks {
        h.update(format!("task {} head {} classes {:?}", t.id, t.head, t.classes).as_bytes());
        for split in [&t.train, &t.test] {
            for &l in &split.labels {
                h.update((l as u64).to_le_bytes());
            }
            for &v in split.x.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

/// Human-readable execution plan for `--dry-run`.
pub fn plan(cfg: &ExperimentConfig, root: &Path) -> String {
    let n = cfg.split.n_tasks;
    let probes = n * (n + 1) / 2;
    let mut lines = vec![
        format!("experiment {} ({})", cfg.label(), cfg.fingerprint()),
        format!("  output    {}", cfg.output_path(root).display()),
        format!(
            "  data      {:?} split into {} tasks{}",
            cfg.dataset.kind,
            n,
            if cfg.split.iid { " (iid subsets)" } else { "" }
        ),
        format!(
            "  model     {:?} depth {} width {}",
            cfg.model.family, cfg.model.depth, cfg.model.width
        ),
        format!("  method    {:?}", cfg.method),
        format!(
            "  training  {:?}, {} epochs, batch {}, {:?}",
            cfg.training.mode,
            cfg.training.mode.epochs(cfg.training.epochs),
            cfg.training.batch_size,
            cfg.training.optimizer()
        ),
        format!("  probes    {probes} task probes at tap {}", cfg.probe.tap),
    ];
    let a = &cfg.analysis;
    let mut extra = Vec::new();
    if a.cka {
        extra.push("cka".to_string());
    }
    if a.all_lp {
        extra.push("all-lp".to_string());
    }
    if let Some(m) = a.nme_m {
        extra.push(format!("nme(M={m})"));
    }
    if let Some(b) = &a.blockwise {
        extra.push(format!("blockwise(task {}, {} taps)", b.task, b.taps.len()));
    }
    if !extra.is_empty() {
        lines.push(format!("  analysis  {}", extra.join(", ")));
    }
    lines.join("\n") + "\n"
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub ledger: MetricsLedger,
    pub files: ReportFiles,
}

/// Runs one experiment end to end and writes ledger, config echo, report and snapshots.
/// On a runtime failure the partial ledger is still written before the error is returned.
pub fn run_experiment<T: Scalar>(cfg: &ExperimentConfig, root: &Path, base: &Path) -> Result<RunArtifacts, RunError> {
    cfg.validate()?;
    let ds = load_dataset(cfg, base)?;
    let seq = build_sequence(cfg, &ds)?;
    let run_cfg = cfg.run_config(&seq.input_shape)?;
    let eval = cfg.eval_config();
    let dir = cfg.output_path(root);

    let mut out = RunOutput::<T>::new(&run_cfg, seq.len());
    out.ledger.method = cfg.label();
    out.ledger.config_fingerprint = cfg.fingerprint();
    out.ledger.data_fingerprint = data_fingerprint(&seq);
    out.ledger.config = serde_json::to_value(cfg).expect("config serializes");
    let result = run_sequence_into(&seq, &run_cfg, &eval, &mut out);

    let echo = serde_json::json!({
        "fingerprint": cfg.fingerprint(),
        "config": cfg,
    });
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&echo).expect("json") + "\n")?;
    write_file(&dir.join("ledger.json"), out.ledger.to_json())?;
    if cfg.save_snapshots {
        for (i, s) in out.snapshots.iter().enumerate() {
            write_file(&dir.join("snapshots").join(format!("task{:02}.rpsn", i + 1)), s.to_bytes())?;
        }
    }
    result?;
    let files = write_report(&out.ledger, &dir)?;
    Ok(RunArtifacts {
        dir,
        ledger: out.ledger,
        files,
    })
}
