//! CSV summaries and SVG forgetting curves generated from ledgers alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reprobe::analysis::{summarize, MetricsLedger};

use crate::runner::{write_file, RunError};

pub const CANVAS_W: f64 = 800.0;
pub const CANVAS_H: f64 = 500.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub const SUMMARY_HEADER: &str = "checkpoint,task,observed_acc,lp_acc,nme_acc,cka";
pub const COMPARE_COLUMNS: [&str; 5] = [
    "Task 1 Acc.",
    "Obs. Acc. Task 1 at T",
    "Task 1 LP T",
    "LP Acc. All T",
    "Avg. Obs. Acc.",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub figures: Vec<PathBuf>,
}

fn fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn cell(m: Option<&Vec<Vec<Option<f64>>>>, i: usize, j: usize) -> Option<f64> {
    m.and_then(|m| m.get(i)).and_then(|r| r.get(j)).copied().flatten()
}

/// One row per populated `(checkpoint, task)` cell, both 1-based.
pub fn summary_csv(ledger: &MetricsLedger) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for (i, row) in ledger.probe.iter().enumerate() {
        for (j, lp) in row.iter().enumerate() {
            let obs = cell(Some(&ledger.observed), i, j);
            let nme = cell(ledger.nme.as_ref(), i, j);
            let cka = cell(ledger.cka.as_ref(), i, j);
            if obs.is_none() && lp.is_none() && nme.is_none() && cka.is_none() {
                continue;
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                i + 1,
                j + 1,
                fixed(obs),
                fixed(*lp),
                fixed(nme),
                fixed(cka)
            );
        }
    }
    out
}

pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub dashed: bool,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart on the fixed canvas; `x` spans `x_range`, `y` spans `y_range`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64), series: &[Series]) -> String {
    let (l, r, t, b) = (70.0, 180.0, 50.0, 60.0);
    let pw = CANVAS_W - l - r;
    let ph = CANVAS_H - t - b;
    let xspan = if x_range.1 > x_range.0 { x_range.1 - x_range.0 } else { 1.0 };
    let yspan = if y_range.1 > y_range.0 { y_range.1 - y_range.0 } else { 1.0 };
    let px = |x: f64| l + (x - x_range.0) / xspan * pw;
    let py = |y: f64| t + ph - (y - y_range.0) / yspan * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" viewBox="0 0 {CANVAS_W} {CANVAS_H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="16">{}</text>"#, l + pw / 2.0, esc(title));
    // Grid and ticks.
    for k in 0..=5 {
        let y = y_range.0 + yspan * k as f64 / 5.0;
        let yy = py(y);
        let _ = writeln!(s, r##"<line x1="{l:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/>"##, l + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.1}</text>"#, l - 8.0, yy + 4.0);
    }
    let n_x = (x_range.1 - x_range.0).round().max(0.0) as usize;
    let step = (n_x / 10).max(1);
    for k in (0..=n_x).step_by(step) {
        let x = x_range.0 + k as f64;
        let xx = px(x);
        let _ = writeln!(s, r##"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#333333"/>"##, t + ph, t + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{xx:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#, t + ph + 20.0);
    }
    let _ = writeln!(
        s,
        r##"<rect x="{l:.2}" y="{t:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#333333"/>"##
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, l + pw / 2.0, CANVAS_H - 15.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        t + ph / 2.0,
        t + ph / 2.0,
        esc(y_label)
    );
    for (k, se) in series.iter().enumerate() {
        if se.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let dash = if se.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
            pts.join(" "),
            se.color
        );
        for &(x, y) in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, px(x), py(y), se.color);
        }
        let ly = t + 10.0 + 20.0 * k as f64;
        let lx = l + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{}" stroke-width="2"{dash}/>"#,
            lx + 25.0,
            se.color
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, ly + 4.0, esc(&se.name));
    }
    s.push_str("</svg>\n");
    s
}

fn column(m: &[Vec<Option<f64>>], j: usize) -> Vec<(f64, f64)> {
    m.iter()
        .enumerate()
        .filter_map(|(i, r)| r.get(j).copied().flatten().map(|v| ((i + 1) as f64, v)))
        .collect()
}

/// Observed and probe curves for task `j`; the observed curve is omitted when absent.
pub fn task_figure(ledger: &MetricsLedger, j: usize) -> String {
    let t = ledger.n_tasks.max(ledger.probe.len()) as f64;
    let mut series = Vec::new();
    let obs = column(&ledger.observed, j);
    if !obs.is_empty() {
        series.push(Series {
            name: "observed acc.".into(),
            color: PALETTE[0],
            dashed: false,
            points: obs,
        });
    }
    series.push(Series {
        name: "linear probe acc.".into(),
        color: PALETTE[1],
        dashed: false,
        points: column(&ledger.probe, j),
    });
    if let Some(nme) = &ledger.nme {
        series.push(Series {
            name: "NME acc.".into(),
            color: PALETTE[2],
            dashed: true,
            points: column(nme, j),
        });
    }
    line_chart(
        &format!("{}: task {}", ledger.method, j + 1),
        "after training task",
        "accuracy",
        (1.0, t),
        (0.0, 1.0),
        &series,
    )
}

/// Probe accuracy per tap at the first and last recorded checkpoint.
pub fn blockwise_figure(ledger: &MetricsLedger) -> Option<String> {
    let b = ledger.blockwise.as_ref()?;
    let first = b.accuracy.first()?;
    let last = b.accuracy.last()?;
    let n = b.taps.len();
    let pts = |row: &[f64]| row.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v)).collect();
    let deltas = b.deltas();
    let series = vec![
        Series {
            name: format!("after task {}", b.task + 1),
            color: PALETTE[0],
            dashed: false,
            points: pts(first),
        },
        Series {
            name: format!("after task {}", b.task + b.accuracy.len()),
            color: PALETTE[1],
            dashed: false,
            points: pts(last),
        },
        Series {
            name: "delta".into(),
            color: PALETTE[2],
            dashed: true,
            points: pts(&deltas),
        },
    ];
    Some(line_chart(
        &format!("{}: block-wise probes, task {} (taps {})", ledger.method, b.task + 1, b.taps.join(", ")),
        "tap (block index, last = final)",
        "accuracy",
        (1.0, n.max(2) as f64),
        (0.0, 1.0),
        &series,
    ))
}

/// Writes `summary.csv` and `figures/*.svg` into `dir`.
pub fn write_report(ledger: &MetricsLedger, dir: &Path) -> Result<ReportFiles, RunError> {
    let mut files = ReportFiles {
        summary_csv: dir.join("summary.csv"),
        figures: Vec::new(),
    };
    write_file(&files.summary_csv, summary_csv(ledger))?;
    for j in 0..ledger.probe.len() {
        let p = dir.join("figures").join(format!("task{:02}.svg", j + 1));
        write_file(&p, task_figure(ledger, j))?;
        files.figures.push(p);
    }
    if let Some(svg) = blockwise_figure(ledger) {
        let p = dir.join("figures").join("blockwise.svg");
        write_file(&p, svg)?;
        files.figures.push(p);
    }
    Ok(files)
}

pub fn display_name(ledger: &MetricsLedger) -> String {
    ledger
        .config
        .get("name")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| ledger.method.clone())
}

#[derive(Debug, thiserror::Error)]
pub enum CompareError {
    #[error("nothing to compare")]
    Empty,
    #[error("ledger {index} ({name}) was produced on different data ({found} vs {expected})")]
    Fingerprint {
        index: usize,
        name: String,
        found: String,
        expected: String,
    },
    #[error(transparent)]
    Core(#[from] reprobe::Error),
}

/// Table with one row per ledger: task-1 observed and probe accuracy, all-task LP, average observed.
pub fn compare_csv(ledgers: &[MetricsLedger]) -> Result<String, CompareError> {
    check_comparable(ledgers)?;
    let mut out = format!("method,{}\n", COMPARE_COLUMNS.join(","));
    for l in ledgers {
        let s = summarize(l)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            display_name(l).replace(',', ";"),
            fixed(s.task1_observed_initial),
            fixed(s.task1_observed_final),
            fixed(Some(s.task1_probe_final)),
            fixed(s.all_lp),
            fixed(s.avg_observed)
        );
    }
    Ok(out)
}

fn check_comparable(ledgers: &[MetricsLedger]) -> Result<(), CompareError> {
    let first = ledgers.first().ok_or(CompareError::Empty)?;
    for (k, l) in ledgers.iter().enumerate().skip(1) {
        if l.data_fingerprint != first.data_fingerprint {
            return Err(CompareError::Fingerprint {
                index: k,
                name: display_name(l),
                found: l.data_fingerprint.clone(),
                expected: first.data_fingerprint.clone(),
            });
        }
    }
    Ok(())
}

/// Task-1 observed (solid) and probe (dashed) curves of every ledger on one canvas.
pub fn compare_figure(ledgers: &[MetricsLedger]) -> Result<String, CompareError> {
    check_comparable(ledgers)?;
    let t = ledgers.iter().map(|l| l.probe.len()).max().unwrap_or(1);
    let mut series = Vec::new();
    for (k, l) in ledgers.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let name = display_name(l);
        let obs = column(&l.observed, 0);
        if !obs.is_empty() {
            series.push(Series {
                name: format!("{name} observed"),
                color,
                dashed: false,
                points: obs,
            });
        }
        series.push(Series {
            name: format!("{name} LP"),
            color,
            dashed: true,
            points: column(&l.probe, 0),
        });
    }
    Ok(line_chart(
        "task 1: observed vs linear probe accuracy",
        "after training task",
        "accuracy",
        (1.0, t.max(2) as f64),
        (0.0, 1.0),
        &series,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(obs: bool) -> MetricsLedger {
        let mut l = MetricsLedger::new("ft-ce", 3, 0);
        l.probe = (0..3).map(|i| (0..=i).map(|j| Some(0.9 - 0.1 * (i - j) as f64)).collect()).collect();
        l.observed = (0..3)
            .map(|i| (0..=i).map(|j| obs.then_some(0.8 - 0.2 * (i - j) as f64)).collect())
            .collect();
        l
    }

    #[test]
    fn csv_rows_match_populated_cells() {
        let csv = summary_csv(&ledger(true));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SUMMARY_HEADER);
        assert_eq!(lines.len(), 1 + 6);
        assert_eq!(lines[1], "1,1,0.800000,0.900000,,");
    }

    #[test]
    fn absent_observed_curve_is_omitted() {
        let with = task_figure(&ledger(true), 0);
        let without = task_figure(&ledger(false), 0);
        assert_eq!(with.matches("<polyline").count(), 2);
        assert_eq!(without.matches("<polyline").count(), 1);
        assert!(without.contains("linear probe acc."));
    }

    #[test]
    fn compare_columns_and_mismatch() {
        let a = ledger(true);
        let csv = compare_csv(&[a.clone(), a.clone()]).unwrap();
        let mut rows = csv.lines();
        assert_eq!(
            rows.next().unwrap(),
            "method,Task 1 Acc.,Obs. Acc. Task 1 at T,Task 1 LP T,LP Acc. All T,Avg. Obs. Acc."
        );
        assert_eq!(rows.next(), rows.next());
        let mut b = a.clone();
        b.data_fingerprint = "other".into();
        assert!(matches!(compare_csv(&[a, b]), Err(CompareError::Fingerprint { .. })));
    }
}
