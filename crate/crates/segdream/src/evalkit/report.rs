//! Report emission: return curves with SEM bands across seeds, IoU/return
//! scatters, precision/recall curves, and a machine-readable summary table.

use super::plot::{render_chart, Series, PALETTE};
use super::{mean_sem};
use crate::config::{DistractorMode, MaskKind, RunConfig};
use crate::error::{Result, SdError};
use crate::trainer::metrics::{read_metrics, series, MetricRecord};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Metrics every run directory must provide before a report can be built.
const REQUIRED_METRICS: [&str; 2] = ["eval/return_mean", "train/episode_iou_fm"];

/// One loaded run.
pub struct RunData {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub records: Vec<MetricRecord>,
    pub label: String,
}

/// Per-group (variant + condition) aggregate over seeds.
#[derive(Debug, Clone)]
pub struct GroupSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub final_return_mean: f64,
    pub final_return_sem: f64,
    pub train_iou_mean: f64,
    pub final_iou_head: Option<f64>,
    pub final_precision_head: Option<f64>,
    pub final_recall_head: Option<f64>,
    pub final_iou_fm: Option<f64>,
    pub final_precision_fm: Option<f64>,
    pub final_recall_fm: Option<f64>,
    pub final_precision_rgb: Option<f64>,
    pub final_recall_rgb: Option<f64>,
    /// Final (per-seed) return values backing the mean/SEM.
    pub final_returns: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub groups: Vec<GroupSummary>,
    pub files: Vec<PathBuf>,
}

/// Group label: variant name, a `*` suffix for distraction-free runs (the
/// oracle condition), and the mask source.
fn run_label(cfg: &RunConfig) -> String {
    let mut label = cfg.model.variant.name().to_string();
    if cfg.env.distractor_mode == DistractorMode::None {
        label.push('*');
    }
    if cfg.masks.kind == MaskKind::SimulatedFm {
        label.push_str(&format!("[fm c={:.2} p={:.2}]", cfg.masks.p_fn_component, cfg.masks.p_fn_pixel));
    }
    label
}

fn load_run(dir: &Path) -> Result<RunData> {
    let config_path = dir.join("config.toml");
    let metrics_path = dir.join("metrics.jsonl");
    if !config_path.is_file() || !metrics_path.is_file() {
        return Err(SdError::Report(format!(
            "run directory {} is missing config.toml or metrics.jsonl",
            dir.display()
        )));
    }
    let config = RunConfig::from_toml_file(&config_path)?;
    let records = read_metrics(&metrics_path)?;
    let missing: Vec<&str> = REQUIRED_METRICS
        .iter()
        .filter(|m| !records.iter().any(|r| r.metric == **m))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(SdError::Report(format!(
            "run {} is missing metrics: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let label = run_label(&config);
    Ok(RunData {
        dir: dir.to_path_buf(),
        config,
        records,
        label,
    })
}

fn last_value(records: &[MetricRecord], metric: &str) -> Option<f64> {
    series(records, metric).last().map(|(_, v)| *v)
}

fn mean_value(records: &[MetricRecord], metric: &str) -> Option<f64> {
    let s = series(records, metric);
    if s.is_empty() {
        None
    } else {
        Some(s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64)
    }
}

/// Build all report artifacts from a list of run directories.
pub fn emit_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary> {
    if run_dirs.is_empty() {
        return Err(SdError::Report("no run directories given".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let runs: Vec<RunData> = run_dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;

    // stable grouping by label
    let mut groups: BTreeMap<String, Vec<&RunData>> = BTreeMap::new();
    for run in &runs {
        groups.entry(run.label.clone()).or_default().push(run);
    }

    let mut files = Vec::new();

    // 1. return-vs-step curves with SEM bands across seeds
    let mut curve_series = Vec::new();
    for (gi, (label, members)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for run in members {
            for (step, v) in series(&run.records, "eval/return_mean") {
                by_step.entry(step).or_default().push(v);
            }
        }
        let mut points = Vec::new();
        let mut band = Vec::new();
        for (step, vals) in &by_step {
            let (mean, sem) = mean_sem(vals);
            points.push((*step as f64, mean));
            band.push((*step as f64, mean - sem, mean + sem));
        }
        let mut s = Series::line(label, color, points);
        s.band = band;
        curve_series.push(s);
    }
    let curves_path = out_dir.join("return_curves.png");
    render_chart(
        &curves_path,
        "EVAL RETURN VS ENV STEPS",
        "ENV STEPS",
        "RETURN",
        &curve_series,
    )?;
    files.push(curves_path);

    // 2. train-time episodic IoU vs final return, one point per run
    let mut train_scatter = Vec::new();
    for (gi, (label, members)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut points = Vec::new();
        for run in members {
            if let (Some(iou), Some(ret)) = (
                mean_value(&run.records, "train/episode_iou_fm"),
                last_value(&run.records, "eval/return_mean"),
            ) {
                points.push((iou, ret));
            }
        }
        train_scatter.push(Series::scatter(label, color, points));
    }
    let train_path = out_dir.join("train_iou_vs_return.png");
    render_chart(
        &train_path,
        "TRAIN-TIME MASK IOU VS FINAL RETURN",
        "EPISODIC IOU DURING TRAINING",
        "FINAL RETURN",
        &train_scatter,
    )?;
    files.push(train_path);

    // 3. test-time episodic IoU vs episodic reward (final evaluation)
    let mut test_scatter = Vec::new();
    for (gi, (label, members)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        let mut points = Vec::new();
        for run in members {
            let last_step = series(&run.records, "eval/return_mean")
                .last()
                .map(|(s, _)| *s)
                .unwrap_or(0);
            let metric = if run.config.model.variant.has_mask_head() {
                "eval/episode_iou_head"
            } else {
                "eval/episode_iou_fm"
            };
            let ious: Vec<f64> = run
                .records
                .iter()
                .filter(|r| r.step == last_step && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let rets: Vec<f64> = run
                .records
                .iter()
                .filter(|r| r.step == last_step && r.metric == "eval/episode_return")
                .map(|r| r.value)
                .collect();
            for (iou, ret) in ious.iter().zip(rets.iter()) {
                points.push((*iou, *ret));
            }
        }
        test_scatter.push(Series::scatter(label, color, points));
    }
    let test_path = out_dir.join("test_iou_vs_reward.png");
    render_chart(
        &test_path,
        "TEST-TIME EPISODIC IOU VS EPISODIC REWARD",
        "EPISODIC IOU",
        "EPISODIC REWARD",
        &test_scatter,
    )?;
    files.push(test_path);

    // 4. precision/recall over training: provider masks vs mask head
    let mut pr_series = Vec::new();
    let mut color_idx = 0usize;
    for (label, members) in groups.iter() {
        for (metric, suffix) in [
            ("eval/precision_fm", "P-FM"),
            ("eval/recall_fm", "R-FM"),
            ("eval/precision_head", "P-HEAD"),
            ("eval/recall_head", "R-HEAD"),
        ] {
            let mut by_step: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for run in members {
                for (step, v) in series(&run.records, metric) {
                    by_step.entry(step).or_default().push(v);
                }
            }
            if by_step.is_empty() {
                continue;
            }
            let points: Vec<(f64, f64)> = by_step
                .iter()
                .map(|(s, vals)| (*s as f64, vals.iter().sum::<f64>() / vals.len() as f64))
                .collect();
            pr_series.push(Series::line(
                &format!("{label} {suffix}"),
                PALETTE[color_idx % PALETTE.len()],
                points,
            ));
            color_idx += 1;
        }
    }
    let pr_path = out_dir.join("pr_curves.png");
    render_chart(
        &pr_path,
        "MASK PRECISION/RECALL OVER TRAINING",
        "ENV STEPS",
        "PRECISION / RECALL",
        &pr_series,
    )?;
    files.push(pr_path);

    // summary table
    let mut summaries = Vec::new();
    for (label, members) in groups.iter() {
        let finals: Vec<f64> = members
            .iter()
            .filter_map(|r| last_value(&r.records, "eval/return_mean"))
            .collect();
        let (mean, sem) = mean_sem(&finals);
        let train_iou: Vec<f64> = members
            .iter()
            .filter_map(|r| mean_value(&r.records, "train/episode_iou_fm"))
            .collect();
        let avg = |metric: &str| -> Option<f64> {
            let vals: Vec<f64> = members
                .iter()
                .filter_map(|r| last_value(&r.records, metric))
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        summaries.push(GroupSummary {
            label: label.clone(),
            seeds: members.iter().map(|r| r.config.seed).collect(),
            final_return_mean: mean,
            final_return_sem: sem,
            train_iou_mean: mean_sem(&train_iou).0,
            final_iou_head: avg("eval/iou_head"),
            final_precision_head: avg("eval/precision_head"),
            final_recall_head: avg("eval/recall_head"),
            final_iou_fm: avg("eval/iou_fm"),
            final_precision_fm: avg("eval/precision_fm"),
            final_recall_fm: avg("eval/recall_fm"),
            final_precision_rgb: avg("eval/precision_rgb"),
            final_recall_rgb: avg("eval/recall_rgb"),
            final_returns: finals,
        });
    }

    let csv_path = out_dir.join("summary.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(
        csv,
        "label,seeds,final_return_mean,final_return_sem,train_iou_mean,\
         iou_head,precision_head,recall_head,iou_fm,precision_fm,recall_fm,\
         precision_rgb,recall_rgb"
    )?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in &summaries {
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{}",
            s.label,
            s.seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            s.final_return_mean,
            s.final_return_sem,
            s.train_iou_mean,
            fmt(s.final_iou_head),
            fmt(s.final_precision_head),
            fmt(s.final_recall_head),
            fmt(s.final_iou_fm),
            fmt(s.final_precision_fm),
            fmt(s.final_recall_fm),
            fmt(s.final_precision_rgb),
            fmt(s.final_recall_rgb),
        )?;
    }
    csv.flush()?;
    files.push(csv_path);

    Ok(ReportSummary {
        groups: summaries,
        files,
    })
}
