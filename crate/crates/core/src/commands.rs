//! The pipeline stages behind the `uamt` command line: dataset generation,
//! training, evaluation and the cross-run report.
//!
//! A run directory holds `config.resolved.json`, `train_log.csv`,
//! `access.log`, `checkpoints/` and, after evaluation, `metrics.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RESOLVED_CONFIG};
use crate::data::{save_mask, save_volume, DatasetDir, DatasetSplit, LoadScope, Manifest, VolumeKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::inference::sliding_window_predict;
use crate::metrics::{evaluate_case, read_metrics_csv, report_table, write_metrics_csv, CaseMetrics, MEAN_ROW};
use crate::nn::{load_params, read_param_manifest, Backbone};
use crate::train::{checkpoint_path, train_run, Method, RunOutcome, Trainer};

pub const ACCESS_LOG: &str = "access.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Divisibility { .. } | Error::Fingerprint(_) => 2,
        Error::Numerical { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Generates the phantom split and writes it to `cfg.data_dir`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let split = DatasetSplit::generate(&cfg.phantom, cfg.split)?;
    let manifest = DatasetDir::new(&cfg.data_dir).write(&split, cfg.phantom.seed)?;
    cfg.write_resolved(&cfg.data_dir)?;
    Ok(manifest)
}

/// Trains `cfg.train.method` on the dataset in `cfg.data_dir`, writing into `cfg.out_dir`.
///
/// Supervised-only runs never open unlabeled files; training never opens test
/// files. Every file read is listed in `access.log`.
pub fn train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let scope = match cfg.train.method {
        Method::SupOnly => LoadScope::LabeledOnly,
        _ => LoadScope::Training,
    };
    let ds = DatasetDir::new(&cfg.data_dir);
    let split = ds.load(scope)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(format!("creating {}", cfg.out_dir.display()), e))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let log: String = ds.accessed().iter().map(|p| format!("{}\n", p.display())).collect();
    let log_path = cfg.out_dir.join(ACCESS_LOG);
    fs::write(&log_path, log).map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    let trainer = Trainer::new(cfg.train.clone(), cfg.net.clone(), cfg.loss.clone())?;
    train_run(trainer, &split, &cfg.out_dir)
}

/// Accepts either a full checkpoint directory or a bare parameter directory.
fn student_dir(checkpoint: &Path) -> PathBuf {
    let nested = checkpoint.join("student");
    if nested.is_dir() {
        nested
    } else {
        checkpoint.to_path_buf()
    }
}

pub struct EvalOptions {
    /// Checkpoint to evaluate; defaults to the run's final checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Directory for `metrics.csv`; defaults to the run directory.
    pub out: Option<PathBuf>,
    pub save_predictions: bool,
}

/// Sliding-window inference with the student network on every test case.
pub fn eval(cfg: &ExperimentConfig, opts: &EvalOptions) -> Result<Vec<CaseMetrics>> {
    let checkpoint = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| checkpoint_path(&cfg.out_dir, "final"));
    let out = opts.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let params_dir = student_dir(&checkpoint);
    let manifest = read_param_manifest(&params_dir)?;
    let net = Backbone::new(manifest.net.clone())?;
    let (params, _) = load_params(&params_dir, Some(&manifest.net))?;
    net.check_params(&params)?;
    let (window, stride) = cfg.sliding_window.resolve(cfg.train.crop)?;

    let split = DatasetDir::new(&cfg.data_dir).load(LoadScope::TestOnly)?;
    if split.test.is_empty() {
        return Err(Error::Config(format!("dataset {} has an empty test split", cfg.data_dir.display())));
    }
    let results = exec::map_slice(&split.test, |case| -> Result<CaseMetrics> {
        let pred = sliding_window_predict(&net, &params, &case.image, window, stride)?;
        if opts.save_predictions {
            let dir = out.join(PREDICTIONS_DIR);
            let id = case.id();
            save_mask(&pred.mask, case.image.spacing, id, VolumeKind::Prediction, &dir.join(format!("{id}_pred.raw")))?;
            save_volume(&pred.foreground, VolumeKind::Probability, &dir.join(format!("{id}_prob.raw")))?;
        }
        evaluate_case(case.id(), &pred.mask, &case.label)
    });
    let records: Vec<CaseMetrics> = results.into_iter().collect::<Result<_>>()?;
    let rows = report_table(&records)?;
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
    Ok(rows)
}

/// One line of the cross-run comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub complete: bool,
}

fn report_row(run: &Path) -> Result<(Option<Method>, ReportRow)> {
    let cfg = ExperimentConfig::load(Some(&run.join(RESOLVED_CONFIG)))?;
    let method = cfg.train.method;
    let labeled = cfg.split.labeled;
    let unlabeled = if method == Method::SupOnly { 0 } else { cfg.split.unlabeled };
    let mean = read_metrics_csv(&run.join(METRICS_FILE))
        .ok()
        .and_then(|rows| rows.into_iter().find(|r| r.id == MEAN_ROW));
    Ok((
        Some(method),
        ReportRow {
            run: run.display().to_string(),
            method: method.name().into(),
            labeled,
            unlabeled,
            dice: mean.as_ref().map(|m| m.dice),
            jaccard: mean.as_ref().map(|m| m.jaccard),
            asd: mean.as_ref().and_then(|m| m.asd),
            hd95: mean.as_ref().and_then(|m| m.hd95),
            complete: mean.is_some(),
        },
    ))
}

/// Summarises run directories, ordered SUP_ONLY, MT, UA_MT_UN, UA_MT. Runs
/// without metrics (or without a readable config) are kept and marked incomplete.
pub fn report(runs: &[PathBuf]) -> Vec<ReportRow> {
    let mut rows: Vec<(Option<Method>, ReportRow)> = runs
        .iter()
        .map(|r| {
            report_row(r).unwrap_or_else(|_| {
                (
                    None,
                    ReportRow {
                        run: r.display().to_string(),
                        method: "?".into(),
                        labeled: 0,
                        unlabeled: 0,
                        dice: None,
                        jaccard: None,
                        asd: None,
                        hd95: None,
                        complete: false,
                    },
                )
            })
        })
        .collect();
    rows.sort_by_key(|(m, _)| m.map_or(usize::MAX, |m| m.report_rank()));
    rows.into_iter().map(|(_, r)| r).collect()
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn vox(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Aligned text table in the column order Dice, Jaccard, ASD, 95HD.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>8} {:>10}  {:>8} {:>10} {:>10} {:>11}  run",
        "method", "labeled", "unlabeled", "Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<9} {:>8} {:>10}  {:>8} {:>10} {:>10} {:>11}  {}{}",
            r.method,
            r.labeled,
            r.unlabeled,
            pct(r.dice),
            pct(r.jaccard),
            vox(r.asd),
            vox(r.hd95),
            r.run,
            if r.complete { "" } else { " (incomplete)" }
        );
    }
    s
}
