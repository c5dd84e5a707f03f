use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use iotprint::dataset::{filter_min_sessions, label_for_experiment, split, DeviceKind, DeviceSplit, Scheme};
use iotprint::eval::{calibrate_threshold, evaluate, threshold_grid, unknown_detection_report, EvalReport};
use iotprint::nn::{save_model, train_select_retrain, ModelManifest, TrainHistory, MODEL_FORMAT_VERSION};
use serde::{Deserialize, Serialize};

use crate::manifest::{ManifestDevice, ParentRef, PipelineManifest, EXPERIMENT_MANIFEST};
use crate::table::{pct, Table};
use crate::{corpus, DeviceChoice, ExperimentArgs, UsageError};

pub const MODEL_FILE: &str = "model.iotp";
pub const MODEL_SIDECAR: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Headline numbers of one run, written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub scheme: u8,
    pub device: Option<String>,
    pub label_names: Vec<String>,
    pub best_epoch: usize,
    pub searched_epochs: usize,
    pub validation_accuracy: f64,
    /// Test accuracy of the final report. For scheme 5 this is threshold
    /// classification over the known test set plus the withheld device's
    /// test pool.
    pub test_accuracy: f64,
    pub weighted_f1: f64,
    pub test_instances: u64,
    /// Argmax accuracy on the known-device test set alone.
    pub closed_set_accuracy: f64,
    pub threshold: Option<f64>,
    pub calibration_accuracy: Option<f64>,
    pub unknown_detected: Option<u64>,
    pub unknown_total: Option<u64>,
}

impl ExperimentMetrics {
    pub fn unknown_detection_rate(&self) -> Option<f64> {
        match (self.unknown_detected, self.unknown_total) {
            (Some(d), Some(t)) if t > 0 => Some(d as f64 / t as f64),
            _ => None,
        }
    }
}

pub fn run(args: &ExperimentArgs) -> Result<()> {
    let choice = args.scheme.device_choice()?;
    let (corpus, verified) = corpus::load(&args.corpus)?;
    let corpus = filter_min_sessions(corpus, args.min_sessions)?;
    let pools = split(&corpus, args.train.seed);
    let parent = verified.as_parent();
    super::ensure_dir(&args.out)?;

    let runs: Vec<Option<String>> = match choice {
        DeviceChoice::None => vec![None],
        DeviceChoice::One(name) => vec![Some(name)],
        DeviceChoice::AllIot => {
            let names: Vec<Option<String>> = corpus
                .devices
                .iter()
                .filter(|d| d.kind == DeviceKind::Iot)
                .map(|d| Some(d.name.clone()))
                .collect();
            if names.is_empty() {
                return Err(UsageError("the corpus has no IoT devices".into()).into());
            }
            names
        }
    };

    if runs.len() == 1 {
        let scheme = args.scheme.scheme_for(runs[0].as_deref());
        let (metrics, text) = run_one(args, &pools, &scheme, &args.out, &parent)?;
        print!("{text}");
        print_headline(&metrics);
        return Ok(());
    }

    let mut all = Vec::new();
    for (i, name) in runs.iter().enumerate() {
        let name = name.as_deref().expect("device runs");
        let scheme = args.scheme.scheme_for(Some(name));
        let dir = args.out.join(format!("{i:02}-{}", super::slug(name)));
        log::info!("run {}/{}: {scheme}", i + 1, runs.len());
        let (metrics, _) = run_one(args, &pools, &scheme, &dir, &parent)?;
        print_headline(&metrics);
        all.push(metrics);
    }
    let table = summary_table(&all);
    let mean = all.iter().map(|m| m.test_accuracy).sum::<f64>() / all.len() as f64;
    let mut text = table.render();
    let _ = writeln!(text, "Mean test accuracy: {}", pct(mean));
    super::write_text(&args.out.join("summary.txt"), &text)?;
    super::write_text(&args.out.join("summary.csv"), &table.to_csv())?;
    print!("{text}");
    Ok(())
}

fn print_headline(m: &ExperimentMetrics) {
    let device = m.device.as_deref().map(|d| format!(" [{d}]")).unwrap_or_default();
    match m.unknown_detection_rate() {
        Some(rate) => println!(
            "scheme {}{device}: test accuracy {}, unknown detected {} ({}/{})",
            m.scheme,
            pct(m.test_accuracy),
            pct(rate),
            m.unknown_detected.unwrap_or(0),
            m.unknown_total.unwrap_or(0)
        ),
        None => println!("scheme {}{device}: test accuracy {}", m.scheme, pct(m.test_accuracy)),
    }
}

fn summary_table(all: &[ExperimentMetrics]) -> Table {
    let unknown = all.first().is_some_and(|m| m.scheme == 5);
    let mut t = if unknown {
        Table::new(&[
            "Excluded device",
            "Best epoch",
            "Threshold",
            "Calibration accuracy",
            "Test accuracy",
            "Unknown detected",
        ])
    } else {
        Table::new(&["Device", "Best epoch", "Validation accuracy", "Test accuracy", "Weighted F1"])
    };
    for m in all {
        let name = m.device.clone().unwrap_or_default();
        if unknown {
            t.push(vec![
                name,
                m.best_epoch.to_string(),
                format!("{:.2}", m.threshold.unwrap_or(f64::NAN)),
                pct(m.calibration_accuracy.unwrap_or(f64::NAN)),
                pct(m.test_accuracy),
                pct(m.unknown_detection_rate().unwrap_or(f64::NAN)),
            ]);
        } else {
            t.push(vec![
                name,
                m.best_epoch.to_string(),
                pct(m.validation_accuracy),
                pct(m.test_accuracy),
                format!("{:.3}", m.weighted_f1),
            ]);
        }
    }
    t
}

fn history_csv(search: &TrainHistory, retrain: &TrainHistory) -> String {
    let mut out = String::from("phase,epoch,train_loss,validation_loss,validation_accuracy\n");
    for (phase, h) in [("search", search), ("retrain", retrain)] {
        for e in &h.epochs {
            let _ = writeln!(
                out,
                "{phase},{},{:.8},{:.8},{:.6}",
                e.epoch, e.train_loss, e.validation_loss, e.validation_accuracy
            );
        }
    }
    out
}

/// Trains and evaluates one scheme, writing everything under `dir`.
/// Returns the metrics and the text report.
fn run_one(
    args: &ExperimentArgs,
    pools: &DeviceSplit,
    scheme: &Scheme,
    dir: &Path,
    parent: &ParentRef,
) -> Result<(ExperimentMetrics, String)> {
    let data = label_for_experiment(pools, scheme)?;
    let config = args.train.config(scheme);
    config.validate()?;
    super::ensure_dir(dir)?;

    let outcome = train_select_retrain(&data, &config, |phase, e| {
        log::info!(
            "{phase} epoch {}: train loss {:.5}, validation loss {:.5}, validation accuracy {:.4}",
            e.epoch,
            e.train_loss,
            e.validation_loss,
            e.validation_accuracy
        );
    })?;
    let best = outcome.search.epochs[outcome.best_epoch - 1];
    let closed = evaluate(&outcome.params, &data.test)?;

    let unknown = matches!(scheme, Scheme::UnknownDetection { .. });
    let (report, calibration): (EvalReport, _) = if unknown {
        let grid = threshold_grid(args.threshold_grid as usize);
        let cal = calibrate_threshold(&outcome.params, &data.validation, &data.unknown_validation, &grid)?;
        let report = unknown_detection_report(&outcome.params, cal.threshold, &data.test, &data.unknown_test);
        (report, Some(cal))
    } else {
        (closed.clone(), None)
    };

    let unknown_row = report.labels.len().saturating_sub(1);
    let metrics = ExperimentMetrics {
        scheme: scheme.number(),
        device: scheme.device().map(str::to_string),
        label_names: data.spec.label_names.clone(),
        best_epoch: outcome.best_epoch,
        searched_epochs: config.epochs,
        validation_accuracy: best.validation_accuracy,
        test_accuracy: report.accuracy,
        weighted_f1: report.weighted_avg.f1,
        test_instances: report.confusion.total(),
        closed_set_accuracy: closed.accuracy,
        threshold: calibration.map(|c| c.threshold),
        calibration_accuracy: calibration.map(|c| c.achieved_validation_accuracy),
        unknown_detected: unknown.then(|| report.confusion.get(unknown_row, unknown_row)),
        unknown_total: unknown.then(|| report.confusion.row_sum(unknown_row)),
    };

    let mut text = String::new();
    let _ = writeln!(text, "Scheme: {scheme}");
    let _ = writeln!(text, "Seed: {}", config.seed);
    let _ = write!(
        text,
        "Instances: train {}, validation {}, test {}",
        data.train.len(),
        data.validation.len(),
        data.test.len()
    );
    if unknown {
        let _ = write!(
            text,
            ", withheld validation {}, withheld test {}",
            data.unknown_validation.len(),
            data.unknown_test.len()
        );
    }
    text.push('\n');
    let _ = writeln!(
        text,
        "Best epoch: {} of {} (validation accuracy {}, validation loss {:.5})",
        outcome.best_epoch,
        config.epochs,
        pct(best.validation_accuracy),
        best.validation_loss
    );
    if let Some(cal) = calibration {
        let _ = writeln!(
            text,
            "Threshold: {:.2} (calibration accuracy {} over {} known + {} withheld validation instances)",
            cal.threshold,
            pct(cal.achieved_validation_accuracy),
            data.validation.len(),
            data.unknown_validation.len()
        );
        let _ = writeln!(
            text,
            "Unknown detected: {}/{} withheld test sessions ({})",
            metrics.unknown_detected.unwrap_or(0),
            metrics.unknown_total.unwrap_or(0),
            pct(metrics.unknown_detection_rate().unwrap_or(0.0))
        );
        let _ = writeln!(
            text,
            "Test set: {} known-device instances + {} withheld-device instances",
            data.test.len(),
            data.unknown_test.len()
        );
    }
    text.push('\n');
    text.push_str(&report.render_table());
    if unknown {
        let _ = write!(text, "\nKnown devices only, no threshold:\n{}", closed.render_table());
    }

    let model_path = dir.join(MODEL_FILE);
    let file = File::create(&model_path).with_context(|| format!("creating {}", model_path.display()))?;
    save_model(&outcome.params, BufWriter::new(file))?;
    let sidecar = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        tool_version: iotprint::VERSION.to_string(),
        scheme: scheme.number(),
        scheme_description: scheme.to_string(),
        label_names: data.spec.label_names.clone(),
        output_kind: outcome.params.output_kind,
        hidden: outcome.params.shape().hidden,
        outputs: outcome.params.outputs(),
        config,
        split_seed: data.seed,
        best_epoch: Some(outcome.best_epoch),
        threshold: metrics.threshold,
        history: outcome.retrain.clone(),
    };
    super::write_text(&dir.join(MODEL_SIDECAR), &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
    super::write_text(&dir.join("report.txt"), &text)?;
    super::write_text(&dir.join("report.csv"), &report.to_csv())?;
    super::write_text(&dir.join("history.csv"), &history_csv(&outcome.search, &outcome.retrain))?;
    super::write_text(&dir.join(METRICS_FILE), &(serde_json::to_string_pretty(&metrics)? + "\n"))?;

    let mut outputs: Vec<String> = [MODEL_FILE, MODEL_SIDECAR, "report.txt", "report.csv", "history.csv", METRICS_FILE]
        .map(String::from)
        .to_vec();
    if args.write_split {
        data.write_to(&dir.join("split"))?;
        for part in ["train", "validation", "test"] {
            outputs.push(format!("split/{part}-images-idx3-ubyte"));
            outputs.push(format!("split/{part}-labels-idx1-ubyte"));
        }
        if unknown {
            for part in ["unknown-validation", "unknown-test"] {
                outputs.push(format!("split/{part}-images-idx3-ubyte"));
                outputs.push(format!("split/{part}-labels-idx1-ubyte"));
            }
        }
        outputs.push("split/split.manifest".into());
    }

    let mut manifest = PipelineManifest::new("experiment");
    manifest.parent = Some(parent.clone());
    manifest.seed = Some(config.seed);
    manifest.scheme = Some(scheme.to_string());
    manifest.devices = pools
        .devices
        .iter()
        .map(|d| ManifestDevice {
            name: d.name.clone(),
            kind: d.kind.to_string(),
            macs: Vec::new(),
            sessions: d.counts().total(),
            images: None,
        })
        .collect();
    manifest.config = serde_json::json!({
        "train": config,
        "min_sessions": args.min_sessions,
        "threshold_grid_steps": args.threshold_grid,
        "split": data.manifest_entries().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    });
    manifest.add_outputs(dir, &outputs)?;
    manifest.write(dir, EXPERIMENT_MANIFEST)?;
    Ok((metrics, text))
}
