use std::fmt::Write as _;

use anyhow::Result;
use iotprint::dataset::{filter_min_sessions, DatasetError, kfold_split, label_for_experiment};
use iotprint::eval::evaluate;
use iotprint::nn::train_with;

use crate::manifest::{PipelineManifest, KFOLD_MANIFEST};
use crate::table::{pct, Table};
use crate::{corpus, DeviceChoice, KfoldArgs, UsageError};

/// Each fold trains for exactly `--epochs` epochs on the other folds and is
/// scored on itself.
pub fn run(args: &KfoldArgs) -> Result<()> {
    let device = match args.scheme.device_choice()? {
        DeviceChoice::None => None,
        DeviceChoice::One(name) => Some(name),
        DeviceChoice::AllIot => return Err(UsageError("kfold takes a single --target".into()).into()),
    };
    let scheme = args.scheme.scheme_for(device.as_deref());
    let config = args.train.config(&scheme);
    config.validate()?;
    if args.k < 2 {
        return Err(DatasetError::InvalidFoldCount { k: args.k }.into());
    }
    let (corpus, verified) = corpus::load(&args.corpus)?;
    let corpus = filter_min_sessions(corpus, args.min_sessions)?;
    let folds = kfold_split(&corpus, &scheme, args.k, config.seed)?;
    let sizes = folds.fold_sizes();
    super::ensure_dir(&args.out)?;

    let mut table = Table::new(&["Fold", "Train", "Held out", "Accuracy", "Weighted F1"]);
    let mut accuracies = Vec::with_capacity(args.k);
    for fold in 0..args.k {
        let data = label_for_experiment(&folds.pools(&corpus, fold), &scheme)?;
        let (params, _) = train_with(&data.train, &data.validation, data.spec.output_width, &config, |e| {
            log::info!(
                "fold {} epoch {}: train loss {:.5}, held-out accuracy {:.4}",
                fold + 1,
                e.epoch,
                e.train_loss,
                e.validation_accuracy
            );
        })?;
        let report = evaluate(&params, &data.test)?;
        println!("fold {}/{}: accuracy {}", fold + 1, args.k, pct(report.accuracy));
        accuracies.push(report.accuracy);
        table.push(vec![
            (fold + 1).to_string(),
            data.train.len().to_string(),
            data.test.len().to_string(),
            pct(report.accuracy),
            format!("{:.4}", report.weighted_avg.f1),
        ]);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut text = format!("Scheme: {scheme}\nFolds: {} (sizes {:?}), {} epochs each\n\n", args.k, sizes, config.epochs);
    text.push_str(&table.render());
    let _ = writeln!(text, "Mean accuracy: {} (std {})", pct(mean), pct(std));
    super::write_text(&args.out.join("kfold.txt"), &text)?;
    super::write_text(&args.out.join("kfold.csv"), &table.to_csv())?;

    let mut manifest = PipelineManifest::new("kfold");
    manifest.parent = Some(verified.as_parent());
    manifest.seed = Some(config.seed);
    manifest.scheme = Some(scheme.to_string());
    manifest.config = serde_json::json!({
        "train": config,
        "k": args.k,
        "fold_sizes": sizes,
        "min_sessions": args.min_sessions,
        "mean_accuracy": mean,
        "std_accuracy": std,
    });
    manifest.add_outputs(&args.out, &["kfold.txt", "kfold.csv"])?;
    manifest.write(&args.out, KFOLD_MANIFEST)?;
    print!("{text}");
    Ok(())
}
