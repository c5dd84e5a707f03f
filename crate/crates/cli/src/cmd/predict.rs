use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use iotprint::capture::{parse_pcap_file, split_sessions, PCAP_MAGIC_MICROS, PCAP_MAGIC_NANOS};
use iotprint::nn::{decide, load_model, predict_batch, ModelManifest, ModelParams, OutputKind};
use iotprint::transform::{extract_payload, fix_length, PayloadVector};

use super::experiment::{MODEL_FILE, MODEL_SIDECAR};
use crate::manifest::{load_verified, EXPERIMENT_MANIFEST};
use crate::table::Table;
use crate::{PredictArgs, UsageError};

struct Item {
    /// Session endpoints or file name.
    source: String,
    initiator: String,
    vector: PayloadVector,
}

fn is_pcap(path: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let n = File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read(&mut head)?;
    let magic = u32::from_le_bytes(head);
    Ok(n == 4
        && [PCAP_MAGIC_MICROS, PCAP_MAGIC_NANOS]
            .iter()
            .any(|m| *m == magic || m.swap_bytes() == magic))
}

fn bin_item(path: &Path) -> Result<Option<Item>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() {
        return Ok(None);
    }
    Ok(Some(Item {
        source: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        initiator: "-".into(),
        vector: fix_length(&bytes)?,
    }))
}

fn collect_items(args: &PredictArgs) -> Result<Vec<Item>> {
    let input = &args.input;
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("listing {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        let mut items = Vec::new();
        for f in &files {
            items.extend(bin_item(f)?);
        }
        return Ok(items);
    }
    if !is_pcap(input)? {
        return Ok(bin_item(input)?.into_iter().collect());
    }
    let capture = parse_pcap_file(input)?;
    let mut items = Vec::new();
    for s in split_sessions(capture.packets).into_values() {
        let payload = extract_payload(&s, args.direction.into());
        if payload.is_empty() {
            continue;
        }
        items.push(Item {
            source: format!("{} <-> {}", s.key.endpoint_a(), s.key.endpoint_b()),
            initiator: s.initiator_mac.to_string(),
            vector: fix_length(&payload)?,
        });
    }
    Ok(items)
}

fn load(args: &PredictArgs) -> Result<(ModelParams, ModelManifest)> {
    let dir = args.model.parent().unwrap_or(Path::new("."));
    if dir.join(EXPERIMENT_MANIFEST).is_file() && args.model.file_name() == Some(MODEL_FILE.as_ref()) {
        load_verified(dir, EXPERIMENT_MANIFEST, "experiment")?;
    }
    let file = File::open(&args.model).with_context(|| format!("opening {}", args.model.display()))?;
    let params = load_model(BufReader::new(file)).with_context(|| format!("{}", args.model.display()))?;
    let sidecar_path = args.model.with_extension("json");
    let sidecar_path = if sidecar_path.is_file() { sidecar_path } else { dir.join(MODEL_SIDECAR) };
    let text = fs::read_to_string(&sidecar_path).with_context(|| format!("reading {}", sidecar_path.display()))?;
    let sidecar: ModelManifest =
        serde_json::from_str(&text).with_context(|| format!("{}: malformed model manifest", sidecar_path.display()))?;
    if sidecar.hidden != params.shape().hidden || sidecar.outputs != params.outputs() {
        bail!("{}: shape does not match {}", sidecar_path.display(), args.model.display());
    }
    let classes = params.outputs().max(2);
    if sidecar.label_names.len() != classes {
        bail!(
            "{}: {} label names for a {}-class model",
            sidecar_path.display(),
            sidecar.label_names.len(),
            classes
        );
    }
    Ok((params, sidecar))
}

pub fn run(args: &PredictArgs) -> Result<()> {
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(UsageError(format!("--threshold must lie in [0, 1], got {t}")).into());
        }
    }
    let (params, sidecar) = load(args)?;
    let threshold = args.threshold.or(sidecar.threshold);
    let items = collect_items(args)?;
    if items.is_empty() {
        println!("no classifiable sessions in {}", args.input.display());
        return Ok(());
    }
    let vectors: Vec<PayloadVector> = items.iter().map(|i| i.vector.clone()).collect();
    let probs = predict_batch(&params, &vectors);

    let mut table = Table::new(&["#", "Session", "Initiator", "Verdict", "Posterior"]);
    let mut unknown = 0;
    for (n, (item, row)) in items.iter().zip(probs.rows()).enumerate() {
        let row = row.as_slice().expect("row-major");
        let label = decide(row);
        let posterior = match params.output_kind {
            OutputKind::Sigmoid => row[0].max(1.0 - row[0]),
            OutputKind::Softmax => row[label],
        };
        let verdict = match threshold {
            Some(t) if posterior <= t => {
                unknown += 1;
                iotprint::eval::UNKNOWN_LABEL.to_string()
            }
            _ => sidecar.label_names[label].clone(),
        };
        table.push(vec![
            (n + 1).to_string(),
            item.source.clone(),
            item.initiator.clone(),
            verdict,
            format!("{posterior:.4}"),
        ]);
    }
    print!("{}", table.render());
    match threshold {
        Some(t) => println!("{} sessions, {} below threshold {:.2}", items.len(), unknown, t),
        None => println!("{} sessions", items.len()),
    }
    if let Some(csv) = &args.csv {
        super::write_text(csv, &table.to_csv())?;
    }
    Ok(())
}
