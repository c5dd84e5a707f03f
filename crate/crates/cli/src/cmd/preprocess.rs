use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use iotprint::dataset::allocate_split;
use iotprint::pipeline::{preprocess, MacMap, PreprocessOptions};

use crate::corpus;
use crate::manifest::{load_verified, PipelineManifest, CORPUS_MANIFEST, FIXTURES_MANIFEST};
use crate::table::Table;
use crate::PreprocessArgs;

/// Files as given, directories expanded to their `*.pcap` entries by name.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x.eq_ignore_ascii_case("pcap")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// The fixture manifest in an input directory, if there is one.
fn fixture_parent(inputs: &[PathBuf]) -> Result<Option<crate::manifest::ParentRef>> {
    for p in inputs.iter().filter(|p| p.is_dir()) {
        if p.join(FIXTURES_MANIFEST).is_file() {
            return Ok(Some(load_verified(p, FIXTURES_MANIFEST, "fixtures")?.as_parent()));
        }
    }
    Ok(None)
}

pub fn run(args: &PreprocessArgs) -> Result<()> {
    let files = expand_inputs(&args.inputs)?;
    let parent = fixture_parent(&args.inputs)?;
    let map = MacMap::load(&args.mac_map)?;
    let opts = PreprocessOptions {
        direction: args.direction.into(),
        dump_bins: args.dump_bins.clone(),
    };
    log::info!("preprocessing {} capture files", files.len());
    let pre = preprocess(&files, &map, &opts)?;

    super::ensure_dir(&args.out)?;
    let macs: Vec<Vec<String>> = pre
        .corpus
        .devices
        .iter()
        .map(|d| {
            map.entries()
                .iter()
                .filter(|e| e.device == d.name)
                .map(|e| e.mac.to_string())
                .collect()
        })
        .collect();
    let devices = corpus::write_devices(&args.out, &pre.corpus, &macs)?;

    let table = corpus_table(&pre, args.min_sessions);
    super::write_text(&args.out.join("corpus.txt"), &table.render())?;
    super::write_text(&args.out.join("corpus.csv"), &table.to_csv())?;

    let mut manifest = PipelineManifest::new("corpus");
    manifest.parent = parent;
    manifest.devices = devices;
    manifest.config = serde_json::json!({
        "direction": format!("{:?}", args.direction).to_lowercase(),
        "min_sessions": args.min_sessions,
        "packets": pre.packets,
        "skipped": {
            "udp": pre.skipped.udp,
            "other_ip_protocol": pre.skipped.other_ip_protocol,
            "ipv6": pre.skipped.ipv6,
            "non_ip": pre.skipped.non_ip,
            "fragment": pre.skipped.fragment,
            "truncated": pre.skipped.truncated,
            "unsupported_link": pre.skipped.unsupported_link,
        },
        "unmapped": pre.unmapped.iter().map(|(m, n)| (m.to_string(), *n)).collect::<Vec<_>>(),
    });
    for f in &files {
        manifest.add_input(f)?;
    }
    manifest.add_input(&args.mac_map)?;
    let mut outputs: Vec<String> = manifest.devices.iter().filter_map(|d| d.images.clone()).collect();
    outputs.extend(["corpus.txt".to_string(), "corpus.csv".to_string()]);
    manifest.add_outputs(&args.out, &outputs)?;
    manifest.write(&args.out, CORPUS_MANIFEST)?;

    print!("{}", table.render());
    println!(
        "{} files, {} TCP/IPv4 packets, {} records skipped",
        pre.files,
        pre.packets,
        pre.skipped.total()
    );
    if !pre.unmapped.is_empty() {
        let sessions: usize = pre.unmapped.iter().map(|(_, n)| n).sum();
        println!("unmapped: {} sessions from {} MAC addresses not in the map", sessions, pre.unmapped.len());
        for (mac, n) in &pre.unmapped {
            log::warn!("unmapped MAC {mac}: {n} sessions");
        }
    }
    println!("corpus written to {}", args.out.display());
    Ok(())
}

/// Per-device totals with the split each device would get. Devices at or
/// below the session minimum show `-` in the split columns.
fn corpus_table(pre: &iotprint::pipeline::Preprocessed, min_sessions: usize) -> Table {
    let kept: Vec<usize> = pre
        .stats
        .iter()
        .filter(|s| s.kept > min_sessions)
        .map(|s| s.kept)
        .collect();
    let mut plan = allocate_split(&kept).into_iter();
    let mut t = Table::new(&[
        "Device", "Kind", "Sessions", "Empty", "Duplicates", "Total", "Training", "Validation", "Test",
    ]);
    let mut sums = [0usize; 7];
    for s in &pre.stats {
        let split = if s.kept > min_sessions { plan.next() } else { None };
        let cells = [s.sessions, s.empty, s.duplicates, s.kept];
        for (acc, v) in sums.iter_mut().zip(cells) {
            *acc += v;
        }
        let mut row = vec![s.name.clone(), s.kind.to_string()];
        row.extend(cells.iter().map(|v| v.to_string()));
        match split {
            Some(c) => {
                sums[4] += c.train;
                sums[5] += c.validation;
                sums[6] += c.test;
                row.extend([c.train, c.validation, c.test].iter().map(|v| v.to_string()));
            }
            None => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
        }
        t.push(row);
    }
    let mut total = vec!["Total".to_string(), String::new()];
    total.extend(sums.iter().map(|v| v.to_string()));
    t.push(total);
    t
}
