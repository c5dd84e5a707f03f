use std::fs;

use anyhow::{Context, Result};
use iotprint::fixtures::{write_fixtures, FixtureSpec};

use crate::manifest::{PipelineManifest, FIXTURES_MANIFEST};
use crate::FixtureArgs;

pub fn run(args: &FixtureArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            FixtureSpec::from_toml(&text).with_context(|| format!("{}", path.display()))?
        }
        None => FixtureSpec::desk_scale(args.seed, args.sessions),
    };
    super::ensure_dir(&args.out)?;
    let written = write_fixtures(&spec, &args.out)?;

    let mut manifest = PipelineManifest::new("fixtures");
    manifest.seed = Some(spec.seed);
    manifest.config = serde_json::to_value(&spec)?;
    let mut files: Vec<String> = Vec::new();
    for p in written.pcaps.iter().chain([&written.mac_map, &written.spec]) {
        let rel = p.strip_prefix(&args.out).unwrap_or(p);
        files.push(rel.display().to_string());
    }
    manifest.add_outputs(&args.out, &files)?;
    manifest.write(&args.out, FIXTURES_MANIFEST)?;

    println!("wrote {} capture files to {}", written.pcaps.len(), args.out.display());
    for d in &spec.devices {
        println!("  {:<24} {:<8} {:>6} sessions  {}", d.name, d.kind, d.sessions, d.mac);
    }
    println!("MAC map: {}", written.mac_map.display());
    Ok(())
}
