//! Runs the five-stage ablation ladder and writes report.json, report.txt and
//! report.svg.
//!
//! `cargo run --release --example ablation_ladder -- desk out/` runs the
//! desk-scale preset; the default is the toy preset into a temp directory.

use platescope::config::RunConfig;
use platescope::ladder::{run_ablation_ladder, LadderReport};
use platescope::plate_data::generate_synthetic;

pub fn run_example(cfg: RunConfig, out: &std::path::Path) -> platescope::Result<LadderReport> {
    cfg.validate()?;
    let dataset = generate_synthetic(&cfg.synthetic)?;
    let report = run_ablation_ladder(&dataset, &cfg.ladder())?;
    report.write(out)?;
    print!("{}", report.to_text());
    println!("reports written to {}", out.display());
    Ok(report)
}

fn main() -> platescope::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = RunConfig::preset(&args.next().unwrap_or_else(|| "toy".into()))?;
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("platescope-ablation"));
    run_example(cfg, &out).map(|_| ())
}
