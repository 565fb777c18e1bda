use ones::workbench::{run_pipeline, ExperimentConfig};

// End-to-end run: teach, dense baselines, gather, distil, compare.
// Usage: cargo run --release --example pipeline [preset] [seed]

fn main() -> ones::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let preset = args.first().map_or("smoke", String::as_str);
    let mut cfg = ExperimentConfig::preset(preset)?;
    if let Some(seed) = args.get(1) {
        cfg.set_seed(
            seed.parse()
                .map_err(|_| ones::Error::Argument(format!("bad seed {seed}")))?,
        );
    }
    cfg.output_dir = std::env::temp_dir().join(format!("ones-{preset}-{}", cfg.seed));

    let summary = run_pipeline(&cfg)?;
    print!("{}", summary.to_csv());
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}
