use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use piheart_core::bvp::{synthesize, write_csv, BvpConfig};

/// Generate a synthetic BVP recording as `t_ms,value` CSV.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Constant heart rate in bpm.
    #[arg(long, default_value_t = 72.0)]
    hr: f64,
    /// Length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Movement-artifact bursts per minute.
    #[arg(long, default_value_t = 0.0)]
    artifacts: f64,
    #[arg(long, default_value_t = 100.0)]
    sample_rate: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();

    let config = BvpConfig {
        sample_rate_hz: args.sample_rate,
        noise_sigma: args.noise,
        artifact_rate: args.artifacts,
        seed: args.seed,
        ..BvpConfig::constant(args.hr)
    };
    let samples = synthesize(&config, args.duration).context("invalid synthesis settings")?;

    let out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(out);
    write_csv(&samples, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.out {
        log::info!("wrote {} samples to {}", samples.len(), path.display());
    }
    Ok(())
}
