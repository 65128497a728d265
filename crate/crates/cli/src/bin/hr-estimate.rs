use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use piheart_core::bvp::{read_csv, replay};
use piheart_core::estimator::{EstimatorConfig, SlidingWindow, SpectrumMode, StreamError};

/// Estimate heart rate from a BVP CSV recording with the streaming STFT.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Input CSV (`t_ms,value`); `-` reads stdin.
    #[arg(long = "in")]
    input: PathBuf,
    /// Spectral selection: `magnitude` or `real-part`.
    #[arg(long, default_value = "magnitude")]
    mode: SpectrumMode,
    /// One JSON object per estimate instead of a table.
    #[arg(long)]
    emit_jsonl: bool,
    #[arg(long, default_value_t = 100.0)]
    sample_rate: f64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();

    let samples = if args.input.as_os_str() == "-" {
        read_csv(io::stdin().lock())
    } else {
        replay(&args.input)
    }
    .with_context(|| format!("cannot read {}", args.input.display()))?;

    let config = EstimatorConfig::from_seconds(args.sample_rate, 30.0, 0.75);
    let mut window = SlidingWindow::new(config);
    let mut out = BufWriter::new(io::stdout().lock());
    if !args.emit_jsonl {
        writeln!(out, "t_ms\tbpm\tbin")?;
    }
    let mut count = 0usize;
    for sample in samples {
        let estimate = match window.push_sample(sample, args.mode) {
            Ok(e) => e,
            Err(StreamError::Gap { previous, got, missing }) => {
                log::warn!("gap of {missing} samples between {previous} and {got} ms, restarting window");
                window.reset();
                window.push_sample(sample, args.mode)?
            }
            Err(e) => return Err(e.into()),
        };
        let Some(e) = estimate else { continue };
        count += 1;
        if args.emit_jsonl {
            let line = serde_json::json!({
                "t_ms": e.window_end_t_ms,
                "bpm": e.bpm,
                "bin": e.bin_index,
                "mode": e.mode.as_str(),
            });
            writeln!(out, "{line}")?;
        } else {
            writeln!(out, "{}\t{:.1}\t{}", e.window_end_t_ms, e.bpm, e.bin_index)?;
        }
    }
    out.flush()?;
    if count == 0 {
        log::warn!("recording shorter than one {}-sample window", config.window_len);
    }
    Ok(())
}
