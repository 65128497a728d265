use std::net::ToSocketAddrs;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Parser;
use piheart_core::clock::ClockMode;
use piheart_core::estimator::SpectrumMode;
use piheart_core::mqtt::{broker_serve, BrokerConfig};
use piheart_core::node::{run_node, BvpSource, DeviceConfig};

/// Run one simulated heart display: BVP sampler, heart-rate estimator and
/// beat actuator, publishing under `piheart/<id>/...`.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Device id used in topic names.
    #[arg(long)]
    id: String,
    /// Broker address. The node serves its own broker here unless
    /// `--external-broker` is given.
    #[arg(long, default_value = "127.0.0.1:1884")]
    broker: String,
    /// Connect to an already running broker instead of embedding one.
    #[arg(long)]
    external_broker: bool,
    /// `synth:hr=72,noise=0.02,seed=1,artifacts=0` or `replay:<file.csv>`.
    #[arg(long, default_value = "synth:hr=72")]
    bvp: BvpSource,
    /// Signal-time acceleration; 1 runs in real time.
    #[arg(long, default_value_t = 1.0)]
    accel: f64,
    #[arg(long, default_value = "magnitude")]
    mode: SpectrumMode,
    /// Seconds between status lines on the log (0 disables).
    #[arg(long, default_value_t = 10)]
    status_every: u64,
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    if !(args.accel.is_finite() && args.accel > 0.0) {
        bail!("--accel must be positive, got {}", args.accel);
    }

    let broker = if args.external_broker {
        None
    } else {
        let bind = args
            .broker
            .to_socket_addrs()
            .with_context(|| format!("bad broker address {}", args.broker))?
            .next()
            .with_context(|| format!("{} resolves to nothing", args.broker))?;
        let broker = broker_serve(BrokerConfig::new(bind)).await?;
        log::info!("broker listening on {}", broker.local_addr());
        Some(broker)
    };
    let broker_addr = broker
        .as_ref()
        .map_or_else(|| args.broker.clone(), |b| b.local_addr().to_string());

    let clock = if args.accel == 1.0 {
        ClockMode::Wall
    } else {
        ClockMode::Accelerated(args.accel)
    };
    let mut config = DeviceConfig::new(&args.id, broker_addr, args.bvp).with_clock(clock);
    config.mode = args.mode;
    let mut node = run_node(config).await?;
    log::info!("node {} running", node.device_id());

    let mut ticker = tokio::time::interval(Duration::from_secs(args.status_every.max(1)));
    ticker.tick().await;
    let outcome = loop {
        tokio::select! {
            _ = tokio::signal::ctrl_c() => break None,
            result = node.wait() => break Some(result),
            _ = ticker.tick(), if args.status_every > 0 => {
                let s = node.status();
                log::info!(
                    "t={:.1}s hr={} published={} bpm_in={} beats={} dropped_samples={}",
                    s.signal_ms / 1000.0,
                    s.last_estimate.map_or("-".into(), |e| format!("{:.1}", e.bpm)),
                    s.hr_published,
                    s.current_bpm.map_or("-".into(), |b| format!("{b:.1}")),
                    s.beats_executed,
                    s.dropped_samples,
                );
            }
        }
    };

    match outcome {
        None => {
            log::info!("shutting down");
            node.shutdown().await?;
        }
        Some(result) => result.context("node stopped")?,
    }
    if let Some(broker) = broker {
        broker.shutdown().await;
    }
    Ok(())
}
