use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use piheart_core::orchestrator::{
    bridge_serve, generate_condition_orders, start_session, LogTarget, SessionConfig, SessionEvent, SessionHandle,
    SessionPhase, SessionPlan, SessionStatus,
};
use tokio::io::{AsyncBufReadExt, BufReader};

/// Run a session for one pair of devices: route heart rates by modality,
/// record the JSONL log and serve the operator console bridge.
///
/// While running, stdin accepts `modality <name>`, `movie <title>`, `next`,
/// `status`, `export <path>` and `stop`.
#[derive(Parser, Debug)]
#[command(version, args_conflicts_with_subcommands = true, subcommand_negates_reqs = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Plan file: one plan or a list of plans.
    #[arg(long, required = true)]
    plan: Option<PathBuf>,
    /// Pair to run when the plan file holds several.
    #[arg(long)]
    pair: Option<u32>,
    /// Device A broker, `addr` or `id@addr`.
    #[arg(long = "devA", required = true)]
    dev_a: Option<String>,
    /// Device B broker, `addr` or `id@addr`.
    #[arg(long = "devB", required = true)]
    dev_b: Option<String>,
    /// WebSocket bridge address for the console.
    #[arg(long)]
    ws: Option<String>,
    /// Session log; must not exist yet.
    #[arg(long, required = true)]
    log: Option<PathBuf>,
    /// Seconds to wait for each node to announce itself.
    #[arg(long, default_value_t = 3.0)]
    discovery_timeout: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write counterbalanced plans for a number of pairs.
    GeneratePlans {
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Some(Command::GeneratePlans { pairs, seed, out }) => generate(pairs, seed, out),
        None => run(cli.run).await,
    }
}

fn generate(pairs: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let plans = generate_condition_orders(pairs, seed)?;
    let json = serde_json::to_string_pretty(&plans)?;
    match out {
        Some(path) => std::fs::write(&path, json + "\n").with_context(|| format!("cannot write {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

async fn run(args: RunArgs) -> Result<()> {
    let (Some(plan_path), Some(dev_a), Some(dev_b), Some(log)) = (args.plan, args.dev_a, args.dev_b, args.log) else {
        bail!("--plan, --devA, --devB and --log are required");
    };
    let plan = SessionPlan::load(&plan_path, args.pair)
        .with_context(|| format!("cannot load plan from {}", plan_path.display()))?;
    let mut config = SessionConfig::new(plan, &dev_a, &dev_b, LogTarget::Path(log.clone()));
    config.discovery_timeout = Duration::from_secs_f64(args.discovery_timeout);

    let session = start_session(config).await?;
    let status = session.status();
    log::info!(
        "pair {} started: A={} B={}, segment 0 {} / {}, logging to {}",
        status.pair_id,
        status.device_ids[0],
        status.device_ids[1],
        status.movie,
        status.modality,
        log.display()
    );

    let bridge = match &args.ws {
        Some(addr) => {
            let bridge = bridge_serve(session.clone(), addr.as_str())?;
            log::info!("console bridge on ws://{}", bridge.local_addr());
            Some(bridge)
        }
        None => None,
    };

    let mut events = session.subscribe();
    let mut stdin = BufReader::new(tokio::io::stdin()).lines();
    let mut stdin_open = true;
    let finished = loop {
        tokio::select! {
            status = session.finished() => break status,
            _ = tokio::signal::ctrl_c() => {
                log::info!("interrupted, stopping session");
                break session.stop().await?;
            }
            line = stdin.next_line(), if stdin_open => match line? {
                Some(line) => {
                    if let Err(e) = command(&session, line.trim()).await {
                        log::error!("{e:#}");
                    }
                }
                None => stdin_open = false,
            },
            event = events.recv() => match event {
                Ok(event) => log_event(&event),
                Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => log::warn!("{n} events not shown"),
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break session.finished().await,
            },
        }
    };

    if let Some(bridge) = bridge {
        tokio::task::block_in_place(|| bridge.shutdown());
    }
    print_status(&finished);
    if finished.phase == SessionPhase::Failed {
        bail!("session failed: {}", finished.error.unwrap_or_default());
    }
    Ok(())
}

async fn command(session: &SessionHandle, line: &str) -> Result<()> {
    let (verb, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let rest = rest.trim();
    match verb {
        "" => {}
        "modality" => session.set_modality_str(rest).await?,
        "movie" => session.set_movie(rest).await?,
        "next" | "start" => {
            let segment = session.next_segment().await?;
            log::info!("segment {segment}");
        }
        "status" => print_status(&session.status()),
        "export" => {
            if rest.is_empty() {
                bail!("export needs a destination path");
            }
            let n = session.export_log(rest).await?;
            log::info!("exported {n} records to {rest}");
        }
        "stop" => {
            session.stop().await?;
        }
        other => bail!("unknown command {other:?} (modality, movie, next, status, export, stop)"),
    }
    Ok(())
}

fn log_event(event: &SessionEvent) {
    match event {
        SessionEvent::Hr { device, bpm, .. } => log::info!("hr {device} {bpm:.1}"),
        SessionEvent::BeatEvent { .. } => log::trace!("{event:?}"),
        SessionEvent::ModalityChange { value, .. } => log::info!("modality {value}"),
        SessionEvent::MovieChange { value, .. } => log::info!("movie {value}"),
        SessionEvent::Status { phase, error, .. } => match error {
            Some(e) => log::warn!("session {phase:?}: {e}"),
            None => log::info!("session {phase:?}"),
        },
    }
}

fn print_status(s: &SessionStatus) {
    let hr = |i: usize| s.latest_hr[i].map_or("-".to_string(), |(bpm, _)| format!("{bpm:.1}"));
    println!(
        "pair {} {:?} segment {} [{} / {}] A={} B={} hr_records={:?} beat_rates={:?} records={} write_errors={}",
        s.pair_id,
        s.phase,
        s.segment,
        s.movie,
        s.modality,
        hr(0),
        hr(1),
        s.hr_records,
        s.beat_rates_sent,
        s.records_written,
        s.write_errors
    );
    if let Some(e) = &s.error {
        println!("error: {e}");
    }
}
