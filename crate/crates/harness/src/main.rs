use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use openm2m::codec::{encode_element, Format};
use openm2m::gateway::http;
use openm2m::store::{replay, EventLog};
use openm2m::{Gateway, GatewayConfig, Runtime};
use openm2m_harness::{run_scenario, Scenario};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "openm2m", version, about = "M2M gateway, fleet simulator and log tools")]
struct Cli {
    /// Output format for reports.
    #[arg(long, value_enum, default_value_t = OutputFormat::Json, global = true)]
    format: OutputFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway over HTTP.
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        log_path: Option<PathBuf>,
        /// TOML settings file; OPENM2M_* variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Execute a scenario file and print its report.
    Run {
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        scenario: Option<PathBuf>,
        /// Replaces the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild the snapshot from an event log and print its statistics.
    Replay { log: PathBuf },
    /// Parse an O&M observation and store it, locally or at a running gateway.
    Ingest {
        file: PathBuf,
        /// Address of a running gateway to POST to.
        #[arg(long)]
        listen: Option<String>,
        /// Local event log to append to when no gateway address is given.
        #[arg(long, conflicts_with = "listen")]
        log_path: Option<PathBuf>,
    },
}

fn render(v: &Value, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(v).expect("value serializes"),
        OutputFormat::Text => {
            let mut out = Vec::new();
            flatten("", v, &mut out);
            out.join("\n")
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    let key = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) if !m.is_empty() => m.iter().for_each(|(k, v)| flatten(&key(k), v, out)),
        Value::Array(a) if !a.is_empty() => a.iter().enumerate().for_each(|(i, v)| flatten(&key(&i.to_string()), v, out)),
        Value::String(s) => out.push(format!("{prefix}: {s}")),
        other => out.push(format!("{prefix}: {other}")),
    }
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn serve(listen: Option<String>, log_path: Option<PathBuf>, config: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = GatewayConfig::load(config.as_deref())?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if log_path.is_some() {
        cfg.log_path = log_path;
    }
    let gw = Arc::new(Gateway::open(cfg.clone(), Runtime::default())?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        tracing::info!(addr = %listener.local_addr()?, "gateway listening");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        http::serve(gw, listener, shutdown).await?;
        Ok(())
    })
}

fn replay_log(path: &Path) -> anyhow::Result<Value> {
    let bytes = read(path)?;
    let (log, intact) = EventLog::parse_jsonl(&bytes)?;
    let snap = replay(&log)?;
    Ok(json!({
        "events": log.entries.len(),
        "tornBytes": bytes.len() - intact,
        "lastSeq": snap.last_seq(),
        "elements": snap.element_count(),
        "entities": snap.entity_count(),
        "digest": snap.digest(),
    }))
}

fn ingest(file: &Path, listen: Option<String>, log_path: Option<PathBuf>) -> anyhow::Result<Value> {
    let xml = read(file)?;
    if let Some(addr) = listen {
        let base = if addr.starts_with("http") { addr } else { format!("http://{addr}") };
        let stored: Value = ureq::post(&format!("{base}/observations"))
            .header("Content-Type", "application/xml")
            .send(&xml[..])
            .with_context(|| format!("gateway at {base} unreachable"))?
            .body_mut()
            .read_json()?;
        let Some(id) = stored["elementId"].as_str() else { bail!("gateway answered without an elementId: {stored}") };
        let element: Value = ureq::get(&format!("{base}/elements/{id}"))
            .header("Accept", "application/json")
            .call()?
            .body_mut()
            .read_json()?;
        return Ok(json!({ "seq": stored["seq"], "element": element }));
    }
    let cfg = GatewayConfig { log_path, ..GatewayConfig::default() };
    let gw = Gateway::open(cfg, Runtime::default())?;
    let ev = gw.ingest_observation(&xml)?;
    let el = ev.element().expect("ingest stores an element");
    let element: Value = serde_json::from_slice(&encode_element(el, Format::Json))?;
    Ok(json!({ "seq": ev.seq, "element": element }))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { listen, log_path, config } => serve(listen, log_path, config).map(|()| None),
        Command::Run { file, scenario, seed } => (|| {
            let Some(path) = file.or(scenario) else { bail!("no scenario file given") };
            let mut s = Scenario::from_json(&read(&path)?)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            Ok(Some(serde_json::to_value(run_scenario(&s)?)?))
        })(),
        Command::Replay { log } => replay_log(&log).map(Some),
        Command::Ingest { file, listen, log_path } => ingest(&file, listen, log_path).map(Some),
    };
    match result {
        Ok(Some(v)) => {
            println!("{}", render(&v, cli.format));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
