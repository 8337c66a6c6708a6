use std::io::{BufReader, IsTerminal};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcds_core::codec::ImageView;
use mcds_host::api::{self, SessionHandle};
use mcds_host::config::parse_u64;
use mcds_host::{export, shell, Command, ConfigError, Session};

/// Debug host for the mcds multi-core trace and calibration model.
#[derive(Parser)]
#[command(name = "mcds", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a session and run it until it breaks, finishes, or hits the cycle limit.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cycles: Option<u64>,
        /// Write the merged trace as .mtrc.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Also write the merged trace as JSON lines.
        #[arg(long)]
        jsonl_out: Option<PathBuf>,
    },
    /// Turn a .mtrc file into JSON lines and check program flow against an image.
    Decode {
        #[arg(long)]
        trace: PathBuf,
        /// Raw code image used to reconstruct program flow.
        #[arg(long)]
        image: PathBuf,
        /// Load address of the image.
        #[arg(long, default_value = "0", value_parser = addr)]
        base: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP/stream API and the XCP TCP transport.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        http: String,
        /// Overrides `transports.xcp_tcp` from the config.
        #[arg(long)]
        xcp_tcp: Option<String>,
    },
    /// Interactive command shell.
    Shell {
        #[arg(long)]
        config: PathBuf,
    },
}

fn addr(s: &str) -> Result<u32, String> {
    parse_u64(s).and_then(|v| u32::try_from(v).ok()).ok_or_else(|| format!("bad address `{s}`"))
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn load(config: &Path) -> Result<Session, ExitCode> {
    Session::load(config).map_err(|e: ConfigError| {
        eprintln!("{e}");
        ExitCode::from(CONFIG_ERROR)
    })
}

fn runtime(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(RUNTIME_ERROR)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}

fn real_main(cli: Cli) -> Result<(), ExitCode> {
    match cli.cmd {
        Cmd::Run { config, cycles, trace_out, jsonl_out } => {
            let mut s = load(&config)?;
            s.execute(&Command::Run { cycles }).map_err(runtime)?;
            if let Some(p) = trace_out {
                export::write_mtrc(&p, s.trace()).map_err(runtime)?;
            }
            if let Some(p) = jsonl_out {
                export::write_jsonl(&p, s.trace()).map_err(runtime)?;
            }
            println!("{}", serde_json::to_string(&s.state()).expect("state serializes"));
        }
        Cmd::Decode { trace, image, base, out } => {
            let d = export::read_mtrc(&trace).map_err(runtime)?;
            let img = std::fs::read(&image).map_err(|e| runtime(format!("{}: {e}", image.display())))?;
            for (offset, why) in &d.damaged {
                eprintln!("warning: damaged frame at byte {offset}: {why}");
            }
            export::write_jsonl(&out, &d.messages).map_err(runtime)?;
            for f in export::flow_summary(&d.messages, ImageView { base, bytes: &img }) {
                println!("{}", serde_json::to_string(&f).expect("summary serializes"));
            }
        }
        Cmd::Serve { config, http, xcp_tcp } => {
            let s = load(&config)?;
            let (cfg, _) = mcds_host::SessionConfig::load(&config).map_err(|_| ExitCode::from(CONFIG_ERROR))?;
            let xcp_addr = xcp_tcp.or(cfg.transports.xcp_tcp);
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&http).await.map_err(|e| runtime(format!("{http}: {e}")))?;
                let xcp = match &xcp_addr {
                    Some(a) => Some(tokio::net::TcpListener::bind(a).await.map_err(|e| runtime(format!("{a}: {e}")))?),
                    None => None,
                };
                eprintln!("http api on {}", listener.local_addr().map_err(runtime)?);
                if let Some(l) = &xcp {
                    eprintln!("xcp transport on {}", l.local_addr().map_err(runtime)?);
                }
                let handle = SessionHandle::spawn(s);
                tokio::select! {
                    r = api::serve(handle, listener, xcp) => r.map_err(runtime),
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })?;
        }
        Cmd::Shell { config } => {
            let mut s = load(&config)?;
            let stdin = std::io::stdin();
            let prompt = stdin.is_terminal();
            shell::run(&mut s, BufReader::new(stdin.lock()), std::io::stdout().lock(), prompt).map_err(runtime)?;
        }
    }
    Ok(())
}
