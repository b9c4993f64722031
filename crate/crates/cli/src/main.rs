use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ptcp::harness::{run_experiment, summarize_dir, ConfigError, Execution, ExperimentConfig, HarnessError};
use ptcp::striping::{
    send_transfer_with, serve_with, DirSink, FailureKind, Outcome, ReceiverConfig, SendOptions, ServeEvent,
};
use ptcp::transport::{TcpAcceptor, TcpConnector};

const EXIT_OK: u8 = 0;
const EXIT_NETWORK: u8 = 2;
const EXIT_TRANSFER: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "ptcp", version, about = "Striped parallel-stream transfers and bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Send a file to a receiver over several parallel connections.
    Send {
        /// Receiver address, HOST:PORT.
        #[arg(long)]
        to: String,
        #[arg(long)]
        file: PathBuf,
        /// Number of parallel connections.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
        streams: u32,
        /// Seconds to wait for the receiver's acknowledgement.
        #[arg(long, default_value_t = 30)]
        timeout_s: u64,
    },
    /// Receive transfers and store each one under its transfer id.
    Recv {
        /// Address to listen on.
        #[arg(long, default_value = "0.0.0.0:5201")]
        listen: String,
        /// Directory for received payloads.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Exit after the first transfer completes or fails.
        #[arg(long)]
        once: bool,
        /// Seconds without progress before a transfer is abandoned.
        #[arg(long, default_value_t = 30)]
        idle_timeout_s: u64,
    },
    /// Run a parallelism sweep described by a key=value config file.
    Experiment {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run sweep points one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Summarize the CSVs an experiment wrote.
    Report { dir: PathBuf },
}

fn usage(msg: impl std::fmt::Display) -> u8 {
    eprintln!("ptcp: {msg}");
    EXIT_USAGE
}

fn send(to: &str, file: &Path, streams: u32, timeout_s: u64) -> u8 {
    let payload = match std::fs::read(file) {
        Ok(p) => p,
        Err(e) => return usage(format_args!("cannot read {}: {e}", file.display())),
    };
    let connector = match TcpConnector::new(to) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ptcp: cannot resolve {to}: {e}");
            return EXIT_NETWORK;
        }
    };
    let options = SendOptions { idle_timeout: Duration::from_secs(timeout_s), ..SendOptions::default() };
    let report = match send_transfer_with(&payload, &connector, streams as usize, &options) {
        Ok(r) => r,
        Err(e) => return usage(e),
    };
    let status = match &report.outcome {
        Outcome::Success => "ok",
        Outcome::Failure(_) => "failed",
    };
    println!(
        "transfer {} size={} streams={} sent={} wall_s={:.6} throughput_bps={:.0} status={status}",
        report.transfer_id,
        report.total_size,
        streams,
        report.bytes_sent,
        report.wall_time.as_secs_f64(),
        report.throughput() * 8.0,
    );
    for c in &report.per_connection {
        println!(
            "  chunk {} bytes={} start_s={:.6} end_s={:.6}",
            c.chunk_index,
            c.bytes,
            c.start.as_secs_f64(),
            c.end.as_secs_f64()
        );
    }
    match report.outcome {
        Outcome::Success => EXIT_OK,
        Outcome::Failure(f) => {
            eprintln!("ptcp: chunk {}: {}", f.chunk_index, f.message);
            if f.kind == FailureKind::Connect {
                EXIT_NETWORK
            } else {
                EXIT_TRANSFER
            }
        }
    }
}

fn recv(listen: &str, out: PathBuf, once: bool, idle_timeout_s: u64) -> u8 {
    let acceptor = match TcpAcceptor::bind(listen) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("ptcp: cannot listen on {listen}: {e}");
            return EXIT_NETWORK;
        }
    };
    let mut sink = match DirSink::new(&out) {
        Ok(s) => s,
        Err(e) => return usage(format_args!("cannot use {}: {e}", out.display())),
    };
    if let Ok(addr) = acceptor.local_addr() {
        eprintln!("listening on {addr}");
    }
    let config = ReceiverConfig { idle_timeout: Duration::from_secs(idle_timeout_s), ..ReceiverConfig::default() };
    let mut code = EXIT_OK;
    let result = serve_with(&acceptor, &mut sink, &config, |event| {
        match event {
            ServeEvent::Completed(t) => {
                println!(
                    "received {} size={} streams={} elapsed_s={:.6} digest={}",
                    t.transfer_id,
                    t.total_size,
                    t.connection_count,
                    t.elapsed.as_secs_f64(),
                    t.payload_digest
                );
                code = EXIT_OK;
            }
            ServeEvent::Failed { transfer_id, error } => {
                eprintln!("failed {transfer_id}: {error}");
                code = EXIT_TRANSFER;
            }
            ServeEvent::ConnectionError(error) => {
                eprintln!("connection error: {error}");
                return ControlFlow::Continue(());
            }
        }
        if once {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    match result {
        Ok(()) => code,
        Err(e) => {
            eprintln!("ptcp: {e}");
            EXIT_NETWORK
        }
    }
}

fn experiment(path: &Path, out: Option<PathBuf>, sequential: bool) -> u8 {
    let mut config = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(ConfigError::Io(e)) => return usage(format_args!("cannot read {}: {e}", path.display())),
        Err(e) => return usage(format_args!("{}: {e}", path.display())),
    };
    if let Some(out) = out {
        config.output_dir = out;
    }
    let execution = if sequential { Execution::Sequential } else { Execution::default() };
    let result = run_experiment(&config, execution).and_then(|r| {
        r.write(&config.output_dir, &config)?;
        Ok(r)
    });
    match result {
        Ok(r) => {
            eprintln!("wrote {} rows to {}", r.throughput.len(), config.output_dir.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("ptcp: {e}");
            match e {
                HarnessError::Network(_) => EXIT_NETWORK,
                HarnessError::TransferFailed(_) => EXIT_TRANSFER,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn report(dir: &Path) -> u8 {
    match summarize_dir(dir) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => usage(format_args!("{}: {e}", dir.display())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    let code = match cli.command {
        Command::Send { to, file, streams, timeout_s } => send(&to, &file, streams, timeout_s),
        Command::Recv { listen, out, once, idle_timeout_s } => recv(&listen, out, once, idle_timeout_s),
        Command::Experiment { config, out, sequential } => experiment(&config, out, sequential),
        Command::Report { dir } => report(&dir),
    };
    ExitCode::from(code)
}
