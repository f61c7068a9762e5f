use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use reasonseg::pipeline::fixtures::load_mock_services;
use reasonseg_cli::serve::MockServer;

/// Serve mock fixtures over HTTP at /chat, /segment and /embed.
#[derive(Parser)]
#[command(name = "reasonseg-mock-server", version)]
struct Args {
    /// Fixture directory (same layout as `reasonseg --mock`)
    #[arg(long)]
    mock: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let services = load_mock_services(&args.mock)?;
    let server = MockServer::start(services, &args.addr, args.workers).with_context(|| format!("bind {}", args.addr))?;
    println!("serving on http://{}", server.addr());
    server.join();
    Ok(())
}
