use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use reasonseg::backends::conformance::{check_chat, check_embed, check_rejects_malformed, check_segment, CheckResult};
use reasonseg::backends::{HttpChat, HttpEmbed, HttpOptions, HttpSegment};

/// Check services against the wire protocol. Endpoints left unset are skipped.
#[derive(Parser)]
#[command(name = "reasonseg-conformance", version)]
struct Args {
    #[arg(long, env = "CHAT_URL")]
    chat_url: Option<String>,
    #[arg(long, env = "SEGMENT_URL")]
    segment_url: Option<String>,
    #[arg(long, env = "EMBED_URL")]
    embed_url: Option<String>,
    #[arg(long, default_value = "conformance")]
    chat_model: String,
    #[arg(long, default_value = "all-MiniLM-L6-v2")]
    embed_model: String,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    /// Print results as JSON lines
    #[arg(long)]
    json: bool,
}

fn main() -> anyhow::Result<ExitCode> {
    let args = Args::parse();
    let timeout = Duration::from_secs_f64(args.timeout_secs);
    let opts = HttpOptions {
        timeout,
        attempts: 1,
        ..HttpOptions::default()
    };
    let mut results: Vec<CheckResult> = Vec::new();
    if let Some(url) = &args.chat_url {
        results.extend(check_chat(&HttpChat::new(url, opts.clone())?, &args.chat_model));
        results.push(check_rejects_malformed("chat", url, timeout));
    }
    if let Some(url) = &args.segment_url {
        results.extend(check_segment(&HttpSegment::new(url, opts.clone())?));
        results.push(check_rejects_malformed("segment", url, timeout));
    }
    if let Some(url) = &args.embed_url {
        results.extend(check_embed(&HttpEmbed::new(url, opts.clone())?, &args.embed_model));
        results.push(check_rejects_malformed("embed", url, timeout));
    }
    if results.is_empty() {
        anyhow::bail!("no endpoints given; pass --chat-url, --segment-url or --embed-url");
    }
    for r in &results {
        if args.json {
            println!("{}", serde_json::to_string(r)?);
        } else {
            let mark = if r.passed { "PASS" } else { "FAIL" };
            println!("{mark} {}/{}: {}", r.endpoint, r.name, r.detail);
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
