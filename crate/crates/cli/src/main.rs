use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use reasonseg_cli::args::Cli;
use reasonseg_cli::exit;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let config = match cli.resolve() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&config) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::ERROR as u8)
        }
    }
}

fn run(config: &reasonseg::pipeline::RunConfig) -> anyhow::Result<i32> {
    let summary = reasonseg::pipeline::run(config).context("run failed")?;
    let r = &summary.report;
    println!("{} of {} images processed -> {}", r.succeeded, r.images, summary.out_dir.display());
    if let Some(s) = &r.semantic {
        println!("mIoU {:.4}  pixel accuracy {:.4}", s.miou, s.pixel_accuracy);
    }
    if let Some(p) = &r.panoptic {
        println!("PQ {:.4}  SQ {:.4}  RQ {:.4}", p.overall.pq, p.overall.sq, p.overall.rq);
    }
    for f in &r.failures {
        eprintln!("failed: {}: {}", f.image_id, f.error);
    }
    Ok(if r.failures.is_empty() { exit::OK } else { exit::PARTIAL })
}
