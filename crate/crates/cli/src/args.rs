use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use reasonseg::composer::PromptStyle;
use reasonseg::pipeline::{Precision, RunConfig};

/// Reason-guided open-vocabulary segmentation over a dataset manifest.
///
/// Settings come from defaults, then `--config`, then flags and environment.
#[derive(Debug, Clone, Parser)]
#[command(name = "reasonseg", version)]
pub struct Cli {
    /// JSON config file; every flag has a field of the same name (dashes as underscores)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (required here or in the config file)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// class-name, coarse, coarse-att or att [default: att]
    #[arg(long, value_parser = parse_style)]
    pub prompt_style: Option<PromptStyle>,
    /// Cosine similarity an observed name must exceed to map onto the vocabulary [default: 0.5]
    #[arg(long, allow_negative_numbers = true, value_parser = closed(-1.0, 1.0))]
    pub sigma_align: Option<f64>,
    /// Mask threshold, strictly between 0 and 1 [default: 0.5]
    #[arg(long, value_parser = open_unit)]
    pub tau: Option<f64>,
    /// Chat sampling temperature [default: 0.7]
    #[arg(long, allow_negative_numbers = true, value_parser = closed(0.0, 2.0))]
    pub temperature: Option<f64>,
    /// Total reasoning attempts per step before falling back [default: 3]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub retries: Option<u32>,
    /// Do not run generic reasoning; unobserved classes keep class-name prompts
    #[arg(long)]
    pub skip_generic: bool,
    /// Only classes whose own mask fires compete for a pixel
    #[arg(long)]
    pub strict_eq10: bool,
    /// Full URL of the chat endpoint
    #[arg(long, env = "CHAT_URL")]
    pub chat_url: Option<String>,
    /// Full URL of the segmentation endpoint
    #[arg(long, env = "SEGMENT_URL")]
    pub segment_url: Option<String>,
    /// Full URL of the embedding endpoint
    #[arg(long, env = "EMBED_URL")]
    pub embed_url: Option<String>,
    /// Model name sent to the chat service
    #[arg(long)]
    pub chat_model: Option<String>,
    /// Model name sent to the embedding service [default: all-MiniLM-L6-v2]
    #[arg(long)]
    pub embed_model: Option<String>,
    /// Use the built-in mock services with fixtures from this directory
    #[arg(long, value_name = "FIXTURE_DIR")]
    pub mock: Option<PathBuf>,
    /// Persist service responses here and replay them on later runs
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Write color overlays of the label maps
    #[arg(long)]
    pub overlay: bool,
    /// Write per-class score maps
    #[arg(long)]
    pub dump_scores: bool,
    /// Also write report.csv
    #[arg(long)]
    pub csv: bool,
    /// Worker threads [default: 1]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    /// Abort on the first failing image
    #[arg(long)]
    pub fail_fast: bool,
    /// Scalar type for ensembling and alignment: f32 or f64 [default: f64]
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Ask for attributes one class at a time
    #[arg(long)]
    pub step3_per_class: bool,
    /// Per-request HTTP timeout [default: 120]
    #[arg(long, value_parser = positive)]
    pub timeout_secs: Option<f64>,
    /// Total attempts per HTTP call [default: 3]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub http_attempts: Option<u32>,
    /// Concurrent requests per service [default: 8]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_in_flight: Option<u64>,
    /// Extra request header, e.g. `--header authorization=Bearer...`; repeatable
    #[arg(long = "header", value_name = "NAME=VALUE", value_parser = parse_header)]
    pub headers: Vec<(String, String)>,
    /// More log output; repeat for more
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_style(s: &str) -> Result<PromptStyle, String> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("unknown precision {s:?} (expected f32 or f64)")),
    }
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"))
}

fn closed(lo: f64, hi: f64) -> impl Fn(&str) -> Result<f64, String> + Clone {
    move |s| {
        let v = parse_f64(s)?;
        if (lo..=hi).contains(&v) {
            Ok(v)
        } else {
            Err(format!("{v} is out of range [{lo}, {hi}]"))
        }
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is out of range (0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn parse_header(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(format!("{s:?} is not NAME=VALUE")),
    }
}

impl Cli {
    /// Merges defaults, the config file and the flags, then validates.
    pub fn resolve(&self) -> Result<RunConfig, clap::Error> {
        let mut cmd = Cli::command();
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(|e| cmd.error(ErrorKind::InvalidValue, e.to_string()))?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        take!(manifest, out_dir, prompt_style, sigma_align, tau, temperature, retries);
        take!(chat_url, segment_url, embed_url, chat_model, embed_model, mock, cache_dir);
        take!(precision, timeout_secs, http_attempts);
        if let Some(j) = self.jobs {
            cfg.jobs = j as usize;
        }
        if let Some(m) = self.max_in_flight {
            cfg.max_in_flight = m as usize;
        }
        macro_rules! flag {
            ($($field:ident),*) => {$( cfg.$field |= self.$field; )*};
        }
        flag!(skip_generic, strict_eq10, overlay, dump_scores, csv, fail_fast, step3_per_class);
        cfg.headers.extend(self.headers.iter().cloned());

        if cfg.manifest.is_none() {
            return Err(cmd.error(
                ErrorKind::MissingRequiredArgument,
                "the following required argument was not provided:\n  --manifest <MANIFEST>",
            ));
        }
        cfg.validate().map_err(|e| cmd.error(ErrorKind::ValueValidation, e.to_string()))?;
        Ok(cfg)
    }
}
