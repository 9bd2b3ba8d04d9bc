//! Command-line runner binding detection, coherence, data construction and
//! evaluation into reproducible runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use editdiff_core::evalcomp::CorrelationUnit;
use tracing_subscriber::filter::LevelFilter;
use tracing_subscriber::EnvFilter;

use crate::commands::Context;
use crate::config::RunConfig;
use crate::error::{Outcome, Result, EXIT_ERROR};

#[derive(Debug, Parser)]
#[command(
    name = "editdiff",
    version,
    about = "Detect, judge and score differences between original and edited images"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for [`RunConfig`] fields. Precedence: flag, then environment,
/// then config file, then defaults.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Evaluation cases (JSONL).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Annotated image corpus (JSONL) for data construction.
    #[arg(long, global = true)]
    pub annotations: Option<PathBuf>,
    /// Directory of per-object masks for Stage-2 overlap checks.
    #[arg(long, global = true)]
    pub masks_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// OpenAI-compatible base URL used by every role without its own endpoint.
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    #[arg(long, global = true)]
    pub chat_model: Option<String>,
    #[arg(long, global = true)]
    pub embedding_model: Option<String>,
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Seed for Stage-2 sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seed for the random-area mask baseline.
    #[arg(long, global = true)]
    pub mask_seed: Option<u64>,
    #[arg(long, global = true)]
    pub edit_iou: Option<f64>,
    #[arg(long, global = true)]
    pub confidence_floor: Option<f64>,
    #[arg(long, global = true)]
    pub sim_threshold: Option<f64>,
    /// Mask fill colour as R,G,B.
    #[arg(long, global = true, value_parser = parse_rgb)]
    pub mask_fill: Option<[u8; 3]>,
    #[arg(long, global = true, value_enum)]
    pub correlation_unit: Option<Unit>,
    #[arg(long, global = true)]
    pub overlay_thickness: Option<u32>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Unit {
    PerCase,
    PerGroupMean,
}

fn parse_rgb(s: &str) -> std::result::Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [r, g, b] = parts.as_slice() else {
        return Err(format!("expected R,G,B, got {s:?}"));
    };
    let c = |v: &str| {
        v.parse::<u8>()
            .map_err(|_| format!("{v:?} is not a channel value 0-255"))
    };
    Ok([c(r)?, c(g)?, c(b)?])
}

fn parse_run(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((m, d)) if !m.is_empty() && !d.is_empty() => Ok((m.to_string(), PathBuf::from(d))),
        _ => Err(format!("expected MODEL=DIR, got {s:?}")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine Stage-1 image pairs and label their differences.
    MinePairs,
    /// Build the Stage-2 inpainting manifest.
    BuildStage2,
    /// Run the difference detector over every case.
    Detect,
    /// Judge the coherence of each detected difference.
    Coherence {
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    EvalDetect {
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Coherence accuracy over ground-truth areas and AP over detected areas.
    EvalPipeline {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
    /// Rank editing models from their per-model run directories.
    Rank {
        /// MODEL=DIR, repeatable.
        #[arg(long = "run", value_parser = parse_run, required = true)]
        runs: Vec<(String, PathBuf)>,
    },
    /// Correlate masked similarity metrics with human ratings.
    Correlate {
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        verdicts: Option<PathBuf>,
    },
    /// Consolidate evaluation outputs into report.txt.
    Report {
        /// Run directory; defaults to the output directory.
        dir: Option<PathBuf>,
    },
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut cfg.dataset, &self.dataset);
        set(&mut cfg.annotations, &self.annotations);
        set(&mut cfg.masks_dir, &self.masks_dir);
        set(&mut cfg.cache_dir, &self.cache_dir);
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.base_url {
            cfg.endpoints.base_url = Some(v.clone());
        }
        if let Some(v) = &self.chat_model {
            cfg.endpoints.chat_model = v.clone();
        }
        if let Some(v) = &self.embedding_model {
            cfg.endpoints.embedding_model = v.clone();
        }
        if let Some(v) = self.concurrency {
            cfg.concurrency = v;
        }
        if let Some(v) = self.seed {
            cfg.seeds.stage2 = v;
        }
        if let Some(v) = self.mask_seed {
            cfg.seeds.random_mask = v;
        }
        if let Some(v) = self.edit_iou {
            cfg.thresholds.edit_iou = v;
        }
        if let Some(v) = self.confidence_floor {
            cfg.thresholds.confidence_floor = v;
        }
        if let Some(v) = self.sim_threshold {
            cfg.thresholds.sim_threshold = v;
        }
        if let Some(v) = self.mask_fill {
            cfg.mask_fill = v;
        }
        if let Some(u) = self.correlation_unit {
            cfg.correlation_unit = match u {
                Unit::PerCase => CorrelationUnit::PerCase,
                Unit::PerGroupMean => CorrelationUnit::PerGroupMean,
            };
        }
        if let Some(v) = self.overlay_thickness {
            cfg.overlay_thickness = v;
        }
    }
}

/// Resolves the configuration from file, environment and flags.
pub fn resolve_config(common: &CommonArgs, env: impl Fn(&str) -> Option<String>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(env)?;
    common.apply(&mut cfg);
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    let cfg = resolve_config(&cli.common, |k| std::env::var(k).ok())?;
    if let Command::Report { dir } = &cli.command {
        let dir = dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
        return commands::report(&dir);
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::MinePairs => commands::mine_pairs(&ctx),
        Command::BuildStage2 => commands::build_stage2(&ctx),
        Command::Detect => commands::detect(&ctx),
        Command::Coherence { detections } => commands::coherence(&ctx, detections.as_deref()),
        Command::EvalDetect { detections } => commands::eval_detect(&ctx, detections.as_deref()),
        Command::EvalPipeline { detections, verdicts } => {
            commands::eval_pipeline(&ctx, detections.as_deref(), verdicts.as_deref())
        }
        Command::Rank { runs } => commands::rank(&ctx, &runs),
        Command::Correlate { detections, verdicts } => {
            commands::correlate(&ctx, detections.as_deref(), verdicts.as_deref())
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::builder()
                .with_default_directive(LevelFilter::WARN.into())
                .with_env_var("EDITDIFF_LOG")
                .from_env_lossy(),
        )
        .try_init();
    match dispatch(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_env_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "concurrency = 2\n[thresholds]\nedit_iou = 0.4\n").unwrap();
        let cli = Cli::try_parse_from([
            "editdiff",
            "--config",
            file.to_str().unwrap(),
            "--edit-iou",
            "0.7",
            "detect",
        ])
        .unwrap();
        let env = |k: &str| (k == "EDITDIFF_CONCURRENCY").then(|| "8".to_string());
        let cfg = resolve_config(&cli.common, env).unwrap();
        assert_eq!(cfg.concurrency, 8);
        assert_eq!(cfg.thresholds.edit_iou, 0.7);
    }

    #[test]
    fn run_spec_parsing() {
        assert_eq!(parse_run("a=out/a").unwrap(), ("a".to_string(), PathBuf::from("out/a")));
        assert!(parse_run("noequals").is_err());
        assert!(parse_run("=dir").is_err());
        assert_eq!(parse_rgb("255, 0,7").unwrap(), [255, 0, 7]);
        assert!(parse_rgb("1,2").is_err());
    }

    #[test]
    fn api_key_is_not_a_flag() {
        assert!(Cli::try_parse_from(["editdiff", "--api-key", "x", "detect"]).is_err());
    }
}
