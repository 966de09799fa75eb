//! `stylegap` command-line pipeline.

mod config;
mod layout;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stylegap::decomposition::EstimatorVariant;
use stylegap::inference::BootstrapMode;
use stylegap::report::{sha256_hex, ArtifactWriter, RunManifest};

use config::{RunConfig, Stage};
use layout::Layout;
use stages::Ctx;

const DEFAULT_OUT_DIR: &str = "stylegap-out";

#[derive(Parser)]
#[command(name = "stylegap", version, about = "Decompose group score gaps into content, style and scorer tilt")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed every stage seed derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Estimator variant: fe, ra or neutral.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<EstimatorVariant>,
    /// Bootstrap mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fast,
    Full,
}

fn parse_variant(s: &str) -> std::result::Result<EstimatorVariant, String> {
    s.parse().map_err(|e: stylegap::Error| e.to_string())
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Read an essays file, a versions file and a feature manifest.
    Ingest,
    /// Generate and verify rewrites through the chat endpoint.
    Rewrite,
    /// Merge verdicted rewrites and their features into the panel.
    Verify,
    /// Fit cross-fitted scorers for both groups.
    Train,
    Decompose,
    Diagnose,
    Bootstrap,
    /// Draw a synthetic world with known components.
    Simulate,
    /// Write tables and plot-data files.
    Report,
    /// Run the stages listed in the config.
    Run,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Ingest => Stage::Ingest,
            Command::Rewrite => Stage::Rewrite,
            Command::Verify => Stage::Verify,
            Command::Train => Stage::Train,
            Command::Decompose => Stage::Decompose,
            Command::Diagnose => Stage::Diagnose,
            Command::Bootstrap => Stage::Bootstrap,
            Command::Simulate => Stage::Simulate,
            Command::Report => Stage::Report,
            Command::Run => return None,
        })
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    stage: &'a str,
    kind: &'a str,
    message: String,
}

struct Failure {
    stage: String,
    error: anyhow::Error,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<stylegap::Error>())
        .map_or("internal", stylegap::Error::kind)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(v) = cli.variant {
        cfg.decompose.variant = v;
    }
    if let Some(m) = cli.mode {
        cfg.bootstrap.mode = match m {
            Mode::Fast => BootstrapMode::Fast,
            Mode::Full => BootstrapMode::Full,
        };
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn write_manifest(ctx: &Ctx, stages: &[Stage]) -> Result<()> {
    let layout = &ctx.layout;
    let mut manifest = RunManifest::new(stages.iter().map(|s| s.to_string()).collect());
    manifest.seeds = ctx.cfg.seeds();
    manifest.seeds.insert("seed".into(), ctx.cfg.seed);
    let resolved = std::fs::read(layout.resolved_config())?;
    manifest.config_sha256 = Some(sha256_hex(&resolved));
    let p = &ctx.cfg.paths;
    for path in [&p.essays, &p.versions, &p.manifest, &p.rewrite_features, &p.predictions, &p.provenance]
        .into_iter()
        .flatten()
    {
        if path.exists() {
            manifest.add_input(path)?;
        }
    }
    let mut writer = ArtifactWriter::new(layout.root())?;
    for rel in layout.artifact_files()? {
        writer.track(&rel)?;
    }
    writer.finish(manifest)?;
    Ok(())
}

fn execute(cfg: RunConfig, stages: &[Stage], out_dir: &Path) -> std::result::Result<(), Failure> {
    let fail = |stage: &str| {
        let stage = stage.to_string();
        move |error| Failure { stage, error }
    };
    let layout = Layout::new(out_dir);
    let ctx = Ctx { cfg, layout };
    ctx.cfg.validate_plan(stages, &ctx.layout).map_err(fail("config"))?;
    if let Some(n) = ctx.cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")
            .map_err(fail("config"))?;
    }
    (|| -> Result<()> {
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let _ = std::fs::remove_file(ctx.layout.error_record());
        let mut resolved = ctx.cfg.clone();
        resolved.stages = stages.to_vec();
        resolved.out_dir = None;
        resolved.workers = None;
        std::fs::write(ctx.layout.resolved_config(), resolved.to_toml()?)?;
        Ok(())
    })()
    .map_err(fail("config"))?;
    for &stage in stages {
        ctx.run(stage)
            .with_context(|| format!("stage {stage} failed"))
            .map_err(fail(stage.as_str()))?;
    }
    write_manifest(&ctx, stages).map_err(fail("manifest"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli);
    let out_dir = cfg
        .as_ref()
        .ok()
        .and_then(|c| c.out_dir.clone())
        .or_else(|| cli.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let result = cfg.map_err(|error| Failure {
        stage: "config".into(),
        error,
    });
    let result = result.and_then(|cfg| {
        let stages = match cli.command.stage() {
            Some(s) => vec![s],
            None => cfg.stages.clone(),
        };
        execute(cfg, &stages, &out_dir)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let record = ErrorRecord {
                stage: &f.stage,
                kind: if f.stage == "config" && error_kind(&f.error) == "internal" {
                    "config"
                } else {
                    error_kind(&f.error)
                },
                message: format!("{:#}", f.error),
            };
            eprintln!("error: {}", record.message);
            let write = std::fs::create_dir_all(&out_dir).and_then(|_| {
                let mut s = serde_json::to_string_pretty(&record).expect("error record serializes");
                s.push('\n');
                std::fs::write(out_dir.join("error.json"), s)
            });
            if let Err(e) = write {
                eprintln!("could not write error record: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
