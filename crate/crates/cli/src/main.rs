//! `dfs`: pretrain, gate training, evaluation, sweeps and decision reports.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use dfs_core::analytics::{run_sweep, DecisionReport};
use dfs_core::executor::{evaluate, DecisionTrace, Routing};
use dfs_core::trainer::{plain_accuracy, pretrain_backbone, train_step_one, train_step_two};
use dfs_core::DfsError;

use config::{Config, ConfigError, RoutingConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "dfs", version, about = "Dynamic fractional skipping toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// Override the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the stage named in the configuration.
    Run(Common),
    Pretrain(Common),
    Step1(Common),
    Step2(Common),
    Eval(Common),
    Sweep(Common),
    Report(Common),
}

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Diverged { msg: String, log: PathBuf },
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<DfsError>() {
            Some(DfsError::Config(_) | DfsError::Usage(_) | DfsError::Input(_)) => Failure::Config(format!("{e:#}")),
            _ => match e.downcast_ref::<ConfigError>() {
                Some(_) => Failure::Config(format!("{e:#}")),
                None => Failure::Other(e),
            },
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Run(c) => (None, c),
        Command::Pretrain(c) => (Some(Stage::Pretrain), c),
        Command::Step1(c) => (Some(Stage::Step1), c),
        Command::Step2(c) => (Some(Stage::Step2), c),
        Command::Eval(c) => (Some(Stage::Eval), c),
        Command::Sweep(c) => (Some(Stage::Sweep), c),
        Command::Report(c) => (Some(Stage::Report), c),
    };
    match execute(stage, &common) {
        Ok(dir) => {
            println!("artifacts in {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged { msg, log }) => {
            eprintln!("error: {msg}; see {}", log.display());
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn execute(stage_override: Option<Stage>, common: &Common) -> Result<PathBuf, Failure> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(s) = stage_override {
        cfg.stage = Some(s);
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let stage = cfg.validate()?;
    let hash = cfg.hash().map_err(anyhow::Error::from)?;
    let dir = common.out.join(format!("{}-{}", stage.name(), &hash[..16]));
    prepare_dir(&dir, common.force)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&cfg).context("serializing config")?)
        .context("writing config.json")?;
    let log_path = dir.join("log.jsonl");
    let result = match stage {
        Stage::Pretrain => cmd_pretrain(&cfg, &dir, &log_path),
        Stage::Step1 | Stage::Step2 => cmd_step(&cfg, stage, &dir, &log_path),
        Stage::Eval => cmd_eval(&cfg, &dir),
        Stage::Sweep => cmd_sweep(&cfg, &dir),
        Stage::Report => cmd_report(&cfg, &dir),
    };
    match result {
        Ok(()) => Ok(dir),
        Err(e) => match e.downcast_ref::<DfsError>() {
            Some(DfsError::Divergence { .. } | DfsError::Numeric { .. }) => Err(Failure::Diverged {
                msg: format!("{e:#}"),
                log: log_path,
            }),
            _ => Err(e.into()),
        },
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !force {
            return Err(Failure::Config(format!(
                "run directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_pretrain(cfg: &Config, dir: &Path, log_path: &Path) -> anyhow::Result<()> {
    let (train, test) = cfg.datasets()?;
    let mut model = cfg.model()?;
    let pre = cfg.pretrain.as_ref().expect("validated");
    let mut log = BufWriter::new(File::create(log_path)?);
    let report = pretrain_backbone(&mut model, pre, &train, Some(&test), Some(&mut log))?;
    log.flush()?;
    model.save(&dir.join("model.ckpt"))?;
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "pretrain: final loss {:.4}, test accuracy {:.4}",
        report.final_loss,
        report.test_accuracy.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_step(cfg: &Config, stage: Stage, dir: &Path, log_path: &Path) -> anyhow::Result<()> {
    let (train, test) = cfg.datasets()?;
    let mut model = cfg.model()?;
    let init = cfg.init_checkpoint.as_ref().expect("validated");
    let run = cfg.run.as_ref().expect("validated");
    let mut log = BufWriter::new(File::create(log_path)?);
    let report = if stage == Stage::Step1 {
        model.load_backbone(init).with_context(|| format!("loading init_checkpoint {}", init.display()))?;
        train_step_one(&mut model, run, &train, Some(&test), Some(&mut log))?
    } else {
        model.load_all(init).with_context(|| format!("loading init_checkpoint {}", init.display()))?;
        train_step_two(&mut model, run, &train, Some(&test), Some(&mut log))?
    };
    log.flush()?;
    model.save(&dir.join("model.ckpt"))?;
    let eval = report.eval.as_ref().expect("test split supplied");
    eval.trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    write_json(&dir.join("report.json"), &report.summary(run))?;
    if report.oscillation_warning {
        eprintln!("warning: cp swings more than 10 points around the target in the final phase");
    }
    println!(
        "{}: target cp {:.4}, actual cp {:.4}, accuracy {:.4}",
        stage.name(),
        run.target_cp,
        eval.mean_cp,
        eval.accuracy
    );
    Ok(())
}

fn cmd_eval(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let (_, test) = cfg.datasets()?;
    let mut model = cfg.model()?;
    let ckpt = cfg.init_checkpoint.as_ref().expect("validated");
    model.load_all(ckpt).with_context(|| format!("loading init_checkpoint {}", ckpt.display()))?;
    let e = cfg.eval.clone().unwrap_or_default();
    let result = match &e.routing {
        RoutingConfig::Learned => evaluate(&mut model, &test, Routing::Learned, e.batch_size)?,
        RoutingConfig::Static(a) => evaluate(&mut model, &test, Routing::Static(a), e.batch_size)?,
    };
    let plain = plain_accuracy(&mut model, &test, e.batch_size)?;
    result.trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    write_json(
        &dir.join("report.json"),
        &serde_json::json!({
            "actual_cp": result.mean_cp,
            "accuracy": result.accuracy,
            "plain_accuracy": plain,
        }),
    )?;
    println!("eval: cp {:.4}, accuracy {:.4} (all-keep backbone {:.4})", result.mean_cp, result.accuracy, plain);
    Ok(())
}

fn cmd_sweep(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let (train, test) = cfg.datasets()?;
    let mut model = cfg.model()?;
    let init = cfg.init_checkpoint.as_ref().expect("validated");
    model.load_all(init).with_context(|| format!("loading init_checkpoint {}", init.display()))?;
    let run = cfg.run.as_ref().expect("validated");
    let targets = cfg.targets.as_deref().unwrap_or_default();
    let mut result = run_sweep(&model, run, targets, &train, &test, Some(dir))?;
    result.metadata.config_hash = cfg.hash()?;
    result.metadata.git_revision = git_revision();
    result.metadata.created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    result.write_csv(BufWriter::new(File::create(dir.join("sweep.csv"))?))?;
    write_json(&dir.join("sweep_meta.json"), &result.metadata)?;
    if cfg.svg {
        fs::write(dir.join("sweep.svg"), result.svg())?;
    }
    for e in &result.entries {
        println!("target {:.3}: cp {:.4}, accuracy {:.4}", e.target_cp, e.actual_cp, e.accuracy);
    }
    Ok(())
}

fn cmd_report(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let path = cfg.trace.as_ref().expect("validated");
    let file = File::open(path).map_err(|e| DfsError::Input(format!("trace {}: {e}", path.display())))?;
    let trace = DecisionTrace::read_csv(BufReader::new(file))?;
    let report = DecisionReport::from_trace(&trace, cfg.group_size())?;
    report.write_csv(BufWriter::new(File::create(dir.join("report.csv"))?))?;
    let summary = report.summary();
    fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}
