use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use contrastlab::cli::{
    cmd_ablate, cmd_analyze, cmd_eval, cmd_pretrain, cmd_report, parse_protocol, threads_from_env, AblationAxis, AnalysisKind,
    ExperimentConfig,
};
use contrastlab::{LabError, Result};

#[derive(Parser, Debug)]
#[command(name = "lab", version, about = "Contrastive pretraining and transfer evaluation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// eval: linear (alias probe), finetune or fewshot; default all configured.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// ablate: alpha, queue_size, augmentation or epochs.
    #[arg(long, global = true)]
    axis: Option<String>,
    /// analyze: cka, calibration, separation, corruption, pgd or export;
    /// default all configured.
    #[arg(long, global = true)]
    analysis: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train every configured method and seed; write checkpoints.
    Pretrain,
    /// Score checkpoints on the target domains.
    Eval,
    /// CKA, calibration, separation, corruption, PGD and embedding export.
    Analyze,
    /// Pretrain and probe over one ablation axis.
    Ablate,
    /// Tables, CSVs and SVG curves from the record store.
    Report,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| LabError::Config("--config <file> is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Pretrain => {
            let c = load(cli)?;
            let n = cmd_pretrain(&c, &c.output_dir)?;
            info!("pretrain: {n} records");
        }
        Command::Eval => {
            let c = load(cli)?;
            let protocols = match &cli.protocol {
                Some(p) => vec![parse_protocol(p)?],
                None => c.protocols.clone(),
            };
            let n = cmd_eval(&c, &c.output_dir, &protocols)?;
            info!("eval: {n} records");
        }
        Command::Analyze => {
            let c = load(cli)?;
            let kinds = match &cli.analysis {
                Some(a) => vec![a.parse::<AnalysisKind>()?],
                None => c.analysis.kinds.clone(),
            };
            let n = cmd_analyze(&c, &c.output_dir, &kinds)?;
            info!("analyze: {n} records");
        }
        Command::Ablate => {
            let c = load(cli)?;
            let axis = match (&cli.axis, c.ablation.axis) {
                (Some(a), _) => a.parse::<AblationAxis>()?,
                (None, Some(a)) => a,
                (None, None) => return Err(LabError::Config("ablate needs --axis or ablation.axis".into())),
            };
            let n = cmd_ablate(&c, &c.output_dir, axis)?;
            info!("ablate {axis}: {n} records");
        }
        Command::Report => {
            let out = match (&cli.out, &cli.config) {
                (Some(o), _) => o.clone(),
                (None, Some(_)) => load(cli)?.output_dir,
                (None, None) => return Err(LabError::Config("report needs --out <dir> or --config <file>".into())),
            };
            for f in cmd_report(&out)?.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
