//! `clarify` command-line pipeline.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 numeric failure.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clarify::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "clarify", version, about = "Cloze plausibility pipeline on a tiny RTD-pretrained encoder")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// `key = value` config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set finetune.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic pre-training corpus and task splits.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the discriminator with replaced token detection.
    Pretrain {
        /// Directory written by `gen-synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on the task; `--grid` runs every learning rate x batch size.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `{train,dev}.tsv` and their label or score files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: bool,
        /// Parallel grid workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write `<model-id>.tsv` predictions for an instance file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Defaults to the name of the checkpoint's directory.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Standard and pattern-aware ensembles. Model ids come from file stems.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        dev: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        test: Vec<PathBuf>,
        #[arg(long)]
        dev_instances: PathBuf,
        #[arg(long)]
        test_instances: PathBuf,
        /// Dev labels (classification) or scores (regression).
        #[arg(long)]
        dev_gold: PathBuf,
        /// `select_top1` or `mean_topk(k)`.
        #[arg(long, default_value = "select_top1")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overall and per-pattern accuracy or Spearman.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        cfg.merge_text(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    }
    for pair in &g.overrides {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.global)?;
    let force = cli.global.force;
    match cli.command {
        Command::GenSynth { out } => commands::gen_synth(&cfg, &out, force),
        Command::Pretrain { data, out } => commands::pretrain(&cfg, &data, &out, force),
        Command::Finetune {
            checkpoint,
            data,
            out,
            grid,
            jobs,
        } => commands::finetune(&cfg, &checkpoint, &data, &out, grid, jobs, force),
        Command::Predict {
            model,
            instances,
            out_dir,
            model_id,
        } => commands::predict(&cfg, &model, &instances, &out_dir, model_id, force),
        Command::Ensemble {
            dev,
            test,
            dev_instances,
            test_instances,
            dev_gold,
            mode,
            out,
        } => commands::ensemble(
            &cfg,
            &commands::EnsembleInputs {
                dev,
                test,
                dev_instances,
                test_instances,
                dev_gold,
                mode,
            },
            &out,
            force,
        ),
        Command::Evaluate {
            pred,
            gold,
            instances,
            out,
        } => commands::evaluate(&cfg, &pred, &gold, &instances, out.as_deref(), force),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .any(|e| e.downcast_ref::<clarify::Error>().is_some_and(clarify::Error::is_numeric));
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
