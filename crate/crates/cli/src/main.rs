use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cada::harness::checkpoint::Checkpoint;
use cada::harness::train::{load_dataset, returned_params, write_eval};
use cada::harness::{ablate, evaluate, train_with, RunConfig, TrainOptions, Variant};
use cada::synth::Dataset;

#[derive(Parser)]
#[command(name = "cada", version, about = "Adversarial domain adaptation for optic disc and cup segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target dataset.
    Synth(Common),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the target test split.
    Eval(EvalArgs),
    /// Train every ablation variant over the configured seeds.
    Ablate(AblateArgs),
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed: the run seed for `train`, the seed list for `ablate`, the data
    /// seed for `synth` and `eval`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Any other config field, as `key=value` in TOML syntax. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Ablation variant applied on top of the config.
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint whose student weights initialise the run.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds; overrides `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated variants (default: all seven).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

fn resolve(common: &Common) -> cada::Result<RunConfig> {
    let mut table: toml::Table = match &common.config {
        Some(path) => toml::Table::try_from(RunConfig::load(path)?).map_err(config_err)?,
        None => toml::Table::try_from(RunConfig::default()).map_err(config_err)?,
    };
    for kv in &common.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| cada::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let parsed: toml::Table = format!("v = {value}")
            .parse()
            .or_else(|_| format!("v = {:?}", value).parse())
            .map_err(config_err)?;
        table.insert(key.trim().to_string(), parsed["v"].clone());
    }
    let mut cfg = RunConfig::from_toml(&table.to_string())?;
    if let Some(v) = &common.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = &common.data {
        cfg.data_dir = Some(v.clone());
    }
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = common.$field { cfg.$field = v; } )* };
    }
    apply!(shift, epochs, image_size, batch_size, n_source, n_target, n_test);
    Ok(cfg)
}

fn config_err(e: impl std::fmt::Display) -> cada::Error {
    cada::Error::Config(e.to_string())
}

fn run(cli: Cli) -> cada::Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            cfg.validate()?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("data"));
            let synth = cfg.synth();
            let manifest = Dataset::generate(&synth)?.write(&out, &synth)?;
            println!("wrote {} samples to {}", manifest.entries.len(), out.display());
        }
        Command::Train(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(v) = &args.variant {
                cfg = cfg.with_variant(v.parse::<Variant>()?);
            }
            if let Some(s) = args.common.seed {
                cfg.seed = s;
            }
            if let Some(p) = args.init_from {
                cfg.init_from = Some(p);
            }
            let mut on_epoch = |e: &cada::harness::train::EpochEval| {
                eprintln!(
                    "epoch {:>3}  iter {:>6}  dice_cup {:.4}  dice_disc {:.4}  gamma {:.4}",
                    e.epoch, e.iter, e.dice_cup, e.dice_disc, e.gamma_cdr
                )
            };
            let outcome = train_with(
                &cfg,
                TrainOptions {
                    resume: args.resume,
                    on_epoch: Some(&mut on_epoch),
                    ..Default::default()
                },
            )?;
            if let Some(r) = outcome.report {
                println!(
                    "final dice_cup {:.4} dice_disc {:.4} gamma_cdr {:.4} -> {}",
                    r.dice_cup,
                    r.dice_disc,
                    r.gamma_cdr,
                    outcome.dir.display()
                );
            }
        }
        Command::Eval(args) => {
            let mut cfg = resolve(&args.common)?;
            if let Some(s) = args.common.seed {
                cfg.data_seed = s;
            }
            let ck = Checkpoint::load(&args.checkpoint)?;
            cfg.image_size = ck.header.net.input_size;
            let data = load_dataset(&cfg)?;
            let (report, preds) = evaluate(&ck.header.net, &returned_params(&ck)?, &data.target_test)?;
            let out = args.common.out.unwrap_or_else(|| PathBuf::from("eval"));
            write_eval(&out, &report, &preds)?;
            println!(
                "dice_cup {:.4} dice_disc {:.4} gamma_cdr {:.4} -> {}",
                report.dice_cup,
                report.dice_disc,
                report.gamma_cdr,
                out.display()
            );
        }
        Command::Ablate(args) => {
            let mut cfg = resolve(&args.common)?;
            if !args.seeds.is_empty() {
                cfg.ablation_seeds = args.seeds;
            } else if let Some(s) = args.common.seed {
                cfg.ablation_seeds = vec![s];
            }
            let suite = if args.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                args.variants.iter().map(|v| v.parse()).collect::<cada::Result<Vec<Variant>>>()?
            };
            let rows = ablate(&cfg, &suite)?;
            println!("{:<12} {:>16} {:>16} {:>16}", "variant", "dice_cup", "dice_disc", "gamma");
            for r in rows {
                println!(
                    "{:<12} {:>8.4}±{:<7.4} {:>8.4}±{:<7.4} {:>8.4}±{:<7.4}",
                    r.variant, r.dice_cup_mean, r.dice_cup_sd, r.dice_disc_mean, r.dice_disc_sd, r.gamma_mean, r.gamma_sd
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
