use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s1e::cli::{self, CliError};
use s1e::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "s1e",
    about = "Decoder-free referring segmentation at desk scale: dataset generation, training, evaluation, ablations, and self-checks.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a key=value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set pipeline.mode=hr_rfr (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides out.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.apply(k.trim(), v.trim()).map_err(CliError::Config)?;
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.display().to_string();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.display().to_string();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic referring-segmentation dataset (train/ and test/ splits).
    Gen {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Training samples.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Test samples (default n/10).
        #[arg(long)]
        n_test: Option<usize>,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        max_objects: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a pipeline and evaluate it on the test split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint; optionally dump per-sample mask predictions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for per-sample PGM predictions (native + image resolution).
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        /// Append the metrics row to this CSV.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train/evaluate every variant along one ablation axis.
    Ablate {
        #[arg(long, value_parser = ["pipeline", "mask", "sharing", "retention"])]
        axis: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the property self-check suite.
    Check {
        /// Fault-injection hook: corrupt the shuffle index table first.
        #[arg(long, hide = true)]
        corrupt_shuffle_table: bool,
    },
    /// Dump the predicted mask for one sample id.
    DumpMask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Gen {
            seed,
            n,
            n_test,
            size,
            max_objects,
            out,
        } => {
            if n == 0 {
                eprintln!("warning: generating an empty training split");
            }
            let n_test = n_test.unwrap_or(n / 10);
            let g = cli::cmd_gen(seed, n, n_test, size, max_objects, &out)?;
            println!("train: {} samples, index sha256 {}", g.n_train, g.train_sha);
            println!("test:  {} samples, index sha256 {}", g.n_test, g.test_sha);
            Ok(0)
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            cfg.model
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let artifacts = cli::cmd_train(&cfg)?;
            let last = artifacts.outcome.log.last();
            if let Some(row) = last {
                println!(
                    "final step {}: L_text {:.4} L_bce {:.4} L_dice {:.4} L_total {:.4}",
                    row.step, row.l_text, row.l_bce, row.l_dice, row.l_total
                );
            }
            println!(
                "test cIoU {:.4} gIoU {:.4} over {} samples",
                artifacts.eval.ciou, artifacts.eval.giou, artifacts.eval.n_samples
            );
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
            Ok(0)
        }
        Command::Eval {
            ckpt,
            split,
            dump_masks,
            metrics_out,
            config,
        } => {
            let cfg = config.resolve()?;
            let ev = cli::cmd_eval(
                &ckpt,
                &cfg,
                &split,
                dump_masks.as_deref(),
                metrics_out.as_deref(),
            )?;
            print!("{}", cli::METRICS_HEADER.to_string() + "\n" + &ev.row);
            Ok(0)
        }
        Command::Ablate { axis, seeds, config } => {
            let cfg = config.resolve()?;
            let out_csv = PathBuf::from(&cfg.out_dir).join(format!("ablate_{axis}.csv"));
            let table = cli::cmd_ablate(&cfg, &axis, seeds, Some(&out_csv))?;
            print!("{}", table.to_csv());
            println!("grid written to {}", out_csv.display());
            Ok(0)
        }
        Command::Check { corrupt_shuffle_table } => {
            let report = cli::cmd_check(corrupt_shuffle_table);
            print!("{}", report.render());
            Ok(if report.all_pass() { 0 } else { 3 })
        }
        Command::DumpMask {
            ckpt,
            split,
            id,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let (native, full) = cli::cmd_dump_mask(&ckpt, &cfg, &split, id, &out)?;
            println!("{}", native.display());
            println!("{}", full.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output is not an error
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
