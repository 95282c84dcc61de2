use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eacl::cli::{self, experiment::median};
use eacl::corpus::{Split, SynthConfig};
use eacl::Error;

#[derive(Parser)]
#[command(name = "eacl", version, about = "Emotion-anchored contrastive learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both stages, evaluate on the held-out split, write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a previous train or ablate manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to one split tag (train, dev, test).
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Run every ablation for every seed and tabulate weighted-F1 deltas.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Compare anchor geometry before and after training.
    AnalyzeAnchors {
        /// Checkpoint holding the initial anchors. Defaults to the initial
        /// anchors stored in the final checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long = "final")]
        final_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        dev_per_class: usize,
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        /// Confusable class pair `a:b`; may be repeated.
        #[arg(long, value_parser = parse_pair)]
        similar: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected a:b, got {s:?}"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { config, corpus, out } => {
            let manifest = cli::cmd_train(&config, &corpus, &out)?;
            for r in &manifest.results {
                match r.test_weighted_f1 {
                    Some(f1) => println!("test weighted-F1 {f1:.4}"),
                    None => println!("train weighted-F1 {:.4}", r.train_weighted_f1),
                }
            }
            println!("artifacts in {}", out.display());
        }
        Command::Rerun { manifest, out } => {
            cli::cmd_rerun(&manifest, &out)?;
            println!("artifacts in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
        } => {
            let report = cli::cmd_eval(&checkpoint, &corpus, split)?;
            println!("{}", report.to_json()?);
        }
        Command::Ablate {
            config,
            corpus,
            out,
            seeds,
        } => {
            let table = cli::cmd_ablate(&config, &corpus, &out, &seeds)?;
            print!("{}", table.to_tsv());
            for row in &table.rows {
                log::info!("{}: median weighted-F1 {:.4}", row.ablation, median(&row.test_weighted_f1));
            }
        }
        Command::AnalyzeAnchors {
            init,
            final_checkpoint,
            out,
        } => {
            let report = cli::cmd_analyze_anchors(init.as_deref(), &final_checkpoint, &out)?;
            println!(
                "min angle {:.3} -> {:.3} deg (delta {:+.3})",
                report.initial.min_angle_deg, report.final_anchors.min_angle_deg, report.min_angle_delta_deg
            );
        }
        Command::Synth {
            classes,
            per_class,
            dev_per_class,
            test_per_class,
            similar,
            noise,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                dev_per_class,
                test_per_class,
                ..SynthConfig::new(classes, per_class, similar, noise, seed)
            };
            cli::cmd_synth(&cfg, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
