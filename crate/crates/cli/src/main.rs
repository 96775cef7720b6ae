use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use reef_cli::{
    cmd_compare, cmd_flops, cmd_gen, cmd_gradcheck, cmd_train, exit_code, ConfigArgs, ModelSource,
};
use reef_core::{Result, Strategy};

#[derive(Parser)]
#[command(name = "reef", version, about = "Streaming video adapter with compressed memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal corpus.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training stages on a corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one model under several memory strategies.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required_unless_present = "fresh", conflicts_with = "fresh")]
        checkpoint: Option<PathBuf>,
        /// Train a model on the corpus instead of loading one.
        #[arg(long)]
        fresh: bool,
        /// Comma-separated strategies; all five by default.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every gradient path.
    Gradcheck {
        /// Fewer instances and samples, same tolerances.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic FLOP report against the similarity-merging baseline.
    Flops {
        #[command(flatten)]
        config: ConfigArgs,
        /// Frames in the counted pass; the corpus length by default.
        #[arg(long)]
        frames: Option<usize>,
        /// Count the full-scale adapter instead of the run config.
        #[arg(long)]
        full_scale: bool,
        /// Cross-check attention counts against a real forward pass.
        #[arg(long)]
        instrument: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let start = Instant::now();
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = config.resolve()?;
            let corpus = cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} streams ({} held out) to {}, seed {}",
                corpus.streams.len(),
                corpus.test.len(),
                out.display(),
                cfg.seed
            );
        }
        Command::Train { config, corpus, out } => {
            let cfg = config.resolve()?;
            let r = cmd_train(&cfg, &corpus, &out)?;
            println!("seed {}", r.seed);
            println!(
                "held-out loss {:.4} -> {:.4} (uniform {:.4})",
                r.initial.loss, r.final_eval.loss, r.uniform_loss
            );
            println!(
                "planted-frame recall {:.4}, chance {:.4}",
                r.selection.recall, r.selection.chance
            );
            println!("temporal scorer frozen in main stage: {}", r.temporal_frozen);
        }
        Command::Compare {
            config,
            corpus,
            checkpoint,
            fresh,
            strategies,
            out,
        } => {
            let cfg = config.resolve()?;
            let source = match (fresh, checkpoint) {
                (true, _) => ModelSource::Fresh,
                (false, Some(p)) => ModelSource::Checkpoint(p),
                (false, None) => unreachable!("clap requires one source"),
            };
            let strategies = strategies.unwrap_or_else(|| Strategy::ALL.to_vec());
            let rows = cmd_compare(&cfg, &corpus, &source, &strategies, &out)?;
            println!("{:<8} {:>8} {:>8} {:>8} {:>14} {:>14}", "strategy", "loss", "recall", "chance", "flops", "flops_no_stf");
            for r in rows {
                println!(
                    "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>14} {:>14}",
                    r.strategy, r.loss, r.recall, r.chance, r.flops, r.flops_no_stf
                );
            }
        }
        Command::Gradcheck { quick, out } => {
            let checks = cmd_gradcheck(quick, &out)?;
            let mut ok = true;
            for c in &checks {
                let status = if c.report.passed { "pass" } else { "FAIL" };
                println!(
                    "{:<18} {status} max relative error {:.4} (tolerance {})",
                    c.name, c.report.max_relative_error, c.report.tolerance
                );
                for (group, e) in &c.report.per_parameter_errors {
                    println!("    {group:<24} {e:.4}");
                }
                ok &= c.report.passed;
            }
            println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
            return Ok(ok);
        }
        Command::Flops {
            config,
            frames,
            full_scale,
            instrument,
            out,
        } => {
            let cfg = config.resolve()?;
            let frames = frames.unwrap_or(cfg.data.frames);
            let s = cmd_flops(&cfg, frames, full_scale, instrument, &out)?;
            println!("adapter   {:>18}", s.config.total);
            println!("baseline  {:>18}", s.baseline.total);
            println!("delta     {:>17.2}%", s.delta_percent);
            if let Some(i) = &s.instrumented {
                println!("instrumented attention gap {:.4}", i.max_relative_gap);
            }
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
