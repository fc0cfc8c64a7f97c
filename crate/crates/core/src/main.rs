use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use modelmux::config::RunConfig;
use modelmux::pipeline::{self, Layout};
use modelmux::Error;

#[derive(Parser)]
#[command(name = "modelmux", version, about = "Cost-aware model multiplexing on planted data")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted train/val datasets.
    GenData,
    /// Jointly train the model zoo.
    TrainZoo,
    /// Train the multiplexer against the frozen zoo.
    TrainMux,
    /// Route the validation set and write reports and embeddings.
    Evaluate,
    /// Replay the cost model on printed and configured profiles.
    Simulate,
    /// Run gen-data, train-zoo, train-mux and evaluate in order.
    Pipeline,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::Format { .. },
        ) => 3,
        Some(Error::Divergence(_) | Error::NonFinite(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, &layout).context("gen-data")?;
            println!(
                "train {} samples (crc32 {:08x}), val {} samples (crc32 {:08x})",
                s.train_samples, s.train_crc32, s.val_samples, s.val_crc32
            );
        }
        Command::TrainZoo => train_zoo(&cfg, &layout)?,
        Command::TrainMux => train_mux(&cfg, &layout)?,
        Command::Evaluate => evaluate(&cfg, &layout)?,
        Command::Simulate => {
            let sim = pipeline::simulate(&cfg, &layout).context("simulate")?;
            print!("{}", sim.summary());
        }
        Command::Pipeline => {
            pipeline::gen_data(&cfg, &layout).context("gen-data")?;
            train_zoo(&cfg, &layout)?;
            train_mux(&cfg, &layout)?;
            evaluate(&cfg, &layout)?;
        }
    }
    Ok(())
}

fn train_zoo(cfg: &RunConfig, layout: &Layout) -> anyhow::Result<()> {
    let s = pipeline::train_zoo(cfg, layout).context("train-zoo")?;
    for ((id, flops), acc) in s.model_ids.iter().zip(&s.flops).zip(&s.val_accuracy) {
        println!("{id:<12} {flops:>8} FLOPs  val accuracy {acc:.4}");
    }
    Ok(())
}

fn train_mux(cfg: &RunConfig, layout: &Layout) -> anyhow::Result<()> {
    let s = pipeline::train_mux(cfg, layout).context("train-mux")?;
    let first = s.losses.first().copied().unwrap_or(f32::NAN);
    let last = s.losses.last().copied().unwrap_or(f32::NAN);
    println!("multiplexer {} FLOPs, loss {first:.4} -> {last:.4}", s.flops);
    Ok(())
}

fn evaluate(cfg: &RunConfig, layout: &Layout) -> anyhow::Result<()> {
    let e = pipeline::evaluate(cfg, layout).context("evaluate")?;
    println!(
        "{:<28} {:>8} {:>12} {:>8}",
        "scenario", "accuracy", "exp. FLOPs", "saving"
    );
    for r in &e.reports {
        println!(
            "{:<28} {:>8.4} {:>12.1} {:>7.3}x",
            r.scenario, r.accuracy, r.expected_flops, r.resource_saving_factor
        );
    }
    println!(
        "embedding separation: both-correct {:.4}, one-correct {:.4}, gap {:.4}",
        e.separation.mean_both_correct, e.separation.mean_one_correct, e.separation.gap
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
