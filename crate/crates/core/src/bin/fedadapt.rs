use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fedadapt::bench::checkpoint::inspect;
use fedadapt::bench::config::ExperimentConfig;
use fedadapt::bench::cost::{
    comm_ratio, cost_report, CostModel, REFERENCE_ADAPTER_GB, REFERENCE_CLIENTS, REFERENCE_FULL_GB,
    REFERENCE_REPORTED_TOTAL_GB, REFERENCE_ROUNDS,
};
use fedadapt::bench::runner::{execute_run, write_outputs, OutputPaths};
use fedadapt::bench::sweep::{run_sweep, RESULTS_FILE};
use fedadapt::data::{generate_dataset, heterogeneity_index, partition};
use fedadapt::rng::{RandomSource, StreamRole};
use fedadapt::Error;

#[derive(Parser)]
#[command(name = "fedadapt", version, about = "Adapter-only federated learning on a toy multimodal model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federation and write its ledger, summary and checkpoint.
    Run(RunArgs),
    /// Run every cell of a grid config.
    Sweep(SweepArgs),
    /// Heterogeneity statistics of the configured partitions.
    PartitionReport(PartitionArgs),
    /// Communication cost arithmetic.
    CostReport(CostArgs),
    /// Checkpoint utilities.
    Ckpt {
        #[command(subcommand)]
        command: CkptCommand,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Output file stem.
    #[arg(long, default_value = "run")]
    name: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Record measured wall time in the ledger (output is then not reproducible).
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "sweep_out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the shard manifest of the first grid cell to this JSON file.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = REFERENCE_FULL_GB)]
    full_gb: f64,
    #[arg(long, default_value_t = REFERENCE_ADAPTER_GB)]
    adapter_gb: f64,
    #[arg(long, default_value_t = REFERENCE_ROUNDS)]
    rounds: u32,
    #[arg(long, default_value_t = REFERENCE_CLIENTS)]
    clients: u32,
    /// Total to compare the arithmetic against.
    #[arg(long, default_value_t = REFERENCE_REPORTED_TOTAL_GB)]
    reported_total_gb: f64,
    /// Also measure the adapter/full ratio of this config's model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum CkptCommand {
    /// Print a checkpoint's tensor table as JSON.
    Inspect { path: PathBuf },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_json(value: &serde_json::Value) -> Result<(), Error> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    let (clients, alpha, seed) = config.single()?;
    let artifacts = execute_run(&config, &args.name, clients, alpha, seed, args.workers, args.wall_clock)?;
    let paths = OutputPaths::new(&args.out, &args.name);
    write_outputs(&artifacts, &paths)?;
    print_json(&json!({
        "summary": artifacts.summary,
        "csv": paths.csv,
        "json": paths.json,
        "checkpoint": paths.checkpoint,
    }))
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    let config = ExperimentConfig::load(&args.config)?;
    let outcome = run_sweep(&config, &args.out, args.workers)?;
    print_json(&json!({
        "cells": outcome.rows.len(),
        "computed": outcome.computed,
        "skipped": outcome.skipped,
        "results": args.out.join(RESULTS_FILE),
    }))
}

fn partition_report(args: PartitionArgs) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    let mut rows = Vec::new();
    let mut manifest_written = false;
    for cell in config.cells() {
        let mut rs = RandomSource::for_role(cell.seed, StreamRole::Dataset, &[]);
        let dataset = generate_dataset(&config.data_config(), &mut rs)?;
        let (spec, shards) = partition(&dataset, cell.clients, cell.dirichlet_alpha, cell.seed)?;
        if let (Some(path), false) = (&args.manifest, manifest_written) {
            let manifest = json!({ "partition": spec, "shards": shards });
            std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
            manifest_written = true;
        }
        let sizes: Vec<usize> = shards.iter().map(|s| s.size()).collect();
        rows.push(json!({
            "clients": cell.clients,
            "dirichlet_alpha": cell.dirichlet_alpha,
            "seed_index": cell.seed_index,
            "heterogeneity_index": heterogeneity_index(&spec),
            "min_shard": sizes.iter().min(),
            "max_shard": sizes.iter().max(),
        }));
    }
    print_json(&json!({ "cells": rows }))
}

fn cost(args: CostArgs) -> Result<(), Error> {
    let model = CostModel {
        full_update_gb_per_round: args.full_gb,
        adapter_update_gb_per_round: args.adapter_gb,
        rounds: args.rounds,
    };
    let report = cost_report(&model, args.clients, Some(args.reported_total_gb))?;
    let measured = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            Some(comm_ratio(cfg.dims, cfg.lora_rank, cfg.lora_alpha)?)
        }
        None => None,
    };
    if args.json {
        return print_json(&json!({ "report": report, "measured": measured }));
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "full update per round:    {:.3} GB", model.full_update_gb_per_round)?;
    writeln!(out, "adapter update per round: {:.3} GB", model.adapter_update_gb_per_round)?;
    writeln!(out, "per-round reduction:      {:.4}%", report.per_round_reduction_pct)?;
    writeln!(
        out,
        "{}-round adapter total, figure is the whole round:   {:.3} GB",
        model.rounds, report.total_gb_if_per_round
    )?;
    writeln!(
        out,
        "{}-round adapter total, figure is per client (x{}): {:.3} GB",
        model.rounds, report.clients, report.total_gb_if_per_client
    )?;
    if let Some(reported) = report.reported_total_gb {
        let verdict = if report.reported_total_mismatch {
            "MISMATCH: matches neither reading"
        } else {
            "consistent"
        };
        writeln!(out, "reported total:           {reported:.3} GB ({verdict})")?;
    }
    if let Some(m) = measured {
        writeln!(
            out,
            "measured: {} trainable of {} params ({:.3}), {} adapter bytes vs {} full bytes ({:.2}x)",
            m.trainable_params,
            m.trainable_params + m.frozen_params,
            m.param_fraction,
            m.adapter_payload_bytes,
            m.full_payload_bytes,
            m.byte_reduction_factor
        )?;
    }
    writeln!(out, "GB = 1e9 bytes")?;
    Ok(())
}

fn ckpt(command: CkptCommand) -> Result<(), Error> {
    match command {
        CkptCommand::Inspect { path } => {
            let bytes = std::fs::read(&path)?;
            let summary = inspect(&bytes)?;
            print_json(&serde_json::to_value(summary)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::PartitionReport(a) => partition_report(a),
        Command::CostReport(a) => cost(a),
        Command::Ckpt { command } => ckpt(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
