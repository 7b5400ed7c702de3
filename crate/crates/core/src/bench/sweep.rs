//! Grid sweeps over client count, Dirichlet concentration and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::config::{hex_digest, Cell, ExperimentConfig};
use crate::bench::runner::{execute_run, write_outputs, OutputPaths, RunSummary};
use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "sweep_results.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    /// Covers the full config plus the cell coordinates.
    pub cell_checksum: String,
    pub run: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub heterogeneity_index: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss_u: f64,
    pub final_loss_g: f64,
    pub total_bytes_up: usize,
}

impl From<&CellSummary> for SweepRow {
    fn from(s: &CellSummary) -> Self {
        Self {
            clients: s.cell.clients,
            dirichlet_alpha: s.cell.dirichlet_alpha,
            seed_index: s.cell.seed_index,
            seed: s.cell.seed,
            heterogeneity_index: s.run.heterogeneity_index,
            initial_accuracy: s.run.initial_accuracy,
            final_accuracy: s.run.final_accuracy,
            final_loss_u: s.run.final_loss_u,
            final_loss_g: s.run.final_loss_g,
            total_bytes_up: s.run.total_bytes_up,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub computed: usize,
    pub skipped: usize,
}

pub fn cell_checksum(config: &ExperimentConfig, cell: &Cell) -> String {
    let mut bytes = config.checksum().into_bytes();
    bytes.extend(serde_json::to_vec(cell).expect("cell serializes"));
    hex_digest(&bytes)
}

/// A previously written cell whose outputs are all present and whose
/// checksum matches.
fn completed(paths: &OutputPaths, checksum: &str) -> Option<CellSummary> {
    if !paths.csv.is_file() || !paths.checkpoint.is_file() {
        return None;
    }
    let text = std::fs::read_to_string(&paths.json).ok()?;
    let summary: CellSummary = serde_json::from_str(&text).ok()?;
    (summary.cell_checksum == checksum).then_some(summary)
}

fn run_cell(config: &ExperimentConfig, cell: &Cell, out_dir: &Path) -> Result<(CellSummary, bool)> {
    let paths = OutputPaths::new(out_dir, &cell.id());
    let checksum = cell_checksum(config, cell);
    if let Some(done) = completed(&paths, &checksum) {
        return Ok((done, false));
    }
    let artifacts = execute_run(config, &cell.id(), cell.clients, cell.dirichlet_alpha, cell.seed, 1, false)?;
    write_outputs(&artifacts, &paths)?;
    let summary = CellSummary {
        cell: *cell,
        cell_checksum: checksum,
        run: artifacts.summary,
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(&paths.json, json)?;
    Ok((summary, true))
}

/// Runs every grid cell (up to `workers` at a time), writing per-cell
/// ledger CSV, JSON summary and checkpoint, then the results table. Cells
/// whose outputs already exist with a matching checksum are not recomputed.
pub fn run_sweep(config: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<SweepOutcome> {
    use rayon::prelude::*;

    config.validate()?;
    if workers == 0 {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<(CellSummary, bool)>> =
        pool.install(|| cells.par_iter().map(|c| run_cell(config, c, out_dir)).collect());
    let mut rows = Vec::with_capacity(cells.len());
    let mut computed = 0;
    for (cell, r) in cells.iter().zip(results) {
        let (summary, fresh) = r.map_err(|e| Error::Cell {
            clients: cell.clients,
            alpha: cell.dirichlet_alpha,
            seed_index: cell.seed_index,
            source: Box::new(e),
        })?;
        computed += usize::from(fresh);
        rows.push(SweepRow::from(&summary));
    }
    let mut w = csv::Writer::from_path(out_dir.join(RESULTS_FILE))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(SweepOutcome {
        skipped: rows.len() - computed,
        rows,
        computed,
    })
}
