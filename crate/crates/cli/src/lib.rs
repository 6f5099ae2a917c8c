//! Command-line front end: data ingestion, configuration, search and
//! harness runs, and report output.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod report;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use structsearch::search::greedy_search;

use crate::config::RunConfig;
use crate::data::{load_matrix, CsvLayout};
use crate::error::CliError;
use crate::report::{InputSummary, Report};

/// Runs `f` on a pool of `jobs` workers.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn layout(config: &RunConfig) -> CsvLayout {
    CsvLayout {
        header: config.input.header,
        row_names: config.input.row_names,
    }
}

/// Loads the configured input and runs the greedy search.
pub fn run_search(config: &RunConfig) -> Result<Report, CliError> {
    config.validate()?;
    let path = config
        .input
        .path
        .as_deref()
        .ok_or_else(|| CliError::Usage("no input matrix given".into()))?;
    let (x, mask) = load_matrix(path, layout(config))?;
    let input = InputSummary {
        rows: x.nrows(),
        cols: x.ncols(),
        observed: mask.iter().filter(|&&b| b).count(),
    };
    let result = with_pool(config.jobs, || greedy_search(&x, &mask, &config.search, config.seed))??;
    Ok(Report::new(config.clone(), input, result))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

/// Writes the report, score curves, cluster orders and timing into `dir`.
pub fn write_search_outputs(report: &Report, dir: &Path, force: bool, started: Instant) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    report::write_json(&dir.join("report.json"), report, force)?;
    report::write_score_curves(&dir.join("scores.csv"), &report.result)?;
    report::write_cluster_orders(&dir.join("clusters.csv"), &report.result)?;
    let timing = Timing {
        seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(dir.join("timing.json"), serde_json::to_string(&timing).expect("serializes"))?;
    Ok(())
}
