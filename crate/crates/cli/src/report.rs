//! Versioned JSON reports and CSV plot data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use structsearch::dims::DimVar;
use structsearch::search::{Candidate, SearchResult};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

pub const CANONICALIZATION: &str = "transposes pushed down to M, B and C leaves (a transposed G is a G); \
nested sums and products flattened; operand order preserved; two structures are the same iff their printed forms match";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub rows: usize,
    pub cols: usize,
    pub observed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub structure: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub scored: usize,
    pub failed: Vec<Failure>,
    /// Held-out rows and columns whose estimate used annealed importance
    /// sampling, summed over structures.
    pub ais_estimates: usize,
}

impl Diagnostics {
    pub fn from_result(r: &SearchResult) -> Diagnostics {
        let all: Vec<&Candidate> = r.levels.iter().flat_map(|l| &l.candidates).collect();
        Diagnostics {
            scored: all.iter().filter(|c| c.scored()).count(),
            failed: all
                .iter()
                .filter_map(|c| {
                    c.error.as_ref().map(|e| Failure {
                        structure: c.structure.clone(),
                        error: e.clone(),
                    })
                })
                .collect(),
            ais_estimates: all
                .iter()
                .filter_map(|c| c.score.as_ref())
                .flat_map(|s| s.rows.iter().chain(&s.cols))
                .filter(|h| !h.ais_log_weights.is_empty())
                .count(),
        }
    }
}

/// Everything needed to replay a search given the input matrix. Wall-clock
/// timing is written separately so that reports are reproducible byte for
/// byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool: String,
    pub config: RunConfig,
    pub input: InputSummary,
    pub canonicalization: String,
    pub selected: String,
    pub result: SearchResult,
    pub diagnostics: Diagnostics,
}

impl Report {
    pub fn new(config: RunConfig, input: InputSummary, result: SearchResult) -> Report {
        Report {
            schema_version: SCHEMA_VERSION,
            tool: format!("structsearch {}", env!("CARGO_PKG_VERSION")),
            config,
            input,
            canonicalization: CANONICALIZATION.to_string(),
            selected: result.chosen.clone(),
            diagnostics: Diagnostics::from_result(&result),
            result,
        }
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u32>,
}

/// Writes pretty JSON, refusing to replace a report with a newer schema
/// unless `force` is set.
pub fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<(), CliError> {
    if !force {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(VersionProbe { schema_version: Some(v) }) = serde_json::from_str(&text) {
                if v > SCHEMA_VERSION {
                    return Err(CliError::NewerReport {
                        path: path.display().to_string(),
                        found: v,
                        supported: SCHEMA_VERSION,
                    });
                }
            }
        }
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Every scored structure by level and rank.
pub fn write_score_curves(path: &Path, r: &SearchResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["level", "rank", "structure", "parent", "score", "selected"]).map_err(io)?;
    for level in &r.levels {
        for (rank, c) in level.candidates.iter().enumerate() {
            let score = if c.value.is_finite() { c.value.to_string() } else { String::new() };
            w.write_record([
                level.level.to_string(),
                rank.to_string(),
                c.structure.clone(),
                c.parent.clone().unwrap_or_default(),
                score,
                (level.level == r.chosen_level && rank == 0).to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Orders that sort the data rows or columns by the selected structure's
/// cluster assignments. Consecutive positions with different clusters mark
/// the cluster boundaries of a sorted heatmap.
pub fn write_cluster_orders(path: &Path, r: &SearchResult) -> Result<usize, CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["leaf", "axis", "position", "index", "cluster", "boundary"]).map_err(io)?;
    let chosen = r.levels[r.chosen_level].best();
    let mut written = 0;
    for comp in chosen.map(|c| c.components.as_slice()).unwrap_or_default() {
        let Some(assign) = &comp.assignments else { continue };
        let (axis, index_of) = match comp.row_dim {
            DimVar::Rows => ("row", &r.holdout.obs_rows),
            DimVar::Cols => ("col", &r.holdout.obs_cols),
            DimVar::Latent(_) => continue,
        };
        let mut order: Vec<(usize, usize)> = assign.iter().enumerate().map(|(i, &c)| (c, index_of[i])).collect();
        order.sort_unstable();
        for (pos, &(cluster, index)) in order.iter().enumerate() {
            let boundary = pos > 0 && order[pos - 1].0 != cluster;
            w.write_record([
                comp.leaf.to_string(),
                axis.to_string(),
                pos.to_string(),
                index.to_string(),
                cluster.to_string(),
                boundary.to_string(),
            ])
            .map_err(io)?;
        }
        written += 1;
    }
    w.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_newer_schema_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        std::fs::write(&p, format!("{{\"schema_version\": {}}}", SCHEMA_VERSION + 1)).unwrap();
        let v = serde_json::json!({"schema_version": SCHEMA_VERSION});
        assert!(matches!(write_json(&p, &v, false), Err(CliError::NewerReport { .. })));
        write_json(&p, &v, true).unwrap();
        write_json(&p, &v, false).unwrap();
    }
}
