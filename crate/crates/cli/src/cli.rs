//! Argument parsing and subcommand dispatch.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use structsearch::expr::Expr;
use structsearch::grammar::enumerate_levels;
use structsearch::rng::rng_for;
use structsearch::scoring::{score_structure, HoldoutPartition, PredictiveScore};
use structsearch::synthesis::{generate, table1_harness, table1_rows, HarnessConfig, RecoveryReport, SynthSpec, TABLE1_NOISE};

use crate::config::RunConfig;
use crate::data::{load_matrix, write_matrix};
use crate::error::CliError;
use crate::report::{write_json, SCHEMA_VERSION};
use crate::{layout, run_search, with_pool, write_search_outputs};

#[derive(Debug, Parser)]
#[command(name = "structsearch", version, about = "Structure search over compositional matrix decompositions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Log level for progress messages on stderr.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Input matrix (CSV).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub holdout_rows: Option<usize>,
    #[arg(long)]
    pub holdout_cols: Option<usize>,
    /// Structures expanded per level.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_level: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// The input's first row is a header.
    #[arg(long)]
    pub header: bool,
    /// The input's first column holds row names.
    #[arg(long)]
    pub row_names: bool,
    /// Overwrite reports written by a newer version.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.input {
            c.input.path = Some(p.clone());
        }
        c.input.header |= self.header;
        c.input.row_names |= self.row_names;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.holdout_rows {
            c.search.holdout_rows = Some(v);
        }
        if let Some(v) = self.holdout_cols {
            c.search.holdout_cols = Some(v);
        }
        if let Some(v) = self.k {
            c.search.k = v;
        }
        if let Some(v) = self.max_level {
            c.search.max_level = v;
        }
        if let Some(v) = self.jobs {
            c.jobs = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Greedy structure search on a data matrix.
    Search(Common),
    /// Fit and score one structure.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        structure: String,
    },
    /// Draw a synthetic matrix from a structure.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        structure: String,
        #[arg(long, default_value_t = 200)]
        rows: usize,
        #[arg(long, default_value_t = 200)]
        cols: usize,
        /// Noise variance.
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        #[arg(long, default_value_t = 1.0)]
        signal_var: f64,
        #[arg(long, default_value_t = 10)]
        latent: usize,
    },
    /// Recovery of known structures from synthetic data.
    Table1 {
        #[command(flatten)]
        common: Common,
        /// Comma-separated row names; all rows by default.
        #[arg(long)]
        structures: Option<String>,
        /// Comma-separated noise variances.
        #[arg(long)]
        sigma2: Option<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        latent: usize,
    },
    /// List every structure reachable within `level` productions.
    Enumerate {
        #[arg(long)]
        level: usize,
    },
}

#[derive(Serialize)]
struct ScoreReport<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    structure: String,
    holdout: &'a HoldoutPartition,
    score: &'a PredictiveScore,
}

#[derive(Serialize)]
struct HarnessReport<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    harness: &'a HarnessConfig,
    recovery: &'a RecoveryReport,
}

fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("not a number: {s:?}"))))
        .collect()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search(common) => {
            let started = Instant::now();
            let config = common.resolve()?;
            let report = run_search(&config)?;
            write_search_outputs(&report, &config.out, common.force, started)?;
            println!("{}", report.selected);
        }
        Command::Score { common, structure } => {
            let config = common.resolve()?;
            let expr = Expr::parse(&structure).map_err(structsearch::Error::from)?;
            let path = config.input.path.as_deref().ok_or_else(|| CliError::Usage("no input matrix given".into()))?;
            let (x, mask) = load_matrix(path, layout(&config))?;
            let holdout = config.search.holdout(x.nrows(), x.ncols(), config.seed)?;
            let score = with_pool(config.jobs, || {
                score_structure(&expr, &x, &mask, &holdout, &config.search.fit, &config.search.score, config.seed)
            })??;
            std::fs::create_dir_all(&config.out)?;
            let report = ScoreReport {
                schema_version: SCHEMA_VERSION,
                config: &config,
                structure: expr.to_string(),
                holdout: &holdout,
                score: &score,
            };
            write_json(&config.out.join("score.json"), &report, common.force)?;
            println!("{}\t{}\t{}", expr, score.total, score.scaled_total);
        }
        Command::Synth {
            common,
            structure,
            rows,
            cols,
            sigma2,
            signal_var,
            latent,
        } => {
            let config = common.resolve()?;
            let expr = Expr::parse(&structure).map_err(structsearch::Error::from)?;
            let spec = SynthSpec {
                structure: expr,
                n: rows,
                d: cols,
                latent,
                signal_var,
                noise_var: sigma2,
            };
            let data = generate(&spec, &mut rng_for(config.seed, "synth"))?;
            std::fs::create_dir_all(&config.out)?;
            write_matrix(&config.out.join("data.csv"), &data.x)?;
            write_matrix(&config.out.join("signal.csv"), &data.signal)?;
            println!("{}", config.out.join("data.csv").display());
        }
        Command::Table1 {
            common,
            structures,
            sigma2,
            seeds,
            size,
            latent,
        } => {
            let config = common.resolve()?;
            let mut rows = table1_rows();
            if let Some(names) = structures {
                let wanted: Vec<&str> = names.split(',').map(str::trim).collect();
                if let Some(bad) = wanted.iter().find(|w| !rows.iter().any(|r| r.name == **w)) {
                    let known: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
                    return Err(CliError::Usage(format!("unknown structure {bad:?}; known: {}", known.join(", "))));
                }
                rows.retain(|r| wanted.contains(&r.name.as_str()));
            }
            let noise = match sigma2 {
                Some(s) => parse_list(&s)?,
                None => TABLE1_NOISE.to_vec(),
            };
            if noise.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(CliError::Usage("noise variances must be positive".into()));
            }
            let harness = HarnessConfig {
                n: size,
                d: size,
                latent,
                noise,
                seeds,
                search: config.search.clone(),
            };
            let recovery = with_pool(config.jobs, || table1_harness(&rows, &harness, config.seed))?;
            std::fs::create_dir_all(&config.out)?;
            let report = HarnessReport {
                schema_version: SCHEMA_VERSION,
                config: &config,
                harness: &harness,
                recovery: &recovery,
            };
            write_json(&config.out.join("table1.json"), &report, common.force)?;
            let mut w = csv::Writer::from_path(config.out.join("table1.csv")).map_err(|e| CliError::Io(e.to_string()))?;
            let io = |e: csv::Error| CliError::Io(e.to_string());
            w.write_record(["name", "structure", "sigma2", "reported", "runs", "truth_hits", "reported_hits"])
                .map_err(io)?;
            for c in &recovery.cells {
                w.write_record([
                    c.name.clone(),
                    c.structure.clone(),
                    c.noise_var.to_string(),
                    c.reported.clone().unwrap_or_default(),
                    c.runs.to_string(),
                    c.truth_hits.to_string(),
                    c.reported_hits.to_string(),
                ])
                .map_err(io)?;
            }
            w.flush()?;
            for c in &recovery.cells {
                println!("{}\t{}\t{}/{}", c.name, c.noise_var, c.truth_hits, c.runs);
            }
        }
        Command::Enumerate { level } => {
            let levels = enumerate_levels(level);
            println!("# canonical form: {}", crate::report::CANONICALIZATION);
            for (l, exprs) in levels.iter().enumerate() {
                for e in exprs {
                    println!("{l}\t{e}");
                }
            }
            let counts: Vec<String> = levels.iter().map(|l| l.len().to_string()).collect();
            println!("# per level: {}", counts.join(" "));
            println!("# total: {}", levels.iter().map(Vec::len).sum::<usize>());
        }
    }
    Ok(())
}
