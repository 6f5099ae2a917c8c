//! Held-out row and column predictive likelihood of a structure.

mod ais;
mod gauss;
mod holdout;
mod predictive;
mod row_model;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use ais::{ais_ratio, AisConfig, AisEstimate};
pub use holdout::{default_holdout_count, make_holdout, HoldoutPartition};
pub use predictive::{predictive_row_loglik, PredictiveConfig, RowEstimate};
pub use row_model::{RowModel, RowTemplate};

use crate::components::Hyper;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grammar::derive;
use crate::inference::{gibbs_sweep, initialize_structure, FitConfig, Mask, State};
use crate::linalg::log_mean_exp;
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Posterior samples averaged per held-out row.
    pub samples: usize,
    /// Gibbs sweeps between retained samples.
    pub thin: usize,
    pub predictive: PredictiveConfig,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            samples: 10,
            thin: 2,
            predictive: PredictiveConfig::default(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidInput("need at least one posterior sample".into()));
        }
        self.predictive.ais.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScore {
    /// Row (or column) index in the full matrix.
    pub index: usize,
    pub log_lik: f64,
    /// Estimate under each posterior sample.
    pub per_sample: Vec<f64>,
    /// AIS log-weights over all samples and runs; empty when AIS was not needed.
    pub ais_log_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveScore {
    pub structure: String,
    pub rows: Vec<HeldOutScore>,
    pub cols: Vec<HeldOutScore>,
    /// Sum over held-out rows and columns.
    pub total: f64,
    /// Held-out row and column sums scaled up to all `N` rows and `D`
    /// columns; the quantity compared across levels.
    pub scaled_total: f64,
    pub samples: usize,
}

impl PredictiveScore {
    pub fn empty(structure: String) -> PredictiveScore {
        PredictiveScore {
            structure,
            rows: Vec::new(),
            cols: Vec::new(),
            total: 0.0,
            scaled_total: 0.0,
            samples: 0,
        }
    }

    pub fn row_total(&self) -> f64 {
        self.rows.iter().map(|r| r.log_lik).sum()
    }

    pub fn col_total(&self) -> f64 {
        self.cols.iter().map(|r| r.log_lik).sum()
    }
}

/// Continues a fitted chain, keeping every `thin`-th state.
pub fn draw_samples(fitted: &State, mask: &Mask, hyper: &Hyper, n: usize, thin: usize, rng: &mut Rng) -> Result<Vec<State>> {
    let mut state = fitted.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..thin {
            gibbs_sweep(&mut state, mask, hyper, rng)?;
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// Fits `expr` to the observed block and draws posterior samples.
pub fn posterior_samples(
    expr: &Expr,
    x_obs: &DMatrix<f64>,
    mask: &Mask,
    fit: &FitConfig,
    score: &ScoreConfig,
    seed: u64,
) -> Result<Vec<State>> {
    let steps = derive(expr)?;
    let fitted = initialize_structure(x_obs, mask, &steps, fit, seed)?;
    let mut rng = rng_for(seed, &format!("samples/{}", expr));
    draw_samples(&fitted, mask, &fit.hyper, score.samples, score.thin, &mut rng)
}

/// Scores held-out rows of `x` (those in `holdout.rows`) under samples
/// fitted to the observed block.
fn score_side(
    samples: &[State],
    x: &DMatrix<f64>,
    mask: &Mask,
    holdout: &HoldoutPartition,
    config: &PredictiveConfig,
    path: &str,
    seed: u64,
) -> Result<Vec<HeldOutScore>> {
    let mut rows: Vec<HeldOutScore> = holdout
        .rows
        .iter()
        .map(|&i| HeldOutScore {
            index: i,
            log_lik: 0.0,
            per_sample: Vec::with_capacity(samples.len()),
            ais_log_weights: Vec::new(),
        })
        .collect();
    for (s, state) in samples.iter().enumerate() {
        let template = RowTemplate::new(&state.expr(), &state.components(), &state.binding())?;
        let fixed = if template.has_walks() {
            None
        } else {
            Some(template.instantiate(0)?)
        };
        for row in rows.iter_mut() {
            let i = row.index;
            let idx: Vec<usize> = (0..holdout.obs_cols.len())
                .filter(|&c| mask[(i, holdout.obs_cols[c])])
                .collect();
            if idx.is_empty() {
                row.per_sample.push(0.0);
                continue;
            }
            let xr = DVector::from_iterator(idx.len(), idx.iter().map(|&c| x[(i, holdout.obs_cols[c])]));
            let model = match &fixed {
                Some(m) => m.restrict(&idx),
                None => template.instantiate(holdout.position(i))?.restrict(&idx),
            };
            let mut rng = rng_for(seed, &format!("{path}/{i}/{s}"));
            let est = predictive_row_loglik(&xr, &model, config, &mut rng)?;
            row.per_sample.push(est.log_lik);
            if let Some(a) = est.ais {
                row.ais_log_weights.extend(a.log_weights);
            }
        }
    }
    for row in rows.iter_mut() {
        row.log_lik = log_mean_exp(&row.per_sample);
    }
    Ok(rows)
}

/// Scores posterior samples fitted to `holdout`'s observed block of `x`.
pub fn score_samples(
    samples: &[State],
    x: &DMatrix<f64>,
    mask: &Mask,
    holdout: &HoldoutPartition,
    config: &ScoreConfig,
    seed: u64,
) -> Result<PredictiveScore> {
    let structure = samples
        .first()
        .map(|s| s.expr().to_string())
        .ok_or_else(|| Error::InvalidInput("no posterior samples".into()))?;
    let rows = score_side(samples, x, mask, holdout, &config.predictive, &format!("score/{structure}/row"), seed)?;
    let cols = if holdout.cols.is_empty() {
        Vec::new()
    } else {
        let transposed: Vec<State> = samples.iter().map(State::transposed).collect();
        score_side(
            &transposed,
            &x.transpose(),
            &mask.transpose(),
            &holdout.transposed(),
            &config.predictive,
            &format!("score/{structure}/col"),
            seed,
        )?
    };
    let mut score = PredictiveScore {
        structure,
        rows,
        cols,
        total: 0.0,
        scaled_total: 0.0,
        samples: samples.len(),
    };
    let (rt, ct) = (score.row_total(), score.col_total());
    score.total = rt + ct;
    if !holdout.rows.is_empty() {
        score.scaled_total += rt * holdout.n as f64 / holdout.rows.len() as f64;
    }
    if !holdout.cols.is_empty() {
        score.scaled_total += ct * holdout.d as f64 / holdout.cols.len() as f64;
    }
    if !score.total.is_finite() {
        return Err(Error::NumericalFailure(format!("non-finite score for {}", score.structure)));
    }
    Ok(score)
}

/// Fits `expr` on the observed block and scores every held-out row and
/// column.
pub fn score_structure(
    expr: &Expr,
    x: &DMatrix<f64>,
    mask: &Mask,
    holdout: &HoldoutPartition,
    fit: &FitConfig,
    score: &ScoreConfig,
    seed: u64,
) -> Result<PredictiveScore> {
    if holdout.is_empty() {
        return Ok(PredictiveScore::empty(expr.to_string()));
    }
    let x_obs = holdout.observed_block(x);
    let mask_obs = holdout.observed_mask(mask);
    let samples = posterior_samples(expr, &x_obs, &mask_obs, fit, score, seed)?;
    score_samples(&samples, x, mask, holdout, score, seed)
}
