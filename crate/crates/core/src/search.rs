//! Greedy level-wise search over structures.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::components::{one_hot_index, Params};
use crate::dims::DimVar;
use crate::error::{Error, Result};
use crate::expr::{Expr, Kind, LeafId};
use crate::grammar::{replay, successors, Step};
use crate::inference::{Body, FitConfig, Fitter, Mask, State};
use crate::rng::rng_for;
use crate::scoring::{default_holdout_count, draw_samples, make_holdout, score_samples, HoldoutPartition, PredictiveScore, ScoreConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Structures expanded per level.
    #[serde(rename = "K")]
    pub k: usize,
    pub max_level: usize,
    /// Held-out row count; defaults to a tenth of the rows.
    pub holdout_rows: Option<usize>,
    pub holdout_cols: Option<usize>,
    pub holdout_fraction: f64,
    pub fit: FitConfig,
    pub score: ScoreConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 3,
            max_level: 4,
            holdout_rows: None,
            holdout_cols: None,
            holdout_fraction: 0.1,
            fit: FitConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidInput("K must be at least 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidInput("holdout fraction must lie in (0, 1)".into()));
        }
        self.fit.hyper.validate()?;
        self.score.validate()
    }

    pub fn holdout(&self, n: usize, d: usize, seed: u64) -> Result<HoldoutPartition> {
        let rows = self.holdout_rows.unwrap_or_else(|| default_holdout_count(n, self.holdout_fraction));
        let cols = self.holdout_cols.unwrap_or_else(|| default_holdout_count(d, self.holdout_fraction));
        make_holdout(n, d, rows, cols, seed)
    }
}

/// A fitted leaf: its shape, what its sides index, and its prior parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub leaf: LeafId,
    pub kind: Kind,
    pub rows: usize,
    pub cols: usize,
    pub row_dim: DimVar,
    pub col_dim: DimVar,
    pub params: Params,
    /// Cluster of every row, for one-hot leaves.
    pub assignments: Option<Vec<usize>>,
}

pub fn summarize(state: &State) -> Result<Vec<ComponentSummary>> {
    let dims = state.dims()?;
    let mut out = Vec::new();
    state.root.for_each_leaf(&mut |node| {
        if let Body::Leaf { id, params } = &node.body {
            let (row_dim, col_dim) = dims.vars[id];
            let assignments = matches!(params, Params::Multinomial(_)).then(|| {
                (0..node.value.nrows())
                    .map(|i| one_hot_index(&node.value, i).unwrap_or(0))
                    .collect()
            });
            out.push(ComponentSummary {
                leaf: *id,
                kind: params.kind(),
                rows: node.value.nrows(),
                cols: node.value.ncols(),
                row_dim,
                col_dim,
                params: params.clone(),
                assignments,
            });
        }
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub structure: String,
    pub derivation: Vec<Step>,
    /// The expanded structure this one was first reached from.
    pub parent: Option<String>,
    /// Scaled held-out log-likelihood; `-inf` (null in JSON) when fitting
    /// or scoring failed.
    #[serde(with = "neg_inf_as_null")]
    pub value: f64,
    pub score: Option<PredictiveScore>,
    /// Leaves of the last posterior sample.
    pub components: Vec<ComponentSummary>,
    pub error: Option<String>,
}

impl Candidate {
    pub fn scored(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub level: usize,
    /// Best first; ties broken by structure text.
    pub candidates: Vec<Candidate>,
}

impl Level {
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates.first().filter(|c| c.scored())
    }

    pub fn best_value(&self) -> f64 {
        self.best().map_or(f64::NEG_INFINITY, |c| c.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The newest level's best did not improve enough on the previous one.
    NoImprovement,
    MaxLevel,
    /// Nothing at the newest level could be scored.
    NothingScored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub n: usize,
    pub d: usize,
    pub holdout: HoldoutPartition,
    pub levels: Vec<Level>,
    pub chosen_level: usize,
    pub chosen: String,
    pub stop: StopReason,
}

/// Whether a level's best improves on the previous level's best by more
/// than one nat per row-plus-column.
pub fn stopping_decision(prev: f64, new: f64, n: usize, d: usize) -> bool {
    if !new.is_finite() {
        return false;
    }
    if !prev.is_finite() {
        return true;
    }
    (new - prev) / (n + d) as f64 > 1.0
}

/// The last level of the unbroken chain of accepted improvements from `G`.
pub fn select_final(levels: &[Level], n: usize, d: usize) -> usize {
    let mut chosen = 0;
    for l in 1..levels.len() {
        if stopping_decision(levels[l - 1].best_value(), levels[l].best_value(), n, d) {
            chosen = l;
        } else {
            break;
        }
    }
    chosen
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

fn rank(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.structure.cmp(&b.structure)));
}

struct Scorer<'a> {
    x: &'a DMatrix<f64>,
    mask: &'a Mask,
    holdout: &'a HoldoutPartition,
    fitter: Fitter,
    score: &'a ScoreConfig,
    seed: u64,
}

impl Scorer<'_> {
    fn evaluate(&self, structure: String, derivation: Vec<Step>, parent: Option<String>) -> Candidate {
        let result = self.fitter.fit(&derivation).and_then(|fitted| {
            if self.holdout.is_empty() {
                return Ok((PredictiveScore::empty(structure.clone()), summarize(&fitted)?));
            }
            let mut rng = rng_for(self.seed, &format!("samples/{structure}"));
            let cfg = self.fitter.config();
            let samples = draw_samples(&fitted, self.fitter.mask(), &cfg.hyper, self.score.samples, self.score.thin, &mut rng)?;
            let score = score_samples(&samples, self.x, self.mask, self.holdout, self.score, self.seed)?;
            let last = samples.last().unwrap_or(&fitted);
            Ok((score, summarize(last)?))
        });
        match result {
            Ok((score, components)) => Candidate {
                structure,
                derivation,
                parent,
                value: score.scaled_total,
                score: Some(score),
                components,
                error: None,
            },
            Err(e) => {
                log::warn!("{structure}: {e}");
                Candidate {
                    structure,
                    derivation,
                    parent,
                    value: f64::NEG_INFINITY,
                    score: None,
                    components: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        }
    }
}

/// Scores `G`, then repeatedly expands the best `k` structures of the
/// newest level by one production until the best stops improving.
pub fn greedy_search(x: &DMatrix<f64>, mask: &Mask, config: &SearchConfig, seed: u64) -> Result<SearchResult> {
    config.validate()?;
    if mask.shape() != x.shape() {
        return Err(Error::InvalidInput("mask shape differs from data".into()));
    }
    let (n, d) = x.shape();
    let holdout = config.holdout(n, d, seed)?;
    let scorer = Scorer {
        x,
        mask,
        holdout: &holdout,
        fitter: Fitter::new(&holdout.observed_block(x), &holdout.observed_mask(mask), config.fit.clone(), seed),
        score: &config.score,
        seed,
    };

    let root = scorer.evaluate(Expr::g().to_string(), Vec::new(), None);
    if let Some(e) = &root.error {
        return Err(Error::NumericalFailure(format!("structureless model: {e}")));
    }
    log::info!("level 0: G {:.2}", root.value);
    let mut levels = vec![Level { level: 0, candidates: vec![root] }];
    let mut seen: HashSet<String> = HashSet::from([Expr::g().to_string()]);
    let mut stop = StopReason::MaxLevel;

    for level in 1..=config.max_level {
        let prev = levels.last().expect("level 0 exists");
        let mut pending = Vec::new();
        for parent in prev.candidates.iter().filter(|c| c.scored()).take(config.k) {
            let expr = replay(&parent.derivation)?;
            for s in successors(&expr) {
                let text = s.expr.to_string();
                if seen.insert(text.clone()) {
                    let mut derivation = parent.derivation.clone();
                    derivation.push(s.step);
                    pending.push((text, derivation, Some(parent.structure.clone())));
                }
            }
        }
        if pending.is_empty() {
            stop = StopReason::NothingScored;
            break;
        }
        let mut candidates: Vec<Candidate> = pending
            .into_par_iter()
            .map(|(text, derivation, parent)| scorer.evaluate(text, derivation, parent))
            .collect();
        rank(&mut candidates);
        let current = Level { level, candidates };
        match current.best() {
            Some(b) => log::info!("level {level}: best {} {:.2} of {}", b.structure, b.value, current.candidates.len()),
            None => log::info!("level {level}: nothing scored"),
        }
        let prev_best = prev.best_value();
        let accepted = stopping_decision(prev_best, current.best_value(), n, d);
        let none_scored = current.best().is_none();
        levels.push(current);
        if none_scored {
            stop = StopReason::NothingScored;
            break;
        }
        if !accepted {
            stop = StopReason::NoImprovement;
            break;
        }
    }

    let chosen_level = select_final(&levels, n, d);
    let chosen = levels[chosen_level].best().expect("chosen level has a scored best").structure.clone();
    Ok(SearchResult {
        n,
        d,
        holdout,
        levels,
        chosen_level,
        chosen,
        stop,
    })
}
