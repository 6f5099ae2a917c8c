//! Annealed importance sampling between a normalized reference density and
//! an unnormalized target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_mean_exp;
use crate::rng::Rng;

/// Smallest inverse temperature of the geometric part of the schedule.
const BETA_MIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AisConfig {
    /// Inverse temperatures strictly between 0 and 1.
    pub temperatures: usize,
    /// Transition-kernel applications per temperature.
    pub transitions: usize,
    /// Independent runs averaged per estimate.
    pub runs: usize,
}

impl Default for AisConfig {
    fn default() -> Self {
        AisConfig {
            temperatures: 20,
            transitions: 2,
            runs: 5,
        }
    }
}

impl AisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidInput("AIS needs at least one run".into()));
        }
        Ok(())
    }

    /// `0 = β_0 < β_1 < ... < β_{T+1} = 1`, geometric in between.
    pub fn schedule(&self) -> Vec<f64> {
        let t = self.temperatures;
        let mut betas = Vec::with_capacity(t + 2);
        betas.push(0.0);
        for i in 1..=t {
            betas.push(BETA_MIN.powf((t + 1 - i) as f64 / t as f64));
        }
        betas.push(1.0);
        betas
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisEstimate {
    /// Log of the mean importance weight.
    pub log_ratio: f64,
    pub log_weights: Vec<f64>,
}

impl AisEstimate {
    pub fn ratio(&self) -> f64 {
        self.log_ratio.exp()
    }
}

/// Estimates `Z_target / Z_reference`. `init` must draw exactly from the
/// normalized reference and `kernel(state, β)` must leave
/// `reference^(1-β) target^β` invariant.
pub fn ais_ratio<S>(
    target: impl Fn(&S) -> f64,
    reference: impl Fn(&S) -> f64,
    mut init: impl FnMut(&mut Rng) -> S,
    mut kernel: impl FnMut(&mut S, f64, &mut Rng),
    config: &AisConfig,
    rng: &mut Rng,
) -> AisEstimate {
    let betas = config.schedule();
    let mut log_weights = Vec::with_capacity(config.runs);
    for _ in 0..config.runs.max(1) {
        let mut state = init(rng);
        let mut lw = 0.0;
        for w in betas.windows(2) {
            let gap = target(&state) - reference(&state);
            if w[1] > w[0] && gap != 0.0 {
                lw += (w[1] - w[0]) * gap;
            }
            if w[1] < 1.0 {
                for _ in 0..config.transitions {
                    kernel(&mut state, w[1], rng);
                }
            }
        }
        log_weights.push(lw);
    }
    AisEstimate {
        log_ratio: log_mean_exp(&log_weights),
        log_weights,
    }
}
