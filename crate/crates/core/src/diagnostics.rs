//! Sampler validation by comparing the two joint simulators of Geweke's
//! test: independent draws from the prior and data, and a chain alternating
//! a Gibbs sweep with a fresh draw of the data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::components::{sample_component, ComponentMatrix, Hyper, Params, Tying};
use crate::dims::{infer_dims, LatentSizes};
use crate::error::Result;
use crate::expr::{Expr, LeafId};
use crate::inference::{gibbs_sweep, impute, Body, Mask, State};
use crate::rng::{rng_for, Rng};

/// Standard error of a correlated sequence's mean from `batches` batch means.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    assert!(size > 0, "fewer samples than batches");
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Draws every leaf of `expr` (shaped for an `n x d` matrix) from the prior.
pub fn sample_prior_state(expr: &Expr, n: usize, d: usize, latent: usize, hyper: &Hyper, rng: &mut Rng) -> Result<State> {
    let mut expr = expr.canonicalize();
    expr.renumber();
    let dims = infer_dims(&expr, n, d, &LatentSizes::uniform(latent))?;
    let mut leaves: BTreeMap<LeafId, ComponentMatrix> = BTreeMap::new();
    for l in expr.leaves() {
        let (r, c) = dims.shape(l.id).expect("every leaf has a shape");
        let (rows, cols) = dims.data_sides(l.id);
        leaves.insert(l.id, sample_component(l.kind, r, c, Tying { rows, cols }, hyper, rng)?);
    }
    State::from_expr(&expr, &leaves)
}

/// Scalar summaries of a joint state: data moments, the first entry of
/// every leaf, and the first precision of every Gaussian leaf.
pub fn test_functions(state: &State) -> Vec<(String, f64)> {
    let x = state.value();
    let len = x.len() as f64;
    let mut out = vec![
        ("mean(X)".to_string(), x.sum() / len),
        ("mean(X^2)".to_string(), x.norm_squared() / len),
    ];
    state.root.for_each_leaf(&mut |node| {
        if let Body::Leaf { id, params } = &node.body {
            if node.value.is_empty() || matches!(params, Params::Integration) {
                return;
            }
            out.push((format!("leaf{id}[0,0]"), node.value[(0, 0)]));
            if let Params::Gaussian(g) = params {
                out.push((format!("leaf{id}.precision[0,0]"), g.precision(0, 0)));
            }
        }
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    /// 1 for the mean of the function, 2 for the mean of its square.
    pub moment: u32,
    pub marginal: f64,
    pub successive: f64,
    /// Difference in units of the combined standard error.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GewekeReport {
    pub structure: String,
    pub samples: usize,
    pub checks: Vec<MomentCheck>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.checks.iter().map(|c| c.z.abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GewekeConfig {
    pub n: usize,
    pub d: usize,
    pub latent: usize,
    pub samples: usize,
    /// Sweeps between retained states of the successive-conditional chain.
    pub thin: usize,
    pub batches: usize,
    pub hyper: Hyper,
    /// Hyperpriors used by the chain in place of `hyper`; a mismatch makes
    /// the test fail, which checks its power.
    pub chain_hyper: Option<Hyper>,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            n: 6,
            d: 4,
            latent: 2,
            samples: 10_000,
            thin: 20,
            batches: 50,
            hyper: Hyper {
                precision_shape: 10.0,
                precision_rate: 10.0,
                ..Hyper::default()
            },
            chain_hyper: None,
        }
    }
}

pub fn geweke(expr: &Expr, config: &GewekeConfig, seed: u64) -> Result<GewekeReport> {
    let mut rng = rng_for(seed, &format!("geweke/{expr}/marginal"));
    let mut marginal: Vec<Vec<(String, f64)>> = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let s = sample_prior_state(expr, config.n, config.d, config.latent, &config.hyper, &mut rng)?;
        marginal.push(test_functions(&s));
    }

    let mut rng = rng_for(seed, &format!("geweke/{expr}/successive"));
    let mask = Mask::from_element(config.n, config.d, true);
    let mut state = sample_prior_state(expr, config.n, config.d, config.latent, &config.hyper, &mut rng)?;
    let chain_hyper = config.chain_hyper.unwrap_or(config.hyper);
    let mut successive = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        for _ in 0..config.thin {
            gibbs_sweep(&mut state, &mask, &chain_hyper, &mut rng)?;
            impute(&mut state, None, &mut rng);
        }
        successive.push(test_functions(&state));
    }

    let names: Vec<String> = marginal[0].iter().map(|(n, _)| n.clone()).collect();
    let mut checks = Vec::new();
    for (k, name) in names.iter().enumerate() {
        for moment in [1, 2] {
            let f = |v: f64| if moment == 1 { v } else { v * v };
            let a: Vec<f64> = marginal.iter().map(|s| f(s[k].1)).collect();
            let b: Vec<f64> = successive.iter().map(|s| f(s[k].1)).collect();
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
            let se = (va / a.len() as f64 + batch_means_se(&b, config.batches).powi(2)).sqrt();
            checks.push(MomentCheck {
                name: name.clone(),
                moment,
                marginal: ma,
                successive: mb,
                z: if se > 0.0 { (ma - mb) / se } else { 0.0 },
            });
        }
    }
    Ok(GewekeReport {
        structure: expr.to_string(),
        samples: config.samples,
        checks,
    })
}
