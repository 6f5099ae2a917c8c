//! Per-rule initialization and incremental fitting along a derivation.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chain::init_row_chain;
use super::clusters::init_row_clusters;
use super::features::init_row_features;
use super::gibbs::gibbs_sweep;
use super::low_rank::init_low_rank;
use super::state::{Body, Node, State};
use super::Mask;
use crate::components::{sample_beta, BernoulliParams, GaussianParams, Hyper, Params, Tying};
use crate::error::{Error, Result};
use crate::expr::Kind;
use crate::grammar::{apply, Rule, Step};
use crate::linalg::std_normal_mat;
use crate::rng::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Sweeps of each specialized initializer; the last sample is kept.
    pub sweeps: usize,
    /// Poisson mean of the prior over low-rank dimension.
    pub rank_rate: f64,
    /// Upper bound on the low-rank dimension (also capped by the matrix size).
    pub max_rank: usize,
    /// Reversible-jump proposals per low-rank sweep.
    pub rj_moves: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            sweeps: 200,
            rank_rate: 5.0,
            max_rank: 100,
            rj_moves: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub hyper: Hyper,
    pub init: InitConfig,
    /// Generic Gibbs sweeps over the whole structure after each rule.
    pub sweeps_per_step: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            hyper: Hyper::default(),
            init: InitConfig::default(),
            sweeps_per_step: 100,
        }
    }
}

/// Inverse mean square, a scale-aware starting precision.
pub(crate) fn precision_guess(s: &DMatrix<f64>) -> f64 {
    if s.is_empty() {
        return 1.0;
    }
    let ms = s.norm_squared() / s.len() as f64;
    (1.0 / ms.max(1e-12)).min(1e12)
}

/// Gaussian parameters started at `precision` and refined by a few
/// conditional updates given `value`.
pub(crate) fn fit_gaussian_params(value: &DMatrix<f64>, precision: f64, tying: Tying, hyper: &Hyper, rng: &mut Rng) -> GaussianParams {
    let (r, c) = value.shape();
    let mut g = GaussianParams::constant(r, c, precision, tying);
    for _ in 0..3 {
        g.resample(value, hyper, rng);
    }
    g
}

fn gaussian_leaf(value: DMatrix<f64>, tying: Tying, hyper: &Hyper, rng: &mut Rng) -> Node {
    let g = fit_gaussian_params(&value, precision_guess(&value), tying, hyper, rng);
    Node::leaf(0, value, Params::Gaussian(g))
}

fn with_value(mut node: Node, s: &DMatrix<f64>) -> Node {
    node.value = s.clone();
    node
}

/// `X -> X G + G` for a one-hot or binary `X`, starting from the identity
/// assignment and small random weights.
fn init_transform(s: &DMatrix<f64>, params: &Params, tying: Tying, hyper: &Hyper, rng: &mut Rng) -> Node {
    let k = s.ncols();
    let g = std_normal_mat(k, k, rng) * 0.1;
    let e = s - s * &g;
    let x = Node::leaf(0, s.clone(), params.clone());
    let g = gaussian_leaf(g, Tying { rows: false, cols: tying.cols }, hyper, rng);
    let e = gaussian_leaf(e, tying, hyper, rng);
    with_value(Node::sum(vec![Node::product(x, g)], e), s)
}

fn init_scale_mixture(s: &DMatrix<f64>, tying: Tying, hyper: &Hyper, rng: &mut Rng) -> Node {
    let (n, m) = s.shape();
    let z = std_normal_mat(n, m, rng) * 0.5;
    let w = s.component_mul(&z.map(|v| (-v).exp()));
    let z = gaussian_leaf(z, tying, hyper, rng);
    let w = gaussian_leaf(w, tying, hyper, rng);
    let mut node = Node::elem_prod(z, w);
    node.value = s.clone();
    node
}

fn init_relax(s: &DMatrix<f64>, hyper: &Hyper, rng: &mut Rng) -> Node {
    let n = s.nrows() as f64;
    let pi = DVector::from_fn(s.ncols(), |c, _| {
        let ones = s.column(c).sum();
        sample_beta(hyper.beta_a + ones, hyper.beta_b + n - ones, rng)
    });
    Node::leaf(0, s.clone(), Params::Bernoulli(BernoulliParams { pi }))
}

/// Fits the right-hand side of `rule` to the current value `s` of the
/// rewritten leaf. The returned subtree evaluates exactly to `s`.
pub fn initialize_for_rule(
    rule: Rule,
    s: &DMatrix<f64>,
    site: &Params,
    tying: Tying,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<Node> {
    let (hyper, cfg) = (&config.hyper, &config.init);
    let expected = rule.pattern();
    if site.kind() != expected {
        return Err(Error::InvalidInput(format!(
            "rule {rule} rewrites {expected}, not {}",
            site.kind()
        )));
    }
    let transposed = |f: &dyn Fn(&DMatrix<f64>, Tying, &mut Rng) -> Result<Node>, rng: &mut Rng| -> Result<Node> {
        let node = f(&s.transpose(), tying.swapped(), rng)?;
        Ok(with_value(node.transposed(), s))
    };
    let node = match rule {
        Rule::LowRank => init_low_rank(s, tying, hyper, cfg, rng)?,
        Rule::RowClusters => init_row_clusters(s, tying, hyper, cfg, rng)?,
        Rule::ColClusters => transposed(&|st, t, r| init_row_clusters(st, t, hyper, cfg, r), rng)?,
        Rule::RowChain => init_row_chain(s, tying, hyper, cfg, rng)?,
        Rule::ColChain => transposed(&|st, t, r| init_row_chain(st, t, hyper, cfg, r), rng)?,
        Rule::RowFeatures => init_row_features(s, tying, hyper, cfg, rng)?,
        Rule::ColFeatures => transposed(&|st, t, r| init_row_features(st, t, hyper, cfg, r), rng)?,
        Rule::ClusterTransform | Rule::FeatureTransform => init_transform(s, site, tying, hyper, rng),
        Rule::ScaleMixture => init_scale_mixture(s, tying, hyper, rng),
        Rule::RelaxClusters => init_relax(s, hyper, rng),
    };
    Ok(node)
}

/// Overwrites Gaussian tying flags with those implied by the structure,
/// collapsing newly tied sides to their geometric mean.
fn retie(state: &mut State) -> Result<()> {
    let tying = state.tying()?;
    state.root.for_each_leaf_mut(&mut |n| {
        if let Body::Leaf {
            id,
            params: Params::Gaussian(g),
        } = &mut n.body
        {
            let t = tying[id];
            if t.rows && !g.tying.rows && !g.row.is_empty() {
                let gm = g.row.map(f64::ln).mean().exp();
                g.row.fill(gm);
            }
            if t.cols && !g.tying.cols && !g.col.is_empty() {
                let gm = g.col.map(f64::ln).mean().exp();
                g.col.fill(gm);
            }
            g.tying = t;
        }
    });
    Ok(())
}

/// Fills unobserved entries with their column's observed mean.
pub fn fill_missing(x: &DMatrix<f64>, mask: &Mask) -> DMatrix<f64> {
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let (mut s, mut c) = (0.0, 0usize);
        for i in 0..x.nrows() {
            if mask[(i, j)] {
                s += x[(i, j)];
                c += 1;
            }
        }
        let mean = if c > 0 { s / c as f64 } else { 0.0 };
        for i in 0..x.nrows() {
            if !mask[(i, j)] {
                out[(i, j)] = mean;
            }
        }
    }
    out
}

/// Fits structures to one data matrix, reusing the fitted parent of each
/// structure so that every fit runs exactly one initializer.
pub struct Fitter {
    x: DMatrix<f64>,
    mask: Mask,
    config: FitConfig,
    seed: u64,
    cache: Mutex<HashMap<String, State>>,
    init_calls: AtomicUsize,
}

impl Fitter {
    pub fn new(x: &DMatrix<f64>, mask: &Mask, config: FitConfig, seed: u64) -> Fitter {
        Fitter {
            x: fill_missing(x, mask),
            mask: mask.clone(),
            config,
            seed,
            cache: Mutex::new(HashMap::new()),
            init_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Number of specialized initializer runs so far.
    pub fn init_calls(&self) -> usize {
        self.init_calls.load(Ordering::SeqCst)
    }

    pub fn cached(&self, text: &str) -> Option<State> {
        self.cache.lock().unwrap().get(text).cloned()
    }

    fn sweeps(&self, state: &mut State, rng: &mut Rng) -> Result<()> {
        for _ in 0..self.config.sweeps_per_step {
            gibbs_sweep(state, &self.mask, &self.config.hyper, rng)?;
        }
        state.root.absorb_floors();
        Ok(())
    }

    fn fit_root(&self) -> Result<State> {
        let mut rng = rng_for(self.seed, "fit/G");
        let mut state = State::structureless(self.x.clone(), precision_guess(&self.x));
        self.sweeps(&mut state, &mut rng)?;
        Ok(state)
    }

    /// Applies one production to a fitted state: initializes the new
    /// sub-structure from the rewritten leaf's value, then runs generic sweeps.
    pub fn extend(&self, parent: &State, step: Step) -> Result<State> {
        let target = apply(&parent.expr(), step)?;
        let text = target.to_string();
        let mut rng = rng_for(self.seed, &format!("fit/{text}"));
        let tying = parent.tying()?;
        let leaf = parent
            .leaf(step.site)
            .ok_or_else(|| Error::InvalidInput(format!("no leaf {} in {}", step.site, parent.expr())))?;
        let Body::Leaf { params, .. } = &leaf.body else { unreachable!() };
        let transposed = parent
            .expr()
            .find_leaf(step.site)
            .map(|site| site.transposed)
            .unwrap_or(false);
        let (rows, cols) = (tying[&step.site].rows, tying[&step.site].cols);
        self.init_calls.fetch_add(1, Ordering::SeqCst);
        let mut node = initialize_for_rule(step.rule, &leaf.value, params, Tying { rows, cols }, &self.config, &mut rng)?;
        if transposed {
            node = node.transposed();
        }
        let mut state = parent.clone();
        state.splice(step.site, node, step)?;
        if state.expr() != target {
            return Err(Error::InvalidInput(format!(
                "spliced tree {} does not match {}",
                state.expr(),
                target
            )));
        }
        retie(&mut state)?;
        self.sweeps(&mut state, &mut rng)?;
        Ok(state)
    }

    /// Fits the structure reached by `derivation`, starting from the longest
    /// cached prefix.
    pub fn fit(&self, derivation: &[Step]) -> Result<State> {
        let mut texts = vec![Kind::G.to_string()];
        let mut e = crate::expr::Expr::g();
        for &step in derivation {
            e = apply(&e, step)?;
            texts.push(e.to_string());
        }
        let start = (0..texts.len()).rev().find_map(|j| self.cached(&texts[j]).map(|s| (j, s)));
        let (mut j, mut state) = match start {
            Some(found) => found,
            None => {
                let s = self.fit_root()?;
                self.cache.lock().unwrap().insert(texts[0].clone(), s.clone());
                (0, s)
            }
        };
        while j < derivation.len() {
            state = self.extend(&state, derivation[j])?;
            j += 1;
            self.cache.lock().unwrap().entry(texts[j].clone()).or_insert_with(|| state.clone());
        }
        Ok(state)
    }
}

/// Fits a structure from scratch along `derivation`.
pub fn initialize_structure(
    x: &DMatrix<f64>,
    mask: &Mask,
    derivation: &[Step],
    config: &FitConfig,
    seed: u64,
) -> Result<State> {
    Fitter::new(x, mask, config.clone(), seed).fit(derivation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::expr::Expr;
    use crate::grammar::derive;
    use crate::linalg::relative_error;
    use crate::rng::seeded;

    fn quick() -> FitConfig {
        FitConfig {
            init: InitConfig {
                sweeps: 10,
                ..InitConfig::default()
            },
            sweeps_per_step: 5,
            ..FitConfig::default()
        }
    }

    #[test]
    fn every_rule_reconstructs_its_input() {
        let mut rng = seeded(21);
        let g = std_normal_mat(9, 7, &mut rng);
        let onehot = DMatrix::from_fn(9, 3, |i, c| if i % 3 == c { 1.0 } else { 0.0 });
        let gp = Params::Gaussian(GaussianParams::constant(9, 7, 1.0, Tying::DATA));
        let mp = Params::Multinomial(crate::components::MultinomialParams {
            pi: DVector::from_element(3, 1.0 / 3.0),
        });
        let bp = Params::Bernoulli(BernoulliParams {
            pi: DVector::from_element(3, 0.5),
        });
        for rule in crate::grammar::ALL_RULES {
            let (s, p) = match rule.pattern() {
                Kind::G => (&g, &gp),
                Kind::M => (&onehot, &mp),
                _ => (&onehot, &bp),
            };
            let node = initialize_for_rule(rule, s, p, Tying { rows: true, cols: rule.pattern() == Kind::G }, &quick(), &mut rng).unwrap();
            let mut state = State::from_root(node.clone(), Vec::new());
            state.root.renumber();
            let v = evaluate(&state.expr(), &state.binding()).unwrap();
            assert!(relative_error(&v, s) < 1e-12, "rule {rule}");
            assert_eq!(&node.value, s);
        }
    }

    #[test]
    fn fitted_structures_reconstruct_observed_data() {
        let mut rng = seeded(22);
        let x = std_normal_mat(10, 8, &mut rng);
        let mask = DMatrix::from_fn(10, 8, |i, j| (i + 2 * j) % 7 != 0);
        for text in ["GG+G", "M(GM'+G)+G", "(exp(G)oG)G+G", "CG+G", "B(GG+G)+G", "(BG+G)G+G", "GC'+G", "(MG+G)G+G"] {
            let expr = Expr::parse(text).unwrap();
            let steps = derive(&expr).unwrap();
            let state = initialize_structure(&x, &mask, &steps, &quick(), 5).unwrap();
            assert_eq!(state.expr(), expr);
            let v = evaluate(&state.expr(), &state.binding()).unwrap();
            for j in 0..8 {
                for i in 0..10 {
                    if mask[(i, j)] {
                        assert!((v[(i, j)] - x[(i, j)]).abs() <= 1e-9 * x.norm(), "{text}");
                    }
                }
            }
        }
    }

    #[test]
    fn cached_parent_means_one_initializer_per_child() {
        let mut rng = seeded(23);
        let x = std_normal_mat(8, 6, &mut rng);
        let mask = DMatrix::from_element(8, 6, true);
        let fitter = Fitter::new(&x, &mask, quick(), 1);
        let steps = derive(&Expr::parse("GG+G").unwrap()).unwrap();
        fitter.fit(&steps).unwrap();
        assert_eq!(fitter.init_calls(), 1);
        let succ = &crate::grammar::successors(&Expr::parse("GG+G").unwrap())[0];
        let mut child = steps.clone();
        child.push(succ.step);
        assert_eq!(fitter.fit(&child).unwrap().expr(), succ.expr);
        assert_eq!(fitter.init_calls(), 2);
    }
}
