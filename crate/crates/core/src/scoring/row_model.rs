//! Predictive distribution of one new row under a fitted state:
//! `x = Σ_t A_t u_t + e`, with each row latent `u_t` summarized as Gaussian,
//! one-hot, binary, or a Gaussian scale mixture.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::components::{ComponentMatrix, GaussianParams, Params};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Binding};
use crate::expr::{Expr, LeafId};
use crate::inference::FLOOR_PRECISION;
use crate::sop::{expand_for_scoring, Term, TermClass};

#[derive(Clone, Debug)]
pub(crate) enum Latent {
    /// `N(0, diag(var))`.
    Gaussian { var: DVector<f64> },
    OneHot { pi: DVector<f64> },
    Bits { pi: DVector<f64> },
    /// `exp(z) o w` with `z ~ N(z_mean, z_cov)` and `w ~ N(w_mean, diag(w_var))`.
    ScaleMixture {
        z_mean: DVector<f64>,
        z_cov: DMatrix<f64>,
        w_mean: DVector<f64>,
        w_var: DVector<f64>,
    },
}

impl Latent {
    pub fn dim(&self) -> usize {
        match self {
            Latent::Gaussian { var } => var.len(),
            Latent::OneHot { pi } | Latent::Bits { pi } => pi.len(),
            Latent::ScaleMixture { z_mean, .. } => z_mean.len(),
        }
    }

    /// Mean and covariance of the latent.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Latent::Gaussian { var } => (DVector::zeros(var.len()), DMatrix::from_diagonal(var)),
            Latent::OneHot { pi } => (pi.clone(), DMatrix::from_diagonal(pi) - pi * pi.transpose()),
            Latent::Bits { pi } => (pi.clone(), DMatrix::from_diagonal(&pi.map(|p| p * (1.0 - p)))),
            Latent::ScaleMixture { .. } => {
                let (m, v) = self.gsm_moments();
                (m, DMatrix::from_diagonal(&v))
            }
        }
    }

    /// Elementwise mean and variance of `exp(z) o w`.
    pub fn gsm_moments(&self) -> (DVector<f64>, DVector<f64>) {
        let Latent::ScaleMixture {
            z_mean,
            z_cov,
            w_mean,
            w_var,
        } = self
        else {
            unreachable!("not a scale mixture")
        };
        let k = z_mean.len();
        let e1 = DVector::from_fn(k, |i, _| (z_mean[i] + 0.5 * z_cov[(i, i)]).exp());
        let e2 = DVector::from_fn(k, |i, _| (2.0 * z_mean[i] + 2.0 * z_cov[(i, i)]).exp());
        let mean = e1.component_mul(w_mean);
        let var = DVector::from_fn(k, |i, _| e2[i] * (w_var[i] + w_mean[i] * w_mean[i]) - mean[i] * mean[i]);
        (mean, var)
    }

    fn select(&self, idx: &[usize]) -> Latent {
        let sel = |v: &DVector<f64>| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        match self {
            Latent::Gaussian { var } => Latent::Gaussian { var: sel(var) },
            Latent::OneHot { .. } => unreachable!("one-hot latents are not split by coordinate"),
            Latent::Bits { pi } => Latent::Bits { pi: sel(pi) },
            Latent::ScaleMixture {
                z_mean,
                z_cov,
                w_mean,
                w_var,
            } => Latent::ScaleMixture {
                z_mean: sel(z_mean),
                z_cov: DMatrix::from_fn(idx.len(), idx.len(), |a, b| z_cov[(idx[a], idx[b])]),
                w_mean: sel(w_mean),
                w_var: sel(w_var),
            },
        }
    }
}

/// `offset + u` enters the row through `design` (`None` is the identity).
#[derive(Clone, Debug)]
pub(crate) struct TermModel {
    pub offset: DVector<f64>,
    pub latent: Latent,
    pub design: Option<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub struct RowModel {
    pub(crate) terms: Vec<TermModel>,
    pub(crate) noise_var: DVector<f64>,
}

impl RowModel {
    pub fn dim(&self) -> usize {
        self.noise_var.len()
    }

    /// Marginal over the coordinates `idx` only.
    pub fn restrict(&self, idx: &[usize]) -> RowModel {
        let d = self.dim();
        let sel = |v: &DVector<f64>| DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]));
        let terms = self
            .terms
            .iter()
            .map(|t| match (&t.design, &t.latent) {
                (Some(a), _) => TermModel {
                    offset: t.offset.clone(),
                    latent: t.latent.clone(),
                    design: Some(a.select_rows(idx)),
                },
                (None, Latent::OneHot { .. }) => TermModel {
                    offset: t.offset.clone(),
                    latent: t.latent.clone(),
                    design: Some(DMatrix::<f64>::identity(d, d).select_rows(idx)),
                },
                (None, latent) => TermModel {
                    offset: sel(&t.offset),
                    latent: latent.select(idx),
                    design: None,
                },
            })
            .collect();
        RowModel {
            terms,
            noise_var: sel(&self.noise_var),
        }
    }

    /// Mean and covariance of the row.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::from_diagonal(&self.noise_var);
        for t in &self.terms {
            let (m, c) = t.latent.moments();
            let m = &t.offset + m;
            match &t.design {
                Some(a) => {
                    mean += a * m;
                    cov += a * c * a.transpose();
                }
                None => {
                    mean += m;
                    cov += c;
                }
            }
        }
        (mean, cov)
    }
}

/// Precision of a new row drawn under tied (or averaged) row precisions.
fn new_row_precision(g: &GaussianParams) -> f64 {
    if g.tying.rows || g.row.is_empty() {
        g.row.get(0).copied().unwrap_or(1.0)
    } else {
        g.row.mean()
    }
}

fn gaussian_var(g: &GaussianParams) -> DVector<f64> {
    let rp = new_row_precision(g);
    g.col.map(|c| 1.0 / (rp * c))
}

/// How a term's latent depends on where the new row is inserted.
#[derive(Clone, Debug)]
enum LatentTemplate {
    Fixed(Latent),
    /// A random walk of the given order with Gaussian increments: the new
    /// state is Gaussian given its observed neighbours.
    Walk {
        states: DMatrix<f64>,
        order: usize,
        inc: GaussianParams,
    },
    /// Extends the walk one step from the preceding state.
    Extension { states: DMatrix<f64>, inc: Box<LatentTemplate> },
    ScaleMixture {
        z: Box<RowTemplate>,
        w: Box<WTemplate>,
    },
}

#[derive(Clone, Debug)]
enum WTemplate {
    Leaf(DVector<f64>),
    Model(RowTemplate),
}

#[derive(Clone, Debug)]
struct TermTemplate {
    latent: LatentTemplate,
    design: Option<DMatrix<f64>>,
}

/// Position-independent part of a row model, built once per fitted state.
#[derive(Clone, Debug)]
pub struct RowTemplate {
    terms: Vec<TermTemplate>,
    noise_var: DVector<f64>,
}

struct Fitted<'a> {
    comps: &'a BTreeMap<LeafId, ComponentMatrix>,
    binding: &'a Binding,
}

impl Fitted<'_> {
    fn params(&self, id: LeafId) -> Result<&Params> {
        self.comps
            .get(&id)
            .map(|c| &c.params)
            .ok_or_else(|| Error::InvalidInput(format!("no component for leaf {id}")))
    }

    fn leaf_latent(&self, e: &Expr) -> Result<Latent> {
        let Expr::Leaf { id, .. } = e else {
            return Err(crate::sop::SopError::UnsupportedRowFactor(e.to_string()).into());
        };
        Ok(match self.params(*id)? {
            Params::Gaussian(g) => Latent::Gaussian { var: gaussian_var(g) },
            Params::Multinomial(m) => Latent::OneHot { pi: m.pi.clone() },
            Params::Bernoulli(b) => Latent::Bits { pi: b.pi.clone() },
            Params::Integration => return Err(crate::sop::SopError::UnsupportedRowFactor(e.to_string()).into()),
        })
    }

    fn scale_mixture(&self, e: &Expr) -> Result<LatentTemplate> {
        let Expr::ElemProd(a, b) = e else { unreachable!() };
        let (z, w) = match (a.as_ref(), b.as_ref()) {
            (Expr::Exp(z), w) | (w, Expr::Exp(z)) => (z.as_ref(), w),
            _ => return Err(crate::sop::SopError::UnsupportedRowFactor(e.to_string()).into()),
        };
        let z = self.template(z)?;
        let w = match w {
            Expr::Leaf { id, .. } => match self.params(*id)? {
                Params::Gaussian(g) => WTemplate::Leaf(gaussian_var(g)),
                _ => WTemplate::Model(self.template(w)?),
            },
            _ => WTemplate::Model(self.template(w)?),
        };
        Ok(LatentTemplate::ScaleMixture {
            z: Box::new(z),
            w: Box::new(w),
        })
    }

    fn term(&self, t: &Term) -> Result<TermTemplate> {
        let design = match &t.right {
            Some(r) => Some(evaluate(r, self.binding)?.transpose()),
            None => None,
        };
        let latent = match t.class {
            TermClass::Plain => LatentTemplate::Fixed(self.leaf_latent(&t.row_factor)?),
            TermClass::ScaleMixture => self.scale_mixture(&t.row_factor)?,
            TermClass::Chain { order } => {
                let states = evaluate(&t.row_factor, self.binding)?;
                let inc = t.increment();
                match inc {
                    Expr::Leaf { id, .. } if matches!(self.params(*id)?, Params::Gaussian(_)) => {
                        let Params::Gaussian(g) = self.params(*id)? else { unreachable!() };
                        LatentTemplate::Walk {
                            states,
                            order,
                            inc: g.clone(),
                        }
                    }
                    Expr::ElemProd(..) => LatentTemplate::Extension {
                        states,
                        inc: Box::new(self.scale_mixture(inc)?),
                    },
                    _ => LatentTemplate::Extension {
                        states,
                        inc: Box::new(LatentTemplate::Fixed(self.leaf_latent(inc)?)),
                    },
                }
            }
        };
        Ok(TermTemplate { latent, design })
    }

    fn template(&self, expr: &Expr) -> Result<RowTemplate> {
        let sop = expand_for_scoring(expr)?;
        let cols = evaluate(expr, self.binding)?.ncols();
        let noise_var = match &sop.noise {
            Some(Expr::Leaf { id, .. }) => match self.params(*id)? {
                Params::Gaussian(g) => gaussian_var(g),
                _ => return Err(Error::InvalidInput("noise leaf is not Gaussian".into())),
            },
            _ => DVector::from_element(cols, 1.0 / FLOOR_PRECISION),
        };
        if noise_var.len() != cols {
            return Err(Error::InvalidInput("noise leaf has the wrong width".into()));
        }
        let terms = sop.terms.iter().map(|t| self.term(t)).collect::<Result<Vec<_>>>()?;
        Ok(RowTemplate { terms, noise_var })
    }
}

impl RowTemplate {
    /// Template for rows of `expr` under the given leaf values and parameters.
    pub fn new(expr: &Expr, comps: &BTreeMap<LeafId, ComponentMatrix>, binding: &Binding) -> Result<RowTemplate> {
        Fitted { comps, binding }.template(expr)
    }

    /// True when the predictive depends on the insertion position.
    pub fn has_walks(&self) -> bool {
        self.terms.iter().any(|t| t.latent.has_walks())
    }

    /// Row model for a new row placed before the observed row `position`
    /// (equal to the number of observed rows preceding it).
    pub fn instantiate(&self, position: usize) -> Result<RowModel> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let (offset, latent) = t.latent.instantiate(position)?;
            terms.push(TermModel {
                offset,
                latent,
                design: t.design.clone(),
            });
        }
        Ok(RowModel {
            terms,
            noise_var: self.noise_var.clone(),
        })
    }
}

impl LatentTemplate {
    fn has_walks(&self) -> bool {
        match self {
            LatentTemplate::Fixed(_) => false,
            LatentTemplate::Walk { .. } | LatentTemplate::Extension { .. } => true,
            LatentTemplate::ScaleMixture { z, w } => {
                z.has_walks()
                    || match w.as_ref() {
                        WTemplate::Model(m) => m.has_walks(),
                        WTemplate::Leaf(_) => false,
                    }
            }
        }
    }

    fn instantiate(&self, position: usize) -> Result<(DVector<f64>, Latent)> {
        match self {
            LatentTemplate::Fixed(l) => Ok((DVector::zeros(l.dim()), l.clone())),
            LatentTemplate::Walk { states, order, inc } => {
                let (weights, lambda) = walk_conditional(states.nrows(), position, *order);
                let mut mean = DVector::zeros(states.ncols());
                for (s, w) in weights {
                    mean += states.row(s).transpose() * w;
                }
                let rp = new_row_precision(inc);
                let var = inc.col.map(|c| 1.0 / (lambda * rp * c));
                Ok((mean, Latent::Gaussian { var }))
            }
            LatentTemplate::Extension { states, inc } => {
                let prev = if position == 0 {
                    DVector::zeros(states.ncols())
                } else {
                    states.row(position - 1).transpose()
                };
                let (off, latent) = inc.instantiate(position)?;
                Ok((prev + off, latent))
            }
            LatentTemplate::ScaleMixture { z, w } => {
                let (z_mean, z_cov) = z.instantiate(position)?.moments();
                let (w_mean, w_var) = match w.as_ref() {
                    WTemplate::Leaf(v) => (DVector::zeros(v.len()), v.clone()),
                    WTemplate::Model(m) => {
                        let (mm, c) = m.instantiate(position)?.moments();
                        (mm, c.diagonal())
                    }
                };
                Ok((
                    DVector::zeros(z_mean.len()),
                    Latent::ScaleMixture {
                        z_mean,
                        z_cov,
                        w_mean,
                        w_var,
                    },
                ))
            }
        }
    }
}

/// Conditional of state `p` of a walk of the given order over `n + 1`
/// positions with unit increment precision, given the other `n` states
/// (observed state `s` sits at position `s` before `p` and `s + 1` after).
/// Returns observed-state weights of the conditional mean and the
/// conditional precision.
fn walk_conditional(n: usize, p: usize, order: usize) -> (Vec<(usize, f64)>, f64) {
    let len = n + 1;
    let mut c = vec![0.0; len];
    c[p] = 1.0;
    // Column p of D^k, then row p of (D^k)ᵀ D^k, with (Dv)_t = v_t - v_{t-1}.
    for _ in 0..order {
        for t in (1..len).rev() {
            c[t] -= c[t - 1];
        }
    }
    for _ in 0..order {
        for t in 0..len - 1 {
            c[t] -= c[t + 1];
        }
    }
    let lambda = c[p];
    let weights = (0..len)
        .filter(|&s| s != p && c[s] != 0.0)
        .map(|s| (if s < p { s } else { s - 1 }, -c[s] / lambda))
        .collect();
    (weights, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense conditioning of a walk with unit increments.
    fn dense(n: usize, p: usize, order: usize) -> (Vec<f64>, f64) {
        let len = n + 1;
        let mut c = crate::linalg::lower_ones(len);
        for _ in 1..order {
            c = &c * crate::linalg::lower_ones(len);
        }
        let cov = &c * c.transpose();
        let others: Vec<usize> = (0..len).filter(|&s| s != p).collect();
        let koo = DMatrix::from_fn(n, n, |a, b| cov[(others[a], others[b])]);
        let kpo = DMatrix::from_fn(1, n, |_, b| cov[(p, others[b])]);
        let inv = koo.try_inverse().unwrap();
        let w = &kpo * &inv;
        let var = cov[(p, p)] - (&w * kpo.transpose())[(0, 0)];
        (w.iter().copied().collect(), var)
    }

    #[test]
    fn walk_conditional_matches_dense() {
        for order in 1..=2 {
            for p in 0..=5 {
                let (w, lambda) = walk_conditional(5, p, order);
                let (dw, dv) = dense(5, p, order);
                assert!((1.0 / lambda - dv).abs() < 1e-8, "order {order} p {p}");
                let mut full = vec![0.0; 5];
                for (s, x) in w {
                    full[s] = x;
                }
                for s in 0..5 {
                    assert!((full[s] - dw[s]).abs() < 1e-8, "order {order} p {p} s {s}");
                }
            }
        }
    }
}
