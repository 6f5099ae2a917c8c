//! Log predictive density of one row under one fitted state.
//!
//! Gaussian latents are integrated out exactly. Scale mixtures are replaced
//! by moment-matched Gaussians, and the discrete latents of the resulting
//! model are handled by a mean-field bound. When scale mixtures are present
//! the gap between the true predictive and that bound is estimated by AIS,
//! started from the prior over scales and the mean-field posterior over the
//! discrete latents.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ais::{ais_ratio, AisConfig, AisEstimate};
use super::gauss::{Factor, LowRankGaussian};
use super::row_model::{Latent, RowModel};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, elliptical_slice, log_sigmoid, sample_bit, sample_log_weights, std_normal_vec};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictiveConfig {
    pub ais: AisConfig,
    /// Cap on coordinate-ascent sweeps of the mean-field bound.
    pub vb_sweeps: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        PredictiveConfig {
            ais: AisConfig::default(),
            vb_sweeps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowEstimate {
    pub log_lik: f64,
    /// Mean-field bound on the Gaussian-approximated model.
    pub bound: f64,
    pub ais: Option<AisEstimate>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum DiscreteKind {
    OneHot,
    Bits,
}

struct Discrete {
    kind: DiscreteKind,
    pi: DVector<f64>,
    phi: DVector<f64>,
    design: DMatrix<f64>,
    /// First column in the concatenated discrete design.
    start: usize,
}

struct Mixture {
    design: Option<DMatrix<f64>>,
    z_mean: DVector<f64>,
    z_chol: DMatrix<f64>,
    w_mean: DVector<f64>,
    w_var: DVector<f64>,
    /// Position of this term's variances in the low-rank part.
    start: usize,
}

/// Everything the bound and the sampler share for one row.
struct Setup {
    resid: DVector<f64>,
    gauss: LowRankGaussian,
    /// Variances of the low-rank part; scale-mixture slots hold the
    /// moment-matched values until overwritten.
    s: DVector<f64>,
    discrete: Vec<Discrete>,
    mixtures: Vec<Mixture>,
}

fn ln(p: f64) -> f64 {
    p.max(1e-300).ln()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * ln(y)
    }
}

impl Setup {
    fn new(x: &DVector<f64>, model: &RowModel) -> Result<Setup> {
        let d = x.len();
        if model.dim() != d {
            return Err(Error::InvalidInput(format!("row has {d} entries, model {}", model.dim())));
        }
        let mut resid = x.clone();
        let mut base = model.noise_var.clone();
        let mut cols: Vec<DMatrix<f64>> = Vec::new();
        let mut s: Vec<f64> = Vec::new();
        let mut discrete = Vec::new();
        let mut mixtures = Vec::new();
        let mut disc_cols = 0;
        for t in &model.terms {
            match &t.design {
                Some(a) => resid -= a * &t.offset,
                None => resid -= &t.offset,
            }
            match &t.latent {
                Latent::Gaussian { var } => match &t.design {
                    Some(a) => {
                        cols.push(a.clone());
                        s.extend(var.iter());
                    }
                    None => base += var,
                },
                Latent::OneHot { pi } | Latent::Bits { pi } => {
                    let design = t.design.clone().unwrap_or_else(|| DMatrix::identity(d, d));
                    let kind = if matches!(t.latent, Latent::OneHot { .. }) {
                        DiscreteKind::OneHot
                    } else {
                        DiscreteKind::Bits
                    };
                    discrete.push(Discrete {
                        kind,
                        pi: pi.clone(),
                        phi: pi.clone(),
                        design,
                        start: disc_cols,
                    });
                    disc_cols += pi.len();
                }
                Latent::ScaleMixture {
                    z_mean,
                    z_cov,
                    w_mean,
                    w_var,
                } => {
                    let start = s.len();
                    if let Some(a) = &t.design {
                        cols.push(a.clone());
                        s.extend(std::iter::repeat_n(0.0, z_mean.len()));
                    }
                    mixtures.push(Mixture {
                        design: t.design.clone(),
                        z_mean: z_mean.clone(),
                        z_chol: cholesky(z_cov)?.l(),
                        w_mean: w_mean.clone(),
                        w_var: w_var.clone(),
                        start,
                    });
                }
            }
        }
        let k: usize = cols.iter().map(|c| c.ncols()).sum();
        let mut a = DMatrix::zeros(d, k);
        let mut at = 0;
        for c in &cols {
            a.columns_mut(at, c.ncols()).copy_from(c);
            at += c.ncols();
        }
        Ok(Setup {
            resid,
            gauss: LowRankGaussian::new(base, a),
            s: DVector::from_vec(s),
            discrete,
            mixtures,
        })
    }

    /// Mean shift, low-rank variances and extra diagonal for given scales.
    fn mixture_terms(&self, z: Option<&[DVector<f64>]>) -> (DVector<f64>, DVector<f64>, Option<DVector<f64>>) {
        let d = self.resid.len();
        let mut shift = DVector::zeros(d);
        let mut s = self.s.clone();
        let mut extra: Option<DVector<f64>> = None;
        for (i, m) in self.mixtures.iter().enumerate() {
            let (mean, var) = match z {
                Some(z) => {
                    let e = z[i].map(f64::exp);
                    (e.component_mul(&m.w_mean), e.map(|v| v * v).component_mul(&m.w_var))
                }
                None => {
                    let cov = &m.z_chol * m.z_chol.transpose();
                    Latent::ScaleMixture {
                        z_mean: m.z_mean.clone(),
                        z_cov: cov,
                        w_mean: m.w_mean.clone(),
                        w_var: m.w_var.clone(),
                    }
                    .gsm_moments()
                }
            };
            match &m.design {
                Some(a) => {
                    shift += a * mean;
                    s.rows_mut(m.start, var.len()).copy_from(&var);
                }
                None => {
                    shift += mean;
                    match &mut extra {
                        Some(e) => *e += var,
                        None => extra = Some(var),
                    }
                }
            }
        }
        (shift, s, extra)
    }

    /// Mean-field bound with the scale mixtures moment-matched.
    fn bound(&mut self, sweeps: usize) -> Result<f64> {
        let (shift, s, extra) = self.mixture_terms(None);
        let factor = self.gauss.factor(&s, extra.as_ref())?;
        let r = &self.resid - shift;
        let pr = factor.solve(&r);
        let quad_r = r.dot(&pr);
        let total: usize = self.discrete.iter().map(|g| g.pi.len()).sum();
        let d = r.len() as f64;
        if total == 0 {
            return Ok(-0.5 * (d * LN_2PI + factor.logdet() + quad_r));
        }
        let mut a = DMatrix::zeros(r.len(), total);
        for g in &self.discrete {
            a.columns_mut(g.start, g.pi.len()).copy_from(&g.design);
        }
        let h = a.transpose() * &pr;
        let gram = a.transpose() * factor.solve_mat(&a);
        let mut phi = DVector::zeros(total);
        for g in &self.discrete {
            phi.rows_mut(g.start, g.pi.len()).copy_from(&g.phi);
        }
        for _ in 0..sweeps {
            let mut delta: f64 = 0.0;
            for g in &self.discrete {
                let k = g.pi.len();
                match g.kind {
                    DiscreteKind::OneHot => {
                        let mut cross = &gram.rows(g.start, k) * &phi;
                        cross -= gram.view((g.start, g.start), (k, k)) * phi.rows(g.start, k);
                        let logits: Vec<f64> = (0..k)
                            .map(|c| {
                                let j = g.start + c;
                                ln(g.pi[c]) + h[j] - cross[c] - 0.5 * gram[(j, j)]
                            })
                            .collect();
                        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = w.iter().sum();
                        for c in 0..k {
                            let v = w[c] / z;
                            delta = delta.max((v - phi[g.start + c]).abs());
                            phi[g.start + c] = v;
                        }
                    }
                    DiscreteKind::Bits => {
                        for c in 0..k {
                            let j = g.start + c;
                            let cross = gram.row(j).dot(&phi.transpose()) - gram[(j, j)] * phi[j];
                            let eta = ln(g.pi[c]) - ln(1.0 - g.pi[c]) + h[j] - cross - 0.5 * gram[(j, j)];
                            let v = log_sigmoid(eta).exp();
                            delta = delta.max((v - phi[j]).abs());
                            phi[j] = v;
                        }
                    }
                }
            }
            if delta < 1e-10 {
                break;
            }
        }
        let mut quad = quad_r - 2.0 * h.dot(&phi) + phi.dot(&(&gram * &phi));
        let mut prior_entropy = 0.0;
        for g in self.discrete.iter_mut() {
            let k = g.pi.len();
            let p = phi.rows(g.start, k).into_owned();
            match g.kind {
                DiscreteKind::OneHot => {
                    let block = gram.view((g.start, g.start), (k, k));
                    quad -= p.dot(&(block * &p));
                    for c in 0..k {
                        quad += p[c] * gram[(g.start + c, g.start + c)];
                        prior_entropy += xlogy(p[c], g.pi[c]) - xlogy(p[c], p[c]);
                    }
                }
                DiscreteKind::Bits => {
                    for c in 0..k {
                        let j = g.start + c;
                        quad += p[c] * (1.0 - p[c]) * gram[(j, j)];
                        prior_entropy += xlogy(p[c], g.pi[c]) - xlogy(p[c], p[c]) + xlogy(1.0 - p[c], 1.0 - g.pi[c])
                            - xlogy(1.0 - p[c], 1.0 - p[c]);
                    }
                }
            }
            g.phi = p;
        }
        Ok(-0.5 * (d * LN_2PI + factor.logdet() + quad) + prior_entropy)
    }
}

/// Sampler state: scales of each mixture and the discrete latents as 0/1
/// vectors.
#[derive(Clone)]
struct Point {
    z: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
}

impl Setup {
    fn factor_at(&self, z: &[DVector<f64>]) -> Result<(DVector<f64>, Factor<'_>)> {
        let (shift, s, extra) = self.mixture_terms(Some(z));
        Ok((shift, self.gauss.factor(&s, extra.as_ref())?))
    }

    fn discrete_shift(&self, u: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.resid.len());
        for (g, ug) in self.discrete.iter().zip(u) {
            out += &g.design * ug;
        }
        out
    }

    fn loglik(&self, p: &Point) -> f64 {
        match self.factor_at(&p.z) {
            Ok((shift, f)) => f.log_density(&(&self.resid - shift - self.discrete_shift(&p.u))),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn log_prior(&self, u: &[DVector<f64>]) -> f64 {
        self.discrete
            .iter()
            .zip(u)
            .map(|(g, ug)| match g.kind {
                DiscreteKind::OneHot => (0..ug.len()).filter(|&c| ug[c] == 1.0).map(|c| ln(g.pi[c])).sum::<f64>(),
                DiscreteKind::Bits => (0..ug.len())
                    .map(|c| if ug[c] == 1.0 { ln(g.pi[c]) } else { ln(1.0 - g.pi[c]) })
                    .sum(),
            })
            .sum()
    }

    fn log_q(&self, u: &[DVector<f64>]) -> f64 {
        self.discrete
            .iter()
            .zip(u)
            .map(|(g, ug)| match g.kind {
                DiscreteKind::OneHot => (0..ug.len()).filter(|&c| ug[c] == 1.0).map(|c| g.phi[c].ln()).sum::<f64>(),
                DiscreteKind::Bits => (0..ug.len())
                    .map(|c| if ug[c] == 1.0 { g.phi[c].ln() } else { (1.0 - g.phi[c]).ln() })
                    .sum(),
            })
            .sum()
    }

    fn draw(&self, rng: &mut Rng) -> Point {
        let z = self
            .mixtures
            .iter()
            .map(|m| &m.z_mean + &m.z_chol * std_normal_vec(m.z_mean.len(), rng))
            .collect();
        let u = self
            .discrete
            .iter()
            .map(|g| {
                let k = g.pi.len();
                let mut v = DVector::zeros(k);
                match g.kind {
                    DiscreteKind::OneHot => {
                        let lw: Vec<f64> = g.phi.iter().map(|p| p.ln()).collect();
                        v[sample_log_weights(&lw, rng)] = 1.0;
                    }
                    DiscreteKind::Bits => {
                        for c in 0..k {
                            if rand::Rng::random::<f64>(rng) < g.phi[c] {
                                v[c] = 1.0;
                            }
                        }
                    }
                }
                v
            })
            .collect();
        Point { z, u }
    }

    /// One sweep leaving `q^(1-β) (prior · likelihood)^β` invariant, with
    /// the Gaussian prior over scales shared by both ends.
    fn transition(&self, p: &mut Point, beta: f64, rng: &mut Rng) {
        for i in 0..self.mixtures.len() {
            let m = &self.mixtures[i];
            let nu = &m.z_chol * std_normal_vec(m.z_mean.len(), rng);
            let ll = |zi: &DVector<f64>| {
                let mut q = p.clone();
                q.z[i] = zi.clone();
                beta * self.loglik(&q)
            };
            let cur = ll(&p.z[i]);
            let (z, _) = elliptical_slice(&p.z[i], cur, &m.z_mean, &nu, ll, rng);
            p.z[i] = z;
        }
        if self.discrete.is_empty() {
            return;
        }
        let Ok((shift, factor)) = self.factor_at(&p.z) else { return };
        let base = &self.resid - shift;
        let mut total_shift = self.discrete_shift(&p.u);
        for (gi, g) in self.discrete.iter().enumerate() {
            let k = g.pi.len();
            match g.kind {
                DiscreteKind::OneHot => {
                    total_shift -= &g.design * &p.u[gi];
                    let lw: Vec<f64> = (0..k)
                        .map(|c| {
                            let r = &base - &total_shift - g.design.column(c);
                            (1.0 - beta) * g.phi[c].ln() + beta * (ln(g.pi[c]) + factor.log_density(&r))
                        })
                        .collect();
                    let c = sample_log_weights(&lw, rng);
                    p.u[gi].fill(0.0);
                    p.u[gi][c] = 1.0;
                    total_shift += g.design.column(c);
                }
                DiscreteKind::Bits => {
                    for c in 0..k {
                        if p.u[gi][c] == 1.0 {
                            total_shift -= g.design.column(c);
                        }
                        let r0 = &base - &total_shift;
                        let r1 = &r0 - g.design.column(c);
                        let on = (1.0 - beta) * g.phi[c].ln() + beta * (ln(g.pi[c]) + factor.log_density(&r1));
                        let off = (1.0 - beta) * (1.0 - g.phi[c]).ln() + beta * (ln(1.0 - g.pi[c]) + factor.log_density(&r0));
                        let bit = if on == f64::NEG_INFINITY {
                            false
                        } else if off == f64::NEG_INFINITY {
                            true
                        } else {
                            sample_bit(on - off, rng)
                        };
                        p.u[gi][c] = if bit { 1.0 } else { 0.0 };
                        if bit {
                            total_shift += g.design.column(c);
                        }
                    }
                }
            }
        }
    }
}

/// Stochastic lower bound on `log p(x)` under a row model.
pub fn predictive_row_loglik(x: &DVector<f64>, model: &RowModel, config: &PredictiveConfig, rng: &mut Rng) -> Result<RowEstimate> {
    let mut setup = Setup::new(x, model)?;
    let bound = setup.bound(config.vb_sweeps)?;
    if !bound.is_finite() {
        return Err(Error::NumericalFailure("non-finite predictive bound".into()));
    }
    if setup.mixtures.is_empty() {
        return Ok(RowEstimate {
            log_lik: bound,
            bound,
            ais: None,
        });
    }
    let setup = &setup;
    let est = ais_ratio(
        |p: &Point| setup.log_prior(&p.u) + setup.loglik(p),
        |p: &Point| bound + setup.log_q(&p.u),
        |rng: &mut Rng| setup.draw(rng),
        |p: &mut Point, beta, rng: &mut Rng| setup.transition(p, beta, rng),
        &config.ais,
        rng,
    );
    let log_lik = bound + est.log_ratio;
    if !log_lik.is_finite() {
        return Err(Error::NumericalFailure("non-finite AIS estimate".into()));
    }
    Ok(RowEstimate {
        log_lik,
        bound,
        ais: Some(est),
    })
}
