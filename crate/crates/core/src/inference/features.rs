//! Binary latent features under an Indian buffet process prior: single-site
//! updates of existing features, new features drawn with their weights
//! integrated out, and split-merge and basis-change moves on the
//! weight-collapsed posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use super::init::{fit_gaussian_params, InitConfig};
use super::state::Node;
use crate::components::{sample_beta, sample_gamma, BernoulliParams, Hyper, Params, Tying};
use crate::error::Result;
use crate::linalg::{cholesky, chol_logdet, sample_bit, sample_log_weights};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest number of new features proposed for one row.
const MAX_NEW: usize = 4;

/// Independent annealed warm-ups per initialization.
const RESTARTS: usize = 3;

fn ln_factorial(n: usize) -> f64 {
    statrs::function::gamma::ln_gamma(n as f64 + 1.0)
}

pub(crate) struct FeatureModel {
    /// Binary assignments, rows by features.
    pub z: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub noise_var: f64,
    pub weight_var: f64,
    pub alpha: f64,
    /// Likelihood temperature; the noise variance is inflated by this factor.
    pub temperature: f64,
}

impl FeatureModel {
    fn k(&self) -> usize {
        self.z.ncols()
    }

    fn nv(&self) -> f64 {
        self.noise_var * self.temperature
    }

    /// Log marginal likelihood of `s` given `z` with the weights integrated out.
    pub fn collapsed_loglik(&self, s: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
        let (n, m) = s.shape();
        let k = z.ncols();
        let (nf, mf, kf) = (n as f64, m as f64, k as f64);
        let base = -0.5 * nf * mf * LN_2PI - 0.5 * (nf - kf) * mf * self.nv().ln() - 0.5 * kf * mf * self.weight_var.ln();
        let total = s.norm_squared();
        if k == 0 {
            return base - 0.5 * total / self.nv();
        }
        let mut gram = z.tr_mul(z);
        let ratio = self.nv() / self.weight_var;
        for d in 0..k {
            gram[(d, d)] += ratio;
        }
        let Ok(chol) = cholesky(&gram) else {
            return f64::NEG_INFINITY;
        };
        let zs = z.tr_mul(s);
        let explained = zs.component_mul(&chol.solve(&zs)).sum();
        base - 0.5 * mf * chol_logdet(&chol) - 0.5 * (total - explained) / self.nv()
    }

    /// Log prior of a labelled feature matrix with no empty columns.
    pub fn log_prior(&self, z: &DMatrix<f64>) -> f64 {
        let n = z.nrows();
        let k = z.ncols();
        let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
        let mut lp = k as f64 * self.alpha.ln() - ln_factorial(k) - self.alpha * harmonic;
        for c in 0..k {
            let mk = z.column(c).sum() as usize;
            if mk == 0 {
                return f64::NEG_INFINITY;
            }
            lp += ln_factorial(n - mk) + ln_factorial(mk - 1) - ln_factorial(n);
        }
        lp
    }

    fn log_target(&self, s: &DMatrix<f64>, z: &DMatrix<f64>) -> f64 {
        self.log_prior(z) + self.collapsed_loglik(s, z)
    }

    fn sample_rows(&mut self, s: &DMatrix<f64>, rng: &mut Rng) {
        let (n, m) = s.shape();
        let mut resid = s - &self.z * &self.w;
        for i in 0..n {
            let mut r = resid.row(i).transpose();
            let mut c = 0;
            while c < self.k() {
                let others = self.z.column(c).sum() - self.z[(i, c)];
                let wk = self.w.row(c).transpose();
                if self.z[(i, c)] == 1.0 {
                    r += &wk;
                }
                if others == 0.0 {
                    // Singletons are redrawn by the new-feature step.
                    self.z = self.z.clone().remove_column(c);
                    self.w = self.w.clone().remove_row(c);
                    continue;
                }
                let logit = (others / (n as f64 - others)).ln() - (wk.norm_squared() - 2.0 * r.dot(&wk)) / (2.0 * self.nv());
                if sample_bit(logit, rng) {
                    self.z[(i, c)] = 1.0;
                    r -= &wk;
                } else {
                    self.z[(i, c)] = 0.0;
                }
                c += 1;
            }
            let lambda = self.alpha / n as f64;
            let rr = r.norm_squared();
            let logw: Vec<f64> = (0..=MAX_NEW)
                .map(|j| {
                    let var = self.nv() + j as f64 * self.weight_var;
                    j as f64 * lambda.ln() - lambda - ln_factorial(j) - 0.5 * m as f64 * (LN_2PI + var.ln()) - 0.5 * rr / var
                })
                .collect();
            let fresh = sample_log_weights(&logw, rng);
            if fresh > 0 {
                // Posterior of the new weights column by column:
                // precision I/weight_var + 11^T/noise_var.
                let mut prec = DMatrix::from_element(fresh, fresh, 1.0 / self.nv());
                for d in 0..fresh {
                    prec[(d, d)] += 1.0 / self.weight_var;
                }
                let chol = cholesky(&prec).expect("positive definite by construction");
                let l = chol.l();
                let k = self.k();
                let mut neww = DMatrix::zeros(fresh, m);
                for j in 0..m {
                    let h = DVector::from_element(fresh, r[j] / self.nv());
                    let mean = chol.solve(&h);
                    let e = crate::linalg::std_normal_vec(fresh, rng);
                    let x = mean + l.transpose().solve_upper_triangular(&e).unwrap();
                    neww.set_column(j, &x);
                }
                self.z = self.z.clone().resize_horizontally(k + fresh, 0.0);
                for d in 0..fresh {
                    self.z[(i, k + d)] = 1.0;
                }
                self.w = self.w.clone().resize_vertically(k + fresh, 0.0);
                for d in 0..fresh {
                    self.w.set_row(k + d, &neww.row(d));
                    r -= neww.row(d).transpose();
                }
            }
            resid.set_row(i, &r.transpose());
        }
    }

    fn sample_weights(&mut self, s: &DMatrix<f64>, rng: &mut Rng) {
        let k = self.k();
        let m = s.ncols();
        if k == 0 {
            self.w = DMatrix::zeros(0, m);
            return;
        }
        let mut prec = self.z.tr_mul(&self.z) / self.nv();
        for d in 0..k {
            prec[(d, d)] += 1.0 / self.weight_var;
        }
        let chol = cholesky(&prec).expect("positive definite by construction");
        let mean = chol.solve(&(self.z.tr_mul(s) / self.nv()));
        let e = crate::linalg::std_normal_mat(k, m, rng);
        let noise = chol.l().transpose().solve_upper_triangular(&e).unwrap();
        self.w = mean + noise;
    }

    fn sample_hypers(&mut self, s: &DMatrix<f64>, hyper: &Hyper, rng: &mut Rng) {
        let (n, m) = s.shape();
        let resid = s - &self.z * &self.w;
        self.noise_var = 1.0 / sample_gamma(hyper.precision_shape + (n * m) as f64 / 2.0, hyper.precision_rate + resid.norm_squared() / 2.0, rng);
        let k = self.k();
        self.weight_var = 1.0
            / sample_gamma(
                hyper.precision_shape + (k * m) as f64 / 2.0,
                hyper.precision_rate + self.w.norm_squared() / 2.0,
                rng,
            );
        let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
        self.alpha = sample_gamma(1.0 + k as f64, 1.0 + harmonic, rng);
    }

    /// One split or merge proposal, accepted by Metropolis-Hastings on the
    /// weight-collapsed target.
    fn split_merge(&mut self, s: &DMatrix<f64>, rng: &mut Rng) {
        let k = self.k();
        if k == 0 {
            return;
        }
        let p_split = |k: usize| if k >= 2 { 0.5 } else { 1.0 };
        let p_merge = |k: usize| if k >= 2 { 0.5 } else { 0.0 };
        let current = self.log_target(s, &self.z);
        let n = s.nrows();
        if rng.random::<f64>() < p_split(k) {
            let c = rng.random_range(0..k);
            let pos = rng.random_range(0..=k);
            let active: Vec<usize> = (0..n).filter(|&i| self.z[(i, c)] == 1.0).collect();
            let mut a = DVector::zeros(n);
            let mut b = DVector::zeros(n);
            for &i in &active {
                match rng.random_range(0..3) {
                    0 => a[i] = 1.0,
                    1 => b[i] = 1.0,
                    _ => {
                        a[i] = 1.0;
                        b[i] = 1.0;
                    }
                }
            }
            if a.sum() == 0.0 || b.sum() == 0.0 {
                return;
            }
            let mut z = self.z.clone();
            z.set_column(c, &a);
            let z = z.insert_column(pos, 0.0);
            let mut z = z;
            z.set_column(pos, &b);
            let proposed = self.log_target(s, &z);
            let log_q = active.len() as f64 * 3f64.ln() + (p_merge(k + 1) / p_split(k)).ln();
            if accept(proposed - current + log_q, rng) {
                self.z = z;
            }
        } else {
            let c1 = rng.random_range(0..k);
            let mut c2 = rng.random_range(0..k - 1);
            if c2 >= c1 {
                c2 += 1;
            }
            let merged = self.z.column(c1).zip_map(&self.z.column(c2), |x, y| x.max(y));
            let mut z = self.z.clone();
            z.set_column(c1, &merged);
            let z = z.remove_column(c2);
            let proposed = self.log_target(s, &z);
            let log_q = -merged.sum() * 3f64.ln() + (p_split(k - 1) / p_merge(k)).ln();
            if accept(proposed - current + log_q, rng) {
                self.z = z;
            }
        }
    }
}

impl FeatureModel {
    fn sweep(&mut self, s: &DMatrix<f64>, hyper: &Hyper, rng: &mut Rng) {
        self.sample_rows(s, rng);
        self.split_merge(s, rng);
        for _ in 0..self.k() {
            self.xor_move(s, rng);
        }
        self.sample_weights(s, rng);
        self.sample_hypers(s, hyper, rng);
    }

    /// Replaces one feature column by its exclusive-or with another. The
    /// proposal is its own inverse, so only the target ratio enters.
    fn xor_move(&mut self, s: &DMatrix<f64>, rng: &mut Rng) {
        let k = self.k();
        if k < 2 {
            return;
        }
        let c1 = rng.random_range(0..k);
        let mut c2 = rng.random_range(0..k - 1);
        if c2 >= c1 {
            c2 += 1;
        }
        let col = self.z.column(c1).zip_map(&self.z.column(c2), |x, y| if x != y { 1.0 } else { 0.0 });
        if col.sum() == 0.0 {
            return;
        }
        let mut z = self.z.clone();
        z.set_column(c1, &col);
        let ratio = self.log_target(s, &z) - self.log_target(s, &self.z);
        if accept(ratio, rng) {
            self.z = z;
        }
    }
}

/// Metropolis-Hastings acceptance given the full log ratio.
pub(crate) fn accept(log_ratio: f64, rng: &mut Rng) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Fits `S ~ B G + E` with binary `B` under a buffet prior.
pub(crate) fn init_row_features(s: &DMatrix<f64>, tying: Tying, hyper: &Hyper, cfg: &InitConfig, rng: &mut Rng) -> Result<Node> {
    let (n, m) = s.shape();
    let total_var = s.norm_squared() / (n * m) as f64 + 1e-12;
    let fresh = || FeatureModel {
        z: DMatrix::zeros(n, 0),
        w: DMatrix::zeros(0, m),
        noise_var: 0.5 * total_var,
        weight_var: total_var,
        alpha: 1.0,
        temperature: 1.0,
    };
    // Each restart anneals from a hot likelihood so that features enter one
    // strong direction at a time; equivalent bases are separated by deep
    // valleys, so the best of several warm-ups is kept.
    let warm = cfg.sweeps / 2;
    let mut best: Option<(f64, FeatureModel)> = None;
    for _ in 0..RESTARTS {
        let mut model = fresh();
        for t in 0..warm {
            model.temperature = 100f64.powf(1.0 - t as f64 / warm as f64);
            model.sweep(s, hyper, rng);
        }
        model.temperature = 1.0;
        let score = model.log_target(s, &model.z);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model));
        }
    }
    // Dense overlapping features are rarely assembled one birth at a time,
    // so one more chain starts from a random dense assignment.
    let k0 = ((n.min(m) as f64).sqrt().ceil() as usize).min(n);
    if k0 > 0 {
        let mut model = fresh();
        model.z = DMatrix::from_fn(n, k0, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        model.sample_weights(s, rng);
        for _ in 0..warm {
            model.sweep(s, hyper, rng);
        }
        let score = model.log_target(s, &model.z);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model));
        }
    }
    let mut model = best.map(|(_, m)| m).unwrap_or_else(fresh);
    for _ in warm..cfg.sweeps {
        model.sweep(s, hyper, rng);
    }
    let k = model.k();
    let pi = DVector::from_fn(k, |c, _| {
        let ones = model.z.column(c).sum();
        sample_beta(hyper.beta_a + ones, hyper.beta_b + n as f64 - ones, rng)
    });
    let residual = s - &model.z * &model.w;
    let gp = fit_gaussian_params(&model.w, 1.0 / model.weight_var, Tying { rows: false, cols: tying.cols }, hyper, rng);
    let ep = fit_gaussian_params(&residual, 1.0 / model.noise_var, tying, hyper, rng);
    let bnode = Node::leaf(0, model.z, Params::Bernoulli(BernoulliParams { pi }));
    let gnode = Node::leaf(0, model.w, Params::Gaussian(gp));
    let enode = Node::leaf(0, residual, Params::Gaussian(ep));
    let mut node = Node::sum(vec![Node::product(bnode, gnode)], enode);
    node.value = s.clone();
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::state::Body;
    use crate::rng::seeded;

    fn model() -> FeatureModel {
        FeatureModel {
            z: DMatrix::zeros(0, 0),
            w: DMatrix::zeros(0, 0),
            noise_var: 0.3,
            weight_var: 2.0,
            alpha: 1.5,
            temperature: 1.0,
        }
    }

    #[test]
    fn collapsed_likelihood_matches_dense_marginal() {
        let mut rng = seeded(11);
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let s = crate::linalg::std_normal_mat(4, 3, &mut rng);
        let f = model();
        // Columns of S are iid N(0, weight_var Z Z^T + noise_var I).
        let cov = &z * z.transpose() * f.weight_var + DMatrix::identity(4, 4) * f.noise_var;
        let zero = DVector::zeros(4);
        let dense: f64 = (0..3)
            .map(|j| crate::linalg::log_normal_dense(&s.column(j).clone_owned(), &zero, &cov).unwrap())
            .sum();
        assert!((f.collapsed_loglik(&s, &z) - dense).abs() < 1e-6);
        let empty = DMatrix::zeros(4, 0);
        let cov0 = DMatrix::identity(4, 4) * f.noise_var;
        let dense0: f64 = (0..3)
            .map(|j| crate::linalg::log_normal_dense(&s.column(j).clone_owned(), &zero, &cov0).unwrap())
            .sum();
        assert!((f.collapsed_loglik(&s, &empty) - dense0).abs() < 1e-6);
    }

    #[test]
    fn identical_proposal_is_always_accepted() {
        let mut rng = seeded(12);
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let s = crate::linalg::std_normal_mat(3, 2, &mut rng);
        let f = model();
        let ratio = f.log_target(&s, &z) - f.log_target(&s, &z);
        for _ in 0..1000 {
            assert!(accept(ratio, &mut rng));
        }
    }

    #[test]
    fn recovers_planted_features() {
        let mut hits = 0;
        for seed in 0..10 {
            let mut rng = seeded(300 + seed);
            let n = 60;
            let b = DMatrix::from_fn(n, 3, |i, c| if (i >> c) & 1 == 1 { 1.0 } else { 0.0 });
            let w = crate::linalg::std_normal_mat(3, 12, &mut rng) * 2.0;
            let s = &b * &w + crate::linalg::std_normal_mat(n, 12, &mut rng) * 0.05;
            let node = init_row_features(&s, Tying::DATA, &Hyper::default(), &InitConfig::default(), &mut rng).unwrap();
            let Body::Sum { terms, .. } = &node.body else { panic!() };
            let Body::Product(bnode, _) = &terms[0].body else { panic!() };
            if bnode.value.ncols() == 3 {
                hits += 1;
            }
        }
        assert!(hits >= 7, "three features in {hits}/10");
    }
}
