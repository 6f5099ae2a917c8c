//! Low-rank factorization with an unknown rank: block Gibbs over the factors
//! plus reversible-jump birth and death of latent dimensions.
//!
//! Births propose the new row of the right factor from a mixture centred on
//! the top singular direction of the residual and integrate the new column
//! of the left factor out analytically; it is then drawn from its
//! conditional. Deaths are the exact reverse move.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::gibbs::update_sum_internals;
use super::init::InitConfig;
use super::state::{Body, Node};
use crate::components::{GaussianParams, Hyper, Params, Tying};
use crate::error::Result;
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `S = U V + E` with all three Gaussian.
pub(crate) struct Factors {
    pub u: DMatrix<f64>,
    pub up: GaussianParams,
    pub v: DMatrix<f64>,
    pub vp: GaussianParams,
    pub e: DMatrix<f64>,
    pub ep: GaussianParams,
}

fn take_gauss(node: Node) -> (DMatrix<f64>, GaussianParams) {
    match node.body {
        Body::Leaf {
            params: Params::Gaussian(g),
            ..
        } => (node.value, g),
        _ => unreachable!("low-rank factors are Gaussian leaves"),
    }
}

impl Factors {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn into_node(self, s: &DMatrix<f64>) -> Node {
        let u = Node::leaf(0, self.u, Params::Gaussian(self.up));
        let v = Node::leaf(0, self.v, Params::Gaussian(self.vp));
        let e = Node::leaf(0, self.e, Params::Gaussian(self.ep));
        let mut node = Node::sum(vec![Node::product(u, v)], e);
        node.value = s.clone();
        node
    }

    pub fn from_node(node: Node) -> Factors {
        let Body::Sum { mut terms, noise } = node.body else {
            unreachable!()
        };
        let Body::Product(u, v) = terms.pop().unwrap().body else {
            unreachable!()
        };
        let (u, up) = take_gauss(*u);
        let (v, vp) = take_gauss(*v);
        let (e, ep) = take_gauss(*noise);
        Factors { u, up, v, vp, e, ep }
    }
}

/// Deterministic top right singular pair of `r` by power iteration.
fn top_singular(r: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let m = r.ncols();
    let mut v = DVector::from_fn(m, |j, _| 1.0 + 0.01 * ((j * 7919) % 101) as f64);
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..20 {
        let rv = r * &v;
        let w = r.tr_mul(&rv);
        let norm = w.norm();
        sigma = rv.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
    }
    (sigma, v)
}

/// Proposal for the new right-factor row given the residual and the prior
/// precision scale of the integrated left column.
struct Proposal {
    centre: DVector<f64>,
    sd: f64,
}

impl Proposal {
    fn new(r: &DMatrix<f64>, a_mean: f64) -> Proposal {
        let (n, m) = r.shape();
        let (sigma, dir) = top_singular(r);
        let c = sigma * (a_mean / n as f64).sqrt();
        let sd = 0.5 * c / (m as f64).sqrt() + 1e-8;
        Proposal { centre: dir * c, sd }
    }

    fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        DVector::from_fn(self.centre.len(), |j, _| {
            let z: f64 = StandardNormal.sample(rng);
            sign * self.centre[j] + self.sd * z
        })
    }

    fn log_density(&self, v: &DVector<f64>) -> f64 {
        let m = v.len() as f64;
        let var = self.sd * self.sd;
        let norm = -0.5 * m * (LN_2PI + var.ln());
        let plus = norm - 0.5 * (v - &self.centre).norm_squared() / var;
        let minus = norm - 0.5 * (v + &self.centre).norm_squared() / var;
        crate::linalg::log_sum_exp(&[plus, minus]) - std::f64::consts::LN_2
    }
}

/// Log marginal likelihood ratio of adding `u v^T` to residual `r` with
/// `u_i ~ N(0, 1/a_i)` integrated out, plus the posterior of `u`.
fn collapsed_ratio(r: &DMatrix<f64>, v: &DVector<f64>, a: &DVector<f64>, ep: &GaussianParams) -> (f64, DVector<f64>, DVector<f64>) {
    let (n, m) = r.shape();
    let mut total = 0.0;
    let mut mean = DVector::zeros(n);
    let mut prec = DVector::zeros(n);
    for i in 0..n {
        let (mut beta, mut gamma) = (0.0, 0.0);
        for j in 0..m {
            let t = ep.precision(i, j);
            beta += t * v[j] * v[j];
            gamma += t * r[(i, j)] * v[j];
        }
        total += -0.5 * (1.0 + beta / a[i]).ln() + 0.5 * gamma * gamma / (a[i] + beta);
        prec[i] = a[i] + beta;
        mean[i] = gamma / prec[i];
    }
    (total, mean, prec)
}

fn v_prior(v: &DVector<f64>, lambda_v: f64, vp: &GaussianParams) -> f64 {
    (0..v.len())
        .map(|j| {
            let p = lambda_v * vp.col[j];
            0.5 * (p.ln() - LN_2PI) - 0.5 * p * v[j] * v[j]
        })
        .sum()
}

fn draw_u(mean: &DVector<f64>, prec: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(mean.len(), |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        mean[i] + z / prec[i].sqrt()
    })
}

fn move_probs(k: usize, cap: usize) -> (f64, f64) {
    if cap == 0 {
        (0.0, 0.0)
    } else if k == 0 {
        (1.0, 0.0)
    } else if k >= cap {
        (0.0, 1.0)
    } else {
        (0.5, 0.5)
    }
}

/// Log acceptance ratio of a birth from rank `k` with right row `v`,
/// `log_lik` being the collapsed likelihood ratio.
fn birth_log_ratio(k: usize, cap: usize, rate: f64, log_lik: f64, prior_v: f64, proposal_v: f64) -> f64 {
    let (pb, _) = move_probs(k, cap);
    let (_, pd) = move_probs(k + 1, cap);
    log_lik + prior_v - proposal_v + (rate / (k + 1) as f64).ln() + (pd / pb).ln()
}

fn remove_col(m: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    m.clone().remove_column(j)
}

fn rj_move(f: &mut Factors, hyper: &Hyper, cfg: &InitConfig, cap: usize, rng: &mut Rng) {
    let k = f.rank();
    let (pb, _) = move_probs(k, cap);
    if pb == 0.0 && k == 0 {
        return;
    }
    let birth = rng.random::<f64>() < pb;
    if birth {
        let lambda_u = hyper.gamma(0.0, 0.0, rng);
        let lambda_v = hyper.gamma(0.0, 0.0, rng);
        let a = &f.up.row * lambda_u;
        let proposal = Proposal::new(&f.e, a.mean());
        let v = proposal.sample(rng);
        let (ll, mean, prec) = collapsed_ratio(&f.e, &v, &a, &f.ep);
        let log_a = birth_log_ratio(k, cap, cfg.rank_rate, ll, v_prior(&v, lambda_v, &f.vp), proposal.log_density(&v));
        if rng.random::<f64>().ln() < log_a {
            let u = draw_u(&mean, &prec, rng);
            f.e -= &u * v.transpose();
            f.u = f.u.clone().insert_column(k, 0.0);
            f.u.set_column(k, &u);
            f.v = f.v.clone().insert_row(k, 0.0);
            f.v.set_row(k, &v.transpose());
            f.up.col = f.up.col.clone().insert_row(k, lambda_u);
            f.vp.row = f.vp.row.clone().insert_row(k, lambda_v);
        }
    } else {
        let j = rng.random_range(0..k);
        let u = f.u.column(j).clone_owned();
        let v = f.v.row(j).transpose();
        let r = &f.e + &u * v.transpose();
        let (lambda_u, lambda_v) = (f.up.col[j], f.vp.row[j]);
        let a = &f.up.row * lambda_u;
        let proposal = Proposal::new(&r, a.mean());
        let (ll, mean, prec) = collapsed_ratio(&r, &v, &a, &f.ep);
        let log_a = -birth_log_ratio(k - 1, cap, cfg.rank_rate, ll, v_prior(&v, lambda_v, &f.vp), proposal.log_density(&v));
        if rng.random::<f64>().ln() < log_a {
            f.e = r;
            f.u = remove_col(&f.u, j);
            f.v = f.v.clone().remove_row(j);
            f.up.col = f.up.col.clone().remove_row(j);
            f.vp.row = f.vp.row.clone().remove_row(j);
        } else {
            // The column was integrated out for the move; redraw it.
            let u = draw_u(&mean, &prec, rng);
            f.e = &r - &u * v.transpose();
            f.u.set_column(j, &u);
        }
    }
}

/// Fits `S ~ U V + E` with rank chosen by reversible jump, starting from
/// rank zero. `tying` gives the data sides of `S`.
pub(crate) fn init_low_rank(s: &DMatrix<f64>, tying: Tying, hyper: &Hyper, cfg: &InitConfig, rng: &mut Rng) -> Result<Node> {
    let (n, m) = s.shape();
    let cap = n.min(m).min(cfg.max_rank);
    let scale = crate::inference::init::precision_guess(s);
    let mut f = Factors {
        u: DMatrix::zeros(n, 0),
        up: GaussianParams {
            row: DVector::from_element(n, 1.0),
            col: DVector::zeros(0),
            tying: Tying { rows: tying.rows, cols: false },
        },
        v: DMatrix::zeros(0, m),
        vp: GaussianParams {
            row: DVector::zeros(0),
            col: DVector::from_element(m, 1.0),
            tying: Tying { rows: false, cols: tying.cols },
        },
        e: s.clone(),
        ep: GaussianParams::constant(n, m, scale, tying),
    };
    for _ in 0..cfg.sweeps {
        for _ in 0..cfg.rj_moves {
            rj_move(&mut f, hyper, cfg, cap, rng);
        }
        let mut node = f.into_node(s);
        update_sum_internals(&mut node, hyper, rng)?;
        f = Factors::from_node(node);
    }
    log::debug!("low-rank init settled at rank {}", f.rank());
    Ok(f.into_node(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn collapsed_ratio_matches_dense_marginal() {
        // One row: r ~ N(0, diag(1/t) + v v^T / a) against N(0, diag(1/t)).
        let r = DMatrix::from_row_slice(1, 3, &[0.4, -1.0, 0.8]);
        let v = DVector::from_vec(vec![0.5, -1.2, 0.9]);
        let a = DVector::from_vec(vec![1.7]);
        let ep = GaussianParams {
            row: DVector::from_vec(vec![2.0]),
            col: DVector::from_vec(vec![1.0, 0.5, 3.0]),
            tying: Tying::DATA,
        };
        let d = DMatrix::from_diagonal(&DVector::from_fn(3, |j, _| 1.0 / ep.precision(0, j)));
        let x = r.row(0).transpose();
        let zero = DVector::zeros(3);
        let with = crate::linalg::log_normal_dense(&x, &zero, &(&d + &v * v.transpose() / a[0])).unwrap();
        let without = crate::linalg::log_normal_dense(&x, &zero, &d).unwrap();
        let (ll, _, _) = collapsed_ratio(&r, &v, &a, &ep);
        assert!((ll - (with - without)).abs() < 1e-6);
    }

    #[test]
    fn proposal_density_normalizes_in_one_dimension() {
        let p = Proposal {
            centre: DVector::from_vec(vec![1.3]),
            sd: 0.4,
        };
        let h = 1e-3;
        let total: f64 = (-8000..8000)
            .map(|i| p.log_density(&DVector::from_vec(vec![i as f64 * h])).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recovers_rank_one() {
        let mut hits = 0;
        for seed in 0..10 {
            let mut rng = seeded(100 + seed);
            let u = crate::linalg::std_normal_mat(30, 1, &mut rng);
            let v = crate::linalg::std_normal_mat(1, 20, &mut rng);
            let s = &u * &v + crate::linalg::std_normal_mat(30, 20, &mut rng) * 1e-2;
            let cfg = InitConfig::default();
            let node = init_low_rank(&s, Tying::DATA, &Hyper::default(), &cfg, &mut rng).unwrap();
            let f = Factors::from_node(node);
            if f.rank() == 1 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "rank one recovered in {hits}/10");
    }
}
