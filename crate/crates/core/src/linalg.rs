//! Small dense linear-algebra and sampling helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const JITTER: f64 = 1e-8;

/// Cholesky factor of `m + jitter I`, retried once with a larger jitter.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(1.0, f64::max);
    for jitter in [JITTER, JITTER * 1e4 * scale] {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::NumericalFailure(format!("{n}x{n} matrix is not positive definite")))
}

pub fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn std_normal_mat<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Draws from `N(P^-1 h, P^-1)` given the precision `P` and potential `h`.
pub fn sample_from_precision<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = cholesky(precision)?;
    let mean = chol.solve(h);
    let z = std_normal_vec(h.len(), rng);
    let l = chol.l();
    let noise = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NumericalFailure("singular triangular factor".into()))?;
    Ok(mean + noise)
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Samples an index from unnormalized log weights.
pub fn sample_log_weights<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sample_bit<R: Rng + ?Sized>(logit: f64, rng: &mut R) -> bool {
    rng.random::<f64>().ln() < log_sigmoid(logit)
}

/// One elliptical slice sampling step for a Gaussian prior centred at
/// `mean`, given a zero-mean prior draw `nu`. Returns the new point and its
/// log-likelihood; falls back to `x` after too many shrinks.
pub fn elliptical_slice<R: Rng + ?Sized>(
    x: &DVector<f64>,
    x_ll: f64,
    mean: &DVector<f64>,
    nu: &DVector<f64>,
    loglik: impl Fn(&DVector<f64>) -> f64,
    rng: &mut R,
) -> (DVector<f64>, f64) {
    let x0 = x - mean;
    let threshold = x_ll + rng.random::<f64>().ln();
    let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
    let (mut lo, mut hi) = (theta - std::f64::consts::TAU, theta);
    for _ in 0..200 {
        let prop = mean + &x0 * theta.cos() + nu * theta.sin();
        let ll = loglik(&prop);
        if ll > threshold {
            return (prop, ll);
        }
        if theta < 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        theta = lo + rng.random::<f64>() * (hi - lo);
    }
    (x.clone(), x_ll)
}

/// Ones on and below the diagonal.
pub fn lower_ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i >= j { 1.0 } else { 0.0 })
}

/// Cumulative sum down each column; equal to `lower_ones(n) * m`.
pub fn cumsum_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in 1..m.nrows() {
            out[(i, j)] += out[(i - 1, j)];
        }
    }
    out
}

/// First differences down each column; inverse of [`cumsum_rows`].
pub fn diff_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in (1..m.nrows()).rev() {
            out[(i, j)] -= m[(i - 1, j)];
        }
    }
    out
}

/// `log N(x; mean, diag(var))`.
pub fn log_normal_diag(x: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let r = x[i] - mean[i];
        s += -0.5 * (2.0 * std::f64::consts::PI * var[i]).ln() - 0.5 * r * r / var[i];
    }
    s
}

/// `log N(x; mean, cov)` with a dense covariance.
pub fn log_normal_dense(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(cov)?;
    let r = x - mean;
    let sol = chol.solve(&r);
    let n = x.len() as f64;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * chol_logdet(&chol) - 0.5 * r.dot(&sol))
}

pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = a.norm().max(b.norm()).max(1e-300);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn cumsum_matches_lower_ones() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(cumsum_rows(&m), lower_ones(3) * &m);
        assert_eq!(diff_rows(&cumsum_rows(&m)), m);
    }

    #[test]
    fn lse() {
        let v = [0.0f64.ln(), 1.0f64.ln(), 3.0f64.ln()];
        assert!((log_sum_exp(&v) - 4.0f64.ln()).abs() < 1e-12);
        assert!((log_mean_exp(&[2.0, 2.0]) - 2.0).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn precision_sampler_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = DVector::from_vec(vec![1.0, -1.0]);
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &h;
        let mut rng = seeded(3);
        let n = 40000;
        let mut s = DVector::zeros(2);
        let mut ss = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = sample_from_precision(&p, &h, &mut rng).unwrap();
            s += &x;
            ss += &x * x.transpose();
        }
        let m = s / n as f64;
        let c = ss / n as f64 - &m * m.transpose();
        assert!((m - mean).norm() < 0.03);
        assert!((c - cov).norm() < 0.03);
    }

    #[test]
    fn slice_sampler_targets_posterior() {
        // Prior N(0,1), likelihood N(1; x, 1): posterior N(0.5, 0.5).
        let mut rng = seeded(9);
        let ll = |v: &DVector<f64>| -0.5 * (1.0 - v[0]).powi(2);
        let mean = DVector::zeros(1);
        let mut x = DVector::zeros(1);
        let mut cur = ll(&x);
        let (mut s, mut ss) = (0.0, 0.0);
        let n = 40000;
        for _ in 0..n {
            let nu = std_normal_vec(1, &mut rng);
            (x, cur) = elliptical_slice(&x, cur, &mean, &nu, ll, &mut rng);
            s += x[0];
            ss += x[0] * x[0];
        }
        let m = s / n as f64;
        assert!((m - 0.5).abs() < 0.03);
        assert!((ss / n as f64 - m * m - 0.5).abs() < 0.03);
    }

    #[test]
    fn dense_matches_diag() {
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let m = DVector::from_vec(vec![0.0, 0.5]);
        let v = DVector::from_vec(vec![2.0, 0.5]);
        let a = log_normal_diag(&x, &m, &v);
        let b = log_normal_dense(&x, &m, &DMatrix::from_diagonal(&v)).unwrap();
        assert!((a - b).abs() < 1e-7);
    }
}
