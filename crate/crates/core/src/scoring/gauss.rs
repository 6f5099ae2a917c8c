//! Gaussians with covariance `diag(base) + A diag(s) Aᵀ`, evaluated through
//! the Woodbury identity so the cost is cubic only in the rank of `A`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest variance admitted on either the diagonal or the low-rank part.
const MIN_VAR: f64 = 1e-200;

pub(crate) struct LowRankGaussian {
    base: DVector<f64>,
    a: DMatrix<f64>,
    /// `Aᵀ diag(base)⁻¹ A`, reused while the diagonal is unchanged.
    atba: DMatrix<f64>,
}

impl LowRankGaussian {
    pub fn new(base: DVector<f64>, a: DMatrix<f64>) -> Self {
        let base = base.map(|v| v.max(MIN_VAR));
        let atba = weighted_gram(&a, &base);
        LowRankGaussian { base, a, atba }
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// Factorizes the covariance for variances `s` on the low-rank part,
    /// optionally adding `extra` to the diagonal.
    pub fn factor(&self, s: &DVector<f64>, extra: Option<&DVector<f64>>) -> Result<Factor<'_>> {
        let (base, atba) = match extra {
            Some(e) => {
                let b = (&self.base + e).map(|v| v.max(MIN_VAR));
                let g = weighted_gram(&self.a, &b);
                (b, g)
            }
            None => (self.base.clone(), self.atba.clone()),
        };
        let k = self.rank();
        let s = s.map(|v| v.max(MIN_VAR));
        let mut inner = atba;
        for i in 0..k {
            inner[(i, i)] += 1.0 / s[i];
        }
        let chol = cholesky(&inner)?;
        let logdet = base.iter().map(|v| v.ln()).sum::<f64>() + s.iter().map(|v| v.ln()).sum::<f64>() + chol_logdet(&chol);
        if !logdet.is_finite() {
            return Err(Error::NumericalFailure("non-finite covariance determinant".into()));
        }
        Ok(Factor {
            a: &self.a,
            inv_base: base.map(|v| 1.0 / v),
            chol,
            logdet,
        })
    }
}

fn weighted_gram(a: &DMatrix<f64>, base: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = a.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row /= base[i];
    }
    a.transpose() * scaled
}

pub(crate) struct Factor<'a> {
    a: &'a DMatrix<f64>,
    inv_base: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
}

impl Factor<'_> {
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        let br = r.component_mul(&self.inv_base);
        if self.a.ncols() == 0 {
            return br;
        }
        let y = self.chol.solve(&(self.a.transpose() * &br));
        br - (self.a * y).component_mul(&self.inv_base)
    }

    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            out.set_column(j, &self.solve(&m.column(j).into_owned()));
        }
        out
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `log N(r; 0, Σ)`.
    pub fn log_density(&self, r: &DVector<f64>) -> f64 {
        -0.5 * (r.len() as f64 * LN_2PI + self.logdet + r.dot(&self.solve(r)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{log_normal_dense, std_normal_mat, std_normal_vec};
    use crate::rng::seeded;

    #[test]
    fn matches_dense_density() {
        let mut rng = seeded(3);
        let a = std_normal_mat(7, 3, &mut rng);
        let base = DVector::from_fn(7, |i, _| 0.5 + i as f64 * 0.1);
        let s = DVector::from_vec(vec![0.3, 2.0, 1.1]);
        let extra = DVector::from_element(7, 0.25);
        let r = std_normal_vec(7, &mut rng);
        let g = LowRankGaussian::new(base.clone(), a.clone());
        for extra in [None, Some(&extra)] {
            let b = match extra {
                Some(e) => &base + e,
                None => base.clone(),
            };
            let cov = DMatrix::from_diagonal(&b) + &a * DMatrix::from_diagonal(&s) * a.transpose();
            let dense = log_normal_dense(&r, &DVector::zeros(7), &cov).unwrap();
            let f = g.factor(&s, extra).unwrap();
            assert!((f.log_density(&r) - dense).abs() < 1e-6);
            let sol = cov.clone().try_inverse().unwrap() * &r;
            assert!((f.solve(&r) - sol).norm() < 1e-8);
        }
    }

    #[test]
    fn rank_zero_is_diagonal() {
        let g = LowRankGaussian::new(DVector::from_element(3, 2.0), DMatrix::zeros(3, 0));
        let f = g.factor(&DVector::zeros(0), None).unwrap();
        let r = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let want = -1.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 0.5;
        assert!((f.log_density(&r) - want).abs() < 1e-12);
    }
}
