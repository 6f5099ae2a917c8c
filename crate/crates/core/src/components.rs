//! Component priors: Gaussian (`G`), multinomial (`M`), Bernoulli (`B`) and
//! the integration matrix (`C`).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Kind;
use crate::linalg::lower_ones;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComponentError {
    #[error("invalid hyperparameter {name} = {value}")]
    InvalidHyper { name: &'static str, value: f64 },
    #[error("matrix is {found:?} but parameters describe {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Hyperpriors shared by every leaf of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Gamma shape for precisions.
    pub precision_shape: f64,
    /// Gamma rate for precisions.
    pub precision_rate: f64,
    /// Symmetric Dirichlet concentration for cluster probabilities.
    pub dirichlet_alpha: f64,
    pub beta_a: f64,
    pub beta_b: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            precision_shape: 1.0,
            precision_rate: 1.0,
            dirichlet_alpha: 1.0,
            beta_a: 1.0,
            beta_b: 1.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), ComponentError> {
        for (name, value) in [
            ("precision_shape", self.precision_shape),
            ("precision_rate", self.precision_rate),
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("beta_a", self.beta_a),
            ("beta_b", self.beta_b),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ComponentError::InvalidHyper { name, value });
            }
        }
        Ok(())
    }

    pub(crate) fn gamma<R: Rng + ?Sized>(&self, shape_add: f64, rate_add: f64, rng: &mut R) -> f64 {
        sample_gamma(self.precision_shape + shape_add, self.precision_rate + rate_add, rng)
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    g.sample(rng).max(1e-300)
}

pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let v = Beta::new(a, b).expect("positive beta parameters").sample(rng);
    v.clamp(1e-12, 1.0 - 1e-12)
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> DVector<f64> {
    let g: Vec<f64> = alpha.iter().map(|&a| sample_gamma(a, 1.0, rng)).collect();
    let total: f64 = g.iter().sum();
    DVector::from_iterator(g.len(), g.into_iter().map(|x| (x / total).max(1e-300)))
}

/// Which sides of a leaf share one precision. Data dimensions are tied,
/// latent dimensions get one precision per index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tying {
    pub rows: bool,
    pub cols: bool,
}

impl Tying {
    pub const DATA: Tying = Tying { rows: true, cols: true };

    pub fn swapped(self) -> Tying {
        Tying {
            rows: self.cols,
            cols: self.rows,
        }
    }
}

/// Entry `(i, j)` has precision `row[i] * col[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub row: DVector<f64>,
    pub col: DVector<f64>,
    pub tying: Tying,
}

impl GaussianParams {
    pub fn constant(rows: usize, cols: usize, precision: f64, tying: Tying) -> Self {
        GaussianParams {
            row: DVector::from_element(rows, precision),
            col: DVector::from_element(cols, 1.0),
            tying,
        }
    }

    pub fn precision(&self, i: usize, j: usize) -> f64 {
        self.row[i] * self.col[j]
    }

    pub fn transposed(&self) -> Self {
        GaussianParams {
            row: self.col.clone(),
            col: self.row.clone(),
            tying: self.tying.swapped(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, tying: Tying, hyper: &Hyper, rng: &mut R) -> Self {
        let mut draw = |n: usize, tied: bool| {
            if tied {
                DVector::from_element(n, hyper.gamma(0.0, 0.0, rng))
            } else {
                DVector::from_fn(n, |_, _| hyper.gamma(0.0, 0.0, rng))
            }
        };
        let row = draw(rows, tying.rows);
        let col = draw(cols, tying.cols);
        GaussianParams { row, col, tying }
    }

    /// Gamma posterior `(shape, rate)` for each row precision, or a single
    /// pair when rows are tied.
    pub fn row_posteriors(&self, x: &DMatrix<f64>, hyper: &Hyper) -> Vec<(f64, f64)> {
        let (n, m) = x.shape();
        let sq: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| self.col[j] * x[(i, j)] * x[(i, j)]).sum())
            .collect();
        if self.tying.rows {
            vec![(
                hyper.precision_shape + (n * m) as f64 / 2.0,
                hyper.precision_rate + sq.iter().sum::<f64>() / 2.0,
            )]
        } else {
            sq.iter()
                .map(|s| (hyper.precision_shape + m as f64 / 2.0, hyper.precision_rate + s / 2.0))
                .collect()
        }
    }

    pub fn col_posteriors(&self, x: &DMatrix<f64>, hyper: &Hyper) -> Vec<(f64, f64)> {
        self.transposed().row_posteriors(&x.transpose(), hyper)
    }

    /// Gibbs update of row then column precisions.
    pub fn resample<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, hyper: &Hyper, rng: &mut R) {
        let post = self.row_posteriors(x, hyper);
        if self.tying.rows {
            let v = sample_gamma(post[0].0, post[0].1, rng);
            self.row.fill(v);
        } else {
            for (i, (a, b)) in post.into_iter().enumerate() {
                self.row[i] = sample_gamma(a, b, rng);
            }
        }
        let post = self.col_posteriors(x, hyper);
        if self.tying.cols {
            let v = sample_gamma(post[0].0, post[0].1, rng);
            self.col.fill(v);
        } else {
            for (j, (a, b)) in post.into_iter().enumerate() {
                self.col[j] = sample_gamma(a, b, rng);
            }
        }
    }

    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                let p = self.precision(i, j);
                s += 0.5 * (p.ln() - LN_2PI) - 0.5 * p * x[(i, j)] * x[(i, j)];
            }
        }
        s
    }

    pub fn sample_matrix<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(self.row.len(), self.col.len(), |i, j| {
            let z: f64 = StandardNormal.sample(rng);
            z / self.precision(i, j).sqrt()
        })
    }
}

/// Cluster probabilities of a one-hot row matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultinomialParams {
    pub pi: DVector<f64>,
}

impl MultinomialParams {
    pub fn counts(x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.ncols()).map(|c| x.column(c).sum()).collect()
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, hyper: &Hyper, rng: &mut R) {
        let alpha: Vec<f64> = Self::counts(x).iter().map(|c| hyper.dirichlet_alpha + c).collect();
        self.pi = sample_dirichlet(&alpha, rng);
    }

    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            match one_hot_index(x, i) {
                Some(c) => s += self.pi[c].ln(),
                None => return f64::NEG_INFINITY,
            }
        }
        s
    }
}

pub fn one_hot_index(x: &DMatrix<f64>, i: usize) -> Option<usize> {
    let mut found = None;
    for c in 0..x.ncols() {
        let v = x[(i, c)];
        if v == 1.0 {
            if found.is_some() {
                return None;
            }
            found = Some(c);
        } else if v != 0.0 {
            return None;
        }
    }
    found
}

/// Per-column on-probabilities of a binary matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliParams {
    pub pi: DVector<f64>,
}

impl BernoulliParams {
    pub fn posterior(x: &DMatrix<f64>, j: usize, hyper: &Hyper) -> (f64, f64) {
        let ones = x.column(j).sum();
        (hyper.beta_a + ones, hyper.beta_b + x.nrows() as f64 - ones)
    }

    pub fn resample<R: Rng + ?Sized>(&mut self, x: &DMatrix<f64>, hyper: &Hyper, rng: &mut R) {
        for j in 0..x.ncols() {
            let (a, b) = Self::posterior(x, j, hyper);
            self.pi[j] = sample_beta(a, b, rng);
        }
    }

    pub fn log_density(&self, x: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..x.ncols() {
            let (lp, lq) = (self.pi[j].ln(), (1.0 - self.pi[j]).ln());
            for i in 0..x.nrows() {
                s += match x[(i, j)] {
                    v if v == 1.0 => lp,
                    v if v == 0.0 => lq,
                    _ => return f64::NEG_INFINITY,
                };
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Params {
    Gaussian(GaussianParams),
    Multinomial(MultinomialParams),
    Bernoulli(BernoulliParams),
    Integration,
}

impl Params {
    pub fn kind(&self) -> Kind {
        match self {
            Params::Gaussian(_) => Kind::G,
            Params::Multinomial(_) => Kind::M,
            Params::Bernoulli(_) => Kind::B,
            Params::Integration => Kind::C,
        }
    }

    /// Shape implied by the parameters, where it is determined.
    fn check_shape(&self, x: &DMatrix<f64>) -> Result<(), ComponentError> {
        let found = x.shape();
        let expected = match self {
            Params::Gaussian(g) => (g.row.len(), g.col.len()),
            Params::Multinomial(m) => (found.0, m.pi.len()),
            Params::Bernoulli(b) => (found.0, b.pi.len()),
            Params::Integration => (found.0, found.0),
        };
        if expected != found {
            return Err(ComponentError::ShapeMismatch { expected, found });
        }
        Ok(())
    }
}

/// A leaf's realized value together with its prior parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentMatrix {
    pub value: DMatrix<f64>,
    pub params: Params,
}

impl ComponentMatrix {
    pub fn kind(&self) -> Kind {
        self.params.kind()
    }
}

pub fn integration_matrix(n: usize) -> DMatrix<f64> {
    lower_ones(n)
}

/// Draws parameters from the hyperpriors and then the matrix from the prior.
pub fn sample_component<R: Rng + ?Sized>(
    kind: Kind,
    rows: usize,
    cols: usize,
    tying: Tying,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<ComponentMatrix, ComponentError> {
    hyper.validate()?;
    if kind == Kind::C && rows != cols {
        return Err(ComponentError::ShapeMismatch {
            expected: (rows, rows),
            found: (rows, cols),
        });
    }
    let params = match kind {
        Kind::G => Params::Gaussian(GaussianParams::sample(rows, cols, tying, hyper, rng)),
        Kind::M => Params::Multinomial(MultinomialParams {
            pi: sample_dirichlet(&vec![hyper.dirichlet_alpha; cols], rng),
        }),
        Kind::B => Params::Bernoulli(BernoulliParams {
            pi: DVector::from_fn(cols, |_, _| sample_beta(hyper.beta_a, hyper.beta_b, rng)),
        }),
        Kind::C => Params::Integration,
    };
    let value = sample_value(&params, rows, rng);
    Ok(ComponentMatrix { value, params })
}

/// Draws a matrix from the prior with fixed parameters.
pub fn sample_value<R: Rng + ?Sized>(params: &Params, rows: usize, rng: &mut R) -> DMatrix<f64> {
    match params {
        Params::Gaussian(g) => g.sample_matrix(rng),
        Params::Multinomial(m) => {
            let k = m.pi.len();
            let mut x = DMatrix::zeros(rows, k);
            for i in 0..rows {
                let logw: Vec<f64> = m.pi.iter().map(|p| p.ln()).collect();
                x[(i, crate::linalg::sample_log_weights(&logw, rng))] = 1.0;
            }
            x
        }
        Params::Bernoulli(b) => DMatrix::from_fn(rows, b.pi.len(), |_, j| {
            if rng.random::<f64>() < b.pi[j] {
                1.0
            } else {
                0.0
            }
        }),
        Params::Integration => integration_matrix(rows),
    }
}

/// Exact log prior density of a matrix given its parameters.
pub fn log_density(x: &DMatrix<f64>, params: &Params) -> Result<f64, ComponentError> {
    params.check_shape(x)?;
    Ok(match params {
        Params::Gaussian(g) => g.log_density(x),
        Params::Multinomial(m) => m.log_density(x),
        Params::Bernoulli(b) => b.log_density(x),
        Params::Integration => {
            if *x == integration_matrix(x.nrows()) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    })
}

/// One Gibbs update of a leaf's parameters given its value.
pub fn resample_hyperparams<R: Rng + ?Sized>(x: &DMatrix<f64>, params: &mut Params, hyper: &Hyper, rng: &mut R) {
    match params {
        Params::Gaussian(g) => g.resample(x, hyper, rng),
        Params::Multinomial(m) => m.resample(x, hyper, rng),
        Params::Bernoulli(b) => b.resample(x, hyper, rng),
        Params::Integration => {}
    }
}
