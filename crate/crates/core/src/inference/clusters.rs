//! Row clustering by collapsed Gibbs sampling of a Dirichlet-process mixture
//! with isotropic Gaussian clusters.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::init::{fit_gaussian_params, InitConfig};
use super::state::Node;
use crate::components::{sample_dirichlet, sample_gamma, Hyper, MultinomialParams, Params, Tying};
use crate::error::Result;
use crate::linalg::sample_log_weights;
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Concentration of the process prior over partitions.
const DP_ALPHA: f64 = 1.0;

struct Mixture {
    z: Vec<usize>,
    counts: Vec<usize>,
    sums: Vec<DVector<f64>>,
    /// Noise variance.
    noise_var: f64,
    /// Prior variance of the cluster centres.
    centre_var: f64,
}

impl Mixture {
    fn log_predictive(&self, x: &DVector<f64>, c: Option<usize>) -> f64 {
        let m = x.len() as f64;
        let (mean, var) = match c {
            Some(c) => {
                let prec = 1.0 / self.centre_var + self.counts[c] as f64 / self.noise_var;
                (Some(&self.sums[c] / (self.noise_var * prec)), 1.0 / prec + self.noise_var)
            }
            None => (None, self.centre_var + self.noise_var),
        };
        let sq = match mean {
            Some(mu) => (x - mu).norm_squared(),
            None => x.norm_squared(),
        };
        -0.5 * m * (LN_2PI + var.ln()) - 0.5 * sq / var
    }

    fn remove(&mut self, i: usize, x: &DVector<f64>) {
        let c = self.z[i];
        self.counts[c] -= 1;
        self.sums[c] -= x;
        if self.counts[c] == 0 {
            let last = self.counts.len() - 1;
            self.counts.swap_remove(c);
            self.sums.swap_remove(c);
            if c != last {
                for zi in self.z.iter_mut() {
                    if *zi == last {
                        *zi = c;
                    }
                }
            }
        }
    }

    fn add(&mut self, i: usize, x: &DVector<f64>, c: usize) {
        if c == self.counts.len() {
            self.counts.push(0);
            self.sums.push(DVector::zeros(x.len()));
        }
        self.counts[c] += 1;
        self.sums[c] += x;
        self.z[i] = c;
    }

    fn choose(&self, x: &DVector<f64>, rng: &mut Rng) -> usize {
        let k = self.counts.len();
        let mut logw: Vec<f64> = (0..k)
            .map(|c| (self.counts[c] as f64).ln() + self.log_predictive(x, Some(c)))
            .collect();
        logw.push(DP_ALPHA.ln() + self.log_predictive(x, None));
        sample_log_weights(&logw, rng)
    }

    fn sample_centres(&self, m: usize, rng: &mut Rng) -> DMatrix<f64> {
        let k = self.counts.len();
        let mut g = DMatrix::zeros(k, m);
        for c in 0..k {
            let prec = 1.0 / self.centre_var + self.counts[c] as f64 / self.noise_var;
            let mean = &self.sums[c] / (self.noise_var * prec);
            for j in 0..m {
                let z: f64 = StandardNormal.sample(rng);
                g[(c, j)] = mean[j] + z / prec.sqrt();
            }
        }
        g
    }
}

/// Clusters the rows of `s`, returning `M G + E` with `M` one-hot.
pub(crate) fn init_row_clusters(s: &DMatrix<f64>, tying: Tying, hyper: &Hyper, cfg: &InitConfig, rng: &mut Rng) -> Result<Node> {
    let (n, m) = s.shape();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| s.row(i).transpose()).collect();
    let total_var = s.iter().map(|x| x * x).sum::<f64>() / (n * m) as f64 + 1e-12;
    let mut mix = Mixture {
        z: vec![0; n],
        counts: Vec::new(),
        sums: Vec::new(),
        // Starting over-split is safer: rows of one true cluster coalesce
        // through single-row moves, while a merged cluster rarely splits.
        noise_var: 1e-3 * total_var,
        centre_var: total_var,
    };
    for (i, x) in rows.iter().enumerate() {
        let c = mix.choose(x, rng);
        mix.add(i, x, c);
    }
    for _ in 0..cfg.sweeps {
        for (i, x) in rows.iter().enumerate() {
            mix.remove(i, x);
            let c = mix.choose(x, rng);
            mix.add(i, x, c);
        }
        // Scatter about the cluster means: singleton clusters carry no
        // evidence about the noise, so an all-singleton partition falls back
        // to the prior instead of locking in a tiny noise variance.
        let k = mix.counts.len();
        let means: Vec<DVector<f64>> = (0..k).map(|c| &mix.sums[c] / mix.counts[c] as f64).collect();
        let within: f64 = rows.iter().enumerate().map(|(i, x)| (x - &means[mix.z[i]]).norm_squared()).sum();
        let df = ((n - k) * m) as f64;
        mix.noise_var = 1.0 / sample_gamma(hyper.precision_shape + df / 2.0, hyper.precision_rate + within / 2.0, rng);
        let spread: f64 = means.iter().map(|v| v.norm_squared()).sum();
        mix.centre_var = 1.0 / sample_gamma(hyper.precision_shape + (k * m) as f64 / 2.0, hyper.precision_rate + spread / 2.0, rng);
    }
    let centres = mix.sample_centres(m, rng);
    let k = centres.nrows();
    let mut assign = DMatrix::zeros(n, k);
    for (i, &c) in mix.z.iter().enumerate() {
        assign[(i, c)] = 1.0;
    }
    let residual = s - &assign * &centres;
    let alpha: Vec<f64> = mix.counts.iter().map(|&c| hyper.dirichlet_alpha + c as f64).collect();
    let pi = sample_dirichlet(&alpha, rng);
    let gp = fit_gaussian_params(&centres, 1.0 / mix.centre_var, Tying { rows: false, cols: tying.cols }, hyper, rng);
    let ep = fit_gaussian_params(&residual, 1.0 / mix.noise_var, tying, hyper, rng);
    let mnode = Node::leaf(0, assign, Params::Multinomial(MultinomialParams { pi }));
    let gnode = Node::leaf(0, centres, Params::Gaussian(gp));
    let enode = Node::leaf(0, residual, Params::Gaussian(ep));
    let mut node = Node::sum(vec![Node::product(mnode, gnode)], enode);
    node.value = s.clone();
    Ok(node)
}
