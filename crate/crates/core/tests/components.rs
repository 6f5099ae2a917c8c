use nalgebra::{DMatrix, DVector};
use structsearch::components::{
    integration_matrix, log_density, BernoulliParams, GaussianParams, Hyper, MultinomialParams, Params, Tying,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * f(lo + i as f64 * h)
        })
        .sum::<f64>()
        * h
}

#[test]
fn integration_matrix_is_lower_ones() {
    let c = integration_matrix(3);
    assert_eq!(c, DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]));
    assert_eq!(log_density(&c, &Params::Integration).unwrap(), 0.0);
    assert_eq!(log_density(&DMatrix::identity(3, 3), &Params::Integration).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn unit_gaussian_at_zero() {
    let p = Params::Gaussian(GaussianParams::constant(1, 1, 1.0, Tying::DATA));
    let lp = log_density(&DMatrix::zeros(1, 1), &p).unwrap();
    assert!((lp + 0.5 * LN_2PI).abs() < 1e-15);
}

#[test]
fn one_hot_row_takes_its_cluster_probability() {
    let p = Params::Multinomial(MultinomialParams {
        pi: DVector::from_vec(vec![0.2, 0.5, 0.3]),
    });
    let x = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
    assert!((log_density(&x, &p).unwrap() - 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn bernoulli_matches_enumeration() {
    let pi = [0.3, 0.8];
    let p = Params::Bernoulli(BernoulliParams {
        pi: DVector::from_vec(pi.to_vec()),
    });
    let mut total = 0.0;
    for bits in 0..16u32 {
        let x = DMatrix::from_fn(2, 2, |i, j| ((bits >> (2 * i + j)) & 1) as f64);
        let brute: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| if x[(i, j)] == 1.0 { pi[j] } else { 1.0 - pi[j] })
            .product();
        let lp = log_density(&x, &p).unwrap();
        assert!((lp.exp() - brute).abs() < 1e-12);
        total += lp.exp();
    }
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn one_hot_masses_sum_to_one() {
    let p = Params::Multinomial(MultinomialParams {
        pi: DVector::from_vec(vec![0.1, 0.6, 0.3]),
    });
    let mut total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let x = DMatrix::from_fn(2, 3, |i, c| if [a, b][i] == c { 1.0 } else { 0.0 });
            total += log_density(&x, &p).unwrap().exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn gaussian_density_integrates_to_one() {
    let g = GaussianParams::constant(1, 1, 2.5, Tying::DATA);
    let mass = trapezoid(|v| g.log_density(&DMatrix::from_element(1, 1, v)).exp(), -10.0, 10.0, 20_000);
    assert!((mass - 1.0).abs() < 1e-6);
}

#[test]
fn bernoulli_column_posterior_counts() {
    let x = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 1.0]);
    assert_eq!(BernoulliParams::posterior(&x, 0, &Hyper::default()), (4.0, 2.0));
}

/// The tied Gamma posterior against a numerically normalized posterior over
/// the precision of a 2x2 matrix.
#[test]
fn tied_precision_posterior_matches_quadrature() {
    let hyper = Hyper {
        precision_shape: 2.0,
        precision_rate: 1.5,
        ..Hyper::default()
    };
    let x = DMatrix::from_row_slice(2, 2, &[0.4, -1.2, 0.7, 0.1]);
    let g = GaussianParams::constant(2, 2, 1.0, Tying { rows: true, cols: false });
    let (shape, rate) = g.row_posteriors(&x, &hyper)[0];
    assert_eq!(shape, 2.0 + 2.0);
    let ss: f64 = x.iter().map(|v| v * v).sum();
    assert!((rate - (1.5 + ss / 2.0)).abs() < 1e-15);

    let unnorm = |tau: f64| {
        if tau <= 0.0 {
            return 0.0;
        }
        let prior = (hyper.precision_shape - 1.0) * tau.ln() - hyper.precision_rate * tau;
        let lik = GaussianParams::constant(2, 2, tau, Tying::DATA).log_density(&x);
        (prior + lik).exp()
    };
    let z = trapezoid(unnorm, 0.0, 40.0, 200_000);
    let mean = trapezoid(|t| t * unnorm(t), 0.0, 40.0, 200_000) / z;
    let var = trapezoid(|t| t * t * unnorm(t), 0.0, 40.0, 200_000) / z - mean * mean;
    assert!((mean - shape / rate).abs() < 1e-4);
    assert!((var - shape / (rate * rate)).abs() < 1e-4);
}
