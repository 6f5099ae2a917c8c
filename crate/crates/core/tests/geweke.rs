//! Joint-distribution tests of the Gibbs samplers on toy matrices.

use structsearch::components::Hyper;
use structsearch::diagnostics::{geweke, GewekeConfig, GewekeReport};
use structsearch::expr::Expr;

fn run(text: &str, config: &GewekeConfig) -> GewekeReport {
    geweke(&Expr::parse(text).unwrap(), config, 0).unwrap()
}

fn assert_passes(text: &str) {
    let report = run(text, &GewekeConfig::default());
    for c in &report.checks {
        assert!(
            c.z.abs() < 3.0,
            "{text}: {} moment {} marginal {} successive {} z {}",
            c.name,
            c.moment,
            c.marginal,
            c.successive,
            c.z
        );
    }
}

#[test]
fn low_rank() {
    assert_passes("GG+G");
}

#[test]
fn clustering() {
    assert_passes("MG+G");
}

#[test]
fn binary_features() {
    assert_passes("BG+G");
}

#[test]
fn random_walk() {
    assert_passes("CG+G");
}

/// A chain run under the wrong hyperprior must be caught.
#[test]
fn mismatched_chain_is_detected() {
    let config = GewekeConfig {
        samples: 2000,
        chain_hyper: Some(Hyper {
            precision_shape: 10.0,
            precision_rate: 2.0,
            ..Hyper::default()
        }),
        ..GewekeConfig::default()
    };
    assert!(run("GG+G", &config).max_abs_z() > 3.0);
}
