use std::collections::HashSet;

use structsearch::expr::Expr;
use structsearch::grammar::{replay, successors};
use structsearch::inference::{FitConfig, InitConfig, Mask};
use structsearch::rng::rng_for;
use structsearch::search::{greedy_search, select_final, stopping_decision, Candidate, Level, SearchConfig, StopReason};
use structsearch::synthesis::{generate, SynthSpec};

fn quick(max_level: usize) -> SearchConfig {
    SearchConfig {
        max_level,
        fit: FitConfig {
            init: InitConfig {
                sweeps: 20,
                ..InitConfig::default()
            },
            sweeps_per_step: 10,
            ..FitConfig::default()
        },
        ..SearchConfig::default()
    }
}

fn data(structure: &str, n: usize, d: usize, noise: f64, seed: u64) -> nalgebra::DMatrix<f64> {
    let spec = SynthSpec::new(Expr::parse(structure).unwrap(), n, d, noise);
    generate(&spec, &mut rng_for(seed, "data")).unwrap().x
}

fn level(index: usize, values: &[f64]) -> Level {
    Level {
        level: index,
        candidates: values
            .iter()
            .enumerate()
            .map(|(i, &value)| Candidate {
                structure: format!("s{index}.{i}"),
                derivation: Vec::new(),
                parent: None,
                value,
                score: None,
                components: Vec::new(),
                error: None,
            })
            .collect(),
    }
}

#[test]
fn threshold_is_one_nat_per_row_and_column() {
    assert!(stopping_decision(-10_000.0, -9_500.0, 200, 200));
    assert!(!stopping_decision(-10_000.0, -9_600.0, 200, 200));
    assert!(!stopping_decision(-10_000.0, -10_100.0, 200, 200));
}

#[test]
fn steady_improvement_runs_to_the_last_level() {
    let levels: Vec<Level> = (0..5).map(|l| level(l, &[-1000.0 + 100.0 * l as f64])).collect();
    assert_eq!(select_final(&levels, 20, 20), 4);
    let stalled = vec![level(0, &[-1000.0]), level(1, &[-900.0]), level(2, &[-890.0]), level(3, &[0.0])];
    assert_eq!(select_final(&stalled, 20, 20), 1);
}

#[test]
fn level_zero_only_scores_the_baseline() {
    let x = data("GG+G", 20, 15, 1.0, 1);
    let mask = Mask::from_element(20, 15, true);
    let r = greedy_search(&x, &mask, &quick(0), 1).unwrap();
    assert_eq!(r.levels.len(), 1);
    assert_eq!(r.levels[0].candidates.len(), 1);
    assert_eq!(r.chosen, "G");
    assert_eq!(r.stop, StopReason::MaxLevel);
}

#[test]
fn search_is_deterministic_and_replayable() {
    let x = data("MG+G", 30, 20, 0.5, 2);
    let mask = Mask::from_fn(30, 20, |i, j| (i + j) % 11 != 0);
    let config = quick(2);
    let a = greedy_search(&x, &mask, &config, 5).unwrap();
    let b = greedy_search(&x, &mask, &config, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );

    let mut seen = HashSet::new();
    for (l, lv) in a.levels.iter().enumerate() {
        assert!(lv.candidates.windows(2).all(|w| w[0].value >= w[1].value));
        for c in &lv.candidates {
            assert!(seen.insert(c.structure.clone()), "{} scored twice", c.structure);
            assert_eq!(c.derivation.len(), l);
            assert_eq!(replay(&c.derivation).unwrap().to_string(), c.structure);
            if l > 0 {
                let parent = c.parent.as_deref().unwrap();
                let frontier: Vec<&str> = a.levels[l - 1].candidates.iter().take(config.k).map(|p| p.structure.as_str()).collect();
                assert!(frontier.contains(&parent), "{parent} not in the frontier");
            }
        }
    }
}

/// Evaluations per level are bounded by K times the widest successor set.
#[test]
fn evaluations_grow_linearly_with_levels() {
    let x = data("GG+G", 24, 18, 0.1, 3);
    let mask = Mask::from_element(24, 18, true);
    let config = SearchConfig { k: 2, ..quick(3) };
    let r = greedy_search(&x, &mask, &config, 3).unwrap();
    for l in 1..r.levels.len() {
        let widest = r.levels[l - 1]
            .candidates
            .iter()
            .take(config.k)
            .map(|c| successors(&Expr::parse(&c.structure).unwrap()).len())
            .max()
            .unwrap();
        assert!(r.levels[l].candidates.len() <= config.k * widest);
    }
}
