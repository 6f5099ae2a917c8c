use nalgebra::DMatrix;
use structsearch::expr::Expr;
use structsearch::inference::{FitConfig, InitConfig, Mask, State};
use structsearch::linalg::std_normal_mat;
use structsearch::rng::seeded;
use structsearch::scoring::{make_holdout, score_samples, score_structure, ScoreConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn quick() -> FitConfig {
    FitConfig {
        init: InitConfig {
            sweeps: 10,
            ..InitConfig::default()
        },
        sweeps_per_step: 5,
        ..FitConfig::default()
    }
}

#[test]
fn structureless_score_is_a_gaussian_density() {
    let mut rng = seeded(1);
    let x = std_normal_mat(6, 6, &mut rng) * 1.5;
    let mask = Mask::from_element(6, 6, true);
    let holdout = make_holdout(6, 6, 2, 1, 4).unwrap();
    let precision = 0.7;
    let state = State::structureless(holdout.observed_block(&x), precision);
    let score = score_samples(&[state], &x, &mask, &holdout, &ScoreConfig::default(), 0).unwrap();

    let entry = |v: f64| 0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * v * v;
    let rows: f64 = holdout.rows.iter().flat_map(|&i| holdout.obs_cols.iter().map(move |&j| (i, j))).map(|(i, j)| entry(x[(i, j)])).sum();
    let cols: f64 = holdout.cols.iter().flat_map(|&j| holdout.obs_rows.iter().map(move |&i| (i, j))).map(|(i, j)| entry(x[(i, j)])).sum();
    assert!((score.row_total() - rows).abs() < 1e-8);
    assert!((score.col_total() - cols).abs() < 1e-8);
    assert!((score.total - rows - cols).abs() < 1e-8);
    assert!((score.scaled_total - (rows * 6.0 / 2.0 + cols * 6.0)).abs() < 1e-8);
}

#[test]
fn empty_holdout_scores_zero() {
    let x = DMatrix::from_element(5, 5, 1.0);
    let mask = Mask::from_element(5, 5, true);
    let holdout = make_holdout(5, 5, 0, 0, 0).unwrap();
    let s = score_structure(&Expr::g(), &x, &mask, &holdout, &quick(), &ScoreConfig::default(), 0).unwrap();
    assert_eq!(s.total, 0.0);
    assert_eq!(s.scaled_total, 0.0);
}

#[test]
fn order_of_held_out_rows_is_irrelevant() {
    let mut rng = seeded(2);
    let x = std_normal_mat(14, 10, &mut rng);
    let mask = Mask::from_element(14, 10, true);
    let holdout = make_holdout(14, 10, 3, 2, 5).unwrap();
    let expr = Expr::parse("MG+G").unwrap();
    let a = score_structure(&expr, &x, &mask, &holdout, &quick(), &ScoreConfig::default(), 3).unwrap();
    let mut reversed = holdout.clone();
    reversed.rows.reverse();
    reversed.cols.reverse();
    let b = score_structure(&expr, &x, &mask, &reversed, &quick(), &ScoreConfig::default(), 3).unwrap();
    assert!((a.total - b.total).abs() < 1e-9 * a.total.abs());
}

#[test]
fn missing_entries_of_held_out_rows_are_skipped() {
    let mut rng = seeded(3);
    let x = std_normal_mat(10, 8, &mut rng);
    let holdout = make_holdout(10, 8, 2, 0, 1).unwrap();
    let mut mask = Mask::from_element(10, 8, true);
    let r = holdout.rows[0];
    for j in 0..8 {
        mask[(r, j)] = false;
    }
    let s = score_structure(&Expr::parse("GG+G").unwrap(), &x, &mask, &holdout, &quick(), &ScoreConfig::default(), 0).unwrap();
    let row = s.rows.iter().find(|h| h.index == r).unwrap();
    assert_eq!(row.log_lik, 0.0);
    assert!(s.total.is_finite());
}

#[test]
fn scores_are_reproducible() {
    let mut rng = seeded(4);
    let x = std_normal_mat(12, 9, &mut rng);
    let mask = Mask::from_element(12, 9, true);
    let holdout = make_holdout(12, 9, 2, 2, 7).unwrap();
    let expr = Expr::parse("(exp(G)oG)G+G").unwrap();
    let a = score_structure(&expr, &x, &mask, &holdout, &quick(), &ScoreConfig::default(), 8).unwrap();
    let b = score_structure(&expr, &x, &mask, &holdout, &quick(), &ScoreConfig::default(), 8).unwrap();
    assert_eq!(a, b);
    assert!(a.rows.iter().all(|h| !h.ais_log_weights.is_empty()));
}
