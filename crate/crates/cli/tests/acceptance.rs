//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any fails.
//!
//! Structure recovery runs in its reduced 100x100 form by default. Set
//! `ACCEPTANCE_FULL=1` to also run the 200x200 form over five structures.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use structsearch::components::{ComponentMatrix, GaussianParams, Hyper, Params, Tying};
use structsearch::diagnostics::{geweke, GewekeConfig};
use structsearch::eval::evaluate;
use structsearch::expr::Expr;
use structsearch::grammar::{successors, Step};
use structsearch::inference::{initialize_structure, rts_smoother, FitConfig, Mask, State};
use structsearch::linalg::{log_normal_dense, lower_ones, std_normal_mat};
use structsearch::rng::{rng_for, Rng};
use structsearch::scoring::{ais_ratio, draw_samples, make_holdout, score_samples, AisConfig, ScoreConfig};
use structsearch::search::{greedy_search, stopping_decision, SearchConfig};
use structsearch::synthesis::{generate, SynthSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_structsearch"));
    c.args(["--log", "warn"]);
    c
}

fn p(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

/// Grammar closure through the command line.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let one = bin().args(["enumerate", "--level", "1"]).output().map_err(|e| e.to_string())?;
    let one = String::from_utf8_lossy(&one.stdout).to_string();
    let level1 = one.lines().filter(|l| l.starts_with("1\t")).count();

    let three = bin().args(["enumerate", "--level", "3"]).output().map_err(|e| e.to_string())?;
    let three = String::from_utf8_lossy(&three.stdout).to_string();
    let elapsed = started.elapsed();
    let total: usize = three
        .lines()
        .find_map(|l| l.strip_prefix("# total: "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or("no total line")?;
    let documented = three.lines().any(|l| l.starts_with("# canonical form: ") && l.len() > 40);
    let listed: std::collections::HashSet<&str> = three.lines().filter_map(|l| l.split_once('\t').map(|(_, s)| s)).collect();
    let named = [
        "GG+G",
        "MG+G",
        "GM'+G",
        "BG+G",
        "GB'+G",
        "CG+G",
        "M(GM'+G)+G",
        "M(GB'+G)+G",
        "(MG+G)(GM'+G)+G",
        "(BG+G)G+G",
        "(BG+G)B'+G",
        "(BG+G)(GB'+G)+G",
        "(exp(G)oG)G+G",
        "(exp(GG+G)oG)G+G",
        "(CG+G)G+G",
    ];
    let missing: Vec<&str> = named.iter().copied().filter(|s| !listed.contains(s)).collect();
    check(
        level1 == 8 && (1500..=3500).contains(&total) && documented && missing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "level 1 has {level1} structures; {total} structures within 3 productions (G included); {} named structures, missing {missing:?}; {:.1}s",
            named.len(),
            elapsed.as_secs_f64()
        ),
    )
}

struct Recovery {
    hits: usize,
    runs: usize,
    slowest: Duration,
    chosen: Vec<String>,
}

fn recover(structure: &str, size: usize, noise: f64, seeds: u64) -> Recovery {
    let expr = p(structure);
    let mut r = Recovery {
        hits: 0,
        runs: 0,
        slowest: Duration::ZERO,
        chosen: Vec::new(),
    };
    for s in 0..seeds {
        let seed = structsearch::rng::derive_seed(2013, &format!("acceptance/{structure}/{size}/{noise}/{s}"));
        let started = Instant::now();
        let spec = SynthSpec::new(expr.clone(), size, size, noise);
        let chosen = generate(&spec, &mut rng_for(seed, "data")).and_then(|data| {
            greedy_search(&data.x, &Mask::from_element(size, size, true), &SearchConfig::default(), seed)
        });
        r.slowest = r.slowest.max(started.elapsed());
        r.runs += 1;
        let text = chosen.map(|c| c.chosen).unwrap_or_else(|e| format!("error: {e}"));
        if text == structure {
            r.hits += 1;
        }
        r.chosen.push(text);
    }
    r
}

fn recovery_table(structures: &[&str], size: usize, budget: Duration) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for s in structures {
        let r = recover(s, size, 1.0, 5);
        ok &= r.hits >= 3 && r.slowest <= budget;
        lines.push(format!("{s} {}/{} (slowest {:.0}s; chose {:?})", r.hits, r.runs, r.slowest.as_secs_f64(), r.chosen));
    }
    check(ok, format!("{size}x{size}: {}", lines.join("; ")))
}

fn criterion_2() -> Outcome {
    let reduced = recovery_table(&["GG+G", "MG+G", "CG+G"], 100, Duration::from_secs(15 * 60));
    if std::env::var("ACCEPTANCE_FULL").as_deref() != Ok("1") {
        return reduced.map(|d| format!("{d} [full 200x200 mode not requested]"));
    }
    let full = recovery_table(&["GG+G", "MG+G", "BG+G", "M(GM'+G)+G", "CG+G"], 200, Duration::from_secs(2 * 3600));
    match (reduced, full) {
        (Ok(a), Ok(b)) => Ok(format!("{a} | {b}")),
        (a, b) => Err(format!("{} | {}", a.unwrap_or_else(|e| e), b.unwrap_or_else(|e| e))),
    }
}

fn criterion_3() -> Outcome {
    let r = recover("GG+G", 200, 10.0, 5);
    let g = r.chosen.iter().filter(|c| *c == "G").count();
    check(g >= 4, format!("G chosen in {g}/5 runs at noise variance 10 ({:?})", r.chosen))
}

/// Leaves of `GG+G` with a rank-one product and unit precisions, summing to `x`.
fn rank_one_state(x: &DMatrix<f64>, rng: &mut Rng) -> State {
    let (n, d) = x.shape();
    let u = std_normal_mat(n, 1, rng);
    let v = std_normal_mat(1, d, rng);
    let e = x - &u * &v;
    let gauss = |value: DMatrix<f64>, tying: Tying| {
        let (r, c) = value.shape();
        ComponentMatrix {
            params: Params::Gaussian(GaussianParams::constant(r, c, 1.0, tying)),
            value,
        }
    };
    let leaves = [
        (0, gauss(u, Tying { rows: true, cols: false })),
        (1, gauss(v, Tying { rows: false, cols: true })),
        (2, gauss(e, Tying::DATA)),
    ]
    .into_iter()
    .collect();
    State::from_expr(&p("GG+G"), &leaves).unwrap()
}

/// `log p(x* | X_O)` for `GG+G` with `k = 1`, unit precisions and two
/// columns, by quadrature over the right factor `v`.
fn rank_one_oracle(observed: &DMatrix<f64>, held: &DMatrix<f64>) -> Vec<f64> {
    let cov = |v: &DVector<f64>| DMatrix::identity(2, 2) + v * v.transpose();
    let (lim, steps) = (7.0, 700);
    let h = 2.0 * lim / steps as f64;
    let mut log_post = Vec::new();
    let mut grid = Vec::new();
    for a in 0..=steps {
        for b in 0..=steps {
            let v = DVector::from_vec(vec![-lim + a as f64 * h, -lim + b as f64 * h]);
            let c = cov(&v);
            let mut lp = -0.5 * v.norm_squared() - LN_2PI;
            for i in 0..observed.nrows() {
                lp += log_normal_dense(&observed.row(i).transpose(), &DVector::zeros(2), &c).unwrap();
            }
            log_post.push(lp);
            grid.push(c);
        }
    }
    let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    (0..held.nrows())
        .map(|r| {
            let x = held.row(r).transpose();
            let m: f64 = weights
                .iter()
                .zip(&grid)
                .map(|(w, c)| w * log_normal_dense(&x, &DVector::zeros(2), c).unwrap().exp())
                .sum();
            (m / z).ln()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    // Structureless model with a fixed precision against its closed form.
    let mut rng = rng_for(4, "closed-form");
    let x = std_normal_mat(6, 6, &mut rng) * 1.3;
    let mask = Mask::from_element(6, 6, true);
    let holdout = make_holdout(6, 6, 2, 2, 1).map_err(|e| e.to_string())?;
    let precision = 0.8;
    let state = State::structureless(holdout.observed_block(&x), precision);
    let score = score_samples(&[state], &x, &mask, &holdout, &ScoreConfig::default(), 0).map_err(|e| e.to_string())?;
    let entry = |v: f64| 0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * v * v;
    let xr = &x;
    let exact: f64 = holdout.rows.iter().flat_map(|&i| holdout.obs_cols.iter().map(move |&j| xr[(i, j)])).map(entry).sum::<f64>()
        + holdout.cols.iter().flat_map(|&j| holdout.obs_rows.iter().map(move |&i| xr[(i, j)])).map(entry).sum::<f64>();
    let closed_gap = (score.total - exact).abs();

    // Rank-one model against quadrature over the posterior of its factor.
    let mut rng = rng_for(4, "rank-one");
    let (n, held_rows) = (6, 2);
    let u = std_normal_mat(n + held_rows, 1, &mut rng);
    let v = DMatrix::from_row_slice(1, 2, &[1.5, -1.0]);
    let x = &u * &v + std_normal_mat(n + held_rows, 2, &mut rng);
    let holdout = make_holdout(n + held_rows, 2, held_rows, 0, 3).map_err(|e| e.to_string())?;
    let observed = holdout.observed_block(&x);
    let held = DMatrix::from_fn(held_rows, 2, |r, j| x[(holdout.rows[r], j)]);
    let oracle: f64 = rank_one_oracle(&observed, &held).iter().sum();

    // Precisions pinned at one by a sharp hyperprior.
    let hyper = Hyper {
        precision_shape: 1e8,
        precision_rate: 1e8,
        ..Hyper::default()
    };
    let obs_mask = Mask::from_element(n, 2, true);
    let full_mask = Mask::from_element(n + held_rows, 2, true);
    let config = ScoreConfig::default();
    let mut estimates = Vec::new();
    for run in 0..50u64 {
        let mut rng = rng_for(run, "rank-one/chain");
        let start = rank_one_state(&observed, &mut rng);
        let burned = draw_samples(&start, &obs_mask, &hyper, 1, 200, &mut rng).map_err(|e| e.to_string())?;
        let samples = draw_samples(&burned[0], &obs_mask, &hyper, config.samples, config.thin, &mut rng).map_err(|e| e.to_string())?;
        let s = score_samples(&samples, &x, &full_mask, &holdout, &config, run).map_err(|e| e.to_string())?;
        estimates.push(s.total);
    }
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[24] + estimates[25]);
    check(
        closed_gap < 1e-8 && median <= oracle + 0.1 && (median - oracle).abs() <= 1.0,
        format!("G closed form gap {closed_gap:.1e}; GG+G k=1 median {median:.4} vs quadrature {oracle:.4}"),
    )
}

fn criterion_5() -> Outcome {
    // Reference N(0, 1); target 2 N(1, 0.5^2), so the ratio is 2.
    let log_ref = |x: &f64| -0.5 * x * x - 0.5 * LN_2PI;
    let log_target = |x: &f64| 2f64.ln() - 0.5 * ((x - 1.0) / 0.5).powi(2) - 0.5 * LN_2PI - 0.5f64.ln();
    let config = AisConfig {
        runs: 1,
        ..AisConfig::default()
    };
    let mut rng = rng_for(5, "ais");
    let estimates: Vec<f64> = (0..10_000)
        .map(|_| {
            ais_ratio(
                log_target,
                log_ref,
                |r: &mut Rng| StandardNormal.sample(r),
                |x: &mut f64, beta: f64, r: &mut Rng| {
                    // Metropolis step on the tempered density.
                    let log_t = |y: f64| (1.0 - beta) * log_ref(&y) + beta * log_target(&y);
                    let step: f64 = StandardNormal.sample(r);
                    let y = *x + 0.8 * step;
                    if r.random::<f64>().ln() < log_t(y) - log_t(*x) {
                        *x = y;
                    }
                },
                &config,
                &mut rng,
            )
            .ratio()
        })
        .collect();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let se = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let positive = estimates.iter().all(|&e| e > 0.0);
    check(
        (mean - 2.0).abs() <= 3.0 * se && positive,
        format!("mean of 10^4 estimates {mean:.4} (SE {se:.4}); all positive: {positive}"),
    )
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in ["GG+G", "MG+G", "BG+G", "CG+G"] {
        let r = geweke(&p(s), &GewekeConfig::default(), 0).map_err(|e| e.to_string())?;
        ok &= r.max_abs_z() < 3.0;
        parts.push(format!("{s} max|z| {:.2} over {} moments", r.max_abs_z(), r.checks.len()));
    }

    let obs = [0.9, -0.4, 0.3, 1.6, 1.1, 2.4];
    let obs_prec = [1.0, 0.5, 2.0, 1.5, 0.7, 3.0];
    let inc_mean = [0.0, 0.2, -0.1, 0.4, 0.0, 0.1];
    let inc_prec = [0.6, 1.4, 2.2, 0.9, 1.1, 1.7];
    let (mean, var) = rts_smoother(&obs, &obs_prec, &inc_mean, &inc_prec);
    let l = lower_ones(6);
    let mu = &l * DVector::from_column_slice(&inc_mean);
    let sx = &l * DMatrix::from_diagonal(&DVector::from_iterator(6, inc_prec.iter().map(|q| 1.0 / q))) * l.transpose();
    let sy = &sx + DMatrix::from_diagonal(&DVector::from_iterator(6, obs_prec.iter().map(|q| 1.0 / q)));
    let gain = &sx * sy.try_inverse().ok_or("singular")?;
    let pm = &mu + &gain * (DVector::from_column_slice(&obs) - &mu);
    let pc = &sx - &gain * &sx;
    let gap = (0..6).map(|t| (mean[t] - pm[t]).abs().max((var[t] - pc[(t, t)]).abs())).fold(0.0, f64::max);
    ok &= gap < 1e-8;
    parts.push(format!("smoother vs dense conditioning {gap:.1e}"));
    check(ok, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let mut rng = rng_for(7, "triples");
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for t in 0..50u64 {
        let mut expr = Expr::g();
        let mut steps: Vec<Step> = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let succ = successors(&expr);
            let pick = &succ[rng.random_range(0..succ.len())];
            steps.push(pick.step);
            expr = pick.expr.clone();
        }
        let (n, d) = (rng.random_range(6..16), rng.random_range(5..13));
        let x = std_normal_mat(n, d, &mut rng) * rng.random_range(0.1..10.0);
        let mask: Mask = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() < 0.85);
        match initialize_structure(&x, &mask, &steps, &FitConfig::default(), t) {
            Ok(state) => {
                let v = evaluate(&state.expr(), &state.binding()).map_err(|e| e.to_string())?;
                let (mut num, mut den) = (0.0, 0.0);
                for (k, &m) in mask.iter().enumerate() {
                    if m {
                        num += (v[k] - x[k]).powi(2);
                        den += x[k].powi(2);
                    }
                }
                let rel = (num / den).sqrt();
                worst = worst.max(rel);
                if !(rel <= 1e-9) || state.expr() != expr {
                    failures.push(expr.to_string());
                }
            }
            Err(e) => failures.push(format!("{expr}: {e}")),
        }
    }
    check(failures.is_empty(), format!("worst relative error {worst:.1e} over 50 triples; failures {failures:?}"))
}

fn criterion_8() -> Outcome {
    let boundary = stopping_decision(-20_000.0, -19_600.0, 200, 200);
    let above = stopping_decision(-20_000.0, -19_500.0, 200, 200);
    check(
        !boundary && above,
        format!("improvement of exactly N+D=400 accepted: {boundary}; improvement of 500 accepted: {above}"),
    )
}

fn run_search(data: &Path, out: &Path, jobs: &str) -> Result<Vec<u8>, String> {
    let o = bin()
        .args(["search", "--input", data.to_str().unwrap(), "--seed", "21", "--max-level", "2"])
        .args(["--jobs", jobs, "--out", out.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).to_string());
    }
    std::fs::read(out.join("report.json")).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec::new(p("MG+G"), 40, 30, 1.0);
    let data = generate(&spec, &mut rng_for(9, "data")).map_err(|e| e.to_string())?;
    let path = dir.path().join("data.csv");
    structsearch_cli::data::write_matrix(&path, &data.x).map_err(|e| e.to_string())?;
    let a = run_search(&path, &dir.path().join("a"), "1")?;
    let b = run_search(&path, &dir.path().join("b"), "1")?;
    let c = run_search(&path, &dir.path().join("c"), "8")?;
    check(
        a == b && a == c,
        format!("reports of {} bytes; repeat identical: {}; --jobs 8 identical: {}", a.len(), a == b, a == c),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n}: PASS ({secs:.0}s) {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.0}s) {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
