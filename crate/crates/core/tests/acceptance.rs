//! Exit criteria. Runs every criterion at its stated threshold and prints
//! one PASS/FAIL line each, followed by the measured values.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvar::emulate::{one_step, rollout_against, LagWindow, DEFAULT_MAGNITUDE_BOUND};
use nvar::experiments::{
    run_bias_ablation, run_colpitts_study, run_cross_validation, run_grid_search,
    run_noise_length_sweep, run_skip_study, sub_seed, Cell, CellKey, ChosenCell, Experiment,
    ExperimentConfig, GridResult, Variant,
};
use nvar::integrate::{
    generate_trajectory, sample_test_segments, step, Scheme, DEFAULT_SPINUP_MTU,
};
use nvar::readout::{compare, derive_w_euler, fit_trajectory};
use nvar::{FeatureIndex, FeatureSpec, FitOptions, SystemSpec};

use common::*;

const SEED: u64 = 20220101;

struct Report {
    lines: Vec<String>,
    pass: bool,
}

impl Report {
    fn new() -> Self {
        Report {
            lines: Vec::new(),
            pass: true,
        }
    }

    /// Records one sub-check.
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.pass &= ok;
        self.lines.push(format!(
            "{} {}",
            if ok { "ok  " } else { "FAIL" },
            what.into()
        ));
    }

    fn note(&mut self, what: impl Into<String>) {
        self.lines.push(format!("     {}", what.into()));
    }

    fn runtime(&mut self, elapsed: Duration, limit_secs: f64) {
        let s = elapsed.as_secs_f64();
        self.check(s < limit_secs, format!("runtime {s:.1} s < {limit_secs} s"));
    }
}

fn median(r: &GridResult, pred: impl Fn(&CellKey) -> bool) -> f64 {
    r.find(pred)
        .and_then(|c| c.outcome.median())
        .unwrap_or(f64::NAN)
}

fn cell_label(c: &Cell) -> String {
    let k = &c.key;
    match c.outcome.median() {
        Some(m) => format!("p={} t={} F={}: {m:.2}", k.degree, k.lags, k.feature_count),
        None => format!(
            "p={} t={} F={}: fit failure",
            k.degree, k.lags, k.feature_count
        ),
    }
}

fn on_attractor_states(system: &SystemSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let traj = generate_trajectory(
        system,
        Scheme::Euler,
        &system.default_initial_state(),
        0.01,
        100.0,
        DEFAULT_SPINUP_MTU,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| traj.column(rng.random_range(0..traj.len())).to_vec())
        .collect()
}

fn derived_readout_oracle() -> Report {
    let mut rep = Report::new();
    let start = Instant::now();
    for system in [SystemSpec::lorenz63(), SystemSpec::lorenz96(6)] {
        let label = system.label();
        let index =
            FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), system.dimension()).unwrap();
        let readout = derive_w_euler(&system, 0.01, &index).unwrap();
        let mut worst_step = 0.0f64;
        for s in on_attractor_states(&system, 1000, sub_seed(SEED, &format!("states/{label}"))) {
            let pred =
                one_step(&readout, &LagWindow::new(std::slice::from_ref(&s)).unwrap()).unwrap();
            let (truth, _) = step(&system, Scheme::Euler, &s, None, 0.01).unwrap();
            for (a, b) in pred.iter().zip(&truth) {
                worst_step = worst_step.max((a - b).abs());
            }
        }
        rep.check(
            worst_step < 1e-12,
            format!("{label} one-step max error {worst_step:.2e} < 1e-12"),
        );

        let segments = sample_test_segments(
            &system,
            Scheme::Euler,
            0.01,
            100,
            25.0,
            sub_seed(SEED, &format!("test/{label}/euler")),
        )
        .unwrap();
        let mut errors: Vec<f64> = segments
            .iter()
            .map(|seg| {
                let r = rollout_against(&readout, seg, DEFAULT_MAGNITUDE_BOUND).unwrap();
                assert_eq!(r.trajectory.len(), seg.len());
                (&r.trajectory.values - &seg.values).amax()
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        let within = errors.iter().filter(|e| **e < 1e-6).count();
        rep.check(
            errors[errors.len() - 1] < 1e-6,
            format!(
                "{label} 25 MTU rollout max error {:.2e} < 1e-6 (median {:.2e}, {within}/100 segments within)",
                errors[errors.len() - 1],
                errors[errors.len() / 2]
            ),
        );
    }
    rep.runtime(start.elapsed(), 30.0);
    rep
}

fn scheme_recovery() -> Report {
    let mut rep = Report::new();
    let start = Instant::now();
    for system in [SystemSpec::lorenz63(), SystemSpec::lorenz96(6)] {
        let traj = generate_trajectory(
            &system,
            Scheme::Euler,
            &system.default_initial_state(),
            0.01,
            400.0,
            DEFAULT_SPINUP_MTU,
        )
        .unwrap();
        let index =
            FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), system.dimension()).unwrap();
        let fitted = fit_trajectory(&traj, &index, &FitOptions::default()).unwrap();
        let derived = derive_w_euler(&system, 0.01, &index).unwrap();
        let diff = compare(&fitted, &derived).unwrap();
        rep.check(
            diff.max_abs_diff < 1e-8,
            format!(
                "{} max |W_fit - W_Euler| {:.2e} < 1e-8",
                system.label(),
                diff.max_abs_diff
            ),
        );
    }
    rep.runtime(start.elapsed(), 60.0);
    rep
}

fn fitted_bias(r: &GridResult, system: &str, bias: bool) -> f64 {
    median(r, |k| {
        k.system == system && k.variant == Variant::Fitted && k.bias == bias
    })
}

fn prediction_skill(bias: &GridResult, elapsed: Duration) -> Report {
    let mut rep = Report::new();
    for system in ["l63", "l96-6d"] {
        let m = fitted_bias(bias, system, true);
        rep.check(
            m >= 15.0,
            format!("{system} fitted median VPT {m:.2} >= 15 MTU"),
        );
    }
    rep.runtime(elapsed, 300.0);
    rep
}

fn bias_ablation(bias: &GridResult) -> Report {
    let mut rep = Report::new();
    let (with, without) = (
        fitted_bias(bias, "l96-6d", true),
        fitted_bias(bias, "l96-6d", false),
    );
    rep.check(
        without < 0.5 * with,
        format!("l96-6d without bias {without:.2} < 50% of {with:.2}"),
    );
    let (with, without) = (
        fitted_bias(bias, "l63", true),
        fitted_bias(bias, "l63", false),
    );
    let change = (without - with).abs() / with;
    rep.check(
        change < 0.2,
        format!(
            "l63 without bias {without:.2} vs {with:.2}: change {:.1}% < 20%",
            100.0 * change
        ),
    );
    let derived = median(bias, |k| {
        k.system == "l63-norm" && k.variant == Variant::Derived
    });
    rep.note(format!(
        "l63-norm derived {derived:.2}, with bias {:.2}, without {:.2}",
        fitted_bias(bias, "l63-norm", true),
        fitted_bias(bias, "l63-norm", false)
    ));
    rep
}

fn cross_validation(grid: &GridResult) -> Report {
    let mut rep = Report::new();
    let chosen: Vec<ChosenCell> = grid
        .best()
        .map(|c| ChosenCell {
            scheme: c.key.scheme_train,
            degree: c.key.degree,
            lags: c.key.lags,
        })
        .collect();
    let cfg = ExperimentConfig {
        chosen: Some(chosen),
        ..ExperimentConfig::defaults(Experiment::Crossval)
    };
    let cv = run_cross_validation(&cfg).unwrap();
    rep.check(cv.cells.len() == 9, format!("{} cells", cv.cells.len()));
    for train in Scheme::ALL {
        for test in Scheme::ALL {
            let c = cv
                .find(|k| k.scheme_train == train && k.scheme_test == test)
                .expect("cell present");
            let m = c.outcome.median().unwrap_or(f64::NAN);
            let (ok, rule) = if train == test {
                (m > 10.0, "> 10")
            } else {
                (m < 2.0, "< 2")
            };
            rep.check(
                ok,
                format!(
                    "train {train} (p={} t={}) test {test}: {m:.2} {rule} MTU",
                    c.key.degree, c.key.lags
                ),
            );
        }
    }
    rep
}

fn scheme_hyperparameters(grid: &GridResult) -> Report {
    let mut rep = Report::new();
    for c in grid.best() {
        rep.note(format!("best {}: {}", c.key.scheme_train, cell_label(c)));
    }
    let ab2 = grid
        .best()
        .find(|c| c.key.scheme_train == Scheme::Ab2)
        .expect("AB2 best cell");
    rep.check(
        ab2.key.lags >= 1,
        format!("AB2 best cell t={} >= 1", ab2.key.lags),
    );
    let rk2 = |p: usize| {
        median(grid, |k| {
            k.scheme_train == Scheme::Rk2 && k.degree == p && k.lags == 0
        })
    };
    let (p4, p2) = (rk2(4), rk2(2));
    rep.check(
        p4 - p2 >= 5.0,
        format!("RK2 (4,0) {p4:.2} - (2,0) {p2:.2} >= 5 MTU"),
    );
    rep
}

fn noise_sensitivity() -> Report {
    let mut rep = Report::new();
    let cfg = ExperimentConfig::defaults(Experiment::Noise);
    let r = run_noise_length_sweep(&cfg).unwrap();
    let at = |n: f64, d: usize| median(&r, |k| k.noise == n && k.divisor == d);
    for &d in &cfg.divisors {
        let row: Vec<String> = cfg
            .noise_levels
            .iter()
            .map(|&n| format!("{:.2}", at(n, d)))
            .collect();
        rep.note(format!("divisor {d:>3}: {}", row.join(" ")));
    }
    let levels = [0.0, 1e-6, 1e-4, 1e-2, 0.1];
    let meds: Vec<f64> = levels.iter().map(|&n| at(n, 1)).collect();
    let monotone = meds.windows(2).all(|w| w[1] <= w[0] + 1.0);
    rep.check(
        monotone,
        format!("full length, nonincreasing within 1 MTU over {levels:?}: {meds:.2?}"),
    );
    for &d in &cfg.divisors {
        let m = at(0.1, d);
        rep.check(
            (1.0..=4.0).contains(&m),
            format!("divisor {d}: n=0.1 median {m:.2} in [1, 4]"),
        );
    }
    let clean: Vec<f64> = cfg.divisors.iter().map(|&d| at(0.0, d)).collect();
    let spread = clean.iter().cloned().fold(f64::MIN, f64::max)
        - clean.iter().cloned().fold(f64::MAX, f64::min);
    rep.check(
        spread < 3.0,
        format!("noise-free spread across divisors {spread:.2} < 3 MTU ({clean:.2?})"),
    );
    rep
}

fn skip_prediction() -> Report {
    let mut rep = Report::new();
    let cfg = ExperimentConfig::defaults(Experiment::Skip);
    let r = run_skip_study(&cfg).unwrap();
    for &s in &cfg.skips {
        let best = r.best().find(|c| c.key.skip == s && c.key.preconditioned);
        let m = best.and_then(|c| c.outcome.median()).unwrap_or(f64::NAN);
        rep.check(
            m > 10.0,
            format!(
                "skip {s} preconditioned best {} > 10 MTU",
                best.map(cell_label).unwrap_or_default()
            ),
        );
    }
    let plain8: Vec<&Cell> = r.filter(|k| k.skip == 8 && !k.preconditioned).collect();
    let top = plain8
        .iter()
        .filter_map(|c| c.outcome.median())
        .fold(f64::MIN, f64::max);
    rep.check(
        top <= 5.0,
        format!("skip 8 plain: best cell {top:.2} does not exceed 5 MTU"),
    );
    let failures: Vec<&Cell> = r
        .cells
        .iter()
        .filter(|c| !c.key.preconditioned && c.outcome.is_failure())
        .collect();
    let large_p = failures.iter().filter(|c| c.key.degree >= 5).count();
    rep.check(
        large_p > 0,
        format!(
            "{} plain fit failures, {large_p} with p >= 5",
            failures.len()
        ),
    );
    rep
}

fn colpitts() -> Report {
    let mut rep = Report::new();
    let r = run_colpitts_study(&ExperimentConfig::defaults(Experiment::Colpitts)).unwrap();
    let at = |scheme: Scheme, features: &str| {
        median(&r, |k| {
            k.scheme_train == scheme && k.features == features && k.preconditioned
        })
    };
    let poly = at(Scheme::Rk2, "poly");
    rep.check(
        poly < 1.0,
        format!("RK2 p=2 polynomial median {poly:.2} < 1 MTU"),
    );
    let exp = at(Scheme::Rk2, "exp");
    rep.check(
        (25.0..=100.0).contains(&exp),
        format!("RK2 exp median {exp:.2} in [25, 100] MTU"),
    );
    let euler = at(Scheme::Euler, "exp");
    rep.check(
        euler > 150.0,
        format!("Euler exp median {euler:.2} > 150 MTU"),
    );
    let plain_exp = r
        .filter(|k| k.features == "exp" && !k.preconditioned)
        .filter(|c| c.outcome.is_failure())
        .count();
    rep.note(format!("plain exp-feature fits failing: {plain_exp}"));
    rep
}

fn property_suites() -> Report {
    let mut rep = Report::new();
    let euler = convergence_slope(Scheme::Euler);
    rep.check(
        (euler - 1.0).abs() < 0.1,
        format!("Euler convergence slope {euler:.3}"),
    );
    let rk2 = convergence_slope(Scheme::Rk2);
    rep.check(
        (rk2 - 2.0).abs() < 0.1,
        format!("RK2 convergence slope {rk2:.3}"),
    );

    let mut mismatches = 0;
    let mut cases = 0;
    for dim in 1..=6 {
        for degree in 0..=5 {
            for lags in 0..=2 {
                for bias in [true, false] {
                    let (a, b, c) = feature_counts(dim, &sweep_spec(dim, degree, lags, bias));
                    cases += 1;
                    mismatches += usize::from(a != c || b != c);
                }
            }
        }
    }
    rep.check(
        mismatches == 0,
        format!("feature counts: {mismatches} mismatches in {cases} cases"),
    );

    let worst = (0..20)
        .map(|s| fit_path_disagreement(s, 2000))
        .fold(0.0, f64::max);
    rep.check(
        worst < 1e-10,
        format!("preconditioned vs plain relative disagreement {worst:.2e} < 1e-10"),
    );

    let eps: Vec<f64> = (1..=40).map(|i| 0.05 * i as f64).collect();
    let monotone = (0..50).all(|s| {
        let (t, p, c) = diverging_pair(s, 400);
        vpt_monotone(&t, &p, &c, &eps)
    });
    rep.check(monotone, "VPT nondecreasing in epsilon over 50 pairs");

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut rt, mut chain) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mut draw = |lo: f64, hi: f64| {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let (u, c, k) = (draw(-40.0, 40.0), draw(-30.0, 30.0), draw(2.0, 12.0));
        let (a, b) = normalization_errors(u, c, k);
        rt = rt.max(a);
        chain = chain.max(b);
    }
    rep.check(
        rt < 1e-12 && chain < 1e-12,
        format!("normalization round trip {rt:.1e}, chain rule {chain:.1e} < 1e-12"),
    );
    rep
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, &str, Report)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Report| {
        let t = Instant::now();
        let rep = f();
        let status = if rep.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status} {name} ({:.1} s)",
            t.elapsed().as_secs_f64()
        );
        for line in &rep.lines {
            println!("    {line}");
        }
        results.push((id, name, rep));
    };

    run(1, "derived readout oracle", &mut derived_readout_oracle);
    run(2, "scheme recovery by fitting", &mut scheme_recovery);

    let t = Instant::now();
    let bias = run_bias_ablation(&ExperimentConfig::defaults(Experiment::Bias)).unwrap();
    let bias_time = t.elapsed();
    run(3, "prediction skill", &mut || {
        prediction_skill(&bias, bias_time)
    });
    run(4, "bias ablation", &mut || bias_ablation(&bias));

    let grid = run_grid_search(&ExperimentConfig::defaults(Experiment::Grid)).unwrap();
    run(5, "cross-validation collapse", &mut || {
        cross_validation(&grid)
    });
    run(6, "scheme-specific hyperparameters", &mut || {
        scheme_hyperparameters(&grid)
    });
    run(7, "noise sensitivity", &mut noise_sensitivity);
    run(8, "skip prediction", &mut skip_prediction);
    run(9, "special-function features", &mut colpitts);
    run(10, "property suites", &mut property_suites);

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.2.pass)
        .map(|r| format!("{} ({})", r.0, r.1))
        .collect();
    println!(
        "{}/{} criteria passed in {:.1} s",
        results.len() - failed.len(),
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
