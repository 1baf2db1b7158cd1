//! Independent checks shared by the property and acceptance suites.

#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nvar::dynamics::{inverse_transform, make_normalized, transform, Flow, SystemSpec};
use nvar::features::{compute_scaler, feature_count, SpecialFunction};
use nvar::integrate::{integrate_steps, Scheme, TrajectoryMeta};
use nvar::metrics::{vpt, Climatology};
use nvar::readout::{fit, FitOptions};
use nvar::{FeatureIndex, FeatureSpec, Trajectory};

/// `x'' = -x` as a first-order system.
pub struct Oscillator;

impl Flow for Oscillator {
    fn dimension(&self) -> usize {
        2
    }
    fn rhs_into(&self, u: &[f64], out: &mut [f64]) {
        out[0] = u[1];
        out[1] = -u[0];
    }
}

pub const CONVERGENCE_STEPS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

/// Least-squares slope of log(error) against log(h) at `t = 1` from `(1, 0)`.
pub fn convergence_slope(scheme: Scheme) -> f64 {
    let pts: Vec<(f64, f64)> = CONVERGENCE_STEPS
        .iter()
        .map(|&h| {
            let n = (1.0 / h).round() as usize;
            let end = integrate_steps(&Oscillator, scheme, &[1.0, 0.0], h, n).unwrap();
            let err = ((end[0] - 1f64.cos()).powi(2) + (end[1] + 1f64.sin()).powi(2)).sqrt();
            (h.ln(), err.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Counts exponent vectors over `nvars` variables with total degree in
/// `1..=degree` by depth-first enumeration.
pub fn brute_force_monomials(nvars: usize, degree: usize) -> usize {
    fn walk(var: usize, nvars: usize, budget: usize, used: usize) -> usize {
        if var == nvars {
            return usize::from(used > 0);
        }
        (0..=budget)
            .map(|e| walk(var + 1, nvars, budget - e, used + e))
            .sum()
    }
    walk(0, nvars, degree, 0)
}

/// The spec used by the feature-count sweep. Degree 0 alone has no
/// features, so it carries an exp feature on every variable.
pub fn sweep_spec(dim: usize, degree: usize, lags: usize, bias: bool) -> FeatureSpec {
    let mut spec = FeatureSpec::polynomial(degree, lags);
    spec.include_bias = bias;
    if degree == 0 {
        spec.special_functions = vec![SpecialFunction::exp(-1.0, (0..dim).collect())];
    }
    spec
}

pub fn brute_force_count(dim: usize, spec: &FeatureSpec) -> usize {
    let nvars = dim * (spec.lags + 1);
    let degree = if spec.replace_polynomials {
        spec.degree.min(1)
    } else {
        spec.degree
    };
    let specials: usize = spec
        .special_functions
        .iter()
        .map(|s| s.applied_to.len())
        .sum();
    usize::from(spec.include_bias)
        + brute_force_monomials(nvars, degree)
        + specials * (spec.lags + 1)
}

/// Returns `(formula, enumerated, brute force)` counts.
pub fn feature_counts(dim: usize, spec: &FeatureSpec) -> (usize, usize, usize) {
    let enumerated = FeatureIndex::enumerate(spec, dim).unwrap().len();
    (
        feature_count(spec, dim),
        enumerated,
        brute_force_count(dim, spec),
    )
}

/// Max entrywise difference between preconditioned and plain fits of a
/// random, well-conditioned linear problem, relative to the largest
/// coefficient.
pub fn fit_path_disagreement(seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 3).unwrap();
    let f = index.len();
    let scales: Vec<f64> = (0..f).map(|_| rng.random_range(0.5..2.0)).collect();
    let r = DMatrix::from_fn(f, samples, |i, _| scales[i] * rng.random_range(-1.0..1.0));
    let w_true = DMatrix::from_fn(3, f, |_, _| rng.random_range(-1.0..1.0));
    let mut y = &w_true * &r;
    y.iter_mut()
        .for_each(|v| *v += 1e-3 * rng.random_range(-1.0..1.0));
    let scaler = compute_scaler(&r);
    let pre = fit(&r, &y, &index, &FitOptions::default(), Some(&scaler)).unwrap();
    let plain = fit(&r, &y, &index, &FitOptions::plain(), None).unwrap();
    (&pre.w - &plain.w).amax() / plain.w.amax()
}

fn meta() -> TrajectoryMeta {
    TrajectoryMeta {
        system: SystemSpec::lorenz63(),
        scheme: Scheme::Euler,
        h: 0.01,
        skip: 0,
        noise_sigma: 0.0,
        seed: 0,
        spinup_discarded: 0.0,
        t0: 0.0,
    }
}

/// A truth/prediction pair whose error grows irregularly.
pub fn diverging_pair(seed: u64, len: usize) -> (Trajectory, Trajectory, Climatology) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = DMatrix::from_fn(3, len, |_, _| rng.random_range(-10.0..10.0));
    let mut pred = truth.clone();
    let mut amp = 1e-6;
    for k in 0..len {
        amp *= rng.random_range(0.8..1.6);
        for i in 0..3 {
            pred[(i, k)] += amp * rng.random_range(-1.0..1.0);
        }
    }
    let clim = Climatology {
        means: vec![0.0; 3],
        stds: vec![8.0, 9.0, 8.5],
    };
    (
        Trajectory {
            values: truth,
            meta: meta(),
        },
        Trajectory {
            values: pred,
            meta: meta(),
        },
        clim,
    )
}

/// True when VPT never decreases along an increasing sequence of thresholds.
pub fn vpt_monotone(
    truth: &Trajectory,
    pred: &Trajectory,
    clim: &Climatology,
    eps: &[f64],
) -> bool {
    let v: Vec<f64> = eps
        .iter()
        .map(|&e| vpt(truth, pred, clim, e).unwrap().vpt)
        .collect();
    v.windows(2).all(|w| w[1] >= w[0])
}

/// Returns `(round trip error, chain rule error)` for one state.
pub fn normalization_errors(u: [f64; 3], centers: [f64; 3], scales: [f64; 3]) -> (f64, f64) {
    let l63 = SystemSpec::lorenz63();
    let norm = make_normalized(&l63, centers, scales).unwrap();
    let back = inverse_transform(
        &transform(&u, &centers, &scales).unwrap(),
        &centers,
        &scales,
    )
    .unwrap();
    let round_trip = u
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // f'(u') = f(c + k u') / k.
    let u_norm = transform(&u, &centers, &scales).unwrap();
    let f = l63.rhs(&u).unwrap();
    let f_norm = norm.rhs(&u_norm).unwrap();
    let chain = (0..3)
        .map(|i| (f_norm[i] - f[i] / scales[i]).abs())
        .fold(0.0, f64::max);
    (round_trip, chain)
}
