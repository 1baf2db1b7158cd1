//! Explicit time steppers and trajectory generation.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Flow, SystemSpec};
use crate::error::{NvarError, Result};

/// Spinup discarded before any stored data.
pub const DEFAULT_SPINUP_MTU: f64 = 10.0;

/// Standard deviation of the seeded perturbation applied to the default
/// initial state when sampling test segments.
pub const TEST_START_PERTURBATION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Ab2,
    Rk2,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Euler, Scheme::Ab2, Scheme::Rk2];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Euler => "euler",
            Scheme::Ab2 => "ab2",
            Scheme::Rk2 => "rk2",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = NvarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Scheme::Euler),
            "ab2" => Ok(Scheme::Ab2),
            "rk2" => Ok(Scheme::Rk2),
            other => Err(NvarError::Parse(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: SystemSpec,
    pub scheme: Scheme,
    /// Base integration step in MTU.
    pub h: f64,
    pub skip: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub spinup_discarded: f64,
    /// Model time of the first stored column.
    #[serde(default)]
    pub t0: f64,
}

/// States stored as the columns of a `D x (M+1)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub values: DMatrix<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of stored columns.
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// Time between stored columns.
    pub fn dt(&self) -> f64 {
        self.meta.h * (self.meta.skip + 1) as f64
    }

    /// Covered model time, `(len - 1) * dt`.
    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.values.as_slice()[k * d..(k + 1) * d]
    }

    /// Columns `start..end` as one contiguous oldest-first slice.
    pub fn columns_flat(&self, start: usize, end: usize) -> &[f64] {
        let d = self.dim();
        &self.values.as_slice()[start * d..end * d]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.meta.t0 + k as f64 * self.dt()
    }

    /// Copy of columns `start..end`, with `t0` shifted accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        let d = self.dim();
        let values = DMatrix::from_column_slice(d, end - start, self.columns_flat(start, end));
        let mut meta = self.meta.clone();
        meta.t0 = self.time(start);
        Trajectory { values, meta }
    }
}

/// Advances one step. Returns `(next_state, f(state))`; the second value is
/// what AB2 needs as `prev_rhs` on the following step.
pub fn step<F: Flow + ?Sized>(
    system: &F,
    scheme: Scheme,
    state: &[f64],
    prev_rhs: Option<&[f64]>,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = system.dimension();
    if state.len() != d {
        return Err(NvarError::DimensionMismatch {
            expected: d,
            got: state.len(),
        });
    }
    if let Some(p) = prev_rhs {
        if p.len() != d {
            return Err(NvarError::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
    }
    check_step_size(h)?;
    let mut stepper = Stepper::new(system, scheme, h);
    if let Some(p) = prev_rhs {
        stepper.prev.copy_from_slice(p);
        stepper.have_prev = true;
    }
    let mut next = vec![0.0; d];
    stepper.advance(state, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(NvarError::IntegrationBlowup { step: 0 });
    }
    Ok((next, stepper.prev.clone()))
}

fn check_step_size(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NvarError::InvalidParameter(format!(
            "step size must be positive, got {h}"
        )));
    }
    Ok(())
}

/// Reusable stepper carrying the AB2 history and scratch buffers.
struct Stepper<'a, F: Flow + ?Sized> {
    system: &'a F,
    scheme: Scheme,
    h: f64,
    f: Vec<f64>,
    prev: Vec<f64>,
    have_prev: bool,
    mid: Vec<f64>,
}

impl<'a, F: Flow + ?Sized> Stepper<'a, F> {
    fn new(system: &'a F, scheme: Scheme, h: f64) -> Self {
        let d = system.dimension();
        Stepper {
            system,
            scheme,
            h,
            f: vec![0.0; d],
            prev: vec![0.0; d],
            have_prev: false,
            mid: vec![0.0; d],
        }
    }

    fn advance(&mut self, u: &[f64], next: &mut [f64]) {
        let h = self.h;
        self.system.rhs_into(u, &mut self.f);
        match self.scheme {
            Scheme::Euler => euler(u, &self.f, h, next),
            Scheme::Ab2 if !self.have_prev => euler(u, &self.f, h, next),
            Scheme::Ab2 => {
                for i in 0..u.len() {
                    next[i] = u[i] + h * (1.5 * self.f[i] - 0.5 * self.prev[i]);
                }
            }
            Scheme::Rk2 => {
                for ((m, &x), &f) in self.mid.iter_mut().zip(u).zip(&self.f) {
                    *m = x + 0.5 * h * f;
                }
                // `next` doubles as the midpoint rate buffer.
                self.system.rhs_into(&self.mid, next);
                for i in 0..u.len() {
                    next[i] = u[i] + h * next[i];
                }
            }
        }
        std::mem::swap(&mut self.prev, &mut self.f);
        self.have_prev = true;
    }
}

fn euler(u: &[f64], f: &[f64], h: f64, next: &mut [f64]) {
    for i in 0..u.len() {
        next[i] = u[i] + h * f[i];
    }
}

/// Integrates `n_steps` from `x0` and returns the endpoint.
pub fn integrate_steps<F: Flow + ?Sized>(
    flow: &F,
    scheme: Scheme,
    x0: &[f64],
    h: f64,
    n_steps: usize,
) -> Result<Vec<f64>> {
    check_step_size(h)?;
    if x0.len() != flow.dimension() {
        return Err(NvarError::DimensionMismatch {
            expected: flow.dimension(),
            got: x0.len(),
        });
    }
    let mut stepper = Stepper::new(flow, scheme, h);
    let mut state = x0.to_vec();
    let mut next = vec![0.0; x0.len()];
    for k in 0..n_steps {
        stepper.advance(&state, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NvarError::IntegrationBlowup { step: k });
        }
        std::mem::swap(&mut state, &mut next);
    }
    Ok(state)
}

fn steps_for(mtu: f64, h: f64) -> usize {
    (mtu / h).round() as usize
}

/// Integrates `spinup_mtu` (discarded) and then `length_mtu`, storing every
/// step. The AB2 history carries across the spinup boundary.
pub fn generate_trajectory(
    system: &SystemSpec,
    scheme: Scheme,
    x0: &[f64],
    h: f64,
    length_mtu: f64,
    spinup_mtu: f64,
) -> Result<Trajectory> {
    if !(length_mtu > 0.0) {
        return Err(NvarError::InvalidParameter(format!(
            "trajectory length must be positive, got {length_mtu}"
        )));
    }
    generate_steps(system, scheme, x0, h, steps_for(length_mtu, h), spinup_mtu)
}

fn generate_steps(
    system: &SystemSpec,
    scheme: Scheme,
    x0: &[f64],
    h: f64,
    n_steps: usize,
    spinup_mtu: f64,
) -> Result<Trajectory> {
    system.validate()?;
    check_step_size(h)?;
    if !(spinup_mtu >= 0.0) {
        return Err(NvarError::InvalidParameter(format!(
            "spinup must be nonnegative, got {spinup_mtu}"
        )));
    }
    let d = system.dimension();
    if x0.len() != d {
        return Err(NvarError::DimensionMismatch {
            expected: d,
            got: x0.len(),
        });
    }
    let spinup_steps = steps_for(spinup_mtu, h);
    let mut stepper = Stepper::new(system, scheme, h);
    let mut state = x0.to_vec();
    let mut next = vec![0.0; d];
    for k in 0..spinup_steps {
        stepper.advance(&state, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NvarError::IntegrationBlowup { step: k });
        }
        std::mem::swap(&mut state, &mut next);
    }
    let mut data = Vec::with_capacity((n_steps + 1) * d);
    data.extend_from_slice(&state);
    for k in 0..n_steps {
        stepper.advance(&state, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NvarError::IntegrationBlowup {
                step: spinup_steps + k,
            });
        }
        data.extend_from_slice(&next);
        std::mem::swap(&mut state, &mut next);
    }
    Ok(Trajectory {
        values: DMatrix::from_vec(d, n_steps + 1, data),
        meta: TrajectoryMeta {
            system: system.clone(),
            scheme,
            h,
            skip: 0,
            noise_sigma: 0.0,
            seed: 0,
            spinup_discarded: spinup_steps as f64 * h,
            t0: 0.0,
        },
    })
}

/// Keeps every `(skip + 1)`-th column starting at column 0. Strides compose
/// when the input is already subsampled.
pub fn subsample(traj: &Trajectory, skip: usize) -> Trajectory {
    if skip == 0 {
        return traj.clone();
    }
    let stride = skip + 1;
    let d = traj.dim();
    let cols: Vec<usize> = (0..traj.len()).step_by(stride).collect();
    let mut data = Vec::with_capacity(cols.len() * d);
    for &k in &cols {
        data.extend_from_slice(traj.column(k));
    }
    let mut meta = traj.meta.clone();
    meta.skip = (traj.meta.skip + 1) * stride - 1;
    Trajectory {
        values: DMatrix::from_vec(d, cols.len(), data),
        meta,
    }
}

/// Adds i.i.d. `N(0, magnitude^2)` noise to every entry.
pub fn add_noise(traj: &Trajectory, magnitude: f64, seed: u64) -> Result<Trajectory> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(NvarError::InvalidParameter(format!(
            "noise magnitude must be nonnegative, got {magnitude}"
        )));
    }
    let mut out = traj.clone();
    out.meta.noise_sigma = magnitude;
    out.meta.seed = seed;
    if magnitude == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, magnitude).expect("validated magnitude");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.values.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Seeded perturbation of the system's default starting point.
pub fn perturbed_initial_state(system: &SystemSpec, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    system
        .default_initial_state()
        .into_iter()
        .map(|v| v + scale * normal.sample(&mut rng))
        .collect()
}

/// Generates one long run after a default spinup and cuts it into `count`
/// consecutive, non-overlapping segments of `segment_mtu` each.
pub fn sample_test_segments(
    system: &SystemSpec,
    scheme: Scheme,
    h: f64,
    count: usize,
    segment_mtu: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(NvarError::InvalidParameter(
            "segment count must be >= 1".into(),
        ));
    }
    if !(segment_mtu > 0.0) {
        return Err(NvarError::InvalidParameter(format!(
            "segment length must be positive, got {segment_mtu}"
        )));
    }
    let seg_cols = steps_for(segment_mtu, h) + 1;
    let x0 = perturbed_initial_state(system, seed, TEST_START_PERTURBATION);
    let mut long = generate_steps(
        system,
        scheme,
        &x0,
        h,
        count * seg_cols - 1,
        DEFAULT_SPINUP_MTU,
    )?;
    long.meta.seed = seed;
    Ok((0..count)
        .map(|i| long.slice(i * seg_cols, (i + 1) * seg_cols))
        .collect())
}
