//! Closed-loop prediction: the readout iterated as a discrete map.

use nalgebra::DMatrix;

use crate::error::{NvarError, Result};
use crate::integrate::{Trajectory, TrajectoryMeta};
use crate::readout::Readout;

/// Rollouts stop once any state entry exceeds this magnitude.
pub const DEFAULT_MAGNITUDE_BOUND: f64 = 1e6;

/// The last `lags + 1` states, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct LagWindow {
    dim: usize,
    data: Vec<f64>,
}

impl LagWindow {
    pub fn new(states: &[Vec<f64>]) -> Result<Self> {
        let dim = states.first().map(Vec::len).unwrap_or(0);
        if states.is_empty() || dim == 0 {
            return Err(NvarError::InvalidParameter("empty lag window".into()));
        }
        let mut data = Vec::with_capacity(states.len() * dim);
        for s in states {
            if s.len() != dim {
                return Err(NvarError::DimensionMismatch {
                    expected: dim,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(NvarError::InvalidParameter(
                    "non-finite state in window".into(),
                ));
            }
            data.extend_from_slice(s);
        }
        Ok(LagWindow { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn newest(&self) -> &[f64] {
        &self.data[self.data.len() - self.dim..]
    }

    /// Drops the oldest state and appends `state`.
    pub fn push(&mut self, state: &[f64]) {
        self.data.rotate_left(self.dim);
        let n = self.data.len();
        self.data[n - self.dim..].copy_from_slice(state);
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Rollout result. A diverged rollout is truncated before the first bad
/// state; that is data, not an error.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Index of the step (counted from the first prediction) that produced a
    /// non-finite or out-of-bound state.
    pub diverged_at: Option<usize>,
}

fn check_window(readout: &Readout, window: &LagWindow) -> Result<()> {
    if window.dim != readout.dim() {
        return Err(NvarError::DimensionMismatch {
            expected: readout.dim(),
            got: window.dim,
        });
    }
    if window.len() != readout.index.window_len() {
        return Err(NvarError::DimensionMismatch {
            expected: readout.index.window_len(),
            got: window.len(),
        });
    }
    Ok(())
}

/// `W * features(window)`.
pub fn one_step(readout: &Readout, window: &LagWindow) -> Result<Vec<f64>> {
    check_window(readout, window)?;
    let mut feats = vec![0.0; readout.feature_count()];
    let mut out = vec![0.0; readout.dim()];
    apply(readout, window.as_flat(), &mut feats, &mut out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(NvarError::Diverged { step: 0 });
    }
    Ok(out)
}

fn apply(readout: &Readout, window: &[f64], feats: &mut [f64], out: &mut [f64]) -> Result<()> {
    readout.index.evaluate_into(window, feats)?;
    let w = readout.w.as_slice();
    let d = out.len();
    out.fill(0.0);
    // column-major W: accumulate feature by feature
    for (k, &r) in feats.iter().enumerate() {
        let col = &w[k * d..(k + 1) * d];
        for (o, c) in out.iter_mut().zip(col) {
            *o += c * r;
        }
    }
    Ok(())
}

/// Stepwise rollout state shared by [`rollout`] and early-stopping callers.
pub(crate) struct Emulator<'a> {
    readout: &'a Readout,
    bound: f64,
    data: Vec<f64>,
    feats: Vec<f64>,
    next: Vec<f64>,
    steps: usize,
    pub(crate) diverged: bool,
}

impl<'a> Emulator<'a> {
    pub(crate) fn new(readout: &'a Readout, warmup: &[f64], bound: f64, capacity: usize) -> Self {
        let mut data = Vec::with_capacity(capacity * readout.dim());
        data.extend_from_slice(warmup);
        Emulator {
            readout,
            bound,
            data,
            feats: vec![0.0; readout.feature_count()],
            next: vec![0.0; readout.dim()],
            steps: 0,
            diverged: false,
        }
    }

    /// Advances one step; returns the new state or `None` on divergence.
    pub(crate) fn advance(&mut self) -> Option<&[f64]> {
        if self.diverged {
            return None;
        }
        let d = self.readout.dim();
        let wl = self.readout.index.window_len() * d;
        let n = self.data.len();
        let ok = apply(
            self.readout,
            &self.data[n - wl..],
            &mut self.feats,
            &mut self.next,
        )
        .is_ok()
            && self
                .next
                .iter()
                .all(|v| v.is_finite() && v.abs() <= self.bound);
        if !ok {
            self.diverged = true;
            return None;
        }
        self.data.extend_from_slice(&self.next);
        self.steps += 1;
        Some(&self.data[n..])
    }

    pub(crate) fn steps(&self) -> usize {
        self.steps
    }

    pub(crate) fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Iterates the readout `n_steps` times from `warmup` (oldest first).
/// The returned trajectory starts with the warmup states.
pub fn rollout(
    readout: &Readout,
    warmup: &[Vec<f64>],
    n_steps: usize,
    meta: TrajectoryMeta,
    magnitude_bound: f64,
) -> Result<Rollout> {
    let window = LagWindow::new(warmup)?;
    check_window(readout, &window)?;
    let d = readout.dim();
    let mut em = Emulator::new(
        readout,
        window.as_flat(),
        magnitude_bound,
        warmup.len() + n_steps,
    );
    for _ in 0..n_steps {
        if em.advance().is_none() {
            break;
        }
    }
    let diverged_at = em.diverged.then(|| em.steps());
    let data = em.into_data();
    let cols = data.len() / d;
    Ok(Rollout {
        trajectory: Trajectory {
            values: DMatrix::from_vec(d, cols, data),
            meta,
        },
        diverged_at,
    })
}

/// Rollout seeded from the first `lags + 1` columns of `truth`, running
/// until it spans the same number of columns.
pub fn rollout_against(
    readout: &Readout,
    truth: &Trajectory,
    magnitude_bound: f64,
) -> Result<Rollout> {
    let wl = readout.index.window_len();
    if truth.len() < wl {
        return Err(NvarError::TooShort {
            needed: wl,
            got: truth.len(),
        });
    }
    let warmup: Vec<Vec<f64>> = (0..wl).map(|k| truth.column(k).to_vec()).collect();
    let mut meta = truth.meta.clone();
    meta.noise_sigma = 0.0;
    rollout(readout, &warmup, truth.len() - wl, meta, magnitude_bound)
}
