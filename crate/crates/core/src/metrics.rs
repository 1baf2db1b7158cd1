//! Climatology, normalized RMSE and valid prediction time.

use serde::{Deserialize, Serialize};

use crate::error::{NvarError, Result};
use crate::integrate::Trajectory;

pub const DEFAULT_EPSILON: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    pub means: Vec<f64>,
    /// Population standard deviations.
    pub stds: Vec<f64>,
}

pub fn climatology(traj: &Trajectory) -> Result<Climatology> {
    let n = traj.len();
    if n < 2 {
        return Err(NvarError::TooShort { needed: 2, got: n });
    }
    let d = traj.dim();
    let mut means = vec![0.0; d];
    for k in 0..n {
        for (m, v) in means.iter_mut().zip(traj.column(k)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for k in 0..n {
        for ((s, v), m) in var.iter_mut().zip(traj.column(k)).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    let stds = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(Climatology { means, stds })
}

impl Climatology {
    fn check(&self, dim: usize) -> Result<()> {
        if self.stds.len() != dim {
            return Err(NvarError::DimensionMismatch {
                expected: dim,
                got: self.stds.len(),
            });
        }
        if let Some(i) = self.stds.iter().position(|s| !(*s > 0.0)) {
            return Err(NvarError::ZeroStd(i));
        }
        Ok(())
    }
}

/// `sqrt(mean_i ((truth_i - pred_i) / sigma_i)^2)`.
pub fn normalized_rmse(truth: &[f64], pred: &[f64], clim: &Climatology) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(NvarError::DimensionMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    clim.check(truth.len())?;
    Ok(nrmse_unchecked(truth, pred, &clim.stds))
}

fn nrmse_unchecked(truth: &[f64], pred: &[f64], stds: &[f64]) -> f64 {
    let sum: f64 = truth
        .iter()
        .zip(pred)
        .zip(stds)
        .map(|((t, p), s)| {
            let e = (t - p) / s;
            e * e
        })
        .sum();
    (sum / truth.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vpt {
    /// Model time from the segment start.
    pub vpt: f64,
    /// The threshold was never crossed inside the test window.
    pub censored: bool,
}

/// Incremental first-crossing detector over aligned columns.
pub(crate) struct VptTracker<'a> {
    stds: &'a [f64],
    epsilon: f64,
    dt: f64,
    index: usize,
    crossed: Option<usize>,
}

impl<'a> VptTracker<'a> {
    pub(crate) fn new(clim: &'a Climatology, epsilon: f64, dt: f64) -> Self {
        VptTracker {
            stds: &clim.stds,
            epsilon,
            dt,
            index: 0,
            crossed: None,
        }
    }

    /// Feeds the next column pair; returns true once the threshold is crossed.
    pub(crate) fn push(&mut self, truth: &[f64], pred: &[f64]) -> bool {
        if self.crossed.is_none() {
            if !(nrmse_unchecked(truth, pred, self.stds) <= self.epsilon) {
                self.crossed = Some(self.index);
            }
            self.index += 1;
        }
        self.crossed.is_some()
    }

    /// Marks the current index as crossed (prediction ended early).
    pub(crate) fn truncate(&mut self) {
        if self.crossed.is_none() {
            self.crossed = Some(self.index);
        }
    }

    pub(crate) fn finish(self, truth_len: usize) -> Vpt {
        match self.crossed {
            Some(k) => Vpt {
                vpt: k as f64 * self.dt,
                censored: false,
            },
            None => Vpt {
                vpt: truth_len.saturating_sub(1) as f64 * self.dt,
                censored: true,
            },
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(NvarError::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

pub(crate) fn check_alignment(truth: &Trajectory, pred: &Trajectory) -> Result<()> {
    if truth.dim() != pred.dim() {
        return Err(NvarError::DimensionMismatch {
            expected: truth.dim(),
            got: pred.dim(),
        });
    }
    let (a, b) = (truth.dt(), pred.dt());
    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
        return Err(NvarError::Misaligned(format!("dt {a} vs {b}")));
    }
    if (truth.meta.t0 - pred.meta.t0).abs() > 1e-9 * (1.0 + truth.meta.t0.abs()) {
        return Err(NvarError::Misaligned(format!(
            "start {} vs {}",
            truth.meta.t0, pred.meta.t0
        )));
    }
    Ok(())
}

/// Time of the first column where the normalized RMSE exceeds `epsilon`.
/// A prediction shorter than the truth counts as exceeding where it ends.
pub fn vpt(truth: &Trajectory, pred: &Trajectory, clim: &Climatology, epsilon: f64) -> Result<Vpt> {
    check_epsilon(epsilon)?;
    check_alignment(truth, pred)?;
    clim.check(truth.dim())?;
    let mut tracker = VptTracker::new(clim, epsilon, truth.dt());
    let common = truth.len().min(pred.len());
    for k in 0..common {
        if tracker.push(truth.column(k), pred.column(k)) {
            break;
        }
    }
    if pred.len() < truth.len() {
        tracker.truncate();
    }
    Ok(tracker.finish(truth.len()))
}

/// VPT samples for one experiment cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VptDistribution {
    pub samples: Vec<Vpt>,
    pub test_length: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub censored_count: usize,
}

impl VptDistribution {
    pub fn new(samples: Vec<Vpt>, test_length: f64) -> Self {
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.vpt).collect();
        sorted.sort_by(f64::total_cmp);
        VptDistribution {
            censored_count: samples.iter().filter(|s| s.censored).count(),
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            samples,
            test_length,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Linear-interpolation quantile of sorted values; NaN when empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}
