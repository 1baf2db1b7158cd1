use rayon::prelude::*;

use crate::emulate::Emulator;
use crate::error::{NvarError, Result};
use crate::integrate::Trajectory;
use crate::metrics::{check_alignment, Climatology, Vpt, VptDistribution, VptTracker};
use crate::readout::Readout;

/// Rolls the readout out from the start of `truth` and returns its VPT.
/// Stops as soon as the threshold is crossed; the result equals running
/// a full rollout followed by [`crate::metrics::vpt`].
pub fn vpt_of_rollout(
    readout: &Readout,
    truth: &Trajectory,
    clim: &Climatology,
    epsilon: f64,
    magnitude_bound: f64,
) -> Result<Vpt> {
    if truth.dim() != readout.dim() {
        return Err(NvarError::DimensionMismatch {
            expected: readout.dim(),
            got: truth.dim(),
        });
    }
    check_alignment(truth, truth)?;
    if !(epsilon > 0.0) {
        return Err(NvarError::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let wl = readout.index.window_len();
    if truth.len() < wl {
        return Err(NvarError::TooShort {
            needed: wl,
            got: truth.len(),
        });
    }
    if let Some(i) = clim.stds.iter().position(|s| !(*s > 0.0)) {
        return Err(NvarError::ZeroStd(i));
    }
    let mut tracker = VptTracker::new(clim, epsilon, truth.dt());
    for k in 0..wl {
        if tracker.push(truth.column(k), truth.column(k)) {
            return Ok(tracker.finish(truth.len()));
        }
    }
    let mut em = Emulator::new(readout, truth.columns_flat(0, wl), magnitude_bound, 0);
    for k in wl..truth.len() {
        match em.advance() {
            Some(pred) => {
                if tracker.push(truth.column(k), pred) {
                    break;
                }
            }
            None => {
                tracker.truncate();
                break;
            }
        }
    }
    Ok(tracker.finish(truth.len()))
}

/// VPT over every test segment.
pub fn evaluate_readout(
    readout: &Readout,
    segments: &[Trajectory],
    clim: &Climatology,
    epsilon: f64,
    magnitude_bound: f64,
) -> Result<VptDistribution> {
    let samples = segments
        .par_iter()
        .map(|seg| vpt_of_rollout(readout, seg, clim, epsilon, magnitude_bound))
        .collect::<Result<Vec<_>>>()?;
    let test_length = segments.first().map(|s| s.duration()).unwrap_or(0.0);
    Ok(VptDistribution::new(samples, test_length))
}
