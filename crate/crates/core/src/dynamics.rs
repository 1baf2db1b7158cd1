//! Flow rates of the studied systems and the affine normalization used for
//! the normalized Lorenz 63 variant.

use serde::{Deserialize, Serialize};

use crate::error::{NvarError, Result};

/// An autonomous vector field `du/dt = f(u)`.
pub trait Flow {
    fn dimension(&self) -> usize;
    /// Writes `f(u)` into `out`; both slices have length `dimension()`.
    fn rhs_into(&self, u: &[f64], out: &mut [f64]);
}

/// A parameterized dynamical system `du/dt = f(u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    L63 {
        sigma: f64,
        rho: f64,
        beta: f64,
    },
    L96 {
        n: usize,
        forcing: f64,
    },
    Colpitts {
        alpha: f64,
        gamma: f64,
        q: f64,
        eta: f64,
    },
    /// Lorenz 63 in the variables `u' = (u - center) / scale`.
    NormalizedL63 {
        sigma: f64,
        rho: f64,
        beta: f64,
        centers: [f64; 3],
        scales: [f64; 3],
    },
}

impl SystemSpec {
    pub fn lorenz63() -> Self {
        SystemSpec::L63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn lorenz96(n: usize) -> Self {
        SystemSpec::L96 { n, forcing: 8.0 }
    }

    pub fn colpitts() -> Self {
        SystemSpec::Colpitts {
            alpha: 5.0,
            gamma: 0.08,
            q: 0.7,
            eta: 6.3,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            SystemSpec::L96 { n, .. } => *n,
            _ => 3,
        }
    }

    /// Short lowercase label used in file names and tables.
    pub fn label(&self) -> String {
        match self {
            SystemSpec::L63 { .. } => "l63".into(),
            SystemSpec::L96 { n, .. } => format!("l96-{n}d"),
            SystemSpec::Colpitts { .. } => "colpitts".into(),
            SystemSpec::NormalizedL63 { .. } => "l63-norm".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match self {
            SystemSpec::L63 { sigma, rho, beta } => {
                if !finite(&[*sigma, *rho, *beta]) {
                    return Err(NvarError::InvalidParameter(
                        "non-finite L63 parameter".into(),
                    ));
                }
            }
            SystemSpec::L96 { n, forcing } => {
                if *n < 4 {
                    return Err(NvarError::InvalidParameter(format!(
                        "L96 needs N >= 4, got {n}"
                    )));
                }
                if !forcing.is_finite() {
                    return Err(NvarError::InvalidParameter("non-finite L96 forcing".into()));
                }
            }
            SystemSpec::Colpitts {
                alpha,
                gamma,
                q,
                eta,
            } => {
                if !finite(&[*alpha, *gamma, *q, *eta]) {
                    return Err(NvarError::InvalidParameter(
                        "non-finite Colpitts parameter".into(),
                    ));
                }
            }
            SystemSpec::NormalizedL63 {
                sigma,
                rho,
                beta,
                centers,
                scales,
            } => {
                if !finite(&[*sigma, *rho, *beta]) || !finite(centers) || !finite(scales) {
                    return Err(NvarError::InvalidParameter(
                        "non-finite normalized L63 parameter".into(),
                    ));
                }
                check_scales(scales)?;
            }
        }
        Ok(())
    }

    /// Evaluates `du/dt` at `state`.
    pub fn rhs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let d = self.dimension();
        if state.len() != d {
            return Err(NvarError::DimensionMismatch {
                expected: d,
                got: state.len(),
            });
        }
        let mut out = vec![0.0; d];
        self.rhs_into(state, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`rhs`](Self::rhs) writing into `out`.
    /// Both slices must have length `dimension()`.
    pub fn rhs_into(&self, u: &[f64], out: &mut [f64]) {
        Flow::rhs_into(self, u, out)
    }

    /// Standard starting point that lands on the attractor after spinup.
    pub fn default_initial_state(&self) -> Vec<f64> {
        match self {
            SystemSpec::L63 { .. } => vec![1.0, 1.0, 1.0],
            SystemSpec::L96 { n, forcing } => {
                let mut x = vec![*forcing; *n];
                x[0] += 0.01;
                x
            }
            SystemSpec::Colpitts { .. } => vec![0.1, 0.1, 0.1],
            SystemSpec::NormalizedL63 {
                centers, scales, ..
            } => transform(&[1.0, 1.0, 1.0], centers, scales).expect("validated scales"),
        }
    }
}

impl Flow for SystemSpec {
    fn dimension(&self) -> usize {
        SystemSpec::dimension(self)
    }

    fn rhs_into(&self, u: &[f64], out: &mut [f64]) {
        match *self {
            SystemSpec::L63 { sigma, rho, beta } => lorenz63_rhs(sigma, rho, beta, u, out),
            SystemSpec::L96 { n, forcing } => {
                for i in 0..n {
                    let ip1 = u[(i + 1) % n];
                    let im1 = u[(i + n - 1) % n];
                    let im2 = u[(i + n - 2) % n];
                    out[i] = (ip1 - im2) * im1 - u[i] + forcing;
                }
            }
            SystemSpec::Colpitts {
                alpha,
                gamma,
                q,
                eta,
            } => {
                out[0] = alpha * u[1];
                out[1] = -gamma * (u[0] + u[2]) - q * u[1];
                out[2] = eta * (u[1] + 1.0 - (-u[0]).exp());
            }
            SystemSpec::NormalizedL63 {
                sigma,
                rho,
                beta,
                centers,
                scales,
            } => {
                let raw = [
                    centers[0] + scales[0] * u[0],
                    centers[1] + scales[1] * u[1],
                    centers[2] + scales[2] * u[2],
                ];
                lorenz63_rhs(sigma, rho, beta, &raw, out);
                for (o, k) in out.iter_mut().zip(scales) {
                    *o /= k;
                }
            }
        }
    }
}

fn lorenz63_rhs(sigma: f64, rho: f64, beta: f64, u: &[f64], out: &mut [f64]) {
    let (x, y, z) = (u[0], u[1], u[2]);
    out[0] = sigma * (y - x);
    out[1] = rho * x - y - x * z;
    out[2] = x * y - beta * z;
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if let Some(i) = scales.iter().position(|k| *k == 0.0 || !k.is_finite()) {
        return Err(NvarError::InvalidParameter(format!(
            "scale {i} must be a nonzero finite number"
        )));
    }
    Ok(())
}

/// Builds the normalized Lorenz 63 system from a plain L63 spec.
pub fn make_normalized(
    system: &SystemSpec,
    centers: [f64; 3],
    scales: [f64; 3],
) -> Result<SystemSpec> {
    let SystemSpec::L63 { sigma, rho, beta } = *system else {
        return Err(NvarError::InvalidParameter(
            "normalization is defined for L63 only".into(),
        ));
    };
    let spec = SystemSpec::NormalizedL63 {
        sigma,
        rho,
        beta,
        centers,
        scales,
    };
    spec.validate()?;
    Ok(spec)
}

/// `u' = (u - center) / scale`.
pub fn transform(state: &[f64], centers: &[f64], scales: &[f64]) -> Result<Vec<f64>> {
    check_affine(state, centers, scales)?;
    Ok(state
        .iter()
        .zip(centers)
        .zip(scales)
        .map(|((u, c), k)| (u - c) / k)
        .collect())
}

/// `u = center + scale * u'`.
pub fn inverse_transform(state: &[f64], centers: &[f64], scales: &[f64]) -> Result<Vec<f64>> {
    check_affine(state, centers, scales)?;
    Ok(state
        .iter()
        .zip(centers)
        .zip(scales)
        .map(|((u, c), k)| c + k * u)
        .collect())
}

fn check_affine(state: &[f64], centers: &[f64], scales: &[f64]) -> Result<()> {
    for len in [centers.len(), scales.len()] {
        if len != state.len() {
            return Err(NvarError::DimensionMismatch {
                expected: state.len(),
                got: len,
            });
        }
    }
    check_scales(scales)
}
