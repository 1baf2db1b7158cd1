use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{make_normalized, SystemSpec};
use crate::emulate::DEFAULT_MAGNITUDE_BOUND;
use crate::error::{NvarError, Result};
use crate::features::{FeatureSpec, SpecialFunction};
use crate::integrate::{generate_trajectory, Scheme, DEFAULT_SPINUP_MTU};
use crate::metrics::{climatology, DEFAULT_EPSILON};
use crate::readout::Solver;

/// The six studies of the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Grid,
    Crossval,
    Bias,
    Noise,
    Skip,
    Colpitts,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Grid,
        Experiment::Crossval,
        Experiment::Bias,
        Experiment::Noise,
        Experiment::Skip,
        Experiment::Colpitts,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::Grid => "grid",
            Experiment::Crossval => "crossval",
            Experiment::Bias => "bias",
            Experiment::Noise => "noise",
            Experiment::Skip => "skip",
            Experiment::Colpitts => "colpitts",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Experiment {
    type Err = NvarError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| NvarError::Parse(format!("unknown experiment `{s}`")))
    }
}

/// Degree/lag grid. Cells whose feature count exceeds `max_features` are not
/// part of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub degrees: Vec<usize>,
    pub lags: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_features: Option<usize>,
}

/// Which monomials accompany the bias and linear terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    /// All monomials up to the cell degree.
    Polynomial,
    /// Linear terms plus the configured special functions, replacing the
    /// nonlinear monomials.
    Special,
}

impl FeatureSet {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Polynomial => "poly",
            FeatureSet::Special => "special",
        }
    }
}

/// Explicit model choice for one training scheme, used by cross-validation
/// instead of running the grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChosenCell {
    pub scheme: Scheme,
    pub degree: usize,
    pub lags: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub systems: Vec<SystemSpec>,
    pub schemes: Vec<Scheme>,
    pub h: f64,
    /// Training length in MTU. The skip study ignores it and uses one MTU per
    /// feature; the noise sweep divides it by each divisor.
    pub train_mtu: f64,
    pub spinup_mtu: f64,
    pub test_count: usize,
    pub test_mtu: f64,
    pub grid: FeatureGrid,
    /// Bias settings to sweep, e.g. `[true, false]`.
    pub bias: Vec<bool>,
    pub feature_sets: Vec<FeatureSet>,
    #[serde(default)]
    pub special_functions: Vec<SpecialFunction>,
    pub skips: Vec<usize>,
    pub noise_levels: Vec<f64>,
    pub divisors: Vec<usize>,
    pub alpha: f64,
    pub preconditioning: Vec<bool>,
    #[serde(default)]
    pub solver: Solver,
    pub epsilon: f64,
    pub magnitude_bound: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Vec<ChosenCell>>,
    /// Length of the free-running attractor dumps; zero disables them.
    #[serde(default)]
    pub attractor_mtu: f64,
}

impl ExperimentConfig {
    /// Desk-scale defaults for one study.
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            systems: vec![SystemSpec::lorenz63()],
            schemes: vec![Scheme::Euler],
            h: 0.01,
            train_mtu: 400.0,
            spinup_mtu: DEFAULT_SPINUP_MTU,
            test_count: 100,
            test_mtu: 25.0,
            grid: FeatureGrid {
                degrees: vec![2],
                lags: vec![0],
                max_features: None,
            },
            bias: vec![true],
            feature_sets: vec![FeatureSet::Polynomial],
            special_functions: Vec::new(),
            skips: vec![0],
            noise_levels: vec![0.0],
            divisors: vec![1],
            alpha: 0.0,
            preconditioning: vec![true],
            solver: Solver::Cholesky,
            epsilon: DEFAULT_EPSILON,
            magnitude_bound: DEFAULT_MAGNITUDE_BOUND,
            seed: 20220101,
            chosen: None,
            attractor_mtu: 0.0,
        };
        match experiment {
            Experiment::Grid | Experiment::Crossval => ExperimentConfig {
                systems: vec![SystemSpec::lorenz96(6)],
                schemes: Scheme::ALL.to_vec(),
                grid: FeatureGrid {
                    degrees: vec![1, 2, 3, 4],
                    lags: vec![0, 1],
                    max_features: None,
                },
                ..base
            },
            Experiment::Bias => ExperimentConfig {
                systems: vec![
                    SystemSpec::lorenz63(),
                    SystemSpec::lorenz96(6),
                    default_normalized_l63(),
                ],
                bias: vec![true, false],
                ..base
            },
            Experiment::Noise => ExperimentConfig {
                train_mtu: 4000.0,
                noise_levels: vec![0.0, 1e-6, 1e-4, 1e-3, 1e-2, 0.1],
                divisors: vec![1, 4, 16, 64, 256],
                ..base
            },
            Experiment::Skip => ExperimentConfig {
                grid: FeatureGrid {
                    degrees: (1..=10).collect(),
                    lags: vec![0, 1],
                    max_features: Some(500),
                },
                skips: vec![0, 1, 2, 4, 8],
                preconditioning: vec![true, false],
                ..base
            },
            Experiment::Colpitts => ExperimentConfig {
                systems: vec![SystemSpec::colpitts()],
                schemes: vec![Scheme::Euler, Scheme::Rk2],
                train_mtu: 1000.0,
                test_mtu: 300.0,
                feature_sets: vec![FeatureSet::Polynomial, FeatureSet::Special],
                special_functions: vec![SpecialFunction::exp(-1.0, vec![0, 1, 2])],
                preconditioning: vec![true, false],
                attractor_mtu: 500.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NvarError::InvalidParameter(msg.to_string()));
        if self.systems.is_empty() {
            return bad("systems must be non-empty");
        }
        if self.schemes.is_empty() {
            return bad("schemes must be non-empty");
        }
        if self.grid.degrees.is_empty() || self.grid.lags.is_empty() {
            return bad("degree and lag grids must be non-empty");
        }
        if self.bias.is_empty() || self.feature_sets.is_empty() || self.preconditioning.is_empty() {
            return bad("bias, feature_sets and preconditioning must be non-empty");
        }
        if self.skips.is_empty() || self.noise_levels.is_empty() || self.divisors.is_empty() {
            return bad("skips, noise_levels and divisors must be non-empty");
        }
        if self.divisors.contains(&0) {
            return bad("divisors must be >= 1");
        }
        if self
            .noise_levels
            .iter()
            .any(|n| !(*n >= 0.0 && n.is_finite()))
        {
            return bad("noise levels must be finite and nonnegative");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("h must be positive");
        }
        if !(self.train_mtu > 0.0) || !(self.test_mtu > 0.0) || !(self.spinup_mtu >= 0.0) {
            return bad("training and test lengths must be positive");
        }
        if self.test_count == 0 {
            return bad("test_count must be >= 1");
        }
        if !(self.epsilon > 0.0) || !(self.magnitude_bound > 0.0) {
            return bad("epsilon and magnitude_bound must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be nonnegative");
        }
        if self.feature_sets.contains(&FeatureSet::Special) && self.special_functions.is_empty() {
            return bad("the special feature set needs special_functions");
        }
        for s in &self.systems {
            s.validate()?;
        }
        Ok(())
    }

    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..6])
    }

    /// Feature specs of the grid for `set`, in grid order, filtered by
    /// `max_features` for dimension `dim`.
    pub fn feature_specs(&self, set: FeatureSet, bias: bool, dim: usize) -> Vec<FeatureSpec> {
        let mut out = Vec::new();
        for &lags in &self.grid.lags {
            for &degree in &self.grid.degrees {
                let mut spec = FeatureSpec::polynomial(degree, lags);
                spec.include_bias = bias;
                if set == FeatureSet::Special {
                    spec.special_functions = self.special_functions.clone();
                    spec.replace_polynomials = true;
                }
                let count = crate::features::feature_count(&spec, dim);
                if self.grid.max_features.is_none_or(|m| count <= m) {
                    out.push(spec);
                }
            }
        }
        out
    }
}

/// L63 in variables centered and scaled by the climatology of a 400 MTU
/// Euler run from the default start.
pub fn default_normalized_l63() -> SystemSpec {
    let l63 = SystemSpec::lorenz63();
    let traj = generate_trajectory(
        &l63,
        Scheme::Euler,
        &l63.default_initial_state(),
        0.01,
        400.0,
        DEFAULT_SPINUP_MTU,
    )
    .expect("reference L63 run");
    let clim = climatology(&traj).expect("reference climatology");
    let arr = |v: &[f64]| [v[0], v[1], v[2]];
    make_normalized(&l63, arr(&clim.means), arr(&clim.stds)).expect("positive scales")
}

/// Deterministic sub-seed for one consumer of the top-level seed.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
