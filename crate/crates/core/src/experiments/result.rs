use serde::{Deserialize, Serialize};

use crate::integrate::{Scheme, Trajectory};
use crate::metrics::VptDistribution;
use crate::readout::FitFailure;

/// How the cell's readout was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fitted,
    /// Analytic Euler readout; no training.
    Derived,
}

/// Coordinates of one experiment cell. Fields that a study does not sweep
/// keep their neutral value (skip 0, noise 0, divisor 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub system: String,
    pub variant: Variant,
    pub features: String,
    pub degree: usize,
    pub lags: usize,
    pub bias: bool,
    pub feature_count: usize,
    pub skip: usize,
    pub scheme_train: Scheme,
    pub scheme_test: Scheme,
    pub noise: f64,
    pub divisor: usize,
    pub preconditioned: bool,
    /// Training columns after subsampling; zero for derived readouts.
    pub train_columns: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Evaluated {
        distribution: VptDistribution,
        /// Numerical rank of the Gram matrix, when fitted.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rank: Option<usize>,
    },
    FitFailure {
        failure: FitFailure,
    },
}

impl CellOutcome {
    pub fn distribution(&self) -> Option<&VptDistribution> {
        match self {
            CellOutcome::Evaluated { distribution, .. } => Some(distribution),
            CellOutcome::FitFailure { .. } => None,
        }
    }

    pub fn median(&self) -> Option<f64> {
        self.distribution().map(|d| d.median)
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, CellOutcome::FitFailure { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub outcome: CellOutcome,
    /// Best cell of its group: highest median VPT, fewest features on ties.
    #[serde(default)]
    pub best: bool,
}

/// A free-running rollout kept for plotting an attractor.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorDump {
    pub name: String,
    pub truth: Trajectory,
    pub prediction: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub experiment: String,
    pub config_hash: String,
    pub cells: Vec<Cell>,
    #[serde(skip)]
    pub attractors: Vec<AttractorDump>,
}

impl GridResult {
    pub fn find(&self, pred: impl Fn(&CellKey) -> bool) -> Option<&Cell> {
        self.cells.iter().find(|c| pred(&c.key))
    }

    pub fn filter<'a>(
        &'a self,
        pred: impl Fn(&CellKey) -> bool + 'a,
    ) -> impl Iterator<Item = &'a Cell> + 'a {
        self.cells.iter().filter(move |c| pred(&c.key))
    }

    pub fn best(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.best)
    }
}

/// Marks the best cell within each group of cells sharing `group(key)`.
pub(crate) fn mark_best<G: PartialEq>(cells: &mut [Cell], group: impl Fn(&CellKey) -> G) {
    let mut groups: Vec<G> = Vec::new();
    for c in cells.iter() {
        let g = group(&c.key);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    for g in groups {
        let mut best: Option<usize> = None;
        for (i, c) in cells.iter().enumerate() {
            if group(&c.key) != g {
                continue;
            }
            let Some(m) = c.outcome.median() else {
                continue;
            };
            let better = match best {
                None => true,
                Some(b) => {
                    let bm = cells[b].outcome.median().expect("best has a median");
                    m > bm || (m == bm && c.key.feature_count < cells[b].key.feature_count)
                }
            };
            if better {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            cells[b].best = true;
        }
    }
}
