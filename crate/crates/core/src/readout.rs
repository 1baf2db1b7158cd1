//! Readout matrices: least-squares fits over normal equations, optionally
//! with diagonal feature preconditioning, and the analytic matrices of the
//! Euler time-stepping form.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::SystemSpec;
use crate::error::{NvarError, Result};
use crate::features::{accumulate_max, FeatureDescriptor, FeatureIndex, Scaler, SpecialKind};
use crate::integrate::{Scheme, Trajectory, TrajectoryMeta};

/// The readout solve did not produce finite coefficients.
#[derive(Clone, Debug, PartialEq, Error, Serialize, Deserialize)]
#[error("readout fit failed: {reason}")]
pub struct FitFailure {
    pub reason: String,
}

impl FitFailure {
    fn new(reason: impl Into<String>) -> Self {
        FitFailure {
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Pivoted Cholesky factorization of the Gram matrix.
    #[default]
    Cholesky,
    /// SVD pseudo-inverse of the Gram matrix. Diagnostics only.
    Svd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub preconditioned: bool,
    #[serde(default)]
    pub solver: Solver,
}

fn default_true() -> bool {
    true
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            alpha: 0.0,
            preconditioned: true,
            solver: Solver::Cholesky,
        }
    }
}

impl FitOptions {
    pub fn plain() -> Self {
        FitOptions {
            preconditioned: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Provenance {
    Fitted {
        alpha: f64,
        preconditioned: bool,
        solver: Solver,
        samples: usize,
        /// Numerical rank of the Gram matrix; features beyond it get zero
        /// coefficients.
        #[serde(default)]
        rank: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        training: Option<TrajectoryMeta>,
    },
    Derived {
        system: SystemSpec,
        scheme: Scheme,
        h: f64,
    },
}

/// `D x F` output matrix together with the features it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReadoutRepr", into = "ReadoutRepr")]
pub struct Readout {
    pub w: DMatrix<f64>,
    pub index: FeatureIndex,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ReadoutRepr {
    w: Vec<Vec<f64>>,
    index: FeatureIndex,
    provenance: Provenance,
}

impl From<Readout> for ReadoutRepr {
    fn from(r: Readout) -> Self {
        let w =
            r.w.row_iter()
                .map(|row| row.iter().copied().collect())
                .collect();
        ReadoutRepr {
            w,
            index: r.index,
            provenance: r.provenance,
        }
    }
}

impl TryFrom<ReadoutRepr> for Readout {
    type Error = NvarError;

    fn try_from(repr: ReadoutRepr) -> Result<Self> {
        let rows = repr.w.len();
        let cols = repr.index.len();
        if rows != repr.index.dim() {
            return Err(NvarError::DimensionMismatch {
                expected: repr.index.dim(),
                got: rows,
            });
        }
        if let Some(bad) = repr.w.iter().find(|r| r.len() != cols) {
            return Err(NvarError::DimensionMismatch {
                expected: cols,
                got: bad.len(),
            });
        }
        let w = DMatrix::from_row_iterator(rows, cols, repr.w.into_iter().flatten());
        Readout::new(w, repr.index, repr.provenance)
    }
}

impl Readout {
    pub fn new(w: DMatrix<f64>, index: FeatureIndex, provenance: Provenance) -> Result<Self> {
        if w.ncols() != index.len() {
            return Err(NvarError::DimensionMismatch {
                expected: index.len(),
                got: w.ncols(),
            });
        }
        if w.nrows() != index.dim() {
            return Err(NvarError::DimensionMismatch {
                expected: index.dim(),
                got: w.nrows(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(FitFailure::new("non-finite readout entry").into());
        }
        Ok(Readout {
            w,
            index,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn feature_count(&self) -> usize {
        self.w.ncols()
    }

    /// Coefficient of the feature `descriptor` in output `row`.
    pub fn coefficient(&self, row: usize, descriptor: &FeatureDescriptor) -> Option<f64> {
        self.index.position(descriptor).map(|k| self.w[(row, k)])
    }
}

/// Accumulated `G = R R^T` and `B = Y R^T`, possibly over scaled features.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub samples: usize,
}

const BLOCK: usize = 2048;

impl NormalEquations {
    fn block(mut r: DMatrix<f64>, y: &DMatrix<f64>, scaler: Option<&Scaler>) -> Self {
        if let Some(s) = scaler {
            for mut col in r.column_iter_mut() {
                for (v, sf) in col.iter_mut().zip(s.as_slice()) {
                    *v *= sf;
                }
            }
        }
        let rt = r.transpose();
        NormalEquations {
            gram: &r * &rt,
            cross: y * &rt,
            samples: r.ncols(),
        }
    }

    fn merge(mut self, other: NormalEquations) -> Self {
        self.gram += other.gram;
        self.cross += other.cross;
        self.samples += other.samples;
        self
    }

    pub fn from_matrices(r: &DMatrix<f64>, y: &DMatrix<f64>, scaler: Option<&Scaler>) -> Self {
        let m = r.ncols();
        let mut acc = PairwiseSum::default();
        let mut start = 0;
        while start < m {
            let end = (start + BLOCK).min(m);
            acc.push(Self::block(
                r.columns(start, end - start).into_owned(),
                &y.columns(start, end - start).into_owned(),
                scaler,
            ));
            start = end;
        }
        acc.finish().unwrap_or_else(|| NormalEquations {
            gram: DMatrix::zeros(r.nrows(), r.nrows()),
            cross: DMatrix::zeros(y.nrows(), r.nrows()),
            samples: 0,
        })
    }

    /// Streams training pairs from `traj` without materializing `R`.
    pub fn from_trajectory(
        traj: &Trajectory,
        index: &FeatureIndex,
        scaler: Option<&Scaler>,
    ) -> Result<Self> {
        let pairs = index.pair_count(traj)?;
        let mut acc = PairwiseSum::default();
        let mut start = 0;
        while start < pairs {
            let end = (start + BLOCK).min(pairs);
            let (r, y) = index.feature_block(traj, start, end)?;
            acc.push(Self::block(r, &y, scaler));
            start = end;
        }
        Ok(acc
            .finish()
            .expect("pair_count guarantees at least one pair"))
    }
}

/// Binary-counter pairwise summation of block Gram matrices, keeping the
/// accumulated round-off logarithmic in the number of blocks.
#[derive(Default)]
struct PairwiseSum {
    levels: Vec<Option<NormalEquations>>,
}

impl PairwiseSum {
    fn push(&mut self, mut ne: NormalEquations) {
        for slot in self.levels.iter_mut() {
            match slot.take() {
                Some(prev) => ne = prev.merge(ne),
                None => {
                    *slot = Some(ne);
                    return;
                }
            }
        }
        self.levels.push(Some(ne));
    }

    fn finish(self) -> Option<NormalEquations> {
        self.levels
            .into_iter()
            .flatten()
            .reduce(|small, big| big.merge(small))
    }
}

/// Max-abs scaler over all training pairs of `traj`.
pub fn trajectory_scaler(traj: &Trajectory, index: &FeatureIndex) -> Result<Scaler> {
    let pairs = index.pair_count(traj)?;
    let mut max = vec![0.0f64; index.len()];
    let mut start = 0;
    while start < pairs {
        let end = (start + BLOCK).min(pairs);
        let (r, _) = index.feature_block(traj, start, end)?;
        accumulate_max(&mut max, &r);
        start = end;
    }
    Ok(Scaler::from_max_abs(&max))
}

/// Fits `W` so that `W R ~ Y`.
///
/// Plain path: `W = Y R^T (R R^T + alpha I)^-1`. Preconditioned path:
/// `W = Y (SR)^T ((SR)(SR)^T)^-1 S`, with `alpha` ignored.
pub fn fit(
    r: &DMatrix<f64>,
    y: &DMatrix<f64>,
    index: &FeatureIndex,
    opts: &FitOptions,
    scaler: Option<&Scaler>,
) -> Result<Readout> {
    if r.nrows() != index.len() {
        return Err(NvarError::DimensionMismatch {
            expected: index.len(),
            got: r.nrows(),
        });
    }
    if y.nrows() != index.dim() {
        return Err(NvarError::DimensionMismatch {
            expected: index.dim(),
            got: y.nrows(),
        });
    }
    if r.ncols() != y.ncols() || r.ncols() == 0 {
        return Err(NvarError::Misaligned(format!(
            "R has {} samples, Y has {}",
            r.ncols(),
            y.ncols()
        )));
    }
    let scaler = if opts.preconditioned {
        let s = scaler.ok_or_else(|| {
            NvarError::InvalidParameter("preconditioned fit needs a scaler".into())
        })?;
        if s.len() != index.len() {
            return Err(NvarError::DimensionMismatch {
                expected: index.len(),
                got: s.len(),
            });
        }
        Some(s)
    } else {
        None
    };
    let ne = NormalEquations::from_matrices(r, y, scaler);
    finish(ne, index, opts, scaler, None)
}

/// Fits directly from a trajectory, computing the scaler when needed.
pub fn fit_trajectory(
    traj: &Trajectory,
    index: &FeatureIndex,
    opts: &FitOptions,
) -> Result<Readout> {
    let scaler = if opts.preconditioned {
        Some(trajectory_scaler(traj, index)?)
    } else {
        None
    };
    let ne = NormalEquations::from_trajectory(traj, index, scaler.as_ref())?;
    finish(ne, index, opts, scaler.as_ref(), Some(traj.meta.clone()))
}

fn finish(
    mut ne: NormalEquations,
    index: &FeatureIndex,
    opts: &FitOptions,
    scaler: Option<&Scaler>,
    training: Option<TrajectoryMeta>,
) -> Result<Readout> {
    let f = index.len();
    if ne.samples < f {
        log::warn!(
            "underdetermined fit: {} samples for {f} features",
            ne.samples
        );
    }
    if opts.preconditioned {
        if opts.alpha != 0.0 {
            log::warn!("alpha is ignored on the preconditioned path");
        }
    } else if opts.alpha > 0.0 {
        for k in 0..f {
            ne.gram[(k, k)] += opts.alpha;
        }
    } else if opts.alpha < 0.0 {
        return Err(NvarError::InvalidParameter(format!(
            "alpha must be nonnegative, got {}",
            opts.alpha
        )));
    }
    let (mut w, rank) = solve_normal_equations(&ne.gram, &ne.cross, opts.solver)?;
    if let Some(s) = scaler {
        for (mut col, sf) in w.column_iter_mut().zip(s.as_slice()) {
            col *= *sf;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(FitFailure::new("non-finite coefficients after scaling").into());
    }
    Readout::new(
        w,
        index.clone(),
        Provenance::Fitted {
            alpha: if opts.preconditioned { 0.0 } else { opts.alpha },
            preconditioned: opts.preconditioned,
            solver: opts.solver,
            samples: ne.samples,
            rank,
            training,
        },
    )
}

/// Diagonally pivoted Cholesky factor `P^T G P = L L^T`, stopped at the
/// first pivot below `tol`. Stored transposed: column `k` of `lt` holds row
/// `k` of `L`.
struct PivotedCholesky {
    lt: DMatrix<f64>,
    perm: Vec<usize>,
    rank: usize,
}

fn pivoted_cholesky(gram: &DMatrix<f64>, tol: f64) -> PivotedCholesky {
    let n = gram.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut diag: Vec<f64> = (0..n).map(|i| gram[(i, i)]).collect();
    let mut lt = DMatrix::<f64>::zeros(n, n);
    let mut rank = n;
    for k in 0..n {
        let (j, &dmax) = diag[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, d)| (j + k, d))
            .expect("nonempty");
        if !(dmax > tol) {
            rank = k;
            break;
        }
        perm.swap(k, j);
        diag.swap(k, j);
        lt.swap_columns(k, j);
        let pivot = dmax.sqrt();
        lt[(k, k)] = pivot;
        let pk = perm[k];
        for i in k + 1..n {
            let dot = lt.column(i).rows(0, k).dot(&lt.column(k).rows(0, k));
            let v = (gram[(perm[i], pk)] - dot) / pivot;
            lt[(k, i)] = v;
            diag[i] -= v * v;
        }
    }
    PivotedCholesky { lt, perm, rank }
}

impl PivotedCholesky {
    /// Basic solution of `G x = b`: coefficients of the features beyond the
    /// numerical rank are zero.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let r = self.rank;
        let mut y: Vec<f64> = self.perm[..r].iter().map(|&p| b[p]).collect();
        for k in 0..r {
            let s = (0..k).map(|m| self.lt[(m, k)] * y[m]).sum::<f64>();
            y[k] = (y[k] - s) / self.lt[(k, k)];
        }
        for k in (0..r).rev() {
            let s = (k + 1..r).map(|m| self.lt[(k, m)] * y[m]).sum::<f64>();
            y[k] = (y[k] - s) / self.lt[(k, k)];
        }
        let mut x = vec![0.0; b.len()];
        for (k, &p) in self.perm[..r].iter().enumerate() {
            x[p] = y[k];
        }
        x
    }
}

/// Relative pivot tolerance of the Gram factorization: `F * eps` times the
/// largest diagonal entry.
pub fn rank_tolerance(gram: &DMatrix<f64>) -> f64 {
    let max_diag = (0..gram.nrows())
        .map(|i| gram[(i, i)])
        .fold(0.0f64, f64::max);
    gram.nrows() as f64 * f64::EPSILON * max_diag
}

/// Solution of `W G = B` for symmetric `G` and the numerical rank of `G`.
pub fn solve_normal_equations(
    gram: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    solver: Solver,
) -> Result<(DMatrix<f64>, usize), FitFailure> {
    if gram.iter().any(|v| !v.is_finite()) || cross.iter().any(|v| !v.is_finite()) {
        return Err(FitFailure::new("non-finite Gram matrix"));
    }
    let tol = rank_tolerance(gram);
    // A feature whose own energy is below the pivot tolerance cannot be
    // resolved at all; redundancy that only appears during elimination is
    // handled by the truncated solve instead.
    if let Some(k) = (0..gram.nrows()).find(|&k| gram[(k, k)] > 0.0 && gram[(k, k)] <= tol) {
        return Err(FitFailure::new(format!(
            "feature {k} is below the Gram matrix resolution ({:.3e} <= {tol:.3e})",
            gram[(k, k)]
        )));
    }
    let (w, rank) = match solver {
        Solver::Cholesky => {
            let chol = pivoted_cholesky(gram, tol);
            let mut w = DMatrix::zeros(cross.nrows(), cross.ncols());
            for i in 0..cross.nrows() {
                let b: Vec<f64> = cross.row(i).iter().copied().collect();
                for (k, v) in chol.solve(&b).into_iter().enumerate() {
                    w[(i, k)] = v;
                }
            }
            (w, chol.rank)
        }
        Solver::Svd => {
            let svd = gram.clone().svd(true, true);
            let rank = svd.rank(tol);
            let wt = svd
                .solve(&cross.transpose(), tol)
                .map_err(|e| FitFailure::new(format!("SVD solve failed: {e}")))?;
            (wt.transpose(), rank)
        }
    };
    if rank == 0 {
        return Err(FitFailure::new("Gram matrix is numerically zero"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(FitFailure::new("solve produced non-finite coefficients"));
    }
    Ok((w, rank))
}

/// One polynomial term of an Euler time-stepping map: output row,
/// current-step variable factors, coefficient.
struct Term {
    row: usize,
    vars: Vec<usize>,
    coef: f64,
}

fn euler_terms(system: &SystemSpec, h: f64) -> Result<Vec<Term>> {
    let t = |row, vars: &[usize], coef| Term {
        row,
        vars: vars.to_vec(),
        coef,
    };
    let terms = match *system {
        SystemSpec::L63 { sigma, rho, beta } => vec![
            t(0, &[0], 1.0 - h * sigma),
            t(0, &[1], h * sigma),
            t(1, &[0], h * rho),
            t(1, &[1], 1.0 - h),
            t(1, &[0, 2], -h),
            t(2, &[2], 1.0 - h * beta),
            t(2, &[0, 1], h),
        ],
        SystemSpec::L96 { n, forcing } => {
            let mut v = Vec::new();
            for i in 0..n {
                let ip1 = (i + 1) % n;
                let im1 = (i + n - 1) % n;
                let im2 = (i + n - 2) % n;
                v.push(t(i, &[], h * forcing));
                v.push(t(i, &[i], 1.0 - h));
                v.push(t(i, &[ip1, im1], h));
                v.push(t(i, &[im2, im1], -h));
            }
            v
        }
        SystemSpec::NormalizedL63 {
            sigma,
            rho,
            beta,
            centers: [cx, cy, cz],
            scales: [kx, ky, kz],
        } => vec![
            t(0, &[], h * sigma * (cy - cx) / kx),
            t(0, &[0], 1.0 - h * sigma),
            t(0, &[1], h * sigma * ky / kx),
            t(1, &[], h * (rho * cx - cy - cx * cz) / ky),
            t(1, &[0], h * (rho - cz) * kx / ky),
            t(1, &[1], 1.0 - h),
            t(1, &[2], -h * cx * kz / ky),
            t(1, &[0, 2], -h * kx * kz / ky),
            t(2, &[], h * (cx * cy - beta * cz) / kz),
            t(2, &[0], h * cy * kx / kz),
            t(2, &[1], h * cx * ky / kz),
            t(2, &[2], 1.0 - h * beta),
            t(2, &[0, 1], h * kx * ky / kz),
        ],
        SystemSpec::Colpitts { .. } => {
            return Err(NvarError::InvalidParameter(
                "Colpitts Euler readout needs exp features; use derive_colpitts_euler".into(),
            ))
        }
    };
    Ok(terms)
}

/// The readout that reproduces one Euler step of `system` exactly.
/// Only features with a nonzero coefficient are required in `index`.
pub fn derive_w_euler(system: &SystemSpec, h: f64, index: &FeatureIndex) -> Result<Readout> {
    system.validate()?;
    if let SystemSpec::Colpitts { .. } = system {
        return derive_colpitts_euler(system, h, index);
    }
    check_index_dim(system, index)?;
    let mut w = DMatrix::zeros(index.dim(), index.len());
    for term in euler_terms(system, h)? {
        if term.coef == 0.0 {
            continue;
        }
        let k = locate(index, &term.vars)?;
        w[(term.row, k)] += term.coef;
    }
    Readout::new(
        w,
        index.clone(),
        Provenance::Derived {
            system: system.clone(),
            scheme: Scheme::Euler,
            h,
        },
    )
}

/// Euler map of the Colpitts oscillator over bias, linear and `exp(-x1)`
/// features.
pub fn derive_colpitts_euler(system: &SystemSpec, h: f64, index: &FeatureIndex) -> Result<Readout> {
    let SystemSpec::Colpitts {
        alpha,
        gamma,
        q,
        eta,
    } = *system
    else {
        return Err(NvarError::InvalidParameter(
            "expected a Colpitts system".into(),
        ));
    };
    check_index_dim(system, index)?;
    let exp_x0 = FeatureDescriptor::Special {
        name: SpecialKind::Exp,
        coefficient: -1.0,
        variable: 0,
        lag: 0,
    };
    let exp_k = index
        .position(&exp_x0)
        .ok_or_else(|| NvarError::MissingFeature("exp(-1*x0)".into()))?;
    let mut w = DMatrix::zeros(3, index.len());
    let lin = |v: usize| locate(index, &[v]);
    w[(0, lin(0)?)] += 1.0;
    w[(0, lin(1)?)] += h * alpha;
    w[(1, lin(0)?)] += -h * gamma;
    w[(1, lin(1)?)] += 1.0 - h * q;
    w[(1, lin(2)?)] += -h * gamma;
    w[(2, locate(index, &[])?)] += h * eta;
    w[(2, lin(1)?)] += h * eta;
    w[(2, lin(2)?)] += 1.0;
    w[(2, exp_k)] += -h * eta;
    Readout::new(
        w,
        index.clone(),
        Provenance::Derived {
            system: system.clone(),
            scheme: Scheme::Euler,
            h,
        },
    )
}

fn check_index_dim(system: &SystemSpec, index: &FeatureIndex) -> Result<()> {
    if index.dim() != system.dimension() {
        return Err(NvarError::DimensionMismatch {
            expected: system.dimension(),
            got: index.dim(),
        });
    }
    Ok(())
}

fn locate(index: &FeatureIndex, vars: &[usize]) -> Result<usize> {
    let found = if vars.is_empty() {
        index.position(&FeatureDescriptor::Bias)
    } else {
        index.position_of_monomial(vars)
    };
    found.ok_or_else(|| {
        let name = if vars.is_empty() {
            "1".to_string()
        } else {
            vars.iter()
                .map(|v| format!("x{v}"))
                .collect::<Vec<_>>()
                .join("*")
        };
        NvarError::MissingFeature(name)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub max_abs_diff: f64,
    pub rms_diff: f64,
    /// Max absolute difference over the columns of each polynomial degree.
    pub per_degree_max: BTreeMap<usize, f64>,
    /// Same, over special-function columns, when any exist.
    pub special_max: Option<f64>,
    #[serde(skip)]
    pub entrywise: DMatrix<f64>,
}

/// Entrywise `a - b`, summarized.
pub fn compare(a: &Readout, b: &Readout) -> Result<DiffReport> {
    if a.index != b.index {
        return Err(NvarError::IndexMismatch);
    }
    let diff = &a.w - &b.w;
    let mut per_degree_max = BTreeMap::new();
    let mut special_max: Option<f64> = None;
    for (k, d) in a.index.descriptors().iter().enumerate() {
        let col_max = diff.column(k).amax();
        match d.degree() {
            Some(deg) => {
                let e = per_degree_max.entry(deg).or_insert(0.0f64);
                *e = e.max(col_max);
            }
            None => special_max = Some(special_max.unwrap_or(0.0).max(col_max)),
        }
    }
    let n = diff.len().max(1) as f64;
    Ok(DiffReport {
        max_abs_diff: diff.amax(),
        rms_diff: (diff.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        per_degree_max,
        special_max,
        entrywise: diff,
    })
}
