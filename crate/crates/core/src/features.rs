//! NVAR feature vectors: bias, time-lagged monomials and prescribed special
//! functions, in a canonical order.
//!
//! Lagged variables are numbered `lag * D + i`, so the current-step
//! variables come first, then lag 1, and so on. Monomials of one degree are
//! listed in lexicographic order of their (nondecreasing) variable tuples,
//! which for `D = 2, p = 2` gives `[1, x0, x1, x0^2, x0*x1, x1^2]`.

use std::fmt;

use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{NvarError, Result};
use crate::integrate::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialKind {
    Exp,
}

/// `name(c * x_i)` applied to each listed variable at every lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialFunction {
    pub name: SpecialKind,
    pub coefficient: f64,
    pub applied_to: Vec<usize>,
}

impl SpecialFunction {
    pub fn exp(coefficient: f64, applied_to: Vec<usize>) -> Self {
        SpecialFunction {
            name: SpecialKind::Exp,
            coefficient,
            applied_to,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub degree: usize,
    pub lags: usize,
    #[serde(default = "default_true")]
    pub include_bias: bool,
    #[serde(default)]
    pub special_functions: Vec<SpecialFunction>,
    /// Drop monomials of degree >= 2 in favour of the special functions.
    #[serde(default)]
    pub replace_polynomials: bool,
}

fn default_true() -> bool {
    true
}

impl FeatureSpec {
    pub fn polynomial(degree: usize, lags: usize) -> Self {
        FeatureSpec {
            degree,
            lags,
            include_bias: true,
            special_functions: Vec::new(),
            replace_polynomials: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.include_bias = false;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Err(NvarError::InvalidParameter("dimension must be >= 1".into()));
        }
        let has_poly = self.degree >= 1;
        if !has_poly && self.special_functions.is_empty() {
            return Err(NvarError::InvalidParameter(
                "features need degree >= 1 or at least one special function".into(),
            ));
        }
        for sf in &self.special_functions {
            if !sf.coefficient.is_finite() {
                return Err(NvarError::InvalidParameter(
                    "special function coefficient must be finite".into(),
                ));
            }
            if let Some(&v) = sf.applied_to.iter().find(|&&v| v >= dim) {
                return Err(NvarError::InvalidParameter(format!(
                    "special function applied to variable {v}, but dimension is {dim}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureDescriptor {
    Bias,
    /// Exponents over the `D * (lags + 1)` lagged variables.
    Monomial {
        exponents: Vec<u32>,
    },
    Special {
        name: SpecialKind,
        coefficient: f64,
        variable: usize,
        lag: usize,
    },
}

impl FeatureDescriptor {
    /// Polynomial degree; `None` for special functions.
    pub fn degree(&self) -> Option<usize> {
        match self {
            FeatureDescriptor::Bias => Some(0),
            FeatureDescriptor::Monomial { exponents } => {
                Some(exponents.iter().map(|&e| e as usize).sum())
            }
            FeatureDescriptor::Special { .. } => None,
        }
    }
}

/// Per-feature evaluation recipe. Monomial factors are positions in the
/// flattened oldest-first window, multiplied left to right.
#[derive(Clone, Debug)]
enum Plan {
    Bias,
    Product(Vec<usize>),
    Exp { coefficient: f64, position: usize },
}

/// Number of features `spec` produces over `dim` variables, without
/// enumerating them: `C(n + p, p)` monomials of `n = dim * (lags + 1)`
/// variables up to degree `p`, minus the bias if excluded, plus specials.
pub fn feature_count(spec: &FeatureSpec, dim: usize) -> usize {
    let nvars = dim * (spec.lags + 1);
    let degree = if spec.replace_polynomials {
        spec.degree.min(1)
    } else {
        spec.degree
    };
    let monomials = binomial(nvars + degree, degree) - usize::from(!spec.include_bias);
    let specials: usize = spec
        .special_functions
        .iter()
        .map(|sf| sf.applied_to.len())
        .sum();
    monomials + specials * (spec.lags + 1)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Canonical ordered list of features for a given dimension and lag count.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "IndexRepr", into = "IndexRepr")]
pub struct FeatureIndex {
    dim: usize,
    lags: usize,
    descriptors: Vec<FeatureDescriptor>,
    plans: Vec<Plan>,
}

#[derive(Serialize, Deserialize)]
struct IndexRepr {
    dim: usize,
    lags: usize,
    features: Vec<FeatureDescriptor>,
}

impl From<FeatureIndex> for IndexRepr {
    fn from(index: FeatureIndex) -> Self {
        IndexRepr {
            dim: index.dim,
            lags: index.lags,
            features: index.descriptors,
        }
    }
}

impl TryFrom<IndexRepr> for FeatureIndex {
    type Error = NvarError;

    fn try_from(repr: IndexRepr) -> Result<Self> {
        FeatureIndex::from_descriptors(repr.dim, repr.lags, repr.features)
    }
}

impl PartialEq for FeatureIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.lags == other.lags && self.descriptors == other.descriptors
    }
}

impl FeatureIndex {
    /// Builds the canonical index for `spec` over `dim` variables.
    pub fn enumerate(spec: &FeatureSpec, dim: usize) -> Result<Self> {
        spec.validate(dim)?;
        let nvars = dim * (spec.lags + 1);
        let mut descriptors = Vec::new();
        if spec.include_bias {
            descriptors.push(FeatureDescriptor::Bias);
        }
        let max_degree = if spec.replace_polynomials {
            spec.degree.min(1)
        } else {
            spec.degree
        };
        for degree in 1..=max_degree {
            for combo in (0..nvars).combinations_with_replacement(degree) {
                let mut exponents = vec![0u32; nvars];
                for v in combo {
                    exponents[v] += 1;
                }
                descriptors.push(FeatureDescriptor::Monomial { exponents });
            }
        }
        let mut specials = Vec::new();
        for sf in &spec.special_functions {
            for lag in 0..=spec.lags {
                for &variable in &sf.applied_to {
                    specials.push(FeatureDescriptor::Special {
                        name: sf.name,
                        coefficient: sf.coefficient,
                        variable,
                        lag,
                    });
                }
            }
        }
        specials.sort_by_key(|d| match d {
            FeatureDescriptor::Special { lag, variable, .. } => (*lag, *variable),
            _ => unreachable!(),
        });
        descriptors.extend(specials);
        Self::from_descriptors(dim, spec.lags, descriptors)
    }

    /// Validates an explicit descriptor list, e.g. one read from JSON.
    pub fn from_descriptors(
        dim: usize,
        lags: usize,
        descriptors: Vec<FeatureDescriptor>,
    ) -> Result<Self> {
        let nvars = dim * (lags + 1);
        let mut plans = Vec::with_capacity(descriptors.len());
        for (k, d) in descriptors.iter().enumerate() {
            if descriptors[..k].contains(d) {
                return Err(NvarError::InvalidParameter(format!(
                    "duplicate feature descriptor at position {k}"
                )));
            }
            let plan = match d {
                FeatureDescriptor::Bias => Plan::Bias,
                FeatureDescriptor::Monomial { exponents } => {
                    if exponents.len() != nvars {
                        return Err(NvarError::InvalidParameter(format!(
                            "monomial has {} exponents, expected {nvars}",
                            exponents.len()
                        )));
                    }
                    let mut factors = Vec::new();
                    for (v, &e) in exponents.iter().enumerate() {
                        for _ in 0..e {
                            factors.push(window_position(v, dim, lags));
                        }
                    }
                    if factors.is_empty() {
                        return Err(NvarError::InvalidParameter(
                            "degree-0 monomial; use the bias descriptor".into(),
                        ));
                    }
                    Plan::Product(factors)
                }
                FeatureDescriptor::Special {
                    coefficient,
                    variable,
                    lag,
                    ..
                } => {
                    if *variable >= dim || *lag > lags {
                        return Err(NvarError::InvalidParameter(format!(
                            "special feature on variable {variable} lag {lag} is out of range"
                        )));
                    }
                    Plan::Exp {
                        coefficient: *coefficient,
                        position: window_position(lag * dim + variable, dim, lags),
                    }
                }
            };
            plans.push(plan);
        }
        Ok(FeatureIndex {
            dim,
            lags,
            descriptors,
            plans,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    /// Window length `lags + 1`.
    pub fn window_len(&self) -> usize {
        self.lags + 1
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[FeatureDescriptor] {
        &self.descriptors
    }

    pub fn position(&self, descriptor: &FeatureDescriptor) -> Option<usize> {
        self.descriptors.iter().position(|d| d == descriptor)
    }

    /// Position of the current-step monomial with the given variable factors.
    pub fn position_of_monomial(&self, vars: &[usize]) -> Option<usize> {
        let mut exponents = vec![0u32; self.dim * (self.lags + 1)];
        for &v in vars {
            *exponents.get_mut(v)? += 1;
        }
        self.position(&FeatureDescriptor::Monomial { exponents })
    }

    pub fn label(&self, k: usize) -> String {
        FeatureLabel {
            descriptor: &self.descriptors[k],
            dim: self.dim,
        }
        .to_string()
    }

    /// Evaluates all features for a window given as `lags + 1` states,
    /// oldest first.
    pub fn evaluate(&self, window: &[Vec<f64>]) -> Result<Vec<f64>> {
        if window.len() != self.window_len() {
            return Err(NvarError::DimensionMismatch {
                expected: self.window_len(),
                got: window.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.window_len() * self.dim);
        for state in window {
            if state.len() != self.dim {
                return Err(NvarError::DimensionMismatch {
                    expected: self.dim,
                    got: state.len(),
                });
            }
            flat.extend_from_slice(state);
        }
        let mut out = vec![0.0; self.len()];
        self.evaluate_into(&flat, &mut out)?;
        Ok(out)
    }

    /// Evaluates into `out` from a flattened oldest-first window of length
    /// `(lags + 1) * dim`.
    pub fn evaluate_into(&self, window: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, plan) in out.iter_mut().zip(&self.plans) {
            *o = match plan {
                Plan::Bias => 1.0,
                Plan::Product(factors) => {
                    let mut acc = window[factors[0]];
                    for &p in &factors[1..] {
                        acc *= window[p];
                    }
                    acc
                }
                Plan::Exp {
                    coefficient,
                    position,
                } => (coefficient * window[*position]).exp(),
            };
        }
        if let Some(k) = out.iter().position(|v| !v.is_finite()) {
            return Err(NvarError::FeatureEvaluation {
                feature: self.label(k),
            });
        }
        Ok(())
    }

    /// Training pairs from a trajectory: column `m` of `R` holds the features
    /// of the window ending at trajectory column `m + lags`, column `m` of
    /// `Y` the state one stored step later.
    pub fn build_feature_matrix(&self, traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let pairs = self.pair_count(traj)?;
        self.feature_block(traj, 0, pairs)
    }

    /// Number of training pairs a trajectory yields.
    pub fn pair_count(&self, traj: &Trajectory) -> Result<usize> {
        if traj.dim() != self.dim {
            return Err(NvarError::DimensionMismatch {
                expected: self.dim,
                got: traj.dim(),
            });
        }
        let needed = self.lags + 2;
        if traj.len() < needed {
            return Err(NvarError::TooShort {
                needed,
                got: traj.len(),
            });
        }
        Ok(traj.len() - self.lags - 1)
    }

    /// Pairs `start..end` (in pair numbering) as `(R, Y)` blocks.
    pub(crate) fn feature_block(
        &self,
        traj: &Trajectory,
        start: usize,
        end: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let f = self.len();
        let d = self.dim;
        let n = end - start;
        let mut r = DMatrix::zeros(f, n);
        let mut y = DMatrix::zeros(d, n);
        {
            let r_data = r.as_mut_slice();
            let y_data = y.as_mut_slice();
            for j in 0..n {
                let m = start + j + self.lags;
                let window = traj.columns_flat(m - self.lags, m + 1);
                self.evaluate_into(window, &mut r_data[j * f..(j + 1) * f])?;
                y_data[j * d..(j + 1) * d].copy_from_slice(traj.column(m + 1));
            }
        }
        Ok((r, y))
    }
}

fn window_position(lagged_var: usize, dim: usize, lags: usize) -> usize {
    let lag = lagged_var / dim;
    let i = lagged_var % dim;
    (lags - lag) * dim + i
}

struct FeatureLabel<'a> {
    descriptor: &'a FeatureDescriptor,
    dim: usize,
}

fn var_name(v: usize, dim: usize) -> String {
    let (lag, i) = (v / dim, v % dim);
    if lag == 0 {
        format!("x{i}")
    } else {
        format!("x{i}[-{lag}]")
    }
}

impl fmt::Display for FeatureLabel<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.descriptor {
            FeatureDescriptor::Bias => f.write_str("1"),
            FeatureDescriptor::Monomial { exponents } => {
                let parts: Vec<String> = exponents
                    .iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(v, &e)| {
                        let name = var_name(v, self.dim);
                        if e == 1 {
                            name
                        } else {
                            format!("{name}^{e}")
                        }
                    })
                    .collect();
                f.write_str(&parts.join("*"))
            }
            FeatureDescriptor::Special {
                coefficient,
                variable,
                lag,
                ..
            } => write!(
                f,
                "exp({coefficient}*{})",
                var_name(lag * self.dim + variable, self.dim)
            ),
        }
    }
}

/// Diagonal preconditioner: one positive entry per feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler(pub Vec<f64>);

impl Scaler {
    /// `s_f = 1 / max_m |R[f, m]|`, or 1 for a feature that is zero
    /// throughout.
    pub fn from_features(r: &DMatrix<f64>) -> Self {
        let mut max = vec![0.0f64; r.nrows()];
        accumulate_max(&mut max, r);
        Self::from_max_abs(&max)
    }

    pub fn from_max_abs(max: &[f64]) -> Self {
        Scaler(
            max.iter()
                .map(|&m| {
                    if m > 0.0 && m.is_finite() {
                        1.0 / m
                    } else {
                        1.0
                    }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn accumulate_max(max: &mut [f64], r: &DMatrix<f64>) {
    for col in r.column_iter() {
        for (m, v) in max.iter_mut().zip(col.iter()) {
            *m = m.max(v.abs());
        }
    }
}

/// See [`Scaler::from_features`].
pub fn compute_scaler(r: &DMatrix<f64>) -> Scaler {
    Scaler::from_features(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SystemSpec;
    use crate::integrate::{generate_trajectory, Scheme};

    fn labels(index: &FeatureIndex) -> Vec<String> {
        (0..index.len()).map(|k| index.label(k)).collect()
    }

    #[test]
    fn two_variable_quadratic_ordering() {
        let index = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 2).unwrap();
        assert_eq!(labels(&index), ["1", "x0", "x1", "x0^2", "x0*x1", "x1^2"]);
    }

    #[test]
    fn counts_for_l63() {
        let index = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 3).unwrap();
        assert_eq!(index.len(), 10);
        let lagged = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 1), 3).unwrap();
        assert_eq!(lagged.len(), 28);
        let no_bias =
            FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0).without_bias(), 3).unwrap();
        assert_eq!(no_bias.len(), 9);
    }

    #[test]
    fn hand_evaluation_under_canonical_order() {
        let index = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 3).unwrap();
        let r = index.evaluate(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn lagged_window_puts_current_step_first() {
        let index = FeatureIndex::enumerate(&FeatureSpec::polynomial(1, 1), 2).unwrap();
        assert_eq!(labels(&index), ["1", "x0", "x1", "x0[-1]", "x1[-1]"]);
        let r = index.evaluate(&[vec![10.0, 20.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(r, vec![1.0, 1.0, 2.0, 10.0, 20.0]);
    }

    #[test]
    fn exp_features_at_origin_are_one() {
        let spec = FeatureSpec {
            degree: 2,
            lags: 0,
            include_bias: true,
            special_functions: vec![SpecialFunction::exp(-1.0, vec![0, 1, 2])],
            replace_polynomials: true,
        };
        let index = FeatureIndex::enumerate(&spec, 3).unwrap();
        assert_eq!(index.len(), 7);
        assert_eq!(labels(&index)[4], "exp(-1*x0)");
        let r = index.evaluate(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(&r[4..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn exp_overflow_names_the_feature() {
        let spec = FeatureSpec {
            degree: 1,
            lags: 0,
            include_bias: true,
            special_functions: vec![SpecialFunction::exp(-1.0, vec![1])],
            replace_polynomials: false,
        };
        let index = FeatureIndex::enumerate(&spec, 2).unwrap();
        let err = index.evaluate(&[vec![0.0, -1000.0]]).unwrap_err();
        match err {
            NvarError::FeatureEvaluation { feature } => assert_eq!(feature, "exp(-1*x1)"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(FeatureIndex::enumerate(&FeatureSpec::polynomial(0, 0), 3).is_err());
        assert!(FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 0).is_err());
        let spec = FeatureSpec {
            special_functions: vec![SpecialFunction::exp(-1.0, vec![5])],
            ..FeatureSpec::polynomial(1, 0)
        };
        assert!(FeatureIndex::enumerate(&spec, 3).is_err());
    }

    #[test]
    fn feature_matrix_pairs() {
        let l63 = SystemSpec::lorenz63();
        let traj =
            generate_trajectory(&l63, Scheme::Euler, &[1.0, 1.0, 1.0], 0.01, 25.0, 0.0).unwrap();
        assert_eq!(traj.len(), 2501);
        let i0 = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 0), 3).unwrap();
        let (r, y) = i0.build_feature_matrix(&traj).unwrap();
        assert_eq!(r.ncols(), 2500);
        assert_eq!(y.ncols(), 2500);
        for m in [0, 17, 2499] {
            assert_eq!(y.column(m).as_slice(), traj.column(m + 1));
            assert_eq!(r[(1, m)], traj.column(m)[0]);
        }
        let i1 = FeatureIndex::enumerate(&FeatureSpec::polynomial(2, 1), 3).unwrap();
        let (r1, y1) = i1.build_feature_matrix(&traj).unwrap();
        assert_eq!(r1.ncols(), 2499);
        assert_eq!(y1.column(0).as_slice(), traj.column(2));
        // lag-1 x0 of the first pair is trajectory column 0
        assert_eq!(r1[(4, 0)], traj.column(0)[0]);

        let short = traj.slice(0, 2);
        assert!(i1.build_feature_matrix(&short).is_err());
        assert!(i0.build_feature_matrix(&short).is_ok());
    }

    #[test]
    fn scaler_definition() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, -50.0, 20.0, 3.0, 0.0, 0.0, 0.0]);
        let s = compute_scaler(&r);
        assert_eq!(s.0, vec![1.0, 0.02, 1.0]);
    }

    #[test]
    fn index_json_round_trip() {
        let spec = FeatureSpec {
            special_functions: vec![SpecialFunction::exp(-1.0, vec![0, 2])],
            ..FeatureSpec::polynomial(2, 1)
        };
        let index = FeatureIndex::enumerate(&spec, 3).unwrap();
        let json = serde_json::to_string(&index).unwrap();
        let back: FeatureIndex = serde_json::from_str(&json).unwrap();
        assert_eq!(back, index);
        let w = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -3.0]];
        assert_eq!(back.evaluate(&w).unwrap(), index.evaluate(&w).unwrap());
    }

    #[test]
    fn duplicate_descriptors_rejected() {
        let d = vec![FeatureDescriptor::Bias, FeatureDescriptor::Bias];
        assert!(FeatureIndex::from_descriptors(2, 0, d).is_err());
    }
}
