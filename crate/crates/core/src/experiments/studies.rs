use rayon::prelude::*;

use crate::dynamics::SystemSpec;
use crate::emulate::rollout;
use crate::error::{NvarError, Result};
use crate::features::{FeatureIndex, FeatureSpec};
use crate::integrate::{
    add_noise, generate_trajectory, sample_test_segments, subsample, Scheme, Trajectory,
};
use crate::metrics::{climatology, Climatology};
use crate::readout::{derive_w_euler, fit_trajectory, FitOptions, Provenance, Readout};

use super::config::{sub_seed, Experiment, ExperimentConfig, FeatureSet};
use super::evaluate::evaluate_readout;
use super::result::{mark_best, AttractorDump, Cell, CellKey, CellOutcome, GridResult, Variant};

/// Training data of one cell together with its climatology.
struct Training {
    traj: Trajectory,
    clim: Climatology,
}

impl Training {
    fn new(traj: Trajectory) -> Result<Self> {
        let clim = climatology(&traj)?;
        Ok(Training { traj, clim })
    }
}

enum Model {
    Fit { spec: FeatureSpec, opts: FitOptions },
    Derived { spec: FeatureSpec },
}

struct Job<'a> {
    key: CellKey,
    training: &'a Training,
    tests: &'a [Trajectory],
    model: Model,
}

fn training_run(
    cfg: &ExperimentConfig,
    system: &SystemSpec,
    scheme: Scheme,
    mtu: f64,
) -> Result<Trajectory> {
    generate_trajectory(
        system,
        scheme,
        &system.default_initial_state(),
        cfg.h,
        mtu,
        cfg.spinup_mtu,
    )
}

fn test_run(
    cfg: &ExperimentConfig,
    system: &SystemSpec,
    scheme: Scheme,
) -> Result<Vec<Trajectory>> {
    let seed = sub_seed(cfg.seed, &format!("test/{}/{}", system.label(), scheme));
    sample_test_segments(system, scheme, cfg.h, cfg.test_count, cfg.test_mtu, seed)
}

fn fit_options(cfg: &ExperimentConfig, preconditioned: bool) -> FitOptions {
    FitOptions {
        alpha: cfg.alpha,
        preconditioned,
        solver: cfg.solver,
    }
}

fn features_name(cfg: &ExperimentConfig, set: FeatureSet) -> String {
    match set {
        FeatureSet::Polynomial => set.name().to_string(),
        FeatureSet::Special => cfg
            .special_functions
            .iter()
            .map(|sf| format!("{:?}", sf.name).to_lowercase())
            .collect::<Vec<_>>()
            .join("+"),
    }
}

#[allow(clippy::too_many_arguments)]
fn key(
    system: &SystemSpec,
    variant: Variant,
    features: &str,
    spec: &FeatureSpec,
    scheme_train: Scheme,
    scheme_test: Scheme,
    preconditioned: bool,
    train_columns: usize,
) -> CellKey {
    CellKey {
        system: system.label(),
        variant,
        features: features.to_string(),
        degree: spec.degree,
        lags: spec.lags,
        bias: spec.include_bias,
        feature_count: crate::features::feature_count(spec, system.dimension()),
        skip: 0,
        scheme_train,
        scheme_test,
        noise: 0.0,
        divisor: 1,
        preconditioned,
        train_columns,
    }
}

/// Fits a readout, turning fit failures (including non-finite features in
/// the training data) into a recorded outcome.
fn obtain_readout(
    training: &Training,
    model: &Model,
) -> Result<std::result::Result<Readout, crate::readout::FitFailure>> {
    let system = &training.traj.meta.system;
    match model {
        Model::Fit { spec, opts } => {
            let index = FeatureIndex::enumerate(spec, system.dimension())?;
            match fit_trajectory(&training.traj, &index, opts) {
                Ok(r) => Ok(Ok(r)),
                Err(NvarError::Fit(f)) => Ok(Err(f)),
                Err(NvarError::FeatureEvaluation { feature }) => {
                    Ok(Err(crate::readout::FitFailure {
                        reason: format!("feature `{feature}` is not finite on the training data"),
                    }))
                }
                Err(e) => Err(e),
            }
        }
        Model::Derived { spec } => {
            let index = FeatureIndex::enumerate(spec, system.dimension())?;
            derive_w_euler(system, training.traj.meta.h, &index).map(Ok)
        }
    }
}

fn run_job(job: &Job<'_>, cfg: &ExperimentConfig) -> Result<Cell> {
    let outcome = match obtain_readout(job.training, &job.model)? {
        Ok(readout) => {
            let rank = match readout.provenance {
                Provenance::Fitted { rank, .. } => Some(rank),
                Provenance::Derived { .. } => None,
            };
            let distribution = evaluate_readout(
                &readout,
                job.tests,
                &job.training.clim,
                cfg.epsilon,
                cfg.magnitude_bound,
            )?;
            CellOutcome::Evaluated { distribution, rank }
        }
        Err(failure) => CellOutcome::FitFailure { failure },
    };
    log::info!(
        "{} {} p={} t={} skip={} pre={}: {}",
        job.key.system,
        job.key.scheme_train,
        job.key.degree,
        job.key.lags,
        job.key.skip,
        job.key.preconditioned,
        match &outcome {
            CellOutcome::Evaluated { distribution, .. } =>
                format!("median {:.3}", distribution.median),
            CellOutcome::FitFailure { failure } => failure.reason.clone(),
        }
    );
    Ok(Cell {
        key: job.key.clone(),
        outcome,
        best: false,
    })
}

fn run_jobs(jobs: &[Job<'_>], cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    jobs.par_iter().map(|j| run_job(j, cfg)).collect()
}

fn result(cfg: &ExperimentConfig, cells: Vec<Cell>) -> GridResult {
    GridResult {
        experiment: cfg.experiment.id().to_string(),
        config_hash: cfg.hash(),
        cells,
        attractors: Vec::new(),
    }
}

/// Trains on each scheme and evaluates over the degree/lag grid against test
/// data of the same scheme.
pub fn run_grid_search(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let mut data = Vec::new();
    for system in &cfg.systems {
        for &scheme in &cfg.schemes {
            let training = Training::new(training_run(cfg, system, scheme, cfg.train_mtu)?)?;
            let tests = test_run(cfg, system, scheme)?;
            data.push((system, scheme, training, tests));
        }
    }
    let mut jobs = Vec::new();
    for (system, scheme, training, tests) in &data {
        for &set in &cfg.feature_sets {
            let features = features_name(cfg, set);
            for &bias in &cfg.bias {
                for spec in cfg.feature_specs(set, bias, system.dimension()) {
                    for &pre in &cfg.preconditioning {
                        jobs.push(Job {
                            key: key(
                                system,
                                Variant::Fitted,
                                &features,
                                &spec,
                                *scheme,
                                *scheme,
                                pre,
                                training.traj.len(),
                            ),
                            training,
                            tests,
                            model: Model::Fit {
                                spec: spec.clone(),
                                opts: fit_options(cfg, pre),
                            },
                        });
                    }
                }
            }
        }
    }
    let mut cells = run_jobs(&jobs, cfg)?;
    mark_best(&mut cells, |k| {
        (
            k.system.clone(),
            k.scheme_train,
            k.preconditioned,
            k.features.clone(),
        )
    });
    Ok(result(cfg, cells))
}

/// Best fitted model per training scheme, evaluated on test data of every
/// scheme. Uses `cfg.chosen` when given, otherwise runs the grid search.
pub fn run_cross_validation(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let system = &cfg.systems[0];
    let bias = cfg.bias[0];
    let pre = cfg.preconditioning[0];
    let chosen: Vec<(Scheme, usize, usize)> = match &cfg.chosen {
        Some(c) => c.iter().map(|c| (c.scheme, c.degree, c.lags)).collect(),
        None => {
            let mut grid_cfg = cfg.clone();
            grid_cfg.experiment = Experiment::Grid;
            grid_cfg.systems = vec![system.clone()];
            grid_cfg.bias = vec![bias];
            grid_cfg.preconditioning = vec![pre];
            grid_cfg.feature_sets = vec![FeatureSet::Polynomial];
            let grid = run_grid_search(&grid_cfg)?;
            cfg.schemes
                .iter()
                .map(|&s| {
                    grid.best()
                        .find(|c| c.key.scheme_train == s)
                        .map(|c| (s, c.key.degree, c.key.lags))
                        .ok_or_else(|| {
                            NvarError::InvalidParameter(format!(
                                "every grid cell for {s} failed to fit"
                            ))
                        })
                })
                .collect::<Result<_>>()?
        }
    };
    let mut trainings = Vec::new();
    let mut tests = Vec::new();
    for &scheme in &cfg.schemes {
        trainings.push(Training::new(training_run(
            cfg,
            system,
            scheme,
            cfg.train_mtu,
        )?)?);
        tests.push(test_run(cfg, system, scheme)?);
    }
    let fitted: Vec<_> = chosen
        .par_iter()
        .map(|&(scheme, degree, lags)| -> Result<_> {
            let i = cfg
                .schemes
                .iter()
                .position(|&s| s == scheme)
                .ok_or_else(|| {
                    NvarError::InvalidParameter(format!("chosen scheme {scheme} is not in schemes"))
                })?;
            let mut spec = FeatureSpec::polynomial(degree, lags);
            spec.include_bias = bias;
            let model = Model::Fit {
                spec: spec.clone(),
                opts: fit_options(cfg, pre),
            };
            Ok((i, spec, obtain_readout(&trainings[i], &model)?))
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for (i, spec, readout) in &fitted {
        let train_scheme = cfg.schemes[*i];
        let training = &trainings[*i];
        for (j, &test_scheme) in cfg.schemes.iter().enumerate() {
            let outcome = match readout {
                Ok(r) => CellOutcome::Evaluated {
                    distribution: evaluate_readout(
                        r,
                        &tests[j],
                        &training.clim,
                        cfg.epsilon,
                        cfg.magnitude_bound,
                    )?,
                    rank: match r.provenance {
                        Provenance::Fitted { rank, .. } => Some(rank),
                        Provenance::Derived { .. } => None,
                    },
                },
                Err(f) => CellOutcome::FitFailure { failure: f.clone() },
            };
            cells.push(Cell {
                key: key(
                    system,
                    Variant::Fitted,
                    "poly",
                    spec,
                    train_scheme,
                    test_scheme,
                    pre,
                    training.traj.len(),
                ),
                outcome,
                best: false,
            });
        }
    }
    Ok(result(cfg, cells))
}

/// Derived Euler readout and fitted readouts with and without the bias
/// feature, per system.
pub fn run_bias_ablation(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let scheme = cfg.schemes[0];
    let degree = cfg.grid.degrees[0];
    let lags = cfg.grid.lags[0];
    let mut data = Vec::new();
    for system in &cfg.systems {
        let training = Training::new(training_run(cfg, system, scheme, cfg.train_mtu)?)?;
        let tests = test_run(cfg, system, scheme)?;
        data.push((system, training, tests));
    }
    let mut jobs = Vec::new();
    for (system, training, tests) in &data {
        if scheme == Scheme::Euler {
            let spec = FeatureSpec::polynomial(2, 0);
            jobs.push(Job {
                key: key(
                    system,
                    Variant::Derived,
                    "poly",
                    &spec,
                    scheme,
                    scheme,
                    false,
                    0,
                ),
                training,
                tests,
                model: Model::Derived { spec },
            });
        }
        for &bias in &cfg.bias {
            let mut spec = FeatureSpec::polynomial(degree, lags);
            spec.include_bias = bias;
            for &pre in &cfg.preconditioning {
                jobs.push(Job {
                    key: key(
                        system,
                        Variant::Fitted,
                        "poly",
                        &spec,
                        scheme,
                        scheme,
                        pre,
                        training.traj.len(),
                    ),
                    training,
                    tests,
                    model: Model::Fit {
                        spec: spec.clone(),
                        opts: fit_options(cfg, pre),
                    },
                });
            }
        }
    }
    Ok(result(cfg, run_jobs(&jobs, cfg)?))
}

/// Training-noise magnitude against training length. Each divisor keeps the
/// leading `1 / divisor` of one long run.
pub fn run_noise_length_sweep(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let system = &cfg.systems[0];
    let scheme = cfg.schemes[0];
    let full = training_run(cfg, system, scheme, cfg.train_mtu)?;
    let tests = test_run(cfg, system, scheme)?;
    let mut spec = FeatureSpec::polynomial(cfg.grid.degrees[0], cfg.grid.lags[0]);
    spec.include_bias = cfg.bias[0];
    let pre = cfg.preconditioning[0];
    let mut trainings = Vec::new();
    for &divisor in &cfg.divisors {
        let cols = (full.len() - 1) / divisor + 1;
        let prefix = full.slice(0, cols);
        for &noise in &cfg.noise_levels {
            let seed = sub_seed(cfg.seed, &format!("noise/{noise:e}/{divisor}"));
            trainings.push((
                divisor,
                noise,
                Training::new(add_noise(&prefix, noise, seed)?)?,
            ));
        }
    }
    let jobs: Vec<Job> = trainings
        .iter()
        .map(|(divisor, noise, training)| {
            let mut k = key(
                system,
                Variant::Fitted,
                "poly",
                &spec,
                scheme,
                scheme,
                pre,
                training.traj.len(),
            );
            k.noise = *noise;
            k.divisor = *divisor;
            Job {
                key: k,
                training,
                tests: &tests,
                model: Model::Fit {
                    spec: spec.clone(),
                    opts: fit_options(cfg, pre),
                },
            }
        })
        .collect();
    Ok(result(cfg, run_jobs(&jobs, cfg)?))
}

/// Number of base steps needed for `features` MTU of training at stride
/// `skip + 1`, rounded up to whole stored samples.
pub fn skip_training_steps(features: usize, h: f64, skip: usize) -> usize {
    let dt = h * (skip + 1) as f64;
    let samples = (features as f64 / dt - 1e-9).ceil() as usize;
    samples * (skip + 1)
}

/// Emulators of subsampled data, trained with one MTU per feature.
pub fn run_skip_study(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let system = &cfg.systems[0];
    let scheme = cfg.schemes[0];
    let bias = cfg.bias[0];
    let specs = cfg.feature_specs(FeatureSet::Polynomial, bias, system.dimension());
    if specs.is_empty() {
        return Err(NvarError::InvalidParameter(
            "no grid cell within max_features".into(),
        ));
    }
    let max_steps = cfg
        .skips
        .iter()
        .flat_map(|&s| {
            specs.iter().map(move |spec| {
                skip_training_steps(
                    crate::features::feature_count(spec, system.dimension()),
                    cfg.h,
                    s,
                )
            })
        })
        .max()
        .expect("non-empty grid");
    let base = training_run(cfg, system, scheme, max_steps as f64 * cfg.h)?;
    let tests0 = test_run(cfg, system, scheme)?;
    let mut data = Vec::new();
    for &skip in &cfg.skips {
        let tests: Vec<Trajectory> = tests0.iter().map(|t| subsample(t, skip)).collect();
        let mut trainings = Vec::new();
        for spec in &specs {
            let f = crate::features::feature_count(spec, system.dimension());
            let steps = skip_training_steps(f, cfg.h, skip);
            trainings.push(Training::new(subsample(&base.slice(0, steps + 1), skip))?);
        }
        data.push((skip, tests, trainings));
    }
    let mut jobs = Vec::new();
    for (skip, tests, trainings) in &data {
        for (spec, training) in specs.iter().zip(trainings) {
            for &pre in &cfg.preconditioning {
                let mut k = key(
                    system,
                    Variant::Fitted,
                    "poly",
                    spec,
                    scheme,
                    scheme,
                    pre,
                    training.traj.len(),
                );
                k.skip = *skip;
                jobs.push(Job {
                    key: k,
                    training,
                    tests,
                    model: Model::Fit {
                        spec: spec.clone(),
                        opts: fit_options(cfg, pre),
                    },
                });
            }
        }
    }
    let mut cells = run_jobs(&jobs, cfg)?;
    mark_best(&mut cells, |k| (k.skip, k.preconditioned));
    Ok(result(cfg, cells))
}

/// Polynomial against special-function features per scheme, with attractor
/// dumps for the preconditioned fits.
pub fn run_colpitts_study(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let system = &cfg.systems[0];
    let degree = cfg.grid.degrees[0];
    let lags = cfg.grid.lags[0];
    let bias = cfg.bias[0];
    let mut data = Vec::new();
    for &scheme in &cfg.schemes {
        let training = Training::new(training_run(cfg, system, scheme, cfg.train_mtu)?)?;
        let tests = test_run(cfg, system, scheme)?;
        data.push((scheme, training, tests));
    }
    let mut jobs = Vec::new();
    for (scheme, training, tests) in &data {
        for &set in &cfg.feature_sets {
            let mut spec = FeatureSpec::polynomial(degree, lags);
            spec.include_bias = bias;
            if set == FeatureSet::Special {
                spec.special_functions = cfg.special_functions.clone();
                spec.replace_polynomials = true;
            }
            let features = features_name(cfg, set);
            for &pre in &cfg.preconditioning {
                jobs.push(Job {
                    key: key(
                        system,
                        Variant::Fitted,
                        &features,
                        &spec,
                        *scheme,
                        *scheme,
                        pre,
                        training.traj.len(),
                    ),
                    training,
                    tests,
                    model: Model::Fit {
                        spec: spec.clone(),
                        opts: fit_options(cfg, pre),
                    },
                });
            }
        }
    }
    let cells = run_jobs(&jobs, cfg)?;
    let mut attractors = Vec::new();
    if cfg.attractor_mtu > 0.0 {
        for job in jobs.iter().filter(|j| j.key.preconditioned) {
            let Ok(readout) = obtain_readout(job.training, &job.model)? else {
                continue;
            };
            attractors.push(attractor_dump(cfg, &job.key, &readout, &job.tests[0])?);
        }
    }
    let mut out = result(cfg, cells);
    out.attractors = attractors;
    Ok(out)
}

fn attractor_dump(
    cfg: &ExperimentConfig,
    key: &CellKey,
    readout: &Readout,
    start: &Trajectory,
) -> Result<AttractorDump> {
    let wl = readout.index.window_len();
    let steps = (cfg.attractor_mtu / start.dt()).round() as usize;
    let warmup: Vec<Vec<f64>> = (0..wl).map(|k| start.column(k).to_vec()).collect();
    let prediction = rollout(
        readout,
        &warmup,
        steps,
        start.meta.clone(),
        cfg.magnitude_bound,
    )?
    .trajectory;
    let meta = &start.meta;
    let stride = meta.skip + 1;
    let base_steps = (wl + steps - 1) * stride;
    let truth = generate_trajectory(
        &meta.system,
        meta.scheme,
        start.column(0),
        meta.h,
        base_steps as f64 * meta.h,
        0.0,
    )?;
    let mut truth = subsample(&truth, meta.skip);
    truth.meta.t0 = meta.t0;
    Ok(AttractorDump {
        name: format!("{}-{}-{}", key.system, key.scheme_train, key.features),
        truth,
        prediction,
    })
}

/// Dispatches on `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<GridResult> {
    match cfg.experiment {
        Experiment::Grid => run_grid_search(cfg),
        Experiment::Crossval => run_cross_validation(cfg),
        Experiment::Bias => run_bias_ablation(cfg),
        Experiment::Noise => run_noise_length_sweep(cfg),
        Experiment::Skip => run_skip_study(cfg),
        Experiment::Colpitts => run_colpitts_study(cfg),
    }
}
