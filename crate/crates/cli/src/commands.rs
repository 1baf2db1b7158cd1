use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nvar::emulate::{rollout_against, DEFAULT_MAGNITUDE_BOUND};
use nvar::experiments::{
    default_normalized_l63, evaluate_readout, run_experiment, sub_seed, CellOutcome, Experiment,
    ExperimentConfig,
};
use nvar::features::SpecialFunction;
use nvar::integrate::{
    add_noise, generate_trajectory, sample_test_segments, subsample, DEFAULT_SPINUP_MTU,
};
use nvar::io;
use nvar::metrics::{climatology, vpt, Climatology, Vpt, DEFAULT_EPSILON};
use nvar::readout::{derive_w_euler, fit_trajectory, Provenance, Solver};
use nvar::{
    FeatureIndex, FeatureSpec, FitOptions, NvarError, Readout, Scheme, SystemSpec, Trajectory,
};

use crate::manifest::{manifest_path, ManifestBuilder};
use crate::settings::{self, ConfigFile};

/// Exit code for a recorded fit failure, distinct from general errors.
pub const FIT_FAILURE_EXIT: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SystemName {
    L63,
    L96,
    Colpitts,
    L63Norm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSettings {
    pub system: SystemName,
    /// L96 dimension.
    pub n: usize,
    /// L96 forcing.
    pub forcing: f64,
    pub scheme: Scheme,
    pub h: f64,
    pub length: f64,
    pub spinup: f64,
    pub skip: usize,
    pub noise: f64,
    pub seed: u64,
    pub test_count: usize,
    pub test_length: f64,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings {
            system: SystemName::L63,
            n: 6,
            forcing: 8.0,
            scheme: Scheme::Euler,
            h: 0.01,
            length: 400.0,
            spinup: DEFAULT_SPINUP_MTU,
            skip: 0,
            noise: 0.0,
            seed: 20220101,
            test_count: 0,
            test_length: 25.0,
        }
    }
}

impl GenerateSettings {
    pub fn system_spec(&self) -> SystemSpec {
        match self.system {
            SystemName::L63 => SystemSpec::lorenz63(),
            SystemName::L96 => SystemSpec::L96 {
                n: self.n,
                forcing: self.forcing,
            },
            SystemName::Colpitts => SystemSpec::colpitts(),
            SystemName::L63Norm => default_normalized_l63(),
        }
    }
}

#[derive(Debug, Default, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub system: Option<SystemName>,
    /// Lorenz 96 dimension.
    #[arg(long)]
    pub n: Option<usize>,
    /// Lorenz 96 forcing.
    #[arg(long)]
    pub f: Option<f64>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub h: Option<f64>,
    /// Stored length in MTU, after the spinup.
    #[arg(long)]
    pub length: Option<f64>,
    #[arg(long)]
    pub spinup: Option<f64>,
    #[arg(long)]
    pub skip: Option<usize>,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write this many test segments.
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub test_length: Option<f64>,
    /// Trajectory CSV; defaults to `<output dir>/train.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test segment directory; defaults to `<output dir>/test`.
    #[arg(long)]
    pub test_dir: Option<PathBuf>,
}

fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn generate(args: GenerateArgs, out_dir_flag: Option<&Path>) -> Result<()> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let out_dir = settings::output_dir(out_dir_flag, &file, ".");
    let mut s: GenerateSettings =
        settings::resolve(&GenerateSettings::default(), file.settings, &[])?;
    apply(&mut s.system, args.system);
    apply(&mut s.n, args.n);
    apply(&mut s.forcing, args.f);
    apply(&mut s.scheme, args.scheme);
    apply(&mut s.h, args.h);
    apply(&mut s.length, args.length);
    apply(&mut s.spinup, args.spinup);
    apply(&mut s.skip, args.skip);
    apply(&mut s.noise, args.noise);
    apply(&mut s.seed, args.seed);
    apply(&mut s.test_count, args.test_count);
    apply(&mut s.test_length, args.test_length);

    let mut manifest = ManifestBuilder::new("generate");
    let system = s.system_spec();
    let noise_seed = sub_seed(s.seed, "noise");
    manifest.seed("seed", s.seed);
    manifest.seed("noise", noise_seed);

    let traj = generate_trajectory(
        &system,
        s.scheme,
        &system.default_initial_state(),
        s.h,
        s.length,
        s.spinup,
    )?;
    let traj = add_noise(&subsample(&traj, s.skip), s.noise, noise_seed)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("train.csv"));
    io::write_trajectory(&out, &traj)?;
    manifest.artifact(out.clone());
    manifest.artifact(io::sidecar_path(&out));

    if s.test_count > 0 {
        let test_seed = sub_seed(s.seed, "test");
        manifest.seed("test", test_seed);
        let segments = sample_test_segments(
            &system,
            s.scheme,
            s.h,
            s.test_count,
            s.test_length,
            test_seed,
        )?;
        let segments: Vec<Trajectory> = segments.iter().map(|t| subsample(t, s.skip)).collect();
        let dir = args.test_dir.unwrap_or_else(|| out_dir.join("test"));
        manifest.artifacts(io::write_segments(&dir, &segments)?);
    }
    log::info!("wrote {} columns to {}", traj.len(), out.display());
    manifest.finish(
        &GenerateRecord {
            settings: &s,
            system: &system,
        },
        &manifest_path(&out),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct GenerateRecord<'a> {
    settings: &'a GenerateSettings,
    system: &'a SystemSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub degree: usize,
    pub lags: usize,
    pub bias: bool,
    pub special_functions: Vec<SpecialFunction>,
    pub replace_polynomials: bool,
    pub alpha: f64,
    pub preconditioned: bool,
    pub solver: Solver,
    /// Build the analytic Euler readout instead of fitting.
    pub derive_euler: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            degree: 2,
            lags: 0,
            bias: true,
            special_functions: Vec::new(),
            replace_polynomials: false,
            alpha: 0.0,
            preconditioned: true,
            solver: Solver::Cholesky,
            derive_euler: false,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Training trajectory CSV (with its metadata sidecar).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Maximum polynomial degree.
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of time lags.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub no_bias: bool,
    /// Add `exp(c * x_i)` features with coefficient `c`; repeatable.
    #[arg(long = "exp", allow_hyphen_values = true)]
    pub exp: Vec<f64>,
    /// Variables the exp features apply to; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub exp_vars: Option<Vec<usize>>,
    /// Drop monomials of degree two and above in favour of the special features.
    #[arg(long)]
    pub replace_polynomials: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub no_precondition: bool,
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    /// Derive the Euler readout from the data's metadata instead of fitting.
    #[arg(long)]
    pub derive_euler: bool,
    /// Readout JSON; defaults to `<output dir>/readout.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SolverArg {
    Cholesky,
    Svd,
}

impl From<SolverArg> for Solver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Cholesky => Solver::Cholesky,
            SolverArg::Svd => Solver::Svd,
        }
    }
}

/// Machine-readable record written when the readout solve fails.
#[derive(Debug, Serialize, Deserialize)]
pub struct FailureRecord {
    pub status: String,
    pub reason: String,
    pub data: PathBuf,
    pub feature_count: usize,
    pub settings: TrainSettings,
}

fn read_meta(data: &Path) -> Result<nvar::TrajectoryMeta> {
    let path = io::sidecar_path(data);
    let bytes =
        fs::read(&path).with_context(|| format!("cannot read metadata {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("cannot parse metadata {}", path.display()))
}

/// Returns the process exit code.
pub fn train(args: TrainArgs, out_dir_flag: Option<&Path>) -> Result<i32> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let out_dir = settings::output_dir(out_dir_flag, &file, ".");
    let mut s: TrainSettings = settings::resolve(&TrainSettings::default(), file.settings, &[])?;
    apply(&mut s.degree, args.p);
    apply(&mut s.lags, args.t);
    apply(&mut s.alpha, args.alpha);
    apply(&mut s.solver, args.solver.map(Solver::from));
    s.bias &= !args.no_bias;
    s.preconditioned &= !args.no_precondition;
    s.replace_polynomials |= args.replace_polynomials;
    s.derive_euler |= args.derive_euler;

    let mut manifest = ManifestBuilder::new("train");
    let meta = read_meta(&args.data)?;
    let dim = meta.system.dimension();
    let all_vars: Vec<usize> = (0..dim).collect();
    for c in &args.exp {
        s.special_functions.push(SpecialFunction::exp(
            *c,
            args.exp_vars.clone().unwrap_or_else(|| all_vars.clone()),
        ));
    }
    let spec = FeatureSpec {
        degree: s.degree,
        lags: s.lags,
        include_bias: s.bias,
        special_functions: s.special_functions.clone(),
        replace_polynomials: s.replace_polynomials,
    };
    let index = FeatureIndex::enumerate(&spec, dim)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("readout.json"));

    let readout = if s.derive_euler {
        if meta.scheme != Scheme::Euler {
            log::warn!("deriving the Euler readout for {} data", meta.scheme);
        }
        let dt = meta.h * (meta.skip + 1) as f64;
        derive_w_euler(&meta.system, dt, &index)?
    } else {
        let traj = io::read_trajectory(&args.data)?;
        let opts = FitOptions {
            alpha: s.alpha,
            preconditioned: s.preconditioned,
            solver: s.solver,
        };
        match fit_trajectory(&traj, &index, &opts) {
            Ok(r) => r,
            Err(NvarError::Fit(failure)) => {
                let record = FailureRecord {
                    status: "fit_failure".into(),
                    reason: failure.reason,
                    data: args.data.clone(),
                    feature_count: index.len(),
                    settings: s,
                };
                let path = out.with_extension("failure.json");
                io::write_json(&path, &record)?;
                println!("{}", serde_json::to_string(&record)?);
                eprintln!(
                    "error: readout fit failed: {} (record in {})",
                    record.reason,
                    path.display()
                );
                return Ok(FIT_FAILURE_EXIT);
            }
            Err(e) => return Err(e.into()),
        }
    };
    io::write_readout(&out, &readout)?;
    manifest.artifact(out.clone());
    log::info!(
        "readout D={} F={} written to {}",
        readout.dim(),
        readout.feature_count(),
        out.display()
    );
    manifest.finish(
        &TrainRecord {
            data: &args.data,
            settings: &s,
        },
        &manifest_path(&out),
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    data: &'a Path,
    settings: &'a TrainSettings,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub readout: PathBuf,
    /// Directory of `segment-NNNN.csv` test files.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Trajectory whose climatology normalizes the error; defaults to the
    /// pooled test segments.
    #[arg(long)]
    pub climatology: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAGNITUDE_BOUND)]
    pub magnitude_bound: f64,
    /// VPT CSV; defaults to `<output dir>/vpt.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write each predicted trajectory into this directory.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

/// Model time between consecutive readout applications.
fn readout_dt(readout: &Readout) -> Option<f64> {
    match &readout.provenance {
        Provenance::Fitted { training, .. } => training.as_ref().map(|m| m.h * (m.skip + 1) as f64),
        Provenance::Derived { h, .. } => Some(*h),
    }
}

fn check_compatible(readout: &Readout, name: &str, seg: &Trajectory) -> Result<()> {
    if seg.dim() != readout.dim() {
        bail!(
            "dimension mismatch: readout has {} variables, {name} has {}",
            readout.dim(),
            seg.dim()
        );
    }
    if let Some(dt) = readout_dt(readout) {
        let seg_dt = seg.meta.h * (seg.meta.skip + 1) as f64;
        if (dt - seg_dt).abs() > 1e-9 * dt.abs().max(seg_dt.abs()) {
            bail!(
                "time step mismatch: readout steps {dt} MTU, {name} is sampled every {seg_dt} MTU"
            );
        }
    }
    Ok(())
}

/// Population mean and standard deviation over all columns of all segments.
fn pooled_climatology(segments: &[Trajectory]) -> Climatology {
    let d = segments[0].dim();
    let n: usize = segments.iter().map(Trajectory::len).sum();
    let columns = || {
        segments
            .iter()
            .flat_map(|s| (0..s.len()).map(move |k| s.column(k)))
    };
    let mut means = vec![0.0; d];
    for col in columns() {
        means.iter_mut().zip(col).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for col in columns() {
        var.iter_mut()
            .zip(col)
            .zip(&means)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    let stds = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Climatology { means, stds }
}

/// Evaluates (and with `predictions`, also writes) rollouts over every test
/// segment.
pub fn evaluate(args: EvaluateArgs, out_dir_flag: Option<&Path>, command: &str) -> Result<()> {
    let out_dir = settings::output_dir(out_dir_flag, &ConfigFile::default(), ".");
    let mut manifest = ManifestBuilder::new(command);
    let readout = io::read_readout(&args.readout)
        .with_context(|| format!("cannot read readout {}", args.readout.display()))?;
    if !args.test.is_dir() {
        bail!("test directory {} does not exist", args.test.display());
    }
    let segments = io::read_segments(&args.test)?;
    for (i, seg) in segments.iter().enumerate() {
        check_compatible(
            &readout,
            &io::segment_path(Path::new(""), i).display().to_string(),
            seg,
        )?;
    }
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("vpt.csv"));
    let clim_source = match (&args.climatology, segments.is_empty()) {
        (Some(p), _) => p.display().to_string(),
        (None, false) => "test segments".to_string(),
        (None, true) => "none".to_string(),
    };
    let samples: Vec<Vpt> = if segments.is_empty() {
        Vec::new()
    } else {
        let clim = match &args.climatology {
            Some(p) => {
                let t = io::read_trajectory(p)?;
                if t.dim() != readout.dim() {
                    bail!(
                        "dimension mismatch: readout has {} variables, climatology data {} has {}",
                        readout.dim(),
                        p.display(),
                        t.dim()
                    );
                }
                climatology(&t)?
            }
            None => pooled_climatology(&segments),
        };
        match &args.predictions {
            Some(dir) => {
                let mut preds = Vec::with_capacity(segments.len());
                let mut samples = Vec::with_capacity(segments.len());
                for seg in &segments {
                    let r = rollout_against(&readout, seg, args.magnitude_bound)?;
                    samples.push(vpt(seg, &r.trajectory, &clim, args.epsilon)?);
                    preds.push(r.trajectory);
                }
                manifest.artifacts(io::write_segments(dir, &preds)?);
                samples
            }
            None => {
                evaluate_readout(
                    &readout,
                    &segments,
                    &clim,
                    args.epsilon,
                    args.magnitude_bound,
                )?
                .samples
            }
        }
    };
    io::atomic_write(&out, io::vpt_csv(&samples, args.epsilon).as_bytes())?;
    manifest.artifact(out.clone());
    if !samples.is_empty() {
        let dist = nvar::metrics::VptDistribution::new(samples.clone(), segments[0].duration());
        println!(
            "{} segments: median VPT {:.3} MTU (q1 {:.3}, q3 {:.3}), {} censored",
            dist.len(),
            dist.median,
            dist.q1,
            dist.q3,
            dist.censored_count
        );
    } else {
        println!("0 segments");
    }
    manifest.finish(
        &EvaluateRecord {
            readout: &args.readout,
            test: &args.test,
            epsilon: args.epsilon,
            climatology: clim_source,
            magnitude_bound: args.magnitude_bound,
        },
        &manifest_path(&out),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateRecord<'a> {
    readout: &'a Path,
    test: &'a Path,
    epsilon: f64,
    climatology: String,
    magnitude_bound: f64,
}

#[derive(Debug, clap::Args)]
pub struct ExperimentArgs {
    /// One of grid, crossval, bias, noise, skip, colpitts.
    pub name: Experiment,
    /// TOML file merged over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set test_count=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

/// Resolves an experiment configuration from defaults, file and overrides.
pub fn experiment_config(args: &ExperimentArgs, file: ConfigFile) -> Result<ExperimentConfig> {
    let defaults = ExperimentConfig::defaults(args.name);
    let mut cfg: ExperimentConfig = settings::resolve(&defaults, file.settings, &args.set)?;
    apply(&mut cfg.seed, args.seed);
    if cfg.experiment != args.name {
        bail!(
            "configuration is for experiment `{}`, but `{}` was requested",
            cfg.experiment,
            args.name
        );
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn experiment(args: ExperimentArgs, file: ConfigFile, out_dir: &Path) -> Result<()> {
    let cfg = experiment_config(&args, file)?;
    if args.dry_run {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    let mut manifest = ManifestBuilder::new("experiment");
    manifest.seed("seed", cfg.seed);
    let result = run_experiment(&cfg)?;
    let paths = io::write_results(out_dir, &result)?;
    let stem = out_dir.join(format!("{}-{}", result.experiment, result.config_hash));
    manifest.artifacts(paths);
    let failures = result
        .cells
        .iter()
        .filter(|c| c.outcome.is_failure())
        .count();
    println!(
        "{}: {} cells ({} fit failures), results in {}",
        result.experiment,
        result.cells.len(),
        failures,
        out_dir.display()
    );
    for c in result.best() {
        let k = &c.key;
        if let CellOutcome::Evaluated { distribution, .. } = &c.outcome {
            println!(
                "  best {} {} {}->{} p={} t={} skip={} pre={}: median VPT {:.2} MTU",
                k.system,
                k.features,
                k.scheme_train,
                k.scheme_test,
                k.degree,
                k.lags,
                k.skip,
                k.preconditioned,
                distribution.median
            );
        }
    }
    manifest.finish(&cfg, &stem.with_extension("manifest.json"))?;
    Ok(())
}
