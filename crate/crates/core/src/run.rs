//! End-to-end runs driven by a JSON [`RunConfig`]: load or simulate data,
//! fit with one engine, and write the density grid, CDF curves, parameter
//! output and a manifest to an output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::basis::DesignMap;
use crate::cavi::{run_cavi, sample_q, CaviSettings, VariationalReport};
use crate::data::{load_dataset, BasisOptions};
use crate::density::{padded_grid, quantile_unsorted, summarize_cdf, summarize_density};
use crate::diagnostics::{
    max_probit_gap, mc_random_measure_check, MeasureCheckReport, ProbitGap,
};
use crate::ecm::{run_ecm, EcmSettings};
use crate::error::{LsbpError, Result};
use crate::gibbs::{read_draws_csv, run_chain, thread_pool, write_draws_csv, ChainSettings};
use crate::model::{matrix_from_rows, matrix_to_rows, truncation_bound, Dataset, MixtureParams, ModelConfig};
use crate::rng::{purpose, RngStream};
use crate::synthetic::{generate_synthetic, SyntheticSpec};

pub const DENSITY_FILE: &str = "density_grid.csv";
pub const CDF_FILE: &str = "cdf_curves.csv";
pub const DRAWS_FILE: &str = "params.csv";
pub const STATE_FILE: &str = "state.json";
pub const PRIOR_CHECK_FILE: &str = "prior_check.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    Gibbs,
    Ecm,
    Cavi,
    PriorCheck,
}

impl std::str::FromStr for Engine {
    type Err = LsbpError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| LsbpError::Config(format!("unknown engine '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_x_column")]
        x_column: String,
        #[serde(default = "default_y_column")]
        y_column: String,
    },
    Synthetic(SyntheticSpec),
}

fn default_x_column() -> String {
    "x".into()
}

fn default_y_column() -> String {
    "y".into()
}

/// Prior hyperparameters; absent means and covariances default to zero and
/// the identity of the design dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub h: usize,
    pub mu_beta: Option<Vec<f64>>,
    pub sigma_beta: Option<Vec<Vec<f64>>>,
    pub mu_alpha: Option<Vec<f64>>,
    pub sigma_alpha: Option<Vec<Vec<f64>>>,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            h: 5,
            mu_beta: None,
            sigma_beta: None,
            mu_alpha: None,
            sigma_alpha: None,
            a_sigma: 0.1,
            b_sigma: 0.1,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, p: usize, r: usize) -> Result<ModelConfig> {
        let vec_or = |v: &Option<Vec<f64>>, d: usize| match v {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(d),
        };
        let mat_or = |m: &Option<Vec<Vec<f64>>>, d: usize, what: &str| match m {
            Some(m) => matrix_from_rows(m, what),
            None => Ok(DMatrix::identity(d, d)),
        };
        let cfg = ModelConfig::new(
            self.h,
            vec_or(&self.mu_beta, p),
            mat_or(&self.sigma_beta, p, "sigma_beta")?,
            vec_or(&self.mu_alpha, r),
            mat_or(&self.sigma_alpha, r, "sigma_alpha")?,
            self.a_sigma,
            self.b_sigma,
        )?;
        if cfg.p() != p || cfg.r() != r {
            return Err(LsbpError::Config(format!(
                "model priors have dimensions (P={}, R={}) but the basis gives (P={p}, R={r})",
                cfg.p(),
                cfg.r()
            )));
        }
        Ok(cfg)
    }

    fn explicit(cfg: &ModelConfig) -> Self {
        ModelSection {
            h: cfg.h,
            mu_beta: Some(cfg.mu_beta.iter().copied().collect()),
            sigma_beta: Some(matrix_to_rows(&cfg.sigma_beta)),
            mu_alpha: Some(cfg.mu_alpha.iter().copied().collect()),
            sigma_alpha: Some(matrix_to_rows(&cfg.sigma_alpha)),
            a_sigma: cfg.a_sigma,
            b_sigma: cfg.b_sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsSection {
    fn default() -> Self {
        GibbsSection {
            iterations: 30_000,
            burn_in: 5_000,
            thin: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub n_restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            n_restarts: 10,
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VbSection {
    pub n_q_samples: usize,
}

impl Default for VbSection {
    fn default() -> Self {
        VbSection { n_q_samples: 2000 }
    }
}

/// One grid axis: explicit `values`, or `n` points spanning the observed
/// range padded by `pad` times its width on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxisSpec {
    pub n: usize,
    pub pad: f64,
    pub values: Option<Vec<f64>>,
}

impl AxisSpec {
    pub fn points(n: usize) -> Self {
        AxisSpec {
            n,
            pad: 0.1,
            values: None,
        }
    }

    pub fn resolve(&self, observed: &[f64]) -> Result<Vec<f64>> {
        match &self.values {
            Some(v) if v.is_empty() => Err(LsbpError::Config("empty grid values".into())),
            Some(v) => Ok(v.clone()),
            None => padded_grid(observed, self.n, self.pad),
        }
    }
}

impl Default for AxisSpec {
    fn default() -> Self {
        AxisSpec::points(100)
    }
}

/// Default CDF thresholds when `y_star` is absent: these quantiles of the
/// observed response.
pub const DEFAULT_Y_STAR_QUANTILES: [f64; 4] = [0.05, 0.1, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x: AxisSpec,
    pub y: AxisSpec,
    pub y_star: Option<Vec<f64>>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            x: AxisSpec::points(100),
            y: AxisSpec::points(200),
            y_star: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorCheckSection {
    pub h_values: Vec<usize>,
    pub p0_mass: f64,
    pub n_measures: usize,
    pub psi: Vec<f64>,
    pub mu_alpha: Option<Vec<f64>>,
    pub sigma_alpha: Option<Vec<Vec<f64>>>,
}

impl Default for PriorCheckSection {
    fn default() -> Self {
        PriorCheckSection {
            h_values: vec![2, 5, 20],
            p0_mass: 0.5,
            n_measures: 10_000,
            psi: vec![1.0],
            mu_alpha: None,
            sigma_alpha: None,
        }
    }
}

/// Complete description of one run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub engine: Engine,
    pub data: DataSource,
    pub basis: BasisOptions,
    pub model: ModelSection,
    pub gibbs: GibbsSection,
    pub optim: OptimSection,
    pub vb: VbSection,
    pub grid: GridSection,
    pub prior_check: PriorCheckSection,
    pub seed: u64,
    /// Worker threads; absent means all cores, `1` is the serial reference.
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper()
    }
}

impl RunConfig {
    /// `H = 5`, a 5-column natural spline plus intercept for the log-odds,
    /// `μ_β = 0`, `Σ_β = I`, `μ_α = 0`, `Σ_α = I`, `a_σ = b_σ = 0.1`, and
    /// 30000 Gibbs sweeps with 5000 discarded, on a synthetic replica of
    /// 2312 observations.
    pub fn paper() -> Self {
        RunConfig {
            engine: Engine::Gibbs,
            data: DataSource::Synthetic(SyntheticSpec::replica(2312, 1)),
            basis: BasisOptions::default(),
            model: ModelSection::default(),
            gibbs: GibbsSection::default(),
            optim: OptimSection::default(),
            vb: VbSection::default(),
            grid: GridSection::default(),
            prior_check: PriorCheckSection::default(),
            seed: 1,
            threads: None,
            output_dir: PathBuf::from("lsbp-out"),
        }
    }

    /// Same model with short runs and coarse grids.
    pub fn quick() -> Self {
        RunConfig {
            data: DataSource::Synthetic(SyntheticSpec::replica(500, 1)),
            gibbs: GibbsSection {
                iterations: 2000,
                burn_in: 500,
                thin: 1,
            },
            optim: OptimSection {
                n_restarts: 3,
                tol: 1e-8,
                max_iter: 500,
            },
            vb: VbSection { n_q_samples: 500 },
            grid: GridSection {
                x: AxisSpec::points(40),
                y: AxisSpec::points(80),
                y_star: None,
            },
            prior_check: PriorCheckSection {
                n_measures: 2000,
                ..Default::default()
            },
            ..RunConfig::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "quick" => Ok(Self::quick()),
            other => Err(LsbpError::Config(format!(
                "unknown preset '{other}' (expected paper or quick)"
            ))),
        }
    }

    /// Parses `json` over `base`: objects merge key by key, anything else
    /// (including a tagged object whose tag changes) replaces the base value.
    pub fn from_json_over(base: &RunConfig, json: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(json)
            .map_err(|e| LsbpError::Config(format!("config is not valid JSON: {e}")))?;
        if !overlay.is_object() {
            return Err(LsbpError::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = serde_json::from_value(merged)
            .map_err(|e| LsbpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::from_json_over(&RunConfig::paper(), json)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LsbpError::Config(m));
        if self.model.h == 0 {
            return bad("model.h must be at least 1".into());
        }
        if self.basis.logit == crate::data::LogitKind::Spline && self.basis.num_basis == 0 {
            return bad("basis.num_basis must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        match self.engine {
            Engine::Gibbs => self.chain_settings().validate()?,
            Engine::Ecm => self.ecm_settings().validate()?,
            Engine::Cavi => {
                self.cavi_settings().validate()?;
                if self.vb.n_q_samples < 2 {
                    return bad("vb.n_q_samples must be at least 2".into());
                }
            }
            Engine::PriorCheck => {
                let pc = &self.prior_check;
                if pc.h_values.is_empty() || pc.h_values.iter().any(|&h| h < 2) {
                    return bad("prior_check.h_values must be nonempty and each at least 2".into());
                }
                if pc.psi.is_empty() {
                    return bad("prior_check.psi must be nonempty".into());
                }
            }
        }
        for (name, axis) in [("grid.x", &self.grid.x), ("grid.y", &self.grid.y)] {
            if axis.values.is_none() && axis.n < 2 {
                return bad(format!("{name}.n must be at least 2"));
            }
            if !(axis.pad >= 0.0) {
                return bad(format!("{name}.pad must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn chain_settings(&self) -> ChainSettings {
        ChainSettings {
            iterations: self.gibbs.iterations,
            burn_in: self.gibbs.burn_in,
            thin: self.gibbs.thin,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn ecm_settings(&self) -> EcmSettings {
        EcmSettings {
            n_restarts: self.optim.n_restarts,
            tol: self.optim.tol,
            max_iter: self.optim.max_iter,
            seed: self.seed,
            threads: self.threads,
        }
    }

    pub fn cavi_settings(&self) -> CaviSettings {
        CaviSettings {
            n_restarts: self.optim.n_restarts,
            tol: self.optim.tol,
            max_iter: self.optim.max_iter,
            seed: self.seed,
            threads: self.threads,
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    const TAGS: [&str; 2] = ["source", "kind"];
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let retagged = TAGS
                .iter()
                .any(|t| o.get(*t).is_some_and(|v| b.get(*t) != Some(v)));
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, o) => *slot = o,
    }
}

/// Builds the dataset a config describes.
pub fn prepare_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Csv {
            path,
            x_column,
            y_column,
        } => load_dataset(path, x_column, y_column, &config.basis),
        DataSource::Synthetic(spec) => generate_synthetic(spec)?.dataset(&config.basis),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_secs: f64,
    pub fit_secs: f64,
    pub summary_secs: f64,
    pub total_secs: f64,
}

/// Everything needed to reproduce or post-process a run. `timings` is the
/// only field that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub engine: Engine,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: RunConfig,
    pub design_map: Option<DesignMap>,
    pub n: usize,
    pub outputs: Vec<String>,
    pub engine_summary: Value,
    pub timings: Timings,
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorCheckReport {
    pub measures: Vec<MeasureCheckReport>,
    pub probit: ProbitGap,
    pub probit_tolerance: f64,
    pub probit_pass: bool,
    /// `(H, bound)` for one unit at the simulated `μ₁ν`.
    pub truncation_bounds: Vec<(usize, f64)>,
}

pub const PROBIT_TOLERANCE: f64 = 0.01;

/// Files written so far; removed again if the run fails.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs the configured engine and writes its artifacts. On failure every
/// file this run created is removed.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let mut out = Outputs {
        dir: config.output_dir.clone(),
        written: Vec::new(),
    };
    let res = thread_pool(config.threads)?.install(|| execute(config, &mut out));
    match res {
        Ok(manifest) => Ok(RunOutcome {
            output_dir: config.output_dir.clone(),
            manifest,
        }),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn y_star_values(config: &RunConfig, y_raw: &[f64]) -> Vec<f64> {
    match &config.grid.y_star {
        Some(v) => v.clone(),
        None => {
            let mut v = y_raw.to_vec();
            DEFAULT_Y_STAR_QUANTILES
                .iter()
                .map(|&p| quantile_unsorted(&mut v, p))
                .collect()
        }
    }
}

fn execute(config: &RunConfig, out: &mut Outputs) -> Result<Manifest> {
    let start = Instant::now();
    let mut timings = Timings::default();
    if config.engine == Engine::PriorCheck {
        let report = prior_check(config)?;
        timings.fit_secs = start.elapsed().as_secs_f64();
        let all_pass = report.measures.iter().all(|m| m.all_pass()) && report.probit_pass;
        let mut w = out.create(PRIOR_CHECK_FILE)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
        return finish(
            config,
            out,
            None,
            0,
            serde_json::json!({ "all_pass": all_pass }),
            timings,
            start,
        );
    }

    let data = prepare_dataset(config)?;
    let map = data
        .transform
        .clone()
        .ok_or_else(|| LsbpError::InvalidArgument("dataset has no design map".into()))?;
    let raw = data.raw.clone().expect("built from raw columns");
    let model = config.model.resolve(data.p(), data.r())?;
    let mut resolved = config.clone();
    resolved.model = ModelSection::explicit(&model);
    let x_grid = config.grid.x.resolve(&raw.x)?;
    let y_grid = config.grid.y.resolve(&raw.y)?;
    let y_star = y_star_values(config, &raw.y);
    resolved.grid.y_star = Some(y_star.clone());
    timings.data_secs = start.elapsed().as_secs_f64();

    let t_fit = Instant::now();
    let (draws, summary) = match config.engine {
        Engine::Gibbs => {
            let chain = run_chain(&data, &model, &config.chain_settings(), None)?;
            write_draws_csv(&chain.draws, data.r(), out.create(DRAWS_FILE)?)?;
            let s = serde_json::json!({
                "retained_draws": chain.draws.len(),
                "diagnostics": chain.diagnostics,
            });
            (chain.draws, s)
        }
        Engine::Ecm => {
            let fit = run_ecm(&data, &model, &config.ecm_settings())?;
            let mut w = out.create(STATE_FILE)?;
            serde_json::to_writer_pretty(&mut w, &fit.report())?;
            w.flush()?;
            let s = serde_json::json!({
                "best_restart": fit.best_restart,
                "final_log_posterior": fit.best.log_posterior_trace.last(),
                "iterations": fit.best.log_posterior_trace.len() - 1,
                "converged": fit.best.converged,
            });
            (vec![fit.best.params], s)
        }
        Engine::Cavi => {
            let fit = run_cavi(&data, &model, &config.cavi_settings())?;
            let mut w = out.create(STATE_FILE)?;
            serde_json::to_writer_pretty(&mut w, &fit.report())?;
            w.flush()?;
            let draws = sample_q(&fit.best, config.vb.n_q_samples, &summary_stream(config.seed))?;
            let s = serde_json::json!({
                "best_restart": fit.best_restart,
                "final_elbo": fit.best.elbo_trace.last(),
                "iterations": fit.best.elbo_trace.len() - 1,
                "converged": fit.best.converged,
            });
            (draws, s)
        }
        Engine::PriorCheck => unreachable!("handled above"),
    };
    timings.fit_secs = t_fit.elapsed().as_secs_f64();

    let t_sum = Instant::now();
    let grid = summarize_density(&draws, &x_grid, &y_grid, &map)?;
    grid.write_csv(out.create(DENSITY_FILE)?)?;
    let cdf = summarize_cdf(&draws, &x_grid, &y_star, &map)?;
    cdf.write_csv(out.create(CDF_FILE)?)?;
    timings.summary_secs = t_sum.elapsed().as_secs_f64();

    finish(&resolved, out, Some(map), data.n(), summary, timings, start)
}

fn summary_stream(seed: u64) -> RngStream {
    RngStream::new(seed).substream(&[purpose::SUMMARY])
}

fn finish(
    config: &RunConfig,
    out: &mut Outputs,
    design_map: Option<DesignMap>,
    n: usize,
    engine_summary: Value,
    mut timings: Timings,
    start: Instant,
) -> Result<Manifest> {
    let mut outputs = out.names();
    outputs.push(MANIFEST_FILE.to_string());
    timings.total_secs = start.elapsed().as_secs_f64();
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        engine: config.engine,
        seed: config.seed,
        threads: config.threads,
        config: config.clone(),
        design_map,
        n,
        outputs,
        engine_summary,
        timings,
    };
    let mut w = out.create(MANIFEST_FILE)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(manifest)
}

/// Random-measure simulations for each configured `H` plus the probit gap.
pub fn prior_check(config: &RunConfig) -> Result<PriorCheckReport> {
    let pc = &config.prior_check;
    let r = pc.psi.len();
    let mu = pc
        .mu_alpha
        .as_ref()
        .map_or_else(|| DVector::zeros(r), |v| DVector::from_vec(v.clone()));
    let sigma = match &pc.sigma_alpha {
        Some(m) => matrix_from_rows(m, "prior_check.sigma_alpha")?,
        None => DMatrix::identity(r, r),
    };
    let root = RngStream::new(config.seed);
    let measures = pc
        .h_values
        .iter()
        .map(|&h| {
            mc_random_measure_check(
                &pc.psi,
                &mu,
                &sigma,
                h,
                pc.p0_mass,
                pc.n_measures,
                &root.substream(&[purpose::PRIOR, h as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let probit = max_probit_gap(-8.0, 8.0, 100_000)?;
    let truncation_bounds = measures
        .iter()
        .map(|m| Ok((m.h, truncation_bound(&[m.moments.mu1], m.h)?)))
        .collect::<Result<_>>()?;
    Ok(PriorCheckReport {
        measures,
        probit_pass: probit.max_gap <= PROBIT_TOLERANCE,
        probit,
        probit_tolerance: PROBIT_TOLERANCE,
        truncation_bounds,
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let f = File::open(run_dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

#[derive(Deserialize)]
struct SavedPoint {
    params: MixtureParams,
}

/// Parameter draws a finished run summarizes: the retained chain, the mode,
/// or fresh draws from the saved variational factors (same stream as the run).
pub fn load_run_draws(run_dir: &Path, manifest: &Manifest) -> Result<Vec<MixtureParams>> {
    let open = |name: &str| File::open(run_dir.join(name)).map(BufReader::new);
    match manifest.engine {
        Engine::Gibbs => read_draws_csv(open(DRAWS_FILE)?),
        Engine::Ecm => {
            let s: SavedPoint = serde_json::from_reader(open(STATE_FILE)?)?;
            Ok(vec![s.params])
        }
        Engine::Cavi => {
            let rep: VariationalReport = serde_json::from_reader(open(STATE_FILE)?)?;
            sample_q(
                &rep.to_state()?,
                manifest.config.vb.n_q_samples,
                &summary_stream(manifest.seed),
            )
        }
        Engine::PriorCheck => Err(LsbpError::InvalidArgument(
            "prior-check runs have no parameter output".into(),
        )),
    }
}

/// Re-evaluates a finished run's density on new grids and writes the CSV.
pub fn export_grid(run_dir: &Path, x: &AxisSpec, y: &AxisSpec, out_path: &Path) -> Result<()> {
    let manifest = read_manifest(run_dir)?;
    let map = manifest
        .design_map
        .clone()
        .ok_or_else(|| LsbpError::InvalidArgument("run has no design map".into()))?;
    let draws = load_run_draws(run_dir, &manifest)?;
    // Observed ranges are recovered from the stored data source.
    let needs_data = x.values.is_none() || y.values.is_none();
    let (xs, ys) = if needs_data {
        let data = prepare_dataset(&manifest.config)?;
        let raw = data.raw.expect("built from raw columns");
        (x.resolve(&raw.x)?, y.resolve(&raw.y)?)
    } else {
        (x.resolve(&[])?, y.resolve(&[])?)
    };
    let grid = thread_pool(manifest.threads)?
        .install(|| summarize_density(&draws, &xs, &ys, &map))?;
    let path = out_path.to_path_buf();
    let res = File::create(&path)
        .map_err(LsbpError::from)
        .and_then(|f| grid.write_csv(BufWriter::new(f)));
    if res.is_err() {
        let _ = fs::remove_file(&path);
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let c = RunConfig::preset("paper").unwrap();
        assert_eq!(c.engine, Engine::Gibbs);
        assert_eq!(c.model.h, 5);
        assert_eq!(c.basis.num_basis, 5);
        assert_eq!((c.model.a_sigma, c.model.b_sigma), (0.1, 0.1));
        assert_eq!((c.gibbs.iterations, c.gibbs.burn_in), (30_000, 5_000));
        let m = c.model.resolve(2, 6).unwrap();
        assert_eq!(m.mu_beta, DVector::zeros(2));
        assert_eq!(m.sigma_beta, DMatrix::identity(2, 2));
        assert_eq!(m.mu_alpha, DVector::zeros(6));
        assert_eq!(m.sigma_alpha, DMatrix::identity(6, 6));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"engin": "ecm"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"gibbs": {"iters": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"source": "csv", "path": "a.csv", "sep": ";"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"source": "synthetic", "n": 5, "alpha": [], "beta": [[0,1]], "sigma2": [1], "predictor": {"kind": "uniform", "lo": 0, "hi": 1}, "seed": 1, "x": 2}}"#).is_err());
    }

    #[test]
    fn overlay_merges_and_retags() {
        let c = RunConfig::from_json_over(
            &RunConfig::quick(),
            r#"{"engine": "ecm", "gibbs": {"thin": 2}, "data": {"source": "csv", "path": "d.csv"}}"#,
        )
        .unwrap();
        assert_eq!(c.engine, Engine::Ecm);
        assert_eq!(c.gibbs.thin, 2);
        assert_eq!(c.gibbs.iterations, 2000);
        match c.data {
            DataSource::Csv { x_column, .. } => assert_eq!(x_column, "x"),
            _ => panic!("expected csv source"),
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = RunConfig::quick();
        let j = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&j).unwrap(), c);
    }

    #[test]
    fn engine_names() {
        assert_eq!("prior-check".parse::<Engine>().unwrap(), Engine::PriorCheck);
        assert_eq!("cavi".parse::<Engine>().unwrap(), Engine::Cavi);
        assert!("vb".parse::<Engine>().is_err());
    }

    #[test]
    fn mismatched_prior_dimension_is_config_error() {
        let s = ModelSection {
            mu_alpha: Some(vec![0.0; 3]),
            sigma_alpha: Some(matrix_to_rows(&DMatrix::identity(3, 3))),
            ..Default::default()
        };
        assert!(matches!(s.resolve(2, 6), Err(LsbpError::Config(_))));
    }

    #[test]
    fn failed_run_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig::quick();
        c.engine = Engine::Ecm;
        c.output_dir = dir.path().to_path_buf();
        c.data = DataSource::Csv {
            path: dir.path().join("missing.csv"),
            x_column: "x".into(),
            y_column: "y".into(),
        };
        assert!(run(&c).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        // fails after the state file has been written
        c.data = DataSource::Synthetic(SyntheticSpec::replica(120, 2));
        c.optim.n_restarts = 1;
        c.optim.max_iter = 5;
        c.grid.x.values = Some(vec![f64::NAN]);
        assert!(run(&c).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

        c.grid.x.values = None;
        let ok = run(&c).unwrap();
        let mut names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, [CDF_FILE, DENSITY_FILE, MANIFEST_FILE, STATE_FILE]);
        assert_eq!(ok.manifest.outputs.len(), 4);
    }
}
