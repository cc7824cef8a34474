//! Parameter sweeps over `(f, p, replicate)` and their tabular output.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::fmt_f64;
use crate::fitting::{aggregate_beta, exp_tail_fit, TailFit};
use crate::flow::{gd_run, Objective, RunOptions, StopRule, TerminatedBy};
use crate::minimizers::{balanced_minimizer, epsilon_init, gaussian_init, BalancedMinimizer};
use crate::model::{check_p, scale_to_unscaled, DataMatrix, Dims, DropoutSpec, Variant};
use crate::rates::{omega_numeric, optimal_p, rate_report};
use crate::{Error, Result};

/// How each run's starting weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitScheme {
    /// i.i.d. `Normal(0, σ²)` entries.
    Gaussian(f64),
    /// `Normal(0, ε²)` perturbation of a balanced minimizer of the dropout objective.
    Epsilon(f64),
}

impl InitScheme {
    pub fn kind(&self) -> &'static str {
        match self {
            InitScheme::Gaussian(_) => "gaussian",
            InitScheme::Epsilon(_) => "epsilon",
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            InitScheme::Gaussian(s) | InitScheme::Epsilon(s) => s,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InitScheme::Gaussian(s) => s > 0.0 && s.is_finite(),
            InitScheme::Epsilon(e) => e >= 0.0 && e.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid init scale in {self}")))
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind(), self.scale())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "init must look like gaussian:S or epsilon:E, got {s:?}"
            ))
        })?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad init scale {value:?}")))?;
        let scheme = match kind.trim() {
            "gaussian" => InitScheme::Gaussian(value),
            "epsilon" => InitScheme::Epsilon(value),
            other => return Err(Error::Config(format!("unknown init kind {other:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl TryFrom<String> for InitScheme {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitScheme> for String {
    fn from(s: InitScheme) -> String {
        s.to_string()
    }
}

fn default_eta() -> f64 {
    1e-2
}

fn default_gamma() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variant: Variant,
    pub f_list: Vec<usize>,
    pub p_list: Vec<f64>,
    pub replicates: usize,
    pub init: InitScheme,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub stop: StopRule,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub master_seed: u64,
    /// Recording stride; absent means the stop rule's default.
    #[serde(default)]
    pub stride: Option<u64>,
    #[serde(default = "default_true", alias = "normalize_Y")]
    pub normalize_y: bool,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.f_list.is_empty() || self.p_list.is_empty() {
            return bad("f_list and p_list must be non-empty".into());
        }
        if self.f_list.contains(&0) {
            return bad("hidden widths must be ≥ 1".into());
        }
        for &p in &self.p_list {
            check_p(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.replicates == 0 {
            return bad("replicates must be ≥ 1".into());
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.stride == Some(0) {
            return bad("stride must be ≥ 1".into());
        }
        self.stop
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.init.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the configured normalization to whitened data.
    pub fn prepare(&self, y: &DataMatrix) -> Result<DataMatrix> {
        if self.normalize_y {
            y.normalized()
        } else {
            Ok(y.clone())
        }
    }
}

const RUN_STREAM: u64 = 0;
const CELL_STREAM: u64 = 1;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &x| {
        splitmix64(acc ^ splitmix64(x))
    })
}

/// Seed of one run, a pure function of its coordinates.
pub fn run_seed(master: u64, f_idx: usize, p_idx: usize, replicate: usize) -> u64 {
    mix(
        master,
        &[RUN_STREAM, f_idx as u64, p_idx as u64, replicate as u64],
    )
}

/// Seed for the balanced minimizer shared by the runs of one cell.
pub fn cell_seed(master: u64, f_idx: usize, p_idx: usize) -> u64 {
    mix(master, &[CELL_STREAM, f_idx as u64, p_idx as u64])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Converged, but the tail had too few usable points for a fit.
    FitSkipped,
    /// Hit the iteration cap; no fit attempted.
    TMax,
    Diverged,
    Error,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::FitSkipped => "fit_skipped",
            RunStatus::TMax => "t_max",
            RunStatus::Diverged => "diverged",
            RunStatus::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub f: usize,
    pub p: f64,
    pub variant: Variant,
    pub init: InitScheme,
    pub seed: u64,
    pub eta: f64,
    pub t: Option<u64>,
    pub terminated_by: Option<TerminatedBy>,
    pub fit: Option<TailFit>,
    pub status: RunStatus,
}

/// Per-cell average of the positive `β̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub f: usize,
    pub p: f64,
    pub beta_mean: Option<f64>,
    pub n_kept: usize,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellRow>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn single_run(
    cfg: &SweepConfig,
    y: &DataMatrix,
    spec: &DropoutSpec,
    center: Option<&BalancedMinimizer>,
    f: usize,
    seed: u64,
) -> (
    Option<u64>,
    Option<TerminatedBy>,
    Option<TailFit>,
    RunStatus,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = match (cfg.init, center) {
        (InitScheme::Gaussian(sigma), _) => {
            Dims::new(y.nrows(), f, y.ncols()).and_then(|dims| gaussian_init(dims, sigma, &mut rng))
        }
        (InitScheme::Epsilon(eps), Some(m)) => {
            epsilon_init(&scale_to_unscaled(&m.weights, spec), eps, &mut rng)
        }
        (InitScheme::Epsilon(_), None) => Err(Error::Numeric("no minimizer for this cell".into())),
    };
    let w0 = match w0 {
        Ok(w) => w,
        Err(e) => {
            log::warn!("f={f} p={} seed={seed}: init failed: {e}", spec.p());
            return (None, None, None, RunStatus::Error);
        }
    };
    let options = RunOptions {
        stride: cfg.stride,
        keep_weights: false,
    };
    let traj = match gd_run(y, &w0, &Objective::J(*spec), cfg.eta, cfg.stop, options) {
        Ok(t) => t,
        Err(Error::Divergence { iteration, .. }) => {
            return (Some(iteration), None, None, RunStatus::Diverged);
        }
        Err(e) => {
            log::warn!("f={f} p={} seed={seed}: {e}", spec.p());
            return (None, None, None, RunStatus::Error);
        }
    };
    if traj.terminated_by == TerminatedBy::TMax {
        return (
            Some(traj.t),
            Some(traj.terminated_by),
            None,
            RunStatus::TMax,
        );
    }
    let times: Vec<f64> = traj.iterations.iter().map(|&i| i as f64).collect();
    match exp_tail_fit(&times, &traj.grad_norms, cfg.gamma) {
        Ok(fit) => (
            Some(traj.t),
            Some(traj.terminated_by),
            Some(fit),
            RunStatus::Ok,
        ),
        Err(e) => {
            log::info!("f={f} p={} seed={seed}: fit skipped: {e}", spec.p());
            (
                Some(traj.t),
                Some(traj.terminated_by),
                None,
                RunStatus::FitSkipped,
            )
        }
    }
}

/// Runs every `(f, p, replicate)` combination. Rows come back sorted by
/// `(f index, p index, replicate)` whatever the number of workers.
pub fn run_sweep(cfg: &SweepConfig, y: &DataMatrix, jobs: usize) -> Result<SweepResult> {
    cfg.validate()?;
    let y = cfg.prepare(y)?;
    let cells: Vec<(usize, usize)> = (0..cfg.f_list.len())
        .flat_map(|fi| (0..cfg.p_list.len()).map(move |pi| (fi, pi)))
        .collect();

    let per_cell: Vec<(Vec<RunRow>, CellRow)> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(fi, pi)| {
                let (f, p) = (cfg.f_list[fi], cfg.p_list[pi]);
                let spec = DropoutSpec::new(cfg.variant, p).expect("validated");
                let center = match cfg.init {
                    InitScheme::Epsilon(_) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.master_seed, fi, pi));
                        balanced_minimizer(&y, f, spec.lambda(), &mut rng)
                            .map_err(|e| log::warn!("f={f} p={p}: no minimizer: {e}"))
                            .ok()
                    }
                    InitScheme::Gaussian(_) => None,
                };
                let runs: Vec<RunRow> = (0..cfg.replicates)
                    .into_par_iter()
                    .map(|rep| {
                        let seed = run_seed(cfg.master_seed, fi, pi, rep);
                        let (t, terminated_by, fit, status) =
                            single_run(cfg, &y, &spec, center.as_ref(), f, seed);
                        RunRow {
                            f,
                            p,
                            variant: cfg.variant,
                            init: cfg.init,
                            seed,
                            eta: cfg.eta,
                            t,
                            terminated_by,
                            fit,
                            status,
                        }
                    })
                    .collect();
                let fits: Vec<TailFit> = runs.iter().filter_map(|r| r.fit).collect();
                let (beta_mean, n_kept) = match aggregate_beta(&fits) {
                    Ok((m, n)) => (Some(m), n),
                    Err(_) => (None, 0),
                };
                let cell = CellRow {
                    f,
                    p,
                    beta_mean,
                    n_kept,
                    n_runs: runs.len(),
                };
                (runs, cell)
            })
            .collect()
    });

    let mut result = SweepResult {
        runs: Vec::new(),
        cells: Vec::new(),
    };
    for (runs, cell) in per_cell {
        result.runs.extend(runs);
        result.cells.push(cell);
    }
    Ok(result)
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn to_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Numeric(e.to_string()))
}

pub const SWEEP_COLUMNS: [&str; 13] = [
    "f",
    "p",
    "variant",
    "init",
    "scale",
    "seed",
    "eta",
    "T",
    "terminated_by",
    "beta_hat",
    "a_hat",
    "rss",
    "status",
];

pub const CELL_COLUMNS: [&str; 5] = ["f", "p", "beta_mean", "n_kept", "n_runs"];

pub const RATES_COLUMNS: [&str; 8] = [
    "f",
    "p",
    "omega_explicit",
    "omega_e1",
    "omega_unscaled",
    "omega_numeric",
    "p_star",
    "status",
];

pub fn sweep_csv(rows: &[RunRow]) -> Result<String> {
    to_csv(
        &SWEEP_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.f.to_string(),
                fmt_f64(r.p),
                r.variant.to_string(),
                r.init.kind().to_string(),
                fmt_f64(r.init.scale()),
                r.seed.to_string(),
                fmt_f64(r.eta),
                r.t.map(|t| t.to_string()).unwrap_or_default(),
                r.terminated_by.map(|t| t.to_string()).unwrap_or_default(),
                opt(r.fit.map(|f| f.beta_hat)),
                opt(r.fit.map(|f| f.a_hat)),
                opt(r.fit.map(|f| f.rss)),
                r.status.to_string(),
            ]
        }),
    )
}

pub fn cells_csv(rows: &[CellRow]) -> Result<String> {
    to_csv(
        &CELL_COLUMNS,
        rows.iter().map(|c| {
            vec![
                c.f.to_string(),
                fmt_f64(c.p),
                opt(c.beta_mean),
                c.n_kept.to_string(),
                c.n_runs.to_string(),
            ]
        }),
    )
}

/// One sweep row as read back from CSV: enough to refit the hyper-models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaRecord {
    pub f: usize,
    pub p: f64,
    pub beta_hat: Option<f64>,
}

/// Parses the `f`, `p` and `beta_hat` columns of a sweep CSV.
pub fn parse_sweep_csv<R: std::io::Read>(reader: R) -> Result<Vec<BetaRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column {name:?}"),
            })
    };
    let (cf, cp, cb) = (col("f")?, col("p")?, col("beta_hat")?);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |what: &str| Error::Parse {
            line,
            msg: format!("bad {what}"),
        };
        let f = field(cf).parse::<usize>().map_err(|_| parse_err("f"))?;
        let p = field(cp).parse::<f64>().map_err(|_| parse_err("p"))?;
        let beta = field(cb);
        let beta_hat = if beta.is_empty() {
            None
        } else {
            Some(beta.parse::<f64>().map_err(|_| parse_err("beta_hat"))?)
        };
        out.push(BetaRecord { f, p, beta_hat });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatesRow {
    pub f: usize,
    pub p: f64,
    pub omega_explicit: Option<f64>,
    pub omega_e1: Option<f64>,
    pub omega_unscaled: Option<f64>,
    pub omega_numeric: Option<f64>,
    pub p_star: f64,
    /// `ok`, or a short reason when some column could not be filled.
    pub status: String,
}

/// Closed-form and numeric rates for each `(f, p)` of the config.
/// `omega_numeric` is filled only when the constructed minimizer passes its
/// certificate.
pub fn rates_table(
    cfg: &SweepConfig,
    y: &DataMatrix,
    tau: Option<f64>,
    jobs: usize,
) -> Result<Vec<RatesRow>> {
    cfg.validate()?;
    let y = cfg.prepare(y)?;
    let cells: Vec<(usize, usize)> = (0..cfg.f_list.len())
        .flat_map(|fi| (0..cfg.p_list.len()).map(move |pi| (fi, pi)))
        .collect();
    let rows = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(fi, pi)| {
                let (f, p) = (cfg.f_list[fi], cfg.p_list[pi]);
                let spec = DropoutSpec::new(cfg.variant, p).expect("validated");
                let p_star = optimal_p(cfg.variant, f).expect("f ≥ 1");
                let mut row = RatesRow {
                    f,
                    p,
                    omega_explicit: None,
                    omega_e1: None,
                    omega_unscaled: None,
                    omega_numeric: None,
                    p_star,
                    status: "ok".into(),
                };
                match rate_report(&y, &spec, f, None, tau) {
                    Ok(r) => {
                        row.omega_explicit = Some(r.omega_explicit);
                        row.omega_e1 = r.omega_e1;
                        row.omega_unscaled = Some(r.omega_unscaled);
                    }
                    Err(e) => {
                        row.status = format!("error: {e}");
                        return row;
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.master_seed, fi, pi));
                let numeric = balanced_minimizer(&y, f, spec.lambda(), &mut rng).and_then(|m| {
                    let cert = m.certify(&y)?;
                    if !cert.passes() {
                        return Err(Error::Numeric(format!("certificate failed: {cert:?}")));
                    }
                    omega_numeric(&y, &m, spec.lambda(), tau)
                });
                match numeric {
                    Ok(w) => row.omega_numeric = Some(w),
                    Err(e) => row.status = format!("no omega_numeric: {e}"),
                }
                row
            })
            .collect()
    });
    Ok(rows)
}

pub fn rates_csv(rows: &[RatesRow]) -> Result<String> {
    to_csv(
        &RATES_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.f.to_string(),
                fmt_f64(r.p),
                opt(r.omega_explicit),
                opt(r.omega_e1),
                opt(r.omega_unscaled),
                opt(r.omega_numeric),
                fmt_f64(r.p_star),
                r.status.clone(),
            ]
        }),
    )
}
