use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use droprate::fitting::{fit_beta_vs_f, fit_beta_vs_p, FitMode, ModelFit};
use droprate::flow::{gd_run, Objective, RunOptions, StopRule, Trajectory};
use droprate::harness::{
    cells_csv, fmt_f64, ingest_csv, parse_sweep_csv, rates_csv, rates_table, read_matrix_csv,
    run_sweep, sweep_csv, whiten, write_matrix_csv, InitScheme, Orientation, SweepConfig,
};
use droprate::minimizers::{balanced_minimizer, epsilon_init, gaussian_init, Certificate};
use droprate::model::{scale_to_unscaled, DataMatrix, Dims, DropoutSpec, Variant, Weights};
use droprate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "droprate",
    version,
    about = "Dropout rate experiments on shallow linear networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Whiten raw X/Y data into the target matrix Y.
    Ingest {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the whitened scale instead of rescaling to unit norm.
        #[arg(long)]
        no_normalize: bool,
        /// Input files store one sample per column.
        #[arg(long)]
        samples_as_columns: bool,
    },
    /// Construct and certify a balanced global minimizer.
    Minimize {
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        f: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One gradient-descent run on the dropout objective.
    Run {
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        f: usize,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        variant: Variant,
        /// `gaussian:SIGMA` or `epsilon:EPS`.
        #[arg(long)]
        init: InitScheme,
        #[arg(long, default_value_t = 1e-2)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        grad_tol: f64,
        #[arg(long, default_value_t = 500_000)]
        t_max: u64,
        #[arg(long)]
        stride: Option<u64>,
    },
    /// Sweep over the widths, retain probabilities and replicates of a config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Whitened target matrix.
        #[arg(long)]
        y: PathBuf,
        /// Per-run CSV; per-cell averages go to `<stem>_cells.csv` beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fit the rate hyper-model to sweep results.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mode: FitMode,
        /// Tail fraction the sweep used; recorded in the output.
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate rate bounds for every cell of a config.
    Rates {
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Kernel cut for the Hessian eigenvalues; default 1e-6 × spectral radius.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Json(_) => 2,
        Error::Shape(_)
        | Error::DegenerateData(_)
        | Error::Conditioning(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::Csv(_) => 3,
        Error::Numeric(_)
        | Error::Majorization(_)
        | Error::Divergence { .. }
        | Error::Fit { .. } => 4,
    }
}

fn read_y(path: &Path) -> Result<DataMatrix> {
    DataMatrix::new(read_matrix_csv(path)?)
}

fn read_config(path: &Path) -> Result<SweepConfig> {
    SweepConfig::from_json(&fs::read_to_string(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct MinimizerReport {
    variant: Variant,
    f: usize,
    p: f64,
    lambda: f64,
    rho: usize,
    alpha: f64,
    sigma: Vec<f64>,
    sigma_sq: Vec<f64>,
    certificate: Certificate,
    /// Minimizer of the scaled risk.
    weights_scaled: Weights,
    /// The same point mapped to the dropout objective's coordinates.
    weights: Weights,
}

fn minimize(y: &Path, f: usize, p: f64, variant: Variant, out: &Path, seed: u64) -> Result<()> {
    let y = read_y(y)?;
    let spec = DropoutSpec::new(variant, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = balanced_minimizer(&y, f, spec.lambda(), &mut rng)?;
    let certificate = m.certify(&y)?;
    if !certificate.passes() {
        return Err(Error::Numeric(format!(
            "certificate failed: {certificate:?}"
        )));
    }
    if m.summary.repeated_singular_values {
        log::warn!(
            "Y has repeated singular values; the minimizer set may be larger than described"
        );
    }
    let report = MinimizerReport {
        variant,
        f,
        p,
        lambda: spec.lambda(),
        rho: m.summary.rho,
        alpha: m.summary.alpha,
        sigma: m.summary.sigma.clone(),
        sigma_sq: m.summary.sigma_sq.clone(),
        certificate,
        weights: scale_to_unscaled(&m.weights, &spec),
        weights_scaled: m.weights,
    };
    write_json(out, &report)
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,grad_norm,loss,balance_drift\n");
    for i in 0..traj.iterations.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            traj.iterations[i],
            fmt_f64(traj.grad_norms[i]),
            fmt_f64(traj.losses[i]),
            fmt_f64(traj.balance_drift[i])
        ));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run(
    y: &Path,
    f: usize,
    p: f64,
    variant: Variant,
    init: InitScheme,
    eta: f64,
    seed: u64,
    out: &Path,
    stop: StopRule,
    stride: Option<u64>,
) -> Result<()> {
    let y = read_y(y)?;
    let spec = DropoutSpec::new(variant, p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = match init {
        InitScheme::Gaussian(sigma) => {
            gaussian_init(Dims::new(y.nrows(), f, y.ncols())?, sigma, &mut rng)?
        }
        InitScheme::Epsilon(eps) => {
            let m = balanced_minimizer(&y, f, spec.lambda(), &mut rng)?;
            epsilon_init(&scale_to_unscaled(&m.weights, &spec), eps, &mut rng)?
        }
    };
    let options = RunOptions {
        stride,
        keep_weights: false,
    };
    let traj = gd_run(&y, &w0, &Objective::J(spec), eta, stop, options)?;
    log::info!("terminated by {} at T = {}", traj.terminated_by, traj.t);
    if !traj.monotone {
        log::warn!("loss increased during the run; the step size may be too large");
    }
    fs::write(out, trajectory_csv(&traj))?;
    Ok(())
}

fn cells_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("results");
    out.with_file_name(format!("{stem}_cells.csv"))
}

fn sweep(config: &Path, y: &Path, out: &Path, jobs: usize) -> Result<()> {
    let cfg = read_config(config)?;
    let y = read_y(y)?;
    let result = run_sweep(&cfg, &y, jobs)?;
    fs::write(out, sweep_csv(&result.runs)?)?;
    fs::write(cells_path(out), cells_csv(&result.cells)?)?;
    Ok(())
}

#[derive(Serialize)]
struct GroupFit {
    /// Width held fixed for `vs_p`, retain probability for `vs_f`.
    fixed: f64,
    points: Vec<(f64, f64)>,
    fit: Option<ModelFit>,
    error: Option<String>,
}

#[derive(Serialize)]
struct FitReport {
    mode: FitMode,
    gamma: f64,
    groups: Vec<GroupFit>,
}

fn fit(input: &Path, mode: FitMode, gamma: f64, out: &Path) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "gamma must lie in [0, 1), got {gamma}"
        )));
    }
    let records = parse_sweep_csv(fs::File::open(input)?)?;

    // Discard rule: average only the positive estimates of each cell.
    let mut cells: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    for r in &records {
        if let Some(b) = r.beta_hat.filter(|b| *b > 0.0) {
            let e = cells.entry((r.f, r.p.to_bits())).or_insert((0.0, 0));
            e.0 += b;
            e.1 += 1;
        }
    }
    let mut groups: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for (&(f, p_bits), &(sum, n)) in &cells {
        let p = f64::from_bits(p_bits);
        let mean = sum / n as f64;
        match mode {
            FitMode::VsP => groups.entry(f as u64).or_default().push((p, mean)),
            FitMode::VsF => groups.entry(p_bits).or_default().push((f as f64, mean)),
        }
    }

    let mut report = FitReport {
        mode,
        gamma,
        groups: Vec::new(),
    };
    for (key, mut points) in groups {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (fixed, result) = match mode {
            FitMode::VsP => (key as f64, fit_beta_vs_p(&points, key as usize)),
            FitMode::VsF => {
                let p = f64::from_bits(key);
                (p, fit_beta_vs_f(&points, p))
            }
        };
        let (fit, error) = match result {
            Ok(m) => (Some(m), None),
            Err(e) => {
                log::warn!("group {fixed}: {e}");
                (None, Some(e.to_string()))
            }
        };
        report.groups.push(GroupFit {
            fixed,
            points,
            fit,
            error,
        });
    }
    write_json(out, &report)?;
    if !report.groups.iter().any(|g| g.fit.is_some()) {
        return Err(Error::Fit {
            msg: "no group could be fitted".into(),
            best: None,
        });
    }
    Ok(())
}

fn rates(y: &Path, config: &Path, out: &Path, tau: Option<f64>, jobs: usize) -> Result<()> {
    let cfg = read_config(config)?;
    let y = read_y(y)?;
    let rows = rates_table(&cfg, &y, tau, jobs)?;
    fs::write(out, rates_csv(&rows)?)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            x,
            y,
            out,
            no_normalize,
            samples_as_columns,
        } => {
            let orientation = if samples_as_columns {
                Orientation::SamplesAsColumns
            } else {
                Orientation::SamplesAsRows
            };
            let raw = ingest_csv(&x, &y, orientation)?;
            let data = whiten(&raw, !no_normalize)?;
            write_matrix_csv(&out, data.values())
        }
        Command::Minimize {
            y,
            f,
            p,
            variant,
            out,
            seed,
        } => minimize(&y, f, p, variant, &out, seed),
        Command::Run {
            y,
            f,
            p,
            variant,
            init,
            eta,
            seed,
            out,
            grad_tol,
            t_max,
            stride,
        } => {
            let stop = StopRule::new(grad_tol, t_max)?;
            run(&y, f, p, variant, init, eta, seed, &out, stop, stride)
        }
        Command::Sweep {
            config,
            y,
            out,
            jobs,
        } => sweep(&config, &y, &out, jobs),
        Command::Fit {
            input,
            mode,
            gamma,
            out,
        } => fit(&input, mode, gamma, &out),
        Command::Rates {
            y,
            config,
            out,
            tau,
            jobs,
        } => rates(&y, &config, &out, tau, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
