//! Rate estimation from recorded gradient norms.
//!
//! Step one fits `a·e^{-βt}` to the tail of each trajectory. Step two averages
//! the positive estimates per cell and fits one of two hyper-models:
//!
//! ```text
//! vs_p:  β(p) = b·p / (f·(p/(1-p))^α + 1)
//! vs_f:  β(f) = b·p(1-p) / (p·f^α + 1 - p) + c
//! ```

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Relative parameter step below which the solver stops.
const STEP_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 2000;
const ALPHA_STARTS: [f64; 4] = [0.25, 1.5, 2.75, 4.0];
const B_START_FACTORS: [f64; 2] = [0.3, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub a_hat: f64,
    pub beta_hat: f64,
    pub gamma: f64,
    pub rss: f64,
    pub n_points: usize,
    /// Coefficient of determination of the log-linear fit; 1 when the tail is flat.
    pub r_squared: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Domain(format!("γ must lie in [0, 1), got {gamma}")))
    }
}

fn fit_error(msg: impl Into<String>) -> Error {
    Error::Fit {
        msg: msg.into(),
        best: None,
    }
}

/// Least-squares line through `(t, ln value)` over points with
/// `t ≥ ⌊γ·T⌋`, `T` being the last recorded time.
pub fn exp_tail_fit(t: &[f64], values: &[f64], gamma: f64) -> Result<TailFit> {
    check_gamma(gamma)?;
    if t.len() != values.len() {
        return Err(Error::shape(format!(
            "{} times but {} values",
            t.len(),
            values.len()
        )));
    }
    let last = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = (gamma * last).floor();
    let window: Vec<(f64, f64)> = t
        .iter()
        .zip(values)
        .filter(|(ti, _)| **ti >= start)
        .map(|(ti, v)| (*ti, *v))
        .collect();
    if window.len() < 3 {
        return Err(fit_error(format!(
            "need ≥ 3 points in the tail window, got {}",
            window.len()
        )));
    }
    if let Some((ti, v)) = window.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
        return Err(fit_error(format!(
            "value {v} at t = {ti} cannot be log-transformed"
        )));
    }

    let n = window.len() as f64;
    let logs: Vec<f64> = window.iter().map(|(_, v)| v.ln()).collect();
    let mt = window.iter().map(|(ti, _)| ti).sum::<f64>() / n;
    let my = logs.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for ((ti, _), y) in window.iter().zip(&logs) {
        let dx = ti - mt;
        let dy = y - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(fit_error("tail window has a single distinct time"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let rss = window
        .iter()
        .zip(&logs)
        .map(|((ti, _), y)| (y - intercept - slope * ti).powi(2))
        .sum::<f64>();
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(TailFit {
        a_hat: intercept.exp(),
        beta_hat: -slope,
        gamma,
        rss,
        n_points: window.len(),
        r_squared,
    })
}

/// Mean of the positive `β̂` and how many were kept.
pub fn aggregate_beta(fits: &[TailFit]) -> Result<(f64, usize)> {
    let kept: Vec<f64> = fits
        .iter()
        .map(|f| f.beta_hat)
        .filter(|b| *b > 0.0)
        .collect();
    if kept.is_empty() {
        return Err(fit_error(format!(
            "none of {} estimates is positive",
            fits.len()
        )));
    }
    Ok((kept.iter().sum::<f64>() / kept.len() as f64, kept.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    VsP,
    VsF,
}

impl std::fmt::Display for FitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMode::VsP => "vs_p",
            FitMode::VsF => "vs_f",
        })
    }
}

impl std::str::FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vs_p" => Ok(FitMode::VsP),
            "vs_f" => Ok(FitMode::VsF),
            other => Err(Error::Domain(format!("unknown fit mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub mode: FitMode,
    pub b: f64,
    /// Offset, present only for [`FitMode::VsF`].
    pub c: Option<f64>,
    pub alpha: f64,
    pub rss: f64,
    pub n_points: usize,
    /// Multi-starts that met the step tolerance.
    pub converged_starts: usize,
}

/// `β(p) = b·p / (f·(p/(1-p))^α + 1)`.
pub fn model_vs_p(p: f64, f: f64, b: f64, alpha: f64) -> f64 {
    b * p / (f * (p / (1.0 - p)).powf(alpha) + 1.0)
}

/// `β(f) = b·p(1-p) / (p·f^α + 1 - p) + c`.
pub fn model_vs_f(f: f64, p: f64, b: f64, c: f64, alpha: f64) -> f64 {
    b * p * (1.0 - p) / (p * f.powf(alpha) + 1.0 - p) + c
}

struct LmResult {
    theta: Vec<f64>,
    rss: f64,
    converged: bool,
}

fn rss_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Damped Gauss–Newton. `eval` returns residuals and their Jacobian. A step
/// is taken only if it lowers the residual sum of squares; the damping is
/// divided by 10 after a successful step and multiplied by 10 otherwise.
fn levenberg_marquardt<F>(eval: F, theta0: &[f64]) -> LmResult
where
    F: Fn(&[f64]) -> (Vec<f64>, Matrix),
{
    let k = theta0.len();
    let mut theta = theta0.to_vec();
    let (mut r, mut jac) = eval(&theta);
    let mut rss = rss_of(&r);
    if !rss.is_finite() {
        return LmResult {
            theta,
            rss,
            converged: false,
        };
    }
    let mut mu = 1e-3;

    for _ in 0..MAX_ITERATIONS {
        let jtj = jac.tr_mul(&jac);
        let rv = Matrix::from_column_slice(r.len(), 1, &r);
        let grad = jac.tr_mul(&rv);
        let mut damped = jtj.clone();
        for i in 0..k {
            damped[(i, i)] += mu * jtj[(i, i)].max(1e-12);
        }
        let Some(step) = damped.lu().solve(&(-grad)) else {
            mu *= 10.0;
            if mu > 1e20 {
                break;
            }
            continue;
        };
        let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
        let theta_norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let small = step.norm() <= STEP_TOL * (theta_norm + STEP_TOL);

        let (r_new, jac_new) = eval(&trial);
        let rss_new = rss_of(&r_new);
        if rss_new.is_finite() && rss_new < rss {
            theta = trial;
            r = r_new;
            jac = jac_new;
            rss = rss_new;
            mu = (mu / 10.0).max(1e-15);
            if small {
                return LmResult {
                    theta,
                    rss,
                    converged: true,
                };
            }
        } else {
            if small {
                // No nearby point improves on the current one.
                return LmResult {
                    theta,
                    rss,
                    converged: true,
                };
            }
            mu *= 10.0;
            if mu > 1e20 {
                break;
            }
        }
    }
    LmResult {
        theta,
        rss,
        converged: false,
    }
}

/// Runs every start and keeps the lowest rss among converged runs; ties go
/// to the earlier start.
fn multi_start<F>(eval: F, starts: &[Vec<f64>]) -> Result<(LmResult, usize)>
where
    F: Fn(&[f64]) -> (Vec<f64>, Matrix),
{
    let results: Vec<LmResult> = starts
        .iter()
        .map(|s| levenberg_marquardt(&eval, s))
        .collect();
    let converged = results
        .iter()
        .filter(|r| r.converged && r.rss.is_finite())
        .count();
    let pick = |want_converged: bool| {
        results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.rss.is_finite() && (r.converged || !want_converged))
            .min_by(|(i, a), (j, b)| a.rss.total_cmp(&b.rss).then(i.cmp(j)))
            .map(|(i, _)| i)
    };
    match pick(true) {
        Some(i) => {
            let mut results = results;
            Ok((results.swap_remove(i), converged))
        }
        None => Err(Error::Fit {
            msg: format!("no start out of {} converged", starts.len()),
            best: pick(false).map(|i| results[i].theta.clone()),
        }),
    }
}

fn check_points(points: &[(f64, f64)], min: usize) -> Result<()> {
    if points.len() < min {
        return Err(fit_error(format!(
            "need ≥ {min} points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(fit_error("non-finite input point"));
    }
    Ok(())
}

/// Least-squares `b` for a model linear in `b` with shape `shape(x)`.
fn linear_scale(points: &[(f64, f64)], shape: impl Fn(f64) -> f64) -> f64 {
    let (num, den) = points.iter().fold((0.0, 0.0), |(n, d), (x, y)| {
        let s = shape(*x);
        (n + s * y, d + s * s)
    });
    let b = num / den;
    if b.is_finite() && b != 0.0 {
        b
    } else {
        1.0
    }
}

fn starts(b_ref: f64, with_offset: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for factor in B_START_FACTORS {
        for alpha in ALPHA_STARTS {
            let b = b_ref * factor;
            out.push(if with_offset {
                vec![b, 0.0, alpha]
            } else {
                vec![b, alpha]
            });
        }
    }
    out
}

/// Fits `(b, α)` of the `β(p)` model at fixed width `f`.
pub fn fit_beta_vs_p(points: &[(f64, f64)], f: usize) -> Result<ModelFit> {
    check_points(points, 3)?;
    if let Some((p, _)) = points.iter().find(|(p, _)| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Domain(format!("p must lie in (0, 1), got {p}")));
    }
    let ff = f as f64;
    let eval = |theta: &[f64]| {
        let (b, alpha) = (theta[0], theta[1]);
        let mut r = Vec::with_capacity(points.len());
        let mut jac = Matrix::zeros(points.len(), 2);
        for (i, (p, y)) in points.iter().enumerate() {
            let odds = p / (1.0 - p);
            let pow = odds.powf(alpha);
            let g = ff * pow + 1.0;
            r.push(b * p / g - y);
            jac[(i, 0)] = p / g;
            jac[(i, 1)] = -b * p * ff * pow * odds.ln() / (g * g);
        }
        (r, jac)
    };
    let b_ref = linear_scale(points, |p| model_vs_p(p, ff, 1.0, 1.0));
    let (best, converged_starts) = multi_start(eval, &starts(b_ref, false))?;
    Ok(ModelFit {
        mode: FitMode::VsP,
        b: best.theta[0],
        c: None,
        alpha: best.theta[1],
        rss: best.rss,
        n_points: points.len(),
        converged_starts,
    })
}

/// Fits `(b, c, α)` of the `β(f)` model at fixed retain probability `p`.
pub fn fit_beta_vs_f(points: &[(f64, f64)], p: f64) -> Result<ModelFit> {
    check_points(points, 4)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p must lie in (0, 1), got {p}")));
    }
    if let Some((f, _)) = points.iter().find(|(f, _)| !(*f > 0.0)) {
        return Err(Error::Domain(format!("widths must be positive, got {f}")));
    }
    let q = p * (1.0 - p);
    let eval = |theta: &[f64]| {
        let (b, c, alpha) = (theta[0], theta[1], theta[2]);
        let mut r = Vec::with_capacity(points.len());
        let mut jac = Matrix::zeros(points.len(), 3);
        for (i, (f, y)) in points.iter().enumerate() {
            let pow = f.powf(alpha);
            let g = p * pow + 1.0 - p;
            r.push(b * q / g + c - y);
            jac[(i, 0)] = q / g;
            jac[(i, 1)] = 1.0;
            jac[(i, 2)] = -b * q * p * pow * f.ln() / (g * g);
        }
        (r, jac)
    };
    let b_ref = linear_scale(points, |f| model_vs_f(f, p, 1.0, 0.0, 1.0));
    let (best, converged_starts) = multi_start(eval, &starts(b_ref, true))?;
    Ok(ModelFit {
        mode: FitMode::VsF,
        b: best.theta[0],
        c: Some(best.theta[1]),
        alpha: best.theta[2],
        rss: best.rss,
        n_points: points.len(),
        converged_starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DropoutSpec, Variant};
    use crate::rates::omega_unscaled;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(x: f64, y: f64) -> f64 {
        (x - y).abs() / y.abs()
    }

    #[test]
    fn exact_exponential() {
        let t: Vec<f64> = (0..=100).map(f64::from).collect();
        let v: Vec<f64> = t.iter().map(|t| (-0.1 * t).exp()).collect();
        let fit = exp_tail_fit(&t, &v, 0.0).unwrap();
        assert!((fit.beta_hat - 0.1).abs() < 1e-12);
        assert!((fit.a_hat - 1.0).abs() < 1e-12);
        assert_eq!(fit.n_points, 101);
        assert!(fit.rss >= 0.0);
    }

    #[test]
    fn constant_series() {
        let t: Vec<f64> = (0..20).map(f64::from).collect();
        let fit = exp_tail_fit(&t, &[2.0; 20], 0.5).unwrap();
        assert!(fit.beta_hat.abs() < 1e-15);
        assert!((fit.a_hat - 2.0).abs() < 1e-14);
    }

    #[test]
    fn noisy_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let t: Vec<f64> = (0..1000).map(f64::from).collect();
        let v: Vec<f64> = t
            .iter()
            .map(|t| (-0.05 * t).exp() * rng.random_range(0.99..1.01))
            .collect();
        let fit = exp_tail_fit(&t, &v, 0.0).unwrap();
        assert!(rel(fit.beta_hat, 0.05) < 0.02);
    }

    #[test]
    fn tail_window_uses_floor() {
        let t: Vec<f64> = (0..=10).map(|k| f64::from(k) * 10.0).collect();
        let v: Vec<f64> = t.iter().map(|t| (-0.01 * t).exp()).collect();
        // ⌊0.75·100⌋ = 75 keeps t = 80, 90, 100.
        assert_eq!(exp_tail_fit(&t, &v, 0.75).unwrap().n_points, 3);
        assert_eq!(exp_tail_fit(&t, &v, 0.7).unwrap().n_points, 4);
        assert!(exp_tail_fit(&t, &v, 0.85).is_err());
    }

    #[test]
    fn tail_fit_errors() {
        let t = [0.0, 1.0, 2.0, 3.0];
        assert!(matches!(
            exp_tail_fit(&t, &[1.0, 0.5, 0.0, 0.1], 0.0),
            Err(Error::Fit { .. })
        ));
        assert!(matches!(
            exp_tail_fit(&t[..2], &[1.0, 0.5], 0.0),
            Err(Error::Fit { .. })
        ));
        assert!(exp_tail_fit(&t, &[1.0; 4], 1.0).is_err());
        assert!(exp_tail_fit(&t, &[1.0; 3], 0.0).is_err());
    }

    fn tail(beta: f64) -> TailFit {
        TailFit {
            a_hat: 1.0,
            beta_hat: beta,
            gamma: 0.9,
            rss: 0.0,
            n_points: 3,
            r_squared: 1.0,
        }
    }

    #[test]
    fn aggregation_discards_nonpositive() {
        let (mean, n) = aggregate_beta(&[tail(0.1), tail(0.2), tail(-0.05)]).unwrap();
        assert!((mean - 0.15).abs() < 1e-15);
        assert_eq!(n, 2);
        let (mean, n) = aggregate_beta(&[tail(0.1), tail(0.3)]).unwrap();
        assert!((mean - 0.2).abs() < 1e-15);
        assert_eq!(n, 2);
        assert!(aggregate_beta(&[tail(0.0), tail(-1.0)]).is_err());
        assert!(aggregate_beta(&[]).is_err());
    }

    fn vs_p_data(b: f64, alpha: f64, f: usize) -> Vec<(f64, f64)> {
        (1..=9)
            .map(|k| {
                let p = f64::from(k) / 10.0;
                (p, model_vs_p(p, f as f64, b, alpha))
            })
            .collect()
    }

    #[test]
    fn recovers_vs_p() {
        let fit = fit_beta_vs_p(&vs_p_data(0.08, 1.0, 20), 20).unwrap();
        assert!(
            rel(fit.b, 0.08) < 0.01 && rel(fit.alpha, 1.0) < 0.01,
            "{fit:?}"
        );
        assert!(fit.c.is_none());
        assert!(fit.converged_starts >= 1);
    }

    #[test]
    fn vs_p_homogeneous_in_b() {
        let data = vs_p_data(0.05, 1.4, 8);
        let base = fit_beta_vs_p(&data, 8).unwrap();
        let scaled: Vec<_> = data.iter().map(|(p, y)| (*p, 7.0 * y)).collect();
        let fit = fit_beta_vs_p(&scaled, 8).unwrap();
        assert!(rel(fit.b, 7.0 * base.b) < 1e-6);
        assert!((fit.alpha - base.alpha).abs() < 1e-6);
    }

    #[test]
    fn vs_p_preconditions() {
        assert!(matches!(
            fit_beta_vs_p(&[(0.3, 0.1), (0.5, 0.1)], 4),
            Err(Error::Fit { .. })
        ));
        assert!(fit_beta_vs_p(&[(0.3, 0.1), (0.5, 0.1), (1.0, 0.1)], 4).is_err());
    }

    fn vs_f_data(b: f64, c: f64, alpha: f64, p: f64) -> Vec<(f64, f64)> {
        [2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&f| (f, model_vs_f(f, p, b, c, alpha)))
            .collect()
    }

    #[test]
    fn recovers_vs_f() {
        let fit = fit_beta_vs_f(&vs_f_data(2.0, 0.001, 1.0, 0.7), 0.7).unwrap();
        assert!(rel(fit.b, 2.0) < 0.02, "{fit:?}");
        assert!(rel(fit.c.unwrap(), 0.001) < 0.02, "{fit:?}");
        assert!(rel(fit.alpha, 1.0) < 0.02, "{fit:?}");
    }

    #[test]
    fn zero_offset_recovered() {
        let fit = fit_beta_vs_f(&vs_f_data(2.0, 0.0, 1.0, 0.7), 0.7).unwrap();
        assert!(fit.c.unwrap().abs() < 1e-4 * fit.b, "{fit:?}");
    }

    #[test]
    fn vs_f_preconditions() {
        let data = vs_f_data(2.0, 0.0, 1.0, 0.7);
        assert!(matches!(
            fit_beta_vs_f(&data[..3], 0.7),
            Err(Error::Fit { .. })
        ));
        assert!(fit_beta_vs_f(&data, 1.0).is_err());
    }

    #[test]
    fn unscaled_rates_give_unit_exponent() {
        let spec = DropoutSpec::new(Variant::Dropout, 0.7).unwrap();
        let eta = 1e-2;
        let data: Vec<(f64, f64)> = [2, 4, 8, 16, 32, 64]
            .iter()
            .map(|&f| (f as f64, eta * omega_unscaled(&spec, 1.0, f)))
            .collect();
        let fit = fit_beta_vs_f(&data, 0.7).unwrap();
        assert!((fit.alpha - 1.0).abs() < 0.03, "{fit:?}");
    }

    #[test]
    fn fits_ignore_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut data = vs_f_data(1.5, 0.002, 0.8, 0.4);
        for y in data.iter_mut() {
            y.1 *= rng.random_range(0.97..1.03);
        }
        let base = fit_beta_vs_f(&data, 0.4).unwrap();
        for _ in 0..5 {
            data.shuffle(&mut rng);
            let fit = fit_beta_vs_f(&data, 0.4).unwrap();
            assert!(rel(fit.rss, base.rss) < 1e-8);
        }

        let mut data = vs_p_data(0.1, 1.2, 10);
        for y in data.iter_mut() {
            y.1 *= rng.random_range(0.97..1.03);
        }
        let base = fit_beta_vs_p(&data, 10).unwrap();
        data.reverse();
        assert!(rel(fit_beta_vs_p(&data, 10).unwrap().rss, base.rss) < 1e-8);
    }

    #[test]
    fn fit_mode_round_trip() {
        for m in [FitMode::VsP, FitMode::VsF] {
            assert_eq!(m.to_string().parse::<FitMode>().unwrap(), m);
        }
        assert!("vs_q".parse::<FitMode>().is_err());
    }

    proptest! {
        #[test]
        fn tail_fit_exact_for_any_gamma(
            beta in 1e-3f64..0.5,
            a in 0.1f64..10.0,
            gamma in 0.0f64..0.95,
        ) {
            let t: Vec<f64> = (0..=200).map(f64::from).collect();
            let v: Vec<f64> = t.iter().map(|t| a * (-beta * t).exp()).collect();
            let fit = exp_tail_fit(&t, &v, gamma).unwrap();
            prop_assert!((fit.beta_hat - beta).abs() < 1e-12);
            prop_assert!((fit.a_hat / a - 1.0).abs() < 1e-10);
        }
    }
}
