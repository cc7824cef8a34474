//! Convergence-rate bounds near the minimizer set.

use serde::Serialize;

use crate::calculus::{default_kernel_tau, hessian_scaled, spectrum};
use crate::minimizers::{BalancedMinimizer, SpectralSummary};
use crate::model::{DataMatrix, DropoutSpec, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    pub omega_explicit: f64,
    pub omega_e1: Option<f64>,
    pub omega_unscaled: f64,
    pub omega_numeric: Option<f64>,
    /// The full bound is `min(omega_explicit, ζ)` with `ζ` available only
    /// numerically, so `omega_explicit` alone is not the rate.
    pub zeta_flag: bool,
}

/// Closed-form part of the rate bound at a minimizer.
pub fn omega_explicit(summary: &SpectralSummary) -> f64 {
    let rho = summary.rho;
    let f = summary.f as f64;
    let lambda = summary.lambda;
    let next = summary.sigma_after_rho();
    if rho < summary.f {
        2.0 * lambda * summary.kappa[rho - 1] * rho as f64 / (f + lambda * rho as f64) - 2.0 * next
    } else {
        2.0 * (summary.sigma[rho - 1] - next)
    }
}

/// `2λσ₁/(f + λ)`, the rate for a single output.
pub fn omega_e1(sigma1: f64, f: usize, lambda: f64) -> f64 {
    2.0 * lambda * sigma1 / (f as f64 + lambda)
}

/// Rate for the unscaled dropout objective with a single output.
pub fn omega_unscaled(spec: &DropoutSpec, sigma1: f64, f: usize) -> f64 {
    let ff = f as f64;
    match spec.variant() {
        Variant::Dropout => {
            let p = spec.p();
            2.0 * p * (1.0 - p) * sigma1 / (p * ff + 1.0 - p)
        }
        Variant::Dropconnect => {
            let q = spec.p() * spec.p();
            2.0 * q * (1.0 - q) * sigma1 / (q * ff + 1.0 - q)
        }
    }
}

/// Retain probability maximizing [`omega_unscaled`].
pub fn optimal_p(variant: Variant, f: usize) -> Result<f64> {
    if f == 0 {
        return Err(Error::Domain("hidden width must be ≥ 1".into()));
    }
    let root = (f as f64).sqrt();
    Ok(match variant {
        Variant::Dropout => 1.0 / (1.0 + root),
        Variant::Dropconnect => 1.0 / (1.0 + root).sqrt(),
    })
}

/// Smallest Hessian eigenvalue of the scaled risk above `tau` at `wstar`,
/// together with the number of eigenvalues below the cut.
pub fn omega_numeric_with_kernel(
    y: &DataMatrix,
    wstar: &BalancedMinimizer,
    lambda: f64,
    tau: Option<f64>,
) -> Result<(f64, usize)> {
    let h = hessian_scaled(y, &wstar.weights, lambda)?;
    let eig = spectrum(&h)?;
    let tau = tau.unwrap_or_else(|| default_kernel_tau(&eig));
    let kernel = eig.iter().filter(|x| x.abs() < tau).count();
    let smallest = eig
        .iter()
        .copied()
        .filter(|&x| x >= tau)
        .fold(f64::INFINITY, f64::min);
    if !smallest.is_finite() {
        return Err(Error::DegenerateData(format!(
            "no Hessian eigenvalue exceeds {tau:e}"
        )));
    }
    Ok((smallest, kernel))
}

/// Smallest Hessian eigenvalue above the kernel cut; `None` uses
/// `1e-6 × spectral radius`.
pub fn omega_numeric(
    y: &DataMatrix,
    wstar: &BalancedMinimizer,
    lambda: f64,
    tau: Option<f64>,
) -> Result<f64> {
    omega_numeric_with_kernel(y, wstar, lambda, tau).map(|(w, _)| w)
}

/// Assembles a [`RateReport`]. The single-output rates use `σ₁` and are
/// filled when the data has one output or rank one.
pub fn rate_report(
    y: &DataMatrix,
    spec: &DropoutSpec,
    f: usize,
    wstar: Option<&BalancedMinimizer>,
    tau: Option<f64>,
) -> Result<RateReport> {
    let lambda = spec.lambda();
    let summary = crate::minimizers::spectral_summary(y, f, lambda)?;
    let sigma1 = summary.sigma[0];
    let single = y.nrows() == 1 || y.rank() == 1;
    let omega_numeric = match wstar {
        Some(m) => Some(omega_numeric(y, m, lambda, tau)?),
        None => None,
    };
    Ok(RateReport {
        omega_explicit: omega_explicit(&summary),
        omega_e1: single.then(|| omega_e1(sigma1, f, lambda)),
        omega_unscaled: omega_unscaled(spec, sigma1, f),
        omega_numeric,
        zeta_flag: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::kernel_dim;
    use crate::minimizers::{balanced_minimizer, spectral_summary};
    use crate::model::lambda_of;
    use crate::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_data(values: &[f64]) -> DataMatrix {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        DataMatrix::new(m).unwrap()
    }

    fn rank_one(e: usize, h: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Matrix::from_fn(e, 1, |_, _| rng.random::<f64>() - 0.5);
        let v = Matrix::from_fn(1, h, |_, _| rng.random::<f64>() - 0.5);
        DataMatrix::new(u * v).unwrap().normalized().unwrap()
    }

    #[test]
    fn explicit_examples() {
        let s = spectral_summary(&diag_data(&[1.0]), 3, 1.0).unwrap();
        assert!((omega_explicit(&s) - 0.5).abs() < 1e-15);

        let s = spectral_summary(&diag_data(&[3.0, 1.0]), 2, 1.0).unwrap();
        assert!(omega_explicit(&s).abs() < 1e-14);

        let s = spectral_summary(&diag_data(&[5.0, 3.0, 2.0]), 2, 0.0).unwrap();
        assert_eq!(s.rho, 2);
        assert!((omega_explicit(&s) - 2.0).abs() < 1e-14);
        let s = spectral_summary(&diag_data(&[5.0, 3.0]), 2, 0.0).unwrap();
        assert!((omega_explicit(&s) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn e1_examples() {
        assert_eq!(omega_e1(1.0, 5, 0.0), 0.0);
        assert!((omega_e1(1.0, 20, 3.0 / 7.0) - 6.0 / 143.0).abs() < 1e-15);
        let big = omega_e1(1.0, 1_000_000, 0.5);
        assert!((big * 1e6 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn unscaled_examples() {
        for v in [Variant::Dropout, Variant::Dropconnect] {
            assert_eq!(
                omega_unscaled(&DropoutSpec::new(v, 1.0).unwrap(), 1.0, 7),
                0.0
            );
        }
        let spec = DropoutSpec::new(Variant::Dropout, 0.7).unwrap();
        assert!((omega_unscaled(&spec, 1.0, 20) - 0.42 / 14.3).abs() < 1e-15);
        assert!((omega_unscaled(&spec, 1.0, 20) - 0.7 * 6.0 / 143.0).abs() < 1e-15);
        let spec = DropoutSpec::new(Variant::Dropconnect, 0.5).unwrap();
        assert!((omega_unscaled(&spec, 1.0, 4) - 0.375 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn unscaled_is_rescaled_e1() {
        for v in [Variant::Dropout, Variant::Dropconnect] {
            for p in [0.05, 0.3, 0.5, 0.77, 0.99] {
                for f in [1, 3, 40] {
                    let spec = DropoutSpec::new(v, p).unwrap();
                    let lam = lambda_of(v, p).unwrap();
                    let lhs = omega_unscaled(&spec, 1.3, f);
                    let rhs = spec.rate_scale() * omega_e1(1.3, f, lam);
                    assert!(
                        (lhs - rhs).abs() <= 1e-14 * rhs.abs().max(1e-300),
                        "{v} {p} {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn optimal_p_examples() {
        assert!((optimal_p(Variant::Dropout, 4).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(optimal_p(Variant::Dropout, 1).unwrap(), 0.5);
        assert!(
            (optimal_p(Variant::Dropconnect, 4).unwrap() - 0.577_350_269_189_625_8).abs() < 1e-15
        );
        assert!(optimal_p(Variant::Dropout, 0).is_err());
    }

    #[test]
    fn optimal_p_is_grid_argmax() {
        for v in [Variant::Dropout, Variant::Dropconnect] {
            for f in [1, 2, 4, 16, 64] {
                let mut best = (0.0, f64::NEG_INFINITY);
                for k in 1..10_000 {
                    let p = k as f64 * 1e-4;
                    let w = omega_unscaled(&DropoutSpec::new(v, p).unwrap(), 1.0, f);
                    if w > best.1 {
                        best = (p, w);
                    }
                }
                assert!((best.0 - optimal_p(v, f).unwrap()).abs() <= 1e-4 + 1e-12);
            }
        }
    }

    #[test]
    fn e1_monotone() {
        let lambdas: Vec<f64> = (0..50).map(|k| k as f64 * 0.2).collect();
        for w in lambdas.windows(2) {
            assert!(omega_e1(1.0, 5, w[1]) > omega_e1(1.0, 5, w[0]));
        }
        for f in 1..50 {
            assert!(omega_e1(1.0, f + 1, 0.7) < omega_e1(1.0, f, 0.7));
        }
    }

    #[test]
    fn numeric_rate_at_single_output_minimizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (f, h) in [(2, 3), (4, 5), (8, 4), (5, 1)] {
            let y = rank_one(1, h, f as u64);
            for p in [0.3, 0.5, 0.7] {
                let lam = lambda_of(Variant::Dropout, p).unwrap();
                let m = balanced_minimizer(&y, f, lam, &mut rng).unwrap();
                let (w, kernel) = omega_numeric_with_kernel(&y, &m, lam, None).unwrap();
                let e1 = omega_e1(1.0, f, lam);
                assert!(w > 0.0);
                assert!(w >= e1 - 1e-8, "f={f} p={p}: {w} < {e1}");
                let h_mat = hessian_scaled(&y, &m.weights, lam).unwrap();
                let tau = default_kernel_tau(&spectrum(&h_mat).unwrap());
                assert_eq!(kernel, kernel_dim(&h_mat, tau).unwrap());
            }
        }
    }

    #[test]
    fn numeric_rate_positive_on_general_minimizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..10 {
            let e = rng.random_range(1..=3);
            let h = rng.random_range(1..=4);
            let y =
                DataMatrix::new(Matrix::from_fn(e, h, |_, _| rng.random::<f64>() - 0.5)).unwrap();
            let f = rng.random_range(1..=4);
            let lam = rng.random_range(0.1..2.0);
            let m = balanced_minimizer(&y, f, lam, &mut rng).unwrap();
            assert!(omega_numeric(&y, &m, lam, None).unwrap() > 0.0);
        }
    }

    #[test]
    fn report_fields() {
        let y = rank_one(1, 4, 1);
        let spec = DropoutSpec::new(Variant::Dropout, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = balanced_minimizer(&y, 3, spec.lambda(), &mut rng).unwrap();
        let r = rate_report(&y, &spec, 3, Some(&m), None).unwrap();
        assert!(r.zeta_flag);
        let e1 = r.omega_e1.unwrap();
        assert!((r.omega_unscaled - 0.5 * e1).abs() < 1e-15);
        assert!(r.omega_numeric.is_some());

        let y = diag_data(&[2.0, 1.0]);
        let r = rate_report(&y, &spec, 3, None, None).unwrap();
        assert!(r.omega_e1.is_none() && r.omega_numeric.is_none());
    }

    #[test]
    fn single_output_kernel_is_the_diagonal_orbit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for f in [2, 3, 4] {
            let y = rank_one(1, 3, 40 + f as u64);
            let lam = lambda_of(Variant::Dropout, 0.6).unwrap();
            let m = balanced_minimizer(&y, f, lam, &mut rng).unwrap();
            let h = hessian_scaled(&y, &m.weights, lam).unwrap();
            assert_eq!(kernel_dim(&h, 1e-6).unwrap(), f);

            // Tangents to t ↦ (W2 e^{tE_i}, e^{-tE_i} W1) span an f-dimensional null space.
            let dims = m.weights.dims();
            let mut basis = Matrix::zeros(dims.n_params(), f);
            for i in 0..f {
                let mut t = crate::model::Weights::zeros(dims);
                t.w2.set_column(i, &m.weights.w2.column(i));
                t.w1.set_row(i, &(-m.weights.w1.row(i)));
                let v = t.to_vector();
                let hv = &h.matrix * Matrix::from_column_slice(v.len(), 1, &v);
                assert!(hv.norm() < 1e-12);
                basis.set_column(i, &Matrix::from_column_slice(v.len(), 1, &v).column(0));
            }
            let sv = basis.singular_values();
            assert!(sv.min() > 1e-3, "orbit tangents dependent: {sv:?}");
        }
    }
}
