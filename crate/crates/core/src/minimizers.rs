//! Closed-form description of the global minimum of the scaled risk and
//! construction of balanced minimizers.
//!
//! For singular values `σ_1 ≥ … ≥ σ_r` of `Y` and hidden width `f`:
//!
//! ```text
//! κ_j = (1/j) Σ_{i≤j} σ_i
//! ρ   = max { j ≤ min(f, r) : σ_j > jλκ_j / (f + jλ) }
//! α   = ρλκ_ρ / (f + ρλ)
//! ```
//!
//! Every global minimizer has product `W2W1 = Σ_{i≤ρ} (σ_i - α) u_i v_iᵀ`, and
//! the balanced ones are `(U Σ₂ S, Sᵀ Σ₁ V)` with `S ∈ O(f)` chosen so that
//! `Diag(Sᵀ diag(σ_1-α, …, σ_ρ-α, 0, …) S)` is constant.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::calculus::grad_scaled;
use crate::model::{DataMatrix, Dims, Weights};
use crate::{Error, Matrix, Result};

/// Threshold below which adjacent singular values count as repeated,
/// relative to `σ_1`.
const REPEATED_SINGULAR_GAP: f64 = 1e-10;

#[derive(Debug, Clone, Serialize)]
pub struct SpectralSummary {
    /// All nonzero singular values of `Y`, descending.
    pub sigma: Vec<f64>,
    /// `κ_1 … κ_{min(f,r)}`.
    pub kappa: Vec<f64>,
    pub rho: usize,
    pub alpha: f64,
    /// `σ_i - α` for `i ≤ ρ`.
    pub sigma_sq: Vec<f64>,
    #[serde(skip)]
    pub min_product: Matrix,
    pub f: usize,
    pub lambda: f64,
    /// Set when two singular values are closer than `1e-10·σ_1`; the
    /// minimizer characterization assumes they are distinct.
    pub repeated_singular_values: bool,
}

impl SpectralSummary {
    /// `σ_{ρ+1}`, or 0 when `ρ = r`.
    pub fn sigma_after_rho(&self) -> f64 {
        self.sigma.get(self.rho).copied().unwrap_or(0.0)
    }

    /// `||Σ²||_1 / f`, the common value of `Diag(W2ᵀW2)` at balanced minimizers.
    pub fn balanced_level(&self) -> f64 {
        self.sigma_sq.iter().sum::<f64>() / self.f as f64
    }

    /// Value of the scaled risk at any global minimizer.
    pub fn min_value(&self, y: &DataMatrix) -> f64 {
        let residual = (y.values() - &self.min_product).norm_squared();
        let level = self.balanced_level();
        residual + self.lambda * self.f as f64 * level * level
    }
}

/// Effective rank, threshold and minimizer product for width `f` and strength `λ`.
pub fn spectral_summary(y: &DataMatrix, f: usize, lambda: f64) -> Result<SpectralSummary> {
    if f == 0 {
        return Err(Error::Domain("hidden width must be ≥ 1".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "λ must be finite and ≥ 0, got {lambda}"
        )));
    }
    let sigma = y.singular_values().to_vec();
    let r = sigma.len();
    if r == 0 {
        return Err(Error::DegenerateData(
            "Y = 0 has no nonzero singular values".into(),
        ));
    }
    let m = f.min(r);
    let ff = f as f64;

    let mut kappa = Vec::with_capacity(m);
    let mut running = 0.0;
    for (j, s) in sigma.iter().take(m).enumerate() {
        running += s;
        kappa.push(running / (j + 1) as f64);
    }

    // ρ is a maximum over all j, not the first failure.
    let mut rho = 0;
    for j in 1..=m {
        let jf = j as f64;
        let threshold = jf * lambda * kappa[j - 1] / (ff + jf * lambda);
        if sigma[j - 1] > threshold {
            rho = j;
        }
    }
    if rho == 0 {
        return Err(Error::Numeric(
            "no singular value exceeds its threshold".into(),
        ));
    }
    let alpha = rho as f64 * lambda * kappa[rho - 1] / (ff + rho as f64 * lambda);
    let sigma_sq: Vec<f64> = sigma[..rho].iter().map(|s| s - alpha).collect();

    let min_product = if rho < f {
        shrink(y, alpha)
    } else {
        // Only the top-f shrunk directions survive.
        truncated_shrink(y, alpha, f)
    };

    let repeated_singular_values = sigma
        .windows(2)
        .any(|w| w[0] - w[1] < REPEATED_SINGULAR_GAP * sigma[0]);

    Ok(SpectralSummary {
        sigma,
        kappa,
        rho,
        alpha,
        sigma_sq,
        min_product,
        f,
        lambda,
        repeated_singular_values,
    })
}

/// Singular value soft-thresholding `U (Σ - αI)₊ V`.
pub fn shrink(y: &DataMatrix, alpha: f64) -> Matrix {
    truncated_shrink(y, alpha, y.rank())
}

fn truncated_shrink(y: &DataMatrix, alpha: f64, keep: usize) -> Matrix {
    let mut out = Matrix::zeros(y.nrows(), y.ncols());
    for (k, s) in y.singular_values().iter().take(keep).enumerate() {
        let shrunk = (s - alpha).max(0.0);
        if shrunk > 0.0 {
            out += (y.u().column(k) * y.v().row(k)) * shrunk;
        }
    }
    out
}

/// `a ≺ b`: sorted prefix sums of `a` never exceed those of `b`, equal totals.
/// Comparisons use `tol·max(1, Σ|b|)`.
pub fn is_majorized(a: &[f64], b: &[f64], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let scale = b.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| y.total_cmp(x));
    sb.sort_by(|x, y| y.total_cmp(x));
    let (mut pa, mut pb) = (0.0, 0.0);
    for (x, y) in sa.iter().zip(&sb) {
        pa += x;
        pb += y;
        if pa > pb + tol * scale {
            return false;
        }
    }
    (pa - pb).abs() <= tol * scale
}

/// Orthogonal `S` with `Diag(Sᵀ diag(b) S) = a`, for `a ≺ b`.
///
/// Each step takes the largest unassigned target `τ`, picks the two free
/// positions whose current diagonal values bracket `τ` most tightly, and
/// applies the plane rotation that moves one of them exactly onto `τ`. The
/// free block stays diagonal throughout, so `f - 1` rotations suffice.
pub fn horn_orthogonal(b: &[f64], a: &[f64], tol: f64) -> Result<Matrix> {
    let n = b.len();
    if a.len() != n || n == 0 {
        return Err(Error::shape(format!(
            "length mismatch: b has {n}, a has {}",
            a.len()
        )));
    }
    if b.iter().chain(a).any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite diagonal entries".into()));
    }
    if !is_majorized(a, b, tol) {
        return Err(Error::Majorization(format!(
            "{a:?} is not majorized by {b:?}"
        )));
    }

    let mut q = Matrix::identity(n, n);
    let mut diag = b.to_vec();
    let mut free: Vec<usize> = (0..n).collect();
    let mut position_of_target = vec![0usize; n];

    let mut targets: Vec<usize> = (0..n).collect();
    targets.sort_by(|&x, &y| a[y].total_cmp(&a[x]).then(x.cmp(&y)));

    for &t in &targets {
        let tau = a[t];
        if free.len() == 1 {
            position_of_target[t] = free[0];
            free.clear();
            break;
        }
        let i = free
            .iter()
            .copied()
            .filter(|&k| diag[k] >= tau)
            .min_by(|&x, &y| diag[x].total_cmp(&diag[y]))
            .unwrap_or_else(|| {
                free.iter()
                    .copied()
                    .max_by(|&x, &y| diag[x].total_cmp(&diag[y]))
                    .expect("non-empty")
            });
        let j = free
            .iter()
            .copied()
            .filter(|&k| k != i && diag[k] <= tau)
            .max_by(|&x, &y| diag[x].total_cmp(&diag[y]))
            .unwrap_or_else(|| {
                free.iter()
                    .copied()
                    .filter(|&k| k != i)
                    .min_by(|&x, &y| diag[x].total_cmp(&diag[y]))
                    .expect("at least two free positions")
            });

        let (x, y) = (diag[i], diag[j]);
        let cos_sq = if x > y {
            ((tau - y) / (x - y)).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let c = cos_sq.sqrt();
        let s = (1.0 - cos_sq).sqrt();
        if s != 0.0 {
            let qi = q.column(i).clone_owned();
            let qj = q.column(j).clone_owned();
            q.set_column(i, &(&qi * c + &qj * s));
            q.set_column(j, &(&qj * c - &qi * s));
        }
        diag[i] = cos_sq * x + (1.0 - cos_sq) * y;
        diag[j] = (1.0 - cos_sq) * x + cos_sq * y;

        position_of_target[t] = i;
        free.retain(|&k| k != i);
    }

    let mut s = Matrix::zeros(n, n);
    for (t, &pos) in position_of_target.iter().enumerate() {
        s.set_column(t, &q.column(pos));
    }

    let scale = b.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    let achieved = rotated_diagonal(&s, b);
    let worst = achieved
        .iter()
        .zip(a)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if worst > tol * scale {
        return Err(Error::Numeric(format!(
            "Horn construction missed its target by {worst:e}"
        )));
    }
    Ok(s)
}

/// `Diag(Sᵀ diag(b) S)`.
pub fn rotated_diagonal(s: &Matrix, b: &[f64]) -> Vec<f64> {
    (0..s.ncols())
        .map(|j| s.column(j).iter().zip(b).map(|(x, bk)| bk * x * x).sum())
        .collect()
}

/// A balanced global minimizer of the scaled risk `I`.
#[derive(Debug, Clone)]
pub struct BalancedMinimizer {
    pub weights: Weights,
    /// Orthogonal mixing factor in `W2 = U Σ₂ S`, `W1 = Sᵀ Σ₁ V`.
    pub s: Matrix,
    pub summary: SpectralSummary,
}

/// Residuals of the optimality and balance conditions at a constructed point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Certificate {
    pub grad_norm: f64,
    /// `||W2W1 - W*||_F`
    pub product_error: f64,
    /// `||Diag(W2ᵀW2) - level·I||_max`
    pub out_diag_error: f64,
    /// `||Diag(W1W1ᵀ) - level·I||_max`
    pub in_diag_error: f64,
    /// `||W2ᵀW2 - W1W1ᵀ||_max`
    pub balance_error: f64,
}

impl Certificate {
    pub fn passes(&self) -> bool {
        self.grad_norm <= 1e-8
            && self.product_error <= 1e-9
            && self.out_diag_error <= 1e-9
            && self.in_diag_error <= 1e-9
            && self.balance_error <= 1e-9
    }
}

impl BalancedMinimizer {
    pub fn certify(&self, y: &DataMatrix) -> Result<Certificate> {
        let w = &self.weights;
        let level = self.summary.balanced_level();
        let grad = grad_scaled(y, w, self.summary.lambda)?;
        let max_dev = |v: Vec<f64>| v.iter().map(|x| (x - level).abs()).fold(0.0, f64::max);
        let gram2 = w.w2.tr_mul(&w.w2);
        let gram1 = &w.w1 * w.w1.transpose();
        Ok(Certificate {
            grad_norm: grad.frobenius_norm(),
            product_error: (w.product() - &self.summary.min_product).norm(),
            out_diag_error: max_dev(w.out_norms_sq()),
            in_diag_error: max_dev(w.in_norms_sq()),
            balance_error: (gram2 - gram1).amax(),
        })
    }
}

/// Builds a balanced minimizer `(U Σ₂ S, Sᵀ Σ₁ V)`.
///
/// `S` comes from [`horn_orthogonal`] and is then randomized with a column
/// permutation and column sign flips, both of which keep the diagonal
/// condition intact. For `ρ = 1` the balanced set is finite and this samples
/// it uniformly; for `ρ > 1` the distribution is not uniform on the set.
pub fn balanced_minimizer<R: Rng + ?Sized>(
    y: &DataMatrix,
    f: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<BalancedMinimizer> {
    let summary = spectral_summary(y, f, lambda)?;
    let rho = summary.rho;
    let level = summary.balanced_level();

    let mut b = vec![0.0; f];
    b[..rho].copy_from_slice(&summary.sigma_sq);
    let a = vec![level; f];
    let horn = horn_orthogonal(&b, &a, 1e-9)?;

    let mut perm: Vec<usize> = (0..f).collect();
    perm.shuffle(rng);
    let mut s = Matrix::zeros(f, f);
    for (col, &src) in perm.iter().enumerate() {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        s.set_column(col, &(horn.column(src) * sign));
    }

    let root: Vec<f64> = summary.sigma_sq.iter().map(|x| x.sqrt()).collect();
    let top = s.rows(0, rho);
    let mut w2 = y.u().columns(0, rho).clone_owned();
    let mut w1 = top.transpose();
    for (k, r) in root.iter().enumerate() {
        w2.column_mut(k).scale_mut(*r);
        w1.column_mut(k).scale_mut(*r);
    }
    let w2 = w2 * top;
    let w1 = w1 * y.v().rows(0, rho);

    Ok(BalancedMinimizer {
        weights: Weights::new(w2, w1)?,
        s,
        summary,
    })
}

/// i.i.d. `Normal(0, σ²)` weights.
pub fn gaussian_init<R: Rng + ?Sized>(dims: Dims, sigma: f64, rng: &mut R) -> Result<Weights> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("σ must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let w2 = Matrix::from_fn(dims.e, dims.f, |_, _| normal.sample(rng));
    let w1 = Matrix::from_fn(dims.f, dims.h, |_, _| normal.sample(rng));
    Weights::new(w2, w1)
}

/// Perturbs every entry of `center` by independent `Normal(0, ε²)` noise.
pub fn epsilon_init<R: Rng + ?Sized>(
    center: &Weights,
    epsilon: f64,
    rng: &mut R,
) -> Result<Weights> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain(format!("ε must be ≥ 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(center.clone());
    }
    let normal = Normal::new(0.0, epsilon).map_err(|e| Error::Domain(e.to_string()))?;
    let w2 = center.w2.map(|x| x + normal.sample(rng));
    let w1 = center.w1.map(|x| x + normal.sample(rng));
    Weights::new(w2, w1)
}
