//! Exact first and second derivatives.
//!
//! Vectorized coordinates always list `vec(W1)` before `vec(W2)`, each in
//! column-major order, matching [`Weights::to_vector`].

use nalgebra::SymmetricEigen;
use rand::Rng;

use crate::model::{check_shapes, sample_mask, DataMatrix, Dims, DropoutSpec, MaskSample, Weights};
use crate::{Error, Matrix, Result};

/// Gradient with the same shapes as the [`Weights`] it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub g2: Matrix,
    pub g1: Matrix,
}

impl Gradient {
    pub fn frobenius_norm(&self) -> f64 {
        (self.g2.norm_squared() + self.g1.norm_squared()).sqrt()
    }

    /// Views the gradient as a weights-shaped direction.
    pub fn as_weights(&self) -> Weights {
        Weights {
            w2: self.g2.clone(),
            w1: self.g1.clone(),
        }
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.as_weights().to_vector()
    }

    pub fn is_finite(&self) -> bool {
        self.g2.iter().chain(self.g1.iter()).all(|x| x.is_finite())
    }
}

/// Gradient of `||Y - a W2W1||² + b·Tr[Diag(W2ᵀW2)Diag(W1W1ᵀ)]`.
pub(crate) fn regularized_grad(y: &DataMatrix, w: &Weights, a: f64, b: f64) -> Result<Gradient> {
    check_shapes(y, w)?;
    let residual = y.values() - w.product() * a;
    let mut g1 = w.w2.tr_mul(&residual) * (-2.0 * a);
    let mut g2 = (&residual * w.w1.transpose()) * (-2.0 * a);
    if b != 0.0 {
        for (i, c) in w.out_norms_sq().into_iter().enumerate() {
            let mut row = g1.row_mut(i);
            row += w.w1.row(i) * (2.0 * b * c);
        }
        for (i, d) in w.in_norms_sq().into_iter().enumerate() {
            g2.column_mut(i).axpy(2.0 * b * d, &w.w2.column(i), 1.0);
        }
    }
    Ok(Gradient { g2, g1 })
}

/// Gradient of the scaled risk `I`.
pub fn grad_scaled(y: &DataMatrix, w: &Weights, lambda: f64) -> Result<Gradient> {
    regularized_grad(y, w, 1.0, lambda)
}

/// Gradient of the closed-form dropout objective `J`.
pub fn grad_dropout(y: &DataMatrix, w: &Weights, spec: &DropoutSpec) -> Result<Gradient> {
    let (a, b) = spec.coefficients();
    regularized_grad(y, w, a, b)
}

/// Gradient with respect to `W` of `R(F ⊙ W)` for a fixed mask.
pub fn masked_risk_gradient(y: &DataMatrix, w: &Weights, mask: &MaskSample) -> Result<Gradient> {
    check_shapes(y, w)?;
    let masked = mask.apply(w);
    let residual = y.values() - masked.product() * 1.0;
    let g1 = (masked.w2.tr_mul(&residual) * -2.0).component_mul(&mask.f1);
    let g2 = ((&residual * masked.w1.transpose()) * -2.0).component_mul(&mask.f2);
    Ok(Gradient { g2, g1 })
}

/// One realization of the random update direction: draws a mask and
/// differentiates the masked plain risk. Its expectation is [`grad_dropout`].
pub fn stochastic_direction<R: Rng + ?Sized>(
    y: &DataMatrix,
    w: &Weights,
    spec: &DropoutSpec,
    rng: &mut R,
) -> Result<Gradient> {
    check_shapes(y, w)?;
    let mask = sample_mask(spec, w.dims(), rng);
    masked_risk_gradient(y, w, &mask)
}

/// Dense Hessian of the scaled risk in `(vec(W1), vec(W2))` coordinates.
#[derive(Debug, Clone)]
pub struct HessianMatrix {
    pub matrix: Matrix,
    pub dims: Dims,
}

impl HessianMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `vᵀ H v` for a direction in vectorized coordinates.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(v);
        v.dot(&(&self.matrix * &v))
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }
}

/// Assembles `∇²I(W)` from its four blocks.
///
/// The cross block uses the residual `Y - W2W1` at the given point, so the
/// matrix is the true Hessian everywhere, not only at minimizers.
pub fn hessian_scaled(y: &DataMatrix, w: &Weights, lambda: f64) -> Result<HessianMatrix> {
    check_shapes(y, w)?;
    let dims = w.dims();
    let Dims { e, f, h } = dims;
    let n1 = f * h;
    let d = dims.n_params();
    let mut hess = Matrix::zeros(d, d);

    let residual = y.values() - w.product();
    let gram2 = w.w2.tr_mul(&w.w2); // W2ᵀW2, f×f
    let gram1 = &w.w1 * w.w1.transpose(); // W1W1ᵀ, f×f
    let c = w.out_norms_sq();
    let dn = w.in_norms_sq();

    let idx1 = |k: usize, l: usize| k + f * l;
    let idx2 = |a: usize, b: usize| n1 + a + e * b;

    // ∂²/∂W1∂W1 = 2 I_h ⊗ (W2ᵀW2 + λ Diag(W2ᵀW2))
    for l in 0..h {
        for k in 0..f {
            for m in 0..f {
                let mut val = 2.0 * gram2[(k, m)];
                if k == m {
                    val += 2.0 * lambda * c[k];
                }
                hess[(idx1(k, l), idx1(m, l))] = val;
            }
        }
    }

    // ∂²/∂W2∂W2 = 2 (W1W1ᵀ + λ Diag(W1W1ᵀ)) ⊗ I_e
    for b in 0..f {
        for bb in 0..f {
            let mut val = 2.0 * gram1[(b, bb)];
            if b == bb {
                val += 2.0 * lambda * dn[b];
            }
            for a in 0..e {
                hess[(idx2(a, b), idx2(a, bb))] = val;
            }
        }
    }

    // ∂²/∂W1[k,l]∂W2[a,b] = -2 δ_bk R[a,l] + 2 W2[a,k] W1[b,l] + 4λ δ_bk W2[a,k] W1[k,l]
    for l in 0..h {
        for k in 0..f {
            let r1 = idx1(k, l);
            for b in 0..f {
                for a in 0..e {
                    let mut val = 2.0 * w.w2[(a, k)] * w.w1[(b, l)];
                    if b == k {
                        val += -2.0 * residual[(a, l)] + 4.0 * lambda * w.w2[(a, k)] * w.w1[(k, l)];
                    }
                    let r2 = idx2(a, b);
                    hess[(r1, r2)] = val;
                    hess[(r2, r1)] = val;
                }
            }
        }
    }

    Ok(HessianMatrix { matrix: hess, dims })
}

/// Evaluates the Hessian bilinear form `∇²I(W)[V, V]` term by term:
///
/// ```text
/// 2||W2V1 + V2W1||² + 2λTr[V1ᵀ Diag(W2ᵀW2) V1] + 2λTr[V2 Diag(W1W1ᵀ) V2ᵀ]
///   - 4Tr[V1ᵀV2ᵀ(Y - W2W1)]
///   + 2λ(||Diag(V2ᵀW2) + Diag(W1V1ᵀ)||² - ||Diag(V2ᵀW2) - Diag(W1V1ᵀ)||²)
/// ```
pub fn hessian_bilinear(y: &DataMatrix, w: &Weights, lambda: f64, v: &Weights) -> Result<f64> {
    check_shapes(y, w)?;
    if v.dims() != w.dims() {
        return Err(Error::shape("direction must have the shape of the weights"));
    }
    let residual = y.values() - w.product();
    let mixed = &w.w2 * &v.w1 + &v.w2 * &w.w1;
    let c = w.out_norms_sq();
    let dn = w.in_norms_sq();

    let mut total = 2.0 * mixed.norm_squared();
    // Tr[V1ᵀ Diag(c) V1] = Σ_i c_i ||V1[i,:]||²
    let reg1: f64 =
        v.w1.row_iter()
            .zip(&c)
            .map(|(row, ci)| ci * row.norm_squared())
            .sum();
    // Tr[V2 Diag(d) V2ᵀ] = Σ_i d_i ||V2[:,i]||²
    let reg2: f64 =
        v.w2.column_iter()
            .zip(&dn)
            .map(|(col, di)| di * col.norm_squared())
            .sum();
    total += 2.0 * lambda * (reg1 + reg2);
    total -= 4.0 * (&v.w2 * &v.w1).dot(&residual);

    let mut plus = 0.0;
    let mut minus = 0.0;
    for i in 0..w.hidden_width() {
        let out_i = v.w2.column(i).dot(&w.w2.column(i));
        let in_i = w.w1.row(i).dot(&v.w1.row(i));
        plus += (out_i + in_i).powi(2);
        minus += (out_i - in_i).powi(2);
    }
    total += 2.0 * lambda * (plus - minus);
    Ok(total)
}

/// Central-difference gradient of an arbitrary objective.
pub fn fd_gradient<F>(objective: F, w: &Weights, step: f64) -> Gradient
where
    F: Fn(&Weights) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let dims = w.dims();
    let base = w.to_vector();
    let mut probe = base.clone();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let up = objective(&Weights::from_vector(dims, &probe).expect("same dims"));
        probe[i] = base[i] - step;
        let down = objective(&Weights::from_vector(dims, &probe).expect("same dims"));
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    let g = Weights::from_vector(dims, &grad).expect("same dims");
    Gradient { g2: g.w2, g1: g.w1 }
}

/// Second central difference of `objective` along `v`: approximates `vᵀ∇²f v`.
pub fn fd_quadratic<F>(objective: F, w: &Weights, v: &Weights, step: f64) -> f64
where
    F: Fn(&Weights) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let up = objective(&w.axpy(step, v));
    let mid = objective(w);
    let down = objective(&w.axpy(-step, v));
    (up - 2.0 * mid + down) / (step * step)
}

/// Eigenvalues in ascending order.
pub fn spectrum(h: &HessianMatrix) -> Result<Vec<f64>> {
    symmetric_eigenvalues(&h.matrix)
}

pub(crate) fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape("eigenvalues need a square matrix"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if vals.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "eigensolver returned non-finite values".into(),
        ));
    }
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

/// Default kernel cut: `1e-6` times the spectral radius.
pub fn default_kernel_tau(eigenvalues: &[f64]) -> f64 {
    1e-6 * eigenvalues.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Number of eigenvalues with `|λ| < tau`.
pub fn kernel_dim(h: &HessianMatrix, tau: f64) -> Result<usize> {
    Ok(spectrum(h)?.iter().filter(|x| x.abs() < tau).count())
}
