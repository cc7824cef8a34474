//! Domain types and the three objectives.
//!
//! With whitened data `Y ∈ R^{e×h}` and weights `W = (W2, W1)`, the crate works
//! with
//!
//! - the plain risk `R(W) = ||Y - W2 W1||_F^2`,
//! - the dropout objectives `J(W) = ||Y - a W2 W1||_F^2 + b Σ_i ||W2[:,i]||² ||W1[i,:]||²`
//!   with `(a, b) = (p, p - p²)` for Dropout and `(p², p² - p⁴)` for Dropconnect,
//! - the scaled risk `I(W) = ||Y - W2 W1||_F^2 + λ Σ_i ||W2[:,i]||² ||W1[i,:]||²`.
//!
//! The sum `Σ_i ||W2[:,i]||² ||W1[i,:]||²` is `Tr[Diag(W2ᵀW2) Diag(W1W1ᵀ)]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

/// Layer sizes: output `e`, hidden `f`, input `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub e: usize,
    pub f: usize,
    pub h: usize,
}

impl Dims {
    pub fn new(e: usize, f: usize, h: usize) -> Result<Self> {
        if e == 0 || f == 0 || h == 0 {
            return Err(Error::shape(format!(
                "all layer sizes must be ≥ 1, got ({e}, {f}, {h})"
            )));
        }
        Ok(Dims { e, f, h })
    }

    /// Number of scalar parameters `e·f + f·h`.
    pub fn n_params(&self) -> usize {
        self.e * self.f + self.f * self.h
    }
}

/// Whitened target matrix together with its compact SVD `U diag(σ) V`.
///
/// `u` is `e×r` with orthonormal columns, `v` is `r×h` with orthonormal rows,
/// and `sigma` is strictly positive and sorted descending.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    values: Matrix,
    u: Matrix,
    sigma: Vec<f64>,
    v: Matrix,
}

impl DataMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::shape("data matrix must be non-empty"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateData(
                "data matrix has non-finite entries".into(),
            ));
        }
        let (e, h) = values.shape();
        let svd = SVD::new(values.clone(), true, true);
        let u_full = svd
            .u
            .ok_or_else(|| Error::Numeric("SVD did not return U".into()))?;
        let vt_full = svd
            .v_t
            .ok_or_else(|| Error::Numeric("SVD did not return Vᵀ".into()))?;

        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

        let top = order
            .first()
            .map(|&i| svd.singular_values[i])
            .unwrap_or(0.0);
        let cutoff = (e.max(h) as f64) * f64::EPSILON * top;
        let kept: Vec<usize> = order
            .into_iter()
            .filter(|&i| top > 0.0 && svd.singular_values[i] > cutoff)
            .collect();
        let r = kept.len();

        let mut u = Matrix::zeros(e, r);
        let mut v = Matrix::zeros(r, h);
        let mut sigma = Vec::with_capacity(r);
        for (k, &i) in kept.iter().enumerate() {
            u.set_column(k, &u_full.column(i));
            v.set_row(k, &vt_full.row(i));
            sigma.push(svd.singular_values[i]);
        }
        Ok(DataMatrix {
            values,
            u,
            sigma,
            v,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Left singular vectors, `e×r`.
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    /// Right singular vectors as rows, `r×h`.
    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.norm()
    }

    /// Rescales to unit Frobenius norm.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.frobenius_norm();
        if n == 0.0 {
            return Err(Error::DegenerateData(
                "cannot normalize a zero matrix".into(),
            ));
        }
        Ok(DataMatrix {
            values: &self.values / n,
            u: self.u.clone(),
            sigma: self.sigma.iter().map(|s| s / n).collect(),
            v: self.v.clone(),
        })
    }

    /// `U diag(σ) V`, which reproduces `values` up to rounding.
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.u.clone();
        for (k, s) in self.sigma.iter().enumerate() {
            scaled.column_mut(k).scale_mut(*s);
        }
        scaled * &self.v
    }
}

/// The layer pair `(W2: e×f, W1: f×h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w2: Matrix,
    pub w1: Matrix,
}

impl Weights {
    pub fn new(w2: Matrix, w1: Matrix) -> Result<Self> {
        if w2.ncols() != w1.nrows() {
            return Err(Error::shape(format!(
                "W2 is {}×{} but W1 is {}×{}",
                w2.nrows(),
                w2.ncols(),
                w1.nrows(),
                w1.ncols()
            )));
        }
        if w2.ncols() == 0 || w2.nrows() == 0 || w1.ncols() == 0 {
            return Err(Error::shape("hidden width and layer sizes must be ≥ 1"));
        }
        Ok(Weights { w2, w1 })
    }

    pub fn zeros(dims: Dims) -> Self {
        Weights {
            w2: Matrix::zeros(dims.e, dims.f),
            w1: Matrix::zeros(dims.f, dims.h),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            e: self.w2.nrows(),
            f: self.w2.ncols(),
            h: self.w1.ncols(),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.w2.ncols()
    }

    pub fn product(&self) -> Matrix {
        &self.w2 * &self.w1
    }

    pub fn scaled(&self, k: f64) -> Self {
        Weights {
            w2: &self.w2 * k,
            w1: &self.w1 * k,
        }
    }

    /// `self + t·dir`.
    pub fn axpy(&self, t: f64, dir: &Weights) -> Self {
        Weights {
            w2: &self.w2 + &dir.w2 * t,
            w1: &self.w1 + &dir.w1 * t,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.w2.norm_squared() + self.w1.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.w2.iter().chain(self.w1.iter()).all(|x| x.is_finite())
    }

    /// Flattens to `(vec(W1), vec(W2))` with column-major `vec`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.w1.len() + self.w2.len());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out
    }

    /// Inverse of [`Weights::to_vector`].
    pub fn from_vector(dims: Dims, data: &[f64]) -> Result<Self> {
        if data.len() != dims.n_params() {
            return Err(Error::shape(format!(
                "expected {} entries, got {}",
                dims.n_params(),
                data.len()
            )));
        }
        let n1 = dims.f * dims.h;
        let w1 = Matrix::from_column_slice(dims.f, dims.h, &data[..n1]);
        let w2 = Matrix::from_column_slice(dims.e, dims.f, &data[n1..]);
        Ok(Weights { w2, w1 })
    }

    /// `Diag(W2ᵀW2)`: squared norms of the columns of `W2`.
    pub fn out_norms_sq(&self) -> Vec<f64> {
        self.w2.column_iter().map(|c| c.norm_squared()).collect()
    }

    /// `Diag(W1W1ᵀ)`: squared norms of the rows of `W1`.
    pub fn in_norms_sq(&self) -> Vec<f64> {
        self.w1.row_iter().map(|r| r.norm_squared()).collect()
    }

    /// `Tr[Diag(W2ᵀW2) Diag(W1W1ᵀ)]`.
    pub fn diag_penalty(&self) -> f64 {
        self.out_norms_sq()
            .iter()
            .zip(self.in_norms_sq())
            .map(|(c, d)| c * d)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Hidden nodes are dropped.
    Dropout,
    /// Individual edges are dropped.
    Dropconnect,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Dropout => f.write_str("dropout"),
            Variant::Dropconnect => f.write_str("dropconnect"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dropout" => Ok(Variant::Dropout),
            "dropconnect" => Ok(Variant::Dropconnect),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Regularization strength `λ` for a retain probability `p ∈ (0, 1]`.
pub fn lambda_of(variant: Variant, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(match variant {
        Variant::Dropout => (1.0 - p) / p,
        Variant::Dropconnect => (1.0 - p * p) / (p * p),
    })
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!(
            "retain probability must lie in (0, 1], got {p}"
        )));
    }
    Ok(())
}

/// Algorithm variant plus retain probability. `λ` is always derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    variant: Variant,
    p: f64,
}

impl DropoutSpec {
    pub fn new(variant: Variant, p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(DropoutSpec { variant, p })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda(&self) -> f64 {
        lambda_of(self.variant, self.p).expect("p validated at construction")
    }

    /// `(a, b)` such that `J(W) = ||Y - a W2W1||² + b·Tr[Diag(W2ᵀW2)Diag(W1W1ᵀ)]`.
    pub fn coefficients(&self) -> (f64, f64) {
        let p = self.p;
        match self.variant {
            Variant::Dropout => (p, p - p * p),
            Variant::Dropconnect => (p * p, p * p - p.powi(4)),
        }
    }

    /// Factor `k` with `J(W) = I(k·W)`: `√p` for Dropout, `p` for Dropconnect.
    pub fn weight_scale(&self) -> f64 {
        match self.variant {
            Variant::Dropout => self.p.sqrt(),
            Variant::Dropconnect => self.p,
        }
    }

    /// Factor by which rates of the scaled risk shrink for `J`: `p` resp. `p²`.
    pub fn rate_scale(&self) -> f64 {
        let k = self.weight_scale();
        k * k
    }
}

/// Binary masks `(F2: e×f, F1: f×h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub f2: Matrix,
    pub f1: Matrix,
}

impl MaskSample {
    pub fn ones(dims: Dims) -> Self {
        MaskSample {
            f2: Matrix::from_element(dims.e, dims.f, 1.0),
            f1: Matrix::from_element(dims.f, dims.h, 1.0),
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        MaskSample {
            f2: Matrix::zeros(dims.e, dims.f),
            f1: Matrix::zeros(dims.f, dims.h),
        }
    }

    /// `F ⊙ W`.
    pub fn apply(&self, w: &Weights) -> Weights {
        Weights {
            w2: w.w2.component_mul(&self.f2),
            w1: w.w1.component_mul(&self.f1),
        }
    }
}

/// Draws one mask. Dropout ties column `i` of `F2` and row `i` of `F1` to a
/// single Bernoulli(p) draw for hidden node `i`; Dropconnect draws every
/// entry independently.
pub fn sample_mask<R: Rng + ?Sized>(spec: &DropoutSpec, dims: Dims, rng: &mut R) -> MaskSample {
    let p = spec.p();
    match spec.variant() {
        Variant::Dropout => {
            let mut mask = MaskSample::zeros(dims);
            for i in 0..dims.f {
                if rng.random_bool(p) {
                    mask.f2.column_mut(i).fill(1.0);
                    mask.f1.row_mut(i).fill(1.0);
                }
            }
            mask
        }
        Variant::Dropconnect => {
            let mut draw = |_, _| if rng.random_bool(p) { 1.0 } else { 0.0 };
            let f2 = Matrix::from_fn(dims.e, dims.f, &mut draw);
            let f1 = Matrix::from_fn(dims.f, dims.h, &mut draw);
            MaskSample { f2, f1 }
        }
    }
}

pub(crate) fn check_shapes(y: &DataMatrix, w: &Weights) -> Result<()> {
    if w.w2.nrows() != y.nrows() || w.w1.ncols() != y.ncols() {
        return Err(Error::shape(format!(
            "Y is {}×{} but W2·W1 is {}×{}",
            y.nrows(),
            y.ncols(),
            w.w2.nrows(),
            w.w1.ncols()
        )));
    }
    if w.w2.ncols() != w.w1.nrows() {
        return Err(Error::shape("W2 and W1 disagree on the hidden width"));
    }
    Ok(())
}

/// `||Y - a W2W1||² + b·Tr[Diag(W2ᵀW2)Diag(W1W1ᵀ)]`.
pub(crate) fn regularized_risk(y: &DataMatrix, w: &Weights, a: f64, b: f64) -> Result<f64> {
    check_shapes(y, w)?;
    let residual = y.values() - w.product() * a;
    let penalty = if b == 0.0 { 0.0 } else { b * w.diag_penalty() };
    Ok(residual.norm_squared() + penalty)
}

/// `R(W) = ||Y - W2W1||_F²`.
pub fn plain_risk(y: &DataMatrix, w: &Weights) -> Result<f64> {
    regularized_risk(y, w, 1.0, 0.0)
}

/// Closed form of `E[R(F ⊙ W)]` for the given variant and retain probability.
pub fn dropout_objective(y: &DataMatrix, w: &Weights, spec: &DropoutSpec) -> Result<f64> {
    let (a, b) = spec.coefficients();
    regularized_risk(y, w, a, b)
}

/// `I(W) = ||Y - W2W1||² + λ·Tr[Diag(W2ᵀW2)Diag(W1W1ᵀ)]`.
pub fn scaled_risk(y: &DataMatrix, w: &Weights, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("λ must be ≥ 0, got {lambda}")));
    }
    regularized_risk(y, w, 1.0, lambda)
}

/// Maps weights of `J` to weights of `I` so that `J(W) = I(scale_to_scaled(W))`.
pub fn scale_to_scaled(w: &Weights, spec: &DropoutSpec) -> Weights {
    w.scaled(spec.weight_scale())
}

/// Inverse of [`scale_to_scaled`]: turns a point of `I` into the matching point of `J`.
pub fn scale_to_unscaled(w: &Weights, spec: &DropoutSpec) -> Weights {
    w.scaled(1.0 / spec.weight_scale())
}
