//! Gaussian-measure integrals over local fields.
//!
//! For the activation `g(x) = erf(x / sqrt(2))` every average that enters the
//! order-parameter equations reduces to one of four low-dimensional integrals
//! over a zero-mean Gaussian with covariance `c`:
//!
//! | kind       | integrand                 | dim |
//! |------------|---------------------------|-----|
//! | `I2`       | `g(a) g(b)`               | 2   |
//! | `I2Prime`  | `g'(a) g'(b)`             | 2   |
//! | `I3`       | `g'(a) b g(c)`            | 3   |
//! | `I4`       | `g'(a) g'(b) g(c) g(d)`   | 4   |
//!
//! All four have closed forms. The [`quadrature`] submodule evaluates the same
//! expectations by tensor-product Gauss-Hermite quadrature and is used only to
//! certify the closed forms.

pub mod quadrature;

use std::f64::consts::{FRAC_2_PI, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{LabError, Result};

pub use quadrature::{default_nodes, quadrature_oracle, quadrature_oracle_with, GaussHermite, DEFAULT_NODES};

/// Slack allowed on Cauchy-Schwarz / arcsin-domain checks.
pub const DOMAIN_TOL: f64 = 1e-10;

/// `g(x) = erf(x / sqrt 2)`.
#[inline]
pub fn erf_act(x: f64) -> f64 {
    libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `g'(x) = sqrt(2/pi) exp(-x^2/2)`.
#[inline]
pub fn erf_act_deriv(x: f64) -> f64 {
    (2.0 / PI).sqrt() * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum IntegralKind {
    I2,
    I2Prime,
    I3,
    I4,
}

impl IntegralKind {
    pub const ALL: [IntegralKind; 4] = [
        IntegralKind::I2,
        IntegralKind::I2Prime,
        IntegralKind::I3,
        IntegralKind::I4,
    ];

    pub fn dim(self) -> usize {
        match self {
            IntegralKind::I2 | IntegralKind::I2Prime => 2,
            IntegralKind::I3 => 3,
            IntegralKind::I4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntegralKind::I2 => "I2",
            IntegralKind::I2Prime => "I2prime",
            IntegralKind::I3 => "I3",
            IntegralKind::I4 => "I4",
        }
    }
}

/// What a covariance row contributes to the integrand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgRole {
    /// `g(x)`
    Act,
    /// `g'(x)`
    ActDeriv,
    /// `x`
    Linear,
}

impl ArgRole {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ArgRole::Act => erf_act(x),
            ArgRole::ActDeriv => erf_act_deriv(x),
            ArgRole::Linear => x,
        }
    }
}

/// Integral kind plus the role of each covariance row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegralSpec {
    pub kind: IntegralKind,
    pub arg_roles: Vec<ArgRole>,
}

impl IntegralSpec {
    pub fn new(kind: IntegralKind) -> Self {
        use ArgRole::*;
        let arg_roles = match kind {
            IntegralKind::I2 => vec![Act, Act],
            IntegralKind::I2Prime => vec![ActDeriv, ActDeriv],
            IntegralKind::I3 => vec![ActDeriv, Linear, Act],
            IntegralKind::I4 => vec![ActDeriv, ActDeriv, Act, Act],
        };
        IntegralSpec { kind, arg_roles }
    }

    pub fn dim(&self) -> usize {
        self.arg_roles.len()
    }
}

/// Covariance of a selection of local fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CovBlock {
    c: DMatrix<f64>,
}

impl CovBlock {
    /// Validates symmetry and positive semidefiniteness (eigenvalues >= -1e-10).
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() != c.ncols() {
            return Err(LabError::Shape(format!(
                "covariance must be square, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        let n = c.nrows();
        for i in 0..n {
            for j in 0..i {
                let scale = 1.0 + c[(i, j)].abs().max(c[(j, i)].abs());
                if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 * scale {
                    return Err(LabError::NotPsd(format!(
                        "entry ({i},{j}) = {} differs from ({j},{i}) = {}",
                        c[(i, j)],
                        c[(j, i)]
                    )));
                }
            }
        }
        if n > 0 {
            let min_eig = c.clone().symmetric_eigenvalues().min();
            if min_eig < -DOMAIN_TOL {
                return Err(LabError::NotPsd(format!("minimum eigenvalue {min_eig:e}")));
            }
        }
        Ok(CovBlock { c })
    }

    /// Skips validation; for blocks read off an already validated matrix.
    pub fn new_unchecked(c: DMatrix<f64>) -> Self {
        CovBlock { c }
    }

    pub fn from_rows<const D: usize>(rows: [[f64; D]; D]) -> Result<Self> {
        Self::new(DMatrix::from_fn(D, D, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.c[(i, j)]
    }

    fn array<const D: usize>(&self, kind: IntegralKind) -> Result<[[f64; D]; D]> {
        if self.dim() != D {
            return Err(LabError::Shape(format!(
                "{} needs a {D}x{D} covariance, got {}x{}",
                kind.name(),
                self.dim(),
                self.dim()
            )));
        }
        let mut a = [[0.0; D]; D];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.c[(i, j)];
            }
        }
        Ok(a)
    }
}

/// `<g(a) g(b)>`
pub fn i2(c: &CovBlock) -> Result<f64> {
    let a = c.array::<2>(IntegralKind::I2)?;
    i2_raw(a[0][0], a[1][1], a[0][1])
}

/// `<g'(a) g'(b)>`
pub fn i2_prime(c: &CovBlock) -> Result<f64> {
    let a = c.array::<2>(IntegralKind::I2Prime)?;
    i2_prime_raw(a[0][0], a[1][1], a[0][1])
}

/// `<g'(a) b g(c)>`, rows ordered (g' argument, linear argument, g argument).
pub fn i3(c: &CovBlock) -> Result<f64> {
    let a = c.array::<3>(IntegralKind::I3)?;
    i3_raw(&a)
}

/// `<g'(a) g'(b) g(c) g(d)>`, rows ordered (g', g', g, g).
pub fn i4(c: &CovBlock) -> Result<f64> {
    let a = c.array::<4>(IntegralKind::I4)?;
    i4_raw(&a)
}

/// Dispatch on kind; used by the validation suite.
pub fn closed_form(kind: IntegralKind, c: &CovBlock) -> Result<f64> {
    match kind {
        IntegralKind::I2 => i2(c),
        IntegralKind::I2Prime => i2_prime(c),
        IntegralKind::I3 => i3(c),
        IntegralKind::I4 => i4(c),
    }
}

#[inline]
pub(crate) fn i2_raw(c11: f64, c22: f64, c12: f64) -> Result<f64> {
    if c11 < -DOMAIN_TOL || c22 < -DOMAIN_TOL {
        return Err(LabError::NotPsd(format!("negative variance ({c11}, {c22})")));
    }
    if c12.abs() > (c11.max(0.0) * c22.max(0.0)).sqrt() + DOMAIN_TOL {
        return Err(LabError::NotPsd(format!(
            "|c12| = {} exceeds sqrt(c11 c22) = {}",
            c12.abs(),
            (c11 * c22).sqrt()
        )));
    }
    if c12 == 0.0 {
        return Ok(0.0);
    }
    let arg = c12 / ((1.0 + c11) * (1.0 + c22)).sqrt();
    Ok(FRAC_2_PI * arg.clamp(-1.0, 1.0).asin())
}

#[inline]
pub(crate) fn i2_prime_raw(c11: f64, c22: f64, c12: f64) -> Result<f64> {
    let det = (1.0 + c11) * (1.0 + c22) - c12 * c12;
    if det <= 0.0 || !det.is_finite() {
        return Err(LabError::NotPsd(format!("det(I + c) = {det}")));
    }
    Ok(FRAC_2_PI / det.sqrt())
}

#[inline]
pub(crate) fn i3_raw(c: &[[f64; 3]; 3]) -> Result<f64> {
    check_psd_small(c)?;
    let p11 = 1.0 + c[0][0];
    let lambda3 = p11 * (1.0 + c[2][2]) - c[0][2] * c[0][2];
    if lambda3 <= 0.0 {
        return Err(LabError::NotPsd(format!("Lambda3 = {lambda3}")));
    }
    Ok(FRAC_2_PI * (c[1][2] * p11 - c[0][1] * c[0][2]) / (p11 * lambda3.sqrt()))
}

#[inline]
pub(crate) fn i4_raw(c: &[[f64; 4]; 4]) -> Result<f64> {
    check_psd_small(c)?;
    let (c11, c22, c33, c44) = (c[0][0], c[1][1], c[2][2], c[3][3]);
    let (c12, c13, c14) = (c[0][1], c[0][2], c[0][3]);
    let (c23, c24, c34) = (c[1][2], c[1][3], c[2][3]);
    let p1 = 1.0 + c11;
    let p2 = 1.0 + c22;
    let lambda4 = p1 * p2 - c12 * c12;
    let lambda0 =
        lambda4 * c34 - c23 * c24 * p1 - c13 * c14 * p2 + c12 * c13 * c24 + c12 * c14 * c23;
    let lambda1 = lambda4 * (1.0 + c33) - c23 * c23 * p1 - c13 * c13 * p2 + 2.0 * c12 * c13 * c23;
    let lambda2 = lambda4 * (1.0 + c44) - c24 * c24 * p1 - c14 * c14 * p2 + 2.0 * c12 * c14 * c24;
    if lambda4 <= 0.0 || lambda1 * lambda2 <= 0.0 {
        return Err(LabError::NotPsd(format!(
            "Lambda4 = {lambda4}, Lambda1 Lambda2 = {}",
            lambda1 * lambda2
        )));
    }
    let arg = lambda0 / (lambda1 * lambda2).sqrt();
    let arg = clamp_unit(arg)?;
    Ok(4.0 / (PI * PI) / lambda4.sqrt() * arg.asin())
}

fn clamp_unit(x: f64) -> Result<f64> {
    if x.abs() > 1.0 + DOMAIN_TOL || x.is_nan() {
        return Err(LabError::NotPsd(format!("arcsin argument {x} outside [-1, 1]")));
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// Pivoted-free Cholesky sweep that accepts singular PSD matrices.
fn check_psd_small<const D: usize>(c: &[[f64; D]; D]) -> Result<()> {
    let scale = (0..D).fold(1.0f64, |s, i| s.max(c[i][i].abs()));
    let tol = DOMAIN_TOL * scale;
    let mut l = [[0.0f64; D]; D];
    for j in 0..D {
        let d = c[j][j] - (0..j).map(|p| l[j][p] * l[j][p]).sum::<f64>();
        if d < -tol || d.is_nan() {
            return Err(LabError::NotPsd(format!("pivot {j} = {d:e}")));
        }
        if d <= tol {
            // zero pivot: the rest of the column must vanish too, up to
            // Cauchy-Schwarz against the pivot tolerance
            for i in j + 1..D {
                let r = c[i][j] - (0..j).map(|p| l[i][p] * l[j][p]).sum::<f64>();
                let di = c[i][i] - (0..j).map(|p| l[i][p] * l[i][p]).sum::<f64>();
                if r * r > (d.max(0.0) + tol) * (di.max(0.0) + tol) * (1.0 + 1e-9) {
                    return Err(LabError::NotPsd(format!(
                        "zero pivot {j} with residual coupling {r:e} to row {i}"
                    )));
                }
            }
            continue;
        }
        let s = d.sqrt();
        l[j][j] = s;
        for i in j + 1..D {
            let r = c[i][j] - (0..j).map(|p| l[i][p] * l[j][p]).sum::<f64>();
            l[i][j] = r / s;
        }
    }
    Ok(())
}

/// Random covariance with variances drawn from `variance_range` and a random
/// correlation structure. Used by the certification suite and tests.
pub fn random_psd_cov<R: Rng + ?Sized>(
    dim: usize,
    variance_range: (f64, f64),
    rng: &mut R,
) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let s = &a * a.transpose();
    let var = Uniform::new_inclusive(variance_range.0, variance_range.1)
        .expect("valid variance range");
    let sd: Vec<f64> = (0..dim).map(|_| var.sample(rng).sqrt()).collect();
    DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            sd[i] * sd[i]
        } else {
            s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt() * sd[i] * sd[j]
        }
    })
}
