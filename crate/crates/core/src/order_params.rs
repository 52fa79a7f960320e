//! Macroscopic state, configuration records and the quantities derived from
//! the overlaps alone.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fields::{ErfMoments, FieldCov, LinearMoments, Moments};
use crate::gaussian::CovBlock;

/// Tolerance on `|rho| - 1` before clamping.
pub const RHO_TOL: f64 = 1e-12;

/// Smallest eigenvalue of the block matrix `C` still accepted as PSD.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Erf,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub eta_w: f64,
    #[serde(rename = "eta_J")]
    pub eta_j: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("N", self.n), ("K", self.k), ("M", self.m), ("P", self.p), ("V", self.v)] {
            if value == 0 {
                return Err(LabError::config(name, "must be at least 1"));
            }
        }
        for (name, value) in [("eta_w", self.eta_w), ("eta_J", self.eta_j)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LabError::config(name, format!("must be finite and nonnegative, got {value}")));
            }
        }
        if self.n < 100 {
            warn!("N = {} is small; simulator overlaps fluctuate at O(N^-1/2)", self.n);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub activation: Activation,
    pub gamma: f64,
    pub lambda: f64,
    pub sigma_noise: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            activation: Activation::Erf,
            gamma: 1.0,
            lambda: 0.0,
            sigma_noise: 0.0,
        }
    }
}

impl VariantConfig {
    pub fn linear() -> Self {
        VariantConfig {
            activation: Activation::Linear,
            ..Default::default()
        }
    }

    pub fn l2_noise(lambda: f64, sigma_noise: f64) -> Self {
        VariantConfig {
            lambda,
            sigma_noise,
            ..Default::default()
        }
    }

    pub fn gamma(gamma: f64) -> Self {
        VariantConfig {
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LabError::InvalidVariant(format!("gamma = {} outside [0, 1]", self.gamma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LabError::InvalidVariant(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if !(self.sigma_noise.is_finite() && self.sigma_noise >= 0.0) {
            return Err(LabError::InvalidVariant(format!(
                "sigma_noise = {} must be >= 0",
                self.sigma_noise
            )));
        }
        if self.activation == Activation::Linear
            && (self.gamma != 1.0 || self.lambda != 0.0 || self.sigma_noise != 0.0)
        {
            return Err(LabError::InvalidVariant(
                "linear activation requires gamma = 1, lambda = 0, sigma_noise = 0".into(),
            ));
        }
        if self.gamma < 1.0 && self.lambda > 0.0 {
            return Err(LabError::InvalidVariant(
                "gamma < 1 cannot be combined with lambda > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Overlaps `Q = J J^T`, `R = J B^T`, `T = B B^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderParams {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl OrderParams {
    /// Checks shapes, finiteness, symmetry of Q and T, and that the block
    /// matrix `[[Q, R], [R^T, T]]` is PSD. Q and T are symmetrized.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, t: DMatrix<f64>) -> Result<Self> {
        let p = Self::from_parts(q, r, t)?;
        for (name, m) in [("Q", &p.q), ("T", &p.t)] {
            let scale = m.amax().max(1.0);
            for i in 0..m.nrows() {
                for j in 0..i {
                    if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                        return Err(LabError::Shape(format!("{name} is not symmetric at ({i}, {j})")));
                    }
                }
            }
        }
        let p = OrderParams {
            q: symmetrize(p.q),
            r: p.r,
            t: symmetrize(p.t),
        };
        let min_eig = p.min_eigenvalue();
        if min_eig < -PSD_TOL {
            return Err(LabError::NotPsd(format!("block matrix C has eigenvalue {min_eig:e}")));
        }
        Ok(p)
    }

    fn from_parts(q: DMatrix<f64>, r: DMatrix<f64>, t: DMatrix<f64>) -> Result<Self> {
        let (k, m) = (q.nrows(), t.nrows());
        if k == 0 || m == 0 {
            return Err(LabError::Shape("K and M must be at least 1".into()));
        }
        if q.ncols() != k || t.ncols() != m || r.nrows() != k || r.ncols() != m {
            return Err(LabError::Shape(format!(
                "Q {}x{}, R {}x{}, T {}x{} are inconsistent",
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols(),
                t.nrows(),
                t.ncols()
            )));
        }
        if q.iter().chain(r.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
            return Err(LabError::Shape("non-finite overlap".into()));
        }
        Ok(OrderParams { q, r, t })
    }

    /// Replaces the evolving overlaps, keeping T. Q is symmetrized; PSD is
    /// not checked (the integrator calls this on every stage).
    pub fn with_qr(&self, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let p = Self::from_parts(q, r, self.t.clone())?;
        Ok(OrderParams {
            q: symmetrize(p.q),
            ..p
        })
    }

    /// `Q = I/2`, `R = 1e-12`, `T = diag(1, ..., M)`.
    pub fn fig3_init(k: usize, m: usize) -> Self {
        OrderParams {
            q: DMatrix::identity(k, k) * 0.5,
            r: DMatrix::from_element(k, m, 1e-12),
            t: DMatrix::from_fn(m, m, |i, j| if i == j { (i + 1) as f64 } else { 0.0 }),
        }
    }

    pub fn k(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.t.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn t(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// `C = [[Q, R], [R^T, T]]`.
    pub fn block_matrix(&self) -> DMatrix<f64> {
        let (k, m) = (self.k(), self.m());
        let mut c = DMatrix::zeros(k + m, k + m);
        c.view_mut((0, 0), (k, k)).copy_from(&self.q);
        c.view_mut((0, k), (k, m)).copy_from(&self.r);
        c.view_mut((k, 0), (m, k)).copy_from(&self.r.transpose());
        c.view_mut((k, k), (m, m)).copy_from(&self.t);
        c
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.block_matrix().symmetric_eigenvalues().min()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    NonFinite { alpha: f64 },
    NumericError { alpha: f64, message: String },
}

impl StopReason {
    pub fn is_complete(&self) -> bool {
        matches!(self, StopReason::Completed)
    }
}

/// Recorded samples of an ODE integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub schedule: Vec<f64>,
    pub states: Vec<OrderParams>,
    pub eps_meta: Vec<f64>,
    pub rho: Vec<DMatrix<f64>>,
    pub stop: StopReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }

    pub fn last_state(&self) -> Option<&OrderParams> {
        self.states.last()
    }

    pub fn last_eps(&self) -> Option<f64> {
        self.eps_meta.last().copied()
    }
}

/// Principal submatrix of C over the selected student then teacher fields.
pub fn assemble_covariance(
    params: &OrderParams,
    student_idx: &[usize],
    teacher_idx: &[usize],
) -> Result<CovBlock> {
    let (k, m) = (params.k(), params.m());
    if let Some(&i) = student_idx.iter().find(|&&i| i >= k) {
        return Err(LabError::IndexOutOfRange {
            what: "student",
            index: i,
            bound: k,
        });
    }
    if let Some(&n) = teacher_idx.iter().find(|&&n| n >= m) {
        return Err(LabError::IndexOutOfRange {
            what: "teacher",
            index: n,
            bound: m,
        });
    }
    let pos: Vec<usize> = student_idx
        .iter()
        .copied()
        .chain(teacher_idx.iter().map(|&n| k + n))
        .collect();
    let c = params.block_matrix();
    let d = pos.len();
    Ok(CovBlock::new_unchecked(DMatrix::from_fn(d, d, |i, j| c[(pos[i], pos[j])])))
}

/// `rho_kn = R_kn / sqrt(Q_kk T_nn)`, clamped to [-1, 1] after the bound check.
pub fn cosine_similarity(params: &OrderParams) -> Result<DMatrix<f64>> {
    let (q, r, t) = (params.q(), params.r(), params.t());
    for (which, m) in [("Q", q), ("T", t)] {
        for i in 0..m.nrows() {
            if m[(i, i)] <= 0.0 {
                return Err(LabError::DegenerateNorm {
                    which,
                    index: i,
                    value: m[(i, i)],
                });
            }
        }
    }
    let mut rho = DMatrix::zeros(params.k(), params.m());
    for k in 0..params.k() {
        for n in 0..params.m() {
            let v = r[(k, n)] / (q[(k, k)] * t[(n, n)]).sqrt();
            if v.abs() > 1.0 + RHO_TOL {
                return Err(LabError::RhoOutOfRange { k, n, value: v });
            }
            rho[(k, n)] = v.clamp(-1.0, 1.0);
        }
    }
    Ok(rho)
}

/// Meta-generalization error after one-step head adaptation, from the
/// overlaps alone (large-P limit).
pub fn meta_generalization_error(
    params: &OrderParams,
    config: &ModelConfig,
    variant: &VariantConfig,
) -> Result<f64> {
    variant.validate()?;
    let fc = FieldCov::new(params, variant.gamma);
    let eps = match variant.activation {
        Activation::Erf => eps_kernel(&ErfMoments, &fc, params, config.eta_w)?,
        Activation::Linear => eps_kernel(&LinearMoments, &fc, params, config.eta_w)?,
    };
    Ok(eps + 0.5 * variant.sigma_noise)
}

fn eps_kernel<G: Moments>(g: &G, fc: &FieldCov, params: &OrderParams, eta_w: f64) -> Result<f64> {
    let (k, m) = (params.k(), params.m());
    let (kf, mf) = (k as f64, m as f64);
    let mut f = DMatrix::zeros(k, m);
    for a in 0..k {
        for n in 0..m {
            f[(a, n)] = g.i2(fc, fc.x(a), fc.yt(n))?;
        }
    }
    let mut teacher = 0.0;
    for n in 0..m {
        teacher += g.i2(fc, fc.yt(n), fc.yt(n))?;
    }
    let cross: f64 = f.iter().map(|v| v * v).sum();
    let gram = &f * f.transpose();
    let mut student = 0.0;
    for a in 0..k {
        for b in 0..k {
            student += gram[(a, b)] * g.i2(fc, fc.x(a), fc.x(b))?;
        }
    }
    Ok(teacher / (2.0 * mf) - eta_w / (kf * mf) * cross + eta_w * eta_w / (2.0 * kf * kf * mf) * student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cfg(k: usize, m: usize, eta_w: f64) -> ModelConfig {
        ModelConfig {
            n: 1000,
            k,
            m,
            p: 100,
            v: 100,
            eta_w,
            eta_j: 1.0,
        }
    }

    #[test]
    fn covariance_read_off() {
        let p = OrderParams::new(dm(1, 1, &[0.5]), dm(1, 1, &[0.0]), dm(1, 1, &[1.0])).unwrap();
        let c = assemble_covariance(&p, &[0], &[0]).unwrap();
        assert_eq!(c.matrix(), &dm(2, 2, &[0.5, 0.0, 0.0, 1.0]));
        assert_eq!(assemble_covariance(&p, &[], &[]).unwrap().dim(), 0);

        let p = OrderParams::fig3_init(3, 3);
        let c = assemble_covariance(&p, &[0, 1], &[2]).unwrap();
        assert_eq!(c.get(0, 0), 0.5);
        assert_eq!(c.get(1, 1), 0.5);
        assert_eq!(c.get(2, 2), 3.0);
        assert_eq!(c.get(0, 1), 0.0);
        assert!(matches!(
            assemble_covariance(&p, &[3], &[]),
            Err(LabError::IndexOutOfRange { what: "student", .. })
        ));
        assert!(assemble_covariance(&p, &[0], &[5]).is_err());
    }

    fn dm(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn cosine_examples() {
        let p = OrderParams::new(dm(1, 1, &[0.5]), dm(1, 1, &[1.0]), dm(1, 1, &[2.0])).unwrap();
        assert_eq!(cosine_similarity(&p).unwrap()[(0, 0)], 1.0);
        let p = OrderParams::new(dm(1, 1, &[1.0]), dm(1, 1, &[-0.3]), dm(1, 1, &[1.0])).unwrap();
        assert_eq!(cosine_similarity(&p).unwrap()[(0, 0)], -0.3);
        let p = OrderParams::new(dm(1, 1, &[1.0]), dm(1, 1, &[0.0]), dm(1, 1, &[3.0])).unwrap();
        assert_eq!(cosine_similarity(&p).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn cosine_degenerate_norm_names_index() {
        let q = dm(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = OrderParams::new(q, DMatrix::zeros(2, 1), dm(1, 1, &[1.0])).unwrap();
        match cosine_similarity(&p) {
            Err(LabError::DegenerateNorm { which: "Q", index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_psd_rejected() {
        let err = OrderParams::new(dm(1, 1, &[0.5]), dm(1, 1, &[1.0]), dm(1, 1, &[1.0]));
        assert!(matches!(err, Err(LabError::NotPsd(_))));
        let asym = dm(2, 2, &[1.0, 0.1, 0.2, 1.0]);
        assert!(OrderParams::new(asym, DMatrix::zeros(2, 1), dm(1, 1, &[1.0])).is_err());
        assert!(OrderParams::new(DMatrix::identity(2, 2), DMatrix::zeros(3, 1), dm(1, 1, &[1.0])).is_err());
    }

    #[test]
    fn eps_at_zero_overlap() {
        let mut p = OrderParams::fig3_init(3, 3);
        p.r.fill(0.0);
        let eps = meta_generalization_error(&p, &cfg(3, 3, 5.0), &VariantConfig::default()).unwrap();
        let expect: f64 = (1..=3)
            .map(|n| {
                let n = n as f64;
                2.0 / PI * (n / (n + 1.0)).asin()
            })
            .sum::<f64>()
            / 6.0;
        assert!((eps - expect).abs() < 1e-15);
        assert!((eps - 0.22297).abs() < 1e-5, "{eps}");
    }

    #[test]
    fn eps_without_inner_rate_ignores_r() {
        let r = dm(2, 2, &[0.3, -0.1, 0.2, 0.4]);
        let p = OrderParams::new(DMatrix::identity(2, 2), r, DMatrix::identity(2, 2)).unwrap();
        let eps = meta_generalization_error(&p, &cfg(2, 2, 0.0), &VariantConfig::default()).unwrap();
        let expect = 2.0 / PI * 0.5f64.asin() / 2.0;
        assert!((eps - expect).abs() < 1e-15);
    }

    #[test]
    fn linear_exact_recovery_is_zero() {
        let one = dm(1, 1, &[1.0]);
        let p = OrderParams::new(one.clone(), one.clone(), one).unwrap();
        let eps = meta_generalization_error(&p, &cfg(1, 1, 1.0), &VariantConfig::linear()).unwrap();
        assert_eq!(eps, 0.0);
    }

    #[test]
    fn noise_adds_half_variance() {
        let p = OrderParams::fig3_init(3, 3);
        let c = cfg(3, 3, 4.0);
        let clean = meta_generalization_error(&p, &c, &VariantConfig::default()).unwrap();
        let noisy = meta_generalization_error(&p, &c, &VariantConfig::l2_noise(0.0, 0.02)).unwrap();
        assert!((noisy - clean - 0.01).abs() < 1e-15);
    }

    #[test]
    fn variant_validation() {
        assert!(VariantConfig::gamma(1.2).validate().is_err());
        assert!(VariantConfig::l2_noise(-0.1, 0.0).validate().is_err());
        let bad_linear = VariantConfig {
            lambda: 0.1,
            ..VariantConfig::linear()
        };
        assert!(bad_linear.validate().is_err());
        let mixed = VariantConfig {
            gamma: 0.9,
            lambda: 0.1,
            ..Default::default()
        };
        assert!(mixed.validate().is_err());
        assert!(VariantConfig::gamma(0.0).validate().is_ok());
    }

    #[test]
    fn model_validation() {
        let mut c = cfg(3, 3, 1.0);
        assert!(c.validate().is_ok());
        c.p = 0;
        assert!(matches!(c.validate(), Err(LabError::InvalidConfig { ref field, .. }) if field == "P"));
        let mut c = cfg(3, 3, f64::NAN);
        assert!(c.validate().is_err());
        c.eta_w = 1.0;
        c.eta_j = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_names() {
        let c: ModelConfig =
            serde_json::from_str(r#"{"N":500,"K":3,"M":3,"P":100,"V":100,"eta_w":4,"eta_J":6}"#).unwrap();
        assert_eq!((c.n, c.eta_j), (500, 6.0));
        assert!(serde_json::from_str::<ModelConfig>(
            r#"{"N":500,"K":3,"M":3,"P":100,"V":100,"eta_w":4,"eta_j":6}"#
        )
        .is_err());
        let v: VariantConfig = serde_json::from_str(r#"{"gamma":0.95}"#).unwrap();
        assert_eq!(v.activation, Activation::Erf);
        assert_eq!(v.lambda, 0.0);
    }
}
