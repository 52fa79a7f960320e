//! Right-hand sides of the averaged order-parameter equations.
//!
//! All erf variants share one kernel over the field covariance of
//! (x, task teacher, meta teacher). With `gamma = 1`, `lambda = 0` and no
//! noise it is the plain system; the L2/noise and teacher-variability
//! variants only change the covariance or add terms, so the reductions hold
//! bit for bit.

use nalgebra::DMatrix;

use crate::error::{LabError, Result};
use crate::fields::{ErfMoments, FieldCov, Moments};
use crate::order_params::{Activation, ModelConfig, OrderParams, VariantConfig};

pub const DEFAULT_EPS_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RhsOutput {
    /// dR/dalpha, K x M.
    pub d_r: DMatrix<f64>,
    /// dQ/dalpha, K x K symmetric.
    pub d_q: DMatrix<f64>,
}

impl RhsOutput {
    pub fn max_abs(&self) -> f64 {
        self.d_r.amax().max(self.d_q.amax())
    }

    pub fn is_finite(&self) -> bool {
        self.d_r.iter().chain(self.d_q.iter()).all(|v| v.is_finite())
    }
}

pub fn rhs_base(params: &OrderParams, config: &ModelConfig) -> Result<RhsOutput> {
    check_shape(params, config)?;
    kernel(&ErfMoments, params, config, 1.0, 0.0, 0.0)
}

pub fn rhs_l2_noise(params: &OrderParams, config: &ModelConfig, variant: &VariantConfig) -> Result<RhsOutput> {
    variant.validate()?;
    require_erf(variant)?;
    if variant.gamma != 1.0 {
        return Err(LabError::InvalidVariant("L2/noise dynamics need gamma = 1".into()));
    }
    check_shape(params, config)?;
    kernel(&ErfMoments, params, config, 1.0, variant.lambda, variant.sigma_noise)
}

/// Teacher variability: the task teacher field is `gamma y + sqrt(1 - gamma^2) z`
/// with `z` independent of everything and `cov(z) = I`.
pub fn rhs_gamma(params: &OrderParams, config: &ModelConfig, variant: &VariantConfig) -> Result<RhsOutput> {
    variant.validate()?;
    require_erf(variant)?;
    if variant.gamma <= 0.0 {
        return Err(LabError::InvalidVariant("gamma = 0 is outside the near-one regime".into()));
    }
    check_shape(params, config)?;
    kernel(&ErfMoments, params, config, variant.gamma, variant.lambda, variant.sigma_noise)
}

/// Linear activation: every average is a covariance entry, so with
/// `G = R R^T` the system is a matrix polynomial.
pub fn rhs_linear(params: &OrderParams, config: &ModelConfig) -> Result<RhsOutput> {
    check_shape(params, config)?;
    let (q, r, t) = (params.q(), params.r(), params.t());
    let (k, m) = (params.k(), params.m());
    let (kf, mf, vf) = (k as f64, m as f64, config.v as f64);
    let (ej, ew) = (config.eta_j, config.eta_w);
    let a = ej * ew / (kf * mf);
    let b = ej * ew * ew / (kf * kf * mf);
    let c2 = ej * ej * ew * ew / (vf * kf * kf * mf * mf);
    let c3 = 2.0 * ej * ej * ew.powi(3) / (vf * kf.powi(3) * mf * mf);
    let c4 = ej * ej * ew.powi(4) / (vf * kf.powi(4) * mf * mf);

    let g = matmul(r, &r.transpose());
    let d_r = matmul(r, t) * a - matmul(&g, r) * b;

    let gq = matmul(&g, q);
    let gg = matmul(&g, &g);
    let rtr = matmul(&matmul(r, t), &r.transpose());
    let gqg = matmul(&gq, &g);
    let tr_t = t.trace();
    let tr_g = g.trace();
    let tr_qg = gq.trace();
    let mut d_q = &g * (2.0 * a) - (&gq + gq.transpose()) * b;
    d_q += (&g * tr_t + rtr * 2.0) * c2;
    d_q -= (&g * tr_g + gg * 2.0) * c3;
    d_q += (&g * tr_qg + gqg * 2.0) * c4;
    Ok(RhsOutput {
        d_r,
        d_q: symmetric_part(d_q),
    })
}

/// Selects the right-hand side for `variant`.
pub fn rhs(params: &OrderParams, config: &ModelConfig, variant: &VariantConfig) -> Result<RhsOutput> {
    variant.validate()?;
    match variant.activation {
        Activation::Linear => rhs_linear(params, config),
        Activation::Erf if variant.gamma < 1.0 => rhs_gamma(params, config, variant),
        Activation::Erf if variant.lambda > 0.0 || variant.sigma_noise > 0.0 => {
            rhs_l2_noise(params, config, variant)
        }
        Activation::Erf => rhs_base(params, config),
    }
}

/// Threshold for the downward crossing of the meta-generalization error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingEvent {
    pub threshold: f64,
}

impl Default for CrossingEvent {
    fn default() -> Self {
        CrossingEvent {
            threshold: DEFAULT_EPS_THRESHOLD,
        }
    }
}

pub fn eps_threshold_config(threshold: f64) -> Result<CrossingEvent> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(LabError::config("threshold", format!("must be positive, got {threshold}")));
    }
    Ok(CrossingEvent { threshold })
}

fn require_erf(variant: &VariantConfig) -> Result<()> {
    if variant.activation != Activation::Erf {
        return Err(LabError::InvalidVariant("this right-hand side needs erf activation".into()));
    }
    Ok(())
}

fn check_shape(params: &OrderParams, config: &ModelConfig) -> Result<()> {
    if params.k() != config.k || params.m() != config.m {
        return Err(LabError::Shape(format!(
            "order parameters are {}x{} but config has K={}, M={}",
            params.k(),
            params.m(),
            config.k,
            config.m
        )));
    }
    Ok(())
}

/// Plain triple loop; fixed summation order keeps identical rows identical.
fn matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for p in 0..a.ncols() {
                s += a[(i, p)] * b[(p, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

fn symmetric_part(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

/// Row-major K x K or K x M scratch table.
struct Table {
    cols: usize,
    v: Vec<f64>,
}

impl Table {
    fn new(rows: usize, cols: usize) -> Self {
        Table {
            cols,
            v: vec![0.0; rows * cols],
        }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.cols + j] = x;
    }
}

pub(crate) fn kernel<G: Moments>(
    g: &G,
    params: &OrderParams,
    config: &ModelConfig,
    gamma: f64,
    lambda: f64,
    sigma_noise: f64,
) -> Result<RhsOutput> {
    let fc = FieldCov::new(params, gamma);
    let (k, m) = (params.k(), params.m());
    let (kf, mf, vf) = (k as f64, m as f64, config.v as f64);
    let (ej, ew) = (config.eta_j, config.eta_w);

    let c1 = ej * ew / (kf * mf);
    let c1b = ej * ew * ew / (kf * kf * mf);
    let c2 = ej * ej * ew * ew / (vf * kf * kf * mf * mf);
    let c3 = 2.0 * ej * ej * ew.powi(3) / (vf * kf.powi(3) * mf * mf);
    let c4 = ej * ej * ew.powi(4) / (vf * kf.powi(4) * mf * mf);
    let cn = ej * ej * ew * ew * sigma_noise / (vf * kf * kf * mf);

    let mut f = Table::new(k, m);
    for a in 0..k {
        for n in 0..m {
            f.set(a, n, g.i2(&fc, fc.x(a), fc.yt(n))?);
        }
    }
    let mut gram = Table::new(k, k);
    for a in 0..k {
        for b in 0..k {
            let mut s = 0.0;
            for n in 0..m {
                s += f.get(a, n) * f.get(b, n);
            }
            gram.set(a, b, s);
        }
    }

    let r = params.r();
    let q = params.q();
    // student sums start at the row's own index
    let mut d_r = DMatrix::zeros(k, m);
    for a in 0..k {
        for n in 0..m {
            let mut teach = 0.0;
            for p in 0..m {
                teach += f.get(a, p) * g.i3(&fc, fc.x(a), fc.y(n), fc.yt(p))?;
            }
            let mut stud = 0.0;
            for s in 0..k {
                let i = (a + s) % k;
                stud += gram.get(i, a) * g.i3(&fc, fc.x(a), fc.y(n), fc.x(i))?;
            }
            d_r[(a, n)] = c1 * teach - c1b * stud - lambda * ej * r[(a, n)];
        }
    }

    // first-order part A_kl; dQ_kl gets A_kl + A_lk
    let mut first = Table::new(k, k);
    for a in 0..k {
        for l in 0..k {
            let mut teach = 0.0;
            for n in 0..m {
                teach += f.get(a, n) * g.i3(&fc, fc.x(a), fc.x(l), fc.yt(n))?;
            }
            let mut stud = 0.0;
            for s in 0..k {
                let i = (a + s) % k;
                stud += gram.get(i, a) * g.i3(&fc, fc.x(a), fc.x(l), fc.x(i))?;
            }
            first.set(a, l, c1 * teach - c1b * stud);
        }
    }

    let mut tt = Table::new(m, m);
    let mut tx = Table::new(m, k);
    let mut xx = Table::new(k, k);
    let mut d_q = DMatrix::zeros(k, k);
    for a in 0..k {
        for l in a..k {
            let (xa, xl) = (fc.x(a), fc.x(l));
            for n in 0..m {
                for p in n..m {
                    let v = g.i4(&fc, xa, xl, fc.yt(n), fc.yt(p))?;
                    tt.set(n, p, v);
                    tt.set(p, n, v);
                }
                for i in 0..k {
                    tx.set(n, i, g.i4(&fc, xa, xl, fc.yt(n), fc.x(i))?);
                }
            }
            for i in 0..k {
                for j in i..k {
                    let v = g.i4(&fc, xa, xl, fc.x(i), fc.x(j))?;
                    xx.set(i, j, v);
                    xx.set(j, i, v);
                }
            }

            let g_al = gram.get(a, l);
            let mut diag = 0.0;
            let mut pair = 0.0;
            for n in 0..m {
                diag += tt.get(n, n);
                for p in 0..m {
                    pair += (f.get(a, n) * f.get(l, p) + f.get(a, p) * f.get(l, n)) * tt.get(n, p);
                }
            }
            let second = c2 * (g_al * diag + pair);

            let mut third = 0.0;
            for i in 0..k {
                for n in 0..m {
                    let w = f.get(i, n) * g_al + f.get(a, n) * gram.get(i, l) + f.get(l, n) * gram.get(i, a);
                    third += tx.get(n, i) * w;
                }
            }

            let mut fourth = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let w = gram.get(i, j) * g_al
                        + gram.get(i, a) * gram.get(j, l)
                        + gram.get(i, l) * gram.get(j, a);
                    fourth += xx.get(i, j) * w;
                }
            }

            let mut value = first.get(a, l) + first.get(l, a) + second - c3 * third + c4 * fourth;
            if sigma_noise > 0.0 {
                value += cn * g_al * g.i2_prime(&fc, xa, xl)?;
            }
            value -= 2.0 * lambda * ej * q[(a, l)];
            d_q[(a, l)] = value;
            d_q[(l, a)] = value;
        }
    }

    Ok(RhsOutput { d_r, d_q })
}
