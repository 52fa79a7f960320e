//! Joint covariance of the local fields entering the averaged dynamics, and
//! the moment evaluators that read Gaussian averages off it.
//!
//! Field layout (size K + 2M): student fields `x_k`, task-teacher fields
//! `yt_m` (the teacher that labels the current task), meta-teacher fields
//! `y_n` (the fixed representation that defines R). With `gamma = 1` the two
//! teacher blocks coincide.

use crate::error::{LabError, Result};
use crate::gaussian::{i2_prime_raw, i2_raw, i3_raw, i4_raw};
use crate::order_params::OrderParams;

#[derive(Debug, Clone)]
pub(crate) struct FieldCov {
    k: usize,
    m: usize,
    dim: usize,
    c: Vec<f64>,
}

impl FieldCov {
    pub(crate) fn new(params: &OrderParams, gamma: f64) -> Self {
        let (k, m) = (params.k(), params.m());
        let dim = k + 2 * m;
        let mut fc = FieldCov {
            k,
            m,
            dim,
            c: vec![0.0; dim * dim],
        };
        let (q, r, t) = (params.q(), params.r(), params.t());
        let var_z = 1.0 - gamma * gamma;
        for a in 0..k {
            for b in 0..k {
                fc.set(a, b, q[(a, b)]);
            }
            for n in 0..m {
                fc.set_sym(a, fc.yt(n), gamma * r[(a, n)]);
                fc.set_sym(a, fc.y(n), r[(a, n)]);
            }
        }
        for n in 0..m {
            for p in 0..m {
                let noise = if n == p { var_z } else { 0.0 };
                fc.set(fc.yt(n), fc.yt(p), gamma * gamma * t[(n, p)] + noise);
                fc.set(fc.y(n), fc.y(p), t[(n, p)]);
                fc.set(fc.yt(n), fc.y(p), gamma * t[(n, p)]);
                fc.set(fc.y(p), fc.yt(n), gamma * t[(n, p)]);
            }
        }
        fc
    }

    #[inline]
    pub(crate) fn x(&self, k: usize) -> usize {
        k
    }

    #[inline]
    pub(crate) fn yt(&self, m: usize) -> usize {
        self.k + m
    }

    #[inline]
    pub(crate) fn y(&self, n: usize) -> usize {
        self.k + self.m + n
    }

    #[inline]
    pub(crate) fn get(&self, a: usize, b: usize) -> f64 {
        self.c[a * self.dim + b]
    }

    fn set(&mut self, a: usize, b: usize, v: f64) {
        self.c[a * self.dim + b] = v;
    }

    fn set_sym(&mut self, a: usize, b: usize, v: f64) {
        self.set(a, b, v);
        self.set(b, a, v);
    }

    pub(crate) fn label(&self, a: usize) -> String {
        if a < self.k {
            format!("x{a}")
        } else if a < self.k + self.m {
            format!("yt{}", a - self.k)
        } else {
            format!("y{}", a - self.k - self.m)
        }
    }

    fn context(&self, idx: &[usize]) -> String {
        let names: Vec<String> = idx.iter().map(|&a| self.label(a)).collect();
        format!("({})", names.join(", "))
    }

    fn sub<const D: usize>(&self, idx: [usize; D]) -> [[f64; D]; D] {
        let mut out = [[0.0; D]; D];
        for (i, &a) in idx.iter().enumerate() {
            for (j, &b) in idx.iter().enumerate() {
                out[i][j] = self.get(a, b);
            }
        }
        out
    }
}

/// Gaussian averages of the products that appear in the dynamics, indexed by
/// field position. Arguments follow the integral role order
/// (`g g`, `g' g'`, `g' lin g`, `g' g' g g`).
pub(crate) trait Moments {
    fn i2(&self, c: &FieldCov, a: usize, b: usize) -> Result<f64>;
    fn i2_prime(&self, c: &FieldCov, a: usize, b: usize) -> Result<f64>;
    fn i3(&self, c: &FieldCov, a: usize, b: usize, d: usize) -> Result<f64>;
    fn i4(&self, c: &FieldCov, a: usize, b: usize, d: usize, e: usize) -> Result<f64>;
}

pub(crate) struct ErfMoments;

fn wrap(kind: &'static str, c: &FieldCov, idx: &[usize]) -> impl FnOnce(LabError) -> LabError {
    let context = c.context(idx);
    move |source| LabError::Integral {
        kind,
        context,
        source: Box::new(source),
    }
}

impl Moments for ErfMoments {
    fn i2(&self, c: &FieldCov, a: usize, b: usize) -> Result<f64> {
        i2_raw(c.get(a, a), c.get(b, b), c.get(a, b)).map_err(wrap("I2", c, &[a, b]))
    }

    fn i2_prime(&self, c: &FieldCov, a: usize, b: usize) -> Result<f64> {
        i2_prime_raw(c.get(a, a), c.get(b, b), c.get(a, b)).map_err(wrap("I2prime", c, &[a, b]))
    }

    fn i3(&self, c: &FieldCov, a: usize, b: usize, d: usize) -> Result<f64> {
        i3_raw(&c.sub([a, b, d])).map_err(wrap("I3", c, &[a, b, d]))
    }

    fn i4(&self, c: &FieldCov, a: usize, b: usize, d: usize, e: usize) -> Result<f64> {
        i4_raw(&c.sub([a, b, d, e])).map_err(wrap("I4", c, &[a, b, d, e]))
    }
}

/// `g(x) = x`, so `g' = 1` and every average collapses to a covariance entry.
pub(crate) struct LinearMoments;

impl Moments for LinearMoments {
    fn i2(&self, c: &FieldCov, a: usize, b: usize) -> Result<f64> {
        Ok(c.get(a, b))
    }

    fn i2_prime(&self, _c: &FieldCov, _a: usize, _b: usize) -> Result<f64> {
        Ok(1.0)
    }

    fn i3(&self, c: &FieldCov, _a: usize, b: usize, d: usize) -> Result<f64> {
        Ok(c.get(b, d))
    }

    fn i4(&self, c: &FieldCov, _a: usize, _b: usize, d: usize, e: usize) -> Result<f64> {
        Ok(c.get(d, e))
    }
}
