//! Time integration of the order-parameter equations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rhs, CrossingEvent};
use crate::error::{LabError, Result};
use crate::order_params::{
    cosine_similarity, meta_generalization_error, ModelConfig, OrderParams, StopReason, Trajectory,
    VariantConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Rk4Fixed {
        step: f64,
    },
    Rkf45Adaptive {
        rtol: f64,
        atol: f64,
        min_step: f64,
        max_step: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationPlan {
    pub alpha_max: f64,
    pub method: Method,
    pub record_every: f64,
}

impl Default for IntegrationPlan {
    fn default() -> Self {
        IntegrationPlan {
            alpha_max: 500.0,
            method: Method::Rk4Fixed { step: 0.01 },
            record_every: 0.5,
        }
    }
}

impl IntegrationPlan {
    pub fn rk4(alpha_max: f64, step: f64, record_every: f64) -> Self {
        IntegrationPlan {
            alpha_max,
            method: Method::Rk4Fixed { step },
            record_every,
        }
    }

    pub fn rkf45(alpha_max: f64, rtol: f64, record_every: f64) -> Self {
        IntegrationPlan {
            alpha_max,
            method: Method::Rkf45Adaptive {
                rtol,
                atol: rtol * 1e-3,
                min_step: 1e-10,
                max_step: record_every,
            },
            record_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(LabError::config(name, format!("must be positive, got {v}")))
            }
        };
        positive("alpha_max", self.alpha_max)?;
        positive("record_every", self.record_every)?;
        match self.method {
            Method::Rk4Fixed { step } => {
                positive("step", step)?;
                if step >= self.alpha_max {
                    return Err(LabError::config("step", "must be smaller than alpha_max"));
                }
                if self.record_every < step {
                    return Err(LabError::config("record_every", "must be at least the step"));
                }
            }
            Method::Rkf45Adaptive {
                rtol,
                atol,
                min_step,
                max_step,
            } => {
                positive("rtol", rtol)?;
                positive("atol", atol)?;
                positive("min_step", min_step)?;
                positive("max_step", max_step)?;
                if min_step > max_step {
                    return Err(LabError::config("min_step", "exceeds max_step"));
                }
            }
        }
        Ok(())
    }

    /// Record points `0, r, 2r, ...` plus `alpha_max` when it is off-grid.
    pub fn schedule(&self) -> Vec<f64> {
        let n = (self.alpha_max / self.record_every + 1e-9).floor() as usize;
        let mut s: Vec<f64> = (0..=n).map(|j| j as f64 * self.record_every).collect();
        let last = *s.last().unwrap_or(&0.0);
        if self.alpha_max - last > 1e-9 * self.alpha_max {
            s.push(self.alpha_max);
        } else if let Some(l) = s.last_mut() {
            *l = self.alpha_max;
        }
        s
    }
}

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn eval(&self, alpha: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

/// Raw states at the record schedule.
#[derive(Debug, Clone)]
pub struct Solution {
    pub alphas: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub stop: StopReason,
}

/// Integrates `sys` from `y0` along `plan`, recording at the schedule.
/// A failing right-hand side or a non-finite state ends the run early with
/// the samples gathered so far.
pub fn solve<S: OdeSystem>(sys: &S, y0: &[f64], plan: &IntegrationPlan) -> Result<Solution> {
    plan.validate()?;
    if y0.len() != sys.dim() {
        return Err(LabError::Shape(format!("state has {} entries, system {}", y0.len(), sys.dim())));
    }
    let schedule = plan.schedule();
    let mut sol = Solution {
        alphas: vec![schedule[0]],
        states: vec![y0.to_vec()],
        stop: StopReason::Completed,
    };
    let mut y = y0.to_vec();
    let mut stepper = Stepper::new(sys.dim());
    let mut h_adapt = match plan.method {
        Method::Rkf45Adaptive { max_step, .. } => max_step.min(plan.record_every) * 0.1,
        Method::Rk4Fixed { step } => step,
    };
    for w in schedule.windows(2) {
        let (a0, a1) = (w[0], w[1]);
        let outcome = match plan.method {
            Method::Rk4Fixed { step } => stepper.rk4_span(sys, &mut y, a0, a1, step),
            Method::Rkf45Adaptive {
                rtol,
                atol,
                min_step,
                max_step,
            } => stepper.rkf45_span(sys, &mut y, a0, a1, &mut h_adapt, (rtol, atol, min_step, max_step)),
        };
        match outcome {
            Ok(()) => {
                sol.alphas.push(a1);
                sol.states.push(y.clone());
            }
            Err(SpanError::Stop(stop)) => {
                sol.stop = stop;
                return Ok(sol);
            }
            Err(SpanError::Fatal(e)) => return Err(e),
        }
    }
    Ok(sol)
}

enum SpanError {
    Stop(StopReason),
    Fatal(LabError),
}

struct Stepper {
    k: [Vec<f64>; 6],
    tmp: Vec<f64>,
    next: Vec<f64>,
}

// Fehlberg 4(5) tableau.
const A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 4.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const C: [f64; 6] = [0.0, 1.0 / 4.0, 3.0 / 8.0, 12.0 / 13.0, 1.0, 1.0 / 2.0];
const B5: [f64; 6] = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0];

impl Stepper {
    fn new(n: usize) -> Self {
        Stepper {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            next: vec![0.0; n],
        }
    }

    fn eval<S: OdeSystem>(sys: &S, alpha: f64, y: &[f64], out: &mut [f64]) -> std::result::Result<(), SpanError> {
        sys.eval(alpha, y, out).map_err(|e| {
            SpanError::Stop(StopReason::NumericError {
                alpha,
                message: e.to_string(),
            })
        })
    }

    fn rk4_span<S: OdeSystem>(
        &mut self,
        sys: &S,
        y: &mut [f64],
        a0: f64,
        a1: f64,
        step: f64,
    ) -> std::result::Result<(), SpanError> {
        let n_steps = (((a1 - a0) / step) - 1e-9).ceil().max(1.0) as usize;
        let h = (a1 - a0) / n_steps as f64;
        for s in 0..n_steps {
            let alpha = a0 + s as f64 * h;
            let [k1, k2, k3, k4, _, _] = &mut self.k;
            Self::eval(sys, alpha, y, k1)?;
            for i in 0..y.len() {
                self.tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            Self::eval(sys, alpha + 0.5 * h, &self.tmp, k2)?;
            for i in 0..y.len() {
                self.tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            Self::eval(sys, alpha + 0.5 * h, &self.tmp, k3)?;
            for i in 0..y.len() {
                self.tmp[i] = y[i] + h * k3[i];
            }
            Self::eval(sys, alpha + h, &self.tmp, k4)?;
            for i in 0..y.len() {
                self.next[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if self.next.iter().any(|v| !v.is_finite()) {
                return Err(SpanError::Stop(StopReason::NonFinite { alpha }));
            }
            y.copy_from_slice(&self.next);
        }
        Ok(())
    }

    fn rkf45_span<S: OdeSystem>(
        &mut self,
        sys: &S,
        y: &mut [f64],
        a0: f64,
        a1: f64,
        h: &mut f64,
        (rtol, atol, min_step, max_step): (f64, f64, f64, f64),
    ) -> std::result::Result<(), SpanError> {
        let n = y.len();
        let mut alpha = a0;
        while alpha < a1 {
            let remaining = a1 - alpha;
            let hs = h.min(max_step).min(remaining);
            let last = hs >= remaining;
            Self::eval(sys, alpha, y, &mut self.k[0])?;
            for s in 1..6 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, a) in A[s].iter().enumerate().take(s) {
                        acc += hs * a * self.k[j][i];
                    }
                    self.tmp[i] = acc;
                }
                let (done, rest) = self.k.split_at_mut(s);
                let _ = done;
                Self::eval(sys, alpha + C[s] * hs, &self.tmp, &mut rest[0])?;
            }
            let mut err: f64 = 0.0;
            for i in 0..n {
                let mut y5 = y[i];
                let mut y4 = y[i];
                for s in 0..6 {
                    y5 += hs * B5[s] * self.k[s][i];
                    y4 += hs * B4[s] * self.k[s][i];
                }
                self.next[i] = y5;
                let scale = atol + rtol * y[i].abs().max(y5.abs());
                err = err.max(((y5 - y4) / scale).abs());
            }
            if !err.is_finite() || self.next.iter().any(|v| !v.is_finite()) {
                return Err(SpanError::Stop(StopReason::NonFinite { alpha }));
            }
            if err <= 1.0 {
                y.copy_from_slice(&self.next);
                alpha = if last { a1 } else { alpha + hs };
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last || hs == *h {
                    *h = (hs * grow).min(max_step);
                }
            } else {
                let shrink = (0.9 * err.powf(-0.25)).clamp(0.1, 0.5);
                *h = hs * shrink;
                if *h < min_step {
                    return Err(SpanError::Fatal(LabError::StepUnderflow { alpha, step: *h }));
                }
            }
        }
        Ok(())
    }
}

/// The order-parameter system packed as `[R row-major, Q upper triangle]`.
pub struct TheorySystem<'a> {
    template: &'a OrderParams,
    config: &'a ModelConfig,
    variant: &'a VariantConfig,
}

impl<'a> TheorySystem<'a> {
    pub fn new(template: &'a OrderParams, config: &'a ModelConfig, variant: &'a VariantConfig) -> Self {
        TheorySystem {
            template,
            config,
            variant,
        }
    }

    pub fn pack(params: &OrderParams) -> Vec<f64> {
        let (k, m) = (params.k(), params.m());
        let mut out = Vec::with_capacity(k * m + k * (k + 1) / 2);
        for a in 0..k {
            for n in 0..m {
                out.push(params.r()[(a, n)]);
            }
        }
        for a in 0..k {
            for b in a..k {
                out.push(params.q()[(a, b)]);
            }
        }
        out
    }

    pub fn unpack(&self, y: &[f64]) -> Result<OrderParams> {
        let (k, m) = (self.template.k(), self.template.m());
        let r = DMatrix::from_fn(k, m, |a, n| y[a * m + n]);
        let mut q = DMatrix::zeros(k, k);
        let mut idx = k * m;
        for a in 0..k {
            for b in a..k {
                q[(a, b)] = y[idx];
                q[(b, a)] = y[idx];
                idx += 1;
            }
        }
        self.template.with_qr(q, r)
    }
}

impl OdeSystem for TheorySystem<'_> {
    fn dim(&self) -> usize {
        let k = self.template.k();
        k * self.template.m() + k * (k + 1) / 2
    }

    fn eval(&self, _alpha: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let params = self.unpack(y)?;
        let out = rhs(&params, self.config, self.variant)?;
        let (k, m) = (params.k(), params.m());
        for a in 0..k {
            for n in 0..m {
                dy[a * m + n] = out.d_r[(a, n)];
            }
        }
        let mut idx = k * m;
        for a in 0..k {
            for b in a..k {
                dy[idx] = out.d_q[(a, b)];
                idx += 1;
            }
        }
        Ok(())
    }
}

/// Integrates the averaged dynamics selected by `variant` from `init`.
pub fn integrate(
    config: &ModelConfig,
    variant: &VariantConfig,
    init: &OrderParams,
    plan: &IntegrationPlan,
) -> Result<Trajectory> {
    config.validate()?;
    variant.validate()?;
    let sys = TheorySystem::new(init, config, variant);
    // surfaces shape and variant errors before any stepping
    rhs(init, config, variant)?;
    let sol = solve(&sys, &TheorySystem::pack(init), plan)?;
    let mut traj = Trajectory {
        schedule: Vec::with_capacity(sol.alphas.len()),
        states: Vec::with_capacity(sol.alphas.len()),
        eps_meta: Vec::with_capacity(sol.alphas.len()),
        rho: Vec::with_capacity(sol.alphas.len()),
        stop: sol.stop,
    };
    for (i, (alpha, y)) in sol.alphas.iter().zip(&sol.states).enumerate() {
        let sample = sys
            .unpack(y)
            .and_then(|p| Ok((meta_generalization_error(&p, config, variant)?, cosine_similarity(&p)?, p)));
        match sample {
            Ok((eps, rho, p)) => {
                traj.schedule.push(*alpha);
                traj.states.push(p);
                traj.eps_meta.push(eps);
                traj.rho.push(rho);
            }
            Err(e) if i == 0 => return Err(e),
            Err(e) => {
                traj.stop = StopReason::NumericError {
                    alpha: *alpha,
                    message: e.to_string(),
                };
                break;
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingReport {
    pub crossed: bool,
    pub alpha_tilde: Option<f64>,
}

/// Earliest alpha at which the recorded error reaches the threshold, linearly
/// interpolated between the bracketing samples.
pub fn first_crossing(schedule: &[f64], eps: &[f64], event: &CrossingEvent) -> CrossingReport {
    let thr = event.threshold;
    let none = CrossingReport {
        crossed: false,
        alpha_tilde: None,
    };
    let Some(&e0) = eps.first() else {
        return none;
    };
    if e0 <= thr {
        return CrossingReport {
            crossed: true,
            alpha_tilde: Some(schedule[0]),
        };
    }
    for j in 1..eps.len().min(schedule.len()) {
        if eps[j] <= thr {
            let (a0, a1, e0, e1) = (schedule[j - 1], schedule[j], eps[j - 1], eps[j]);
            let alpha = if e1 == thr { a1 } else { a0 + (e0 - thr) * (a1 - a0) / (e0 - e1) };
            return CrossingReport {
                crossed: true,
                alpha_tilde: Some(alpha),
            };
        }
    }
    none
}

pub fn trajectory_crossing(traj: &Trajectory, event: &CrossingEvent) -> CrossingReport {
    first_crossing(&traj.schedule, &traj.eps_meta, event)
}
