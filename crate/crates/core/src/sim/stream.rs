//! Streaming runs with a record schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{empirical_meta_error, measure_order_params, step, SimState};
use crate::error::{LabError, Result};
use crate::order_params::{meta_generalization_error, OrderParams, StopReason};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOptions {
    pub alpha_max: f64,
    pub record_every: f64,
    pub ma_window: f64,
    /// Test tasks per empirical estimate; 0 turns the estimator off.
    pub eps_tasks: usize,
    pub eps_test: usize,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            alpha_max: 20.0,
            record_every: 0.5,
            ma_window: 0.05,
            eps_tasks: 20,
            eps_test: 50,
        }
    }
}

impl StreamOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0) || !self.alpha_max.is_finite() {
            return Err(LabError::config("alpha_max", "must be positive and finite"));
        }
        if !(self.record_every > 0.0) || !self.record_every.is_finite() {
            return Err(LabError::config("record_every", "must be positive and finite"));
        }
        if !(self.ma_window >= 0.0) {
            return Err(LabError::config("ma_window", "must be nonnegative"));
        }
        if self.eps_tasks > 0 && self.eps_test == 0 {
            return Err(LabError::config("eps_test", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimTrajectory {
    pub schedule: Vec<f64>,
    pub states: Vec<OrderParams>,
    /// Closed-form error at the measured overlaps.
    pub eps_analytic: Vec<f64>,
    /// Raw empirical estimate per record; NaN when disabled.
    pub eps_empirical: Vec<f64>,
    /// Trailing moving average of `eps_empirical` over `ma_window`.
    pub eps_ma: Vec<f64>,
    /// Head weights of the task preceding each record (empty at the start).
    pub w_last: Vec<Vec<f64>>,
    pub stop: StopReason,
}

impl SimTrajectory {
    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schedule.is_empty()
    }
}

fn moving_average(schedule: &[f64], values: &[f64], window: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut lo = 0;
    for (i, &a) in schedule.iter().enumerate() {
        while schedule[lo] < a - window - 1e-12 {
            lo += 1;
        }
        let slice = &values[lo..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// Runs `⌊alpha_max·N⌋` tasks from the current state, recording every
/// `record_every` in α. A non-finite `J` stops the run with what was recorded.
pub fn run_stream(state: &mut SimState, opts: &StreamOptions) -> Result<SimTrajectory> {
    opts.validate()?;
    let n = state.config().n as f64;
    let start = state.task_count();
    let total = (opts.alpha_max * n).floor() as u64;
    let every = ((opts.record_every * n).round() as u64).max(1);

    let mut traj = SimTrajectory {
        schedule: Vec::new(),
        states: Vec::new(),
        eps_analytic: Vec::new(),
        eps_empirical: Vec::new(),
        eps_ma: Vec::new(),
        w_last: Vec::new(),
        stop: StopReason::Completed,
    };
    let record = |state: &SimState, w: Vec<f64>, traj: &mut SimTrajectory| -> Result<()> {
        let params = measure_order_params(state)?;
        let eps = meta_generalization_error(&params, state.config(), state.variant())?;
        let emp = if opts.eps_tasks > 0 {
            empirical_meta_error(state, opts.eps_tasks, opts.eps_test)?.mean
        } else {
            f64::NAN
        };
        traj.schedule.push(state.alpha());
        traj.states.push(params);
        traj.eps_analytic.push(eps);
        traj.eps_empirical.push(emp);
        traj.w_last.push(w);
        Ok(())
    };

    record(state, Vec::new(), &mut traj)?;
    let mut done = 0;
    while done < total {
        let w = step(state);
        done += 1;
        if !state.is_finite() {
            traj.stop = StopReason::NonFinite { alpha: state.alpha() };
            break;
        }
        if done % every == 0 || done == total {
            if let Err(e) = record(state, w, &mut traj) {
                traj.stop = StopReason::NumericError {
                    alpha: state.alpha(),
                    message: e.to_string(),
                };
                break;
            }
        }
    }
    debug_assert!(state.task_count() - start == done);
    traj.eps_ma = moving_average(&traj.schedule, &traj.eps_empirical, opts.ma_window);
    Ok(traj)
}

/// Independent runs from a shared initial state, one per stream seed.
/// Results come back in seed order.
pub fn run_ensemble(base: &SimState, seeds: &[u64], opts: &StreamOptions) -> Result<Vec<SimTrajectory>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut s = base.clone().with_stream_seed(seed);
            run_stream(&mut s, opts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_uses_trailing_window() {
        let sched = [0.0, 0.02, 0.04, 0.06, 0.08];
        let vals = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ma = moving_average(&sched, &vals, 0.05);
        assert_eq!(ma, vec![1.0, 1.5, 2.0, 3.0, 4.0]);
        assert_eq!(moving_average(&sched, &vals, 0.0), vals.to_vec());
    }
}
