//! Ensemble estimate of the mean single-task increment of the overlaps,
//! scaled by N so that it is comparable with the averaged equations.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{dot, fused_task, measure_order_params, RunningStats, SimState};
use crate::dynamics::RhsOutput;
use crate::error::{LabError, Result};

#[derive(Debug, Clone)]
pub struct DriftEstimate {
    pub d_r_mean: DMatrix<f64>,
    pub d_r_se: DMatrix<f64>,
    pub d_q_mean: DMatrix<f64>,
    pub d_q_se: DMatrix<f64>,
    pub draws: usize,
}

fn z(mean: f64, se: f64, target: f64) -> f64 {
    let d = (mean - target).abs();
    if d == 0.0 {
        0.0
    } else {
        d / se
    }
}

impl DriftEstimate {
    /// Largest componentwise deviation from `rhs` in standard errors
    /// (upper triangle of Q).
    pub fn max_z(&self, rhs: &RhsOutput) -> f64 {
        let mut worst: f64 = 0.0;
        for ((m, s), t) in self.d_r_mean.iter().zip(self.d_r_se.iter()).zip(rhs.d_r.iter()) {
            worst = worst.max(z(*m, *s, *t));
        }
        let k = self.d_q_mean.nrows();
        for a in 0..k {
            for b in a..k {
                worst = worst.max(z(self.d_q_mean[(a, b)], self.d_q_se[(a, b)], rhs.d_q[(a, b)]));
            }
        }
        worst
    }
}

/// Applies `draws` independent single tasks to copies of `state` and
/// averages `N·ΔR` and `N·ΔQ`. Task `i` uses stream index `task_count + i`.
pub fn one_step_drift(state: &SimState, draws: usize) -> Result<DriftEstimate> {
    if draws < 2 {
        return Err(LabError::config("draws", "must be at least 2"));
    }
    let cfg = state.config();
    let (n, k, m) = (cfg.n, cfg.k, cfg.m);
    let nf = n as f64;
    measure_order_params(state)?;

    let samples: Vec<Vec<f64>> = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let mut next = vec![0.0; k * n];
            fused_task(state, state.task_count() + i, &mut next);
            let diff: Vec<f64> = next.iter().zip(&state.j).map(|(a, b)| a - b).collect();
            let d = |a: usize| &diff[a * n..(a + 1) * n];
            let mut out = Vec::with_capacity(k * m + k * k);
            for a in 0..k {
                for c in 0..m {
                    out.push(nf * dot(d(a), state.b_row(c)));
                }
            }
            for a in 0..k {
                for b in 0..k {
                    let v = dot(state.j_row(a), d(b)) + dot(d(a), state.j_row(b)) + dot(d(a), d(b));
                    out.push(nf * v);
                }
            }
            out
        })
        .collect();

    let mut stats = vec![RunningStats::default(); k * m + k * k];
    for s in &samples {
        for (st, x) in stats.iter_mut().zip(s) {
            st.push(*x);
        }
    }
    let (r_stats, q_stats) = stats.split_at(k * m);
    Ok(DriftEstimate {
        d_r_mean: DMatrix::from_fn(k, m, |a, c| r_stats[a * m + c].mean()),
        d_r_se: DMatrix::from_fn(k, m, |a, c| r_stats[a * m + c].std_err()),
        d_q_mean: DMatrix::from_fn(k, k, |a, b| q_stats[a * k + b].mean()),
        d_q_se: DMatrix::from_fn(k, k, |a, b| q_stats[a * k + b].std_err()),
        draws,
    })
}
