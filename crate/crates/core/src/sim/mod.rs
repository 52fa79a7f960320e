//! Finite-N Monte Carlo simulation of online FO-ANIL: a fixed meta-teacher
//! `B`, an evolving representation `J`, one fresh task per step.

mod drift;
mod rng;
mod stats;
mod stream;

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_SQRT_PI};

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::order_params::{Activation, ModelConfig, OrderParams, VariantConfig};

pub use drift::{one_step_drift, DriftEstimate};
pub use rng::{stream, Role};
pub use stats::{Estimate, RunningStats};
pub use stream::{run_ensemble, run_stream, SimTrajectory, StreamOptions};

use rng::{fill_normal, test_stream};

#[derive(Debug, Clone)]
pub struct SimState {
    config: ModelConfig,
    variant: VariantConfig,
    b: Vec<f64>,
    j: Vec<f64>,
    task_count: u64,
    init_seed: u64,
    stream_seed: u64,
}

/// One task: task vector, optional teacher perturbation, training and
/// validation sets. Inputs are stored row-major, one row per example.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub u: Vec<f64>,
    pub delta_b: Option<Vec<f64>>,
    pub train_xi: Vec<f64>,
    pub train_sigma: Vec<f64>,
    pub train_noise: Vec<f64>,
    pub val_xi: Vec<f64>,
    pub val_sigma: Vec<f64>,
    pub val_noise: Vec<f64>,
}

impl TaskData {
    pub fn train_len(&self) -> usize {
        self.train_sigma.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_sigma.len()
    }
}

pub(crate) fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Erf => libm::erf(x * FRAC_1_SQRT_2),
        Activation::Linear => x,
    }
}

pub(crate) fn act_prime(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Erf => FRAC_2_SQRT_PI * FRAC_1_SQRT_2 * (-0.5 * x * x).exp(),
        Activation::Linear => 1.0,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn rows_to_matrix(data: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Modified Gram-Schmidt on row-major rows; fails on a (numerically)
/// dependent row.
fn orthonormalize_rows(data: &mut [f64], rows: usize, n: usize) -> Result<()> {
    for a in 0..rows {
        for b in 0..a {
            let (head, tail) = data.split_at_mut(a * n);
            let rb = &head[b * n..(b + 1) * n];
            let ra = &mut tail[..n];
            let c = dot(ra, rb);
            for (x, y) in ra.iter_mut().zip(rb) {
                *x -= c * y;
            }
        }
        let row = &mut data[a * n..(a + 1) * n];
        let norm = dot(row, row).sqrt();
        if !(norm > 1e-12) {
            return Err(LabError::Factorization(format!("row {a} is linearly dependent")));
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(())
}

/// Draws `B` and `J` with i.i.d. N(0, 1/N) entries.
pub fn init_sim(config: &ModelConfig, variant: &VariantConfig, seed: u64) -> Result<SimState> {
    config.validate()?;
    variant.validate()?;
    let (n, k, m) = (config.n, config.k, config.m);
    let scale = 1.0 / (n as f64).sqrt();
    let mut b = vec![0.0; m * n];
    let mut j = vec![0.0; k * n];
    fill_normal(&mut stream(seed, 0, Role::InitB), &mut b, scale);
    fill_normal(&mut stream(seed, 0, Role::InitJ), &mut j, scale);
    Ok(SimState {
        config: config.clone(),
        variant: variant.clone(),
        b,
        j,
        task_count: 0,
        init_seed: seed,
        stream_seed: seed,
    })
}

impl SimState {
    /// Builds a state from explicit `B` (M×N) and `J` (K×N).
    pub fn from_parts(
        config: &ModelConfig,
        variant: &VariantConfig,
        b: &DMatrix<f64>,
        j: &DMatrix<f64>,
        seed: u64,
    ) -> Result<SimState> {
        config.validate()?;
        variant.validate()?;
        let (n, k, m) = (config.n, config.k, config.m);
        if b.shape() != (m, n) || j.shape() != (k, n) {
            return Err(LabError::Shape(format!(
                "expected B {m}x{n} and J {k}x{n}, got {:?} and {:?}",
                b.shape(),
                j.shape()
            )));
        }
        if j.iter().chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(LabError::Shape("non-finite entry in B or J".into()));
        }
        let row_major = |mat: &DMatrix<f64>| mat.transpose().as_slice().to_vec();
        Ok(SimState {
            config: config.clone(),
            variant: variant.clone(),
            b: row_major(b),
            j: row_major(j),
            task_count: 0,
            init_seed: seed,
            stream_seed: seed,
        })
    }

    /// Builds `B`, `J` whose overlaps equal `params` up to roundoff: an
    /// orthonormal random frame of K+M directions mixed by the square root of
    /// the joint overlap matrix.
    pub fn with_overlaps(
        config: &ModelConfig,
        variant: &VariantConfig,
        params: &OrderParams,
        seed: u64,
    ) -> Result<SimState> {
        config.validate()?;
        variant.validate()?;
        let (n, k, m) = (config.n, config.k, config.m);
        if params.k() != k || params.m() != m {
            return Err(LabError::Shape(format!(
                "overlaps are {}x{}, config has K={k}, M={m}",
                params.k(),
                params.m()
            )));
        }
        if n < k + m {
            return Err(LabError::config("N", "must be at least K + M to embed overlaps"));
        }
        let d = k + m;
        let mut frame = vec![0.0; d * n];
        fill_normal(&mut stream(seed, 0, Role::Overlap), &mut frame, 1.0);
        orthonormalize_rows(&mut frame, d, n)?;

        let eig = SymmetricEigen::new(params.block_matrix());
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();

        let mut rows = vec![0.0; d * n];
        for a in 0..d {
            let out = &mut rows[a * n..(a + 1) * n];
            for c in 0..d {
                let coef = root[(a, c)];
                for (o, f) in out.iter_mut().zip(&frame[c * n..(c + 1) * n]) {
                    *o += coef * f;
                }
            }
        }
        let j = rows[..k * n].to_vec();
        let b = rows[k * n..].to_vec();
        Ok(SimState {
            config: config.clone(),
            variant: variant.clone(),
            b,
            j,
            task_count: 0,
            init_seed: seed,
            stream_seed: seed,
        })
    }

    /// Keeps `B` and `J`, replaces the seed that drives task streams.
    pub fn with_stream_seed(mut self, seed: u64) -> SimState {
        self.stream_seed = seed;
        self
    }

    /// Orthogonalizes the rows of `J` and rescales them so that `Q = I/2`.
    pub fn match_init(&mut self) -> Result<()> {
        let (n, k) = (self.config.n, self.config.k);
        orthonormalize_rows(&mut self.j, k, n)?;
        self.j.iter_mut().for_each(|x| *x *= FRAC_1_SQRT_2);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> &VariantConfig {
        &self.variant
    }

    pub fn task_count(&self) -> u64 {
        self.task_count
    }

    pub fn alpha(&self) -> f64 {
        self.task_count as f64 / self.config.n as f64
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn stream_seed(&self) -> u64 {
        self.stream_seed
    }

    pub fn j_row(&self, k: usize) -> &[f64] {
        let n = self.config.n;
        &self.j[k * n..(k + 1) * n]
    }

    pub fn b_row(&self, m: usize) -> &[f64] {
        let n = self.config.n;
        &self.b[m * n..(m + 1) * n]
    }

    pub fn j_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.j, self.config.k, self.config.n)
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.b, self.config.m, self.config.n)
    }

    pub fn is_finite(&self) -> bool {
        self.j.iter().all(|x| x.is_finite())
    }

    fn fields(&self, xi: &[f64], x: &mut [f64]) {
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = dot(self.j_row(k), xi);
        }
    }

    fn student_output(&self, w: &[f64], x: &[f64]) -> f64 {
        let a = self.variant.activation;
        let s: f64 = w.iter().zip(x).map(|(wk, xk)| wk * act(a, *xk)).sum();
        s / (self.config.k as f64).sqrt()
    }
}

/// The per-role generators of one task.
pub(crate) struct TaskRngs {
    u: ChaCha8Rng,
    delta_b: ChaCha8Rng,
    train: ChaCha8Rng,
    val: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl TaskRngs {
    pub(crate) fn training(seed: u64, task: u64) -> Self {
        TaskRngs {
            u: stream(seed, task, Role::U),
            delta_b: stream(seed, task, Role::DeltaB),
            train: stream(seed, task, Role::TrainXi),
            val: stream(seed, task, Role::ValXi),
            noise: stream(seed, task, Role::Noise),
        }
    }

    /// Streams for test task `i` drawn at evaluation point `point`.
    pub(crate) fn test(seed: u64, point: u64, i: u64) -> Self {
        let keyed = |role: Role| test_stream(seed, point, i, role);
        TaskRngs {
            u: keyed(Role::U),
            delta_b: keyed(Role::DeltaB),
            train: keyed(Role::TrainXi),
            val: keyed(Role::ValXi),
            noise: keyed(Role::Noise),
        }
    }
}

struct Teacher {
    u: Vec<f64>,
    delta_b: Option<Vec<f64>>,
    rows: Option<Vec<f64>>,
}

impl Teacher {
    fn draw(state: &SimState, rngs: &mut TaskRngs, u: Option<&[f64]>) -> Teacher {
        let (n, m) = (state.config.n, state.config.m);
        let u = match u {
            Some(u) => u.to_vec(),
            None => {
                let mut v = vec![0.0; m];
                fill_normal(&mut rngs.u, &mut v, 1.0);
                v
            }
        };
        let gamma = state.variant.gamma;
        if gamma < 1.0 {
            let mut db = vec![0.0; m * n];
            fill_normal(&mut rngs.delta_b, &mut db, 1.0 / (n as f64).sqrt());
            let s = (1.0 - gamma * gamma).sqrt();
            let rows = state.b.iter().zip(&db).map(|(b, d)| gamma * b + s * d).collect();
            Teacher {
                u,
                delta_b: Some(db),
                rows: Some(rows),
            }
        } else {
            Teacher {
                u,
                delta_b: None,
                rows: None,
            }
        }
    }

    fn row<'a>(&'a self, state: &'a SimState, m: usize) -> &'a [f64] {
        let n = state.config.n;
        match &self.rows {
            Some(r) => &r[m * n..(m + 1) * n],
            None => state.b_row(m),
        }
    }

    fn clean_label(&self, state: &SimState, xi: &[f64]) -> f64 {
        let a = state.variant.activation;
        let mut s = 0.0;
        for (m, um) in self.u.iter().enumerate() {
            s += um * act(a, dot(self.row(state, m), xi));
        }
        s / (state.config.m as f64).sqrt()
    }

    fn label(&self, state: &SimState, xi: &[f64], noise_rng: &mut ChaCha8Rng) -> (f64, f64) {
        let sigma_noise = state.variant.sigma_noise;
        let noise = if sigma_noise > 0.0 {
            let mut d = [0.0];
            fill_normal(noise_rng, &mut d, sigma_noise.sqrt());
            d[0]
        } else {
            0.0
        };
        (self.clean_label(state, xi) + noise, noise)
    }

    /// Draws `count` inputs with labels; returns (inputs, labels, noise).
    fn examples(
        &self,
        state: &SimState,
        count: usize,
        xi_rng: &mut ChaCha8Rng,
        noise_rng: &mut ChaCha8Rng,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = state.config.n;
        let mut xi = vec![0.0; count * n];
        let mut labels = Vec::with_capacity(count);
        let mut noise = Vec::with_capacity(count);
        for row in xi.chunks_exact_mut(n) {
            fill_normal(xi_rng, row, 1.0);
            let (s, d) = self.label(state, row, noise_rng);
            labels.push(s);
            noise.push(d);
        }
        (xi, labels, noise)
    }
}

fn draw_task(state: &SimState, rngs: &mut TaskRngs, u: Option<&[f64]>) -> TaskData {
    let teacher = Teacher::draw(state, rngs, u);
    let (train_xi, train_sigma, train_noise) =
        teacher.examples(state, state.config.p, &mut rngs.train, &mut rngs.noise);
    let (val_xi, val_sigma, val_noise) =
        teacher.examples(state, state.config.v, &mut rngs.val, &mut rngs.noise);
    TaskData {
        u: teacher.u,
        delta_b: teacher.delta_b,
        train_xi,
        train_sigma,
        train_noise,
        val_xi,
        val_sigma,
        val_noise,
    }
}

/// Draws the task the state will see next.
pub fn generate_task(state: &SimState) -> TaskData {
    generate_task_with(state, state.task_count, None)
}

/// Draws task `index` of the state's stream, optionally forcing `u`.
pub fn generate_task_with(state: &SimState, index: u64, u: Option<&[f64]>) -> TaskData {
    let mut rngs = TaskRngs::training(state.stream_seed, index);
    draw_task(state, &mut rngs, u)
}

/// One gradient step on the head from `w = 0` using the training set.
pub fn inner_adapt(state: &SimState, task: &TaskData) -> Vec<f64> {
    let (n, k) = (state.config.n, state.config.k);
    let a = state.variant.activation;
    let mut w = vec![0.0; k];
    let mut x = vec![0.0; k];
    for (xi, sigma) in task.train_xi.chunks_exact(n).zip(&task.train_sigma) {
        state.fields(xi, &mut x);
        for (wk, xk) in w.iter_mut().zip(&x) {
            *wk += sigma * act(a, *xk);
        }
    }
    let scale = state.config.eta_w / (task.train_len() as f64 * (k as f64).sqrt());
    w.iter_mut().for_each(|wk| *wk *= scale);
    w
}

/// Representation after the outer step on the validation set, written into
/// `out` (row-major K×N). `state` is left untouched.
fn outer_step_into(state: &SimState, task: &TaskData, w: &[f64], out: &mut [f64]) {
    let cfg = &state.config;
    let (n, k) = (cfg.n, cfg.k);
    let a = state.variant.activation;
    let decay = 1.0 - state.variant.lambda * cfg.eta_j / n as f64;
    for (o, j) in out.iter_mut().zip(&state.j) {
        *o = decay * j;
    }
    let coef = cfg.eta_j / (n as f64 * task.val_len() as f64 * (k as f64).sqrt());
    let mut x = vec![0.0; k];
    for (xi, sigma) in task.val_xi.chunks_exact(n).zip(&task.val_sigma) {
        state.fields(xi, &mut x);
        let err = sigma - state.student_output(w, &x);
        for kk in 0..k {
            let h = err * w[kk] * act_prime(a, x[kk]);
            if h == 0.0 {
                continue;
            }
            let c = coef * h;
            for (o, v) in out[kk * n..(kk + 1) * n].iter_mut().zip(xi) {
                *o += c * v;
            }
        }
    }
}

/// Outer (meta) update of `J`; advances the task counter.
pub fn outer_update(state: &mut SimState, task: &TaskData, w: &[f64]) {
    let mut next = vec![0.0; state.j.len()];
    outer_step_into(state, task, w, &mut next);
    state.j = next;
    state.task_count += 1;
}

/// One task without materializing its data sets: adapts on the training
/// stream, then writes the updated representation into `out`. Consumes the
/// random streams in the same order as [`generate_task_with`].
pub(crate) fn fused_task(state: &SimState, index: u64, out: &mut [f64]) -> Vec<f64> {
    let cfg = &state.config;
    let (n, k) = (cfg.n, cfg.k);
    let a = state.variant.activation;
    let mut rngs = TaskRngs::training(state.stream_seed, index);
    let teacher = Teacher::draw(state, &mut rngs, None);
    let mut xi = vec![0.0; n];
    let mut x = vec![0.0; k];

    let mut w = vec![0.0; k];
    for _ in 0..cfg.p {
        fill_normal(&mut rngs.train, &mut xi, 1.0);
        let (sigma, _) = teacher.label(state, &xi, &mut rngs.noise);
        state.fields(&xi, &mut x);
        for (wk, xk) in w.iter_mut().zip(&x) {
            *wk += sigma * act(a, *xk);
        }
    }
    let scale = cfg.eta_w / (cfg.p as f64 * (k as f64).sqrt());
    w.iter_mut().for_each(|wk| *wk *= scale);

    let decay = 1.0 - state.variant.lambda * cfg.eta_j / n as f64;
    for (o, j) in out.iter_mut().zip(&state.j) {
        *o = decay * j;
    }
    let coef = cfg.eta_j / (n as f64 * cfg.v as f64 * (k as f64).sqrt());
    for _ in 0..cfg.v {
        fill_normal(&mut rngs.val, &mut xi, 1.0);
        let (sigma, _) = teacher.label(state, &xi, &mut rngs.noise);
        state.fields(&xi, &mut x);
        let err = sigma - state.student_output(&w, &x);
        for kk in 0..k {
            let h = err * w[kk] * act_prime(a, x[kk]);
            if h == 0.0 {
                continue;
            }
            let c = coef * h;
            for (o, v) in out[kk * n..(kk + 1) * n].iter_mut().zip(&xi) {
                *o += c * v;
            }
        }
    }
    w
}

/// Generate, adapt and update once; returns the adapted head.
pub fn step(state: &mut SimState) -> Vec<f64> {
    let mut next = vec![0.0; state.j.len()];
    let w = fused_task(state, state.task_count, &mut next);
    state.j = next;
    state.task_count += 1;
    w
}

fn overlaps(a: &[f64], ra: usize, b: &[f64], rb: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(ra, rb, |i, j| dot(&a[i * n..(i + 1) * n], &b[j * n..(j + 1) * n]))
}

/// `Q = J Jᵀ`, `R = J Bᵀ`, `T = B Bᵀ`.
pub fn measure_order_params(state: &SimState) -> Result<OrderParams> {
    let (n, k, m) = (state.config.n, state.config.k, state.config.m);
    let mut q = overlaps(&state.j, k, &state.j, k, n);
    let mut t = overlaps(&state.b, m, &state.b, m, n);
    q = (&q + q.transpose()) * 0.5;
    t = (&t + t.transpose()) * 0.5;
    let r = overlaps(&state.j, k, &state.b, m, n);
    OrderParams::new(q, r, t)
}

/// Monte Carlo estimate of the meta-generalization error at the current `J`:
/// `n_tasks` fresh tasks, each adapted on a fresh training set and scored by
/// half the squared error on `n_test` fresh points.
pub fn empirical_meta_error(state: &SimState, n_tasks: usize, n_test: usize) -> Result<Estimate> {
    empirical_meta_error_with(state, n_tasks, n_test, None)
}

/// As [`empirical_meta_error`], optionally forcing every test task's `u`.
pub fn empirical_meta_error_with(
    state: &SimState,
    n_tasks: usize,
    n_test: usize,
    u: Option<&[f64]>,
) -> Result<Estimate> {
    if n_tasks == 0 {
        return Err(LabError::config("n_tasks", "must be at least 1"));
    }
    if n_test == 0 {
        return Err(LabError::config("n_test", "must be at least 1"));
    }
    let (n, k) = (state.config.n, state.config.k);
    let mut per_task = RunningStats::default();
    let mut x = vec![0.0; k];
    for i in 0..n_tasks as u64 {
        let mut rngs = TaskRngs::test(state.stream_seed, state.task_count, i);
        let teacher = Teacher::draw(state, &mut rngs, u);
        let (train_xi, train_sigma, train_noise) =
            teacher.examples(state, state.config.p, &mut rngs.train, &mut rngs.noise);
        let task = TaskData {
            u: Vec::new(),
            delta_b: None,
            train_xi,
            train_sigma,
            train_noise,
            val_xi: Vec::new(),
            val_sigma: Vec::new(),
            val_noise: Vec::new(),
        };
        let w = inner_adapt(state, &task);
        let (test_xi, test_sigma, _) = teacher.examples(state, n_test, &mut rngs.val, &mut rngs.noise);
        let mut loss = 0.0;
        for (xi, sigma) in test_xi.chunks_exact(n).zip(&test_sigma) {
            state.fields(xi, &mut x);
            let e = sigma - state.student_output(&w, &x);
            loss += 0.5 * e * e;
        }
        per_task.push(loss / n_test as f64);
    }
    Ok(per_task.into())
}

#[cfg(test)]
mod tests;
