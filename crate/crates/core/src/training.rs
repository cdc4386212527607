//! Losses, gradients of trajectory losses, ADAM and the full-batch training loop.
//!
//! The trajectory loss is the mean over observation times of the squared Euclidean
//! error, `(1/N) sum_i |u(t_i) - obs_i|^2`, plus an optional L1 penalty on the
//! parameters. Gradients come either from the continuous adjoint (backward Tsit5 solve
//! of the augmented adjoint system) or from exact reverse-mode differentiation of a
//! fixed-step RK4 discretization.

use std::cell::RefCell;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::odeint::{
    rk4_step, tsit5_solve, AdjointSystem, DenseSolution, OdeSystem, Rk4Work, SolveError,
    SolverOptions, Trajectory,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("solver failed: {0}")]
    Solve(#[from] SolveError),
    #[error("training diverged at epoch {epoch} after {retries} step-size reductions")]
    Diverged { epoch: usize, retries: usize },
    #[error("invalid training data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean over time points of the squared Euclidean error. Both slices are row-major with
/// `dim` values per time point.
pub fn mse(pred: &[f64], obs: &[f64], dim: usize) -> f64 {
    assert_eq!(pred.len(), obs.len(), "prediction and observation lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    let n = (pred.len() / dim.max(1)) as f64;
    pred.iter()
        .zip(obs)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / n
}

pub fn l1_norm(theta: &[f64]) -> f64 {
    theta.iter().map(|v| v.abs()).sum()
}

/// Subgradient of the L1 norm with `sign(0) = 0`.
pub fn l1_subgradient(theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Initial condition and observations of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations<'a> {
    pub t0: f64,
    pub u0: &'a [f64],
    pub data: &'a Trajectory,
}

impl Observations<'_> {
    fn validate(&self, dim: usize) -> Result<()> {
        let d = self.data;
        if self.u0.len() != dim || d.dim != dim {
            return Err(TrainError::InvalidData(format!(
                "state dimension {} / data dimension {} do not match system dimension {dim}",
                self.u0.len(),
                d.dim
            )));
        }
        if d.times.is_empty() {
            return Err(TrainError::InvalidData("no observation times".into()));
        }
        if d.states.len() != d.times.len() * dim {
            return Err(TrainError::InvalidData("observation array has the wrong length".into()));
        }
        if d.times[0] < self.t0 || d.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(TrainError::InvalidData(
                "observation times must be sorted and not precede t0".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub mse: f64,
    pub grad: Vec<f64>,
}

/// Forward solve evaluated at `times`.
pub fn predict<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    u0: &[f64],
    t0: f64,
    times: &[f64],
    opts: &SolverOptions,
) -> std::result::Result<Trajectory, SolveError> {
    tsit5_solve(sys, theta, u0, t0, times, opts)
}

struct AdjointRhs<'a, S: ?Sized> {
    sys: &'a S,
    fwd: &'a DenseSolution,
    theta: &'a [f64],
    n: usize,
    u: RefCell<Vec<f64>>,
}

impl<S: AdjointSystem + ?Sized> OdeSystem for AdjointRhs<'_, S> {
    fn dim(&self) -> usize {
        self.n + self.theta.len()
    }

    // Reversed time: s = -t.
    fn rhs(&self, s: f64, z: &[f64], _p: &[f64], dz: &mut [f64]) {
        let t = -s;
        let mut u = self.u.borrow_mut();
        self.fwd.eval_into(t, &mut u);
        dz.iter_mut().for_each(|v| *v = 0.0);
        let (da, dth) = dz.split_at_mut(self.n);
        self.sys
            .rhs_vjp(t, &u, self.theta, &z[..self.n], da, dth);
    }
}

/// MSE gradient by the continuous adjoint method.
///
/// The forward trajectory is kept as a Tsit5 dense solution. The adjoint state and the
/// parameter accumulator are integrated backward between consecutive observation times
/// with Tsit5 at the same tolerances, with a jump of `2 (u(t_i) - obs_i) / N` applied
/// to the adjoint at every observation.
pub fn adjoint_gradient<S: AdjointSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    opts: &SolverOptions,
) -> Result<LossGrad> {
    let n = sys.dim();
    let p = sys.num_params();
    obs.validate(n)?;
    if theta.len() != p {
        return Err(TrainError::InvalidData(format!(
            "parameter vector has length {}, system expects {p}",
            theta.len()
        )));
    }
    let times = &obs.data.times;
    let t_last = times[times.len() - 1];
    let fwd = DenseSolution::solve(sys, theta, obs.u0, obs.t0, t_last, opts)?;
    let pred = fwd.sample(times);
    let nt = times.len();
    let loss = mse(&pred.states, &obs.data.states, n);
    if !loss.is_finite() {
        return Err(TrainError::Solve(SolveError::InvalidInput(
            "non-finite loss".into(),
        )));
    }

    let adj = AdjointRhs {
        sys,
        fwd: &fwd,
        theta,
        n,
        u: RefCell::new(vec![0.0; n]),
    };
    let mut z = vec![0.0; n + p];
    let scale = 2.0 / nt as f64;
    for i in (0..nt).rev() {
        let pi = pred.state(i);
        let oi = obs.data.state(i);
        for j in 0..n {
            z[j] += scale * (pi[j] - oi[j]);
        }
        let t_hi = times[i];
        let t_lo = if i > 0 { times[i - 1] } else { obs.t0 };
        if t_hi > t_lo {
            let tr = tsit5_solve(&adj, &[], &z, -t_hi, &[-t_lo], opts)?;
            z.copy_from_slice(tr.state(0));
        }
    }
    Ok(LossGrad {
        mse: loss,
        grad: z[n..].to_vec(),
    })
}

/// RK4 grid: each observation interval is split into `ceil(interval / dt)` equal steps.
fn rk4_grid(t0: f64, times: &[f64], dt: f64) -> Vec<(f64, f64, Option<usize>)> {
    // (step start, step size, observation index reached at the end of this step)
    let mut steps = Vec::new();
    let mut prev = t0;
    for (i, &t) in times.iter().enumerate() {
        let span = t - prev;
        if span > 0.0 {
            let m = (span / dt - 1e-9).ceil().max(1.0) as usize;
            let h = span / m as f64;
            for k in 0..m {
                let obs = if k + 1 == m { Some(i) } else { None };
                steps.push((prev + k as f64 * h, h, obs));
            }
        }
        prev = t;
    }
    steps
}

fn rk4_forward<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    dt: f64,
) -> (Vec<(f64, f64, Option<usize>)>, Vec<f64>, Vec<f64>) {
    let n = sys.dim();
    let steps = rk4_grid(obs.t0, &obs.data.times, dt);
    let nt = obs.data.times.len();
    let mut pred = vec![0.0; nt * n];
    let mut u = obs.u0.to_vec();
    let mut states = Vec::with_capacity((steps.len() + 1) * n);
    for (i, &t) in obs.data.times.iter().enumerate() {
        if t == obs.t0 {
            pred[i * n..(i + 1) * n].copy_from_slice(&u);
        }
    }
    let mut ws = Rk4Work::new(n);
    for &(t, h, hit) in &steps {
        states.extend_from_slice(&u);
        rk4_step(sys, theta, t, h, &mut u, &mut ws);
        if let Some(i) = hit {
            // Later observations at the same time share this state.
            let mut j = i;
            while j < nt && obs.data.times[j] == obs.data.times[i] {
                pred[j * n..(j + 1) * n].copy_from_slice(&u);
                j += 1;
            }
        }
    }
    (steps, states, pred)
}

/// MSE of the fixed-step RK4 discretization.
pub fn discrete_loss<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    dt: f64,
) -> Result<f64> {
    obs.validate(sys.dim())?;
    if !(dt > 0.0) {
        return Err(TrainError::InvalidData(format!("RK4 step must be positive, got {dt}")));
    }
    let (_, _, pred) = rk4_forward(sys, theta, obs, dt);
    Ok(mse(&pred, &obs.data.states, sys.dim()))
}

/// Exact gradient of [`discrete_loss`] by reverse-mode differentiation through RK4.
pub fn discrete_gradient<S: AdjointSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    dt: f64,
) -> Result<LossGrad> {
    let n = sys.dim();
    let p = sys.num_params();
    obs.validate(n)?;
    if !(dt > 0.0) {
        return Err(TrainError::InvalidData(format!("RK4 step must be positive, got {dt}")));
    }
    let (steps, states, pred) = rk4_forward(sys, theta, obs, dt);
    let loss = mse(&pred, &obs.data.states, n);
    if !loss.is_finite() {
        return Err(TrainError::Solve(SolveError::InvalidInput(
            "non-finite loss".into(),
        )));
    }
    let nt = obs.data.times.len();
    let scale = 2.0 / nt as f64;
    let resid = |i: usize, j: usize| scale * (pred[i * n + j] - obs.data.states[i * n + j]);

    let mut grad = vec![0.0; p];
    let mut ub = vec![0.0; n];
    let mut ws = Rk4Work::new(n);
    let mut tmp = vec![0.0; n];
    let mut kb = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut zb = vec![0.0; n];

    for (s, &(t, h, hit)) in steps.iter().enumerate().rev() {
        if let Some(i) = hit {
            let mut j = i;
            while j < nt && obs.data.times[j] == obs.data.times[i] {
                for c in 0..n {
                    ub[c] += resid(j, c);
                }
                j += 1;
            }
        }
        let u = &states[s * n..(s + 1) * n];
        // Recompute the stages.
        sys.rhs(t, u, theta, &mut ws.k[0]);
        for j in 0..n {
            tmp[j] = u[j] + 0.5 * h * ws.k[0][j];
        }
        sys.rhs(t + 0.5 * h, &tmp, theta, &mut ws.k[1]);
        for j in 0..n {
            tmp[j] = u[j] + 0.5 * h * ws.k[1][j];
        }
        sys.rhs(t + 0.5 * h, &tmp, theta, &mut ws.k[2]);

        for j in 0..n {
            kb[0][j] = h / 6.0 * ub[j];
            kb[1][j] = h / 3.0 * ub[j];
            kb[2][j] = h / 3.0 * ub[j];
            kb[3][j] = h / 6.0 * ub[j];
        }
        // Stage 4 at u + h k3.
        for j in 0..n {
            tmp[j] = u[j] + h * ws.k[2][j];
        }
        zb.iter_mut().for_each(|v| *v = 0.0);
        sys.rhs_vjp(t + h, &tmp, theta, &kb[3], &mut zb, &mut grad);
        for j in 0..n {
            ub[j] += zb[j];
            kb[2][j] += h * zb[j];
        }
        // Stage 3 at u + h/2 k2.
        for j in 0..n {
            tmp[j] = u[j] + 0.5 * h * ws.k[1][j];
        }
        zb.iter_mut().for_each(|v| *v = 0.0);
        sys.rhs_vjp(t + 0.5 * h, &tmp, theta, &kb[2], &mut zb, &mut grad);
        for j in 0..n {
            ub[j] += zb[j];
            kb[1][j] += 0.5 * h * zb[j];
        }
        // Stage 2 at u + h/2 k1.
        for j in 0..n {
            tmp[j] = u[j] + 0.5 * h * ws.k[0][j];
        }
        zb.iter_mut().for_each(|v| *v = 0.0);
        sys.rhs_vjp(t + 0.5 * h, &tmp, theta, &kb[1], &mut zb, &mut grad);
        for j in 0..n {
            ub[j] += zb[j];
            kb[0][j] += 0.5 * h * zb[j];
        }
        // Stage 1 at u.
        zb.iter_mut().for_each(|v| *v = 0.0);
        sys.rhs_vjp(t, u, theta, &kb[0], &mut zb, &mut grad);
        for j in 0..n {
            ub[j] += zb[j];
        }
    }
    Ok(LossGrad { mse: loss, grad })
}

/// Central finite differences of [`discrete_loss`].
pub fn finite_difference_gradient<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    dt: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut th = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for k in 0..theta.len() {
        let orig = th[k];
        let step = eps * orig.abs().max(1.0);
        th[k] = orig + step;
        let up = discrete_loss(sys, &th, obs, dt)?;
        th[k] = orig - step;
        let down = discrete_loss(sys, &th, obs, dt)?;
        th[k] = orig;
        grad[k] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative difference `max|a - b| / max|b|` in the infinity norm.
pub fn relative_inf_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected ADAM update in place.
    pub fn step(&mut self, params: &AdamParams, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len());
        assert_eq!(theta.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - params.beta1.powi(self.t as i32);
        let b2t = 1.0 - params.beta2.powi(self.t as i32);
        for k in 0..theta.len() {
            let g = grad[k];
            self.m[k] = params.beta1 * self.m[k] + (1.0 - params.beta1) * g;
            self.v[k] = params.beta2 * self.v[k] + (1.0 - params.beta2) * g * g;
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            theta[k] -= params.lr * mh / (vh.sqrt() + params.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    #[default]
    Adjoint,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// L1 penalty weight.
    pub gamma_sp: f64,
    pub seed: u64,
    pub rtol: f64,
    pub atol: f64,
    pub early_stop_loss: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_mode: GradMode,
    /// Test MSE is evaluated every this many epochs.
    pub test_every: usize,
    /// RK4 step for the discrete gradient mode.
    pub discrete_dt: f64,
    /// Epochs at which to keep a copy of the parameters (before that epoch's update).
    pub snapshot_at: Vec<usize>,
    pub max_lr_halvings: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 1000,
            gamma_sp: 0.0,
            seed: 1,
            rtol: 1e-6,
            atol: 1e-6,
            early_stop_loss: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_mode: GradMode::Adjoint,
            test_every: 100,
            discrete_dt: 0.01,
            snapshot_at: Vec::new(),
            max_lr_halvings: 10,
        }
    }
}

impl TrainConfig {
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions::tol(self.rtol, self.atol)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
    pub l1: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub theta: Vec<f64>,
    pub train_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    /// Parameters after the last accepted update.
    pub theta: Vec<f64>,
    /// Parameters with the lowest training objective (MSE plus L1 term) seen.
    pub best_theta: Vec<f64>,
    /// Training MSE at `best_theta`.
    pub best_train_mse: f64,
    /// One report per epoch, evaluated before that epoch's update.
    pub history: Vec<LossReport>,
    /// Evaluation of `theta`.
    pub final_report: LossReport,
    pub divergences: usize,
    pub stopped_early: bool,
    pub snapshots: Vec<Snapshot>,
}

/// Training and optional test data for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub t0: f64,
    pub u0: Vec<f64>,
    pub train: Trajectory,
    pub test: Option<Trajectory>,
}

impl TrainData {
    pub fn train_obs(&self) -> Observations<'_> {
        Observations {
            t0: self.t0,
            u0: &self.u0,
            data: &self.train,
        }
    }
}

/// MSE and gradient with respect to theta for the configured gradient mode.
pub fn loss_and_grad<S: AdjointSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    obs: &Observations<'_>,
    cfg: &TrainConfig,
) -> Result<LossGrad> {
    match cfg.grad_mode {
        GradMode::Adjoint => adjoint_gradient(sys, theta, obs, &cfg.solver_options()),
        GradMode::Discrete => discrete_gradient(sys, theta, obs, cfg.discrete_dt),
    }
}

/// MSE of the forward solve against a data trajectory.
pub fn trajectory_mse<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    t0: f64,
    u0: &[f64],
    data: &Trajectory,
    opts: &SolverOptions,
) -> std::result::Result<f64, SolveError> {
    let pred = tsit5_solve(sys, theta, u0, t0, &data.times, opts)?;
    Ok(mse(&pred.states, &data.states, data.dim))
}

/// Full-batch ADAM training of `sys` from `theta0`.
///
/// A parameter update whose loss cannot be evaluated (solver failure or non-finite loss)
/// is rejected: the previous parameters and optimizer state are restored and the update
/// is retried with half the learning rate, halving again on repeated failure. Later
/// epochs use the configured rate again.
pub fn train<S: AdjointSystem + ?Sized>(
    sys: &S,
    theta0: &[f64],
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let p = sys.num_params();
    if theta0.len() != p {
        return Err(TrainError::InvalidData(format!(
            "parameter vector has length {}, system expects {p}",
            theta0.len()
        )));
    }
    let obs = data.train_obs();
    obs.validate(sys.dim())?;
    if let Some(test) = &data.test {
        Observations {
            t0: data.t0,
            u0: &data.u0,
            data: test,
        }
        .validate(sys.dim())?;
    }
    let opts = cfg.solver_options();
    let start = Instant::now();
    let adam_params = cfg.adam();
    // Learning rate of the update that produced the current parameters.
    let mut step_lr = cfg.lr;
    let mut adam = AdamState::new(p);
    let mut theta = theta0.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_theta = theta.clone();
    let mut best = f64::INFINITY;
    let mut best_mse = f64::INFINITY;
    let mut divergences = 0;
    let mut snapshots = Vec::new();
    let mut stopped_early = false;
    // Parameters, optimizer state and gradient of the last successfully evaluated point.
    let mut prev: Option<(Vec<f64>, AdamState, Vec<f64>)> = None;
    let mut retries = 0;

    let test_mse = |theta: &[f64]| -> Option<f64> {
        data.test
            .as_ref()
            .map(|t| trajectory_mse(sys, theta, data.t0, &data.u0, t, &opts).unwrap_or(f64::NAN))
    };

    let mut epoch = 0;
    while epoch < cfg.epochs {
        let eval = loss_and_grad(sys, &theta, &obs, cfg);
        let lg = match eval {
            Ok(lg) => lg,
            Err(e) => {
                let Some((pt, pa, pg)) = &prev else {
                    return Err(e);
                };
                divergences += 1;
                retries += 1;
                if retries > cfg.max_lr_halvings {
                    return Err(TrainError::Diverged { epoch, retries });
                }
                log::warn!("epoch {epoch}: rejected update ({e}); retrying with a smaller step");
                step_lr = cfg.lr * 0.5f64.powi(retries as i32);
                theta = pt.clone();
                adam = pa.clone();
                adam.step(&AdamParams { lr: step_lr, ..adam_params }, &mut theta, pg);
                continue;
            }
        };
        retries = 0;
        let l1 = l1_norm(&theta);
        let total = lg.mse + cfg.gamma_sp * l1;
        let test = if cfg.test_every > 0 && epoch % cfg.test_every == 0 {
            test_mse(&theta)
        } else {
            None
        };
        history.push(LossReport {
            epoch,
            train_mse: lg.mse,
            test_mse: test,
            l1,
            total,
            lr: step_lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if total < best {
            best = total;
            best_mse = lg.mse;
            best_theta.clone_from(&theta);
        }
        if cfg.snapshot_at.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                theta: theta.clone(),
                train_mse: lg.mse,
            });
        }
        if cfg.early_stop_loss.is_some_and(|thr| lg.mse <= thr) {
            stopped_early = true;
            break;
        }
        let mut grad = lg.grad;
        if cfg.gamma_sp != 0.0 {
            for (g, s) in grad.iter_mut().zip(l1_subgradient(&theta)) {
                *g += cfg.gamma_sp * s;
            }
        }
        prev = Some((theta.clone(), adam.clone(), grad.clone()));
        step_lr = cfg.lr;
        adam.step(&adam_params, &mut theta, &grad);
        epoch += 1;
    }

    // Final evaluation of the parameters after the last update.
    let final_report = if stopped_early {
        let mut r = history.last().cloned().expect("at least one epoch ran");
        if r.test_mse.is_none() {
            r.test_mse = test_mse(&theta);
        }
        r
    } else {
        let mut attempt = 0;
        loop {
            let final_eval = match cfg.grad_mode {
                GradMode::Adjoint => {
                    trajectory_mse(sys, &theta, data.t0, &data.u0, &data.train, &opts)
                        .map_err(TrainError::from)
                        .and_then(|m| {
                            if m.is_finite() {
                                Ok(m)
                            } else {
                                Err(TrainError::Solve(SolveError::InvalidInput(
                                    "non-finite loss".into(),
                                )))
                            }
                        })
                }
                GradMode::Discrete => discrete_loss(sys, &theta, &obs, cfg.discrete_dt),
            };
            match (final_eval, &prev) {
                (Ok(m), _) => {
                    let l1 = l1_norm(&theta);
                    break LossReport {
                        epoch: cfg.epochs,
                        train_mse: m,
                        test_mse: test_mse(&theta),
                        l1,
                        total: m + cfg.gamma_sp * l1,
                        lr: step_lr,
                        wall_ms: start.elapsed().as_millis() as u64,
                    };
                }
                (Err(e), None) => return Err(e),
                (Err(_), Some((pt, pa, pg))) => {
                    divergences += 1;
                    attempt += 1;
                    if attempt > cfg.max_lr_halvings {
                        theta = pt.clone();
                        let mut r = history.last().cloned().expect("an epoch was evaluated");
                        r.epoch = cfg.epochs;
                        break r;
                    }
                    step_lr = cfg.lr * 0.5f64.powi(attempt as i32);
                    theta = pt.clone();
                    adam = pa.clone();
                    adam.step(&AdamParams { lr: step_lr, ..adam_params }, &mut theta, pg);
                }
            }
        }
    };
    if final_report.total < best {
        best_mse = final_report.train_mse;
        best_theta.clone_from(&theta);
    }
    if !stopped_early && cfg.snapshot_at.contains(&cfg.epochs) {
        snapshots.push(Snapshot {
            epoch: cfg.epochs,
            theta: theta.clone(),
            train_mse: final_report.train_mse,
        });
    }
    Ok(TrainResult {
        theta,
        best_theta,
        best_train_mse: best_mse,
        history,
        final_report,
        divergences,
        stopped_early,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `du/dt = A u` with `theta = A` (row-major).
    struct Linear(usize);

    impl OdeSystem for Linear {
        fn dim(&self) -> usize {
            self.0
        }
        fn rhs(&self, _t: f64, u: &[f64], theta: &[f64], du: &mut [f64]) {
            let n = self.0;
            for i in 0..n {
                du[i] = (0..n).map(|j| theta[i * n + j] * u[j]).sum();
            }
        }
    }

    impl AdjointSystem for Linear {
        fn num_params(&self) -> usize {
            self.0 * self.0
        }
        fn rhs_vjp(
            &self,
            _t: f64,
            u: &[f64],
            theta: &[f64],
            v: &[f64],
            u_bar: &mut [f64],
            theta_bar: &mut [f64],
        ) {
            let n = self.0;
            for i in 0..n {
                for j in 0..n {
                    u_bar[j] += theta[i * n + j] * v[i];
                    theta_bar[i * n + j] += v[i] * u[j];
                }
            }
        }
    }

    /// Scalar logistic growth `du/dt = a u (1 - u / b)`.
    struct Logistic;

    impl OdeSystem for Logistic {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, u: &[f64], th: &[f64], du: &mut [f64]) {
            du[0] = th[0] * u[0] * (1.0 - u[0] / th[1]);
        }
    }

    impl AdjointSystem for Logistic {
        fn num_params(&self) -> usize {
            2
        }
        fn rhs_vjp(&self, _t: f64, u: &[f64], th: &[f64], v: &[f64], ub: &mut [f64], tb: &mut [f64]) {
            let (a, b, x) = (th[0], th[1], u[0]);
            ub[0] += v[0] * a * (1.0 - 2.0 * x / b);
            tb[0] += v[0] * x * (1.0 - x / b);
            tb[1] += v[0] * a * x * x / (b * b);
        }
    }

    fn observations(times: &[f64], values: &[f64], dim: usize) -> Trajectory {
        Trajectory {
            times: times.to_vec(),
            states: values.to_vec(),
            dim,
            stats: Default::default(),
        }
    }

    #[test]
    fn mse_definition() {
        // Two time points of a 2-d state.
        let pred = [1.0, 2.0, 3.0, 4.0];
        let obs = [1.0, 0.0, 0.0, 4.0];
        assert_eq!(mse(&pred, &obs, 2), (4.0 + 9.0) / 2.0);
        assert_eq!(mse(&obs, &obs, 2), 0.0);
    }

    #[test]
    fn l1_and_sign() {
        assert_eq!(l1_norm(&[1.0, -2.0, 0.0]), 3.0);
        assert_eq!(l1_subgradient(&[1.5, -0.1, 0.0]), vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut st = AdamState::new(3);
        let mut th = vec![0.0; 3];
        let p = AdamParams::default();
        st.step(&p, &mut th, &[2.0, -0.5, 0.0]);
        assert!((th[0] + 0.01).abs() < 1e-9);
        assert!((th[1] - 0.01).abs() < 1e-9);
        assert_eq!(th[2], 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut st = AdamState::new(2);
        let mut th = vec![3.0, -2.0];
        let p = AdamParams {
            lr: 0.05,
            ..AdamParams::default()
        };
        for _ in 0..2000 {
            let g = vec![2.0 * (th[0] - 1.0), 2.0 * (th[1] + 1.0)];
            st.step(&p, &mut th, &g);
        }
        assert!((th[0] - 1.0).abs() < 1e-3 && (th[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut st = AdamState::new(2);
        let mut th = vec![0.3, 0.4];
        st.step(
            &AdamParams {
                lr: 0.0,
                ..AdamParams::default()
            },
            &mut th,
            &[1.0, 1.0],
        );
        assert_eq!(th, vec![0.3, 0.4]);
    }

    #[test]
    fn gradients_agree_on_linear_system() {
        let sys = Linear(2);
        let theta = [-0.3, 0.8, -0.9, -0.1];
        let times = [0.25, 0.5, 1.0];
        let data = observations(&times, &[0.9, 0.1, 0.8, -0.1, 0.6, -0.4], 2);
        let obs = Observations {
            t0: 0.0,
            u0: &[1.0, 0.0],
            data: &data,
        };
        let adj = adjoint_gradient(&sys, &theta, &obs, &SolverOptions::tol(1e-10, 1e-10)).unwrap();
        let disc = discrete_gradient(&sys, &theta, &obs, 0.01).unwrap();
        let fd = finite_difference_gradient(&sys, &theta, &obs, 0.01, 1e-6).unwrap();
        assert!(relative_inf_error(&disc.grad, &fd) < 1e-7);
        assert!(relative_inf_error(&adj.grad, &disc.grad) < 1e-6);
        assert!((adj.mse - disc.mse).abs() < 1e-8);
    }

    #[test]
    fn gradient_with_observation_at_t0_and_repeats() {
        let sys = Logistic;
        let theta = [1.2, 2.0];
        let times = [0.0, 0.5, 0.5, 1.5];
        let data = observations(&times, &[0.5, 0.8, 0.75, 1.4], 1);
        let obs = Observations {
            t0: 0.0,
            u0: &[0.5],
            data: &data,
        };
        let disc = discrete_gradient(&sys, &theta, &obs, 0.05).unwrap();
        let fd = finite_difference_gradient(&sys, &theta, &obs, 0.05, 1e-6).unwrap();
        assert!(relative_inf_error(&disc.grad, &fd) < 1e-7);
        let adj = adjoint_gradient(&sys, &theta, &obs, &SolverOptions::tol(1e-10, 1e-10)).unwrap();
        assert!(relative_inf_error(&adj.grad, &disc.grad) < 1e-5);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let sys = Logistic;
        let theta = [1.0, 3.0];
        let opts = SolverOptions::tol(1e-10, 1e-10);
        let times = [0.5, 1.0, 2.0];
        let truth = tsit5_solve(&sys, &theta, &[0.2], 0.0, &times, &opts).unwrap();
        let obs = Observations {
            t0: 0.0,
            u0: &[0.2],
            data: &truth,
        };
        let lg = adjoint_gradient(&sys, &theta, &obs, &opts).unwrap();
        assert!(lg.mse < 1e-20);
        assert!(lg.grad.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn data_validation() {
        let sys = Logistic;
        let data = observations(&[1.0, 0.5], &[0.1, 0.2], 1);
        let obs = Observations {
            t0: 0.0,
            u0: &[0.5],
            data: &data,
        };
        assert!(matches!(
            adjoint_gradient(&sys, &[1.0, 1.0], &obs, &SolverOptions::default()),
            Err(TrainError::InvalidData(_))
        ));
    }

    fn logistic_data() -> TrainData {
        let opts = SolverOptions::tol(1e-10, 1e-10);
        let train_t: Vec<f64> = (1..=10).map(|i| i as f64 * 0.5).collect();
        let test_t: Vec<f64> = (11..=16).map(|i| i as f64 * 0.5).collect();
        let th = [1.0, 2.0];
        TrainData {
            t0: 0.0,
            u0: vec![0.1],
            train: tsit5_solve(&Logistic, &th, &[0.1], 0.0, &train_t, &opts).unwrap(),
            test: Some(tsit5_solve(&Logistic, &th, &[0.1], 0.0, &test_t, &opts).unwrap()),
        }
    }

    #[test]
    fn training_recovers_logistic_parameters() {
        let data = logistic_data();
        let cfg = TrainConfig {
            lr: 0.02,
            epochs: 1500,
            test_every: 100,
            ..TrainConfig::default()
        };
        let res = train(&Logistic, &[0.6, 1.5], &data, &cfg).unwrap();
        assert_eq!(res.history.len(), 1500);
        assert!(res.history[0].test_mse.is_some());
        assert!(res.history[1].test_mse.is_none());
        assert!(res.final_report.train_mse < 1e-4, "{:?}", res.final_report);
        assert!((res.theta[0] - 1.0).abs() < 0.05 && (res.theta[1] - 2.0).abs() < 0.05);
        assert!(res.best_train_mse <= res.history.iter().map(|r| r.train_mse).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = logistic_data();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let res = train(&Logistic, &[0.6, 1.5], &data, &cfg).unwrap();
        assert_eq!(res.theta, vec![0.6, 1.5]);
        assert!(res.history.windows(2).all(|w| w[0].train_mse == w[1].train_mse));
    }

    #[test]
    fn early_stop_and_snapshots() {
        let data = logistic_data();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 50,
            early_stop_loss: Some(1e-6),
            ..TrainConfig::default()
        };
        let res = train(&Logistic, &[1.0, 2.0], &data, &cfg).unwrap();
        assert!(res.stopped_early);
        assert_eq!(res.history.len(), 1);

        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 6,
            snapshot_at: vec![3, 6],
            ..TrainConfig::default()
        };
        let res = train(&Logistic, &[0.6, 1.5], &data, &cfg).unwrap();
        assert_eq!(res.snapshots.len(), 2);
        assert_eq!(res.snapshots[0].train_mse, res.history[3].train_mse);
        assert_eq!(res.snapshots[1].theta, res.theta);
    }

    #[test]
    fn training_is_deterministic() {
        let data = logistic_data();
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let a = train(&Logistic, &[0.6, 1.5], &data, &cfg).unwrap();
        let b = train(&Logistic, &[0.6, 1.5], &data, &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        let strip = |h: &[LossReport]| h.iter().map(|r| (r.train_mse, r.test_mse)).collect::<Vec<_>>();
        assert_eq!(strip(&a.history), strip(&b.history));
    }

    #[test]
    fn divergence_rejects_update_and_halves_lr() {
        // Blow-up for large growth rates: u' = a u^2 with u0 = 1 explodes before t = 1
        // once a > 1.
        struct Quad;
        impl OdeSystem for Quad {
            fn dim(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f64, u: &[f64], th: &[f64], du: &mut [f64]) {
                du[0] = th[0] * u[0] * u[0];
            }
        }
        impl AdjointSystem for Quad {
            fn num_params(&self) -> usize {
                1
            }
            fn rhs_vjp(&self, _t: f64, u: &[f64], th: &[f64], v: &[f64], ub: &mut [f64], tb: &mut [f64]) {
                ub[0] += v[0] * 2.0 * th[0] * u[0];
                tb[0] += v[0] * u[0] * u[0];
            }
        }
        let data = TrainData {
            t0: 0.0,
            u0: vec![1.0],
            train: observations(&[1.0], &[50.0], 1),
            test: None,
        };
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 20,
            ..TrainConfig::default()
        };
        let res = train(&Quad, &[0.8], &data, &cfg).unwrap();
        assert!(res.divergences > 0);
        assert!(res.theta[0] < 1.0);
        assert!(res.history.iter().any(|r| r.lr < 0.5));
        assert!(res.history.iter().any(|r| r.epoch > 0 && r.lr == 0.5));
        // Failure at the starting point is fatal.
        assert!(train(&Quad, &[2.0], &data, &cfg).is_err());
    }
}
