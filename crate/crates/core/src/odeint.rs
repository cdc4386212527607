//! Explicit Runge-Kutta integration: adaptive Tsitouras 5(4) with dense output and a
//! fixed-step classical RK4.
//!
//! Systems see their parameters through a flat slice so that the same system object
//! can be integrated with many parameter vectors during training.

use thiserror::Error;

/// Right-hand side `du/dt = f(t, u; theta)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, u: &[f64], theta: &[f64], du: &mut [f64]);
}

/// An [`OdeSystem`] that can also apply the transposed Jacobians of its right-hand side.
pub trait AdjointSystem: OdeSystem {
    fn num_params(&self) -> usize;

    /// Accumulates `(df/du)^T v` into `u_bar` and `(df/dtheta)^T v` into `theta_bar`.
    fn rhs_vjp(
        &self,
        t: f64,
        u: &[f64],
        theta: &[f64],
        v: &[f64],
        u_bar: &mut [f64],
        theta_bar: &mut [f64],
    );
}

/// Wraps a closure `f(t, u, theta, du)` as an [`OdeSystem`].
pub struct FnSystem<F> {
    dim: usize,
    f: F,
}

impl<F> FnSystem<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, t: f64, u: &[f64], theta: &[f64], du: &mut [f64]) {
        (self.f)(t, u, theta, du)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// States at a sequence of times, stored row-major (`states[i * dim + j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub dim: usize,
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim.max(1))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("step size underflow at t = {t} (dt = {dt:e})")]
    StepSizeUnderflow {
        t: f64,
        dt: f64,
        partial: Box<Trajectory>,
    },
    #[error("maximum number of steps ({max_steps}) exceeded at t = {t}")]
    MaxSteps {
        t: f64,
        max_steps: usize,
        partial: Box<Trajectory>,
    },
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

impl SolveError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            SolveError::StepSizeUnderflow { partial, .. } | SolveError::MaxSteps { partial, .. } => {
                Some(partial)
            }
            SolveError::InvalidInput(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub dt0: Option<f64>,
    pub max_steps: usize,
    /// Only the first `n` components enter the error norm when set.
    pub error_components: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-6,
            dt0: None,
            max_steps: 1_000_000,
            error_components: None,
        }
    }
}

impl SolverOptions {
    pub fn tol(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }
}

pub mod tableau {
    //! Tsitouras 5(4) coefficients.
    pub const C: [f64; 7] = [0.0, 0.161, 0.327, 0.9, 0.980_025_540_904_509_7, 1.0, 1.0];

    pub const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [0.161, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-0.008_480_655_492_356_989, 0.335_480_655_492_357, 0.0, 0.0, 0.0, 0.0],
        [
            2.897_153_057_105_493,
            -6.359_448_489_975_075,
            4.362_295_432_869_581_5,
            0.0,
            0.0,
            0.0,
        ],
        [
            5.325_864_828_439_257,
            -11.748_883_564_062_828,
            7.495_539_342_889_836_5,
            -0.092_495_066_361_755_25,
            0.0,
            0.0,
        ],
        [
            5.861_455_442_946_42,
            -12.920_969_317_847_11,
            8.159_367_898_576_159,
            -0.071_584_973_281_401,
            -0.028_269_050_394_068_383,
            0.0,
        ],
        [
            0.096_460_766_818_065_23,
            0.01,
            0.479_889_650_414_499_6,
            1.379_008_574_103_742,
            -3.290_069_515_436_081,
            2.324_710_524_099_774,
        ],
    ];

    /// Fifth-order weights (equal to the last row of `A`, first-same-as-last).
    pub const B: [f64; 7] = [
        0.096_460_766_818_065_23,
        0.01,
        0.479_889_650_414_499_6,
        1.379_008_574_103_742,
        -3.290_069_515_436_081,
        2.324_710_524_099_774,
        0.0,
    ];

    /// Difference between the fifth- and fourth-order weights.
    pub const BTILDE: [f64; 7] = [
        -0.001_780_011_052_225_777,
        -0.000_816_434_459_656_746_9,
        0.007_880_878_010_261_995,
        -0.144_711_007_173_262_9,
        0.582_357_165_452_555_2,
        -0.458_082_105_929_186_97,
        0.015_151_515_151_515_152,
    ];

    /// Dense-output polynomial coefficients: `b_i(s) = sum_k R[i][k] s^(k+1)`.
    pub const R: [[f64; 4]; 7] = [
        [
            1.0,
            -2.763_706_197_274_826,
            2.913_255_461_821_912_6,
            -1.053_088_497_729_021_6,
        ],
        [0.0, 0.131_699_999_999_999_98, -0.2234, 0.1017],
        [
            0.0,
            3.930_296_236_894_751_6,
            -5.941_033_872_131_505,
            2.490_627_285_651_253,
        ],
        [
            0.0,
            -12.411_077_166_933_676,
            30.338_188_630_282_32,
            -16.548_102_889_244_902,
        ],
        [
            0.0,
            37.509_313_416_511_04,
            -88.178_904_894_766_4,
            47.379_521_962_819_28,
        ],
        [
            0.0,
            -27.896_526_289_197_286,
            65.091_894_674_793_66,
            -34.870_657_861_496_61,
        ],
        [0.0, 1.5, -4.0, 2.5],
    ];

    /// Interpolation weights at the fractional step position `s` in `[0, 1]`.
    pub fn dense_weights(s: f64) -> [f64; 7] {
        let mut out = [0.0; 7];
        for (o, r) in out.iter_mut().zip(R.iter()) {
            *o = s * (r[0] + s * (r[1] + s * (r[2] + s * r[3])));
        }
        out
    }
}

const BETA1: f64 = 0.14;
const BETA2: f64 = 0.08;
const SAFETY: f64 = 0.9;
const QMIN: f64 = 0.2;
const QMAX: f64 = 10.0;
const DT_MIN_REL: f64 = 1e-14;

/// One accepted Tsit5 step: start time, step size, start state and the seven stages.
pub struct AcceptedStep<'a> {
    pub t: f64,
    pub dt: f64,
    /// End time of the step; exactly the requested final time on the last step.
    pub t_end: f64,
    pub u: &'a [f64],
    pub u_new: &'a [f64],
    pub k: &'a [Vec<f64>; 7],
}

impl AcceptedStep<'_> {
    /// Dense interpolant at absolute time `t` inside the step.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        interpolate(self.t, self.dt, self.u, self.k, t, out);
    }
}

fn interpolate(t0: f64, dt: f64, u: &[f64], k: &[Vec<f64>; 7], t: f64, out: &mut [f64]) {
    let s = ((t - t0) / dt).clamp(0.0, 1.0);
    let w = tableau::dense_weights(s);
    for j in 0..u.len() {
        let mut acc = 0.0;
        for i in 0..7 {
            acc += w[i] * k[i][j];
        }
        out[j] = u[j] + dt * acc;
    }
}

fn error_norm(err: &[f64], u: &[f64], u_new: &[f64], rtol: f64, atol: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..n {
        let sc = atol + rtol * u[j].abs().max(u_new[j].abs());
        let e = err[j] / sc;
        acc += e * e;
    }
    (acc / n as f64).sqrt()
}

fn rms_scaled(v: &[f64], u: &[f64], rtol: f64, atol: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..n {
        let e = v[j] / (atol + rtol * u[j].abs());
        acc += e * e;
    }
    (acc / n as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn initial_dt<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    t0: f64,
    u0: &[f64],
    f0: &[f64],
    span: f64,
    opts: &SolverOptions,
    n_err: usize,
    evals: &mut usize,
) -> f64 {
    let d0 = rms_scaled(u0, u0, opts.rtol, opts.atol, n_err);
    let d1 = rms_scaled(f0, u0, opts.rtol, opts.atol, n_err);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 || !d1.is_finite() {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(span);
    let u1: Vec<f64> = u0.iter().zip(f0).map(|(u, f)| u + h0 * f).collect();
    let mut f1 = vec![0.0; u0.len()];
    sys.rhs(t0 + h0, &u1, theta, &mut f1);
    *evals += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, u0, opts.rtol, opts.atol, n_err) / h0;
    let dmax = d1.max(d2);
    let h1 = if !dmax.is_finite() {
        h0 * 1e-3
    } else if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Adaptive Tsit5 integration from `t0` to `t1 >= t0`, calling `on_step` for every
/// accepted step. The final step lands exactly on `t1`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    u0: &[f64],
    t0: f64,
    t1: f64,
    opts: &SolverOptions,
    on_step: &mut dyn FnMut(&AcceptedStep<'_>),
) -> Result<SolveStats, (f64, f64, SolveStats, SolveFailure)> {
    let n = sys.dim();
    let mut stats = SolveStats::default();
    if u0.len() != n {
        return Err((t0, 0.0, stats, SolveFailure::Invalid("initial state length")));
    }
    if !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
        return Err((t0, 0.0, stats, SolveFailure::Invalid("time span")));
    }
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(stats);
    }
    let n_err = opts.error_components.unwrap_or(n).min(n);
    let dt_min = DT_MIN_REL * span;

    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut u = u0.to_vec();
    let mut u_new = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut err = vec![0.0; n];

    sys.rhs(t0, &u, theta, &mut k[0]);
    stats.rhs_evals += 1;
    let mut dt = match opts.dt0 {
        Some(h) => h.min(span),
        None => initial_dt(sys, theta, t0, &u, &k[0], span, opts, n_err, &mut stats.rhs_evals),
    };
    let mut t = t0;
    let mut errold: f64 = 1e-4;
    let mut steps = 0usize;

    loop {
        if steps >= opts.max_steps {
            return Err((t, dt, stats, SolveFailure::MaxSteps(opts.max_steps)));
        }
        steps += 1;
        let remaining = t1 - t;
        let last = dt >= remaining * (1.0 - 1e-12);
        let h = if last { remaining } else { dt };
        if !(h >= dt_min) && !last {
            return Err((t, h, stats, SolveFailure::Underflow));
        }

        for s in 1..7 {
            let a = &tableau::A[s];
            for j in 0..n {
                let mut acc = 0.0;
                for (i, &aij) in a.iter().enumerate().take(s) {
                    acc += aij * k[i][j];
                }
                tmp[j] = u[j] + h * acc;
            }
            sys.rhs(t + tableau::C[s] * h, &tmp, theta, &mut k[s]);
        }
        // The last stage point is the fifth-order solution.
        u_new.copy_from_slice(&tmp);
        stats.rhs_evals += 6;
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..7 {
                acc += tableau::BTILDE[i] * k[i][j];
            }
            err[j] = h * acc;
        }
        let en = error_norm(&err, &u, &u_new, opts.rtol, opts.atol, n_err);
        let finite = en.is_finite() && u_new.iter().all(|v| v.is_finite());

        if finite && en <= 1.0 {
            stats.accepted += 1;
            let t_next = if last { t1 } else { t + h };
            on_step(&AcceptedStep {
                t,
                dt: h,
                t_end: t_next,
                u: &u,
                u_new: &u_new,
                k: &k,
            });
            // PI step-size control.
            let q11 = en.powf(BETA1);
            let q = (q11 / errold.powf(BETA2) / SAFETY).clamp(1.0 / QMAX, 1.0 / QMIN);
            errold = en.max(1e-4);
            let proposed = h / q;
            std::mem::swap(&mut u, &mut u_new);
            k.swap(0, 6);
            t = t_next;
            if last {
                return Ok(stats);
            }
            dt = proposed;
        } else {
            stats.rejected += 1;
            let shrink = if finite {
                (en.powf(BETA1) / SAFETY).min(1.0 / QMIN)
            } else {
                1.0 / QMIN
            };
            dt = h / shrink;
            if dt < dt_min {
                return Err((t, dt, stats, SolveFailure::Underflow));
            }
        }
    }
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveFailure {
    Underflow,
    MaxSteps(usize),
    Invalid(&'static str),
}

fn check_saveat(t0: f64, saveat: &[f64]) -> Result<(), SolveError> {
    if saveat.is_empty() {
        return Err(SolveError::InvalidInput("no output times".into()));
    }
    if saveat.iter().any(|t| !t.is_finite()) {
        return Err(SolveError::InvalidInput("non-finite output time".into()));
    }
    if saveat[0] < t0 {
        return Err(SolveError::InvalidInput(format!(
            "output time {} precedes t0 = {t0}",
            saveat[0]
        )));
    }
    if saveat.windows(2).any(|w| w[1] < w[0]) {
        return Err(SolveError::InvalidInput(
            "output times must be nondecreasing".into(),
        ));
    }
    Ok(())
}

fn to_error(
    fail: (f64, f64, SolveStats, SolveFailure),
    mut partial: Trajectory,
) -> SolveError {
    let (t, dt, stats, kind) = fail;
    partial.stats = stats;
    match kind {
        SolveFailure::Underflow => SolveError::StepSizeUnderflow {
            t,
            dt,
            partial: Box::new(partial),
        },
        SolveFailure::MaxSteps(max_steps) => SolveError::MaxSteps {
            t,
            max_steps,
            partial: Box::new(partial),
        },
        SolveFailure::Invalid(what) => SolveError::InvalidInput(what.into()),
    }
}

/// Integrates with Tsit5 and returns the state at each time of `saveat` (sorted,
/// `>= t0`), evaluated by dense interpolation.
pub fn tsit5_solve<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    u0: &[f64],
    t0: f64,
    saveat: &[f64],
    opts: &SolverOptions,
) -> Result<Trajectory, SolveError> {
    check_saveat(t0, saveat)?;
    let n = sys.dim();
    if u0.len() != n {
        return Err(SolveError::InvalidInput(format!(
            "initial state has length {}, system dimension is {n}",
            u0.len()
        )));
    }
    let t1 = saveat[saveat.len() - 1];
    let mut out = Trajectory {
        times: Vec::with_capacity(saveat.len()),
        states: Vec::with_capacity(saveat.len() * n),
        dim: n,
        stats: SolveStats::default(),
    };
    let mut next = 0;
    while next < saveat.len() && saveat[next] == t0 {
        out.times.push(t0);
        out.states.extend_from_slice(u0);
        next += 1;
    }
    let mut buf = vec![0.0; n];
    let res = {
        let out_ref = &mut out;
        let next_ref = &mut next;
        let mut on_step = |s: &AcceptedStep<'_>| {
            while *next_ref < saveat.len() && saveat[*next_ref] <= s.t_end {
                let ts = saveat[*next_ref];
                if ts == s.t_end {
                    out_ref.states.extend_from_slice(s.u_new);
                } else {
                    s.interpolate(ts, &mut buf);
                    out_ref.states.extend_from_slice(&buf);
                }
                out_ref.times.push(ts);
                *next_ref += 1;
            }
        };
        integrate(sys, theta, u0, t0, t1, opts, &mut on_step)
    };
    match res {
        Ok(stats) => {
            out.stats = stats;
            debug_assert_eq!(out.times.len(), saveat.len());
            Ok(out)
        }
        Err(fail) => Err(to_error(fail, out)),
    }
}

/// Every accepted step of a Tsit5 solve, queryable at any time in the span.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub dim: usize,
    pub t0: f64,
    pub t1: f64,
    /// Step start times; step `i` covers `[starts[i], starts[i] + dts[i]]`.
    pub starts: Vec<f64>,
    pub dts: Vec<f64>,
    /// Start state of each step (`dim` values per step).
    us: Vec<f64>,
    /// Stages of each step (`7 * dim` values per step).
    ks: Vec<f64>,
    u_final: Vec<f64>,
    pub stats: SolveStats,
}

impl DenseSolution {
    pub fn solve<S: OdeSystem + ?Sized>(
        sys: &S,
        theta: &[f64],
        u0: &[f64],
        t0: f64,
        t1: f64,
        opts: &SolverOptions,
    ) -> Result<Self, SolveError> {
        let n = sys.dim();
        if u0.len() != n {
            return Err(SolveError::InvalidInput(format!(
                "initial state has length {}, system dimension is {n}",
                u0.len()
            )));
        }
        let mut sol = DenseSolution {
            dim: n,
            t0,
            t1,
            starts: Vec::new(),
            dts: Vec::new(),
            us: Vec::new(),
            ks: Vec::new(),
            u_final: u0.to_vec(),
            stats: SolveStats::default(),
        };
        let res = {
            let s = &mut sol;
            let mut on_step = |st: &AcceptedStep<'_>| {
                s.starts.push(st.t);
                s.dts.push(st.dt);
                s.us.extend_from_slice(st.u);
                for ki in st.k.iter() {
                    s.ks.extend_from_slice(ki);
                }
                s.u_final.copy_from_slice(st.u_new);
            };
            integrate(sys, theta, u0, t0, t1, opts, &mut on_step)
        };
        match res {
            Ok(stats) => {
                sol.stats = stats;
                Ok(sol)
            }
            Err(fail) => {
                let partial = Trajectory {
                    times: sol.starts.clone(),
                    states: sol.us.clone(),
                    dim: n,
                    stats: SolveStats::default(),
                };
                Err(to_error(fail, partial))
            }
        }
    }

    pub fn num_steps(&self) -> usize {
        self.starts.len()
    }

    pub fn final_state(&self) -> &[f64] {
        &self.u_final
    }

    /// State at time `t`, clamped to the solved span.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let n = self.dim;
        if self.starts.is_empty() || t <= self.t0 {
            if self.starts.is_empty() {
                out.copy_from_slice(&self.u_final);
            } else {
                out.copy_from_slice(&self.us[..n]);
            }
            return;
        }
        if t >= self.t1 {
            out.copy_from_slice(&self.u_final);
            return;
        }
        let i = match self.starts.partition_point(|&s| s <= t) {
            0 => 0,
            p => p - 1,
        };
        let u = &self.us[i * n..(i + 1) * n];
        let kbase = &self.ks[i * 7 * n..(i + 1) * 7 * n];
        let w = tableau::dense_weights(((t - self.starts[i]) / self.dts[i]).clamp(0.0, 1.0));
        let h = self.dts[i];
        for j in 0..n {
            let mut acc = 0.0;
            for (s, ws) in w.iter().enumerate() {
                acc += ws * kbase[s * n + j];
            }
            out[j] = u[j] + h * acc;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// Values at a sorted list of times.
    pub fn sample(&self, times: &[f64]) -> Trajectory {
        let mut states = Vec::with_capacity(times.len() * self.dim);
        let mut buf = vec![0.0; self.dim];
        for &t in times {
            self.eval_into(t, &mut buf);
            states.extend_from_slice(&buf);
        }
        Trajectory {
            times: times.to_vec(),
            states,
            dim: self.dim,
            stats: self.stats,
        }
    }
}

/// Classical fixed-step RK4 from `t0` to `t1` using `round((t1 - t0) / dt)` equal steps;
/// every step is saved, including the initial state.
pub fn rk4_solve<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    u0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory, SolveError> {
    let n = sys.dim();
    if u0.len() != n {
        return Err(SolveError::InvalidInput("initial state length".into()));
    }
    if !(dt > 0.0) || !(t1 >= t0) {
        return Err(SolveError::InvalidInput(format!(
            "need dt > 0 and t1 >= t0 (dt = {dt}, span = [{t0}, {t1}])"
        )));
    }
    let steps = ((t1 - t0) / dt).round().max(if t1 > t0 { 1.0 } else { 0.0 }) as usize;
    let h = if steps > 0 { (t1 - t0) / steps as f64 } else { 0.0 };
    let mut out = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity((steps + 1) * n),
        dim: n,
        stats: SolveStats::default(),
    };
    out.times.push(t0);
    out.states.extend_from_slice(u0);
    let mut u = u0.to_vec();
    let mut ws = Rk4Work::new(n);
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        rk4_step(sys, theta, t, h, &mut u, &mut ws);
        out.stats.rhs_evals += 4;
        out.stats.accepted += 1;
        out.times.push(if i + 1 == steps { t1 } else { t + h });
        out.states.extend_from_slice(&u);
    }
    Ok(out)
}

/// Scratch space for [`rk4_step`].
pub struct Rk4Work {
    pub k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step in place; the stages are left in `ws.k`.
pub fn rk4_step<S: OdeSystem + ?Sized>(
    sys: &S,
    theta: &[f64],
    t: f64,
    h: f64,
    u: &mut [f64],
    ws: &mut Rk4Work,
) {
    let n = u.len();
    sys.rhs(t, u, theta, &mut ws.k[0]);
    for j in 0..n {
        ws.tmp[j] = u[j] + 0.5 * h * ws.k[0][j];
    }
    sys.rhs(t + 0.5 * h, &ws.tmp, theta, &mut ws.k[1]);
    for j in 0..n {
        ws.tmp[j] = u[j] + 0.5 * h * ws.k[1][j];
    }
    sys.rhs(t + 0.5 * h, &ws.tmp, theta, &mut ws.k[2]);
    for j in 0..n {
        ws.tmp[j] = u[j] + h * ws.k[2][j];
    }
    sys.rhs(t + h, &ws.tmp, theta, &mut ws.k[3]);
    for j in 0..n {
        u[j] += h / 6.0 * (ws.k[0][j] + 2.0 * ws.k[1][j] + 2.0 * ws.k[2][j] + ws.k[3][j]);
    }
}
