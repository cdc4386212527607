//! Benchmark dynamical systems, their method-of-lines discretizations and the
//! ground-truth datasets used for training.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kan::{KanError, Network, ScalarEdge};
use crate::odeint::{tsit5_solve, AdjointSystem, OdeSystem, SolveError, SolverOptions, Trajectory};

/// Tolerance used for every ground-truth solve.
pub const TRUTH_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("grid needs at least 3 points, got {0}")]
    GridTooSmall(usize),
    #[error("packed complex state must have even length, got {0}")]
    OddLength(usize),
    #[error("unknown problem id `{0}`")]
    UnknownProblem(String),
    #[error("network: {0}")]
    Network(#[from] KanError),
    #[error("ground-truth solve failed: {0}")]
    Solve(#[from] SolveError),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Boundary {
    /// `x1` is identified with `x0`; the grid stores `n` distinct nodes.
    Periodic,
    /// Node-centered grid including both endpoints, held at the given values.
    Dirichlet(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x0: f64,
    pub x1: f64,
    pub n: usize,
    pub dx: f64,
    pub bc: Boundary,
}

impl Grid1D {
    pub fn periodic(x0: f64, x1: f64, n: usize) -> Result<Self> {
        if n < 3 {
            return Err(ProblemError::GridTooSmall(n));
        }
        Ok(Self {
            x0,
            x1,
            n,
            dx: (x1 - x0) / n as f64,
            bc: Boundary::Periodic,
        })
    }

    pub fn dirichlet(x0: f64, x1: f64, n: usize, left: f64, right: f64) -> Result<Self> {
        if n < 3 {
            return Err(ProblemError::GridTooSmall(n));
        }
        Ok(Self {
            x0,
            x1,
            n,
            dx: (x1 - x0) / (n - 1) as f64,
            bc: Boundary::Dirichlet(left, right),
        })
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x0 + i as f64 * self.dx).collect()
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.n < 3 {
            return Err(ProblemError::GridTooSmall(self.n));
        }
        if len != self.n {
            return Err(ProblemError::DimensionMismatch {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }

    fn is_periodic(&self) -> bool {
        matches!(self.bc, Boundary::Periodic)
    }
}

/// Second-order central Laplacian. Dirichlet boundary rows are zero.
pub fn laplacian_1d(u: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    grid.check(u.len())?;
    let mut out = vec![0.0; u.len()];
    laplacian_into(u, grid, &mut out);
    Ok(out)
}

/// Unchecked variant writing into `out`.
pub fn laplacian_into(u: &[f64], grid: &Grid1D, out: &mut [f64]) {
    let n = u.len();
    let inv = 1.0 / (grid.dx * grid.dx);
    for i in 1..n - 1 {
        out[i] = (u[i - 1] - 2.0 * u[i] + u[i + 1]) * inv;
    }
    if grid.is_periodic() {
        out[0] = (u[n - 1] - 2.0 * u[0] + u[1]) * inv;
        out[n - 1] = (u[n - 2] - 2.0 * u[n - 1] + u[0]) * inv;
    } else {
        out[0] = 0.0;
        out[n - 1] = 0.0;
    }
}

/// Accumulates `scale * L^T v` into `out`, with `L` the operator of [`laplacian_into`].
pub fn laplacian_transpose_acc(v: &[f64], grid: &Grid1D, scale: f64, out: &mut [f64]) {
    let n = v.len();
    let c = scale / (grid.dx * grid.dx);
    let rows: Box<dyn Iterator<Item = usize>> = if grid.is_periodic() {
        Box::new(0..n)
    } else {
        Box::new(1..n - 1)
    };
    for i in rows {
        let w = c * v[i];
        if w == 0.0 {
            continue;
        }
        let l = if i == 0 { n - 1 } else { i - 1 };
        let r = if i == n - 1 { 0 } else { i + 1 };
        out[l] += w;
        out[i] -= 2.0 * w;
        out[r] += w;
    }
}

/// Central first derivative. Dirichlet boundary rows are zero.
pub fn gradient_1d(u: &[f64], grid: &Grid1D) -> Result<Vec<f64>> {
    grid.check(u.len())?;
    let n = u.len();
    let inv = 0.5 / grid.dx;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (u[i + 1] - u[i - 1]) * inv;
    }
    if grid.is_periodic() {
        out[0] = (u[1] - u[n - 1]) * inv;
        out[n - 1] = (u[0] - u[n - 2]) * inv;
    }
    Ok(out)
}

/// Packing of a complex field into `[Re(u_0..u_{n-1}), Im(u_0..u_{n-1})]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexState {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexState {
    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.re.clone();
        v.extend_from_slice(&self.im);
        v
    }

    pub fn unpack(packed: &[f64]) -> Result<Self> {
        if !packed.len().is_multiple_of(2) {
            return Err(ProblemError::OddLength(packed.len()));
        }
        let (re, im) = packed.split_at(packed.len() / 2);
        Ok(Self {
            re: re.to_vec(),
            im: im.to_vec(),
        })
    }

    pub fn modulus(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect()
    }
}

/// `|u|` of a packed complex state.
pub fn packed_modulus(packed: &[f64]) -> Result<Vec<f64>> {
    Ok(ComplexState::unpack(packed)?.modulus())
}

/// Discrete mass `sum_i |u_i|^2 dx` of a packed complex state.
pub fn discrete_mass(packed: &[f64], dx: f64) -> Result<f64> {
    let s = ComplexState::unpack(packed)?;
    Ok(s.re.iter().zip(&s.im).map(|(a, b)| a * a + b * b).sum::<f64>() * dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LotkaVolterra {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LotkaVolterra {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 1.0,
            gamma: 1.0,
            delta: 3.0,
        }
    }
}

impl LotkaVolterra {
    pub fn eval(&self, u: [f64; 2]) -> [f64; 2] {
        let [x, y] = u;
        [
            self.alpha * x - self.beta * x * y,
            self.gamma * x * y - self.delta * y,
        ]
    }
}

impl OdeSystem for LotkaVolterra {
    fn dim(&self) -> usize {
        2
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        let d = self.eval([u[0], u[1]]);
        du.copy_from_slice(&d);
    }
}

/// `u_t = D u_xx + r u (1 - u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherKpp {
    pub grid: Grid1D,
    pub diffusion: f64,
    pub rate: f64,
}

impl OdeSystem for FisherKpp {
    fn dim(&self) -> usize {
        self.grid.n
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        laplacian_into(u, &self.grid, du);
        for (d, &v) in du.iter_mut().zip(u) {
            *d = self.diffusion * *d + self.rate * v * (1.0 - v);
        }
    }
}

/// Viscous Burgers `u_t + u u_x = nu u_xx` with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Burgers {
    pub grid: Grid1D,
    pub nu: f64,
}

impl OdeSystem for Burgers {
    fn dim(&self) -> usize {
        self.grid.n
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        let n = u.len();
        laplacian_into(u, &self.grid, du);
        let inv = 0.5 / self.grid.dx;
        for i in 1..n - 1 {
            du[i] = self.nu * du[i] - u[i] * (u[i + 1] - u[i - 1]) * inv;
        }
        if self.grid.is_periodic() {
            du[0] = self.nu * du[0] - u[0] * (u[1] - u[n - 1]) * inv;
            du[n - 1] = self.nu * du[n - 1] - u[n - 1] * (u[0] - u[n - 2]) * inv;
        } else {
            du[0] = 0.0;
            du[n - 1] = 0.0;
        }
    }
}

/// Focusing nonlinear Schrödinger `i u_t + u_xx / 2 + |u|^2 u = 0` on a packed state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schrodinger {
    pub grid: Grid1D,
}

impl OdeSystem for Schrodinger {
    fn dim(&self) -> usize {
        2 * self.grid.n
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        let n = self.grid.n;
        let (re, im) = u.split_at(n);
        let (dre, dim) = du.split_at_mut(n);
        laplacian_into(im, &self.grid, dre);
        laplacian_into(re, &self.grid, dim);
        for i in 0..n {
            let m2 = re[i] * re[i] + im[i] * im[i];
            dre[i] = -0.5 * dre[i] - m2 * im[i];
            dim[i] = 0.5 * dim[i] + m2 * re[i];
        }
    }
}

/// `u_t = eps u_xx + a u - a u^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllenCahn {
    pub grid: Grid1D,
    pub diffusion: f64,
    pub coeff: f64,
}

impl AllenCahn {
    pub fn standard(grid: Grid1D) -> Self {
        Self {
            grid,
            diffusion: 1e-4,
            coeff: 5.0,
        }
    }
}

impl OdeSystem for AllenCahn {
    fn dim(&self) -> usize {
        self.grid.n
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        laplacian_into(u, &self.grid, du);
        for (d, &v) in du.iter_mut().zip(u) {
            *d = self.diffusion * *d + self.coeff * (v - v * v * v);
        }
    }
}

/// `du/dt = net(u)`; the parameters are the network's flat parameters.
#[derive(Debug, Clone)]
pub struct NetworkSystem {
    pub net: Network,
}

impl NetworkSystem {
    pub fn new(net: Network) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(ProblemError::DimensionMismatch {
                expected: net.input_dim(),
                got: net.output_dim(),
            });
        }
        Ok(Self { net })
    }
}

impl OdeSystem for NetworkSystem {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }
    fn rhs(&self, _t: f64, u: &[f64], theta: &[f64], du: &mut [f64]) {
        let y = self.net.eval_with(theta, u).expect("dimensions checked at construction");
        du.copy_from_slice(&y);
    }
}

impl AdjointSystem for NetworkSystem {
    fn num_params(&self) -> usize {
        self.net.param_count()
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
        self.net
            .vjp_with(theta, u, v, u_bar, theta_bar)
            .expect("dimensions checked at construction");
    }
}

/// How the network enters a hybrid right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Application {
    /// One scalar network `[1, .., 1]` applied independently at every node.
    Pointwise,
    /// One network on the full state.
    Global,
}

/// Known diffusion plus a learned term: `du/dt = D u_xx + net(u)`.
#[derive(Debug, Clone)]
pub struct HybridSystem {
    pub grid: Grid1D,
    pub diffusion: f64,
    pub net: Network,
    pub application: Application,
    edge: Option<ScalarEdge>,
}

impl HybridSystem {
    pub fn new(grid: Grid1D, diffusion: f64, net: Network, application: Application) -> Result<Self> {
        let (need_in, need_out) = match application {
            Application::Pointwise => (1, 1),
            Application::Global => (grid.n, grid.n),
        };
        if net.input_dim() != need_in {
            return Err(ProblemError::DimensionMismatch {
                expected: need_in,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != need_out {
            return Err(ProblemError::DimensionMismatch {
                expected: need_out,
                got: net.output_dim(),
            });
        }
        let edge = match application {
            Application::Pointwise => net.scalar_edge(),
            Application::Global => None,
        };
        Ok(Self {
            grid,
            diffusion,
            net,
            application,
            edge,
        })
    }

    fn zero_boundary(&self, v: &mut [f64]) {
        if !self.grid.is_periodic() {
            let n = v.len();
            v[0] = 0.0;
            v[n - 1] = 0.0;
        }
    }
}

impl OdeSystem for HybridSystem {
    fn dim(&self) -> usize {
        self.grid.n
    }
    fn rhs(&self, _t: f64, u: &[f64], theta: &[f64], du: &mut [f64]) {
        laplacian_into(u, &self.grid, du);
        du.iter_mut().for_each(|d| *d *= self.diffusion);
        match self.application {
            Application::Pointwise => match &self.edge {
                Some(edge) => {
                    for (d, &v) in du.iter_mut().zip(u) {
                        *d += edge.eval(theta, v);
                    }
                }
                None => {
                    for (d, &v) in du.iter_mut().zip(u) {
                        *d += self.net.eval_with(theta, &[v]).expect("scalar network")[0];
                    }
                }
            },
            Application::Global => {
                let y = self.net.eval_with(theta, u).expect("dimensions checked");
                for (d, yi) in du.iter_mut().zip(y) {
                    *d += yi;
                }
            }
        }
        self.zero_boundary(du);
    }
}

impl AdjointSystem for HybridSystem {
    fn num_params(&self) -> usize {
        self.net.param_count()
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
        let mut w = v.to_vec();
        self.zero_boundary(&mut w);
        laplacian_transpose_acc(&w, &self.grid, self.diffusion, u_bar);
        match self.application {
            Application::Pointwise => {
                for i in 0..u.len() {
                    if w[i] == 0.0 {
                        continue;
                    }
                    if let Some(edge) = &self.edge {
                        u_bar[i] += edge.vjp(theta, u[i], w[i], theta_bar);
                        continue;
                    }
                    self.net
                        .vjp_with(theta, &u[i..=i], &w[i..=i], &mut u_bar[i..=i], theta_bar)
                        .expect("scalar network");
                }
            }
            Application::Global => {
                self.net
                    .vjp_with(theta, u, &w, u_bar, theta_bar)
                    .expect("dimensions checked");
            }
        }
    }
}

/// Ground truth and its train/test split for one benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub t0: f64,
    pub u0: Vec<f64>,
    pub train: Trajectory,
    pub test: Trajectory,
    /// Densely sampled reference field over the whole span.
    pub truth: Trajectory,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.u0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemId {
    LotkaVolterra,
    FisherKpp,
    Burgers,
    Schrodinger,
    AllenCahnHidden,
    AllenCahnSurrogate,
}

impl ProblemId {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "lv" | "lotka-volterra" => Self::LotkaVolterra,
            "fisher-kpp" => Self::FisherKpp,
            "burgers" => Self::Burgers,
            "schrodinger" => Self::Schrodinger,
            "allen-cahn-hidden" => Self::AllenCahnHidden,
            "allen-cahn-surrogate" => Self::AllenCahnSurrogate,
            other => return Err(ProblemError::UnknownProblem(other.into())),
        })
    }

    /// State dimension of the model trained on this problem.
    pub fn state_dim(&self) -> usize {
        match self {
            Self::LotkaVolterra => 2,
            Self::FisherKpp => FISHER_N,
            Self::Burgers => BURGERS_N,
            Self::Schrodinger => 2 * SCHRODINGER_N,
            Self::AllenCahnHidden => ALLEN_CAHN_N,
            Self::AllenCahnSurrogate => ALLEN_CAHN_N + 1,
        }
    }
}

pub fn make_dataset(id: ProblemId) -> Result<Dataset> {
    match id {
        ProblemId::LotkaVolterra => lv_dataset(),
        ProblemId::FisherKpp => fisher_kpp_dataset(),
        ProblemId::Burgers => burgers_dataset(),
        ProblemId::Schrodinger => schrodinger_dataset(),
        ProblemId::AllenCahnHidden => allen_cahn_hidden_dataset(),
        ProblemId::AllenCahnSurrogate => allen_cahn_surrogate_dataset(),
    }
}

fn truth_opts() -> SolverOptions {
    SolverOptions::tol(TRUTH_TOL, TRUTH_TOL)
}

/// Rows of `traj` whose time is in `times` (exact match), in order.
pub fn select_times(traj: &Trajectory, times: &[f64]) -> Trajectory {
    let mut out = Trajectory {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len() * traj.dim),
        dim: traj.dim,
        stats: traj.stats,
    };
    for &t in times {
        if let Some(i) = traj.times.iter().position(|&s| s == t) {
            out.times.push(t);
            out.states.extend_from_slice(traj.state(i));
        }
    }
    out
}

fn steps(count: usize, den: f64) -> Vec<f64> {
    (0..=count).map(|k| k as f64 / den).collect()
}

pub const LV_T_END: f64 = 14.0;
pub const LV_TRAIN_END: f64 = 3.5;

/// Lotka-Volterra from `[1, 1]` on `[0, 14]` sampled every 0.1; the first 3.5 time
/// units train, the rest test.
pub fn lv_dataset() -> Result<Dataset> {
    let sys = LotkaVolterra::default();
    let u0 = vec![1.0, 1.0];
    let times = steps(140, 10.0);
    let truth = tsit5_solve(&sys, &[], &u0, 0.0, &times, &truth_opts())?;
    let train_t: Vec<f64> = times.iter().copied().filter(|&t| t <= LV_TRAIN_END).collect();
    let test_t: Vec<f64> = times.iter().copied().filter(|&t| t > LV_TRAIN_END).collect();
    Ok(Dataset {
        t0: 0.0,
        train: select_times(&truth, &train_t),
        test: select_times(&truth, &test_t),
        truth,
        u0,
    })
}

pub const FISHER_N: usize = 25;
pub const FISHER_D: f64 = 0.2;
pub const FISHER_R: f64 = 1.0;

pub fn fisher_kpp_grid(n: usize) -> Result<Grid1D> {
    Grid1D::periodic(0.0, 1.0, n)
}

pub fn fisher_kpp_initial(grid: &Grid1D) -> Vec<f64> {
    grid.points()
        .iter()
        .map(|&x| 0.5 * (((x - 0.4) / 0.02).tanh() - ((x - 0.6) / 0.02).tanh()))
        .collect()
}

/// Fisher-KPP field on `[0, 5]`: training snapshots every 0.5, test every 0.1.
pub fn fisher_kpp_dataset() -> Result<Dataset> {
    fisher_kpp_dataset_on(FISHER_N)
}

pub fn fisher_kpp_dataset_on(n: usize) -> Result<Dataset> {
    let grid = fisher_kpp_grid(n)?;
    let sys = FisherKpp {
        grid,
        diffusion: FISHER_D,
        rate: FISHER_R,
    };
    let u0 = fisher_kpp_initial(&grid);
    let times = steps(50, 10.0);
    let truth = tsit5_solve(&sys, &[], &u0, 0.0, &times, &truth_opts())?;
    let train_t = steps(10, 2.0);
    Ok(Dataset {
        t0: 0.0,
        train: select_times(&truth, &train_t),
        test: select_times(&truth, &times),
        truth,
        u0,
    })
}

pub const BURGERS_N: usize = 41;

pub fn burgers_nu() -> f64 {
    0.01 / PI
}

pub fn burgers_grid(n: usize) -> Result<Grid1D> {
    Grid1D::dirichlet(-1.0, 1.0, n, 0.0, 0.0)
}

pub fn burgers_initial(grid: &Grid1D) -> Vec<f64> {
    let mut u: Vec<f64> = grid.points().iter().map(|&x| -(PI * x).sin()).collect();
    let n = u.len();
    u[0] = 0.0;
    u[n - 1] = 0.0;
    u
}

pub const BURGERS_TRAIN: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const BURGERS_TEST: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
/// The reference field is solved on a grid this many times finer and restricted to the
/// data grid; central differences at the data spacing are unstable once the front
/// steepens (cell Reynolds number about 16).
pub const BURGERS_REFINE: usize = 10;

/// Burgers on `[-1, 1]` over `[0, 1]`: five training snapshots and five interleaved
/// test snapshots; the truth field is sampled every 0.01.
pub fn burgers_dataset() -> Result<Dataset> {
    burgers_dataset_on(BURGERS_N)
}

pub fn burgers_dataset_on(n: usize) -> Result<Dataset> {
    let grid = burgers_grid(n)?;
    let fine = burgers_grid((n - 1) * BURGERS_REFINE + 1)?;
    let sys = Burgers {
        grid: fine,
        nu: burgers_nu(),
    };
    let times = steps(100, 100.0);
    let fine_truth = tsit5_solve(&sys, &[], &burgers_initial(&fine), 0.0, &times, &truth_opts())?;
    let truth = restrict(&fine_truth, BURGERS_REFINE);
    Ok(Dataset {
        t0: 0.0,
        train: select_times(&truth, &BURGERS_TRAIN),
        test: select_times(&truth, &BURGERS_TEST),
        truth,
        u0: burgers_initial(&grid),
    })
}

/// Keeps every `stride`-th node of each state.
pub fn restrict(traj: &Trajectory, stride: usize) -> Trajectory {
    let states: Vec<f64> = traj
        .rows()
        .flat_map(|r| r.iter().step_by(stride).copied().collect::<Vec<_>>())
        .collect();
    Trajectory {
        times: traj.times.clone(),
        dim: traj.dim.div_ceil(stride),
        states,
        stats: traj.stats,
    }
}

pub const SCHRODINGER_N: usize = 201;
pub const SCHRODINGER_TRAIN: [f64; 8] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5];

pub fn schrodinger_grid(n: usize) -> Result<Grid1D> {
    Grid1D::periodic(-5.0, 5.0, n)
}

/// `u0 = sech(x)` packed as `[Re; Im]`.
pub fn schrodinger_initial(grid: &Grid1D) -> Vec<f64> {
    let re: Vec<f64> = grid.points().iter().map(|&x| 1.0 / x.cosh()).collect();
    ComplexState {
        im: vec![0.0; re.len()],
        re,
    }
    .pack()
}

/// Schrödinger on `[-5, 5)` over `[0, pi/2]`: eight training snapshots; the truth and
/// test fields are sampled at 51 equally spaced times.
pub fn schrodinger_dataset() -> Result<Dataset> {
    schrodinger_dataset_on(SCHRODINGER_N)
}

pub fn schrodinger_dataset_on(n: usize) -> Result<Dataset> {
    let grid = schrodinger_grid(n)?;
    let sys = Schrodinger { grid };
    let u0 = schrodinger_initial(&grid);
    let t_end = PI / 2.0;
    let mut times: Vec<f64> = (0..=50).map(|k| k as f64 * t_end / 50.0).collect();
    times[50] = t_end;
    let truth = tsit5_solve(&sys, &[], &u0, 0.0, &times, &truth_opts())?;
    let train = tsit5_solve(&sys, &[], &u0, 0.0, &SCHRODINGER_TRAIN, &truth_opts())?;
    Ok(Dataset {
        t0: 0.0,
        train,
        test: truth.clone(),
        truth,
        u0,
    })
}

pub const ALLEN_CAHN_N: usize = 40;
pub const ALLEN_CAHN_TRAIN: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

pub fn allen_cahn_grid(n: usize) -> Result<Grid1D> {
    Grid1D::periodic(-1.0, 1.0, n)
}

pub fn allen_cahn_initial(grid: &Grid1D) -> Vec<f64> {
    grid.points()
        .iter()
        .map(|&x| x * x * (PI * x).cos())
        .collect()
}

fn allen_cahn_truth(n: usize) -> Result<(Vec<f64>, Trajectory)> {
    let grid = allen_cahn_grid(n)?;
    let sys = AllenCahn::standard(grid);
    let u0 = allen_cahn_initial(&grid);
    let truth = tsit5_solve(&sys, &[], &u0, 0.0, &steps(100, 100.0), &truth_opts())?;
    Ok((u0, truth))
}

/// Allen-Cahn on the periodic 40-node grid over `[0, 1]`; the full field every 0.1
/// trains the hidden source term, the field every 0.01 is the test set.
pub fn allen_cahn_hidden_dataset() -> Result<Dataset> {
    allen_cahn_hidden_dataset_on(ALLEN_CAHN_N)
}

pub fn allen_cahn_hidden_dataset_on(n: usize) -> Result<Dataset> {
    let (u0, truth) = allen_cahn_truth(n)?;
    let train_t = steps(10, 10.0);
    Ok(Dataset {
        t0: 0.0,
        train: select_times(&truth, &train_t),
        test: truth.clone(),
        truth,
        u0,
    })
}

/// Appends the periodic image of the first node, giving the node-inclusive state on
/// `[-1, 1]`.
pub fn close_periodic(traj: &Trajectory) -> Trajectory {
    let dim = traj.dim + 1;
    let mut states = Vec::with_capacity(traj.len() * dim);
    for row in traj.rows() {
        states.extend_from_slice(row);
        states.push(row[0]);
    }
    Trajectory {
        times: traj.times.clone(),
        states,
        dim,
        stats: traj.stats,
    }
}

/// Allen-Cahn surrogate data: five snapshots train; every 0.05 up to 1 tests. States
/// include both endpoints of `[-1, 1]` (41 values).
pub fn allen_cahn_surrogate_dataset() -> Result<Dataset> {
    let (mut u0, truth) = allen_cahn_truth(ALLEN_CAHN_N)?;
    u0.push(u0[0]);
    let truth = close_periodic(&truth);
    let test_t: Vec<f64> = (1..=20).map(|k| (5 * k) as f64 / 100.0).collect();
    Ok(Dataset {
        t0: 0.0,
        train: select_times(&truth, &ALLEN_CAHN_TRAIN),
        test: select_times(&truth, &test_t),
        truth,
        u0,
    })
}

/// Linear interpolation of periodic samples `values` on `from` at the nodes of `to`.
pub fn periodic_interp(values: &[f64], from: &Grid1D, to: &Grid1D) -> Vec<f64> {
    let n = values.len();
    let len = from.x1 - from.x0;
    to.points()
        .iter()
        .map(|&x| {
            let s = ((x - from.x0) / len).rem_euclid(1.0) * n as f64;
            let i = (s.floor() as usize).min(n - 1);
            let f = s - i as f64;
            values[i] * (1.0 - f) + values[(i + 1) % n] * f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::{NetSpec, Network};

    #[test]
    fn lv_rhs_values() {
        let lv = LotkaVolterra::default();
        assert_eq!(lv.eval([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(lv.eval([3.0, 1.5]), [0.0, 0.0]);
        assert_eq!(lv.eval([1.0, 1.0]), [0.5, -2.0]);
    }

    #[test]
    fn laplacian_properties() {
        let g = Grid1D::periodic(0.0, 1.0, 50).unwrap();
        let c = laplacian_1d(&[3.0; 50], &g).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
        let u: Vec<f64> = g.points().iter().map(|x| (2.0 * PI * x).sin()).collect();
        let l = laplacian_1d(&u, &g).unwrap();
        for (li, ui) in l.iter().zip(&u) {
            let exact = -4.0 * PI * PI * ui;
            assert!((li - exact).abs() <= 0.01 * 4.0 * PI * PI);
        }
        let d = Grid1D::dirichlet(0.0, 1.0, 21, 0.0, 1.0).unwrap();
        let q: Vec<f64> = d.points().iter().map(|x| x * x).collect();
        let lq = laplacian_1d(&q, &d).unwrap();
        for v in &lq[1..20] {
            assert!((v - 2.0).abs() < 1e-9);
        }
        assert_eq!((lq[0], lq[20]), (0.0, 0.0));
        assert_eq!(Grid1D::periodic(0.0, 1.0, 2), Err(ProblemError::GridTooSmall(2)));
        assert!(laplacian_1d(&[1.0; 4], &g).is_err());
    }

    #[test]
    fn laplacian_transpose_is_adjoint() {
        for g in [
            Grid1D::periodic(0.0, 2.0, 7).unwrap(),
            Grid1D::dirichlet(0.0, 2.0, 7, 0.0, 0.0).unwrap(),
        ] {
            let u: Vec<f64> = (0..7).map(|i| (i as f64 * 0.7).sin()).collect();
            let v: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).cos()).collect();
            let lu = laplacian_1d(&u, &g).unwrap();
            let mut ltv = vec![0.0; 7];
            laplacian_transpose_acc(&v, &g, 1.0, &mut ltv);
            let a: f64 = lu.iter().zip(&v).map(|(x, y)| x * y).sum();
            let b: f64 = ltv.iter().zip(&u).map(|(x, y)| x * y).sum();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pointwise_source_values() {
        let g = allen_cahn_grid(40).unwrap();
        let ac = AllenCahn::standard(g);
        let mut du = vec![0.0; 40];
        for (val, expect) in [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.5, 1.875)] {
            ac.rhs(0.0, &[val; 40], &[], &mut du);
            assert!(du.iter().all(|d| (d - expect).abs() < 1e-12));
        }
        let fk = FisherKpp {
            grid: fisher_kpp_grid(25).unwrap(),
            diffusion: 0.2,
            rate: 1.0,
        };
        let mut du = vec![0.0; 25];
        fk.rhs(0.0, &[1.0; 25], &[], &mut du);
        assert!(du.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn burgers_symmetry() {
        let g = burgers_grid(41).unwrap();
        let b = Burgers { grid: g, nu: burgers_nu() };
        let u = burgers_initial(&g);
        let mut du = vec![0.0; 41];
        b.rhs(0.0, &u, &[], &mut du);
        for i in 0..41 {
            assert!((du[i] + du[40 - i]).abs() < 1e-12);
        }
        assert_eq!((du[0], du[40]), (0.0, 0.0));
    }

    #[test]
    fn complex_packing() {
        let c = ComplexState {
            re: vec![3.0, 0.0],
            im: vec![4.0, 1.0],
        };
        let p = c.pack();
        assert_eq!(p, vec![3.0, 0.0, 4.0, 1.0]);
        assert_eq!(ComplexState::unpack(&p).unwrap(), c);
        assert_eq!(c.modulus(), vec![5.0, 1.0]);
        assert_eq!(ComplexState::unpack(&[1.0; 3]), Err(ProblemError::OddLength(3)));
        let s = Schrodinger {
            grid: schrodinger_grid(11).unwrap(),
        };
        let mut du = vec![1.0; 22];
        s.rhs(0.0, &[0.0; 22], &[], &mut du);
        assert!(du.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hybrid_vjp_matches_finite_differences() {
        let grid = Grid1D::periodic(0.0, 1.0, 6).unwrap();
        let net = Network::init(&NetSpec::kan(&[[1, 1, 4]]), 3).unwrap();
        let sys = HybridSystem::new(grid, 0.2, net.clone(), Application::Pointwise).unwrap();
        let theta = net.params();
        let u: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let v: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect();
        let mut ub = vec![0.0; 6];
        let mut tb = vec![0.0; theta.len()];
        sys.rhs_vjp(0.0, &u, &theta, &v, &mut ub, &mut tb);
        let f = |u: &[f64], th: &[f64]| {
            let mut du = vec![0.0; 6];
            sys.rhs(0.0, u, th, &mut du);
            du.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-6;
        for j in 0..6 {
            let mut up = u.clone();
            up[j] += eps;
            let mut dn = u.clone();
            dn[j] -= eps;
            let fd = (f(&up, &theta) - f(&dn, &theta)) / (2.0 * eps);
            assert!((fd - ub[j]).abs() < 1e-6);
        }
        for k in 0..theta.len() {
            let mut up = theta.clone();
            up[k] += eps;
            let mut dn = theta.clone();
            dn[k] -= eps;
            let fd = (f(&u, &up) - f(&u, &dn)) / (2.0 * eps);
            assert!((fd - tb[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_network_hybrid_is_pure_diffusion() {
        let grid = fisher_kpp_grid(25).unwrap();
        let net = Network::zeros(&NetSpec::kan(&[[1, 1, 10]])).unwrap();
        let hyb = HybridSystem::new(grid, 0.2, net.clone(), Application::Pointwise).unwrap();
        let diff = FisherKpp {
            grid,
            diffusion: 0.2,
            rate: 0.0,
        };
        let u0 = fisher_kpp_initial(&grid);
        let o = SolverOptions::tol(1e-8, 1e-8);
        let a = tsit5_solve(&hyb, &net.params(), &u0, 0.0, &[0.5, 1.0], &o).unwrap();
        let b = tsit5_solve(&diff, &[], &u0, 0.0, &[0.5, 1.0], &o).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn dataset_shapes() {
        let lv = lv_dataset().unwrap();
        assert_eq!(lv.train.len(), 36);
        assert_eq!(lv.train.state(0), &[1.0, 1.0]);
        assert_eq!(lv.train.times[35], 3.5);
        assert_eq!(lv.test.len(), 105);
        assert_eq!(lv.test.times[0], 3.6);
        let fk = fisher_kpp_dataset().unwrap();
        assert_eq!(fk.train.len(), 11);
        assert_eq!(fk.train.dim, 25);
        let b = burgers_dataset().unwrap();
        assert_eq!(b.train.times, BURGERS_TRAIN.to_vec());
        assert_eq!(b.test.times, BURGERS_TEST.to_vec());
        assert_eq!(b.train.dim, 41);
        let ac = allen_cahn_surrogate_dataset().unwrap();
        assert_eq!(ac.train.len(), 5);
        assert_eq!(ac.dim(), 41);
        for row in ac.truth.rows() {
            assert_eq!(row[0], row[40]);
        }
    }

    #[test]
    fn problem_ids() {
        assert_eq!(ProblemId::parse("lv").unwrap(), ProblemId::LotkaVolterra);
        assert_eq!(ProblemId::Burgers.state_dim(), 41);
        assert_eq!(ProblemId::Schrodinger.state_dim(), 402);
        assert!(ProblemId::parse("heat").is_err());
    }

    #[test]
    fn periodic_interp_is_exact_on_same_grid() {
        let g = schrodinger_grid(11).unwrap();
        let v: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let w = periodic_interp(&v, &g, &g);
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
