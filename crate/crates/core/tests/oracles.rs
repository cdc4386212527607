//! Independent reference computations checked against the library.

use kanode::kan::{rbf, swish, Layer, NetSpec, Network};
use kanode::odeint::{
    rk4_solve, tableau, tsit5_solve, AdjointSystem, FnSystem, OdeSystem, SolverOptions,
    Trajectory,
};
use kanode::problems::{
    discrete_mass, fisher_kpp_dataset_on, lv_dataset, restrict, schrodinger_dataset, schrodinger_grid,
    LotkaVolterra, SCHRODINGER_N,
};
use kanode::symbolic::{fit_global, CandidateLibrary, DEFAULT_SPARSITY_THRESHOLD};
use kanode::training::{discrete_gradient, AdamParams, AdamState, Observations};

fn oscillator() -> FnSystem<impl Fn(f64, &[f64], &[f64], &mut [f64])> {
    FnSystem::new(2, |_t, u: &[f64], _p: &[f64], du: &mut [f64]| {
        du[0] = u[1];
        du[1] = -u[0];
    })
}

/// Fixed-step explicit Runge-Kutta straight from the Butcher tableau.
fn tableau_solve<S: OdeSystem>(sys: &S, u0: &[f64], t1: f64, h: f64) -> Vec<f64> {
    let n = u0.len();
    let steps = (t1 / h).round() as usize;
    let mut u = u0.to_vec();
    for s in 0..steps {
        let t = s as f64 * h;
        let mut k = vec![vec![0.0; n]; 7];
        for i in 0..7 {
            let mut ui = u.clone();
            for (j, kj) in k.iter().enumerate().take(i) {
                for m in 0..n {
                    ui[m] += h * tableau::A[i][j] * kj[m];
                }
            }
            let mut ki = vec![0.0; n];
            sys.rhs(t + tableau::C[i] * h, &ui, &[], &mut ki);
            k[i] = ki;
        }
        for m in 0..n {
            u[m] += h * (0..7).map(|i| tableau::B[i] * k[i][m]).sum::<f64>();
        }
    }
    u
}

#[test]
fn tsit5_tableau_is_at_least_fourth_and_a_half_order() {
    let sys = oscillator();
    let err = |h: f64| {
        let u = tableau_solve(&sys, &[1.0, 0.0], 2.0, h);
        (u[0] - 2f64.cos()).abs().max((u[1] + 2f64.sin()).abs())
    };
    let order = (err(0.2) / err(0.1)).log2();
    assert!(order >= 4.5, "observed order {order}");
}

#[test]
fn tsit5_matches_fine_rk4_on_lotka_volterra() {
    let lv = LotkaVolterra::default();
    let u0 = [1.0, 1.0];
    let t1 = 14.0;
    let adaptive = tsit5_solve(&lv, &[], &u0, 0.0, &[t1], &SolverOptions::tol(1e-12, 1e-12)).unwrap();
    let fine = rk4_solve(&lv, &[], &u0, 0.0, t1, 1e-4).unwrap();
    let a = adaptive.state(0);
    let b = fine.state(fine.len() - 1);
    for k in 0..2 {
        assert!((a[k] - b[k]).abs() < 1e-6, "component {k}: {} vs {}", a[k], b[k]);
    }
}

#[test]
fn rk4_step_on_exponential_is_the_quartic_taylor_polynomial() {
    let sys = FnSystem::new(1, |_t, u: &[f64], _p: &[f64], du: &mut [f64]| du[0] = u[0]);
    let h = 0.1;
    let tr = rk4_solve(&sys, &[], &[1.0], 0.0, h, h).unwrap();
    let expected = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
    assert!((tr.state(tr.len() - 1)[0] - expected).abs() < 1e-15);
}

/// `du/dt = theta * u`.
struct Growth;

impl OdeSystem for Growth {
    fn dim(&self) -> usize {
        1
    }
    fn rhs(&self, _t: f64, u: &[f64], theta: &[f64], du: &mut [f64]) {
        du[0] = theta[0] * u[0];
    }
}

impl AdjointSystem for Growth {
    fn num_params(&self) -> usize {
        1
    }
    fn rhs_vjp(&self, _t: f64, u: &[f64], theta: &[f64], v: &[f64], ub: &mut [f64], tb: &mut [f64]) {
        ub[0] += theta[0] * v[0];
        tb[0] += u[0] * v[0];
    }
}

#[test]
fn single_rk4_step_gradient_matches_hand_derivation() {
    let (theta, h, u0, y): (f64, f64, f64, f64) = (0.7, 0.25, 1.3, 2.0);
    let z = theta * h;
    let p = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0 + z.powi(4) / 24.0;
    let dp = 1.0 + z + z * z / 2.0 + z.powi(3) / 6.0;
    let u1 = u0 * p;
    let data = Trajectory {
        times: vec![h],
        states: vec![y],
        dim: 1,
        stats: Default::default(),
    };
    let obs = Observations {
        t0: 0.0,
        u0: &[u0],
        data: &data,
    };
    let lg = discrete_gradient(&Growth, &[theta], &obs, h).unwrap();
    assert!((lg.mse - (u1 - y).powi(2)).abs() < 1e-14);
    let grad = 2.0 * (u1 - y) * u0 * h * dp;
    assert!((lg.grad[0] - grad).abs() < 1e-13, "{} vs {grad}", lg.grad[0]);
}

#[test]
fn adam_minimizes_a_square() {
    let params = AdamParams {
        lr: 0.01,
        ..AdamParams::default()
    };
    let mut state = AdamState::new(1);
    let mut theta = [1.0];
    for _ in 0..200 {
        let g = [2.0 * theta[0]];
        state.step(&params, &mut theta, &g);
    }
    assert!(theta[0].abs() < 0.05, "theta = {}", theta[0]);
}

/// Forward pass written as explicit loops over the public weights.
fn naive_eval(net: &Network, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    let count = net.layers().len();
    for (li, layer) in net.layers().iter().enumerate() {
        x = match layer {
            Layer::Kan(l) => {
                let mut y = vec![0.0; l.out_dim];
                for (o, yo) in y.iter_mut().enumerate() {
                    for (i, &xi) in x.iter().enumerate() {
                        let xe = if net.normalizes() { xi.tanh() } else { xi };
                        for g in 0..l.grid_size {
                            *yo += l.w_rbf[(o * l.in_dim + i) * l.grid_size + g]
                                * rbf(xe - l.centers[g], l.h);
                        }
                        *yo += l.w_base[o * l.in_dim + i] * swish(xi);
                    }
                }
                y
            }
            Layer::Dense(l) => {
                let mut y = l.bias.clone();
                for (o, yo) in y.iter_mut().enumerate() {
                    for (i, &xi) in x.iter().enumerate() {
                        *yo += l.weight[o * l.in_dim + i] * xi;
                    }
                    if li + 1 < count {
                        *yo = yo.tanh();
                    }
                }
                y
            }
        };
    }
    x
}

#[test]
fn network_matches_naive_loops() {
    let x = [0.3, -1.2, 2.5];
    for spec in [
        NetSpec::kan(&[[3, 4, 5], [4, 2, 6]]),
        NetSpec::Kan {
            layers: vec![[3, 2, 3]],
            normalization: kanode::kan::Normalization::None,
        },
        NetSpec::mlp(&[3, 7, 5, 2]),
    ] {
        let net = Network::init(&spec, 11).unwrap();
        let fast = net.eval(&x).unwrap();
        let slow = naive_eval(&net, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-13, "{spec:?}: {a} vs {b}");
        }
    }
}

#[test]
fn network_vjp_matches_central_differences() {
    let x = [0.4, -0.9];
    let y_bar = [0.7, -1.3];
    for spec in [NetSpec::kan(&[[2, 3, 4], [3, 2, 4]]), NetSpec::mlp(&[2, 6, 2])] {
        let net = Network::init(&spec, 5).unwrap();
        let (x_bar, theta_bar) = net.vjp(&x, &y_bar).unwrap();
        let theta = net.params();
        let dot = |th: &[f64], x: &[f64]| -> f64 {
            let y = net.eval_with(th, x).unwrap();
            y.iter().zip(&y_bar).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for k in 0..theta.len() {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[k] += eps;
            m[k] -= eps;
            let fd = (dot(&p, &x) - dot(&m, &x)) / (2.0 * eps);
            assert!((fd - theta_bar[k]).abs() < 1e-7, "theta[{k}]: {fd} vs {}", theta_bar[k]);
        }
        for k in 0..2 {
            let mut p = x;
            let mut m = x;
            p[k] += eps;
            m[k] -= eps;
            let fd = (dot(&theta, &p) - dot(&theta, &m)) / (2.0 * eps);
            assert!((fd - x_bar[k]).abs() < 1e-7, "x[{k}]: {fd} vs {}", x_bar[k]);
        }
    }
}

#[test]
fn fisher_kpp_reference_is_grid_converged() {
    let end = |n: usize| {
        let ds = fisher_kpp_dataset_on(n).unwrap();
        let last = ds.truth.len() - 1;
        Trajectory {
            times: vec![ds.truth.times[last]],
            states: ds.truth.state(last).to_vec(),
            dim: ds.truth.dim,
            stats: Default::default(),
        }
    };
    let (coarse, mid, fine) = (end(25), end(50), end(100));
    let diff = |a: &Trajectory, b: &Trajectory| {
        let b = restrict(b, 2);
        a.states
            .iter()
            .zip(&b.states)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let e1 = diff(&coarse, &mid);
    let e2 = diff(&mid, &fine);
    assert!(e1 < 1e-5 && e2 < e1, "refinement differences {e1:e} then {e2:e}");
}

#[test]
fn schrodinger_reference_conserves_mass() {
    let ds = schrodinger_dataset().unwrap();
    let dx = schrodinger_grid(SCHRODINGER_N).unwrap().dx;
    let m0 = discrete_mass(&ds.u0, dx).unwrap();
    for k in 0..ds.truth.len() {
        let m = discrete_mass(ds.truth.state(k), dx).unwrap();
        assert!(((m - m0) / m0).abs() < 1e-3, "t = {}: {m} vs {m0}", ds.truth.times[k]);
    }
}

#[test]
fn regression_on_exact_lotka_volterra_samples_integrates_back() {
    let lv = LotkaVolterra::default();
    let ds = lv_dataset().unwrap();
    let inputs: Vec<Vec<f64>> = ds.train.rows().map(<[f64]>::to_vec).collect();
    let outputs: Vec<Vec<f64>> = inputs.iter().map(|u| lv.eval([u[0], u[1]]).to_vec()).collect();
    let fit = fit_global(
        &inputs,
        &outputs,
        &CandidateLibrary::quadratic_2d(),
        DEFAULT_SPARSITY_THRESHOLD,
    )
    .unwrap();
    let pred = tsit5_solve(&fit, &[], &ds.u0, ds.t0, &ds.truth.times, &SolverOptions::default())
        .unwrap();
    let worst = pred
        .states
        .iter()
        .zip(&ds.truth.states)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.15, "max error {worst}");
}
