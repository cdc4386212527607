//! Experiment runners: per-experiment defaults, single training runs with file outputs,
//! the sparsify-prune-retrain pipeline, scaling studies and gradient-error landscapes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::io::{
    self, config_to_json, fmt_f64, ConfigErrors, IoError, RunManifest,
};
use crate::kan::{KanError, NetSpec, Network, NetworkKind, Normalization};
use crate::odeint::{tsit5_solve, AdjointSystem, SolveError, Trajectory};
use crate::problems::{
    self, allen_cahn_grid, fisher_kpp_grid, make_dataset, AllenCahn, Application, Dataset,
    HybridSystem, LotkaVolterra, NetworkSystem, ProblemError, ProblemId,
};
use crate::symbolic::{
    fit_global, fit_network, input_ranges, BasisGrammar, CandidateLibrary, EdgeFit, GlobalFit,
    SymbolicError, DEFAULT_SPARSITY_THRESHOLD,
};
use crate::training::{train, trajectory_mse, LossReport, TrainConfig, TrainData, TrainError, TrainResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Lv,
    LvSparse,
    LvScaling,
    FisherKpp,
    Burgers,
    Schrodinger,
    AllenCahnHidden,
    AllenCahnSurrogate,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 8] = [
        ExperimentId::Lv,
        ExperimentId::LvSparse,
        ExperimentId::LvScaling,
        ExperimentId::FisherKpp,
        ExperimentId::Burgers,
        ExperimentId::Schrodinger,
        ExperimentId::AllenCahnHidden,
        ExperimentId::AllenCahnSurrogate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Lv => "lv",
            ExperimentId::LvSparse => "lv-sparse",
            ExperimentId::LvScaling => "lv-scaling",
            ExperimentId::FisherKpp => "fisher-kpp",
            ExperimentId::Burgers => "burgers",
            ExperimentId::Schrodinger => "schrodinger",
            ExperimentId::AllenCahnHidden => "allen-cahn-hidden",
            ExperimentId::AllenCahnSurrogate => "allen-cahn-surrogate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.as_str() == s)
    }

    pub fn problem(self) -> ProblemId {
        match self {
            ExperimentId::Lv | ExperimentId::LvSparse | ExperimentId::LvScaling => {
                ProblemId::LotkaVolterra
            }
            ExperimentId::FisherKpp => ProblemId::FisherKpp,
            ExperimentId::Burgers => ProblemId::Burgers,
            ExperimentId::Schrodinger => ProblemId::Schrodinger,
            ExperimentId::AllenCahnHidden => ProblemId::AllenCahnHidden,
            ExperimentId::AllenCahnSurrogate => ProblemId::AllenCahnSurrogate,
        }
    }

    /// Whether the network is a pointwise source term inside a known diffusion model.
    pub fn is_hidden_physics(self) -> bool {
        matches!(
            self,
            ExperimentId::FisherKpp | ExperimentId::AllenCahnHidden
        )
    }

    /// Network `(input, output)` dimensions.
    pub fn net_dims(self) -> (usize, usize) {
        if self.is_hidden_physics() {
            (1, 1)
        } else {
            let n = self.problem().state_dim();
            (n, n)
        }
    }

    /// The source term a hidden-physics network should learn.
    pub fn reference_source(self, u: f64) -> Option<f64> {
        match self {
            ExperimentId::FisherKpp => Some(problems::FISHER_R * u * (1.0 - u)),
            ExperimentId::AllenCahnHidden => {
                let c = AllenCahn::standard(allen_cahn_grid(problems::ALLEN_CAHN_N).ok()?).coeff;
                Some(c * (u - u * u * u))
            }
            _ => None,
        }
    }
}

/// Bounding box and resolution of a gradient-error map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl Default for LandscapeGrid {
    fn default() -> Self {
        Self {
            x_range: (0.0, 6.0),
            y_range: (0.0, 4.0),
            nx: 61,
            ny: 41,
        }
    }
}

impl LandscapeGrid {
    pub fn xs(&self) -> Vec<f64> {
        crate::symbolic::linspace(self.x_range.0, self.x_range.1, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        crate::symbolic::linspace(self.y_range.0, self.y_range.1, self.ny)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicSettings {
    pub max_terms: usize,
    pub samples: usize,
}

impl Default for SymbolicSettings {
    fn default() -> Self {
        Self {
            max_terms: 3,
            samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    pub architecture: NetSpec,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Pruning threshold of the sparse pipeline.
    pub gamma_pr: f64,
    /// Epochs of the L1-regularized stage of the sparse pipeline.
    pub sparse_epochs: usize,
    /// L1-regularized epochs at a tenth of the learning rate after the sparse stage,
    /// so that weights of unused nodes settle below the ADAM step noise before pruning.
    pub polish_epochs: usize,
    /// Epochs of the post-pruning stage of the sparse pipeline.
    pub retrain_epochs: usize,
    /// Architectures of a scaling study.
    pub scaling: Vec<NetSpec>,
    pub landscape: LandscapeGrid,
    pub symbolic: SymbolicSettings,
}

/// `[d, width, grid], [width, d, grid]`.
pub fn two_layer_kan(d: usize, width: usize, grid: usize) -> NetSpec {
    NetSpec::kan(&[[d, width, grid], [width, d, grid]])
}

impl ExperimentConfig {
    pub fn defaults(id: ExperimentId) -> Self {
        let lv = two_layer_kan(2, 10, 5);
        let mut train = TrainConfig {
            epochs: 10_000,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut cfg = Self {
            id,
            architecture: lv.clone(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs").join(id.as_str()),
            seed: 1,
            gamma_pr: 0.0,
            sparse_epochs: 0,
            polish_epochs: 0,
            retrain_epochs: 0,
            scaling: Vec::new(),
            landscape: LandscapeGrid::default(),
            symbolic: SymbolicSettings::default(),
        };
        match id {
            ExperimentId::Lv => {}
            ExperimentId::LvSparse => {
                train.gamma_sp = 5e-4;
                cfg.gamma_pr = 1e-2;
                cfg.sparse_epochs = 120_000;
                cfg.polish_epochs = 3_000;
                cfg.retrain_epochs = 10_000;
            }
            ExperimentId::LvScaling => {
                cfg.scaling = vec![two_layer_kan(2, 4, 3), two_layer_kan(2, 4, 5), lv];
            }
            ExperimentId::FisherKpp => {
                cfg.architecture = NetSpec::kan(&[[1, 1, 10]]);
                train.epochs = 5_000;
                train.early_stop_loss = Some(1e-6);
            }
            ExperimentId::Burgers => {
                cfg.architecture = two_layer_kan(41, 10, 5);
                train.epochs = 20_000;
                train.snapshot_at = vec![10_000];
            }
            ExperimentId::Schrodinger => {
                cfg.architecture = two_layer_kan(402, 10, 10);
            }
            ExperimentId::AllenCahnHidden => {
                // States already span the [-1, 1] grid.
                cfg.architecture = NetSpec::Kan {
                    layers: vec![[1, 1, 10]],
                    normalization: Normalization::None,
                };
                train.epochs = 65_000;
                train.early_stop_loss = Some(1e-7);
            }
            ExperimentId::AllenCahnSurrogate => {
                cfg.architecture = two_layer_kan(41, 10, 10);
            }
        }
        cfg.train = train;
        cfg
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = dir.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("{0}")]
    Problem(#[from] ProblemError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("solve: {0}")]
    Solve(#[from] SolveError),
    #[error("network: {0}")]
    Network(#[from] KanError),
    #[error("symbolic: {0}")]
    Symbolic(#[from] SymbolicError),
    #[error("{0}")]
    Io(#[from] IoError),
    #[error("{0}")]
    Unsupported(String),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Unsupported(_) => 2,
            ExperimentError::Train(_) | ExperimentError::Solve(_) => 3,
            ExperimentError::Problem(ProblemError::Solve(_)) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// The trainable system of an experiment: the network alone, or the network as a
/// pointwise source inside a known diffusion operator.
pub fn build_system(id: ExperimentId, net: &Network) -> Result<Box<dyn AdjointSystem>> {
    Ok(match id {
        ExperimentId::FisherKpp => Box::new(HybridSystem::new(
            fisher_kpp_grid(problems::FISHER_N)?,
            problems::FISHER_D,
            net.clone(),
            Application::Pointwise,
        )?),
        ExperimentId::AllenCahnHidden => {
            let grid = allen_cahn_grid(problems::ALLEN_CAHN_N)?;
            Box::new(HybridSystem::new(
                grid,
                AllenCahn::standard(grid).diffusion,
                net.clone(),
                Application::Pointwise,
            )?)
        }
        _ => Box::new(NetworkSystem::new(net.clone())?),
    })
}

/// Accuracy of a trained model against the reference field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub params: usize,
    pub epochs_run: usize,
    pub best_train_mse: f64,
    pub final_train_mse: f64,
    pub final_test_mse: Option<f64>,
    pub test_mse_at_best: f64,
    /// Mean squared error per field entry over the whole reference field.
    pub field_mse: f64,
    /// Mean squared error per field entry at the training times.
    pub train_field_mse: f64,
    /// Mean squared error per field entry at the test times.
    pub test_field_mse: f64,
    /// Largest absolute state error at the test times.
    pub max_test_error: f64,
    /// Largest `| |u_pred| - |u_true| |` over the reference field (complex states only).
    pub modulus_max_error: Option<f64>,
    pub divergences: usize,
    pub wall_s: f64,
}

pub struct RunResult {
    pub config: ExperimentConfig,
    pub initial: Network,
    /// Network at the best training objective.
    pub network: Network,
    pub train: TrainResult,
    pub dataset: Dataset,
    /// Rollout of `network` from the initial state over the reference times.
    pub prediction: Trajectory,
    pub metrics: RunMetrics,
    pub symbolic: Option<Vec<EdgeFit>>,
    pub files: Vec<PathBuf>,
}

fn entry_mse(pred: &Trajectory, truth: &Trajectory, times: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut max = 0.0f64;
    for t in times {
        let Some(k) = truth.times.iter().position(|s| (s - t).abs() < 1e-9) else {
            continue;
        };
        for (a, b) in pred.state(k).iter().zip(truth.state(k)) {
            let d = a - b;
            sum += d * d;
            max = max.max(d.abs());
            count += 1;
        }
    }
    (sum / count.max(1) as f64, max)
}

/// Field metrics of `net` on `dataset`.
pub fn evaluate(
    id: ExperimentId,
    net: &Network,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Trajectory, RunMetricsPartial)> {
    let sys = build_system(id, net)?;
    let theta = net.params();
    let opts = cfg.solver_options();
    let pred = tsit5_solve(&*sys, &theta, &dataset.u0, dataset.t0, &dataset.truth.times, &opts)?;
    let truth = &dataset.truth;
    let (field_mse, _) = entry_mse(&pred, truth, &truth.times);
    let (train_field_mse, _) = entry_mse(&pred, truth, &dataset.train.times);
    let (test_field_mse, max_test_error) = entry_mse(&pred, truth, &dataset.test.times);
    let modulus_max_error = if id == ExperimentId::Schrodinger {
        let mut m = 0.0f64;
        for k in 0..truth.len() {
            let a = problems::packed_modulus(pred.state(k))?;
            let b = problems::packed_modulus(truth.state(k))?;
            for (x, y) in a.iter().zip(&b) {
                m = m.max((x - y).abs());
            }
        }
        Some(m)
    } else {
        None
    };
    let test_mse_at_best = trajectory_mse(
        &*sys,
        &theta,
        dataset.t0,
        &dataset.u0,
        &dataset.test,
        &opts,
    )?;
    Ok((
        pred,
        RunMetricsPartial {
            field_mse,
            train_field_mse,
            test_field_mse,
            max_test_error,
            modulus_max_error,
            test_mse_at_best,
        },
    ))
}

/// Field metrics computed by [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetricsPartial {
    pub field_mse: f64,
    pub train_field_mse: f64,
    pub test_field_mse: f64,
    pub max_test_error: f64,
    pub modulus_max_error: Option<f64>,
    pub test_mse_at_best: f64,
}

/// States the network sees on the training data, one sample per network input.
pub fn network_samples(id: ExperimentId, dataset: &Dataset) -> Vec<Vec<f64>> {
    let mut rows: Vec<&[f64]> = vec![&dataset.u0];
    rows.extend(dataset.train.rows());
    if id.is_hidden_physics() {
        rows.iter()
            .flat_map(|r| r.iter().map(|&v| vec![v]))
            .collect()
    } else {
        rows.iter().map(|r| r.to_vec()).collect()
    }
}

fn train_data(dataset: &Dataset) -> TrainData {
    TrainData {
        t0: dataset.t0,
        u0: dataset.u0.clone(),
        train: dataset.train.clone(),
        test: Some(dataset.test.clone()),
    }
}

/// Trains `net0` on `dataset` without writing files.
pub fn train_model(
    id: ExperimentId,
    net0: &Network,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, TrainResult)> {
    let sys = build_system(id, net0)?;
    let res = train(&*sys, &net0.params(), &train_data(dataset), cfg)?;
    let best = net0.with_params(&res.best_theta)?;
    Ok((best, res))
}

/// Per-epoch reports followed by the evaluation after the last update.
pub fn full_history(res: &TrainResult) -> Vec<LossReport> {
    let mut h = res.history.clone();
    if h.last().map(|r| r.epoch) != Some(res.final_report.epoch) {
        h.push(res.final_report.clone());
    }
    h
}

fn write(files: &mut Vec<PathBuf>, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    io::write_file(&path, contents)?;
    files.push(path);
    Ok(())
}

fn write_checkpoint(
    files: &mut Vec<PathBuf>,
    path: PathBuf,
    net: &Network,
    samples: &[Vec<f64>],
) -> Result<()> {
    let ranges = if net.kind() == NetworkKind::Kan {
        Some(input_ranges(net, samples)?)
    } else {
        None
    };
    io::write_checkpoint(&io::Checkpoint::new(net, ranges), &path)?;
    files.push(path);
    Ok(())
}

fn write_json(files: &mut Vec<PathBuf>, path: PathBuf, value: &impl Serialize) -> Result<()> {
    write(
        files,
        path,
        serde_json::to_string_pretty(value).expect("serializable"),
    )
}

/// Trains one experiment and writes its outputs to `config.output_dir`: loss history,
/// best and last checkpoints, prediction-vs-truth field, metrics, and for hidden-physics
/// runs the learned activation curve and symbolic report.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    io::validate_config(config)?;
    let started = io::now_rfc3339();
    let clock = Instant::now();
    let id = config.id;
    let dataset = make_dataset(id.problem())?;
    let mut cfg = config.train.clone();
    cfg.seed = config.seed;
    let initial = Network::init(&config.architecture, config.seed)?;
    let (network, res) = train_model(id, &initial, &dataset, &cfg)?;
    let (prediction, part) = evaluate(id, &network, &dataset, &cfg)?;
    let metrics = RunMetrics {
        params: network.param_count(),
        epochs_run: res.history.len(),
        best_train_mse: res.best_train_mse,
        final_train_mse: res.final_report.train_mse,
        final_test_mse: res.final_report.test_mse,
        test_mse_at_best: part.test_mse_at_best,
        field_mse: part.field_mse,
        train_field_mse: part.train_field_mse,
        test_field_mse: part.test_field_mse,
        max_test_error: part.max_test_error,
        modulus_max_error: part.modulus_max_error,
        divergences: res.divergences,
        wall_s: clock.elapsed().as_secs_f64(),
    };

    let dir = &config.output_dir;
    let samples = network_samples(id, &dataset);
    let mut files = Vec::new();
    write(
        &mut files,
        dir.join("config.json"),
        serde_json::to_string_pretty(&config_to_json(config)).expect("json"),
    )?;
    write(&mut files, dir.join("loss.csv"), io::loss_csv(&full_history(&res)))?;
    write_checkpoint(&mut files, dir.join("checkpoint.json"), &network, &samples)?;
    let last = initial.with_params(&res.theta)?;
    write_checkpoint(&mut files, dir.join("checkpoint_last.json"), &last, &samples)?;
    for snap in &res.snapshots {
        let net = initial.with_params(&snap.theta)?;
        let path = dir.join(format!("checkpoint_epoch{}.json", snap.epoch));
        write_checkpoint(&mut files, path, &net, &samples)?;
    }
    write(
        &mut files,
        dir.join("field.csv"),
        io::field_csv(&prediction, &dataset.truth),
    )?;

    let symbolic = if id.is_hidden_physics() {
        let ranges = input_ranges(&network, &samples)?;
        let (lo, hi) = ranges[0][0];
        let xs = crate::symbolic::linspace(lo, hi, config.symbolic.samples);
        let ys = network.activation_curve(0, 0, 0, &xs)?;
        let rows: Vec<Vec<String>> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                vec![
                    fmt_f64(*x),
                    fmt_f64(*y),
                    fmt_f64(id.reference_source(*x).unwrap_or(f64::NAN)),
                ]
            })
            .collect();
        write(
            &mut files,
            dir.join("activation.csv"),
            io::table_csv(&["u", "activation", "reference"], &rows),
        )?;
        let fits = fit_network(
            &network,
            &ranges,
            config.symbolic.samples,
            &BasisGrammar::default(),
            config.symbolic.max_terms,
        )?;
        write(&mut files, dir.join("symbolic.txt"), io::symbolic_text(&fits))?;
        write(&mut files, dir.join("symbolic.csv"), io::symbolic_csv(&fits))?;
        Some(fits)
    } else {
        None
    };
    write_json(&mut files, dir.join("metrics.json"), &metrics)?;
    let manifest = RunManifest::build(dir, config_to_json(config), config.seed, started, &files)?;
    files.push(manifest.write(dir)?);

    Ok(RunResult {
        config: config.clone(),
        initial,
        network,
        train: res,
        dataset,
        prediction,
        metrics,
        symbolic,
        files,
    })
}

/// Per-cell absolute error of each right-hand-side component.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub grid: LandscapeGrid,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `errors[component][iy * nx + ix]`.
    pub errors: Vec<Vec<f64>>,
}

impl Landscape {
    pub fn mean_component(&self, c: usize) -> f64 {
        let e = &self.errors[c];
        e.iter().sum::<f64>() / e.len() as f64
    }

    /// Mean over cells and components.
    pub fn mean(&self) -> f64 {
        let n = self.errors.len();
        (0..n).map(|c| self.mean_component(c)).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((0..self.errors.len()).map(|c| format!("err_{c}")));
        let mut s = header.join(",");
        s.push('\n');
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                s.push_str(&format!("{},{}", fmt_f64(*x), fmt_f64(*y)));
                for e in &self.errors {
                    s.push(',');
                    s.push_str(&fmt_f64(e[iy * self.xs.len() + ix]));
                }
                s.push('\n');
            }
        }
        s
    }
}

fn workers(jobs: usize) -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs)
        .max(1)
}

/// Evaluates `|model(u) - truth(u)|` componentwise on the grid, fanning rows out over
/// worker threads.
pub fn gradient_error_landscape<M, T>(model: M, truth: T, dim: usize, grid: &LandscapeGrid) -> Landscape
where
    M: Fn(&[f64], &mut [f64]) + Sync,
    T: Fn(&[f64], &mut [f64]) + Sync,
{
    let xs = grid.xs();
    let ys = grid.ys();
    let nx = xs.len();
    let rows: Vec<Mutex<Vec<Vec<f64>>>> = ys.iter().map(|_| Mutex::new(Vec::new())).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers(ys.len()) {
            s.spawn(|| {
                let mut a = vec![0.0; dim];
                let mut b = vec![0.0; dim];
                loop {
                    let iy = next.fetch_add(1, Ordering::Relaxed);
                    if iy >= ys.len() {
                        break;
                    }
                    let mut row = vec![vec![0.0; nx]; dim];
                    for (ix, &x) in xs.iter().enumerate() {
                        let u = [x, ys[iy]];
                        model(&u, &mut a);
                        truth(&u, &mut b);
                        for c in 0..dim {
                            row[c][ix] = (a[c] - b[c]).abs();
                        }
                    }
                    *rows[iy].lock().expect("row lock") = row;
                }
            });
        }
    });
    let mut errors = vec![Vec::with_capacity(nx * ys.len()); dim];
    for r in rows {
        let r = r.into_inner().expect("row lock");
        for (c, v) in r.into_iter().enumerate() {
            errors[c].extend(v);
        }
    }
    Landscape {
        grid: *grid,
        xs,
        ys,
        errors,
    }
}

/// Landscape of a two-state network against the Lotka-Volterra right-hand side.
pub fn lv_landscape(net: &Network, grid: &LandscapeGrid) -> Result<Landscape> {
    if net.input_dim() != 2 || net.output_dim() != 2 {
        return Err(ExperimentError::Unsupported(format!(
            "landscape needs a 2 -> 2 network, got {} -> {}",
            net.input_dim(),
            net.output_dim()
        )));
    }
    let lv = LotkaVolterra::default();
    Ok(gradient_error_landscape(
        |u, out| out.copy_from_slice(&net.eval(u).expect("2-dim input")),
        |u, out| out.copy_from_slice(&lv.eval([u[0], u[1]])),
        2,
        grid,
    ))
}

/// Writes `landscape.csv`, the data contour `contour.csv` and `landscape.json`.
pub fn write_landscape(dir: &Path, land: &Landscape, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    write(&mut files, dir.join("landscape.csv"), land.to_csv())?;
    let rows: Vec<Vec<String>> = dataset
        .truth
        .times
        .iter()
        .zip(dataset.truth.rows())
        .map(|(t, r)| vec![fmt_f64(*t), fmt_f64(r[0]), fmt_f64(r[1])])
        .collect();
    write(
        &mut files,
        dir.join("contour.csv"),
        io::table_csv(&["t", "x", "y"], &rows),
    )?;
    let means: Vec<f64> = (0..land.errors.len()).map(|c| land.mean_component(c)).collect();
    write_json(
        &mut files,
        dir.join("landscape.json"),
        &json!({ "mean": land.mean(), "mean_per_component": means }),
    )?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub architecture: NetSpec,
    pub params: usize,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln(train_loss)` against `ln(params)`; undefined with fewer
    /// than two distinct sizes.
    pub slope: Option<f64>,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.params.to_string(),
                    r.train_loss.map(fmt_f64).unwrap_or_default(),
                    r.test_loss.map(fmt_f64).unwrap_or_default(),
                    r.error.as_deref().unwrap_or("ok").replace(',', ";"),
                ]
            })
            .collect();
        io::table_csv(&["params", "train_loss", "test_loss", "status"], &rows)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Trains every architecture independently on the same data and seed. Failed runs are
/// reported in their row.
pub fn run_scaling_study(base: &ExperimentConfig, archs: &[NetSpec]) -> Result<ScalingTable> {
    let dataset = make_dataset(base.id.problem())?;
    let mut cfg = base.train.clone();
    cfg.seed = base.seed;
    let slots: Vec<Mutex<Option<ScalingRow>>> = archs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers(archs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= archs.len() {
                    break;
                }
                let arch = &archs[i];
                let outcome = (|| -> Result<(f64, f64)> {
                    let net0 = Network::init(arch, base.seed)?;
                    let (net, res) = train_model(base.id, &net0, &dataset, &cfg)?;
                    let sys = build_system(base.id, &net)?;
                    let test = trajectory_mse(
                        &*sys,
                        &net.params(),
                        dataset.t0,
                        &dataset.u0,
                        &dataset.test,
                        &cfg.solver_options(),
                    )?;
                    Ok((res.best_train_mse, test))
                })();
                let row = match outcome {
                    Ok((train_loss, test_loss)) => ScalingRow {
                        architecture: arch.clone(),
                        params: arch.param_count(),
                        train_loss: Some(train_loss),
                        test_loss: Some(test_loss),
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("scaling run {i} failed: {e}");
                        ScalingRow {
                            architecture: arch.clone(),
                            params: arch.param_count(),
                            train_loss: None,
                            test_loss: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                *slots[i].lock().expect("slot lock") = Some(row);
            });
        }
    });
    let rows: Vec<ScalingRow> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect();
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.train_loss.map(|l| (r.params as f64, l)))
        .collect();
    Ok(ScalingTable {
        slope: log_log_slope(&points),
        rows,
    })
}

/// Runs a scaling study and writes `scaling.csv` and `scaling.json`.
pub fn run_scaling_files(base: &ExperimentConfig, archs: &[NetSpec]) -> Result<(ScalingTable, Vec<PathBuf>)> {
    let started = io::now_rfc3339();
    let table = run_scaling_study(base, archs)?;
    let dir = &base.output_dir;
    let mut files = Vec::new();
    write(&mut files, dir.join("scaling.csv"), table.to_csv())?;
    write_json(&mut files, dir.join("scaling.json"), &table)?;
    let manifest = RunManifest::build(dir, config_to_json(base), base.seed, started, &files)?;
    files.push(manifest.write(dir)?);
    Ok((table, files))
}

/// `(alpha, beta, gamma, delta)` read off a quadratic two-state global fit.
pub fn lv_parameters(fit: &GlobalFit) -> [f64; 4] {
    [
        fit.coef(0, &[1, 0]),
        -fit.coef(0, &[1, 1]),
        fit.coef(1, &[1, 1]),
        -fit.coef(1, &[0, 1]),
    ]
}

/// Outputs of the sparsify, prune, retrain and symbolic pipeline.
pub struct SparseArtifacts {
    pub dense: Network,
    pub sparse: Network,
    pub pruned: Network,
    pub retrained: Network,
    pub dense_result: TrainResult,
    pub sparse_result: TrainResult,
    pub polish_result: Option<TrainResult>,
    pub retrain_result: TrainResult,
    pub params_before: usize,
    pub params_after: usize,
    pub hidden_width_before: usize,
    pub hidden_width_after: usize,
    pub edge_fits: Vec<EdgeFit>,
    pub global: GlobalFit,
    pub lv_parameters: [f64; 4],
    pub files: Vec<PathBuf>,
}

fn hidden_width(net: &Network) -> usize {
    net.layers().first().map_or(0, |l| l.out_dim())
}

/// Dense training, L1-regularized training, pruning, retraining, per-edge symbolic fits
/// and a global polynomial fit of the retrained model.
pub fn run_sparse_pipeline(config: &ExperimentConfig) -> Result<SparseArtifacts> {
    io::validate_config(config)?;
    if config.id.problem() != ProblemId::LotkaVolterra {
        return Err(ExperimentError::Unsupported(format!(
            "the sparse pipeline runs on Lotka-Volterra, not `{}`",
            config.id.as_str()
        )));
    }
    let started = io::now_rfc3339();
    let id = config.id;
    let dataset = make_dataset(id.problem())?;
    let samples = network_samples(id, &dataset);
    let base = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };

    let init = Network::init(&config.architecture, config.seed)?;
    let (dense, dense_result) = train_model(
        id,
        &init,
        &dataset,
        &TrainConfig {
            gamma_sp: 0.0,
            ..base.clone()
        },
    )?;
    let (sparse, sparse_result) = train_model(
        id,
        &dense,
        &dataset,
        &TrainConfig {
            epochs: config.sparse_epochs.max(1),
            ..base.clone()
        },
    )?;
    let (sparse, polish_result) = if config.polish_epochs > 0 {
        let (net, res) = train_model(
            id,
            &sparse,
            &dataset,
            &TrainConfig {
                lr: base.lr * 0.1,
                epochs: config.polish_epochs,
                snapshot_at: Vec::new(),
                ..base.clone()
            },
        )?;
        (net, Some(res))
    } else {
        (sparse, None)
    };
    let record = sparse.record_activations(&samples)?;
    let pruned = sparse.prune(&record, config.gamma_pr)?;
    let (retrained, retrain_result) = train_model(
        id,
        &pruned,
        &dataset,
        &TrainConfig {
            gamma_sp: 0.0,
            epochs: config.retrain_epochs.max(1),
            snapshot_at: Vec::new(),
            ..base
        },
    )?;

    let ranges = input_ranges(&retrained, &samples)?;
    let edge_fits = fit_network(
        &retrained,
        &ranges,
        config.symbolic.samples,
        &BasisGrammar::default(),
        config.symbolic.max_terms,
    )?;
    // Sampled on the training contour only; the box around it is extrapolation.
    let outputs: Vec<Vec<f64>> = samples
        .iter()
        .map(|u| retrained.eval(u))
        .collect::<std::result::Result<_, _>>()?;
    let global = fit_global(
        &samples,
        &outputs,
        &CandidateLibrary::quadratic_2d(),
        DEFAULT_SPARSITY_THRESHOLD,
    )?;
    let lv = lv_parameters(&global);

    let dir = &config.output_dir;
    let mut files = Vec::new();
    write(
        &mut files,
        dir.join("config.json"),
        serde_json::to_string_pretty(&config_to_json(config)).expect("json"),
    )?;
    for (name, net, res) in [
        ("dense", &dense, &dense_result),
        ("sparse", &sparse, &sparse_result),
        ("retrained", &retrained, &retrain_result),
    ] {
        write(&mut files, dir.join(format!("{name}_loss.csv")), io::loss_csv(&full_history(res)))?;
        write_checkpoint(&mut files, dir.join(format!("{name}.json")), net, &samples)?;
    }
    if let Some(res) = &polish_result {
        write(&mut files, dir.join("polish_loss.csv"), io::loss_csv(&full_history(res)))?;
    }
    write_checkpoint(&mut files, dir.join("pruned.json"), &pruned, &samples)?;
    write(&mut files, dir.join("symbolic.txt"), io::symbolic_text(&edge_fits))?;
    write(&mut files, dir.join("symbolic.csv"), io::symbolic_csv(&edge_fits))?;
    let vars = ["x".to_string(), "y".to_string()];
    write(&mut files, dir.join("global.txt"), global.render(&vars).join("\n") + "\n")?;
    let summary = json!({
        "params_before": dense.param_count(),
        "params_after": retrained.param_count(),
        "hidden_width_before": hidden_width(&dense),
        "hidden_width_after": hidden_width(&retrained),
        "dense_best_train_mse": dense_result.best_train_mse,
        "sparse_best_train_mse": sparse_result.best_train_mse,
        "polish_best_train_mse": polish_result.as_ref().map(|r| r.best_train_mse),
        "retrained_best_train_mse": retrain_result.best_train_mse,
        "global_coefficients": global.coefs,
        "lv_parameters": lv,
    });
    write_json(&mut files, dir.join("pipeline.json"), &summary)?;
    let manifest = RunManifest::build(dir, config_to_json(config), config.seed, started, &files)?;
    files.push(manifest.write(dir)?);

    Ok(SparseArtifacts {
        params_before: dense.param_count(),
        params_after: retrained.param_count(),
        hidden_width_before: hidden_width(&dense),
        hidden_width_after: hidden_width(&retrained),
        dense,
        sparse,
        pruned,
        retrained,
        dense_result,
        sparse_result,
        polish_result,
        retrain_result,
        edge_fits,
        global,
        lv_parameters: lv,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig::defaults(id);
            let s = &cfg.architecture;
            assert_eq!((s.input_dim().unwrap(), s.output_dim().unwrap()), id.net_dims(), "{}", id.as_str());
            assert_eq!(ExperimentId::parse(id.as_str()), Some(id));
        }
        let sizes: Vec<usize> = ExperimentConfig::defaults(ExperimentId::LvScaling)
            .scaling
            .iter()
            .map(NetSpec::param_count)
            .collect();
        assert_eq!(sizes, [64, 96, 240]);
        assert_eq!(ExperimentId::Burgers.net_dims(), (41, 41));
        assert_eq!(ExperimentId::Schrodinger.net_dims(), (402, 402));
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [3.0, 4.0, 6.0, 11.0]
            .iter()
            .map(|&n: &f64| (n, 2.0 * n.powf(-4.0)))
            .collect();
        assert!((log_log_slope(&pts).unwrap() + 4.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
    }

    #[test]
    fn landscape_trivial_cases() {
        let grid = LandscapeGrid {
            nx: 7,
            ny: 5,
            ..LandscapeGrid::default()
        };
        let lv = LotkaVolterra::default();
        let truth = |u: &[f64], o: &mut [f64]| o.copy_from_slice(&lv.eval([u[0], u[1]]));
        let same = gradient_error_landscape(truth, truth, 2, &grid);
        assert!(same.errors.iter().flatten().all(|&e| e == 0.0));
        let zero = gradient_error_landscape(|_: &[f64], o: &mut [f64]| o.fill(0.0), truth, 2, &grid);
        for (iy, y) in grid.ys().iter().enumerate() {
            for (ix, x) in grid.xs().iter().enumerate() {
                let f = lv.eval([*x, *y]);
                for c in 0..2 {
                    assert_eq!(zero.errors[c][iy * 7 + ix], f[c].abs());
                }
            }
        }
    }

    #[test]
    fn lv_parameter_extraction() {
        let lib = CandidateLibrary::quadratic_2d();
        let fit = GlobalFit {
            coefs: vec![
                vec![0.0, 1.5, 0.0, 0.0, -1.0, 0.0],
                vec![0.0, 0.0, -3.0, 0.0, 1.0, 0.0],
            ],
            library: lib,
        };
        assert_eq!(lv_parameters(&fit), [1.5, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn exit_codes() {
        let cfg = ExperimentError::Config(ConfigErrors(vec![]));
        assert_eq!(cfg.exit_code(), 2);
        let num = ExperimentError::Train(TrainError::Diverged { epoch: 1, retries: 11 });
        assert_eq!(num.exit_code(), 3);
    }
}
