//! File formats: network checkpoints, CSV tables, experiment configs and run manifests.
//!
//! Checkpoints come in two encodings. JSON (the default) stores the architecture and the
//! flat parameter vector under a format tag; binary stores the same header as JSON
//! followed by little-endian `f64` parameters:
//!
//! ```text
//! magic "KANODEB\0" | version u32 | header length u32 | header JSON | count u64 | f64 x count
//! ```
//!
//! All CSV floats are written with 17 significant digits and read back bit-exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiments::{ExperimentConfig, ExperimentId, LandscapeGrid, SymbolicSettings};
use crate::kan::{KanError, NetSpec, Network};
use crate::odeint::{SolveStats, Trajectory};
use crate::symbolic::EdgeFit;
use crate::training::{GradMode, LossReport};

pub const CHECKPOINT_FORMAT: &str = "kanode-ckpt-v1";
pub const BINARY_MAGIC: &[u8; 8] = b"KANODEB\0";
pub const BINARY_VERSION: u32 = 1;
pub const LOSS_HEADER: &str = "epoch,train_mse,test_mse,l1,total,lr,wall_ms";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version `{found}` (expected `{expected}`)")]
    VersionMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {got} parameters but its architecture needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("JSON checkpoints cannot store non-finite parameter {index}")]
    NonFinite { index: usize },
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("network: {0}")]
    Network(#[from] KanError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Architecture, parameters and optionally the per-layer input ranges seen in training
/// (used to choose symbolic fit intervals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetSpec,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_ranges: Option<Vec<Vec<(f64, f64)>>>,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    spec: NetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_ranges: Option<Vec<Vec<(f64, f64)>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFormat {
    Json,
    Binary,
}

impl CheckpointFormat {
    /// `.bin` selects binary; anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => CheckpointFormat::Binary,
            _ => CheckpointFormat::Json,
        }
    }
}

impl Checkpoint {
    pub fn new(net: &Network, input_ranges: Option<Vec<Vec<(f64, f64)>>>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: net.spec(),
            params: net.params(),
            input_ranges,
        }
    }

    pub fn network(&self) -> Result<Network> {
        let expected = self.spec.param_count();
        if self.params.len() != expected {
            return Err(IoError::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        Ok(Network::zeros(&self.spec)?.with_params(&self.params)?)
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some(index) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite { index });
        }
        Ok(serde_json::to_string_pretty(self).expect("checkpoint serializes"))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: Value =
            serde_json::from_slice(bytes).map_err(|e| IoError::Corrupt(e.to_string()))?;
        match value.get("format").and_then(Value::as_str) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => {
                return Err(IoError::VersionMismatch {
                    found: other.to_string(),
                    expected: CHECKPOINT_FORMAT.to_string(),
                })
            }
            None => return Err(IoError::Corrupt("missing format tag".into())),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| IoError::Corrupt(e.to_string()))?;
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&BinaryHeader {
            spec: self.spec.clone(),
            input_ranges: self.input_ranges.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(32 + header.len() + 8 * self.params.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != BINARY_MAGIC {
            return Err(IoError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != BINARY_VERSION {
            return Err(IoError::VersionMismatch {
                found: format!("binary v{version}"),
                expected: format!("binary v{BINARY_VERSION}"),
            });
        }
        let hlen = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let header: BinaryHeader = serde_json::from_slice(cur.take(hlen)?)
            .map_err(|e| IoError::Corrupt(format!("header: {e}")))?;
        let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
        let body = cur.take(count.checked_mul(8).ok_or_else(|| {
            IoError::Corrupt("parameter count overflows".into())
        })?)?;
        if cur.pos != bytes.len() {
            return Err(IoError::Corrupt("trailing bytes".into()));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: header.spec,
            params,
            input_ranges: header.input_ranges,
        };
        ckpt.check()?;
        Ok(ckpt)
    }

    fn check(&self) -> Result<()> {
        self.spec
            .validate()
            .map_err(|e| IoError::Corrupt(format!("architecture: {e}")))?;
        let expected = self.spec.param_count();
        if self.params.len() != expected {
            return Err(IoError::DimensionMismatch {
                expected,
                got: self.params.len(),
            });
        }
        if let Some(r) = &self.input_ranges {
            let dims: Vec<usize> = match &self.spec {
                NetSpec::Kan { layers, .. } => layers.iter().map(|l| l[0]).collect(),
                NetSpec::Mlp { dims } => dims[..dims.len() - 1].to_vec(),
            };
            if r.len() != dims.len() || r.iter().zip(&dims).any(|(a, b)| a.len() != *b) {
                return Err(IoError::Corrupt("input ranges do not match architecture".into()));
            }
        }
        Ok(())
    }

    /// Detects the encoding from the leading bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(&BINARY_MAGIC[..4]) {
            Self::from_binary(bytes)
        } else {
            Self::from_json(bytes)
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IoError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    match CheckpointFormat::from_path(path) {
        CheckpointFormat::Json => write_file(path, ckpt.to_json()?),
        CheckpointFormat::Binary => write_file(path, ckpt.to_binary()),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path)?)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_checkpoint(&Checkpoint::new(net, None), path)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(path)?.network()
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| IoError::Csv {
        line,
        message: format!("`{s}` is not a number"),
    })
}

fn csv_lines(text: &str, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(IoError::Csv {
                line: 1,
                message: format!("expected header `{header}`, found `{h}`"),
            })
        }
        None => {
            return Err(IoError::Csv {
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let width = header.split(',').count();
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            if cells.len() != width {
                return Err(IoError::Csv {
                    line: i + 1,
                    message: format!("expected {width} columns, found {}", cells.len()),
                });
            }
            Ok((i + 1, cells))
        })
        .collect()
}

pub fn loss_csv(history: &[LossReport]) -> String {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for r in history {
        let test = r.test_mse.map(fmt_f64).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.train_mse),
            test,
            fmt_f64(r.l1),
            fmt_f64(r.total),
            fmt_f64(r.lr),
            r.wall_ms
        ));
    }
    s
}

pub fn parse_loss_csv(text: &str) -> Result<Vec<LossReport>> {
    csv_lines(text, LOSS_HEADER)?
        .into_iter()
        .map(|(line, c)| {
            let int = |s: &str| {
                s.trim().parse::<u64>().map_err(|_| IoError::Csv {
                    line,
                    message: format!("`{s}` is not an integer"),
                })
            };
            Ok(LossReport {
                epoch: int(&c[0])? as usize,
                train_mse: parse_f64(&c[1], line)?,
                test_mse: if c[2].trim().is_empty() {
                    None
                } else {
                    Some(parse_f64(&c[2], line)?)
                },
                l1: parse_f64(&c[3], line)?,
                total: parse_f64(&c[4], line)?,
                lr: parse_f64(&c[5], line)?,
                wall_ms: int(&c[6])?,
            })
        })
        .collect()
}

fn trajectory_header(dim: usize) -> String {
    let mut h = String::from("t");
    for i in 0..dim {
        h.push_str(&format!(",u{i}"));
    }
    h
}

/// One row per time: `t,u0,u1,...`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = trajectory_header(traj.dim);
    s.push('\n');
    for (t, row) in traj.times.iter().zip(traj.rows()) {
        s.push_str(&fmt_f64(*t));
        for v in row {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let header = text.lines().next().unwrap_or_default().trim();
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(IoError::Csv {
            line: 1,
            message: "trajectory needs a time column and at least one state column".into(),
        });
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (line, cells) in csv_lines(text, &trajectory_header(dim))? {
        times.push(parse_f64(&cells[0], line)?);
        for c in &cells[1..] {
            states.push(parse_f64(c, line)?);
        }
    }
    Ok(Trajectory {
        times,
        states,
        dim,
        stats: SolveStats::default(),
    })
}

/// Long-format prediction-vs-truth table: `t,index,predicted,truth`.
pub fn field_csv(pred: &Trajectory, truth: &Trajectory) -> String {
    let mut s = String::from("t,index,predicted,truth\n");
    for (k, t) in truth.times.iter().enumerate() {
        for (i, (p, q)) in pred.state(k).iter().zip(truth.state(k)).enumerate() {
            s.push_str(&format!("{},{i},{},{}\n", fmt_f64(*t), fmt_f64(*p), fmt_f64(*q)));
        }
    }
    s
}

/// Generic CSV with a header line; cells are written as given.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-edge Pareto fronts: `layer,out,in,complexity,loss,expression,selected`.
pub fn symbolic_csv(fits: &[EdgeFit]) -> String {
    let mut s = String::from("layer,out,in,complexity,loss,expression,selected\n");
    for f in fits {
        for m in &f.front {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.layer,
                f.out_node,
                f.in_node,
                m.complexity,
                fmt_f64(m.loss),
                csv_quote(&m.render("x")),
                u8::from(*m == f.best)
            ));
        }
    }
    s
}

/// Plain-text report of per-edge Pareto fronts and selections.
pub fn symbolic_text(fits: &[EdgeFit]) -> String {
    let mut s = String::new();
    for f in fits {
        s.push_str(&format!(
            "layer {} edge ({} <- {}) on [{}, {}]\n",
            f.layer, f.out_node, f.in_node, f.range.0, f.range.1
        ));
        s.push_str(&crate::symbolic::front_table(&f.front, "x"));
        s.push_str(&format!("selected: {}\n\n", f.best.render("x")));
    }
    s
}

/// A configuration problem. [`parse_config`] reports all of them at once.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Syntax(String),
    NotAnObject,
    MissingKey(String),
    UnknownKey(String),
    UnknownExperiment(String),
    WrongType { key: String, expected: String },
    Invalid { key: String, message: String },
    DimensionMismatch {
        key: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax(m) => write!(f, "syntax error: {m}"),
            ConfigError::NotAnObject => write!(f, "config must be a JSON object"),
            ConfigError::MissingKey(k) => write!(f, "missing required key `{k}`"),
            ConfigError::UnknownKey(k) => write!(f, "unknown key `{k}`"),
            ConfigError::UnknownExperiment(id) => write!(
                f,
                "unknown experiment `{id}` (expected one of {})",
                ExperimentId::ALL.map(|e| e.as_str()).join(", ")
            ),
            ConfigError::WrongType { key, expected } => {
                write!(f, "`{key}` must be {expected}")
            }
            ConfigError::Invalid { key, message } => write!(f, "`{key}`: {message}"),
            ConfigError::DimensionMismatch { key, expected, got } => write!(
                f,
                "`{key}` maps {} -> {} but the experiment needs {} -> {}",
                got.0, got.1, expected.0, expected.1
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "{}", lines.join("\n"))
    }
}

const TOP_KEYS: &[&str] = &[
    "id",
    "seed",
    "output_dir",
    "architecture",
    "lr",
    "epochs",
    "gamma_sp",
    "rtol",
    "atol",
    "early_stop_loss",
    "beta1",
    "beta2",
    "eps",
    "grad_mode",
    "test_every",
    "discrete_dt",
    "snapshot_at",
    "max_lr_halvings",
    "gamma_pr",
    "sparse_epochs",
    "polish_epochs",
    "retrain_epochs",
    "scaling",
    "landscape",
    "symbolic",
];
const LANDSCAPE_KEYS: &[&str] = &["x_min", "x_max", "y_min", "y_max", "nx", "ny"];
const SYMBOLIC_KEYS: &[&str] = &["max_terms", "samples"];

struct Walker {
    errors: Vec<ConfigError>,
}

impl Walker {
    fn wrong(&mut self, key: &str, expected: &str) {
        self.errors.push(ConfigError::WrongType {
            key: key.to_string(),
            expected: expected.to_string(),
        });
    }

    fn invalid(&mut self, key: &str, message: impl Into<String>) {
        self.errors.push(ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        });
    }

    fn unknown_keys(&mut self, obj: &Map<String, Value>, allowed: &[&str], prefix: &str) {
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                self.errors.push(ConfigError::UnknownKey(format!("{prefix}{k}")));
            }
        }
    }

    fn real(&mut self, obj: &Map<String, Value>, key: &str, name: &str, out: &mut f64) {
        if let Some(v) = obj.get(key) {
            match v.as_f64() {
                Some(x) => *out = x,
                None => self.wrong(name, "a number"),
            }
        }
    }

    fn count(&mut self, obj: &Map<String, Value>, key: &str, name: &str, out: &mut usize) {
        if let Some(v) = obj.get(key) {
            match v.as_u64() {
                Some(x) => *out = x as usize,
                None => self.wrong(name, "a nonnegative integer"),
            }
        }
    }

    fn spec(&mut self, v: &Value, key: &str) -> Option<NetSpec> {
        match serde_json::from_value::<NetSpec>(v.clone()) {
            Ok(s) => match s.validate() {
                Ok(()) => Some(s),
                Err(e) => {
                    self.invalid(key, e.to_string());
                    None
                }
            },
            Err(e) => {
                self.invalid(key, format!("not an architecture: {e}"));
                None
            }
        }
    }
}

/// Strict config parsing. Unknown keys are rejected, unspecified keys take the
/// experiment's defaults, and every problem found is reported.
pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, ConfigErrors> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ConfigErrors(vec![ConfigError::Syntax(e.to_string())]))?;
    let Value::Object(obj) = value else {
        return Err(ConfigErrors(vec![ConfigError::NotAnObject]));
    };
    let mut w = Walker { errors: Vec::new() };
    let id = match obj.get("id") {
        None => {
            w.errors.push(ConfigError::MissingKey("id".into()));
            None
        }
        Some(Value::String(s)) => match ExperimentId::parse(s) {
            Some(id) => Some(id),
            None => {
                w.errors.push(ConfigError::UnknownExperiment(s.clone()));
                None
            }
        },
        Some(_) => {
            w.wrong("id", "a string");
            None
        }
    };
    let mut cfg = ExperimentConfig::defaults(id.unwrap_or(ExperimentId::Lv));
    w.unknown_keys(&obj, TOP_KEYS, "");

    if let Some(v) = obj.get("seed") {
        match v.as_u64() {
            Some(s) => cfg.seed = s,
            None => w.wrong("seed", "a nonnegative integer"),
        }
    }
    cfg.train.seed = cfg.seed;
    if let Some(v) = obj.get("output_dir") {
        match v.as_str() {
            Some(s) => cfg.output_dir = PathBuf::from(s),
            None => w.wrong("output_dir", "a string"),
        }
    }
    if let Some(v) = obj.get("architecture") {
        if let Some(s) = w.spec(v, "architecture") {
            cfg.architecture = s;
        }
    }
    let t = &mut cfg.train;
    w.real(&obj, "lr", "lr", &mut t.lr);
    w.count(&obj, "epochs", "epochs", &mut t.epochs);
    w.real(&obj, "gamma_sp", "gamma_sp", &mut t.gamma_sp);
    w.real(&obj, "rtol", "rtol", &mut t.rtol);
    w.real(&obj, "atol", "atol", &mut t.atol);
    w.real(&obj, "beta1", "beta1", &mut t.beta1);
    w.real(&obj, "beta2", "beta2", &mut t.beta2);
    w.real(&obj, "eps", "eps", &mut t.eps);
    w.count(&obj, "test_every", "test_every", &mut t.test_every);
    w.real(&obj, "discrete_dt", "discrete_dt", &mut t.discrete_dt);
    w.count(&obj, "max_lr_halvings", "max_lr_halvings", &mut t.max_lr_halvings);
    match obj.get("early_stop_loss") {
        None => {}
        Some(Value::Null) => t.early_stop_loss = None,
        Some(v) => match v.as_f64() {
            Some(x) => t.early_stop_loss = Some(x),
            None => w.wrong("early_stop_loss", "a number or null"),
        },
    }
    if let Some(v) = obj.get("grad_mode") {
        match v.as_str() {
            Some("adjoint") => t.grad_mode = GradMode::Adjoint,
            Some("discrete") => t.grad_mode = GradMode::Discrete,
            _ => w.wrong("grad_mode", "\"adjoint\" or \"discrete\""),
        }
    }
    if let Some(v) = obj.get("snapshot_at") {
        match v
            .as_array()
            .and_then(|a| a.iter().map(|e| e.as_u64().map(|x| x as usize)).collect())
        {
            Some(list) => t.snapshot_at = list,
            None => w.wrong("snapshot_at", "an array of epochs"),
        }
    }
    w.real(&obj, "gamma_pr", "gamma_pr", &mut cfg.gamma_pr);
    w.count(&obj, "sparse_epochs", "sparse_epochs", &mut cfg.sparse_epochs);
    w.count(&obj, "polish_epochs", "polish_epochs", &mut cfg.polish_epochs);
    w.count(&obj, "retrain_epochs", "retrain_epochs", &mut cfg.retrain_epochs);
    if let Some(v) = obj.get("scaling") {
        match v.as_array() {
            Some(list) => {
                let specs: Vec<Option<NetSpec>> = list
                    .iter()
                    .enumerate()
                    .map(|(i, s)| w.spec(s, &format!("scaling[{i}]")))
                    .collect();
                if specs.iter().all(Option::is_some) {
                    cfg.scaling = specs.into_iter().flatten().collect();
                }
            }
            None => w.wrong("scaling", "an array of architectures"),
        }
    }
    if let Some(v) = obj.get("landscape") {
        match v.as_object() {
            Some(o) => {
                w.unknown_keys(o, LANDSCAPE_KEYS, "landscape.");
                let g = &mut cfg.landscape;
                w.real(o, "x_min", "landscape.x_min", &mut g.x_range.0);
                w.real(o, "x_max", "landscape.x_max", &mut g.x_range.1);
                w.real(o, "y_min", "landscape.y_min", &mut g.y_range.0);
                w.real(o, "y_max", "landscape.y_max", &mut g.y_range.1);
                w.count(o, "nx", "landscape.nx", &mut g.nx);
                w.count(o, "ny", "landscape.ny", &mut g.ny);
            }
            None => w.wrong("landscape", "an object"),
        }
    }
    if let Some(v) = obj.get("symbolic") {
        match v.as_object() {
            Some(o) => {
                w.unknown_keys(o, SYMBOLIC_KEYS, "symbolic.");
                w.count(o, "max_terms", "symbolic.max_terms", &mut cfg.symbolic.max_terms);
                w.count(o, "samples", "symbolic.samples", &mut cfg.symbolic.samples);
            }
            None => w.wrong("symbolic", "an object"),
        }
    }

    if id.is_some() {
        validate(&cfg, &mut w);
    }
    if w.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(w.errors))
    }
}

/// Re-checks a config built or modified in code, reporting every problem.
pub fn validate_config(cfg: &ExperimentConfig) -> std::result::Result<(), ConfigErrors> {
    let mut w = Walker { errors: Vec::new() };
    validate(cfg, &mut w);
    if w.errors.is_empty() {
        Ok(())
    } else {
        Err(ConfigErrors(w.errors))
    }
}

fn validate(cfg: &ExperimentConfig, w: &mut Walker) {
    let t = &cfg.train;
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if !(t.lr.is_finite() && t.lr >= 0.0) {
        w.invalid("lr", "must be a nonnegative number");
    }
    if t.epochs < 1 {
        w.invalid("epochs", "must be at least 1");
    }
    if !(t.gamma_sp.is_finite() && t.gamma_sp >= 0.0) {
        w.invalid("gamma_sp", "must be nonnegative");
    }
    for (key, v) in [("rtol", t.rtol), ("atol", t.atol), ("eps", t.eps)] {
        if !positive(v) {
            w.invalid(key, "must be positive");
        }
    }
    if !positive(t.discrete_dt) {
        w.invalid("discrete_dt", "must be positive");
    }
    for (key, v) in [("beta1", t.beta1), ("beta2", t.beta2)] {
        if !(0.0..1.0).contains(&v) {
            w.invalid(key, "must lie in [0, 1)");
        }
    }
    if t.early_stop_loss.is_some_and(|v| !positive(v)) {
        w.invalid("early_stop_loss", "must be positive");
    }
    if !(cfg.gamma_pr.is_finite() && cfg.gamma_pr >= 0.0) {
        w.invalid("gamma_pr", "must be nonnegative");
    }
    let expected = cfg.id.net_dims();
    let dims = |s: &NetSpec| (s.input_dim().unwrap_or(0), s.output_dim().unwrap_or(0));
    if let Err(e) = cfg.architecture.validate() {
        w.invalid("architecture", e.to_string());
    }
    if dims(&cfg.architecture) != expected {
        w.errors.push(ConfigError::DimensionMismatch {
            key: "architecture".into(),
            expected,
            got: dims(&cfg.architecture),
        });
    }
    for (i, s) in cfg.scaling.iter().enumerate() {
        if dims(s) != expected {
            w.errors.push(ConfigError::DimensionMismatch {
                key: format!("scaling[{i}]"),
                expected,
                got: dims(s),
            });
        }
    }
    if cfg.id == ExperimentId::LvScaling && cfg.scaling.len() < 3 {
        w.invalid("scaling", "a scaling study needs at least 3 architectures");
    }
    let g = &cfg.landscape;
    if g.nx < 2 || g.ny < 2 {
        w.invalid("landscape", "resolution must be at least 2 per axis");
    }
    if !(g.x_range.0 < g.x_range.1 && g.y_range.0 < g.y_range.1) {
        w.invalid("landscape", "bounding box must have min < max");
    }
    if cfg.symbolic.max_terms < 1 {
        w.invalid("symbolic.max_terms", "must be at least 1");
    }
    if cfg.symbolic.samples < crate::symbolic::MIN_SAMPLES {
        w.invalid(
            "symbolic.samples",
            format!("must be at least {}", crate::symbolic::MIN_SAMPLES),
        );
    }
}

/// Flat JSON form accepted by [`parse_config`].
pub fn config_to_json(cfg: &ExperimentConfig) -> Value {
    let t = &cfg.train;
    let LandscapeGrid {
        x_range,
        y_range,
        nx,
        ny,
    } = cfg.landscape;
    let SymbolicSettings { max_terms, samples } = cfg.symbolic;
    json!({
        "id": cfg.id.as_str(),
        "seed": cfg.seed,
        "output_dir": cfg.output_dir.to_string_lossy(),
        "architecture": cfg.architecture,
        "lr": t.lr,
        "epochs": t.epochs,
        "gamma_sp": t.gamma_sp,
        "rtol": t.rtol,
        "atol": t.atol,
        "early_stop_loss": t.early_stop_loss,
        "beta1": t.beta1,
        "beta2": t.beta2,
        "eps": t.eps,
        "grad_mode": match t.grad_mode {
            GradMode::Adjoint => "adjoint",
            GradMode::Discrete => "discrete",
        },
        "test_every": t.test_every,
        "discrete_dt": t.discrete_dt,
        "snapshot_at": t.snapshot_at,
        "max_lr_halvings": t.max_lr_halvings,
        "gamma_pr": cfg.gamma_pr,
        "sparse_epochs": cfg.sparse_epochs,
        "polish_epochs": cfg.polish_epochs,
        "retrain_epochs": cfg.retrain_epochs,
        "scaling": cfg.scaling,
        "landscape": {
            "x_min": x_range.0, "x_max": x_range.1,
            "y_min": y_range.0, "y_max": y_range.1,
            "nx": nx, "ny": ny,
        },
        "symbolic": { "max_terms": max_terms, "samples": samples },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written as `manifest.json` next to a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub files: Vec<FileRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_file(path)?))
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

impl RunManifest {
    /// Checksums every file in `files`, recorded relative to `dir`.
    pub fn build(
        dir: &Path,
        config: Value,
        seed: u64,
        started: String,
        files: &[PathBuf],
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut records = Vec::new();
        for f in files {
            if !seen.insert(f.clone()) {
                continue;
            }
            let rel = f.strip_prefix(dir).unwrap_or(f);
            records.push(FileRecord {
                path: rel.to_string_lossy().into_owned(),
                sha256: sha256_file(f)?,
            });
        }
        Ok(Self {
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started,
            finished: now_rfc3339(),
            files: records,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_file(
            &path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Network {
        Network::init(&NetSpec::kan(&[[2, 3, 5], [3, 2, 5]]), 4).unwrap()
    }

    #[test]
    fn json_and_binary_round_trip() {
        let n = net();
        let ck = Checkpoint::new(&n, Some(vec![vec![(0.0, 1.0); 2], vec![(-1.0, 2.0); 3]]));
        let a = Checkpoint::decode(ck.to_json().unwrap().as_bytes()).unwrap();
        let b = Checkpoint::decode(&ck.to_binary()).unwrap();
        assert_eq!(a, ck);
        assert_eq!(b, ck);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.network().unwrap().params()), bits(&n.params()));
    }

    #[test]
    fn corrupt_and_version_errors() {
        let ck = Checkpoint::new(&net(), None);
        let json = ck.to_json().unwrap();
        assert!(matches!(
            Checkpoint::decode(&json.as_bytes()[..json.len() / 2]),
            Err(IoError::Corrupt(_))
        ));
        let bin = ck.to_binary();
        assert!(matches!(
            Checkpoint::decode(&bin[..bin.len() - 3]),
            Err(IoError::Corrupt(_))
        ));
        let old = json.replace(CHECKPOINT_FORMAT, "kanode-ckpt-v0");
        assert!(matches!(
            Checkpoint::decode(old.as_bytes()),
            Err(IoError::VersionMismatch { .. })
        ));
        let mut v2 = bin.clone();
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::decode(&v2),
            Err(IoError::VersionMismatch { .. })
        ));
        let mut short = ck.clone();
        short.params.pop();
        assert!(matches!(
            Checkpoint::decode(short.to_json().unwrap().as_bytes()),
            Err(IoError::DimensionMismatch { .. })
        ));
        let mut nan = ck;
        nan.params[3] = f64::NAN;
        assert!(matches!(nan.to_json(), Err(IoError::NonFinite { index: 3 })));
    }

    #[test]
    fn loss_csv_round_trip() {
        let h = vec![
            LossReport {
                epoch: 0,
                train_mse: 0.1 + 0.2,
                test_mse: Some(1.0 / 3.0),
                l1: 12.5,
                total: 0.3,
                lr: 0.01,
                wall_ms: 7,
            },
            LossReport {
                epoch: 1,
                train_mse: 1e-300,
                test_mse: None,
                l1: 0.0,
                total: 1e-300,
                lr: 0.005,
                wall_ms: 9,
            },
        ];
        let text = loss_csv(&h);
        assert!(text.starts_with(LOSS_HEADER));
        assert_eq!(parse_loss_csv(&text).unwrap(), h);
        assert!(matches!(
            parse_loss_csv("epoch,oops\n"),
            Err(IoError::Csv { line: 1, .. })
        ));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let t = Trajectory {
            times: vec![0.0, 0.1],
            states: vec![1.0, -2.5e-17, std::f64::consts::PI, 7.0],
            dim: 2,
            stats: SolveStats::default(),
        };
        let back = parse_trajectory_csv(&trajectory_csv(&t)).unwrap();
        assert_eq!(back.times, t.times);
        assert_eq!(back.states, t.states);
    }

    #[test]
    fn minimal_config_is_defaulted() {
        let cfg = parse_config(r#"{"id": "lv", "epochs": 50}"#).unwrap();
        let mut expect = ExperimentConfig::defaults(ExperimentId::Lv);
        expect.train.epochs = 50;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn all_errors_are_reported() {
        let errs = parse_config(r#"{"id": "lv", "epocs": 5, "lr": -1, "beta1": "x"}"#)
            .unwrap_err()
            .0;
        assert!(errs.contains(&ConfigError::UnknownKey("epocs".into())));
        assert!(errs.iter().any(|e| matches!(e, ConfigError::Invalid { key, .. } if key == "lr")));
        assert!(errs.iter().any(|e| matches!(e, ConfigError::WrongType { key, .. } if key == "beta1")));
        assert!(errs.len() >= 3);
    }

    #[test]
    fn architecture_dimension_checked() {
        let text = r#"{"id": "burgers",
            "architecture": {"kind": "kan", "layers": [[402, 10, 10], [10, 402, 10]]}}"#;
        let errs = parse_config(text).unwrap_err().0;
        assert_eq!(
            errs,
            vec![ConfigError::DimensionMismatch {
                key: "architecture".into(),
                expected: (41, 41),
                got: (402, 402),
            }]
        );
    }

    #[test]
    fn config_json_round_trip() {
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig::defaults(id);
            let text = config_to_json(&cfg).to_string();
            assert_eq!(parse_config(&text).unwrap(), cfg, "{}", id.as_str());
        }
    }

    #[test]
    fn syntax_and_shape_errors() {
        assert!(matches!(
            parse_config("{").unwrap_err().0[0],
            ConfigError::Syntax(_)
        ));
        assert_eq!(parse_config("[1]").unwrap_err().0, vec![ConfigError::NotAnObject]);
        assert_eq!(
            parse_config("{}").unwrap_err().0,
            vec![ConfigError::MissingKey("id".into())]
        );
        assert_eq!(
            parse_config(r#"{"id": "heat"}"#).unwrap_err().0,
            vec![ConfigError::UnknownExperiment("heat".into())]
        );
    }

    #[test]
    fn manifest_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        write_file(&f, "abc").unwrap();
        let m = RunManifest::build(dir.path(), json!({}), 1, now_rfc3339(), &[f]).unwrap();
        assert_eq!(m.files[0].path, "a.txt");
        assert_eq!(
            m.files[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let p = m.write(dir.path()).unwrap();
        let back: RunManifest = serde_json::from_str(&read_text(&p).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
