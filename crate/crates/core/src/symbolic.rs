//! Symbolic extraction from trained networks.
//!
//! Per-activation regression fits one edge function `phi(x)` with best-subset least
//! squares over a fixed grammar of one-variable basis terms and reports the Pareto front
//! of (complexity, loss). Global regression fits polynomial right-hand sides with
//! sequentially thresholded least squares.
//!
//! Complexity counts expression-tree nodes: every term carries its coefficient (`c*x` is
//! three nodes, `c*x^2` five), and joining `k` terms adds `k - 1` `+` nodes.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kan::{KanError, Network, NetworkKind};
use crate::odeint::OdeSystem;

/// Minimum number of samples accepted by [`fit_activation`].
pub const MIN_SAMPLES: usize = 10;
/// Default STLSQ threshold for [`fit_global`].
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 0.05;
/// Rational terms are dropped when the sample range comes this close to 0.
pub const POLE_GUARD: f64 = 1e-3;
/// Relative singular-value cutoff below which a design column counts as dependent.
const RANK_TOL: f64 = 1e-10;
/// Losses below this fraction of the mean squared target are round-off.
const EXACT_FIT_REL: f64 = 1e-20;
const GOLDEN_ITERS: usize = 60;
const DESCENT_SWEEPS: usize = 4;
const RESTARTS: usize = 3;
const LOG_C_RANGE: (f64, f64) = (-9.2, 9.2);
const SHIFT_RANGE: (f64, f64) = (-20.0, 20.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("inputs and outputs differ in length ({inputs} vs {outputs})")]
    LengthMismatch { inputs: usize, outputs: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("grammar has no usable basis terms")]
    EmptyGrammar,
    #[error("library cannot explain data (output {0})")]
    LibraryCannotExplain(usize),
    #[error("library terms are linearly dependent on the sample set")]
    DependentLibrary,
    #[error("{expr} is undefined at x = {x}")]
    Domain { expr: String, x: f64 },
    #[error("symbolic layer shape does not match network: {0}")]
    Shape(String),
    #[error("network: {0}")]
    Network(#[from] KanError),
}

pub type Result<T> = std::result::Result<T, SymbolicError>;

/// Basis term families of the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BasisKind {
    Const,
    X,
    X2,
    X3,
    InvX,
    /// `1 / (x^2 + c)`, `c > 0` fitted.
    InvQuad,
    Sin,
    Cos,
    Exp,
    /// `x / (x^2 + d x + e)` with `e > d^2 / 4` fitted, so there is no real pole.
    Rational,
}

impl BasisKind {
    pub const ALL: [BasisKind; 10] = [
        BasisKind::Const,
        BasisKind::X,
        BasisKind::X2,
        BasisKind::X3,
        BasisKind::InvX,
        BasisKind::InvQuad,
        BasisKind::Sin,
        BasisKind::Cos,
        BasisKind::Exp,
        BasisKind::Rational,
    ];

    /// Tree nodes of `coef * term`.
    pub fn complexity(self) -> usize {
        match self {
            BasisKind::Const => 1,
            BasisKind::X | BasisKind::InvX => 3,
            BasisKind::X2 | BasisKind::X3 => 5,
            BasisKind::Sin | BasisKind::Cos | BasisKind::Exp => 4,
            BasisKind::InvQuad => 7,
            BasisKind::Rational => 13,
        }
    }

    fn ops(self) -> &'static [Op] {
        match self {
            BasisKind::Const => &[],
            BasisKind::X | BasisKind::X2 | BasisKind::X3 => &[Op::Mul],
            BasisKind::InvX => &[Op::Div],
            BasisKind::InvQuad | BasisKind::Rational => &[Op::Add, Op::Mul, Op::Div],
            BasisKind::Sin => &[Op::Mul, Op::Sin],
            BasisKind::Cos => &[Op::Mul, Op::Cos],
            BasisKind::Exp => &[Op::Mul, Op::Exp],
        }
    }

    fn inner_params(self) -> usize {
        match self {
            BasisKind::InvQuad => 1,
            BasisKind::Rational => 2,
            _ => 0,
        }
    }

    fn has_pole_at_zero(self) -> bool {
        self == BasisKind::InvX
    }
}

/// Operators the grammar may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisGrammar {
    pub bases: Vec<BasisKind>,
    pub ops: Vec<Op>,
}

impl Default for BasisGrammar {
    fn default() -> Self {
        Self {
            bases: BasisKind::ALL.to_vec(),
            ops: vec![Op::Add, Op::Sub, Op::Mul, Op::Div, Op::Sin, Op::Cos, Op::Exp],
        }
    }
}

impl BasisGrammar {
    /// `{1, x, x^2, x^3}` with arithmetic operators only.
    pub fn polynomial() -> Self {
        Self {
            bases: vec![BasisKind::Const, BasisKind::X, BasisKind::X2, BasisKind::X3],
            ops: vec![Op::Add, Op::Sub, Op::Mul],
        }
    }

    /// Bases whose operators are all allowed, minus `1/x` when the samples approach 0.
    pub fn usable(&self, lo: f64, hi: f64) -> Vec<BasisKind> {
        let straddles = lo <= POLE_GUARD && hi >= -POLE_GUARD;
        let mut out: Vec<BasisKind> = self
            .bases
            .iter()
            .copied()
            .filter(|b| b.ops().iter().all(|op| self.ops.contains(op)))
            .filter(|b| !(straddles && b.has_pole_at_zero()))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// A basis term with its fitted inner parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Basis {
    Const,
    X,
    X2,
    X3,
    InvX,
    InvQuad { c: f64 },
    Sin,
    Cos,
    Exp,
    Rational { d: f64, e: f64 },
}

impl Basis {
    pub fn kind(&self) -> BasisKind {
        match self {
            Basis::Const => BasisKind::Const,
            Basis::X => BasisKind::X,
            Basis::X2 => BasisKind::X2,
            Basis::X3 => BasisKind::X3,
            Basis::InvX => BasisKind::InvX,
            Basis::InvQuad { .. } => BasisKind::InvQuad,
            Basis::Sin => BasisKind::Sin,
            Basis::Cos => BasisKind::Cos,
            Basis::Exp => BasisKind::Exp,
            Basis::Rational { .. } => BasisKind::Rational,
        }
    }

    /// Value of the bare term; `None` outside its domain.
    pub fn eval(&self, x: f64) -> Option<f64> {
        let v = match *self {
            Basis::Const => 1.0,
            Basis::X => x,
            Basis::X2 => x * x,
            Basis::X3 => x * x * x,
            Basis::InvX => {
                if x == 0.0 {
                    return None;
                }
                1.0 / x
            }
            Basis::InvQuad { c } => 1.0 / (x * x + c),
            Basis::Sin => x.sin(),
            Basis::Cos => x.cos(),
            Basis::Exp => x.exp(),
            Basis::Rational { d, e } => x / (x * x + d * x + e),
        };
        v.is_finite().then_some(v)
    }

    fn render(&self, var: &str) -> String {
        match *self {
            Basis::Const => String::new(),
            Basis::X => var.to_string(),
            Basis::X2 => format!("{var}^2"),
            Basis::X3 => format!("{var}^3"),
            Basis::InvX => format!("(1/{var})"),
            Basis::InvQuad { c } => format!("(1/({var}^2 + {}))", fmt_coef(c)),
            Basis::Sin => format!("sin({var})"),
            Basis::Cos => format!("cos({var})"),
            Basis::Exp => format!("exp({var})"),
            Basis::Rational { d, e } => {
                format!("({var}/({var}^2 + {}*{var} + {}))", fmt_coef(d), fmt_coef(e))
            }
        }
    }

    fn from_inner(kind: BasisKind, p: &[f64]) -> Basis {
        match kind {
            BasisKind::Const => Basis::Const,
            BasisKind::X => Basis::X,
            BasisKind::X2 => Basis::X2,
            BasisKind::X3 => Basis::X3,
            BasisKind::InvX => Basis::InvX,
            BasisKind::InvQuad => Basis::InvQuad { c: p[0].exp() },
            BasisKind::Sin => Basis::Sin,
            BasisKind::Cos => Basis::Cos,
            BasisKind::Exp => Basis::Exp,
            BasisKind::Rational => Basis::Rational {
                d: p[0],
                e: 0.25 * p[0] * p[0] + p[1].exp(),
            },
        }
    }
}

fn fmt_coef(c: f64) -> String {
    format!("{c:.6}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub basis: Basis,
    pub coef: f64,
}

/// A sum of weighted basis terms in one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicFit {
    pub terms: Vec<Term>,
    pub complexity: usize,
    /// Mean squared residual on the fit samples.
    pub loss: f64,
}

impl SymbolicFit {
    pub fn new(terms: Vec<Term>, loss: f64) -> Self {
        let complexity = expression_complexity(&terms);
        Self {
            terms,
            complexity,
            loss,
        }
    }

    pub fn kinds(&self) -> Vec<BasisKind> {
        let mut k: Vec<BasisKind> = self.terms.iter().map(|t| t.basis.kind()).collect();
        k.sort();
        k
    }

    pub fn coef(&self, kind: BasisKind) -> Option<f64> {
        self.terms
            .iter()
            .find(|t| t.basis.kind() == kind)
            .map(|t| t.coef)
    }

    /// Infix rendering with explicit `*` and parentheses.
    pub fn render(&self, var: &str) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut s = String::new();
        for (i, t) in self.terms.iter().enumerate() {
            let body = t.basis.render(var);
            let mag = if i == 0 { t.coef } else { t.coef.abs() };
            if i > 0 {
                s.push_str(if t.coef < 0.0 { " - " } else { " + " });
            }
            if body.is_empty() {
                s.push_str(&fmt_coef(mag));
            } else {
                let _ = write!(s, "{}*{}", fmt_coef(mag), body);
            }
        }
        s
    }
}

pub fn expression_complexity(terms: &[Term]) -> usize {
    if terms.is_empty() {
        return 1;
    }
    terms.iter().map(|t| t.basis.kind().complexity()).sum::<usize>() + terms.len() - 1
}

/// Evaluates a fitted expression; errors where a term is undefined.
pub fn evaluate_expression(fit: &SymbolicFit, x: f64) -> Result<f64> {
    let mut acc = 0.0;
    for t in &fit.terms {
        match t.basis.eval(x) {
            Some(v) => acc += t.coef * v,
            None => {
                return Err(SymbolicError::Domain {
                    expr: fit.render("x"),
                    x,
                })
            }
        }
    }
    Ok(acc)
}

/// Least-squares solution of `a c = y`. Columns that are numerically dependent on
/// earlier columns are dropped; their indices are returned alongside the coefficients
/// (which are zero there).
fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> (Vec<f64>, Vec<usize>) {
    let ncols = a.ncols();
    let scales: Vec<f64> = (0..ncols)
        .map(|j| {
            let n = a.column(j).norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = a.clone();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let mut keep: Vec<usize> = (0..ncols).collect();
    let mut dropped = Vec::new();
    if !full_rank(&scaled) {
        keep.clear();
        for j in 0..ncols {
            let mut trial = keep.clone();
            trial.push(j);
            if a.column(j).norm() > 0.0 && full_rank(&scaled.select_columns(&trial)) {
                keep = trial;
            } else {
                dropped.push(j);
            }
        }
    }
    let mut coefs = vec![0.0; ncols];
    if keep.is_empty() {
        return (coefs, dropped);
    }
    let sub = scaled.select_columns(&keep);
    let svd = sub.svd(true, true);
    let sol = svd
        .solve(y, RANK_TOL)
        .expect("SVD computed with both factors");
    for (k, &j) in keep.iter().enumerate() {
        coefs[j] = sol[k] / scales[j];
    }
    (coefs, dropped)
}

fn full_rank(a: &DMatrix<f64>) -> bool {
    if a.ncols() > a.nrows() {
        return false;
    }
    let sv = a.singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > RANK_TOL * max
}

fn mean_sq(r: &DVector<f64>) -> f64 {
    r.norm_squared() / r.len() as f64
}

fn golden<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..GOLDEN_ITERS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

struct SubsetFit {
    bases: Vec<Basis>,
    coefs: Vec<f64>,
    dropped: Vec<usize>,
    loss: f64,
}

fn fit_fixed(xs: &[f64], ys: &DVector<f64>, bases: &[Basis]) -> Option<SubsetFit> {
    let mut a = DMatrix::zeros(xs.len(), bases.len());
    for (j, b) in bases.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            a[(i, j)] = b.eval(x)?;
        }
    }
    let (coefs, dropped) = lstsq(&a, ys);
    let resid = ys - &a * DVector::from_column_slice(&coefs);
    let loss = mean_sq(&resid);
    loss.is_finite().then(|| SubsetFit {
        bases: bases.to_vec(),
        coefs,
        dropped,
        loss,
    })
}

fn inner_bounds(kind: BasisKind) -> Vec<(f64, f64)> {
    match kind {
        BasisKind::InvQuad => vec![LOG_C_RANGE],
        BasisKind::Rational => vec![SHIFT_RANGE, LOG_C_RANGE],
        _ => vec![],
    }
}

fn build_bases(kinds: &[BasisKind], inner: &[f64]) -> Vec<Basis> {
    let mut off = 0;
    kinds
        .iter()
        .map(|&k| {
            let n = k.inner_params();
            let b = Basis::from_inner(k, &inner[off..off + n]);
            off += n;
            b
        })
        .collect()
}

/// Best least-squares fit of one subset, optimizing nonlinear inner parameters by
/// coordinate-wise golden-section search.
fn fit_subset(xs: &[f64], ys: &DVector<f64>, kinds: &[BasisKind]) -> Option<SubsetFit> {
    let bounds: Vec<(f64, f64)> = kinds.iter().flat_map(|&k| inner_bounds(k)).collect();
    if bounds.is_empty() {
        return fit_fixed(xs, ys, &build_bases(kinds, &[]));
    }
    let loss_at = |p: &[f64]| {
        fit_fixed(xs, ys, &build_bases(kinds, p))
            .map(|f| f.loss)
            .unwrap_or(f64::INFINITY)
    };
    let restarts = if kinds.contains(&BasisKind::Rational) {
        RESTARTS
    } else {
        1
    };
    let sweeps = if bounds.len() == 1 { 1 } else { DESCENT_SWEEPS };
    let mut best: Option<SubsetFit> = None;
    for r in 0..restarts {
        let mut p: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * (r as f64 + 1.0) / (restarts as f64 + 1.0))
            .collect();
        for _ in 0..sweeps {
            for j in 0..p.len() {
                let (lo, hi) = bounds[j];
                let mut q = p.clone();
                p[j] = golden(
                    |v| {
                        q[j] = v;
                        loss_at(&q)
                    },
                    lo,
                    hi,
                );
            }
        }
        if let Some(f) = fit_fixed(xs, ys, &build_bases(kinds, &p)) {
            if best.as_ref().is_none_or(|b| f.loss < b.loss) {
                best = Some(f);
            }
        }
    }
    best
}

fn subsets(n: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 1u32..(1u32 << n) {
        if (mask.count_ones() as usize) <= max_size {
            out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

fn check_samples(xs: &[f64], ys: &[f64], needed: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(SymbolicError::LengthMismatch {
            inputs: xs.len(),
            outputs: ys.len(),
        });
    }
    if xs.len() < needed {
        return Err(SymbolicError::TooFewSamples {
            needed,
            got: xs.len(),
        });
    }
    if let Some(i) = xs
        .iter()
        .zip(ys)
        .position(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(SymbolicError::NonFinite(i));
    }
    Ok(())
}

/// Lowest-loss fit at each complexity, reduced to the Pareto front: ordered by
/// increasing complexity with strictly decreasing loss.
pub fn fit_activation(
    xs: &[f64],
    ys: &[f64],
    grammar: &BasisGrammar,
    max_terms: usize,
) -> Result<Vec<SymbolicFit>> {
    check_samples(xs, ys, MIN_SAMPLES)?;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kinds = grammar.usable(lo, hi);
    if kinds.is_empty() || max_terms == 0 {
        return Err(SymbolicError::EmptyGrammar);
    }
    let y = DVector::from_column_slice(ys);
    let mut candidates: Vec<SymbolicFit> = Vec::new();
    for subset in subsets(kinds.len(), max_terms) {
        let chosen: Vec<BasisKind> = subset.iter().map(|&i| kinds[i]).collect();
        let Some(fit) = fit_subset(xs, &y, &chosen) else {
            continue;
        };
        if !fit.dropped.is_empty() {
            let names: Vec<String> = fit
                .dropped
                .iter()
                .map(|&j| format!("{:?}", fit.bases[j].kind()))
                .collect();
            log::warn!("dropping dependent terms {names:?} from subset {chosen:?}");
        }
        let terms: Vec<Term> = fit
            .bases
            .iter()
            .zip(&fit.coefs)
            .enumerate()
            .filter(|(j, _)| !fit.dropped.contains(j))
            .map(|(_, (b, c))| Term {
                basis: *b,
                coef: *c,
            })
            .collect();
        candidates.push(SymbolicFit::new(terms, fit.loss));
    }
    let power = ys.iter().map(|v| v * v).sum::<f64>() / ys.len() as f64;
    Ok(pareto_front_above(candidates, EXACT_FIT_REL * power))
}

/// Keeps, in order of complexity, every fit whose loss is strictly below all simpler ones.
pub fn pareto_front(fits: Vec<SymbolicFit>) -> Vec<SymbolicFit> {
    pareto_front_above(fits, 0.0)
}

/// As [`pareto_front`], but the front ends at the first fit with loss at or below `floor`.
pub fn pareto_front_above(mut fits: Vec<SymbolicFit>, floor: f64) -> Vec<SymbolicFit> {
    fits.sort_by(|a, b| {
        a.complexity
            .cmp(&b.complexity)
            .then(a.loss.total_cmp(&b.loss))
    });
    let mut front: Vec<SymbolicFit> = Vec::new();
    for f in fits {
        let beats = front
            .last()
            .is_none_or(|p| f.loss < p.loss && p.loss > floor);
        if beats {
            front.push(f);
        }
    }
    front
}

/// Picks the front member with the steepest log-loss drop per unit of complexity among
/// fits whose loss is within 1.5x of the most accurate one.
pub fn select_best(front: &[SymbolicFit]) -> Option<&SymbolicFit> {
    const FLOOR: f64 = 1e-300;
    let min_loss = front.iter().map(|f| f.loss).fold(f64::INFINITY, f64::min);
    let mut best: Option<(&SymbolicFit, f64)> = None;
    for (i, f) in front.iter().enumerate() {
        let score = if i == 0 {
            0.0
        } else {
            let p = &front[i - 1];
            let dc = (f.complexity - p.complexity).max(1) as f64;
            -((f.loss.max(FLOOR)).ln() - (p.loss.max(FLOOR)).ln()) / dc
        };
        if f.loss > 1.5 * min_loss.max(FLOOR) {
            continue;
        }
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((f, score));
        }
    }
    best.map(|(f, _)| f)
}

/// Monomial `prod_k u_k^{exponents[k]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: Vec<u32>,
}

impl Monomial {
    pub fn eval(&self, u: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(u)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn render(&self, vars: &[String]) -> String {
        let parts: Vec<String> = self
            .exponents
            .iter()
            .zip(vars)
            .filter(|(e, _)| **e > 0)
            .map(|(e, v)| {
                if *e == 1 {
                    v.clone()
                } else {
                    format!("{v}^{e}")
                }
            })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }
}

/// Candidate terms for global regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLibrary {
    pub dim: usize,
    pub terms: Vec<Monomial>,
}

impl CandidateLibrary {
    /// Every monomial of total degree at most `degree`, ordered by degree and then
    /// lexicographically with earlier variables first.
    pub fn polynomial(dim: usize, degree: u32) -> Self {
        let mut terms = Vec::new();
        for d in 0..=degree {
            let mut level = Vec::new();
            collect_monomials(dim, d, &mut vec![0; dim], 0, &mut level);
            level.reverse();
            terms.extend(level);
        }
        Self { dim, terms }
    }

    /// `{1, x, y, x^2, x*y, y^2}` for two-state systems.
    pub fn quadratic_2d() -> Self {
        Self::polynomial(2, 2)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, exponents: &[u32]) -> Option<usize> {
        self.terms.iter().position(|m| m.exponents == exponents)
    }

    pub fn row(&self, u: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|m| m.eval(u)).collect()
    }
}

fn collect_monomials(dim: usize, left: u32, cur: &mut Vec<u32>, k: usize, out: &mut Vec<Monomial>) {
    if k + 1 == dim {
        cur[k] = left;
        out.push(Monomial {
            exponents: cur.clone(),
        });
        cur[k] = 0;
        return;
    }
    for e in 0..=left {
        cur[k] = e;
        collect_monomials(dim, left - e, cur, k + 1, out);
    }
    cur[k] = 0;
}

/// Sparse polynomial coefficients, `coefs[output][term]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFit {
    pub library: CandidateLibrary,
    pub coefs: Vec<Vec<f64>>,
}

impl GlobalFit {
    pub fn eval(&self, u: &[f64], out: &mut [f64]) {
        let row = self.library.row(u);
        for (o, c) in out.iter_mut().zip(&self.coefs) {
            *o = c.iter().zip(&row).map(|(a, b)| a * b).sum();
        }
    }

    pub fn coef(&self, output: usize, exponents: &[u32]) -> f64 {
        self.library
            .index_of(exponents)
            .map(|j| self.coefs[output][j])
            .unwrap_or(0.0)
    }

    pub fn render(&self, vars: &[String]) -> Vec<String> {
        self.coefs
            .iter()
            .enumerate()
            .map(|(o, c)| {
                let mut s = format!("d{}/dt =", vars.get(o).map_or("?", |v| v.as_str()));
                let mut first = true;
                for (m, &v) in self.library.terms.iter().zip(c) {
                    if v == 0.0 {
                        continue;
                    }
                    let sign = if v < 0.0 { "-" } else { "+" };
                    if first {
                        let lead = if v < 0.0 { "-" } else { "" };
                        let _ = write!(s, " {lead}{}*{}", fmt_coef(v.abs()), m.render(vars));
                    } else {
                        let _ = write!(s, " {sign} {}*{}", fmt_coef(v.abs()), m.render(vars));
                    }
                    first = false;
                }
                if first {
                    s.push_str(" 0");
                }
                s
            })
            .collect()
    }
}

impl OdeSystem for GlobalFit {
    fn dim(&self) -> usize {
        self.library.dim
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        self.eval(u, du);
    }
}

/// Sequentially thresholded least squares of `outputs` on the library evaluated at
/// `inputs`, one coefficient vector per output dimension.
pub fn fit_global(
    inputs: &[Vec<f64>],
    outputs: &[Vec<f64>],
    library: &CandidateLibrary,
    sparsity_threshold: f64,
) -> Result<GlobalFit> {
    if inputs.len() != outputs.len() {
        return Err(SymbolicError::LengthMismatch {
            inputs: inputs.len(),
            outputs: outputs.len(),
        });
    }
    let needed = 5 * library.len();
    if inputs.len() < needed {
        return Err(SymbolicError::TooFewSamples {
            needed,
            got: inputs.len(),
        });
    }
    let out_dim = outputs.first().map_or(0, |o| o.len());
    for (i, (u, y)) in inputs.iter().zip(outputs).enumerate() {
        if u.len() != library.dim || y.len() != out_dim {
            return Err(SymbolicError::LengthMismatch {
                inputs: u.len(),
                outputs: y.len(),
            });
        }
        if u.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(SymbolicError::NonFinite(i));
        }
    }
    let n = inputs.len();
    let m = library.len();
    let mut a = DMatrix::zeros(n, m);
    for (i, u) in inputs.iter().enumerate() {
        for (j, v) in library.row(u).into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let (_, dropped) = lstsq(&a, &DVector::zeros(n));
    if !dropped.is_empty() {
        return Err(SymbolicError::DependentLibrary);
    }
    let mut coefs = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let y = DVector::from_iterator(n, outputs.iter().map(|r| r[o]));
        let mut active: Vec<usize> = (0..m).collect();
        let mut c = vec![0.0; m];
        loop {
            c.iter_mut().for_each(|v| *v = 0.0);
            if !active.is_empty() {
                let (sol, _) = lstsq(&a.select_columns(&active), &y);
                for (k, &j) in active.iter().enumerate() {
                    c[j] = sol[k];
                }
            }
            let next: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&j| c[j].abs() >= sparsity_threshold)
                .collect();
            if next == active {
                break;
            }
            active = next;
        }
        if active.is_empty() && y.norm() > 0.0 {
            return Err(SymbolicError::LibraryCannotExplain(o));
        }
        coefs.push(c);
    }
    Ok(GlobalFit {
        library: library.clone(),
        coefs,
    })
}

/// Per-layer, per-input-node `(min, max)` of the raw values each KAN layer sees on
/// `samples`.
pub fn input_ranges(net: &Network, samples: &[Vec<f64>]) -> Result<Vec<Vec<(f64, f64)>>> {
    if net.kind() != NetworkKind::Kan {
        return Err(KanError::NotKan.into());
    }
    if samples.is_empty() {
        return Err(KanError::EmptyInputs.into());
    }
    let mut ranges: Vec<Vec<(f64, f64)>> = net
        .layers()
        .iter()
        .map(|l| vec![(f64::INFINITY, f64::NEG_INFINITY); l.in_dim()])
        .collect();
    for x in samples {
        let acts = net.layer_inputs(x)?;
        for (k, r) in ranges.iter_mut().enumerate() {
            for (b, v) in acts[k].iter().enumerate() {
                r[b].0 = r[b].0.min(*v);
                r[b].1 = r[b].1.max(*v);
            }
        }
    }
    Ok(ranges)
}

/// Symbolic fit report for one network edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFit {
    pub layer: usize,
    pub out_node: usize,
    pub in_node: usize,
    pub range: (f64, f64),
    pub front: Vec<SymbolicFit>,
    pub best: SymbolicFit,
    /// RMS deviation of `best` from the edge activation on the fit samples.
    pub rms: f64,
}

/// Fits every edge whose weights are not all zero, sampling `samples` points uniformly
/// over the recorded input range of its source node.
pub fn fit_network(
    net: &Network,
    ranges: &[Vec<(f64, f64)>],
    samples: usize,
    grammar: &BasisGrammar,
    max_terms: usize,
) -> Result<Vec<EdgeFit>> {
    if net.kind() != NetworkKind::Kan {
        return Err(KanError::NotKan.into());
    }
    if ranges.len() != net.layers().len() {
        return Err(SymbolicError::Shape(format!(
            "{} range layers for {} network layers",
            ranges.len(),
            net.layers().len()
        )));
    }
    let mut out = Vec::new();
    for (k, r) in ranges.iter().enumerate() {
        let layer = net.kan_layer(k)?;
        if r.len() != layer.in_dim {
            return Err(SymbolicError::Shape(format!(
                "layer {k}: {} ranges for {} inputs",
                r.len(),
                layer.in_dim
            )));
        }
        for alpha in 0..layer.out_dim {
            for beta in 0..layer.in_dim {
                if edge_is_zero(layer, alpha, beta) {
                    continue;
                }
                let (lo, hi) = r[beta];
                let xs = linspace(lo, hi, samples.max(MIN_SAMPLES));
                let ys = net.activation_curve(k, alpha, beta, &xs)?;
                let front = fit_activation(&xs, &ys, grammar, max_terms)?;
                let best = select_best(&front).expect("front is nonempty").clone();
                out.push(EdgeFit {
                    layer: k,
                    out_node: alpha,
                    in_node: beta,
                    range: (lo, hi),
                    rms: best.loss.sqrt(),
                    front,
                    best,
                });
            }
        }
    }
    Ok(out)
}

fn edge_is_zero(layer: &crate::kan::KanLayer, alpha: usize, beta: usize) -> bool {
    let off = (alpha * layer.in_dim + beta) * layer.grid_size;
    layer.w_rbf[off..off + layer.grid_size]
        .iter()
        .all(|&w| w == 0.0)
        && layer.w_base[alpha * layer.in_dim + beta] == 0.0
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// A KAN whose edge functions are replaced by symbolic expressions. Missing edges are
/// zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicKan {
    /// `(in_dim, out_dim)` per layer.
    pub shapes: Vec<(usize, usize)>,
    /// `edges[layer][out * in_dim + in]`.
    pub edges: Vec<Vec<Option<SymbolicFit>>>,
}

impl SymbolicKan {
    pub fn from_fits(net: &Network, fits: &[EdgeFit]) -> Result<Self> {
        if net.kind() != NetworkKind::Kan {
            return Err(KanError::NotKan.into());
        }
        let shapes: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .map(|l| (l.in_dim(), l.out_dim()))
            .collect();
        let mut edges: Vec<Vec<Option<SymbolicFit>>> =
            shapes.iter().map(|(i, o)| vec![None; i * o]).collect();
        for f in fits {
            let Some(&(in_dim, out_dim)) = shapes.get(f.layer) else {
                return Err(SymbolicError::Shape(format!("no layer {}", f.layer)));
            };
            if f.in_node >= in_dim || f.out_node >= out_dim {
                return Err(SymbolicError::Shape(format!(
                    "edge ({}, {}) outside a {out_dim}x{in_dim} layer",
                    f.out_node, f.in_node
                )));
            }
            edges[f.layer][f.out_node * in_dim + f.in_node] = Some(f.best.clone());
        }
        Ok(Self { shapes, edges })
    }

    pub fn input_dim(&self) -> usize {
        self.shapes.first().map_or(0, |s| s.0)
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.1)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(KanError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            }
            .into());
        }
        let mut cur = x.to_vec();
        for ((in_dim, out_dim), edges) in self.shapes.iter().zip(&self.edges) {
            let mut next = vec![0.0; *out_dim];
            for (alpha, n) in next.iter_mut().enumerate() {
                for (beta, &v) in cur.iter().enumerate() {
                    if let Some(f) = &edges[alpha * in_dim + beta] {
                        *n += evaluate_expression(f, v)?;
                    }
                }
            }
            cur = next;
        }
        Ok(cur)
    }
}

impl OdeSystem for SymbolicKan {
    fn dim(&self) -> usize {
        self.input_dim()
    }
    fn rhs(&self, _t: f64, u: &[f64], _theta: &[f64], du: &mut [f64]) {
        match self.eval(u) {
            Ok(v) => du.copy_from_slice(&v),
            Err(_) => du.fill(f64::NAN),
        }
    }
}

/// Plain-text table of a Pareto front.
pub fn front_table(front: &[SymbolicFit], var: &str) -> String {
    let mut s = String::from("complexity  loss                    expression\n");
    for f in front {
        let _ = writeln!(s, "{:<10}  {:<22.16e}  {}", f.complexity, f.loss, f.render(var));
    }
    s
}
