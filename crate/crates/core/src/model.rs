//! Problem definitions.
//!
//! A problem is the tuple (f, λ, Q, ℓ, h, A, T) plus declared bound and
//! Lipschitz constants and a *lift*: a list of path features (terminal value,
//! running supremum, running integral per component) whose values at time `t`
//! depend only on the stopped path `x(·∧t)`. All coefficients are expressions
//! over `(t, feat[..], ctrl[..])`, so they are non-anticipating by
//! construction and the solver can work on the finite-dimensional lifted
//! state. The lift must contain the terminal value of every state component;
//! running features add path-dependence on top.
//!
//! The mark kernel has finite support: each atom is a mark expression with a
//! weight expression. Atoms are evaluated, normalized, and kept in sorted
//! mark order, which fixes the inverse-CDF sampling layout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::expr::{EvalCtx, Expr};
use crate::path::{CadlagPath, Mark, PathBuilder};
use crate::rng::Stream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    TerminalValue,
    RunningMax,
    RunningIntegral,
}

/// One lifted feature: kind, state component, and the grid declaration used
/// by the solver (bounds and node count).
#[derive(Debug, Clone, PartialEq)]
pub struct PathFeature {
    pub kind: FeatureKind,
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub name: String,
    pub consts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    pub c_f: f64,
    pub c_lambda: f64,
    pub l_f: f64,
    pub l_q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelAtom {
    pub mark: Vec<Expr>,
    pub weight: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkDistribution {
    pub atoms: Vec<KernelAtom>,
    pub normalize: bool,
}

/// Immutable problem data; shared freely across worker threads.
#[derive(Debug, Clone)]
pub struct ProblemData<T> {
    pub name: String,
    pub dim: usize,
    pub horizon: T,
    pub controls: Vec<ControlSpec>,
    pub default_control: usize,
    pub constants: Constants,
    pub lift: Vec<PathFeature>,
    pub drift: Vec<Expr>,
    pub intensity: Expr,
    pub running_cost: Expr,
    pub terminal_cost: Expr,
    pub kernel: MarkDistribution,
    /// For each state component, the index of its terminal-value feature.
    terminal_feat: Vec<usize>,
    canonical: String,
    hash: String,
}

impl<T: Scalar> ProblemData<T> {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text)
            .map_err(|e| CoreError::Schema(format!("problem file: {e}")))?;
        Self::from_file(file)
    }

    /// Canonicalized problem document; byte-stable across runs.
    pub fn canonical_json(&self) -> &str {
        &self.canonical
    }

    /// SHA-256 of the canonical document, embedded in every artifact.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn control_index(&self, name: &str) -> Result<usize> {
        self.controls
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| CoreError::UnknownControl(name.to_string()))
    }

    pub fn n_features(&self) -> usize {
        self.lift.len()
    }

    /// Index of the terminal-value feature of state component `c`.
    pub fn terminal_feature(&self, c: usize) -> usize {
        self.terminal_feat[c]
    }

    /// State vector read out of a lifted feature vector.
    pub fn state_of_feats(&self, feats: &[T]) -> Vec<T> {
        self.terminal_feat.iter().map(|&i| feats[i]).collect()
    }

    fn ctx<'a>(&'a self, time: T, feats: &'a [T], control: usize) -> EvalCtx<'a, T> {
        EvalCtx { time, feats, ctrl: &self.controls[control].consts }
    }

    /// Drift, intensity and running cost at `(t, feats, a)`.
    pub fn eval_coeffs(&self, t: T, feats: &[T], control: usize) -> Result<(Vec<T>, T, T)> {
        let ctx = self.ctx(t, feats, control);
        let mut f = Vec::with_capacity(self.dim);
        for e in &self.drift {
            f.push(e.eval(&ctx)?);
        }
        let lam = self.intensity.eval(&ctx)?;
        if !lam.is_finite() || lam < T::zero() {
            return Err(CoreError::AssumptionViolation(format!(
                "intensity {} at t = {} is not a nonnegative real",
                lam,
                t.as_f64()
            )));
        }
        let cost = self.running_cost.eval(&ctx)?;
        Ok((f, lam, cost))
    }

    /// Drift alone; used by integrator stages where λ and ℓ are not needed.
    pub fn eval_drift(&self, t: T, feats: &[T], control: usize) -> Result<Vec<T>> {
        let ctx = self.ctx(t, feats, control);
        let mut f = Vec::with_capacity(self.dim);
        for e in &self.drift {
            f.push(e.eval(&ctx)?);
        }
        Ok(f)
    }

    /// Terminal cost from the lifted features at the horizon.
    pub fn terminal_cost_of(&self, feats: &[T]) -> Result<T> {
        let ctx = self.ctx(self.horizon, feats, self.default_control);
        self.terminal_cost.eval(&ctx)
    }

    /// `(f, λ, ℓ)(t, x, a)` computed through the lift of the stopped path.
    pub fn evaluate_coefficients(
        &self,
        t: T,
        x: &CadlagPath<T>,
        control: usize,
    ) -> Result<(Vec<T>, T, T)> {
        if control >= self.controls.len() {
            return Err(CoreError::UnknownControl(format!("#{control}")));
        }
        let feats = self.features_of_path(x, t)?;
        self.eval_coeffs(t, &feats, control)
    }

    /// Lifted feature values of `x(·∧t)`.
    pub fn features_of_path(&self, x: &CadlagPath<T>, t: T) -> Result<Vec<T>> {
        let mut scan = FeatureScanner::new(self, x);
        scan.advance_to(t)
    }

    /// Feature vector right after a jump to `mark` at a time with pre-jump
    /// features `feats`.
    pub fn reset_feats(&self, feats: &[T], mark: &[T]) -> Vec<T> {
        let mut out = feats.to_vec();
        for (i, feat) in self.lift.iter().enumerate() {
            match feat.kind {
                FeatureKind::TerminalValue => out[i] = mark[feat.component],
                FeatureKind::RunningMax => out[i] = out[i].max(mark[feat.component]),
                FeatureKind::RunningIntegral => {}
            }
        }
        out
    }

    /// Kernel atoms at `(t, feats, a)` in declaration order with normalized
    /// weights.
    pub fn eval_atoms_declared(
        &self,
        t: T,
        feats: &[T],
        control: usize,
    ) -> Result<Vec<(Mark<T>, T)>> {
        let ctx = self.ctx(t, feats, control);
        let mut atoms = Vec::with_capacity(self.kernel.atoms.len());
        let mut total = T::zero();
        for atom in &self.kernel.atoms {
            let mut mark = Vec::with_capacity(self.dim);
            for e in &atom.mark {
                mark.push(e.eval(&ctx)?);
            }
            let w = atom.weight.eval(&ctx)?;
            if !w.is_finite() || w < T::zero() {
                return Err(CoreError::AssumptionViolation(format!(
                    "kernel weight {} at t = {} is not a nonnegative real",
                    w,
                    t.as_f64()
                )));
            }
            total += w;
            atoms.push((mark, w));
        }
        if total <= T::zero() {
            return Err(CoreError::DegenerateKernel { t: t.as_f64() });
        }
        for a in &mut atoms {
            a.1 = a.1 / total;
        }
        Ok(atoms)
    }

    /// Kernel atoms at `(t, feats, a)`: normalized weights, marks in sorted
    /// order (lexicographic by components, insertion order on ties).
    pub fn eval_atoms(&self, t: T, feats: &[T], control: usize) -> Result<Vec<(Mark<T>, T)>> {
        let mut atoms = self.eval_atoms_declared(t, feats, control)?;
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        Ok(atoms)
    }

    /// Raw atom weight sum before normalization (validator use).
    pub fn raw_weight_sum(&self, t: T, feats: &[T], control: usize) -> Result<T> {
        let ctx = self.ctx(t, feats, control);
        let mut total = T::zero();
        for atom in &self.kernel.atoms {
            total += atom.weight.eval(&ctx)?;
        }
        Ok(total)
    }

    /// Inverse-CDF sample from `Q(t, x, a, ·)`; deterministic in `u ∈ [0,1]`.
    pub fn sample_kernel(
        &self,
        t: T,
        x: &CadlagPath<T>,
        control: usize,
        u: T,
    ) -> Result<Mark<T>> {
        let feats = self.features_of_path(x, t)?;
        let atoms = self.eval_atoms(t, &feats, control)?;
        let mut cum = T::zero();
        let mut pick = atoms.len() - 1;
        for (i, (_, w)) in atoms.iter().enumerate() {
            cum += *w;
            if u <= cum {
                pick = i;
                break;
            }
        }
        let mark = atoms[pick].0.clone();
        let current = x.eval(t)?;
        if mark == current {
            return Err(CoreError::AssumptionViolation(format!(
                "kernel atom equals the current value at t = {}",
                t.as_f64()
            )));
        }
        Ok(mark)
    }

    /// Statistical check of the standing assumptions against the declared
    /// constants. Violations are reported, never thrown.
    pub fn validate_assumptions(&self, n_samples: usize, seed: u64) -> ValidationReport {
        validate(self, n_samples, seed)
    }
}

/// Incremental lifted-feature scan along a stored path.
///
/// `advance_to` must be called with non-decreasing times; each call returns
/// the feature vector of `x(·∧t)`. Running suprema and integrals are exact
/// for the piecewise-linear-with-jumps representation.
pub struct FeatureScanner<'a, T> {
    data: &'a ProblemData<T>,
    path: &'a CadlagPath<T>,
    row: usize,
    /// Committed running sup per component, up to the current row.
    max: Vec<T>,
    /// Committed running integral per component, up to the current row.
    int: Vec<T>,
}

impl<'a, T: Scalar> FeatureScanner<'a, T> {
    pub fn new(data: &'a ProblemData<T>, path: &'a CadlagPath<T>) -> Self {
        let (_, v0, _) = path.row(0);
        FeatureScanner {
            data,
            path,
            row: 0,
            max: v0.to_vec(),
            int: vec![T::zero(); path.dim()],
        }
    }

    fn step(&mut self) {
        let (t0, v0, _) = self.path.row(self.row);
        let (t1, v1, jump) = self.path.row(self.row + 1);
        for c in 0..self.path.dim() {
            if !jump {
                self.int[c] += (t1 - t0) * (v0[c] + v1[c]) * T::of(0.5);
            }
            self.max[c] = self.max[c].max(v1[c]);
        }
        self.row += 1;
    }

    pub fn advance_to(&mut self, t: T) -> Result<Vec<T>> {
        if t < self.path.row(self.row).0 {
            return Err(CoreError::Eval("feature scan must move forward".into()));
        }
        while self.row + 1 < self.path.len() && self.path.row(self.row + 1).0 <= t {
            self.step();
        }
        let (t0, v0, _) = self.path.row(self.row);
        let dim = self.path.dim();
        // Value, sup and integral at t inside the current segment.
        let mut val = vec![T::zero(); dim];
        for (c, v) in val.iter_mut().enumerate() {
            *v = self.path.eval_comp(t, c);
        }
        let mut out = Vec::with_capacity(self.data.lift.len());
        for feat in &self.data.lift {
            let c = feat.component;
            out.push(match feat.kind {
                FeatureKind::TerminalValue => val[c],
                FeatureKind::RunningMax => self.max[c].max(val[c]),
                FeatureKind::RunningIntegral => {
                    self.int[c] + (t - t0) * (v0[c] + val[c]) * T::of(0.5)
                }
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Problem file schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    #[serde(default)]
    name: String,
    dimension: usize,
    horizon: f64,
    controls: Vec<ControlFile>,
    default_control: String,
    constants: ConstantsFile,
    lift: Vec<LiftFile>,
    drift: StrOrVec,
    intensity: String,
    running_cost: String,
    terminal_cost: String,
    kernel: KernelFile,
}

#[derive(Serialize, Deserialize)]
struct ControlFile {
    name: String,
    #[serde(default)]
    consts: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ConstantsFile {
    Cf: f64,
    Clam: f64,
    Lf: f64,
    LQ: f64,
}

#[derive(Serialize, Deserialize)]
struct LiftFile {
    kind: FeatureKind,
    component: usize,
    lo: f64,
    hi: f64,
    points: usize,
}

#[derive(Serialize, Deserialize)]
struct KernelFile {
    #[serde(default)]
    normalize: bool,
    atoms: Vec<AtomFile>,
}

#[derive(Serialize, Deserialize)]
struct AtomFile {
    mark: StrOrVec,
    weight: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StrOrVec {
    One(String),
    Many(Vec<String>),
}

impl StrOrVec {
    fn into_vec(self) -> Vec<String> {
        match self {
            StrOrVec::One(s) => vec![s],
            StrOrVec::Many(v) => v,
        }
    }
}

fn parse_expr(field: &str, text: &str) -> Result<Expr> {
    Expr::parse(text).map_err(|e| match e {
        CoreError::Parse { line, col, msg } => CoreError::Parse {
            line,
            col,
            msg: format!("in `{field}`: {msg}"),
        },
        other => other,
    })
}

impl<T: Scalar> ProblemData<T> {
    fn from_file(file: ProblemFile) -> Result<Self> {
        if file.dimension == 0 {
            return Err(CoreError::Schema("dimension must be positive".into()));
        }
        if !file.horizon.is_finite() || file.horizon <= 0.0 {
            return Err(CoreError::Schema("horizon must be positive".into()));
        }
        if file.controls.is_empty() {
            return Err(CoreError::Schema("control set must be non-empty".into()));
        }
        let controls: Vec<ControlSpec> = file
            .controls
            .iter()
            .map(|c| ControlSpec { name: c.name.clone(), consts: c.consts.clone() })
            .collect();
        for (i, c) in controls.iter().enumerate() {
            if controls[..i].iter().any(|d| d.name == c.name) {
                return Err(CoreError::Schema(format!("duplicate control `{}`", c.name)));
            }
        }
        let default_control = controls
            .iter()
            .position(|c| c.name == file.default_control)
            .ok_or_else(|| CoreError::UnknownControl(file.default_control.clone()))?;

        let k = &file.constants;
        for (name, v) in [("Cf", k.Cf), ("Clam", k.Clam), ("Lf", k.Lf), ("LQ", k.LQ)] {
            if v.is_nan() || v < 0.0 {
                return Err(CoreError::Schema(format!("constant {name} must be nonnegative")));
            }
        }
        let constants = Constants { c_f: k.Cf, c_lambda: k.Clam, l_f: k.Lf, l_q: k.LQ };

        let lift: Vec<PathFeature> = file
            .lift
            .iter()
            .map(|l| PathFeature {
                kind: l.kind,
                component: l.component,
                lo: l.lo,
                hi: l.hi,
                points: l.points,
            })
            .collect();
        let mut terminal_feat = vec![usize::MAX; file.dimension];
        for (i, f) in lift.iter().enumerate() {
            if f.component >= file.dimension {
                return Err(CoreError::Schema(format!("lift[{i}] component out of range")));
            }
            if !f.lo.is_finite() || !f.hi.is_finite() || f.lo >= f.hi || f.points < 2 {
                return Err(CoreError::Schema(format!(
                    "lift[{i}] needs lo < hi and at least 2 grid points"
                )));
            }
            if f.kind == FeatureKind::TerminalValue {
                if terminal_feat[f.component] != usize::MAX {
                    return Err(CoreError::Schema(format!(
                        "duplicate terminal_value feature for component {}",
                        f.component
                    )));
                }
                terminal_feat[f.component] = i;
            }
        }
        if let Some(c) = terminal_feat.iter().position(|&i| i == usize::MAX) {
            return Err(CoreError::Schema(format!(
                "the lift must declare a terminal_value feature for component {c}"
            )));
        }

        let drift_src = file.drift.into_vec();
        if drift_src.len() != file.dimension {
            return Err(CoreError::Schema(format!(
                "drift has {} components, expected {}",
                drift_src.len(),
                file.dimension
            )));
        }
        let drift: Vec<Expr> = drift_src
            .iter()
            .map(|s| parse_expr("drift", s))
            .collect::<Result<_>>()?;
        let intensity = parse_expr("intensity", &file.intensity)?;
        let running_cost = parse_expr("running_cost", &file.running_cost)?;
        let terminal_cost = parse_expr("terminal_cost", &file.terminal_cost)?;

        if file.kernel.atoms.is_empty() {
            return Err(CoreError::Schema("kernel needs at least one atom".into()));
        }
        let mut atoms = Vec::with_capacity(file.kernel.atoms.len());
        for (i, a) in file.kernel.atoms.iter().enumerate() {
            let mark_src = match &a.mark {
                StrOrVec::One(s) => vec![s.clone()],
                StrOrVec::Many(v) => v.clone(),
            };
            if mark_src.len() != file.dimension {
                return Err(CoreError::Schema(format!(
                    "kernel atom {i} mark has {} components, expected {}",
                    mark_src.len(),
                    file.dimension
                )));
            }
            let mark: Vec<Expr> = mark_src
                .iter()
                .map(|s| parse_expr("kernel.mark", s))
                .collect::<Result<_>>()?;
            let weight = parse_expr("kernel.weight", &a.weight)?;
            atoms.push(KernelAtom { mark, weight });
        }
        let kernel = MarkDistribution { atoms, normalize: file.kernel.normalize };

        // Static reference checks: feature indices and ctrl-table names.
        let mut exprs: Vec<&Expr> = vec![&intensity, &running_cost, &terminal_cost];
        exprs.extend(drift.iter());
        for a in &kernel.atoms {
            exprs.extend(a.mark.iter());
            exprs.push(&a.weight);
        }
        for e in &exprs {
            if let Some(i) = e.max_feature_index() {
                if i >= lift.len() {
                    return Err(CoreError::Schema(format!(
                        "expression references feat[{i}] but the lift has {} features",
                        lift.len()
                    )));
                }
            }
            for name in e.ctrl_names() {
                for c in &controls {
                    if !c.consts.contains_key(&name) {
                        return Err(CoreError::Schema(format!(
                            "control `{}` does not define ctrl[{name}]",
                            c.name
                        )));
                    }
                }
            }
        }

        // Assumption on the kernel: no atom may be the identity mark
        // `feat[terminal(c)]` in every component, which would put positive mass
        // on the current value. Deeper violations are caught by the validator
        // and at sampling time.
        for (i, a) in kernel.atoms.iter().enumerate() {
            let identity = a.mark.iter().enumerate().all(|(c, e)| {
                matches!(e, Expr::Feature(j) if *j == terminal_feat[c])
            });
            if identity {
                return Err(CoreError::Schema(format!(
                    "kernel atom {i} equals the current value x(t); the kernel must put no mass there"
                )));
            }
        }

        let canonical_file = ProblemFile {
            name: file.name.clone(),
            dimension: file.dimension,
            horizon: file.horizon,
            controls: controls
                .iter()
                .map(|c| ControlFile { name: c.name.clone(), consts: c.consts.clone() })
                .collect(),
            default_control: controls[default_control].name.clone(),
            constants: ConstantsFile { Cf: k.Cf, Clam: k.Clam, Lf: k.Lf, LQ: k.LQ },
            lift: lift
                .iter()
                .map(|f| LiftFile {
                    kind: f.kind,
                    component: f.component,
                    lo: f.lo,
                    hi: f.hi,
                    points: f.points,
                })
                .collect(),
            drift: StrOrVec::Many(drift.iter().map(|e| e.to_string()).collect()),
            intensity: intensity.to_string(),
            running_cost: running_cost.to_string(),
            terminal_cost: terminal_cost.to_string(),
            kernel: KernelFile {
                normalize: kernel.normalize,
                atoms: kernel
                    .atoms
                    .iter()
                    .map(|a| AtomFile {
                        mark: StrOrVec::Many(a.mark.iter().map(|e| e.to_string()).collect()),
                        weight: a.weight.to_string(),
                    })
                    .collect(),
            },
        };
        let mut canonical = serde_json::to_string_pretty(&canonical_file)?;
        canonical.push('\n');
        let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));

        Ok(ProblemData {
            name: file.name,
            dim: file.dimension,
            horizon: T::of(file.horizon),
            controls,
            default_control,
            constants,
            lift,
            drift,
            intensity,
            running_cost,
            terminal_cost,
            kernel,
            terminal_feat,
            canonical,
            hash,
        })
    }
}

// ---------------------------------------------------------------------------
// Assumption validator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub samples: usize,
    pub worst: f64,
    pub bound: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub n_samples: usize,
    pub pass: bool,
    pub checks: Vec<ValidationCheck>,
}

/// Random path in (a superset of) the model-generated class: piecewise-linear
/// segments with slope bounded by `C_f(1 + sup |x|)`, at most three jumps with
/// marks drawn from the kernel where possible.
pub(crate) fn sample_class_path<T: Scalar>(
    data: &ProblemData<T>,
    rng: &mut Stream,
    until: T,
) -> CadlagPath<T> {
    let dim = data.dim;
    let start: Vec<T> = (0..dim)
        .map(|c| {
            let f = &data.lift[data.terminal_feature(c)];
            rng.range(T::of(f.lo), T::of(f.hi))
        })
        .collect();
    let n_jumps = rng.below(4);
    let mut jump_times: Vec<T> = (0..n_jumps)
        .map(|_| rng.range(T::of(1e-3), until * T::of(0.95)))
        .collect();
    jump_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    jump_times.dedup();

    let mut path = CadlagPath::constant(&start);
    let mut t_cur = T::zero();
    let mut x_cur = start;
    let slope_cap = |x: &[T]| {
        let sup = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        T::of(data.constants.c_f.max(0.2)) * (T::one() + sup)
    };
    let extend_linear = |path: &CadlagPath<T>, t0: T, x0: &[T], t1: T, rng: &mut Stream| {
        let cap = slope_cap(x0);
        let mut b = PathBuilder::new(dim);
        let mut last_t = T::zero();
        for i in 0..path.len() {
            let (t, v, j) = path.row(i);
            if t > t0 {
                break;
            }
            if j {
                b.push_jump_row(t, v).unwrap();
            } else {
                b.push_node(t, v).unwrap();
            }
            last_t = t;
        }
        let _ = last_t;
        let x1: Vec<T> = x0
            .iter()
            .map(|&v| v + rng.range(-cap, cap) * (t1 - t0))
            .collect();
        b.push_node(t1, &x1).unwrap();
        (b.finish(true).unwrap(), x1)
    };

    for tj in jump_times {
        if tj <= t_cur {
            continue;
        }
        let (p, x_at) = extend_linear(&path, t_cur, &x_cur, tj, rng);
        path = p;
        // Mark from the kernel when it evaluates; uniform in the box otherwise.
        let mark = {
            let feats = data.features_of_path(&path, tj);
            match feats.and_then(|f| data.eval_atoms(tj, &f, rng.below(data.controls.len()))) {
                Ok(atoms) => {
                    let k = rng.below(atoms.len());
                    atoms[k].0.clone()
                }
                Err(_) => (0..dim)
                    .map(|c| {
                        let f = &data.lift[data.terminal_feature(c)];
                        rng.range(T::of(f.lo), T::of(f.hi))
                    })
                    .collect(),
            }
        };
        if mark == x_at {
            continue;
        }
        path = path.concat(tj, &mark).unwrap();
        x_cur = mark;
        t_cur = tj;
    }
    let (p, _) = extend_linear(&path, t_cur, &x_cur, until, rng);
    p
}

/// Rebuild `path` with every node value shifted by independent uniform noise
/// of size `eps`; the jump structure is preserved.
pub fn perturb_path<T: Scalar>(
    path: &CadlagPath<T>,
    eps: T,
    rng: &mut Stream,
) -> CadlagPath<T> {
    let dim = path.dim();
    let mut b = PathBuilder::new(dim);
    for i in 0..path.len() {
        let (t, v, j) = path.row(i);
        let nv: Vec<T> = v.iter().map(|&x| x + rng.range(-eps, eps)).collect();
        if j {
            b.push_jump_row(t, &nv).unwrap();
        } else {
            b.push_node(t, &nv).unwrap();
        }
    }
    b.finish(path.is_frozen()).unwrap()
}

/// Monotone-coupling transport cost between two finite mark distributions,
/// with ground distance `max(prefix_gap, |e − ẽ|_∞)`. Exact Kantorovich
/// distance for scalar marks; an upper bound in higher dimensions.
fn transport_cost<T: Scalar>(a: &[(Mark<T>, T)], b: &[(Mark<T>, T)], prefix_gap: T) -> T {
    // Atom lists arrive sorted by mark; sweep the two cumulative ladders.
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = T::zero();
    loop {
        let m = ra.min(rb);
        let gap = a[i]
            .0
            .iter()
            .zip(&b[j].0)
            .fold(T::zero(), |g, (x, y)| g.max((*x - *y).abs()));
        cost += m * gap.max(prefix_gap);
        ra -= m;
        rb -= m;
        if ra <= T::zero() {
            i += 1;
            if i >= a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= T::zero() {
            j += 1;
            if j >= b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    cost
}

fn validate<T: Scalar>(data: &ProblemData<T>, n_samples: usize, seed: u64) -> ValidationReport {
    let mut rng = Stream::new(seed, 0);
    let horizon = data.horizon;
    let c = &data.constants;
    let slack = 1e-9;

    let mut worst_lam = 0.0f64;
    let mut worst_run = 0.0f64;
    let mut worst_term = 0.0f64;
    let mut worst_growth = 0.0f64;
    let mut worst_lip = 0.0f64;
    let mut worst_term_lip = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut worst_transport = 0.0f64;
    let mut self_atom_hits = 0usize;
    let mut notes: Vec<String> = Vec::new();

    for _ in 0..n_samples {
        let x = sample_class_path(data, &mut rng, horizon);
        let t = rng.range(T::zero(), horizon);
        let a = rng.below(data.controls.len());
        let xt = perturb_path(&x, T::of(0.3), &mut rng);

        let feats = match data.features_of_path(&x, t) {
            Ok(f) => f,
            Err(e) => {
                notes.push(format!("feature evaluation failed: {e}"));
                continue;
            }
        };
        let featst = match data.features_of_path(&xt, t) {
            Ok(f) => f,
            Err(e) => {
                notes.push(format!("feature evaluation failed: {e}"));
                continue;
            }
        };

        match data.eval_coeffs(t, &feats, a) {
            Ok((f, lam, run)) => {
                worst_lam = worst_lam.max(lam.as_f64());
                if lam < T::zero() {
                    worst_lam = f64::INFINITY;
                }
                worst_run = worst_run.max(run.as_f64().abs().max(-run.as_f64()));
                if run < T::zero() {
                    worst_run = f64::INFINITY;
                }
                let zero = CadlagPath::constant(&vec![T::zero(); data.dim]);
                let supx = x.sup_dist(&zero, t).unwrap();
                let fmag = f.iter().fold(T::zero(), |m, v| m.max(v.abs()));
                let cap = c.c_f * (1.0 + supx.as_f64());
                let ratio = if cap > 0.0 {
                    fmag.as_f64() / cap
                } else if fmag == T::zero() {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_growth = worst_growth.max(ratio);

                // Lipschitz ratio of (f, ℓ, λ) against the sup-distance.
                if let Ok((ft, lamt, runt)) = data.eval_coeffs(t, &featst, a) {
                    let d = x.sup_dist(&xt, t).unwrap().as_f64();
                    if d > 1e-9 {
                        let df = f
                            .iter()
                            .zip(&ft)
                            .fold(T::zero(), |m, (u, v)| m.max((*u - *v).abs()))
                            .as_f64();
                        let num = df + (lam - lamt).abs().as_f64() + (run - runt).abs().as_f64();
                        worst_lip = worst_lip.max(num / d);
                    }
                }
            }
            Err(e) => notes.push(format!("coefficient evaluation failed: {e}")),
        }

        // Terminal cost bound and Lipschitz ratio at the horizon.
        if let (Ok(fh), Ok(fht)) = (
            data.features_of_path(&x, horizon),
            data.features_of_path(&xt, horizon),
        ) {
            if let (Ok(h), Ok(ht)) = (data.terminal_cost_of(&fh), data.terminal_cost_of(&fht)) {
                worst_term = worst_term.max(h.as_f64());
                if h < T::zero() {
                    worst_term = f64::INFINITY;
                }
                let d = x.sup_dist(&xt, horizon).unwrap().as_f64();
                if d > 1e-9 {
                    worst_term_lip = worst_term_lip.max((h - ht).abs().as_f64() / d);
                }
            }
        }

        // Kernel: normalization, self-atom mass, transport ratio.
        match (data.eval_atoms(t, &feats, a), data.eval_atoms(t, &featst, a)) {
            (Ok(atoms), Ok(atomst)) => {
                if !data.kernel.normalize {
                    if let Ok(sum) = data.raw_weight_sum(t, &feats, a) {
                        worst_norm = worst_norm.max((sum.as_f64() - 1.0).abs());
                    }
                }
                let cur = x.eval(t).unwrap();
                if atoms.iter().any(|(m, w)| *w > T::zero() && *m == cur) {
                    self_atom_hits += 1;
                }
                let d = x.sup_dist(&xt, t).unwrap();
                if d > T::of(1e-9) {
                    // Prefix gap on [0, t): exclude the concatenation point.
                    let left = x.eval_left(t).unwrap();
                    let leftt = xt.eval_left(t).unwrap();
                    let mut pre = T::zero();
                    for cc in 0..data.dim {
                        pre = pre.max((left[cc] - leftt[cc]).abs());
                    }
                    let pre = pre.max(
                        x.stop(t).unwrap().sup_dist(&xt.stop(t).unwrap(), t).unwrap() - T::zero(),
                    );
                    let w1 = transport_cost(&atoms, &atomst, pre.min(d));
                    worst_transport = worst_transport.max((w1 / d).as_f64());
                }
            }
            (Err(e), _) | (_, Err(e)) => notes.push(format!("kernel evaluation failed: {e}")),
        }
    }

    let mk = |name: &str, worst: f64, bound: f64, note: &str| ValidationCheck {
        name: name.to_string(),
        samples: n_samples,
        worst,
        bound,
        pass: worst <= bound + slack,
        note: note.to_string(),
    };
    let checks = vec![
        mk("intensity_bound", worst_lam, c.c_lambda, "sup λ over samples vs C_λ"),
        mk("running_cost_bound", worst_run, c.c_f, "sup ℓ over samples vs C_f"),
        mk("terminal_cost_bound", worst_term, c.c_f, "sup h over samples vs C_f"),
        mk("drift_growth", worst_growth, 1.0, "|f| / (C_f (1 + sup|x|))"),
        mk("coefficient_lipschitz", worst_lip, c.l_f, "(|Δf|+|Δℓ|+|Δλ|) / ‖x−x̃‖_s vs L_f"),
        mk("terminal_lipschitz", worst_term_lip, c.l_f, "|Δh| / ‖x−x̃‖_T vs L_f"),
        mk(
            "kernel_normalization",
            worst_norm,
            1e-12,
            "|Σw − 1| for declared-normalized kernels",
        ),
        mk(
            "kernel_self_mass",
            self_atom_hits as f64,
            0.0,
            "samples with an atom exactly at x(t)",
        ),
        mk(
            "kernel_transport",
            worst_transport,
            c.l_q,
            "monotone-coupling transport ratio vs L_Q (exact for scalar marks)",
        ),
    ];
    let pass = checks.iter().all(|c| c.pass);
    ValidationReport {
        seed,
        n_samples,
        pass,
        checks: {
            let mut cs = checks;
            if !notes.is_empty() {
                notes.truncate(5);
                cs.push(ValidationCheck {
                    name: "evaluation_failures".into(),
                    samples: n_samples,
                    worst: notes.len() as f64,
                    bound: 0.0,
                    pass: false,
                    note: notes.join("; "),
                });
            }
            cs
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;

    fn constant_model() -> ProblemData<f64> {
        // f ≡ 0, λ ≡ 0.5, ℓ ≡ 1, h ≡ 0.
        ProblemData::from_json(
            r#"{
            "name": "const",
            "dimension": 1,
            "horizon": 1.0,
            "controls": [{"name": "only"}],
            "default_control": "only",
            "constants": {"Cf": 1.0, "Clam": 0.5, "Lf": 0.0, "LQ": 1.0},
            "lift": [{"kind": "terminal_value", "component": 0, "lo": -3, "hi": 3, "points": 7}],
            "drift": "0",
            "intensity": "0.5",
            "running_cost": "1",
            "terminal_cost": "0",
            "kernel": {"normalize": true, "atoms": [
                {"mark": "feat[0]+1", "weight": "0.5"},
                {"mark": "feat[0]-1", "weight": "0.5"}
            ]}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn constant_coefficients_evaluate() {
        let m = constant_model();
        let x = CadlagPath::constant(&[2.0]);
        let (f, lam, cost) = m.evaluate_coefficients(0.3, &x, 0).unwrap();
        assert_eq!((f[0], lam, cost), (0.0, 0.5, 1.0));
    }

    #[test]
    fn terminal_value_feature_reads_current_state() {
        let mut text = constant_model().canonical_json().to_string();
        text = text.replace("\"drift\": [\n    \"0\"\n  ]", "\"drift\": [\n    \"feat[0]\"\n  ]");
        let m: ProblemData<f64> = ProblemData::from_json(&text).unwrap();
        let x = CadlagPath::constant(&[2.0]);
        let (f, _, _) = m.evaluate_coefficients(0.5, &x, 0).unwrap();
        assert_eq!(f[0], 2.0);
    }

    #[test]
    fn running_max_feature_brute_force_oracle() {
        let m = problems::builtin::<f64>("running_max_pathdep").unwrap();
        // x = t on [0,1]: running max at 1 is 1.
        let x = CadlagPath::from_nodes(&[(0.0, vec![0.0]), (1.0, vec![1.0])]).unwrap();
        let feats = m.features_of_path(&x, 1.0).unwrap();
        let max_idx = m
            .lift
            .iter()
            .position(|f| f.kind == FeatureKind::RunningMax)
            .unwrap();
        // Brute-force sup over a dense grid.
        let mut brute: f64 = f64::NEG_INFINITY;
        for k in 0..=10_000 {
            brute = brute.max(x.eval(k as f64 / 10_000.0).unwrap()[0]);
        }
        assert!((feats[max_idx] - 1.0).abs() < 1e-15);
        assert!(feats[max_idx] >= brute - 1e-12);
    }

    #[test]
    fn running_integral_matches_trapezoid() {
        let json = constant_model().canonical_json().replace(
            r#""lift": [
    {
      "kind": "terminal_value",
      "component": 0,
      "lo": -3.0,
      "hi": 3.0,
      "points": 7
    }
  ]"#,
            r#""lift": [
    {
      "kind": "terminal_value",
      "component": 0,
      "lo": -3.0,
      "hi": 3.0,
      "points": 7
    },
    {
      "kind": "running_integral",
      "component": 0,
      "lo": 0.0,
      "hi": 3.0,
      "points": 7
    }
  ]"#,
        );
        let m: ProblemData<f64> = ProblemData::from_json(&json).unwrap();
        // Piecewise-linear path with a jump: integral must match the
        // dense Riemann sum of the stored path.
        let x = CadlagPath::from_nodes(&[(0.0, vec![0.0]), (0.5, vec![2.0])])
            .unwrap()
            .concat(0.5, &[1.0])
            .unwrap();
        let feats = m.features_of_path(&x, 1.0).unwrap();
        let n = 200_000;
        let mut riemann = 0.0;
        for k in 0..n {
            let t = (k as f64 + 0.5) / n as f64;
            riemann += x.eval(t).unwrap()[0] / n as f64;
        }
        assert!((feats[1] - riemann).abs() < 1e-4);
        assert!((feats[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_anticipation_through_stop() {
        let m = constant_model();
        let x = CadlagPath::from_nodes(&[(0.0, vec![0.0]), (1.0, vec![2.0])]).unwrap();
        let t = 0.6;
        let a = m.evaluate_coefficients(t, &x, 0).unwrap();
        let b = m.evaluate_coefficients(t, &x.stop(t).unwrap(), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_inverse_cdf_uses_sorted_atoms() {
        let m = constant_model();
        let x = CadlagPath::constant(&[0.0]);
        // Atoms sort to (-1, +1); u = 0.25 picks the first.
        assert_eq!(m.sample_kernel(0.2, &x, 0, 0.25).unwrap(), vec![-1.0]);
        assert_eq!(m.sample_kernel(0.2, &x, 0, 0.75).unwrap(), vec![1.0]);
    }

    #[test]
    fn kernel_single_atom_and_degenerate() {
        let mut json = constant_model().canonical_json().to_string();
        json = json.replace(r#""weight": "0.5""#, r#""weight": "0""#);
        let m: ProblemData<f64> = ProblemData::from_json(&json).unwrap();
        let x = CadlagPath::constant(&[0.0]);
        assert!(matches!(
            m.sample_kernel(0.2, &x, 0, 0.5),
            Err(CoreError::DegenerateKernel { .. })
        ));
    }

    #[test]
    fn kernel_frequencies_match_weights() {
        // Monte Carlo frequency oracle at 1e5 samples, 3σ band.
        let m = constant_model();
        let x = CadlagPath::constant(&[0.0]);
        let mut rng = Stream::new(11, 0);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let u: f64 = rng.uniform();
            if m.sample_kernel(0.2, &x, 0, u).unwrap() == vec![-1.0] {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let sigma = (0.5 * 0.5 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn identity_atom_is_rejected_at_parse_time() {
        let json = constant_model()
            .canonical_json()
            .replace(r#"(feat[0]+1)"#, r#"feat[0]"#);
        assert!(ProblemData::<f64>::from_json(&json).is_err());
    }

    #[test]
    fn canonical_echo_round_trips() {
        let m = constant_model();
        let echo = m.canonical_json();
        let m2: ProblemData<f64> = ProblemData::from_json(echo).unwrap();
        assert_eq!(m2.canonical_json(), echo);
        assert_eq!(m2.hash(), m.hash());
    }

    #[test]
    fn validator_passes_constant_model() {
        let m = constant_model();
        let r = m.validate_assumptions(200, 3);
        assert!(r.pass, "{:?}", r.checks.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    }

    #[test]
    fn validator_flags_misdeclared_intensity() {
        let json = constant_model()
            .canonical_json()
            .replace(r#""intensity": "0.5""#, r#""intensity": "2""#);
        let m: ProblemData<f64> = ProblemData::from_json(&json).unwrap();
        let r = m.validate_assumptions(100, 3);
        assert!(!r.pass);
        let lam = r.checks.iter().find(|c| c.name == "intensity_bound").unwrap();
        assert!(!lam.pass && lam.worst == 2.0);
    }

    #[test]
    fn validator_accepts_sine_lipschitz() {
        // f = sin(x(t)) has Lipschitz constant 1: sampled quotients stay ≤ 1.
        let json = constant_model()
            .canonical_json()
            .replace(
                "\"drift\": [\n    \"0\"\n  ]",
                "\"drift\": [\n    \"sin(feat[0])\"\n  ]",
            )
            .replace(r#""Lf": 0.0"#, r#""Lf": 1.0"#);
        let m: ProblemData<f64> = ProblemData::from_json(&json).unwrap();
        let r = m.validate_assumptions(300, 5);
        let lip = r.checks.iter().find(|c| c.name == "coefficient_lipschitz").unwrap();
        assert!(lip.pass, "worst ratio {}", lip.worst);
        assert!(lip.worst <= 1.0 + 1e-9);
    }

    #[test]
    fn missing_terminal_feature_is_rejected() {
        let json = constant_model()
            .canonical_json()
            .replace(r#""kind": "terminal_value""#, r#""kind": "running_max""#);
        assert!(ProblemData::<f64>::from_json(&json).is_err());
    }
}
