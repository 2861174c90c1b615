//! Verification checks.
//!
//! Every check draws its randomness from an explicit seed, reports the worst
//! residual or margin against a stated tolerance, and never throws on a
//! violation: reports are data. Checks that need the solved value function
//! take it as input, so a single solve can feed the whole suite.

use serde::Serialize;

use crate::error::Result;
use crate::flow::{solve_flow, Schedule};
use crate::model::{perturb_path, ProblemData};
use crate::path::CadlagPath;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::solver::{
    apply_g, apply_interval_value, build_interval_plans, hamiltonian_f_psi_feats, EtaSpec,
    QuadratureSpec, ValueFunction,
};

/// Outcome of one verification check; reproducible from (model, seed,
/// grid settings).
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub samples: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
    pub notes: String,
}

impl CheckReport {
    fn new(name: &str, samples: usize, worst: f64, tol: f64, seed: u64, notes: String) -> Self {
        CheckReport {
            name: name.to_string(),
            samples,
            worst,
            tolerance: tol,
            pass: worst <= tol,
            seed,
            notes,
        }
    }
}

/// Random path in the model-generated class: honest flow segments under
/// random constant controls, at most two jumps with kernel marks, started
/// inside the middle half of the declared state box.
pub fn sample_flow_path<T: Scalar>(
    data: &ProblemData<T>,
    rng: &mut Stream,
    dt: T,
) -> Result<CadlagPath<T>> {
    let horizon = data.horizon;
    let start: Vec<T> = (0..data.dim)
        .map(|c| {
            let f = &data.lift[data.terminal_feature(c)];
            let (lo, hi) = (T::of(f.lo), T::of(f.hi));
            let mid = (lo + hi) * T::of(0.5);
            let half = (hi - lo) * T::of(0.25);
            rng.range(mid - half, mid + half)
        })
        .collect();
    let mut x = CadlagPath::constant(&start);
    let n_jumps = rng.below(3);
    let mut jump_times: Vec<T> = (0..n_jumps)
        .map(|_| rng.range(horizon * T::of(0.05), horizon * T::of(0.9)))
        .collect();
    jump_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    jump_times.dedup();
    let mut t_cur = T::zero();
    for tj in jump_times {
        if tj <= t_cur {
            continue;
        }
        let a = rng.below(data.controls.len());
        let flow = solve_flow(data, t_cur, &x, &Schedule::constant(a), dt)?;
        let flow_path = flow.as_path();
        let u: T = rng.uniform();
        match data.sample_kernel(tj, &flow_path, a, u) {
            Ok(mark) => {
                x = flow_path.concat(tj, &mark)?;
                t_cur = tj;
            }
            Err(_) => continue,
        }
    }
    let a = rng.below(data.controls.len());
    let flow = solve_flow(data, t_cur, &x, &Schedule::constant(a), dt)?;
    Ok(flow.as_path())
}

/// Dynamic programming residual: `V̄(s,x)` against the interval-operator
/// evaluation through a random intermediate time `s₁ ∈ (s, T]`.
pub fn check_dpp<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    samples: usize,
    tol: f64,
    seed: u64,
    quad: &QuadratureSpec,
    dt: T,
) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, 0);
    let horizon = data.horizon;
    let mut worst = 0.0f64;
    for i in 0..samples {
        let x = sample_flow_path(data, &mut rng, dt)?;
        let s = rng.range(horizon * T::of(0.02), horizon * T::of(0.85));
        // s₁ from the solver's time grid (plus the degenerate and terminal
        // boundary cases on the first two samples).
        let s1 = if i == 0 {
            s
        } else if i == 1 {
            horizon
        } else {
            let later: Vec<T> = vf.times.iter().copied().filter(|&t| t > s).collect();
            later[rng.below(later.len())]
        };
        let lhs = vf.query(data, s, &x)?;
        let rhs = apply_interval_value(data, vf, s, &x, s1, quad)?;
        worst = worst.max((lhs - rhs).abs().as_f64());
    }
    Ok(CheckReport::new(
        "dpp",
        samples,
        worst,
        tol,
        seed,
        "sup |V̄(s,x) − [(G_{s,s₁;V̄})V̄](s,x)| over sampled (s, s₁, x)".into(),
    ))
}

/// Fixed-point residual `|[G V̄](s,x) − V̄(s,x)|` over sampled points.
pub fn check_fixed_point<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    samples: usize,
    tol: f64,
    seed: u64,
    quad: &QuadratureSpec,
    dt: T,
) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, 0);
    let horizon = data.horizon;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = sample_flow_path(data, &mut rng, dt)?;
        let s = rng.range(horizon * T::of(0.02), horizon * T::of(0.95));
        let lhs = vf.query(data, s, &x)?;
        let rhs = apply_g(data, vf, s, &x, quad)?;
        worst = worst.max((lhs - rhs).abs().as_f64());
    }
    Ok(CheckReport::new(
        "fixedpoint",
        samples,
        worst,
        tol,
        seed,
        "sup |[G V̄](s,x) − V̄(s,x)| over sampled (s,x)".into(),
    ))
}

/// Interval-operator contraction: sup-ratio of images over random bounded
/// grid-function pairs must not exceed `1 − e^{−C_λ Δ}` (plus slack).
pub fn estimate_contraction<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    interval: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckReport> {
    let nt = (vf.times.len() - 1) / (vf.knots.len() - 1);
    let (lo, hi) = (vf.knots[interval], vf.knots[interval + 1]);
    let kappa = 1.0 - (-data.constants.c_lambda * (hi - lo).as_f64()).exp();
    let top_row = interval + 1 == vf.knots.len() - 1;
    let eta_row = vf.row((interval + 1) * nt).to_vec();
    let eta = if top_row { EtaSpec::Cost } else { EtaSpec::Row(&eta_row) };
    let plans = build_interval_plans(data, &vf.grid, lo, hi, nt, 0, eta)?;
    let g = vf.grid.len();
    let bound = T::of(data.constants.c_f * (1.0 + data.horizon.as_f64()));
    let mut rng = Stream::new(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let psi1: Vec<T> = (0..(nt + 1) * g).map(|_| rng.range(T::zero(), bound)).collect();
        let psi2: Vec<T> = (0..(nt + 1) * g).map(|_| rng.range(T::zero(), bound)).collect();
        let den = psi1
            .iter()
            .zip(&psi2)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        if den <= T::zero() {
            continue;
        }
        let (img1, img2) = (plans.sweep(&psi1), plans.sweep(&psi2));
        let num = img1
            .iter()
            .zip(&img2)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
        worst = worst.max((num / den).as_f64());
    }
    Ok(CheckReport::new(
        "contraction",
        n_pairs,
        worst,
        kappa + 1e-6,
        seed,
        format!("interval {interval}: sup-ratio vs 1 − e^(−C_λ·Δ) = {kappa:.6}"),
    ))
}

/// Constant-shift response of one interval operator: the image difference of
/// `ψ` and `ψ + c` stays within `(1 − e^{−C_λΔ})·c` and is nonnegative.
pub fn contraction_constant_shift<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    interval: usize,
    shift: f64,
) -> Result<CheckReport> {
    let nt = (vf.times.len() - 1) / (vf.knots.len() - 1);
    let (lo, hi) = (vf.knots[interval], vf.knots[interval + 1]);
    let kappa = 1.0 - (-data.constants.c_lambda * (hi - lo).as_f64()).exp();
    let eta_row = vf.row((interval + 1) * nt).to_vec();
    let top_row = interval + 1 == vf.knots.len() - 1;
    let eta = if top_row { EtaSpec::Cost } else { EtaSpec::Row(&eta_row) };
    let plans = build_interval_plans(data, &vf.grid, lo, hi, nt, 0, eta)?;
    let g = vf.grid.len();
    let c = T::of(shift);
    let psi1: Vec<T> = (0..(nt + 1) * g)
        .map(|i| vf.table[i % vf.table.len()])
        .collect();
    let psi2: Vec<T> = psi1.iter().map(|&v| v + c).collect();
    let (img1, img2) = (plans.sweep(&psi1), plans.sweep(&psi2));
    let mut worst = 0.0f64;
    let mut min_diff = f64::INFINITY;
    for (a, b) in img1.iter().zip(&img2) {
        let d = (*b - *a).as_f64();
        worst = worst.max(d);
        min_diff = min_diff.min(d);
    }
    let mut report = CheckReport::new(
        "contraction_shift",
        (nt + 1) * g,
        worst,
        kappa * shift + 1e-9,
        0,
        format!("image response to ψ + {shift}; smallest response {min_diff:.3e}"),
    );
    report.pass = report.pass && min_diff >= -1e-9;
    Ok(report)
}

/// Empirical path-Lipschitz estimate of the value function.
pub fn estimate_lipschitz<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    n_pairs: usize,
    l_cap: f64,
    seed: u64,
    dt: T,
) -> Result<CheckReport> {
    let mut rng = Stream::new(seed, 0);
    let horizon = data.horizon;
    let mut worst = 0.0f64;
    let mut used = 0usize;
    for _ in 0..n_pairs {
        let x = sample_flow_path(data, &mut rng, dt)?;
        let xt = perturb_path(&x, T::of(0.2), &mut rng);
        let s = rng.range(horizon * T::of(0.05), horizon * T::of(0.95));
        let d = x.sup_dist(&xt, s)?;
        if d <= T::of(1e-9) {
            continue;
        }
        used += 1;
        let a = vf.query(data, s, &x)?;
        let b = vf.query(data, s, &xt)?;
        worst = worst.max(((a - b).abs() / d).as_f64());
    }
    Ok(CheckReport::new(
        "lipschitz",
        used,
        worst,
        l_cap,
        seed,
        format!("empirical L̂ of V̄ over {used} perturbed path pairs"),
    ))
}

/// One-application stability bound of the interval operator: feed ψ and η
/// with known Lipschitz constants `c`, `c′` and compare the measured image
/// Lipschitz constant against `c′·e^{L_f T} + 6Ľ(s₂−s)(1+c)(1+‖ψ‖_∞)`.
pub fn check_interval_stability<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    c: f64,
    c_prime: f64,
) -> Result<CheckReport> {
    let nt = (vf.times.len() - 1) / (vf.knots.len() - 1);
    let n_int = vf.knots.len() - 1;
    let (lo, hi) = (vf.knots[n_int - 1], vf.knots[n_int]);
    let g = vf.grid.len();
    let psi_norm = vf.sup_norm().as_f64().max(1.0);
    // ψ(t, x) = c·|x(t)| and η(x) = min(c′·|x(T)|, ‖ψ̄‖_∞): Lipschitz
    // constants exactly c and c′ in the path sup-seminorm.
    let term_axis = data.terminal_feature(0);
    let mk = |slope: f64, capv: f64| -> Vec<T> {
        (0..g)
            .map(|j| {
                let v = vf.grid.node(j)[term_axis].abs().as_f64() * slope;
                T::of(v.min(capv))
            })
            .collect()
    };
    let eta = mk(c_prime, psi_norm);
    let psi_row = mk(c, f64::INFINITY);
    let mut psi = Vec::with_capacity((nt + 1) * g);
    for _ in 0..=nt {
        psi.extend_from_slice(&psi_row);
    }
    let plans = build_interval_plans(data, &vf.grid, lo, hi, nt, 0, EtaSpec::Row(&eta))?;
    let img = plans.sweep(&psi);
    let psi_sup = psi.iter().fold(T::zero(), |m, v| m.max(v.abs())).as_f64();
    let l_check = (data.constants.l_f * data.horizon.as_f64()).exp()
        * [
            data.constants.l_f,
            data.constants.l_f * data.constants.c_f,
            data.constants.l_f * psi_norm,
            data.constants.c_f,
            data.constants.c_lambda * data.constants.l_q,
            data.constants.c_lambda,
            1.0,
        ]
        .into_iter()
        .fold(0.0f64, f64::max);

    // Measured Lipschitz constant along the terminal axis (nodes read as
    // constant paths), row by row against the row-dependent bound.
    let axis = &vf.grid.axes[term_axis];
    let mut worst_excess = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for i in 0..=nt {
        let s_row = (lo + (hi - lo) * T::of(i as f64 / nt as f64)).as_f64();
        let bound = c_prime * (data.constants.l_f * data.horizon.as_f64()).exp()
            + 6.0 * l_check * (hi.as_f64() - s_row) * (1.0 + c) * (1.0 + psi_sup);
        // Only exact when the lift is the terminal value alone; other axes
        // are held at their first node.
        let stride: usize = vf.grid.axes[term_axis + 1..].iter().map(|a| a.len()).product();
        for k in 0..axis.len() - 1 {
            let j0 = k * stride;
            let j1 = (k + 1) * stride;
            let dx = (axis[k + 1] - axis[k]).as_f64();
            let ratio = (img[i * g + j1] - img[i * g + j0]).abs().as_f64() / dx;
            worst_ratio = worst_ratio.max(ratio);
            worst_excess = worst_excess.max(ratio - bound);
        }
    }
    Ok(CheckReport::new(
        "interval_stability",
        (nt + 1) * (axis.len() - 1),
        worst_excess,
        0.0,
        0,
        format!(
            "measured image Lipschitz {worst_ratio:.4} vs c′e^(LfT) + 6Ľ(s₂−s)(1+c)(1+‖ψ‖∞), Ľ = {l_check:.4}"
        ),
    ))
}

/// Monotone bracketing of the comparison proof: iterate the interval
/// operators from the zero seed below and from `C_f(1+T)` above; both
/// sequences are monotone, the width decays like `κⁿ`, and the final bracket
/// contains the solved value function.
pub fn check_monotone_bracket<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    n_max: usize,
    tol: f64,
) -> Result<CheckReport> {
    let nt = (vf.times.len() - 1) / (vf.knots.len() - 1);
    let n_int = vf.knots.len() - 1;
    let g = vf.grid.len();
    let upper = data.constants.c_f * (1.0 + data.horizon.as_f64());
    let mut worst_monotone = 0.0f64;
    let mut worst_decay = 0.0f64;
    let mut worst_limit = 0.0f64;
    let mut worst_containment = 0.0f64;

    for k in (0..n_int).rev() {
        let (lo, hi) = (vf.knots[k], vf.knots[k + 1]);
        let kappa = 1.0 - (-data.constants.c_lambda * (hi - lo).as_f64()).exp();
        let eta_row = vf.row((k + 1) * nt).to_vec();
        let eta = if k + 1 == n_int { EtaSpec::Cost } else { EtaSpec::Row(&eta_row) };
        let plans = build_interval_plans(data, &vf.grid, lo, hi, nt, 0, eta)?;
        let mut u = vec![T::zero(); (nt + 1) * g];
        let mut v = vec![T::of(upper); (nt + 1) * g];
        let width0 = upper;
        for n in 1..=n_max {
            let u1 = plans.sweep(&u);
            let v1 = plans.sweep(&v);
            for (a, b) in u.iter().zip(&u1) {
                worst_monotone = worst_monotone.max((*a - *b).as_f64());
            }
            for (a, b) in v.iter().zip(&v1) {
                worst_monotone = worst_monotone.max((*b - *a).as_f64());
            }
            let width = u1
                .iter()
                .zip(&v1)
                .fold(0.0f64, |m, (a, b)| m.max((*b - *a).as_f64().abs()));
            let allowed = 1.05 * kappa.powi(n as i32) * width0 + 1e-12;
            worst_decay = worst_decay.max(width - allowed);
            u = u1;
            v = v1;
        }
        // Containment and limit against the committed slice.
        for i in 0..=nt {
            let row = vf.row(k * nt + i);
            for j in 0..g {
                let vbar = row[j].as_f64();
                let uu = u[i * g + j].as_f64();
                let vv = v[i * g + j].as_f64();
                worst_containment = worst_containment.max(uu - vbar).max(vbar - vv);
                worst_limit = worst_limit.max((uu - vbar).abs()).max((vv - vbar).abs());
            }
        }
    }
    let notes = format!(
        "monotonicity violation {worst_monotone:.3e}; κⁿ-decay excess {worst_decay:.3e}; \
         containment excess {worst_containment:.3e}; final gap to V̄ {worst_limit:.3e}"
    );
    let mut report = CheckReport::new("bracket", n_max, worst_limit, tol, 0, notes);
    report.pass = report.pass
        && worst_monotone <= 1e-10
        && worst_decay <= 0.0
        && worst_containment <= tol;
    Ok(report)
}

/// Heuristic existence search for characteristic pairs: for each gradient
/// `z`, hunt the schedule grid for flows whose companion `y`, integrated
/// against the Hamiltonian, stays above (resp. below) the value function. A
/// failed search means "not found at this resolution", never a refutation.
pub fn check_minimax<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    s0: T,
    x0: &CadlagPath<T>,
    z_list: &[Vec<T>],
    tol: f64,
    dt: T,
) -> Result<CheckReport> {
    let horizon = data.horizon;
    let schedules = {
        let nodes: Vec<T> = vf.times.iter().copied().filter(|&t| t > s0 && t < horizon).collect();
        crate::solver::build_schedules(data.controls.len(), s0, &nodes, 0)?
            .into_iter()
            .chain(crate::solver::build_schedules(data.controls.len(), s0, &nodes, 1)?)
            .collect::<Vec<_>>()
    };
    let y0 = vf.query(data, s0, x0)?;
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for z in z_list {
        let mut best_super = f64::INFINITY;
        let mut best_sub = f64::INFINITY;
        for sched in &schedules {
            let flow = solve_flow(data, s0, x0, sched, dt)?;
            let n = flow.nodes.times.len();
            let mut y = y0;
            let mut margin_super = 0.0f64; // max over t of V̄ − y
            let mut margin_sub = 0.0f64; // max over t of y − V̄
            for m in 0..n {
                let t = flow.nodes.times[m];
                let feats = flow.nodes.feat_row(m);
                let vbar = vf.query_feats(t, feats);
                margin_super = margin_super.max((vbar - y).as_f64());
                margin_sub = margin_sub.max((y - vbar).as_f64());
                if m + 1 < n {
                    // Heun step of y′ = ⟨x′, z⟩ − F_ψ(t, x, y, z) along the flow.
                    let h = flow.nodes.times[m + 1] - t;
                    let ctrl = sched.label_at(t);
                    let rhs = |tt: T, ff: &[T], yy: T| -> Result<T> {
                        let drift = data.eval_drift(tt, ff, ctrl)?;
                        let dot =
                            drift.iter().zip(z).fold(T::zero(), |a, (u, w)| a + *u * *w);
                        let f_psi = hamiltonian_f_psi_feats(data, vf, tt, ff, yy, z)?;
                        Ok(dot - f_psi)
                    };
                    let k1 = rhs(t, feats, y)?;
                    let t1 = flow.nodes.times[m + 1];
                    let f1 = flow.nodes.feat_row(m + 1);
                    let k2 = rhs(t1, f1, y + h * k1)?;
                    y += h * (k1 + k2) * T::of(0.5);
                }
            }
            best_super = best_super.min(margin_super);
            best_sub = best_sub.min(margin_sub);
        }
        worst = worst.max(best_super).max(best_sub);
        notes.push(format!(
            "z = {:?}: super {:.3e}, sub {:.3e}",
            z.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            best_super,
            best_sub
        ));
    }
    Ok(CheckReport::new(
        "minimax",
        z_list.len() * schedules.len(),
        worst,
        tol,
        0,
        format!("existence search over {} schedules; {}", schedules.len(), notes.join("; ")),
    ))
}

/// The stopped-path regularity example: `u(t, x) = ‖x(·∧t)‖_∞` with
/// `x₀ = −2·1_{[t₀,T)}` jumps from 1 to 2 across `t₀` after concatenation
/// with the mark −1, while the pseudo-metric gap is exactly `1/n`.
pub fn regularity_counterexample<T: Scalar>() -> CheckReport {
    let t0 = T::of(0.5);
    let horizon = T::of(1.0);
    let x0 = CadlagPath::<T>::constant(&[T::zero()])
        .concat(t0, &[T::of(-2.0)])
        .unwrap()
        .concat(horizon, &[T::zero()])
        .unwrap();
    let zero = CadlagPath::<T>::constant(&[T::zero()]);
    let sup_norm = |t: T, x: &CadlagPath<T>| -> T {
        x.stop(t).unwrap().sup_dist(&zero, t).unwrap()
    };

    let mut pass = true;
    let mut notes = Vec::new();

    let at_t0 = sup_norm(t0, &x0.concat(t0, &[T::of(-1.0)]).unwrap());
    if at_t0 != T::one() {
        pass = false;
    }
    notes.push(format!("u(t0, x0⊗(−1)) = {}", at_t0.as_f64()));

    for eps in [1e-3, 1e-6] {
        let te = t0 + T::of(eps);
        let val = sup_norm(te, &x0.concat(te, &[T::of(-1.0)]).unwrap());
        if val != T::of(2.0) {
            pass = false;
        }
        notes.push(format!("u(t0+{eps}, x0⊗(−1)) = {}", val.as_f64()));
    }

    let mut worst_gap = 0.0f64;
    for n in [4u32, 64, 1024, 1 << 20] {
        let inv = T::one() / T::of(n as f64);
        let d = CadlagPath::pseudo_metric(t0 + inv, &x0, t0, &x0).unwrap();
        let gap = (d - inv).abs().as_f64();
        worst_gap = worst_gap.max(gap);
        if d != inv {
            pass = false;
        }
    }
    notes.push(format!("metric gap deviation {worst_gap:.3e}"));

    let mut report = CheckReport::new("regularity", 3, worst_gap, 0.0, 0, notes.join("; "));
    report.pass = pass;
    report
}
