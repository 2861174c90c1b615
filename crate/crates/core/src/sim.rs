//! Event-driven simulation of the controlled process.
//!
//! A trajectory is built stage by stage: solve the flow from the current
//! jump time under the stage control, invert the integrated hazard at an
//! exponential draw, relocate through the mark kernel evaluated at the
//! pre-jump flow, concatenate, and ask the policy for the next open-loop
//! schedule. Costs are trapezoid integrals of the running cost along the
//! stored path plus the terminal cost, accumulated per stage so that the
//! stage decomposition sums to the pathwise cost identically.
//!
//! Monte Carlo replication `i` draws from the stream `(master_seed, i)`;
//! estimates are therefore bit-identical under any thread count, and common
//! random numbers across policies come from sharing the master seed.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::flow::{solve_flow, Schedule};
use crate::model::{FeatureScanner, ProblemData};
use crate::path::{CadlagPath, Mark};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::solver::PolicyTable;

/// One record of the marked sequence: a realized jump (time, post-jump mark,
/// stage schedule) or the absorbing cemetery.
#[derive(Debug, Clone)]
pub enum StageRecord<T> {
    Active { time: T, mark: Mark<T>, schedule: Schedule<T> },
    Cemetery,
}

/// The canonical marked sequence (T₀, E₀, α₀), (T₁, E₁, α₁), …; once a
/// record is the cemetery every later record is too.
#[derive(Debug, Clone)]
pub struct MarkedSequence<T> {
    pub records: Vec<StageRecord<T>>,
}

impl<T: Scalar> MarkedSequence<T> {
    /// Realized jump times T₁, T₂, … (excluding the start).
    pub fn jump_times(&self) -> Vec<T> {
        self.records
            .iter()
            .skip(1)
            .filter_map(|r| match r {
                StageRecord::Active { time, .. } => Some(*time),
                StageRecord::Cemetery => None,
            })
            .collect()
    }
}

/// The realized control process ᾱ: stage schedules on half-open intervals
/// `(Tₙ, Tₙ₊₁]`, the default action a° off their union.
#[derive(Debug, Clone)]
pub struct ControlProcess<T> {
    pub default_control: usize,
    /// `(Tₙ, Tₙ₊₁ or None-for-beyond-horizon, αₙ)`.
    pub stages: Vec<(T, Option<T>, Schedule<T>)>,
}

impl<T: Scalar> ControlProcess<T> {
    /// Label of ᾱ(t); the default control at t ≤ T₀ and past the horizon.
    pub fn label_at(&self, t: T) -> usize {
        for (a, b, sched) in &self.stages {
            let inside = t > *a && b.is_none_or(|bb| t <= bb);
            if inside {
                return sched.label_at(t);
            }
        }
        self.default_control
    }
}

/// One realized controlled run.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub start: T,
    pub marked: MarkedSequence<T>,
    /// The assembled path on `[0, T]`.
    pub path: CadlagPath<T>,
    pub control: ControlProcess<T>,
    pub cost: T,
    pub stage_costs: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn n_jumps(&self) -> usize {
        self.marked.jump_times().len()
    }

    /// Trajectory CSV: `t, v1..vd, stage, control_label, is_jump`.
    pub fn to_csv(&self, data: &ProblemData<T>) -> String {
        let d = self.path.dim();
        let mut out = String::from("t");
        for c in 0..d {
            out.push_str(&format!(",v{}", c + 1));
        }
        out.push_str(",stage,control_label,is_jump\n");
        let boundaries = self.marked.jump_times();
        let mut stage = 0usize;
        for i in 0..self.path.len() {
            let (t, v, j) = self.path.row(i);
            if j && t > self.start && boundaries.get(stage).is_some_and(|&b| b == t) {
                stage += 1;
            }
            let label = if t < self.start {
                data.controls[self.control.default_control].name.clone()
            } else {
                let (_, _, sched) = &self.control.stages[stage.min(self.control.stages.len() - 1)];
                data.controls[sched.label_at(t)].name.clone()
            };
            out.push_str(&format!("{}", t.as_f64()));
            for x in v {
                out.push_str(&format!(",{}", x.as_f64()));
            }
            out.push_str(&format!(",{},{},{}\n", stage, label, if j { 1 } else { 0 }));
        }
        out
    }
}

/// Non-randomized jump-feedback policy: at each jump the rule reads only the
/// stage index, the jump time and the lifted features of the realized path.
#[derive(Debug, Clone)]
pub enum JumpFeedbackPolicy<T> {
    /// Always the same constant label.
    Constant(usize),
    /// The solver's extracted policy table.
    Table(PolicyTable<T>),
}

impl<T: Scalar> JumpFeedbackPolicy<T> {
    pub fn schedule_at(&self, _stage: usize, t: T, feats: &[T]) -> Schedule<T> {
        match self {
            JumpFeedbackPolicy::Constant(label) => Schedule::constant(*label),
            JumpFeedbackPolicy::Table(table) => table.lookup(t, feats),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions<T> {
    /// Flow / quadrature step.
    pub dt: T,
    /// Stage cap; 0 selects the default `10·C_λ·T + 50`.
    pub stage_cap: usize,
    /// Stream-index offset: replication `i` draws from `(seed, offset + i)`.
    /// Zero offsets across runs share randomness (common random numbers);
    /// distinct offsets decouple them.
    pub stream_offset: u64,
}

impl<T: Scalar> SimOptions<T> {
    pub fn new(dt: T) -> Self {
        SimOptions { dt, stage_cap: 0, stream_offset: 0 }
    }

    fn cap(&self, data: &ProblemData<T>) -> usize {
        if self.stage_cap > 0 {
            self.stage_cap
        } else {
            (10.0 * data.constants.c_lambda * data.horizon.as_f64()).ceil() as usize + 50
        }
    }
}

/// Simulate one controlled trajectory from `(s, x)` under `policy`, drawing
/// from `stream`.
pub fn simulate_trajectory<T: Scalar>(
    data: &ProblemData<T>,
    s: T,
    x: &CadlagPath<T>,
    policy: &JumpFeedbackPolicy<T>,
    stream: &mut Stream,
    opts: &SimOptions<T>,
) -> Result<Trajectory<T>> {
    let horizon = data.horizon;
    if s >= horizon {
        return Err(CoreError::Horizon { t: s.as_f64(), horizon: horizon.as_f64() });
    }
    let cap = opts.cap(data);

    let mut current = x.stop(s)?;
    let feats0 = data.features_of_path(&current, s)?;
    let mut schedule = policy.schedule_at(0, s, &feats0);
    let mut records = vec![StageRecord::Active {
        time: s,
        mark: x.eval(s)?,
        schedule: schedule.clone(),
    }];
    let mut spans: Vec<(T, Option<T>, Schedule<T>)> = Vec::new();
    let mut t_n = s;
    let mut stage = 0usize;

    let final_path = loop {
        let flow = solve_flow(data, t_n, &current, &schedule, opts.dt)?;
        let u: T = stream.uniform_open();
        match flow.sample_next_jump(u) {
            None => {
                spans.push((t_n, None, schedule.clone()));
                records.push(StageRecord::Cemetery);
                break flow.as_path();
            }
            Some(tau) => {
                let flow_path = flow.as_path();
                let u_mark: T = stream.uniform();
                let label = schedule.label_at(tau);
                let mark = data.sample_kernel(tau, &flow_path, label, u_mark)?;
                spans.push((t_n, Some(tau), schedule.clone()));
                current = flow_path.concat(tau, &mark)?;
                stage += 1;
                if stage > cap {
                    return Err(CoreError::Runaway { cap, seed: 0 });
                }
                let feats = data.features_of_path(&current, tau)?;
                schedule = policy.schedule_at(stage, tau, &feats);
                records.push(StageRecord::Active { time: tau, mark, schedule: schedule.clone() });
                t_n = tau;
            }
        }
    };

    let control = ControlProcess { default_control: data.default_control, stages: spans };
    let marked = MarkedSequence { records };
    let (cost, stage_costs) = cost_along_path(data, &final_path, &marked, &control, s)?;
    Ok(Trajectory { start: s, marked, path: final_path, control, cost, stage_costs })
}

/// Recompute `∫ₛᵀ ℓ(t, X, ᾱ(t)) dt + h(X)` from the stored path by per-stage
/// trapezoid on the stored nodes. Matches the simulated cost exactly: the
/// simulator calls this same routine.
pub fn pathwise_cost<T: Scalar>(data: &ProblemData<T>, traj: &Trajectory<T>) -> Result<T> {
    let (cost, _) = cost_along_path(data, &traj.path, &traj.marked, &traj.control, traj.start)?;
    Ok(cost)
}

/// Realized per-stage cost pieces: stage n carries `∫_{Tₙ∧T}^{Tₙ₊₁∧T} ℓ dt`
/// plus the terminal cost if the horizon falls inside its span. Sums to the
/// pathwise cost identically.
pub fn stage_cost_decomposition<T: Scalar>(
    data: &ProblemData<T>,
    traj: &Trajectory<T>,
) -> Result<Vec<T>> {
    let (_, stages) = cost_along_path(data, &traj.path, &traj.marked, &traj.control, traj.start)?;
    Ok(stages)
}

fn cost_along_path<T: Scalar>(
    data: &ProblemData<T>,
    path: &CadlagPath<T>,
    marked: &MarkedSequence<T>,
    control: &ControlProcess<T>,
    s: T,
) -> Result<(T, Vec<T>)> {
    let horizon = data.horizon;
    let boundaries = marked.jump_times();
    let n_stages = control.stages.len();
    let mut stage_costs = vec![T::zero(); n_stages.max(1)];
    let mut stage = 0usize;

    let mut scan = FeatureScanner::new(data, path);
    let mut prev_t: Option<T> = None;
    let mut prev_feats: Vec<T> = Vec::new();
    let mut last_feats: Vec<T> = Vec::new();

    for i in 0..path.len() {
        let (t, _, is_jump) = path.row(i);
        if t > horizon {
            break;
        }
        let feats = scan.advance_to(t)?;
        if is_jump && t > s && boundaries.get(stage).is_some_and(|&b| b == t) {
            // Stage boundary: the zero-width jump interval contributes nothing.
            stage += 1;
            prev_t = Some(t);
            prev_feats = feats.clone();
            last_feats = feats;
            continue;
        }
        if let Some(t0) = prev_t {
            if t > t0 && t0 >= s {
                let sched = &control.stages[stage.min(n_stages - 1)].2;
                let label = sched.label_at(t0);
                let (_, _, l0) = data.eval_coeffs(t0, &prev_feats, label)?;
                let (_, _, l1) = data.eval_coeffs(t, &feats, label)?;
                let slot = stage.min(stage_costs.len() - 1);
                stage_costs[slot] += (t - t0) * (l0 + l1) * T::of(0.5);
            }
        }
        if t >= s {
            prev_t = Some(t);
            prev_feats = feats.clone();
        }
        last_feats = feats;
    }

    let h = data.terminal_cost_of(&last_feats)?;
    let last = stage_costs.len() - 1;
    stage_costs[last] += h;
    let total = stage_costs.iter().fold(T::zero(), |a, &b| a + b);
    Ok((total, stage_costs))
}

/// Monte Carlo cost statistics.
#[derive(Debug, Clone, Serialize)]
pub struct CostStats {
    pub mean: f64,
    pub half_width_95: f64,
    pub n_rep: usize,
    pub mean_jumps: f64,
    pub seed: u64,
}

/// Estimate the expected cost by `n_rep` independent replications; the
/// result is independent of the execution order (indexed reduction).
pub fn estimate_cost<T: Scalar>(
    data: &ProblemData<T>,
    s: T,
    x: &CadlagPath<T>,
    policy: &JumpFeedbackPolicy<T>,
    n_rep: usize,
    master_seed: u64,
    opts: &SimOptions<T>,
) -> Result<CostStats> {
    if n_rep < 2 {
        return Err(CoreError::Schema("n_rep must be at least 2".into()));
    }
    let runs: Vec<Result<(f64, usize)>> = (0..n_rep)
        .into_par_iter()
        .map(|i| {
            let mut stream = Stream::new(master_seed, opts.stream_offset + i as u64);
            let traj = simulate_trajectory(data, s, x, policy, &mut stream, opts).map_err(|e| {
                match e {
                    CoreError::Runaway { cap, .. } => CoreError::Runaway { cap, seed: i as u64 },
                    other => other,
                }
            })?;
            Ok((traj.cost.as_f64(), traj.n_jumps()))
        })
        .collect();
    let mut costs = Vec::with_capacity(n_rep);
    let mut jumps = 0usize;
    let mut failures = 0usize;
    let mut first_err: Option<CoreError> = None;
    for r in runs {
        match r {
            Ok((c, j)) => {
                costs.push(c);
                jumps += j;
            }
            Err(e) => {
                failures += 1;
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        // Partial statistics go with the abort message.
        let partial = if costs.is_empty() {
            "no completed replications".to_string()
        } else {
            format!(
                "{} of {} replications completed, partial mean {:.6}",
                costs.len(),
                n_rep,
                costs.iter().sum::<f64>() / costs.len() as f64
            )
        };
        return Err(CoreError::AssumptionViolation(format!(
            "{e}; {failures} replications failed; {partial}"
        )));
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1.0);
    Ok(CostStats {
        mean,
        half_width_95: 1.96 * (var / n).sqrt(),
        n_rep,
        mean_jumps: jumps as f64 / n,
        seed: master_seed,
    })
}
