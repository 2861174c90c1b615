//! Value-function solver.
//!
//! The value function is the unique fixed point of the one-shot operator
//!
//! ```text
//! [Gψ](s,x) = inf over schedules of  χ(T)·h(φ) + ∫ₛᵀ χ(t)[ℓ(t) + λ(t) Σₑ qₑ(t)·ψ(t, φ⊗ₜe)] dt
//! ```
//!
//! approximated on a tensor grid over the lifted state with multilinear
//! interpolation and a finite set of piecewise-constant control schedules.
//! The horizon is partitioned so that every interval operator contracts with
//! factor `κ = 1 − e^{−C_λ·Δ}`; going backward, each interval is solved by
//! Picard iteration from the zero seed, stitching slices into the global
//! table.
//!
//! The jump term is integrated per interval as `½(g_m + g_{m+1})·(χ_m −
//! χ_{m+1})` with `g` the expected post-jump value of ψ, so constants are
//! preserved exactly: the χ-increment telescopes to `1 − χ(end)` no matter
//! the step size, which also pins the discrete contraction factor at
//! `1 − χ(end) ≤ κ`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::flow::{integrate, FlowNodes, Schedule};
use crate::model::ProblemData;
use crate::path::CadlagPath;
use crate::scalar::Scalar;

/// Contraction partition `0 = r₀ < … < r_N = T` with per-interval bounds.
#[derive(Debug, Clone)]
pub struct Partition<T> {
    pub knots: Vec<T>,
    /// `κ_k = 1 − e^{−C_λ(r_{k+1} − r_k)}`, one per interval.
    pub kappas: Vec<T>,
}

/// Uniform partition with mesh `min(0.49, −log(1−κ_target)/C_λ)`, shrunk so
/// the knots divide the horizon evenly. Every mesh is below 1/2.
pub fn build_partition<T: Scalar>(data: &ProblemData<T>, kappa_target: f64) -> Partition<T> {
    let t_end = data.horizon.as_f64();
    let c_lam = data.constants.c_lambda.max(1e-9);
    let mesh = (0.49f64).min(-(1.0 - kappa_target).ln() / c_lam);
    let n = (t_end / mesh).ceil().max(1.0) as usize;
    let knots: Vec<T> = (0..=n)
        .map(|k| T::of(t_end * k as f64 / n as f64))
        .collect();
    let kappas = knots
        .windows(2)
        .map(|w| T::one() - (-T::of(data.constants.c_lambda) * (w[1] - w[0])).exp())
        .collect();
    Partition { knots, kappas }
}

/// Time discretization of the operators: `n_t` sub-steps per partition
/// interval and `switches` control breakpoints per schedule.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub n_t: usize,
    pub switches: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { n_t: 64, switches: 0 }
    }
}

/// Tensor-product grid over the lifted features.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedGrid<T> {
    pub axes: Vec<Vec<T>>,
}

impl<T: Scalar> LiftedGrid<T> {
    pub fn from_lift(data: &ProblemData<T>) -> Self {
        let axes = data
            .lift
            .iter()
            .map(|f| {
                (0..f.points)
                    .map(|i| T::of(f.lo + (f.hi - f.lo) * i as f64 / (f.points - 1) as f64))
                    .collect()
            })
            .collect();
        LiftedGrid { axes }
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    /// Feature vector of flat node `j` (row-major, last axis fastest).
    pub fn node(&self, j: usize) -> Vec<T> {
        let mut idx = j;
        let mut out = vec![T::zero(); self.axes.len()];
        for a in (0..self.axes.len()).rev() {
            let n = self.axes[a].len();
            out[a] = self.axes[a][idx % n];
            idx /= n;
        }
        out
    }

    /// Multilinear interpolation corners `(flat index, weight)`; the flag
    /// reports clamping outside the declared bounds.
    pub fn interp(&self, feats: &[T]) -> (Vec<(usize, T)>, bool) {
        let mut corners: Vec<(usize, T)> = vec![(0, T::one())];
        let mut clamped = false;
        for (a, axis) in self.axes.iter().enumerate() {
            let n = axis.len();
            let mut v = feats[a];
            if v < axis[0] {
                v = axis[0];
                clamped = true;
            }
            if v > axis[n - 1] {
                v = axis[n - 1];
                clamped = true;
            }
            let i = axis.partition_point(|&u| u <= v).saturating_sub(1).min(n - 2);
            let th = (v - axis[i]) / (axis[i + 1] - axis[i]);
            let mut next = Vec::with_capacity(corners.len() * 2);
            for &(flat, w) in &corners {
                let base = flat * n;
                if th == T::zero() {
                    next.push((base + i, w));
                } else if th == T::one() {
                    next.push((base + i + 1, w));
                } else {
                    next.push((base + i, w * (T::one() - th)));
                    next.push((base + i + 1, w * th));
                }
            }
            corners = next;
        }
        (corners, clamped)
    }

    /// Flat index of the nearest node (ties toward the lower index).
    pub fn nearest(&self, feats: &[T]) -> usize {
        let mut flat = 0usize;
        for (a, axis) in self.axes.iter().enumerate() {
            let n = axis.len();
            let v = feats[a].max(axis[0]).min(axis[n - 1]);
            let i = axis.partition_point(|&u| u <= v).saturating_sub(1).min(n - 2);
            let lower = (v - axis[i]).abs();
            let upper = (axis[i + 1] - v).abs();
            let pick = if upper < lower { i + 1 } else { i };
            flat = flat * n + pick;
        }
        flat
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalMeta {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub kappa_bound: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub empirical_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveMeta {
    pub problem_hash: String,
    pub tool_version: String,
    pub kappa_target: f64,
    pub tol_fix: f64,
    pub n_t: usize,
    pub switches: usize,
    pub clamped_plan_queries: usize,
    pub intervals: Vec<IntervalMeta>,
}

/// Tabulated value function on (time grid × lifted grid) with multilinear
/// interpolation.
#[derive(Debug, Clone)]
pub struct ValueFunction<T> {
    pub times: Vec<T>,
    pub knots: Vec<T>,
    pub grid: LiftedGrid<T>,
    /// Row-major: `table[i * grid.len() + j]` at `(times[i], node j)`.
    pub table: Vec<T>,
    pub meta: SolveMeta,
}

impl<T: Scalar> ValueFunction<T> {
    pub fn row(&self, i: usize) -> &[T] {
        let g = self.grid.len();
        &self.table[i * g..(i + 1) * g]
    }

    /// Value at `(s, feats)`: linear in time between rows, multilinear in
    /// the lifted state; queries clamp to the grids.
    pub fn query_feats(&self, s: T, feats: &[T]) -> T {
        let (corners, _) = self.grid.interp(feats);
        let n = self.times.len();
        let s = s.max(self.times[0]).min(self.times[n - 1]);
        let i = self.times.partition_point(|&u| u <= s).saturating_sub(1);
        let dot = |row: &[T]| {
            corners
                .iter()
                .fold(T::zero(), |acc, &(j, w)| acc + w * row[j])
        };
        if self.times[i] == s || i + 1 >= n {
            return dot(self.row(i));
        }
        let th = (s - self.times[i]) / (self.times[i + 1] - self.times[i]);
        (T::one() - th) * dot(self.row(i)) + th * dot(self.row(i + 1))
    }

    /// Value at `(s, x)` through the lift of the stopped path.
    pub fn query(&self, data: &ProblemData<T>, s: T, x: &CadlagPath<T>) -> Result<T> {
        let feats = data.features_of_path(x, s)?;
        Ok(self.query_feats(s, &feats))
    }

    pub fn sup_norm(&self) -> T {
        self.table.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Little-endian binary layout: header with the grids, then the
    /// row-major table.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"PDPV");
        out.extend_from_slice(&1u32.to_le_bytes());
        let hash = self.meta.problem_hash.as_bytes();
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash);
        let tool = crate::TOOL_VERSION.as_bytes();
        out.extend_from_slice(&(tool.len() as u32).to_le_bytes());
        out.extend_from_slice(tool);
        out.extend_from_slice(&(self.knots.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.times.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.axes.len() as u32).to_le_bytes());
        for a in &self.grid.axes {
            out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        }
        let push_f64s = |vals: &[T], out: &mut Vec<u8>| {
            for v in vals {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        push_f64s(&self.knots, &mut out);
        push_f64s(&self.times, &mut out);
        for a in &self.grid.axes {
            push_f64s(a, &mut out);
        }
        push_f64s(&self.table, &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ValueFunction<T>> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(CoreError::Schema("value file truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        if take(&mut pos, 4)? != b"PDPV" {
            return Err(CoreError::Schema("not a value file".into()));
        }
        if u32_at(&mut pos)? != 1 {
            return Err(CoreError::Schema("unsupported value file version".into()));
        }
        let hash_len = u32_at(&mut pos)? as usize;
        let hash = String::from_utf8(take(&mut pos, hash_len)?.to_vec())
            .map_err(|_| CoreError::Schema("bad hash in value file".into()))?;
        let tool_len = u32_at(&mut pos)? as usize;
        let tool = String::from_utf8(take(&mut pos, tool_len)?.to_vec())
            .map_err(|_| CoreError::Schema("bad version in value file".into()))?;
        let n_knots = u32_at(&mut pos)? as usize;
        let n_times = u32_at(&mut pos)? as usize;
        let n_axes = u32_at(&mut pos)? as usize;
        let mut axis_lens = Vec::with_capacity(n_axes);
        for _ in 0..n_axes {
            axis_lens.push(u32_at(&mut pos)? as usize);
        }
        let f64s = |pos: &mut usize, n: usize| -> Result<Vec<T>> {
            let raw = take(pos, n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect())
        };
        let knots = f64s(&mut pos, n_knots)?;
        let times = f64s(&mut pos, n_times)?;
        let mut axes = Vec::with_capacity(n_axes);
        for &len in &axis_lens {
            axes.push(f64s(&mut pos, len)?);
        }
        let grid = LiftedGrid { axes };
        let table = f64s(&mut pos, n_times * grid.len())?;
        Ok(ValueFunction {
            times,
            knots,
            grid,
            table,
            meta: SolveMeta {
                problem_hash: hash,
                tool_version: tool,
                kappa_target: 0.0,
                tol_fix: 0.0,
                n_t: 0,
                switches: 0,
                clamped_plan_queries: 0,
                intervals: Vec::new(),
            },
        })
    }
}

/// Piecewise-constant schedules over the given interior breakpoints:
/// constants first (label order), then every choice of up to `m` breakpoints
/// with consecutive labels differing.
pub(crate) fn build_schedules<T: Scalar>(
    n_labels: usize,
    start: T,
    interior: &[T],
    m: usize,
) -> Result<Vec<Schedule<T>>> {
    let mut out: Vec<Schedule<T>> = (0..n_labels).map(Schedule::constant).collect();
    if m == 0 {
        return Ok(out);
    }
    fn combos<T: Copy>(items: &[T], k: usize) -> Vec<Vec<T>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut acc = Vec::new();
        for (i, &x) in items.iter().enumerate() {
            for mut tail in combos(&items[i + 1..], k - 1) {
                let mut v = vec![x];
                v.append(&mut tail);
                acc.push(v);
            }
        }
        acc
    }
    for k in 1..=m {
        for breaks in combos(interior, k) {
            let mut labelings: Vec<Vec<usize>> = (0..n_labels).map(|l| vec![l]).collect();
            for _ in 0..k {
                let mut next = Vec::new();
                for lab in &labelings {
                    for l in 0..n_labels {
                        if *lab.last().unwrap() != l {
                            let mut v = lab.clone();
                            v.push(l);
                            next.push(v);
                        }
                    }
                }
                labelings = next;
            }
            for lab in labelings {
                let mut segs = vec![(start, lab[0])];
                for (i, &b) in breaks.iter().enumerate() {
                    segs.push((b, lab[i + 1]));
                }
                out.push(Schedule::new(segs)?);
                if out.len() > 20_000 {
                    return Err(CoreError::Budget(format!(
                        "schedule grid exceeds 20000 entries (switches = {m})"
                    )));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Interval plans: the interval operator precompiled against a fixed grid
// ---------------------------------------------------------------------------

/// Terminal data of an interval operator.
pub(crate) enum EtaSpec<'a, T> {
    /// Evaluate the terminal cost exactly at the flow endpoint.
    Cost,
    /// Interpolate a committed value row at the upper knot.
    Row(&'a [T]),
}

struct NodePlan<T> {
    /// ψ-independent part: discounted running cost plus the terminal term.
    base: T,
    /// ψ contributions `(local row, grid index, weight)`.
    contrib: Vec<(u32, u32, T)>,
}

/// All schedules' plans for one partition interval on its local time grid.
pub(crate) struct IntervalPlans<T> {
    pub times: Vec<T>,
    pub grid_len: usize,
    pub n_sched: usize,
    plans: Vec<NodePlan<T>>,
    pub clamped: usize,
}

pub(crate) fn build_interval_plans<T: Scalar>(
    data: &ProblemData<T>,
    grid: &LiftedGrid<T>,
    lo: T,
    hi: T,
    n_t: usize,
    switches: usize,
    eta: EtaSpec<'_, T>,
) -> Result<IntervalPlans<T>> {
    let times: Vec<T> = (0..=n_t)
        .map(|j| lo + (hi - lo) * T::of(j as f64 / n_t as f64))
        .collect();
    let interior = &times[1..n_t];
    let schedules = build_schedules(data.controls.len(), lo, interior, switches)?;
    let g_len = grid.len();
    let eta_row = match &eta {
        EtaSpec::Cost => None,
        EtaSpec::Row(r) => Some(*r),
    };

    let results: Vec<Result<(NodePlan<T>, usize)>> = (0..(n_t + 1) * g_len * schedules.len())
        .into_par_iter()
        .map(|flat| {
            let s_idx = flat % schedules.len();
            let rest = flat / schedules.len();
            let j = rest % g_len;
            let i = rest / g_len;
            let feats0 = grid.node(j);
            plan_for(data, grid, &times, i, &feats0, &schedules[s_idx], &eta_row)
        })
        .collect();

    let mut plans = Vec::with_capacity(results.len());
    let mut clamped = 0usize;
    for r in results {
        let (p, c) = r?;
        clamped += c;
        plans.push(p);
    }
    Ok(IntervalPlans { times, grid_len: g_len, n_sched: schedules.len(), plans, clamped })
}

fn plan_for<T: Scalar>(
    data: &ProblemData<T>,
    grid: &LiftedGrid<T>,
    times: &[T],
    i: usize,
    feats0: &[T],
    schedule: &Schedule<T>,
    eta_row: &Option<&[T]>,
) -> Result<(NodePlan<T>, usize)> {
    let state0 = data.state_of_feats(feats0);
    let fl = integrate(data, &times[i..], &state0, feats0, schedule)?;
    let n = fl.times.len();
    let mut clamped = 0usize;
    let mut base = T::zero();
    let mut contrib: Vec<(u32, u32, T)> = Vec::new();

    for m in 0..n - 1 {
        let h = fl.times[m + 1] - fl.times[m];
        base += h * (fl.chi[m] * fl.cost_left[m] + fl.chi[m + 1] * fl.cost_right[m]) * T::of(0.5);
        let dchi = (fl.chi[m] - fl.chi[m + 1]) * T::of(0.5);
        if dchi == T::zero() {
            continue;
        }
        let ctrl = schedule.label_at(fl.times[m]);
        for node in [m, m + 1] {
            let t_node = fl.times[node];
            let feats = fl.feat_row(node);
            let atoms = data.eval_atoms(t_node, feats, ctrl)?;
            for (mark, q) in atoms {
                let reset = data.reset_feats(feats, &mark);
                let (corners, cl) = grid.interp(&reset);
                if cl {
                    clamped += 1;
                }
                for (gidx, w) in corners {
                    contrib.push(((i + node) as u32, gidx as u32, dchi * q * w));
                }
            }
        }
    }

    // Terminal weight χ(end)·η at the flow endpoint.
    let chi_end = *fl.chi.last().unwrap();
    let feats_end = fl.feat_row(n - 1);
    match eta_row {
        None => base += chi_end * data.terminal_cost_of(feats_end)?,
        Some(row) => {
            let (corners, cl) = grid.interp(feats_end);
            if cl {
                clamped += 1;
            }
            let v = corners.iter().fold(T::zero(), |acc, &(j, w)| acc + w * row[j]);
            base += chi_end * v;
        }
    }

    // Merge duplicate (row, grid) keys to shrink the sweep workload.
    contrib.sort_by_key(|&(r, g, _)| ((r as u64) << 32) | g as u64);
    let mut merged: Vec<(u32, u32, T)> = Vec::with_capacity(contrib.len());
    for (r, g, w) in contrib {
        if let Some(last) = merged.last_mut() {
            if last.0 == r && last.1 == g {
                last.2 += w;
                continue;
            }
        }
        merged.push((r, g, w));
    }
    Ok((NodePlan { base, contrib: merged }, clamped))
}

impl<T: Scalar> IntervalPlans<T> {
    /// One application of the interval operator to the local table `psi`
    /// (rows 0..=n_t over the grid): min over schedules at every node.
    pub fn sweep(&self, psi: &[T]) -> Vec<T> {
        let g = self.grid_len;
        let rows = self.times.len();
        (0..rows * g)
            .into_par_iter()
            .map(|node| {
                let mut best = T::infinity();
                for s in 0..self.n_sched {
                    let plan = &self.plans[node * self.n_sched + s];
                    let mut v = plan.base;
                    for &(r, gi, w) in &plan.contrib {
                        v += w * psi[r as usize * g + gi as usize];
                    }
                    if v < best {
                        best = v;
                    }
                }
                best
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Backward value iteration
// ---------------------------------------------------------------------------

/// Solve for the value function: backward over the contraction partition,
/// Picard-iterating each interval operator from the zero seed until the
/// sup-change is below `tol_fix·(1 − κ_k)`.
pub fn solve_value<T: Scalar>(
    data: &ProblemData<T>,
    quad: &QuadratureSpec,
    kappa_target: f64,
    tol_fix: f64,
) -> Result<ValueFunction<T>> {
    let part = build_partition(data, kappa_target);
    let n_int = part.knots.len() - 1;
    let nt = quad.n_t.max(2);
    let grid = LiftedGrid::from_lift(data);
    let g = grid.len();

    // Global time grid: nt sub-steps per interval, shared with the plans.
    let mut times: Vec<T> = Vec::with_capacity(n_int * nt + 1);
    for k in 0..n_int {
        let (lo, hi) = (part.knots[k], part.knots[k + 1]);
        for j in 0..nt {
            times.push(lo + (hi - lo) * T::of(j as f64 / nt as f64));
        }
    }
    times.push(part.knots[n_int]);

    let mut table = vec![T::zero(); times.len() * g];
    // Terminal row: h on grid nodes.
    for j in 0..g {
        let feats = grid.node(j);
        table[(times.len() - 1) * g + j] = data.terminal_cost_of(&feats)?;
    }

    let iter_cap = 200usize;
    let mut metas = Vec::with_capacity(n_int);
    let mut clamped_total = 0usize;
    for k in (0..n_int).rev() {
        let (lo, hi) = (part.knots[k], part.knots[k + 1]);
        let top_row_idx = (k + 1) * nt;
        let eta_owned: Vec<T> = table[top_row_idx * g..(top_row_idx + 1) * g].to_vec();
        let eta = if k == n_int - 1 { EtaSpec::Cost } else { EtaSpec::Row(&eta_owned) };
        let plans = build_interval_plans(data, &grid, lo, hi, nt, quad.switches, eta)?;
        clamped_total += plans.clamped;

        let kappa = part.kappas[k].as_f64();
        let threshold = tol_fix * (1.0 - kappa);
        let mut psi = vec![T::zero(); (nt + 1) * g];
        let mut prev_res = f64::INFINITY;
        let mut ratio = 0.0f64;
        let mut iterations = 0usize;
        let mut residual = f64::INFINITY;
        for it in 0..iter_cap {
            let next = plans.sweep(&psi);
            residual = psi
                .iter()
                .zip(&next)
                .fold(0.0f64, |m, (a, b)| m.max((*a - *b).abs().as_f64()));
            psi = next;
            iterations = it + 1;
            if prev_res.is_finite() && prev_res > 1e-300 {
                ratio = residual / prev_res;
            }
            prev_res = residual;
            if residual <= threshold {
                break;
            }
            if it + 1 == iter_cap {
                return Err(CoreError::NonContraction {
                    interval: k,
                    iterations: iter_cap,
                    residual,
                });
            }
        }
        metas.push(IntervalMeta {
            index: k,
            lo: lo.as_f64(),
            hi: hi.as_f64(),
            kappa_bound: kappa,
            iterations,
            final_residual: residual,
            empirical_ratio: ratio,
        });
        // Commit all rows below the upper knot.
        let base = k * nt;
        for j_row in 0..nt {
            let dst = (base + j_row) * g;
            let src = j_row * g;
            table[dst..dst + g].copy_from_slice(&psi[src..src + g]);
        }
    }
    metas.reverse();

    Ok(ValueFunction {
        times,
        knots: part.knots,
        grid,
        table,
        meta: SolveMeta {
            problem_hash: data.hash().to_string(),
            tool_version: crate::TOOL_VERSION.to_string(),
            kappa_target,
            tol_fix,
            n_t: nt,
            switches: quad.switches,
            clamped_plan_queries: clamped_total,
            intervals: metas,
        },
    })
}

// ---------------------------------------------------------------------------
// Pointwise operators
// ---------------------------------------------------------------------------

fn quad_nodes<T: Scalar>(grid_times: &[T], s: T, end: T) -> Vec<T> {
    let mut nodes = vec![s, end];
    nodes.extend(grid_times.iter().copied().filter(|&t| t > s && t < end));
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    nodes
}

/// The G-quadrature along one flow: discounted running cost, expected
/// post-jump ψ against the exact χ-increments, and the terminal term.
fn quad_along_flow<T: Scalar>(
    data: &ProblemData<T>,
    fl: &FlowNodes<T>,
    schedule: &Schedule<T>,
    psi_q: &impl Fn(T, &[T]) -> Result<T>,
    eta_q: &impl Fn(&[T]) -> Result<T>,
) -> Result<T> {
    let n = fl.times.len();
    let mut total = T::zero();
    for m in 0..n - 1 {
        let h = fl.times[m + 1] - fl.times[m];
        total +=
            h * (fl.chi[m] * fl.cost_left[m] + fl.chi[m + 1] * fl.cost_right[m]) * T::of(0.5);
        let dchi = (fl.chi[m] - fl.chi[m + 1]) * T::of(0.5);
        if dchi == T::zero() {
            continue;
        }
        let ctrl = schedule.label_at(fl.times[m]);
        for node in [m, m + 1] {
            let t_node = fl.times[node];
            let feats = fl.feat_row(node);
            let mut g_val = T::zero();
            for (mark, q) in data.eval_atoms(t_node, feats, ctrl)? {
                let reset = data.reset_feats(feats, &mark);
                g_val += q * psi_q(t_node, &reset)?;
            }
            total += dchi * g_val;
        }
    }
    let chi_end = *fl.chi.last().unwrap();
    total += chi_end * eta_q(fl.feat_row(n - 1))?;
    Ok(total)
}

/// Schedule grid for pointwise evaluations. Besides the constant and
/// `switches`-breakpoint schedules, every labeling that switches exactly at
/// the partition knots inside the span is included: the backward solver
/// re-optimizes the control at each knot along the no-jump flow, so the
/// pointwise operator must be given the same freedom For the fixed-point and
/// dynamic-programming identities to close.
fn pointwise_schedules<T: Scalar>(
    n_labels: usize,
    nodes: &[T],
    knots: &[T],
    switches: usize,
) -> Result<Vec<Schedule<T>>> {
    let start = nodes[0];
    let end = *nodes.last().unwrap();
    let interior = if nodes.len() > 2 { &nodes[1..nodes.len() - 1] } else { &[][..] };
    let mut schedules = build_schedules(n_labels, start, interior, switches)?;
    let crossed: Vec<T> = knots.iter().copied().filter(|&k| k > start && k < end).collect();
    if !crossed.is_empty() {
        let mut labelings: Vec<Vec<usize>> = (0..n_labels).map(|l| vec![l]).collect();
        for _ in 0..crossed.len() {
            let mut next = Vec::new();
            for lab in &labelings {
                for l in 0..n_labels {
                    let mut v = lab.clone();
                    v.push(l);
                    next.push(v);
                }
            }
            labelings = next;
        }
        for lab in labelings {
            if lab.windows(2).all(|w| w[0] == w[1]) {
                continue; // constants are already present
            }
            let mut segs = vec![(start, lab[0])];
            for (i, &k) in crossed.iter().enumerate() {
                if lab[i + 1] != lab[i] {
                    segs.push((k, lab[i + 1]));
                }
            }
            schedules.push(Schedule::new(segs)?);
        }
    }
    Ok(schedules)
}

fn g_min_over_schedules<T: Scalar>(
    data: &ProblemData<T>,
    feats0: &[T],
    nodes: &[T],
    knots: &[T],
    switches: usize,
    psi_q: &impl Fn(T, &[T]) -> Result<T>,
    eta_q: &impl Fn(&[T]) -> Result<T>,
) -> Result<(T, usize, Vec<Schedule<T>>)> {
    let schedules = pointwise_schedules(data.controls.len(), nodes, knots, switches)?;
    let state0 = data.state_of_feats(feats0);
    let mut best = T::infinity();
    let mut arg = 0usize;
    for (i, sched) in schedules.iter().enumerate() {
        let fl = integrate(data, nodes, &state0, feats0, sched)?;
        let v = quad_along_flow(data, &fl, sched, psi_q, eta_q)?;
        if v < best {
            best = v;
            arg = i;
        }
    }
    Ok((best, arg, schedules))
}

/// One-shot operator `[Gψ](s, x)` with terminal cost `h`, minimized over the
/// schedule grid.
pub fn apply_g<T: Scalar>(
    data: &ProblemData<T>,
    psi: &ValueFunction<T>,
    s: T,
    x: &CadlagPath<T>,
    quad: &QuadratureSpec,
) -> Result<T> {
    let feats0 = data.features_of_path(x, s)?;
    apply_g_feats(data, psi, s, &feats0, quad)
}

/// [`apply_g`] from a lifted feature vector.
pub fn apply_g_feats<T: Scalar>(
    data: &ProblemData<T>,
    psi: &ValueFunction<T>,
    s: T,
    feats0: &[T],
    quad: &QuadratureSpec,
) -> Result<T> {
    let nodes = quad_nodes(&psi.times, s, data.horizon);
    let psi_q = |t: T, f: &[T]| Ok(psi.query_feats(t, f));
    let eta_q = |f: &[T]| data.terminal_cost_of(f);
    let (v, _, _) =
        g_min_over_schedules(data, feats0, &nodes, &psi.knots, quad.switches, &psi_q, &eta_q)?;
    Ok(v)
}

/// Interval operator evaluation `[(G_{s,s₁;η})ψ](s, x)` with `ψ = η = V̄`
/// (the dynamic-programming right-hand side). At `s₁ = horizon` the terminal
/// cost is evaluated exactly, which makes the result agree identically with
/// [`apply_g`].
pub fn apply_interval_value<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    s: T,
    x: &CadlagPath<T>,
    s1: T,
    quad: &QuadratureSpec,
) -> Result<T> {
    if s1 < s || s1 > data.horizon {
        return Err(CoreError::Horizon { t: s1.as_f64(), horizon: data.horizon.as_f64() });
    }
    let feats0 = data.features_of_path(x, s)?;
    if s1 == s {
        return Ok(vf.query_feats(s, &feats0));
    }
    let nodes = quad_nodes(&vf.times, s, s1);
    let psi_q = |t: T, f: &[T]| Ok(vf.query_feats(t, f));
    if s1 == data.horizon {
        let eta_q = |f: &[T]| data.terminal_cost_of(f);
        let (v, _, _) =
            g_min_over_schedules(data, &feats0, &nodes, &vf.knots, quad.switches, &psi_q, &eta_q)?;
        Ok(v)
    } else {
        let eta_q = |f: &[T]| Ok(vf.query_feats(s1, f));
        let (v, _, _) =
            g_min_over_schedules(data, &feats0, &nodes, &vf.knots, quad.switches, &psi_q, &eta_q)?;
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Hamiltonians
// ---------------------------------------------------------------------------

/// Local Hamiltonian `F_ψ(t, x, y, z)`: the minimum over control actions of
/// `ℓ + ⟨f, z⟩ − λ·y + λ·Σₑ qₑ·ψ(t, x⊗ₜe)`. Called with `y = ψ(t, x)` it is
/// the full non-local Hamiltonian `F`.
pub fn hamiltonian_f_psi<T: Scalar>(
    data: &ProblemData<T>,
    psi: &ValueFunction<T>,
    t: T,
    x: &CadlagPath<T>,
    y: T,
    z: &[T],
) -> Result<T> {
    let feats = data.features_of_path(x, t)?;
    hamiltonian_f_psi_feats(data, psi, t, &feats, y, z)
}

/// [`hamiltonian_f_psi`] from a lifted feature vector.
pub fn hamiltonian_f_psi_feats<T: Scalar>(
    data: &ProblemData<T>,
    psi: &ValueFunction<T>,
    t: T,
    feats: &[T],
    y: T,
    z: &[T],
) -> Result<T> {
    let mut best = T::infinity();
    for a in 0..data.controls.len() {
        let (f, lam, run) = data.eval_coeffs(t, feats, a)?;
        let dot = f.iter().zip(z).fold(T::zero(), |acc, (u, v)| acc + *u * *v);
        let mut jump = T::zero();
        if lam > T::zero() {
            for (mark, q) in data.eval_atoms(t, feats, a)? {
                let reset = data.reset_feats(feats, &mark);
                jump += q * psi.query_feats(t, &reset);
            }
        }
        let v = run + dot - lam * y + lam * jump;
        if v < best {
            best = v;
        }
    }
    Ok(best)
}

/// Non-local Hamiltonian `F(t, x, ψ(t,x), z, ψ(t, x⊗ₜ·))`.
pub fn hamiltonian_f<T: Scalar>(
    data: &ProblemData<T>,
    psi: &ValueFunction<T>,
    t: T,
    x: &CadlagPath<T>,
    z: &[T],
) -> Result<T> {
    let y = psi.query(data, t, x)?;
    hamiltonian_f_psi(data, psi, t, x, y, z)
}

// ---------------------------------------------------------------------------
// Policy extraction
// ---------------------------------------------------------------------------

/// Extracted jump-feedback policy: at every (time node, lifted node), the
/// schedule that attains the grid minimum of G over the remaining horizon.
#[derive(Debug, Clone)]
pub struct PolicyTable<T> {
    pub times: Vec<T>,
    pub grid: LiftedGrid<T>,
    pub schedules: Vec<Schedule<T>>,
}

impl<T: Scalar> PolicyTable<T> {
    /// Snap to the nearest time and lifted node (ties toward lower indices).
    pub fn lookup(&self, t: T, feats: &[T]) -> Schedule<T> {
        let n = self.times.len();
        let i = {
            let p = self.times.partition_point(|&u| u <= t);
            if p == 0 {
                0
            } else if p >= n {
                n - 1
            } else {
                let (lo, hi) = (self.times[p - 1], self.times[p]);
                if (t - lo) <= (hi - t) {
                    p - 1
                } else {
                    p
                }
            }
        };
        let j = self.grid.nearest(feats);
        self.schedules[i * self.grid.len() + j].clone()
    }
}

/// For every (time node, lifted node), minimize G over the schedule grid on
/// the remaining horizon; ties break toward the lowest schedule index.
pub fn extract_policy<T: Scalar>(
    data: &ProblemData<T>,
    vf: &ValueFunction<T>,
    quad: &QuadratureSpec,
) -> Result<PolicyTable<T>> {
    let g = vf.grid.len();
    let rows = vf.times.len();
    let psi_q = |t: T, f: &[T]| Ok(vf.query_feats(t, f));
    let eta_q = |f: &[T]| data.terminal_cost_of(f);
    let entries: Vec<Result<Schedule<T>>> = (0..rows * g)
        .into_par_iter()
        .map(|flat| {
            let i = flat / g;
            let j = flat % g;
            let s = vf.times[i];
            let feats0 = vf.grid.node(j);
            if s >= data.horizon {
                return Ok(Schedule::constant(data.default_control));
            }
            let nodes = quad_nodes(&vf.times, s, data.horizon);
            let (_, arg, schedules) =
                g_min_over_schedules(data, &feats0, &nodes, &vf.knots, quad.switches, &psi_q, &eta_q)?;
            Ok(schedules[arg].clone())
        })
        .collect();
    let mut schedules = Vec::with_capacity(rows * g);
    for e in entries {
        schedules.push(e?);
    }
    Ok(PolicyTable { times: vf.times.clone(), grid: vf.grid.clone(), schedules })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems;

    #[test]
    fn partition_formula_cases() {
        let m: ProblemData<f64> = problems::builtin("two_control_markov").unwrap();
        // C_λ = 1, κ_target = 0.39: raw mesh min(0.49, 0.494) = 0.49 → 3
        // intervals of 1/3 with κ = 1 − e^{−1/3}.
        let p = build_partition(&m, 0.39);
        assert_eq!(p.knots.len(), 4);
        assert!((p.knots[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.kappas[0] - (1.0 - (-1.0f64 / 3.0).exp())).abs() < 1e-12);
        for w in p.knots.windows(2) {
            assert!(w[1] - w[0] < 0.5);
        }
        // C_λ = 0 caps the mesh at 0.49 regardless of the target: a horizon
        // below the cap yields a single interval with κ = 0.
        let text = m
            .canonical_json()
            .replace(r#""horizon": 1.0"#, r#""horizon": 0.4"#)
            .replace(r#""Clam": 1.0"#, r#""Clam": 0.0"#)
            .replace(r#""intensity": "ctrl[rate]""#, r#""intensity": "0""#);
        let m0: ProblemData<f64> = ProblemData::from_json(&text).unwrap();
        let p0 = build_partition(&m0, 0.5);
        assert_eq!(p0.knots.len(), 2);
        assert_eq!(p0.kappas[0], 0.0);
        // T = 2 at mesh 0.4: six knots, spacing 0.4.
        let text2 = m.canonical_json().replace(r#""horizon": 1.0"#, r#""horizon": 2.0"#);
        let m2: ProblemData<f64> = ProblemData::from_json(&text2).unwrap();
        let p2 = build_partition(&m2, 1.0 - (-0.4f64).exp());
        assert_eq!(p2.knots.len(), 6);
        assert!((p2.knots[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grid_interp_and_nearest() {
        let g = LiftedGrid { axes: vec![vec![0.0, 1.0, 2.0], vec![0.0, 10.0]] };
        assert_eq!(g.len(), 6);
        assert_eq!(g.node(0), vec![0.0, 0.0]);
        assert_eq!(g.node(5), vec![2.0, 10.0]);
        let (corners, cl) = g.interp(&[0.5, 10.0]);
        assert!(!cl);
        let total: f64 = corners.iter().map(|c| c.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let (_, clamped) = g.interp(&[-1.0, 0.0]);
        assert!(clamped);
        assert_eq!(g.nearest(&[0.4, 4.0]), 0);
        assert_eq!(g.nearest(&[0.6, 6.0]), 3);
    }

    #[test]
    fn constant_model_fixed_point_is_constant() {
        let m: ProblemData<f64> = problems::builtin("constant_terminal").unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 16, switches: 0 }, 0.5, 1e-8).unwrap();
        for v in &vf.table {
            assert!((v - 3.0).abs() < 1e-8, "value {v}");
        }
        let x = CadlagPath::constant(&[0.0]);
        let g0 = apply_g(&m, &vf, 0.3, &x, &QuadratureSpec { n_t: 16, switches: 0 }).unwrap();
        assert!((g0 - 3.0).abs() < 1e-8);
    }

    #[test]
    fn unit_running_value_is_time_to_go() {
        let m: ProblemData<f64> = problems::builtin("unit_running").unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 64, switches: 0 }, 0.5, 1e-7).unwrap();
        let g = vf.grid.len();
        let mut worst = 0.0f64;
        for (i, &t) in vf.times.iter().enumerate() {
            for j in 0..g {
                worst = worst.max((vf.table[i * g + j] - (1.0 - t)).abs());
            }
        }
        assert!(worst <= 1e-4, "sup deviation {worst}");
    }

    #[test]
    fn apply_g_forced_identities() {
        // ψ ≡ K with ℓ ≡ 0, h ≡ K: G returns K (χ/λχ telescoping).
        let m: ProblemData<f64> = problems::builtin("constant_terminal").unwrap();
        let quad = QuadratureSpec { n_t: 32, switches: 0 };
        let vf = solve_value(&m, &quad, 0.5, 1e-9).unwrap();
        let x = CadlagPath::constant(&[1.0]);
        let v = apply_g(&m, &vf, 0.25, &x, &quad).unwrap();
        assert!((v - 3.0).abs() < 1e-10, "{v}");

        // ψ(t,·) = T − t with ℓ ≡ 1, h ≡ 0: G returns T − s.
        let mu: ProblemData<f64> = problems::builtin("unit_running").unwrap();
        let quadu = QuadratureSpec { n_t: 512, switches: 0 };
        let mut vfu = solve_value(&mu, &quadu, 0.5, 1e-9).unwrap();
        // Overwrite with the exact ψ to isolate the quadrature error.
        let g = vfu.grid.len();
        for i in 0..vfu.times.len() {
            let t = vfu.times[i];
            for j in 0..g {
                vfu.table[i * g + j] = 1.0 - t;
            }
        }
        let s = 0.21875;
        let v = apply_g(&mu, &vfu, s, &x, &quadu).unwrap();
        assert!((v - (1.0 - s)).abs() < 1e-6, "{v}");
    }

    #[test]
    fn zero_intensity_reduces_to_deterministic_control() {
        // With λ ≡ 0 the operator is a pure deterministic control problem;
        // enumerate the schedule grid by hand as the oracle.
        let m: ProblemData<f64> = ProblemData::from_json(
            r#"{
            "dimension": 1,
            "horizon": 1.0,
            "controls": [{"name": "a", "consts": {"v": 1.0, "run": 0.2}},
                         {"name": "b", "consts": {"v": -1.0, "run": 0.1}}],
            "default_control": "a",
            "constants": {"Cf": 2.0, "Clam": 0.0, "Lf": 1.0, "LQ": 1.0},
            "lift": [{"kind": "terminal_value", "component": 0, "lo": -2, "hi": 2, "points": 17}],
            "drift": "ctrl[v]",
            "intensity": "0",
            "running_cost": "ctrl[run]",
            "terminal_cost": "abs(feat[0])",
            "kernel": {"normalize": true, "atoms": [{"mark": "feat[0]+1", "weight": "1"}]}
        }"#,
        )
        .unwrap();
        let quad = QuadratureSpec { n_t: 16, switches: 1 };
        let vf = solve_value(&m, &quad, 0.5, 1e-9).unwrap();
        let s = 0.5;
        let x = CadlagPath::constant(&[0.25]);
        let got = apply_g(&m, &vf, s, &x, &quad).unwrap();

        // Oracle: exhaustive enumeration over the same schedule set with
        // exact piecewise-linear dynamics.
        let nodes: Vec<f64> = {
            let mut v = vec![s, 1.0];
            v.extend(vf.times.iter().copied().filter(|&t| t > s && t < 1.0));
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
            v
        };
        let dirs = [(1.0, 0.2), (-1.0, 0.1)];
        let mut plans: Vec<Vec<(f64, (f64, f64))>> = Vec::new();
        for d in dirs {
            plans.push(vec![(s, d)]);
        }
        for &sw in &nodes[1..nodes.len() - 1] {
            for d0 in dirs {
                for d1 in dirs {
                    if d0 != d1 {
                        plans.push(vec![(s, d0), (sw, d1)]);
                    }
                }
            }
        }
        let mut best = f64::INFINITY;
        for plan in plans {
            let mut xv = 0.25;
            let mut cost = 0.0;
            let mut t = s;
            for (i, &(_, (v, run))) in plan.iter().enumerate() {
                let until = plan.get(i + 1).map_or(1.0, |p| p.0);
                cost += run * (until - t);
                xv += v * (until - t);
                t = until;
            }
            cost += xv.abs();
            best = best.min(cost);
        }
        assert!((got - best).abs() < 1e-9, "got {got} oracle {best}");
    }

    #[test]
    fn interval_operator_constant_eta_fixed_point() {
        // η ≡ K, ℓ ≡ 0, ψ ≡ K: the interval image is K on every node.
        let m: ProblemData<f64> = problems::builtin("constant_terminal").unwrap();
        let grid = LiftedGrid::from_lift(&m);
        let g = grid.len();
        let eta = vec![3.0f64; g];
        let plans = build_interval_plans(&m, &grid, 0.25, 0.5, 8, 0, EtaSpec::Row(&eta)).unwrap();
        let psi = vec![3.0f64; 9 * g];
        let img = plans.sweep(&psi);
        for v in img {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_operator_matches_independent_reimplementation() {
        // One Picard step from ψ₀ ≡ 0 against a straight-line quadrature
        // written independently of the plan machinery. With f ≡ 0 and ψ ≡ 0
        // the image is ∫ χℓ + χ(end)·η(x) per constant schedule.
        let m: ProblemData<f64> = problems::builtin("two_control_markov").unwrap();
        let grid = LiftedGrid::from_lift(&m);
        let g = grid.len();
        let (lo, hi, nt) = (0.5, 0.75, 8usize);
        let eta: Vec<f64> = (0..g).map(|j| grid.node(j)[0].abs().min(2.0)).collect();
        let plans = build_interval_plans(&m, &grid, lo, hi, nt, 0, EtaSpec::Row(&eta)).unwrap();
        let psi = vec![0.0f64; (nt + 1) * g];
        let img = plans.sweep(&psi);

        let times: Vec<f64> =
            (0..=nt).map(|j| lo + (hi - lo) * j as f64 / nt as f64).collect();
        let eta_of = |xv: f64| {
            let (corners, _) = grid.interp(&[xv]);
            corners.iter().map(|&(j, w)| w * eta[j]).sum::<f64>()
        };
        for i in 0..=nt {
            for j in 0..g {
                let xv = grid.node(j)[0];
                let mut best = f64::INFINITY;
                for (run, rate) in [(0.3, 1.0), (0.8, 0.2)] {
                    let mut total = 0.0;
                    let mut chi_prev = 1.0f64;
                    for k in i..nt {
                        let h = times[k + 1] - times[k];
                        let chi_next = chi_prev * (-rate * h).exp();
                        total += h * (chi_prev * run + chi_next * run) * 0.5;
                        chi_prev = chi_next;
                    }
                    total += chi_prev * eta_of(xv);
                    best = best.min(total);
                }
                let got = img[i * g + j];
                assert!(
                    (got - best).abs() < 1e-10,
                    "node ({i},{j}): got {got}, straight-line {best}"
                );
            }
        }
    }

    #[test]
    fn monotonicity_of_the_sweep() {
        let m: ProblemData<f64> = problems::builtin("two_control_markov").unwrap();
        let grid = LiftedGrid::from_lift(&m);
        let g = grid.len();
        let nt = 8;
        let eta = vec![1.0f64; g];
        let plans =
            build_interval_plans(&m, &grid, 0.0, 1.0 / 3.0, nt, 0, EtaSpec::Row(&eta)).unwrap();
        let psi1 = vec![0.5f64; (nt + 1) * g];
        let psi2 = vec![0.75f64; (nt + 1) * g];
        let (img1, img2) = (plans.sweep(&psi1), plans.sweep(&psi2));
        for (a, b) in img1.iter().zip(&img2) {
            assert!(a <= b);
        }
    }

    #[test]
    fn hamiltonian_cases() {
        let m: ProblemData<f64> = problems::builtin("two_control_markov").unwrap();
        let quad = QuadratureSpec { n_t: 16, switches: 0 };
        let vf = solve_value(&m, &quad, 0.5, 1e-6).unwrap();
        let x = CadlagPath::constant(&[0.0]);
        // ψ ≡ y cancels the jump bracket: F = min_a {ℓ + ⟨f, z⟩} = min ℓ.
        let mut flat = vf.clone();
        for v in &mut flat.table {
            *v = 2.0;
        }
        let v = hamiltonian_f_psi(&m, &flat, 0.5, &x, 2.0, &[0.7]).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        // Single-control, λ = 0, ℓ = 0, f = c: F = ⟨c, z⟩.
        let m0: ProblemData<f64> = ProblemData::from_json(
            r#"{
            "dimension": 1,
            "horizon": 1.0,
            "controls": [{"name": "a", "consts": {"v": 2.0}}],
            "default_control": "a",
            "constants": {"Cf": 2.0, "Clam": 0.0, "Lf": 0.0, "LQ": 1.0},
            "lift": [{"kind": "terminal_value", "component": 0, "lo": -2, "hi": 2, "points": 5}],
            "drift": "ctrl[v]",
            "intensity": "0",
            "running_cost": "0",
            "terminal_cost": "0",
            "kernel": {"normalize": true, "atoms": [{"mark": "feat[0]+1", "weight": "1"}]}
        }"#,
        )
        .unwrap();
        let vf0 = solve_value(&m0, &quad, 0.5, 1e-6).unwrap();
        let v0 = hamiltonian_f_psi(&m0, &vf0, 0.5, &x, 0.9, &[0.25]).unwrap();
        assert!((v0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn policy_extraction_picks_dominant_control() {
        // ℓ table {a: 0, b: 1}, h ≡ 0, λ ≡ 0: the constant-a schedule wins
        // everywhere.
        let m: ProblemData<f64> = ProblemData::from_json(
            r#"{
            "dimension": 1,
            "horizon": 1.0,
            "controls": [{"name": "a", "consts": {"run": 0.0}},
                         {"name": "b", "consts": {"run": 1.0}}],
            "default_control": "a",
            "constants": {"Cf": 1.0, "Clam": 0.0, "Lf": 0.0, "LQ": 1.0},
            "lift": [{"kind": "terminal_value", "component": 0, "lo": -2, "hi": 2, "points": 5}],
            "drift": "0",
            "intensity": "0",
            "running_cost": "ctrl[run]",
            "terminal_cost": "0",
            "kernel": {"normalize": true, "atoms": [{"mark": "feat[0]+1", "weight": "1"}]}
        }"#,
        )
        .unwrap();
        let quad = QuadratureSpec { n_t: 8, switches: 0 };
        let vf = solve_value(&m, &quad, 0.5, 1e-9).unwrap();
        let policy = extract_policy(&m, &vf, &quad).unwrap();
        for sched in &policy.schedules {
            assert_eq!(sched.label_at(0.5), 0);
        }
        let sched = policy.lookup(0.4, &[0.0]);
        assert_eq!(sched.label_at(0.9), 0);
    }

    #[test]
    fn value_file_round_trip() {
        let m: ProblemData<f64> = problems::builtin("constant_terminal").unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 8, switches: 0 }, 0.5, 1e-7).unwrap();
        let bytes = vf.to_bytes();
        let back: ValueFunction<f64> = ValueFunction::from_bytes(&bytes).unwrap();
        assert_eq!(back.times, vf.times);
        assert_eq!(back.knots, vf.knots);
        assert_eq!(back.grid, vf.grid);
        assert_eq!(back.table, vf.table);
        assert_eq!(back.meta.problem_hash, vf.meta.problem_hash);
        assert_eq!(back.meta.tool_version, crate::TOOL_VERSION);
        assert!(ValueFunction::<f64>::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn compound_poisson_quadratic_cost_closed_form() {
        // Single control, f ≡ 0, λ ≡ c, ℓ ≡ r, h = x², symmetric ±1 jumps:
        // every jump adds exactly 1 to E[x²], so
        //     V(s, x) = r(T−s) + x² + c(T−s).
        // Start values and jump targets all sit on grid nodes, making the
        // oracle sharp through the whole pipeline.
        let m: ProblemData<f64> = ProblemData::from_json(
            r#"{
            "dimension": 1,
            "horizon": 1.0,
            "controls": [{"name": "a"}],
            "default_control": "a",
            "constants": {"Cf": 40.0, "Clam": 0.5, "Lf": 12.0, "LQ": 1.0},
            "lift": [{"kind": "terminal_value", "component": 0, "lo": -6, "hi": 6, "points": 49}],
            "drift": "0",
            "intensity": "0.5",
            "running_cost": "0.25",
            "terminal_cost": "feat[0]*feat[0]",
            "kernel": {"normalize": true, "atoms": [
                {"mark": "feat[0]+1", "weight": "0.5"},
                {"mark": "feat[0]-1", "weight": "0.5"}
            ]}
        }"#,
        )
        .unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 64, switches: 0 }, 0.5, 1e-7).unwrap();
        for (s, x) in [(0.25, 0.5), (0.5, 0.0), (0.0, -1.5), (0.75, 2.0)] {
            let got = vf.query_feats(s, &[x]);
            let expect = 0.25 * (1.0 - s) + x * x + 0.5 * (1.0 - s);
            // Tolerance budget: Picard 1e−7 plus the O(h²) jump-quadrature
            // bias accumulated over the horizon.
            assert!(
                (got - expect).abs() < 1e-4,
                "V({s}, {x}) = {got}, closed form {expect}"
            );
        }
    }

    #[test]
    fn value_tables_respect_cost_bounds_and_terminal_row() {
        for name in crate::problems::BUILTIN_NAMES {
            let m: ProblemData<f64> = problems::builtin(name).unwrap();
            let vf = solve_value(&m, &QuadratureSpec { n_t: 8, switches: 0 }, 0.5, 1e-6).unwrap();
            let cap = m.constants.c_f * (1.0 + m.horizon);
            for v in &vf.table {
                assert!(*v >= -1e-12 && *v <= cap + 1e-9, "{name}: value {v} outside [0, {cap}]");
            }
            let g = vf.grid.len();
            let last = vf.times.len() - 1;
            for j in 0..g {
                let h = m.terminal_cost_of(&vf.grid.node(j)).unwrap();
                assert_eq!(vf.table[last * g + j], h, "{name}: terminal row must equal h");
            }
        }
    }

    #[test]
    fn solver_runs_in_f32() {
        let m: ProblemData<f32> = problems::builtin("constant_terminal").unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 8, switches: 0 }, 0.5, 1e-4).unwrap();
        for v in &vf.table {
            assert!((v - 3.0f32).abs() < 1e-3, "value {v}");
        }
    }

    #[test]
    fn value_query_respects_non_anticipation() {
        let m: ProblemData<f64> = problems::builtin("two_control_markov").unwrap();
        let vf = solve_value(&m, &QuadratureSpec { n_t: 8, switches: 0 }, 0.5, 1e-6).unwrap();
        let x = CadlagPath::from_nodes(&[(0.0, vec![0.2]), (1.0, vec![-1.0])]).unwrap();
        let s = 0.37;
        let a = vf.query(&m, s, &x).unwrap();
        let b = vf.query(&m, s, &x.stop(s).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
