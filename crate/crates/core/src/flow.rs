//! Controlled flow between jumps.
//!
//! Solves `φ′(t) = f(t, φ, α(t))` with classical fourth-order steps on a
//! uniform global grid (anchored at 0, step `dt`) split at control
//! breakpoints, advancing the lifted features alongside: terminal values are
//! the state itself, running suprema are committed per step, running
//! integrals advance by trapezoid on the stored nodes. The integrated hazard
//! is the composite trapezoid of the intensity along the flow, the survival
//! and discount functions coincide with `exp(−Λ)` on `[s, ∞)`, and the next
//! jump time is the hazard inversion `Λ(t) ≥ −log u` located by monotone
//! bisection with the hazard rate interpolated linearly inside a step.

use crate::error::{CoreError, Result};
use crate::model::{FeatureKind, ProblemData};
use crate::path::{CadlagPath, PathBuilder};
use crate::scalar::Scalar;

/// Piecewise-constant, right-continuous open-loop control.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<T> {
    /// `(from_time, control index)`, strictly increasing times.
    segments: Vec<(T, usize)>,
}

impl<T: Scalar> Schedule<T> {
    pub fn constant(label: usize) -> Self {
        Schedule { segments: vec![(T::zero(), label)] }
    }

    pub fn new(segments: Vec<(T, usize)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(CoreError::Schema("schedule needs at least one segment".into()));
        }
        for w in segments.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(CoreError::Schema("schedule breakpoints must increase".into()));
            }
        }
        Ok(Schedule { segments })
    }

    pub fn segments(&self) -> &[(T, usize)] {
        &self.segments
    }

    /// Active label at `t` (constant before the first breakpoint).
    pub fn label_at(&self, t: T) -> usize {
        let i = self.segments.partition_point(|&(u, _)| u <= t);
        self.segments[i.saturating_sub(1)].1
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn switches_in(&self, a: T, b: T) -> Vec<T> {
        self.segments
            .iter()
            .map(|&(u, _)| u)
            .filter(|&u| u > a && u < b)
            .collect()
    }
}

/// Quadrature nodes for a flow on `[s, end]`: the global `dt`-grid restricted
/// to the open interval, plus both endpoints and any extra breakpoints.
pub fn grid_nodes<T: Scalar>(s: T, end: T, dt: T, extra: &[T]) -> Vec<T> {
    let mut nodes = vec![s, end];
    if dt > T::zero() {
        let mut k = (s / dt).floor().as_f64() as i64 + 1;
        loop {
            let t = dt * T::of(k as f64);
            if t >= end {
                break;
            }
            if t > s {
                nodes.push(t);
            }
            k += 1;
        }
    }
    nodes.extend(extra.iter().copied().filter(|&t| t > s && t < end));
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes.dedup();
    nodes
}

/// Flow sampled on quadrature nodes, with the per-interval intensity and
/// running-cost values and the cumulative hazard.
#[derive(Debug, Clone)]
pub struct FlowNodes<T> {
    pub times: Vec<T>,
    /// Node states, row-major stride `dim`.
    pub states: Vec<T>,
    /// Node lifted features, row-major stride `n_features`.
    pub feats: Vec<T>,
    /// Intensity at the interval endpoints, evaluated with the interval's
    /// control (length `n_intervals` each).
    pub lam_left: Vec<T>,
    pub lam_right: Vec<T>,
    /// Running cost at the interval endpoints, same convention.
    pub cost_left: Vec<T>,
    pub cost_right: Vec<T>,
    /// Cumulative hazard at nodes; `cum[0] = 0`.
    pub cum: Vec<T>,
    /// Survival/discount `exp(−cum)` at nodes.
    pub chi: Vec<T>,
}

impl<T: Scalar> FlowNodes<T> {
    pub fn dim(&self) -> usize {
        self.states.len() / self.times.len()
    }

    pub fn n_feats(&self) -> usize {
        self.feats.len() / self.times.len()
    }

    pub fn state_row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.states[i * d..(i + 1) * d]
    }

    pub fn feat_row(&self, i: usize) -> &[T] {
        let f = self.n_feats();
        &self.feats[i * f..(i + 1) * f]
    }
}

/// Integrate the lifted flow over the given nodes from `(state0, feats0)`.
pub fn integrate<T: Scalar>(
    data: &ProblemData<T>,
    times: &[T],
    state0: &[T],
    feats0: &[T],
    schedule: &Schedule<T>,
) -> Result<FlowNodes<T>> {
    let dim = data.dim;
    let nf = data.n_features();
    let n = times.len();
    let mut states = Vec::with_capacity(n * dim);
    let mut feats = Vec::with_capacity(n * nf);
    states.extend_from_slice(state0);
    feats.extend_from_slice(feats0);
    let mut lam_left = Vec::with_capacity(n.saturating_sub(1));
    let mut lam_right = Vec::with_capacity(n.saturating_sub(1));
    let mut cost_left = Vec::with_capacity(n.saturating_sub(1));
    let mut cost_right = Vec::with_capacity(n.saturating_sub(1));
    let mut cum = Vec::with_capacity(n);
    let mut chi = Vec::with_capacity(n);
    cum.push(T::zero());
    chi.push(T::one());

    // Committed per-component running sup / integral carried across nodes.
    let mut run_max: Vec<T> = data
        .lift
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == FeatureKind::RunningMax)
        .map(|(i, _)| feats0[i])
        .collect();
    let mut run_int: Vec<T> = data
        .lift
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == FeatureKind::RunningIntegral)
        .map(|(i, _)| feats0[i])
        .collect();

    let stage_feats = |state: &[T],
                       sref: &[T],
                       dt_from_node: T,
                       rmax: &[T],
                       rint: &[T]|
     -> Vec<T> {
        let mut out = Vec::with_capacity(nf);
        let (mut im, mut ii) = (0usize, 0usize);
        for f in &data.lift {
            let c = f.component;
            out.push(match f.kind {
                FeatureKind::TerminalValue => state[c],
                FeatureKind::RunningMax => {
                    let v = rmax[im].max(state[c]);
                    im += 1;
                    v
                }
                FeatureKind::RunningIntegral => {
                    let v = rint[ii] + dt_from_node * (sref[c] + state[c]) * T::of(0.5);
                    ii += 1;
                    v
                }
            });
        }
        out
    };

    let mut state = state0.to_vec();
    for k in 0..n.saturating_sub(1) {
        let (t0, t1) = (times[k], times[k + 1]);
        let h = t1 - t0;
        let ctrl = schedule.label_at(t0);
        let half = h * T::of(0.5);
        let s_ref = state.clone();

        let f = |t: T, y: &[T], dt: T, run_max: &[T], run_int: &[T]| -> Result<Vec<T>> {
            let fs = stage_feats(y, &s_ref, dt, run_max, run_int);
            data.eval_drift(t, &fs, ctrl)
        };

        let k1 = f(t0, &state, T::zero(), &run_max, &run_int)?;
        let y2: Vec<T> = state.iter().zip(&k1).map(|(y, d)| *y + half * *d).collect();
        let k2 = f(t0 + half, &y2, half, &run_max, &run_int)?;
        let y3: Vec<T> = state.iter().zip(&k2).map(|(y, d)| *y + half * *d).collect();
        let k3 = f(t0 + half, &y3, half, &run_max, &run_int)?;
        let y4: Vec<T> = state.iter().zip(&k3).map(|(y, d)| *y + h * *d).collect();
        let k4 = f(t1, &y4, h, &run_max, &run_int)?;
        let sixth = h / T::of(6.0);
        for c in 0..dim {
            state[c] += sixth * (k1[c] + T::of(2.0) * (k2[c] + k3[c]) + k4[c]);
            if !state[c].is_finite() {
                return Err(CoreError::Divergence { t: t1.as_f64() });
            }
        }
        // Commit features at the right node.
        let (mut im, mut ii) = (0, 0);
        for f in &data.lift {
            let c = f.component;
            match f.kind {
                FeatureKind::RunningMax => {
                    run_max[im] = run_max[im].max(state[c]);
                    im += 1;
                }
                FeatureKind::RunningIntegral => {
                    run_int[ii] += h * (s_ref[c] + state[c]) * T::of(0.5);
                    ii += 1;
                }
                FeatureKind::TerminalValue => {}
            }
        }
        let node_feats = stage_feats(&state, &s_ref, T::zero(), &run_max, &run_int);

        let left_feats = feats[k * nf..(k + 1) * nf].to_vec();
        let (_, lam_l, cost_l) = data.eval_coeffs(t0, &left_feats, ctrl)?;
        let (_, lam_r, cost_r) = data.eval_coeffs(t1, &node_feats, ctrl)?;
        lam_left.push(lam_l);
        lam_right.push(lam_r);
        cost_left.push(cost_l);
        cost_right.push(cost_r);
        let dlam = h * (lam_l + lam_r) * T::of(0.5);
        let c_next = *cum.last().unwrap() + dlam;
        cum.push(c_next);
        chi.push((-c_next).exp());

        states.extend_from_slice(&state);
        feats.extend_from_slice(&node_feats);
    }

    Ok(FlowNodes {
        times: times.to_vec(),
        states,
        feats,
        lam_left,
        lam_right,
        cost_left,
        cost_right,
        cum,
        chi,
    })
}

/// Solution of the flow ODE from `(s, x)` under an open-loop schedule.
#[derive(Debug, Clone)]
pub struct FlowPath<T> {
    pub start: T,
    /// The initial condition `x(·∧s)`.
    pub base: CadlagPath<T>,
    pub nodes: FlowNodes<T>,
    pub schedule: Schedule<T>,
}

/// Solve the flow on `[s, horizon]` with step `dt`, splitting at control
/// breakpoints.
pub fn solve_flow<T: Scalar>(
    data: &ProblemData<T>,
    s: T,
    x: &CadlagPath<T>,
    schedule: &Schedule<T>,
    dt: T,
) -> Result<FlowPath<T>> {
    let end = data.horizon;
    if s > end {
        return Err(CoreError::Horizon { t: s.as_f64(), horizon: end.as_f64() });
    }
    let base = x.stop(s)?;
    let state0 = x.eval(s)?;
    let feats0 = data.features_of_path(x, s)?;
    let times = grid_nodes(s, end, dt, &schedule.switches_in(s, end));
    let nodes = integrate(data, &times, &state0, &feats0, schedule)?;
    Ok(FlowPath { start: s, base, nodes, schedule: schedule.clone() })
}

impl<T: Scalar> FlowPath<T> {
    fn check_range(&self, t: T) -> Result<()> {
        let end = *self.nodes.times.last().unwrap();
        if t < self.start || t > end {
            return Err(CoreError::Horizon { t: t.as_f64(), horizon: end.as_f64() });
        }
        Ok(())
    }

    /// `Λ(t) = ∫ₛᵗ λ(r, φ, α(r)) dr`; nonnegative and non-decreasing in `t`.
    pub fn integrated_hazard(&self, t: T) -> Result<T> {
        self.check_range(t)?;
        let n = &self.nodes;
        let i = n.times.partition_point(|&u| u <= t).saturating_sub(1);
        if n.times[i] == t || i + 1 >= n.times.len() {
            return Ok(n.cum[i]);
        }
        let (t0, t1) = (n.times[i], n.times[i + 1]);
        let h = t1 - t0;
        let d = t - t0;
        let lam_t = n.lam_left[i] + (n.lam_right[i] - n.lam_left[i]) * (d / h);
        Ok(n.cum[i] + d * (n.lam_left[i] + lam_t) * T::of(0.5))
    }

    /// Survival function F and discount χ; they coincide on `[s, ∞)`.
    pub fn survival_and_discount(&self, t: T) -> Result<(T, T)> {
        let v = (-self.integrated_hazard(t)?).exp();
        Ok((v, v))
    }

    /// State `φ(t)` by linear interpolation between nodes.
    pub fn state_at(&self, t: T) -> Result<Vec<T>> {
        self.check_range(t)?;
        let n = &self.nodes;
        let d = n.dim();
        let i = n.times.partition_point(|&u| u <= t).saturating_sub(1);
        if n.times[i] == t || i + 1 >= n.times.len() {
            return Ok(n.state_row(i).to_vec());
        }
        let th = (t - n.times[i]) / (n.times[i + 1] - n.times[i]);
        Ok((0..d)
            .map(|c| {
                let a = n.states[i * d + c];
                let b = n.states[(i + 1) * d + c];
                a + th * (b - a)
            })
            .collect())
    }

    /// The flow as a path on `[0, end]`: the base history followed by the
    /// integrated nodes. No jumps after `s`.
    pub fn as_path(&self) -> CadlagPath<T> {
        let d = self.base.dim();
        let mut b = PathBuilder::new(d);
        for i in 0..self.base.len() {
            let (t, v, j) = self.base.row(i);
            if j {
                b.push_jump_row(t, v).unwrap();
            } else {
                b.push_node(t, v).unwrap();
            }
        }
        for i in 0..self.nodes.times.len() {
            let t = self.nodes.times[i];
            if t > self.start {
                b.push_node(t, self.nodes.state_row(i)).unwrap();
            }
        }
        b.finish(false).unwrap()
    }

    /// Smallest `t` with `Λ(t) ≥ −log u`, or `None` if no jump occurs before
    /// the end of the flow (the horizon-truncated cemetery case).
    pub fn sample_next_jump(&self, u: T) -> Option<T> {
        let target = -u.ln();
        let n = &self.nodes;
        if *n.cum.last().unwrap() < target {
            return None;
        }
        let k = n.cum.partition_point(|&c| c < target);
        if k == 0 {
            return Some(self.start);
        }
        let (mut lo, mut hi) = (n.times[k - 1], n.times[k]);
        let tol = T::of(1e-10);
        for _ in 0..200 {
            if hi - lo <= tol {
                break;
            }
            let mid = (lo + hi) * T::of(0.5);
            if self.integrated_hazard(mid).unwrap() >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }
}
