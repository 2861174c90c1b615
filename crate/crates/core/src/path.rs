//! Càdlàg path primitives.
//!
//! A path is stored as sampled nodes with linear interpolation between them;
//! a jump at time `τ` is a pair of rows at the same time, the first carrying
//! the left value and the second (flagged) the post-jump value. Evaluation is
//! right-continuous, and suprema over intervals reduce to node scans because
//! every stored segment is linear. Time comparisons are exact: all times
//! originate from the same grid or sampler, so ties are structural.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// A point of the mark space, one value per state component.
pub type Mark<T> = Vec<T>;

/// Right-continuous path with finitely many jumps on `[0, horizon]`.
///
/// Immutable after construction; cheap to clone and safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq)]
pub struct CadlagPath<T> {
    dim: usize,
    times: Vec<T>,
    /// Row-major node values, stride `dim`.
    values: Vec<T>,
    /// `true` marks the post-jump row of a duplicated time.
    jumps: Vec<bool>,
    /// Frozen paths continue constantly past the last node (horizon = ∞).
    frozen: bool,
}

impl<T: Scalar> CadlagPath<T> {
    /// Path identically equal to `value` on `[0, ∞)`.
    pub fn constant(value: &[T]) -> Self {
        CadlagPath {
            dim: value.len(),
            times: vec![T::zero()],
            values: value.to_vec(),
            jumps: vec![false],
            frozen: true,
        }
    }

    /// Piecewise-linear path through `nodes`; defined on `[0, last time]`.
    ///
    /// Node times must start at 0 and increase strictly; all values must be
    /// finite and share one dimension.
    pub fn from_nodes(nodes: &[(T, Vec<T>)]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(CoreError::Schema("path needs at least one node".into()));
        }
        let dim = nodes[0].1.len();
        if dim == 0 {
            return Err(CoreError::Schema("path dimension must be positive".into()));
        }
        let mut b = PathBuilder::new(dim);
        for (t, v) in nodes {
            b.push_node(*t, v)?;
        }
        b.finish(false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored rows (jump pairs count twice).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Last node time. Frozen paths are defined past it.
    pub fn last_time(&self) -> T {
        *self.times.last().unwrap()
    }

    /// `None` means the path extends to +∞ (frozen tail).
    pub fn horizon(&self) -> Option<T> {
        if self.frozen {
            None
        } else {
            Some(self.last_time())
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Row access: (time, value slice, is_jump).
    pub fn row(&self, i: usize) -> (T, &[T], bool) {
        (self.times[i], &self.values[i * self.dim..(i + 1) * self.dim], self.jumps[i])
    }

    /// Times at which the path jumps.
    pub fn jump_times(&self) -> Vec<T> {
        (0..self.len()).filter(|&i| self.jumps[i]).map(|i| self.times[i]).collect()
    }

    fn in_horizon(&self, t: T) -> Result<()> {
        if t < T::zero() || (!self.frozen && t > self.last_time()) {
            return Err(CoreError::Horizon {
                t: t.as_f64(),
                horizon: self.horizon().map_or(f64::INFINITY, Scalar::as_f64),
            });
        }
        Ok(())
    }

    /// Index of the last row with time ≤ t (right-continuous pick at jumps).
    fn row_at(&self, t: T) -> usize {
        self.times.partition_point(|&u| u <= t).saturating_sub(1)
    }

    /// `ω(t)`, right-continuous in `t`.
    pub fn eval(&self, t: T) -> Result<Mark<T>> {
        self.in_horizon(t)?;
        let mut out = vec![T::zero(); self.dim];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    /// Component `c` of `ω(t)`.
    pub fn eval_comp(&self, t: T, c: usize) -> T {
        let i = self.row_at(t);
        if i + 1 >= self.len() || self.times[i] == t {
            return self.values[i * self.dim + c];
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let th = (t - t0) / (t1 - t0);
        let a = self.values[i * self.dim + c];
        let b = self.values[(i + 1) * self.dim + c];
        a + th * (b - a)
    }

    fn eval_into(&self, t: T, out: &mut [T]) {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.eval_comp(t, c);
        }
    }

    /// Left limit `ω(t−)`; equals `ω(0)` at `t = 0`.
    pub fn eval_left(&self, t: T) -> Result<Mark<T>> {
        self.in_horizon(t)?;
        if t == T::zero() {
            return self.eval(t);
        }
        // Last row strictly before t, then interpolate the segment up to t.
        let i = self.times.partition_point(|&u| u < t).saturating_sub(1);
        let mut out = vec![T::zero(); self.dim];
        for (c, slot) in out.iter_mut().enumerate() {
            if i + 1 >= self.len() || self.times[i + 1] > t {
                // Inside a segment (or past the last node): same as eval.
                *slot = self.eval_comp(t, c);
            } else {
                // times[i+1] == t: the first row at t carries the left value.
                *slot = self.values[(i + 1) * self.dim + c];
            }
        }
        Ok(out)
    }

    /// The stopped path `x(· ∧ t)`; idempotent, frozen past `t`.
    pub fn stop(&self, t: T) -> Result<CadlagPath<T>> {
        self.in_horizon(t)?;
        let keep = self.times.partition_point(|&u| u <= t);
        let mut times: Vec<T> = self.times[..keep].to_vec();
        let mut values: Vec<T> = self.values[..keep * self.dim].to_vec();
        let mut jumps: Vec<bool> = self.jumps[..keep].to_vec();
        if times.last().copied() != Some(t) {
            times.push(t);
            let mut v = vec![T::zero(); self.dim];
            self.eval_into(t, &mut v);
            values.extend_from_slice(&v);
            jumps.push(false);
        }
        Ok(CadlagPath { dim: self.dim, times, values, jumps, frozen: true })
    }

    /// Concatenation `x ⊗ₛ e`: equal to `x` on `[0, s)` and to `e` on `[s, ∞)`.
    pub fn concat(&self, s: T, e: &[T]) -> Result<CadlagPath<T>> {
        self.in_horizon(s)?;
        if e.len() != self.dim {
            return Err(CoreError::DimensionMismatch { left: self.dim, right: e.len() });
        }
        let keep = self.times.partition_point(|&u| u < s);
        let mut times: Vec<T> = self.times[..keep].to_vec();
        let mut values: Vec<T> = self.values[..keep * self.dim].to_vec();
        let mut jumps: Vec<bool> = self.jumps[..keep].to_vec();
        if keep == 0 {
            // s = 0: the whole path is the constant e.
            times.push(s);
            values.extend_from_slice(e);
            jumps.push(false);
        } else {
            let left = self.eval_left(s)?;
            if left == e {
                times.push(s);
                values.extend_from_slice(e);
                jumps.push(false);
            } else {
                times.push(s);
                values.extend_from_slice(&left);
                jumps.push(false);
                times.push(s);
                values.extend_from_slice(e);
                jumps.push(true);
            }
        }
        Ok(CadlagPath { dim: self.dim, times, values, jumps, frozen: true })
    }

    /// `sup_{0 ≤ t ≤ s} |x(t) − y(t)|_∞`, exact for the stored representation.
    pub fn sup_dist(&self, other: &CadlagPath<T>, s: T) -> Result<T> {
        if self.dim != other.dim {
            return Err(CoreError::DimensionMismatch { left: self.dim, right: other.dim });
        }
        self.in_horizon(s)?;
        other.in_horizon(s)?;
        let mut ts: Vec<T> = Vec::with_capacity(self.len() + other.len() + 2);
        ts.push(T::zero());
        ts.push(s);
        ts.extend(self.times.iter().copied().filter(|&t| t <= s));
        ts.extend(other.times.iter().copied().filter(|&t| t <= s));
        let mut worst = T::zero();
        for &t in &ts {
            let (a, b) = (self.eval(t)?, other.eval(t)?);
            let (al, bl) = (self.eval_left(t)?, other.eval_left(t)?);
            for c in 0..self.dim {
                worst = worst.max((a[c] - b[c]).abs()).max((al[c] - bl[c]).abs());
            }
        }
        Ok(worst)
    }

    /// Pseudo-metric `|t − s| + sup_r |x(r ∧ t) − y(r ∧ s)|`.
    pub fn pseudo_metric(t: T, x: &CadlagPath<T>, s: T, y: &CadlagPath<T>) -> Result<T> {
        let xs = x.stop(t)?;
        let ys = y.stop(s)?;
        let sup = xs.sup_dist(&ys, t.max(s))?;
        Ok((t - s).abs() + sup)
    }

    /// CSV block `t,v1..vd,is_jump`; one row per stored node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for c in 0..self.dim {
            out.push_str(&format!(",v{}", c + 1));
        }
        out.push_str(",is_jump\n");
        for i in 0..self.len() {
            let (t, v, j) = self.row(i);
            out.push_str(&format!("{}", t.as_f64()));
            for x in v {
                out.push_str(&format!(",{}", x.as_f64()));
            }
            out.push_str(if j { ",1\n" } else { ",0\n" });
        }
        out
    }

    /// Parse the CSV block emitted by [`CadlagPath::to_csv`].
    ///
    /// Rejects non-increasing times; equal consecutive times are accepted
    /// only as a jump pair.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Schema("empty path block".into()))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 3 || cols[0] != "t" || *cols.last().unwrap() != "is_jump" {
            return Err(CoreError::Schema(format!("bad path header `{header}`")));
        }
        let dim = cols.len() - 2;
        let mut b = PathBuilder::new(dim);
        for (li, line) in lines.enumerate() {
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != dim + 2 {
                return Err(CoreError::Schema(format!("row {} has {} fields, expected {}", li + 2, parts.len(), dim + 2)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| CoreError::Schema(format!("bad number `{s}` in row {}", li + 2)))
            };
            let t = T::of(parse(parts[0])?);
            let v: Vec<T> = parts[1..=dim]
                .iter()
                .map(|s| parse(s).map(T::of))
                .collect::<Result<_>>()?;
            match parts[dim + 1] {
                "0" => b.push_node(t, &v)?,
                "1" => b.push_jump_row(t, &v)?,
                other => return Err(CoreError::Schema(format!("is_jump must be 0 or 1, got `{other}`"))),
            }
        }
        b.finish(false)
    }
}

/// Incremental construction preserving the representation invariants.
pub struct PathBuilder<T> {
    dim: usize,
    times: Vec<T>,
    values: Vec<T>,
    jumps: Vec<bool>,
}

impl<T: Scalar> PathBuilder<T> {
    pub fn new(dim: usize) -> Self {
        PathBuilder { dim, times: Vec::new(), values: Vec::new(), jumps: Vec::new() }
    }

    fn check(&self, t: T, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(CoreError::DimensionMismatch { left: self.dim, right: v.len() });
        }
        if !t.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::Schema("non-finite path node".into()));
        }
        if self.times.is_empty() && t != T::zero() {
            return Err(CoreError::Schema("path must start at t = 0".into()));
        }
        Ok(())
    }

    /// Continuation node; time must increase strictly.
    pub fn push_node(&mut self, t: T, v: &[T]) -> Result<()> {
        self.check(t, v)?;
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(CoreError::Schema(format!(
                    "non-increasing node time {} after {}",
                    t.as_f64(),
                    last.as_f64()
                )));
            }
        }
        self.times.push(t);
        self.values.extend_from_slice(v);
        self.jumps.push(false);
        Ok(())
    }

    /// Post-jump row at the time of the previous node.
    pub fn push_jump_row(&mut self, t: T, v: &[T]) -> Result<()> {
        self.check(t, v)?;
        match self.times.last() {
            Some(&last) if last == t => {}
            _ => {
                return Err(CoreError::Schema(
                    "jump row must repeat the previous node time".into(),
                ))
            }
        }
        if *self.jumps.last().unwrap() {
            return Err(CoreError::Schema("two jump rows at one time".into()));
        }
        self.times.push(t);
        self.values.extend_from_slice(v);
        self.jumps.push(true);
        Ok(())
    }

    pub fn finish(self, frozen: bool) -> Result<CadlagPath<T>> {
        if self.times.is_empty() {
            return Err(CoreError::Schema("path needs at least one node".into()));
        }
        Ok(CadlagPath {
            dim: self.dim,
            times: self.times,
            values: self.values,
            jumps: self.jumps,
            frozen,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p1(nodes: &[(f64, f64)]) -> CadlagPath<f64> {
        let nodes: Vec<(f64, Vec<f64>)> = nodes.iter().map(|&(t, v)| (t, vec![v])).collect();
        CadlagPath::from_nodes(&nodes).unwrap()
    }

    /// 0 on [0,1), 5 on [1,∞).
    fn step_path() -> CadlagPath<f64> {
        CadlagPath::constant(&[0.0]).concat(1.0, &[5.0]).unwrap()
    }

    #[test]
    fn eval_constant_path() {
        let x = CadlagPath::constant(&[2.0]);
        assert_eq!(x.eval(0.7).unwrap(), vec![2.0]);
    }

    #[test]
    fn eval_right_continuous_at_jump() {
        assert_eq!(step_path().eval(1.0).unwrap(), vec![5.0]);
        assert_eq!(step_path().eval_left(1.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn eval_linear_interpolation_oracle() {
        // Oracle: exact line through (0,0), (1,1).
        let x = p1(&[(0.0, 0.0), (1.0, 1.0)]);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            assert!((x.eval(t).unwrap()[0] - t).abs() < 1e-15);
        }
        assert_eq!(x.eval(0.5).unwrap(), vec![0.5]);
    }

    #[test]
    fn eval_rejects_out_of_horizon() {
        let x = p1(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(matches!(x.eval(1.5), Err(CoreError::Horizon { .. })));
        assert!(x.stop(1.0).unwrap().eval(7.0).is_ok());
    }

    #[test]
    fn concat_basic_and_zero_time() {
        let x = step_path().concat(1.0, &[5.0]).unwrap();
        assert_eq!(x.eval(0.5).unwrap(), vec![0.0]);
        assert_eq!(x.eval(1.0).unwrap(), vec![5.0]);
        let c = step_path().concat(0.0, &[9.0]).unwrap();
        assert_eq!(c.eval(0.0).unwrap(), vec![9.0]);
        assert_eq!(c.eval(3.0).unwrap(), vec![9.0]);
    }

    #[test]
    fn concat_at_continuity_point_matches_stopped_path() {
        // Oracle: pointwise comparison on a dense grid.
        let x = p1(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)]);
        let s = 1.0;
        let e = x.eval(s).unwrap();
        let c = x.concat(s, &e).unwrap();
        let st = x.stop(s).unwrap();
        for k in 0..=40 {
            let t = 2.0 * k as f64 / 40.0;
            assert!((c.eval(t).unwrap()[0] - st.eval(t).unwrap()[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_idempotent_and_identity() {
        let x = p1(&[(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)]);
        let s = x.stop(1.3).unwrap();
        assert_eq!(s.stop(1.3).unwrap(), s);
        let full = x.stop(2.0).unwrap();
        for k in 0..=20 {
            let t = 2.0 * k as f64 / 20.0;
            assert_eq!(full.eval(t).unwrap(), x.eval(t).unwrap());
        }
    }

    #[test]
    fn stop_before_jump_freezes_value() {
        // Jump at 1.5; stopping at 1.0 gives a constant tail at x(1.0).
        let x = p1(&[(0.0, 0.0), (1.5, 1.5)]).concat(1.5, &[9.0]).unwrap();
        let s = x.stop(1.0).unwrap();
        for k in 0..=30 {
            let t = 3.0 * k as f64 / 30.0;
            let expect = if t <= 1.0 { t } else { 1.0 };
            assert!((s.eval(t).unwrap()[0] - expect).abs() < 1e-15);
        }
        assert!(s.jump_times().is_empty());
    }

    #[test]
    fn stop_keeps_jump_exactly_at_stop_time() {
        let x = step_path();
        let s = x.stop(1.0).unwrap();
        assert_eq!(s.eval(1.0).unwrap(), vec![5.0]);
        assert_eq!(s.eval_left(1.0).unwrap(), vec![0.0]);
        assert_eq!(s.eval(4.0).unwrap(), vec![5.0]);
    }

    #[test]
    fn sup_dist_cases() {
        let x = CadlagPath::constant(&[0.0]);
        let y = CadlagPath::constant(&[3.0]);
        assert_eq!(x.sup_dist(&x, 5.0).unwrap(), 0.0);
        assert_eq!(x.sup_dist(&y, 2.0).unwrap(), 3.0);
        // Oracle: dense-grid brute force for x = t vs y = 2t on [0,1].
        let a = p1(&[(0.0, 0.0), (1.0, 1.0)]);
        let b = p1(&[(0.0, 0.0), (1.0, 2.0)]);
        let mut brute: f64 = 0.0;
        for k in 0..=10_000 {
            let t = k as f64 / 10_000.0;
            brute = brute.max((a.eval(t).unwrap()[0] - b.eval(t).unwrap()[0]).abs());
        }
        let exact = a.sup_dist(&b, 1.0).unwrap();
        assert!((exact - 1.0).abs() < 1e-15);
        assert!(exact >= brute - 1e-12);
    }

    #[test]
    fn sup_dist_sees_left_limits() {
        // x jumps to 5 at 1 and back to 0 immediately after in y's eyes:
        // the gap just before the jump must be visible.
        let x = step_path();
        let y = CadlagPath::constant(&[5.0]);
        // On [0,1): |0-5| = 5; at 1: |5-5| = 0. Sup must be 5.
        assert_eq!(x.sup_dist(&y, 1.0).unwrap(), 5.0);
    }

    #[test]
    fn pseudo_metric_cases() {
        let x = p1(&[(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(CadlagPath::pseudo_metric(0.6, &x, 0.6, &x).unwrap(), 0.0);
        let a = CadlagPath::constant(&[0.0]);
        let b = CadlagPath::constant(&[1.0]);
        assert_eq!(CadlagPath::pseudo_metric(1.0, &a, 2.0, &b).unwrap(), 2.0);
        // Same path, shifted time: |Δt| + sup-gap, monotone in the shift.
        let mut prev = f64::INFINITY;
        for n in [4.0, 8.0, 16.0, 32.0] {
            let d = CadlagPath::pseudo_metric(0.3 + 1.0 / n, &x, 0.3, &x).unwrap();
            assert!(d <= prev);
            assert!((d - (1.0 / n + 1.0 / n)).abs() < 1e-12);
            prev = d;
        }
        assert!(matches!(
            CadlagPath::pseudo_metric(1.0, &x, 1.0, &CadlagPath::constant(&[0.0, 0.0])),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn metric_of_stopped_path_is_zero() {
        let x = p1(&[(0.0, 0.0), (1.0, 2.0), (2.0, 0.5)]);
        let t = 1.4;
        let d = CadlagPath::pseudo_metric(t, &x, t, &x.stop(t).unwrap()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn concat_overwriting() {
        let x = p1(&[(0.0, 0.0), (2.0, 2.0)]);
        let once = x.concat(1.0, &[5.0]).unwrap().concat(1.0, &[7.0]).unwrap();
        let direct = x.concat(1.0, &[7.0]).unwrap();
        assert_eq!(once, direct);
    }

    #[test]
    fn concat_leaves_prefix_untouched() {
        let x = p1(&[(0.0, 0.0), (2.0, 2.0)]);
        let c = x.concat(1.0, &[5.0]).unwrap();
        let eps = 0.25;
        assert_eq!(c.stop(1.0 - eps).unwrap(), x.stop(1.0 - eps).unwrap());
    }

    #[test]
    fn csv_round_trip_and_rejection() {
        let x = step_path().stop(2.0).unwrap();
        let text = x.to_csv();
        let back = CadlagPath::<f64>::from_csv(&text).unwrap();
        assert_eq!(back.to_csv(), text);
        let bad = "t,v1,is_jump\n0,0,0\n1,1,0\n0.5,2,0\n";
        assert!(CadlagPath::<f64>::from_csv(bad).is_err());
        let dup_no_jump = "t,v1,is_jump\n0,0,0\n1,1,0\n1,2,0\n";
        assert!(CadlagPath::<f64>::from_csv(dup_no_jump).is_err());
    }

    #[test]
    fn works_with_f32() {
        let x: CadlagPath<f32> = CadlagPath::constant(&[2.0f32]);
        assert_eq!(x.eval(0.5f32).unwrap(), vec![2.0f32]);
        let c = x.concat(1.0, &[4.0]).unwrap();
        assert_eq!(c.eval(1.0).unwrap(), vec![4.0f32]);
        assert_eq!(c.eval_left(1.0).unwrap(), vec![2.0f32]);
    }
}
