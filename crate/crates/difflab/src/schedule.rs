//! Time discretization and noise schedules.
//!
//! A [`TimeGrid`] holds the nodes `t_0 < t_1 < ... < t_n`. A [`NoiseSchedule`] pairs
//! a grid with the rate `beta(t)` and the diffusion coefficient `D(t)`, and caches the
//! per-step quantities `beta_s = beta(t_s) dt_s`, `alpha_s = 1 - beta_s` and the
//! running product `alpha_bar`. Rates are always evaluated at the left node of a step.

use crate::error::{invalid, Result};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spacing {
    Uniform,
    /// Step sizes grow geometrically; `ratio` is `dt_last / dt_first`.
    /// `ratio > 1` packs nodes near `t_start`.
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    nodes: Vec<T>,
}

/// Build a grid with `n` steps on `[t_start, t_end]`.
pub fn make_time_grid<T: Real>(t_start: T, t_end: T, n: usize, spacing: Spacing) -> Result<TimeGrid<T>> {
    if !t_start.is_finite() || !t_end.is_finite() {
        return invalid("time bounds must be finite");
    }
    if n == 0 {
        return invalid("time grid needs at least one step");
    }
    if t_end <= t_start {
        return invalid(format!("t_end ({t_end}) must exceed t_start ({t_start})"));
    }
    let span = t_end - t_start;
    let mut nodes = Vec::with_capacity(n + 1);
    match spacing {
        Spacing::Geometric { ratio } if n > 1 && (ratio - 1.0).abs() > 1e-15 => {
            if !(ratio.is_finite() && ratio > 0.0) {
                return invalid(format!("geometric ratio must be positive, got {ratio}"));
            }
            // work in f64 so that f32 grids get the same node placement
            let q = ratio.powf(1.0 / (n as f64 - 1.0));
            let denom = q.powi(n as i32) - 1.0;
            for k in 0..=n {
                let frac = (q.powi(k as i32) - 1.0) / denom;
                nodes.push(t_start + span * T::lit(frac));
            }
        }
        Spacing::Geometric { ratio } if !(ratio.is_finite() && ratio > 0.0) => {
            return invalid(format!("geometric ratio must be positive, got {ratio}"));
        }
        _ => {
            let nn = T::from_usize_lossy(n);
            for k in 0..=n {
                nodes.push(t_start + span * T::from_usize_lossy(k) / nn);
            }
        }
    }
    nodes[0] = t_start;
    nodes[n] = t_end;
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("grid nodes not strictly increasing (too many steps for the precision)");
    }
    Ok(TimeGrid { nodes })
}

impl<T: Real> TimeGrid<T> {
    /// Grid from explicit nodes; they must be finite and strictly increasing.
    pub fn from_nodes(nodes: Vec<T>) -> Result<Self> {
        if nodes.len() < 2 {
            return invalid("time grid needs at least two nodes");
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("time nodes must be finite and strictly increasing");
        }
        Ok(Self { nodes })
    }

    pub fn uniform(t_start: T, t_end: T, n: usize) -> Result<Self> {
        make_time_grid(t_start, t_end, n, Spacing::Uniform)
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    /// Number of steps `n` (one less than the node count).
    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t(&self, s: usize) -> T {
        self.nodes[s]
    }

    pub fn dt(&self, s: usize) -> T {
        self.nodes[s + 1] - self.nodes[s]
    }

    pub fn steps(&self) -> Vec<T> {
        self.nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn t_start(&self) -> T {
        self.nodes[0]
    }

    pub fn t_end(&self) -> T {
        self.nodes[self.nodes.len() - 1]
    }

    /// Index of the node equal to `t` up to a few rounding units.
    pub fn node_index(&self, t: T) -> Option<usize> {
        let span = self.t_end() - self.t_start();
        let tol = T::lit(16.0) * T::epsilon() * (span.abs() + t.abs());
        let i = self.nodes.partition_point(|&x| x < t - tol);
        (i < self.nodes.len() && (self.nodes[i] - t).abs() <= tol).then_some(i)
    }

    /// The grid restricted to nodes `from..=to`.
    pub fn sub_grid(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to >= self.nodes.len() {
            return invalid(format!("bad sub-grid range {from}..={to}"));
        }
        Ok(Self { nodes: self.nodes[from..=to].to_vec() })
    }

    /// Nodes mapped by `t -> t_start + t_end - t`, in increasing order.
    pub fn relabeled(&self) -> Self {
        let (a, b) = (self.t_start(), self.t_end());
        let mut nodes: Vec<T> = self.nodes.iter().rev().map(|&t| a + b - t).collect();
        let n = nodes.len() - 1;
        nodes[0] = a;
        nodes[n] = b;
        Self { nodes }
    }

    pub fn to_f64(&self) -> TimeGrid<f64> {
        TimeGrid { nodes: self.nodes.iter().map(|t| t.as_f64()).collect() }
    }

    /// Trapezoid integral of `f` over `[a, b]`, using the grid nodes inside the interval
    /// as quadrature points. Exact for piecewise linear `f` on the grid.
    pub fn integrate(&self, f: &dyn Fn(T) -> T, a: T, b: T) -> T {
        if b <= a {
            return T::zero();
        }
        let mut prev_t = a;
        let mut prev_f = f(a);
        let mut acc = T::zero();
        let half = T::lit(0.5);
        for &t in self.nodes.iter().filter(|&&t| t > a && t < b) {
            let ft = f(t);
            acc += half * (t - prev_t) * (ft + prev_f);
            prev_t = t;
            prev_f = ft;
        }
        acc + half * (b - prev_t) * (f(b) + prev_f)
    }
}

pub type RateFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// Noise schedule on a time grid.
#[derive(Clone)]
pub struct NoiseSchedule<T> {
    grid: TimeGrid<T>,
    beta: RateFn<T>,
    diffusion: RateFn<T>,
    beta_step: Vec<T>,
    alpha_step: Vec<T>,
    alpha_bar: Vec<T>,
    alpha_bar_cont: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for NoiseSchedule<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseSchedule")
            .field("n_steps", &self.beta_step.len())
            .field("t_start", &self.grid.nodes.first())
            .field("t_end", &self.grid.nodes.last())
            .field("alpha_bar_end", &self.alpha_bar.last())
            .finish()
    }
}

/// DDPM schedule: `D(t) = beta(t)`.
pub fn ddpm_schedule<T: Real>(beta: RateFn<T>, grid: TimeGrid<T>) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::new(beta.clone(), beta, grid)
}

impl<T: Real> NoiseSchedule<T> {
    /// General schedule with independent `beta(t)` and `D(t)`.
    pub fn new(beta: RateFn<T>, diffusion: RateFn<T>, grid: TimeGrid<T>) -> Result<Self> {
        let n = grid.n_steps();
        let mut beta_step = Vec::with_capacity(n);
        let mut alpha_step = Vec::with_capacity(n);
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut alpha_bar_cont = Vec::with_capacity(n + 1);
        alpha_bar.push(T::one());
        alpha_bar_cont.push(T::one());
        let mut cum = T::zero();
        for s in 0..n {
            let t = grid.t(s);
            let b = beta(t);
            let d = diffusion(t);
            if !(b >= T::zero()) || !b.is_finite() {
                return invalid(format!("beta must be finite and non-negative, got {b} at t={t}"));
            }
            if !(d > T::zero()) || !d.is_finite() {
                return invalid(format!("diffusion must be finite and positive, got {d} at t={t}"));
            }
            let bs = b * grid.dt(s);
            if bs >= T::one() {
                return invalid(format!("beta*dt = {bs} >= 1 at step {s}; refine the grid"));
            }
            let a = T::one() - bs;
            beta_step.push(bs);
            alpha_step.push(a);
            alpha_bar.push(alpha_bar[s] * a);
            cum += bs;
            alpha_bar_cont.push((-cum).exp());
        }
        let t_end = grid.t_end();
        let (b_end, d_end) = (beta(t_end), diffusion(t_end));
        if !(b_end >= T::zero()) || !(d_end > T::zero()) {
            return invalid(format!("rates invalid at t_end={t_end}"));
        }
        Ok(Self { grid, beta, diffusion, beta_step, alpha_step, alpha_bar, alpha_bar_cont })
    }

    /// Constant `beta` and `D`.
    pub fn constant(beta: T, diffusion: T, grid: TimeGrid<T>) -> Result<Self> {
        Self::new(Arc::new(move |_| beta), Arc::new(move |_| diffusion), grid)
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    pub fn beta(&self, t: T) -> T {
        (self.beta)(t)
    }

    pub fn diffusion(&self, t: T) -> T {
        (self.diffusion)(t)
    }

    pub fn beta_fn(&self) -> RateFn<T> {
        self.beta.clone()
    }

    pub fn diffusion_fn(&self) -> RateFn<T> {
        self.diffusion.clone()
    }

    /// `beta(t_s) dt_s` for each step.
    pub fn beta_step(&self) -> &[T] {
        &self.beta_step
    }

    pub fn alpha_step(&self) -> &[T] {
        &self.alpha_step
    }

    /// `alpha_bar` per node; `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self) -> &[T] {
        &self.alpha_bar
    }

    /// Continuum surrogate `exp(-sum_{r<s} beta(t_r) dt_r)` per node.
    pub fn alpha_bar_continuum(&self) -> &[T] {
        &self.alpha_bar_cont
    }

    /// Trapezoid `∫_a^b beta(t) dt` on the schedule grid.
    pub fn beta_integral(&self, a: T, b: T) -> T {
        self.grid.integrate(&*self.beta, a, b)
    }

    pub fn diffusion_integral(&self, a: T, b: T) -> T {
        self.grid.integrate(&*self.diffusion, a, b)
    }

    pub fn record(&self) -> ScheduleRecord {
        ScheduleRecord {
            t_nodes: self.grid.nodes().iter().map(|t| t.as_f64()).collect(),
            beta: self.grid.nodes().iter().map(|&t| self.beta(t).as_f64()).collect(),
            alpha_bar: self.alpha_bar.iter().map(|a| a.as_f64()).collect(),
        }
    }
}

/// Serializable snapshot of a schedule for run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub t_nodes: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_nodes() {
        let g = make_time_grid(0.0, 1.0, 4, Spacing::Uniform).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_time_grid(0.0, 1.0, 1, Spacing::Uniform).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(make_time_grid(0.0, 1.0, 0, Spacing::Uniform).is_err());
        assert!(make_time_grid(f64::NAN, 1.0, 3, Spacing::Uniform).is_err());
        assert!(make_time_grid(0.0, f64::INFINITY, 3, Spacing::Uniform).is_err());
        assert!(make_time_grid(1.0, 1.0, 3, Spacing::Uniform).is_err());
        assert!(make_time_grid(0.0, 1.0, 3, Spacing::Geometric { ratio: -2.0 }).is_err());
    }

    #[test]
    fn geometric_packs_nodes_at_start() {
        let g = make_time_grid(0.0_f64, 1.0, 1000, Spacing::Geometric { ratio: 100.0 }).unwrap();
        let dt = g.steps();
        assert!(dt[0] < dt[999]);
        assert!((dt[999] / dt[0] - 100.0).abs() < 1e-8);
        // sum of steps telescopes to the span
        let total: f64 = dt.iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn node_lookup() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 10).unwrap();
        assert_eq!(g.node_index(0.3), Some(3));
        assert_eq!(g.node_index(1.0), Some(10));
        assert_eq!(g.node_index(0.35), None);
    }

    #[test]
    fn zero_beta_gives_unit_alpha_bar() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 8).unwrap();
        let s = ddpm_schedule(Arc::new(|_| 0.0), g);
        // D = beta = 0 is not a valid diffusion coefficient
        assert!(s.is_err());
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 8).unwrap();
        let s = NoiseSchedule::new(Arc::new(|_| 0.0), Arc::new(|_| 1.0), g).unwrap();
        assert!(s.alpha_bar().iter().all(|&a| a == 1.0));
        assert!(s.alpha_step().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn two_step_product() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 2).unwrap();
        let s = ddpm_schedule(Arc::new(|_| 1.0), g).unwrap();
        assert_eq!(s.alpha_bar()[2], 0.25);
    }

    #[test]
    fn coarse_step_rejected() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 1).unwrap();
        assert!(ddpm_schedule(Arc::new(|_| 1.0), g).is_err());
    }

    #[test]
    fn record_round_trips_through_json() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 4).unwrap();
        let s = ddpm_schedule(Arc::new(|t| 0.1 + t), g).unwrap();
        let rec = s.record();
        let text = serde_json::to_string(&rec).unwrap();
        let back: ScheduleRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(rec, back);
        assert_eq!(rec.beta.len(), 5);
    }

    #[test]
    fn integrate_is_exact_for_linear_rates() {
        let g = TimeGrid::<f64>::uniform(0.0, 2.0, 7).unwrap();
        let v = g.integrate(&|t| 3.0 * t + 1.0, 0.1, 1.9);
        let exact = 1.5 * (1.9f64 * 1.9 - 0.01) + 1.8;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn f32_grid() {
        let g = make_time_grid(0.0_f32, 1.0, 64, Spacing::Geometric { ratio: 10.0 }).unwrap();
        assert_eq!(g.n_steps(), 64);
        assert_eq!(g.t_end(), 1.0);
    }
}
