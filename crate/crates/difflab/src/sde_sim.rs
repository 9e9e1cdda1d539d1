//! Euler–Maruyama ensembles for Itô SDEs `dx = F(x,t) dt + sqrt(D(t)) dW`, with optional
//! killing handled by multiplicative path weights `exp(-Σ V Δt)`.
//!
//! Randomness is counter based: the normal draw for `(seed, path, step, coordinate)` sits
//! at a fixed position of a ChaCha8 stream, so any sub-block of increments can be
//! regenerated on its own and the parallel schedule never changes results.

use crate::analytic_kernels::GaussianDensity;
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::schedule::{NoiseSchedule, TimeGrid};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::sync::Arc;

pub type DriftFn<T> = Arc<dyn Fn(&[T], T, &mut [T]) + Send + Sync>;
pub type DiffusionFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;
pub type KillingFn<T> = Arc<dyn Fn(&[T], T) -> T + Send + Sync>;

pub const DEFAULT_EXPLOSION_BOUND: f64 = 1e6;

/// Drift, diffusion coefficient and optional killing rate of a process.
#[derive(Clone)]
pub struct ProcessSpec<T> {
    pub drift: DriftFn<T>,
    pub diffusion: DiffusionFn<T>,
    pub killing: Option<KillingFn<T>>,
    pub dim: usize,
}

impl<T: Real> ProcessSpec<T> {
    pub fn new(dim: usize, drift: DriftFn<T>, diffusion: DiffusionFn<T>) -> Self {
        Self { drift, diffusion, killing: None, dim }
    }

    pub fn with_killing(mut self, killing: KillingFn<T>) -> Self {
        self.killing = Some(killing);
        self
    }

    pub fn pure_diffusion(dim: usize, diffusion: T) -> Self {
        Self::new(
            dim,
            Arc::new(|_, _, out: &mut [T]| out.iter_mut().for_each(|o| *o = T::zero())),
            Arc::new(move |_| diffusion),
        )
    }

    /// Constant-coefficient OU: `F = -beta x / 2`.
    pub fn ou(dim: usize, beta: T, diffusion: T) -> Self {
        let half = T::lit(0.5) * beta;
        Self::new(
            dim,
            Arc::new(move |x, _, out: &mut [T]| {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -half * v;
                }
            }),
            Arc::new(move |_| diffusion),
        )
    }

    /// OU process driven by a schedule: `F = -beta(t) x / 2`, `D = D(t)`.
    pub fn from_schedule(dim: usize, schedule: &NoiseSchedule<T>) -> Self {
        let beta = schedule.beta_fn();
        Self::new(
            dim,
            Arc::new(move |x, t, out: &mut [T]| {
                let h = T::lit(0.5) * beta(t);
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = -h * v;
                }
            }),
            schedule.diffusion_fn(),
        )
    }

    pub fn drift_at(&self, x: &[T], t: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        (self.drift)(x, t, &mut out);
        out
    }

    /// Drift of a one-dimensional process.
    pub fn drift_1d(&self, x: T, t: T) -> T {
        let mut out = [T::zero()];
        (self.drift)(&[x], t, &mut out);
        out[0]
    }

    pub fn diffusion_at(&self, t: T) -> T {
        (self.diffusion)(t)
    }

    pub fn killing_at(&self, x: &[T], t: T) -> T {
        self.killing.as_ref().map_or(T::zero(), |v| v(x, t))
    }
}

/// Counter-addressed normal stream for one path.
pub struct PathRng {
    rng: ChaCha8Rng,
}

impl PathRng {
    /// Stream carrying the Wiener increments of `path`.
    pub fn increments(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path.wrapping_mul(2));
        Self { rng }
    }

    /// Separate stream for initial states and other per-path draws.
    pub fn auxiliary(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path.wrapping_mul(2) | 1);
        Self { rng }
    }

    /// Position the stream at normal draw number `block` (each draw uses four 32-bit words).
    pub fn seek(&mut self, block: u64) {
        self.rng.set_word_pos(4 * block as u128);
    }

    /// Uniform on (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal by Box–Muller; consumes exactly two 64-bit words.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Anything that can produce initial states for an ensemble.
pub trait StateSampler<T>: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut PathRng, out: &mut [T]);
}

/// All paths start from the same point.
#[derive(Debug, Clone)]
pub struct PointMass<T>(pub Vec<T>);

impl<T: Real> StateSampler<T> for PointMass<T> {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn draw(&self, _: &mut PathRng, out: &mut [T]) {
        out.copy_from_slice(&self.0);
    }
}

impl<T: Real> StateSampler<T> for GaussianDensity<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn draw(&self, rng: &mut PathRng, out: &mut [T]) {
        for i in 0..out.len() {
            out[i] = self.mean[i] + self.var[i].sqrt() * T::lit(rng.normal());
        }
    }
}

/// Independent `N(0, Δt_s)` increments, laid out as `[path][step][coordinate]`.
pub fn wiener_increments<T: Real>(grid: &TimeGrid<T>, n_paths: usize, d: usize, seed: u64) -> Result<Vec<T>> {
    if n_paths == 0 || d == 0 {
        return invalid("need at least one path and one coordinate");
    }
    let n = grid.n_steps();
    let sq: Vec<T> = grid.steps().iter().map(|dt| dt.sqrt()).collect();
    let mut out = vec![T::zero(); n_paths * n * d];
    out.par_chunks_mut(n * d).enumerate().for_each(|(p, chunk)| {
        let mut rng = PathRng::increments(seed, p as u64);
        for s in 0..n {
            for k in 0..d {
                chunk[s * d + k] = sq[s] * T::lit(rng.normal());
            }
        }
    });
    Ok(out)
}

/// One Euler–Maruyama step `x + F(x,t_s) Δt_s + sqrt(D(t_s)) ΔW` from node `s`.
pub fn euler_maruyama_step<T: Real>(
    x: &[T],
    s: usize,
    grid: &TimeGrid<T>,
    spec: &ProcessSpec<T>,
    dw: &[T],
) -> Result<Vec<T>> {
    if s >= grid.n_steps() {
        return invalid(format!("step {s} beyond the last step {}", grid.n_steps() - 1));
    }
    let mut out = x.to_vec();
    let mut buf = vec![T::zero(); x.len()];
    step_in_place(&mut out, grid.t(s), grid.dt(s), spec, dw, &mut buf)?;
    Ok(out)
}

#[inline]
fn step_in_place<T: Real>(x: &mut [T], t: T, dt: T, spec: &ProcessSpec<T>, dw: &[T], buf: &mut [T]) -> Result<()> {
    (spec.drift)(x, t, buf);
    if buf.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFiniteDrift { x: x.iter().map(|v| v.as_f64()).collect(), t: t.as_f64() });
    }
    let sd = spec.diffusion_at(t).sqrt();
    for i in 0..x.len() {
        x[i] += buf[i] * dt + sd * dw[i];
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Abort once any coordinate exceeds this magnitude.
    pub explosion_bound: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { explosion_bound: DEFAULT_EXPLOSION_BOUND }
    }
}

/// Run one path, calling `visit(s, x, log_weight)` at every node `s = 0..=n`.
pub(crate) fn run_path<T: Real>(
    spec: &ProcessSpec<T>,
    init: &dyn StateSampler<T>,
    grid: &TimeGrid<T>,
    seed: u64,
    path: usize,
    opts: SimOptions,
    mut visit: impl FnMut(usize, &[T], T),
) -> Result<()> {
    let d = spec.dim;
    let mut x = vec![T::zero(); d];
    init.draw(&mut PathRng::auxiliary(seed, path as u64), &mut x);
    let mut rng = PathRng::increments(seed, path as u64);
    let mut dw = vec![T::zero(); d];
    let mut buf = vec![T::zero(); d];
    let mut log_w = T::zero();
    let bound = T::lit(opts.explosion_bound);
    for s in 0..grid.n_steps() {
        let t = grid.t(s);
        let dt = grid.dt(s);
        visit(s, &x, log_w);
        if let Some(v) = &spec.killing {
            log_w -= v(&x, t) * dt;
        }
        let sq = dt.sqrt();
        for w in dw.iter_mut() {
            *w = sq * T::lit(rng.normal());
        }
        step_in_place(&mut x, t, dt, spec, &dw, &mut buf)?;
        if x.iter().any(|v| !(v.abs() <= bound)) {
            return Err(Error::Explosion {
                path,
                t: grid.t(s + 1).as_f64(),
                bound: opts.explosion_bound,
                x: x.iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    visit(grid.n_steps(), &x, log_w);
    Ok(())
}

/// States and Feynman–Kac weights of every path at the retained nodes.
#[derive(Debug, Clone)]
pub struct Ensemble<T> {
    pub grid: TimeGrid<T>,
    pub seed: u64,
    pub dim: usize,
    pub n_paths: usize,
    /// Retained node indices, increasing.
    pub retained: Vec<usize>,
    /// `states[r][p * dim + k]`: coordinate `k` of path `p` at node `retained[r]`.
    pub states: Vec<Vec<T>>,
    /// `weights[r][p]`.
    pub weights: Vec<Vec<T>>,
}

impl<T: Real> Ensemble<T> {
    /// Position of node `s` among the retained nodes.
    pub fn slot(&self, s: usize) -> Option<usize> {
        self.retained.iter().position(|&r| r == s)
    }

    /// States at the final node (if retained).
    pub fn terminal(&self) -> Option<&[T]> {
        self.slot(self.grid.n_steps()).map(|r| self.states[r].as_slice())
    }

    pub fn terminal_weights(&self) -> Option<&[T]> {
        self.slot(self.grid.n_steps()).map(|r| self.weights[r].as_slice())
    }

    /// Coordinate `k` of every path at retained node `s`.
    pub fn coordinate(&self, s: usize, k: usize) -> Option<Vec<T>> {
        let r = self.slot(s)?;
        Some(self.states[r].iter().skip(k).step_by(self.dim).copied().collect())
    }

    /// One row per path per retained node: `path_id, t, x_0.., weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path_id".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|k| format!("x_{k}")));
        header.push("weight".into());
        w.write_record(&header)?;
        for p in 0..self.n_paths {
            for (r, &s) in self.retained.iter().enumerate() {
                let mut row = vec![p.to_string(), self.grid.t(s).to_string()];
                row.extend(self.states[r][p * self.dim..(p + 1) * self.dim].iter().map(|v| v.to_string()));
                row.push(self.weights[r][p].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward sweep of `n_paths` paths; killing multiplies each path weight by
/// `exp(-V(x_s,t_s) Δt_s)` per step, paths are never removed.
pub fn simulate_ensemble<T: Real>(
    spec: &ProcessSpec<T>,
    init: &dyn StateSampler<T>,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
    retain: &[usize],
    opts: SimOptions,
) -> Result<Ensemble<T>> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    if init.dim() != spec.dim {
        return invalid(format!("initial sampler has dim {}, process has {}", init.dim(), spec.dim));
    }
    let n = grid.n_steps();
    let mut retained: Vec<usize> = retain.to_vec();
    retained.sort_unstable();
    retained.dedup();
    if retained.iter().any(|&s| s > n) {
        return invalid(format!("retained node beyond {n}"));
    }
    let mut slot = vec![usize::MAX; n + 1];
    for (r, &s) in retained.iter().enumerate() {
        slot[s] = r;
    }
    let d = spec.dim;
    let nr = retained.len();
    let per_path: Vec<(Vec<T>, Vec<T>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xs = vec![T::zero(); nr * d];
            let mut ws = vec![T::zero(); nr];
            run_path(spec, init, grid, seed, p, opts, |s, x, lw| {
                let r = slot[s];
                if r != usize::MAX {
                    xs[r * d..(r + 1) * d].copy_from_slice(x);
                    ws[r] = lw.exp();
                }
            })?;
            Ok((xs, ws))
        })
        .collect::<Result<_>>()?;
    let mut states = vec![vec![T::zero(); n_paths * d]; nr];
    let mut weights = vec![vec![T::zero(); n_paths]; nr];
    for (p, (xs, ws)) in per_path.into_iter().enumerate() {
        for r in 0..nr {
            states[r][p * d..(p + 1) * d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            weights[r][p] = ws[r];
        }
    }
    Ok(Ensemble { grid: grid.clone(), seed, dim: d, n_paths, retained, states, weights })
}

/// Monte Carlo Feynman–Kac value `E[f(x(t_n)) exp(-∫V)]` for paths started at `xi` at
/// grid node `tau`. Returns `(estimate, standard error)`.
pub fn feynman_kac_expectation<T: Real>(
    spec: &ProcessSpec<T>,
    terminal_fn: &(dyn Fn(&[T]) -> T + Sync),
    xi: &[T],
    tau: T,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
) -> Result<(T, T)> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    let Some(k) = grid.node_index(tau) else {
        return invalid(format!("tau={tau} is not a grid node"));
    };
    if k == grid.n_steps() {
        let v = terminal_fn(xi);
        return Ok((v, T::zero()));
    }
    let sub = grid.sub_grid(k, grid.n_steps())?;
    let init = PointMass(xi.to_vec());
    let last = sub.n_steps();
    let vals: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut v = 0.0;
            run_path(spec, &init, &sub, seed, p, SimOptions::default(), |s, x, lw| {
                if s == last {
                    v = (terminal_fn(x) * lw.exp()).as_f64();
                }
            })?;
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let (mean, se) = crate::stats::mean_and_se(&vals);
    Ok((T::lit(mean), T::lit(se)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    #[test]
    fn increments_are_reproducible_and_addressable() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 5).unwrap();
        let a = wiener_increments(&g, 7, 2, 11).unwrap();
        let b = wiener_increments(&g, 7, 2, 11).unwrap();
        assert_eq!(a, b);
        let c = wiener_increments(&g, 7, 2, 12).unwrap();
        assert_ne!(a, c);
        // path 4, step 3, coordinate 1 regenerated in isolation
        let mut rng = PathRng::increments(11, 4);
        rng.seek((3 * 2 + 1) as u64);
        let v = g.dt(3).sqrt() * rng.normal();
        assert_eq!(v, a[4 * 10 + 3 * 2 + 1]);
    }

    #[test]
    fn euler_step_basics() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 10).unwrap();
        let spec = ProcessSpec::new(1, Arc::new(|x: &[f64], _, o: &mut [f64]| o[0] = -x[0]), Arc::new(|_| 1.0));
        let x = euler_maruyama_step(&[1.0], 0, &g, &spec, &[0.0]).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-15);
        let free = ProcessSpec::pure_diffusion(1, 1e-300);
        assert_eq!(euler_maruyama_step(&[2.5], 3, &g, &free, &[0.0]).unwrap(), vec![2.5]);
        assert!(euler_maruyama_step(&[1.0], 10, &g, &spec, &[0.0]).is_err());
    }

    #[test]
    fn non_finite_drift_reports_location() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 10).unwrap();
        let spec = ProcessSpec::new(1, Arc::new(|x: &[f64], _, o: &mut [f64]| o[0] = 1.0 / x[0]), Arc::new(|_| 1.0));
        match euler_maruyama_step(&[0.0], 2, &g, &spec, &[0.0]) {
            Err(Error::NonFiniteDrift { x, t }) => {
                assert_eq!(x, vec![0.0]);
                assert!((t - 0.2).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explosion_guard_trips() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 50).unwrap();
        let spec = ProcessSpec::new(1, Arc::new(|x: &[f64], _, o: &mut [f64]| o[0] = 50.0 * x[0] * x[0]), Arc::new(|_| 1.0));
        let r = simulate_ensemble(&spec, &PointMass(vec![2.0]), &g, 4, 1, &[50], SimOptions::default());
        assert!(matches!(r, Err(Error::Explosion { .. })));
    }

    #[test]
    fn constant_killing_weight() {
        let g = TimeGrid::<f64>::uniform(0.0, 2.0, 40).unwrap();
        let spec = ProcessSpec::pure_diffusion(1, 1.0).with_killing(Arc::new(|_, _| 0.3));
        let e = simulate_ensemble(&spec, &PointMass(vec![0.0]), &g, 100, 3, &[0, 40], SimOptions::default()).unwrap();
        let w = e.terminal_weights().unwrap();
        assert!(w.iter().all(|&v| (v - (-0.6f64).exp()).abs() < 1e-12));
        assert!(e.weights[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ensemble_is_deterministic() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 20).unwrap();
        let spec = ProcessSpec::ou(2, 1.0, 1.0);
        let init = GaussianDensity::new(vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
        let a = simulate_ensemble(&spec, &init, &g, 500, 9, &[10, 20], SimOptions::default()).unwrap();
        let b = simulate_ensemble(&spec, &init, &g, 500, 9, &[20, 10], SimOptions::default()).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.coordinate(20, 1).unwrap().len(), 500);
    }

    #[test]
    fn feynman_kac_trivial_cases() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 20).unwrap();
        let spec = ProcessSpec::pure_diffusion(1, 1.0);
        let (v, se) = feynman_kac_expectation(&spec, &|_| 1.0, &[0.0], 0.0, &g, 200, 5).unwrap();
        assert_eq!((v, se), (1.0, 0.0));
        assert!(feynman_kac_expectation(&spec, &|_| 1.0, &[0.0], 0.33, &g, 200, 5).is_err());
        assert!(feynman_kac_expectation(&spec, &|_| 1.0, &[0.0], 0.0, &g, 0, 5).is_err());
        let killed = spec.clone().with_killing(Arc::new(|_, _| 2.0));
        let (v, _) = feynman_kac_expectation(&killed, &|_| 1.0, &[0.0], 0.5, &g, 50, 5).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn csv_rows() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 2).unwrap();
        let spec = ProcessSpec::pure_diffusion(2, 1.0);
        let e = simulate_ensemble(&spec, &PointMass(vec![0.0, 0.0]), &g, 3, 1, &[0, 2], SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,x_0,x_1,weight");
        assert_eq!(lines.len(), 1 + 3 * 2);
        // values round-trip exactly
        let last: Vec<&str> = lines[6].split(',').collect();
        let x0: f64 = last[2].parse().unwrap();
        assert_eq!(x0, e.states[1][2 * 2]);
    }

    #[test]
    fn increment_variance_small_sample() {
        let g = TimeGrid::<f64>::uniform(0.0, 1.0, 4).unwrap();
        let w = wiener_increments(&g, 20_000, 1, 2).unwrap();
        let first: Vec<f64> = w.iter().step_by(4).copied().collect();
        let (m, v) = stats::mean_var(&first);
        assert!(m.abs() < 4.0 * (0.25f64 / 20_000.0).sqrt());
        assert!((v / 0.25 - 1.0).abs() < 0.05);
    }
}
