//! Relative entropy between transition laws: the discrete cell-transfer problem solved by
//! alternating scaling, a multinomial large-deviation experiment, and the pathwise KL
//! between two diffusions by quadrature and by Monte Carlo.
//!
//! Transition matrices are stored row-per-source: `m[l][k] = h(k | l)`.

use crate::error::{invalid, Error, Result};
use crate::exact_mixture::MixturePath;
use crate::pde_grid::{Field, SpatialGrid};
use crate::real::Real;
use crate::schedule::TimeGrid;
use crate::sde_sim::{run_path, ProcessSpec, SimOptions, StateSampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Particles in `a.len()` source cells, each moving independently with `g(k | l)`,
/// conditioned on arriving with occupancy `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSystem<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub g: Vec<Vec<T>>,
    pub n: T,
}

impl<T: Real> CellSystem<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, g: Vec<Vec<T>>) -> Result<Self> {
        let n: T = a.iter().copied().sum();
        let sys = Self { a, b, g, n };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        let tol = T::lit(1e-9) * self.n.max(T::one());
        if self.a.iter().chain(&self.b).any(|&v| !(v >= T::zero())) {
            return invalid("occupancies must be non-negative");
        }
        let sa: T = self.a.iter().copied().sum();
        let sb: T = self.b.iter().copied().sum();
        if (sa - self.n).abs() > tol || (sb - self.n).abs() > tol {
            return invalid(format!("occupancies must sum to N={} (a: {sa}, b: {sb})", self.n));
        }
        if self.g.len() != self.a.len() {
            return invalid("g needs one row per source cell");
        }
        for (l, row) in self.g.iter().enumerate() {
            if row.len() != self.b.len() {
                return invalid(format!("g row {l} has {} entries, expected {}", row.len(), self.b.len()));
            }
            check_stochastic_row(row, l)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self>
    where
        T: serde::de::DeserializeOwned,
    {
        let sys: Self = serde_json::from_str(text)?;
        sys.validate()?;
        Ok(sys)
    }

    /// Expected arrival occupancy `Σ_l a_l g(k | l)`.
    pub fn pushforward(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.b.len()];
        for (row, &al) in self.g.iter().zip(&self.a) {
            for (o, &gk) in out.iter_mut().zip(row) {
                *o += al * gk;
            }
        }
        out
    }
}

fn check_stochastic_row<T: Real>(row: &[T], l: usize) -> Result<()> {
    if row.iter().any(|&v| !(v >= T::zero())) {
        return invalid(format!("row {l} has a negative or non-finite entry"));
    }
    let s: T = row.iter().copied().sum();
    if (s - T::one()).abs() > T::lit(1e-12).max(T::epsilon() * T::lit(8.0)) {
        return invalid(format!("row {l} sums to {s}, not 1"));
    }
    Ok(())
}

/// `Σ_l p(l) Σ_k h(k|l) ln(h(k|l) / g(k|l))` with `0 ln 0 = 0`; `+∞` when `h` puts mass
/// where `g` has none (on a source with positive weight).
pub fn discrete_kl<T: Real>(p: &[T], h: &[Vec<T>], g: &[Vec<T>]) -> Result<T> {
    if h.len() != p.len() || g.len() != p.len() {
        return invalid("p, h and g must share the source dimension");
    }
    for (l, (hr, gr)) in h.iter().zip(g).enumerate() {
        if hr.len() != gr.len() {
            return invalid(format!("row {l}: h and g have different widths"));
        }
        check_stochastic_row(hr, l)?;
        check_stochastic_row(gr, l)?;
    }
    let mut acc = T::zero();
    for ((&pl, hr), gr) in p.iter().zip(h).zip(g) {
        if pl == T::zero() {
            continue;
        }
        for (&hk, &gk) in hr.iter().zip(gr) {
            if hk == T::zero() {
                continue;
            }
            if gk == T::zero() {
                return Ok(T::infinity());
            }
            acc += pl * hk * (hk / gk).ln();
        }
    }
    Ok(acc)
}

/// Diagnostics of [`optimal_transfer`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub kl_star: f64,
    pub rate: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub residual_history: Vec<f64>,
    /// `N` is below 100 particles per cell, where the Stirling form of the rate is rough.
    pub stirling_warning: bool,
}

#[derive(Debug, Clone)]
pub struct TransferSolution<T> {
    pub h_star: Vec<Vec<T>>,
    /// Column scaling `ψ_k` with `h*(k|l) ∝ g(k|l) ψ_k`.
    pub psi: Vec<T>,
    pub report: TransferReport,
}

impl<T: Real> TransferSolution<T> {
    pub fn write_h_star_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.h_star {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const MAX_SINKHORN_ITERATIONS: usize = 100_000;

/// Transition law closest to `g` in KL that carries `a` onto `b`, found by alternating
/// scaling. The residual is the L1 column-marginal mismatch divided by `N`.
pub fn optimal_transfer<T: Real>(system: &CellSystem<T>, tol: T) -> Result<TransferSolution<T>> {
    system.validate()?;
    if system.g.iter().flatten().any(|&v| !(v > T::zero())) {
        return invalid("g must be strictly positive");
    }
    let n = system.n;
    let ncol = system.b.len();
    let mut psi = vec![T::one(); ncol];
    let mut history = Vec::new();
    let mut h = system.g.clone();
    for it in 1..=MAX_SINKHORN_ITERATIONS {
        let col = column_marginal(system, &psi, &mut h);
        let resid: T = col.iter().zip(&system.b).map(|(&c, &b)| (c - b).abs()).sum::<T>() / n;
        history.push(resid.as_f64());
        if resid <= tol {
            return finish(system, h, psi, it - 1, history);
        }
        for k in 0..ncol {
            psi[k] = if system.b[k] == T::zero() { T::zero() } else { psi[k] * system.b[k] / col[k] };
        }
        let top = psi.iter().copied().fold(T::zero(), T::max);
        for v in psi.iter_mut() {
            *v /= top;
        }
        if it == MAX_SINKHORN_ITERATIONS {
            break;
        }
    }
    let residual = *history.last().unwrap_or(&f64::NAN);
    Err(Error::NotConverged { iterations: MAX_SINKHORN_ITERATIONS, residual, history })
}

/// Fill `h` with the row-normalized `g ψ` and return its arrival occupancy.
fn column_marginal<T: Real>(system: &CellSystem<T>, psi: &[T], h: &mut [Vec<T>]) -> Vec<T> {
    let mut col = vec![T::zero(); psi.len()];
    for (l, row) in system.g.iter().enumerate() {
        let z: T = row.iter().zip(psi).map(|(&g, &p)| g * p).sum();
        for k in 0..psi.len() {
            h[l][k] = if z > T::zero() { row[k] * psi[k] / z } else { row[k] };
            col[k] += system.a[l] * h[l][k];
        }
    }
    col
}

fn finish<T: Real>(
    system: &CellSystem<T>,
    h: Vec<Vec<T>>,
    psi: Vec<T>,
    iterations: usize,
    history: Vec<f64>,
) -> Result<TransferSolution<T>> {
    let p: Vec<T> = system.a.iter().map(|&al| al / system.n).collect();
    let kl = discrete_kl(&p, &h, &system.g)?.max(T::zero());
    let report = TransferReport {
        kl_star: kl.as_f64(),
        rate: -(system.n * kl).as_f64(),
        iterations,
        marginal_residual: *history.last().unwrap_or(&0.0),
        residual_history: history,
        stirling_warning: system.n.as_f64() < 100.0 * system.b.len() as f64,
    };
    Ok(TransferSolution { h_star: h, psi, report })
}

/// Outcome of [`ink_experiment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InkReport {
    pub n: f64,
    pub trials: usize,
    pub hits: usize,
    pub frequency: f64,
    /// `-ln(frequency) / N`.
    pub observed_rate: f64,
    pub kl_star: f64,
    pub relative_gap: f64,
    /// `kl* + ln(sqrt(2π σ²)) / N`: the rate including the leading sub-exponential factor.
    pub prefactor_rate: f64,
}

/// Push `N` particles through `g` in each of `trials` independent trials and count how
/// often the arrival occupancy `B` falls in the half-space `Σ_k ln ψ_k (B_k - b_k) ≥ 0`.
/// Its exponential rate is exactly `kl*`, since `b` minimises the KL over that set.
pub fn ink_experiment(system: &CellSystem<f64>, trials: usize, seed: u64, tol: f64) -> Result<InkReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    if system.a.iter().chain(&system.b).any(|v| v.fract() != 0.0) {
        return invalid("occupancies must be whole particle counts");
    }
    let sol = optimal_transfer(system, tol)?;
    if sol.psi.iter().any(|&p| p <= 0.0) {
        return invalid("target occupancy must be positive in every cell");
    }
    let log_psi: Vec<f64> = sol.psi.iter().map(|p| p.ln()).collect();
    let threshold: f64 = log_psi.iter().zip(&system.b).map(|(l, b)| l * b).sum();
    let slack = 1e-9 * threshold.abs().max(1.0);
    let ncell = system.b.len();
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let mut arrivals = vec![0u64; ncell];
            for (row, &al) in system.g.iter().zip(&system.a) {
                multinomial_into(al as u64, row, &mut rng, &mut arrivals);
            }
            let score: f64 = arrivals.iter().zip(&log_psi).map(|(&c, l)| c as f64 * l).sum();
            usize::from(score >= threshold - slack)
        })
        .sum();
    let n = system.n;
    let frequency = hits as f64 / trials as f64;
    let observed_rate = -frequency.ln() / n;
    let kl = sol.report.kl_star;
    let mut var = 0.0;
    for (hr, &al) in sol.h_star.iter().zip(&system.a) {
        let m: f64 = hr.iter().zip(&log_psi).map(|(h, l)| h * l).sum();
        let m2: f64 = hr.iter().zip(&log_psi).map(|(h, l)| h * l * l).sum();
        var += al * (m2 - m * m);
    }
    Ok(InkReport {
        n,
        trials,
        hits,
        frequency,
        observed_rate,
        kl_star: kl,
        relative_gap: (observed_rate - kl).abs() / kl,
        prefactor_rate: kl + 0.5 * (std::f64::consts::TAU * var).ln() / n,
    })
}

fn multinomial_into(count: u64, probs: &[f64], rng: &mut ChaCha8Rng, out: &mut [u64]) {
    let mut left = count;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (k, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k == last {
            out[k] += left;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(left, q).map(|d| d.sample(rng)).unwrap_or(0);
        out[k] += draw;
        left -= draw;
        mass -= p;
    }
}

/// Marginal densities along a time grid, either on a spatial grid or in closed form.
pub enum DensityPath<'a, T> {
    Field(&'a Field<T>),
    Mixture(&'a MixturePath<T>, &'a SpatialGrid<T>),
}

/// `Σ_s Δt_s ∫ P(x, t_s) [ (F_H - F_G)² / 2D + V_G ] dx` over the left nodes of `grid`.
pub fn pathwise_kl_closed<T: Real>(
    spec_h: &ProcessSpec<T>,
    spec_g: &ProcessSpec<T>,
    density: DensityPath<'_, T>,
    grid: &TimeGrid<T>,
) -> Result<T> {
    if spec_h.dim != 1 || spec_g.dim != 1 {
        return invalid("quadrature form is one-dimensional");
    }
    check_same_diffusion(spec_h, spec_g, grid)?;
    let (space, node_of): (SpatialGrid<T>, Box<dyn Fn(usize) -> Option<usize>>) = match &density {
        DensityPath::Field(f) => {
            let tg = f.label_grid();
            (f.grid, Box::new(move |s| tg.node_index(grid.t(s))))
        }
        DensityPath::Mixture(path, space) => {
            let pg = path.grid.clone();
            (**space, Box::new(move |s| pg.node_index(grid.t(s))))
        }
    };
    let xs = space.nodes();
    let mut total = T::zero();
    for s in 0..grid.n_steps() {
        let t = grid.t(s);
        let Some(k) = node_of(s) else {
            return invalid(format!("density path has no node at t={t}"));
        };
        let p: Vec<T> = match &density {
            DensityPath::Field(f) => f.values[k].clone(),
            DensityPath::Mixture(path, _) => xs.iter().map(|&x| path.snapshot(k).pdf(&[x])).collect(),
        };
        let d = spec_h.diffusion_at(t);
        let integrand: Vec<T> = xs
            .iter()
            .zip(&p)
            .map(|(&x, &pi)| {
                let du = spec_h.drift_1d(x, t) - spec_g.drift_1d(x, t);
                pi * (du * du / (T::lit(2.0) * d) + spec_g.killing_at(&[x], t))
            })
            .collect();
        total += grid.dt(s) * space.integrate(&integrand);
    }
    Ok(total)
}

fn check_same_diffusion<T: Real>(a: &ProcessSpec<T>, b: &ProcessSpec<T>, grid: &TimeGrid<T>) -> Result<()> {
    for &t in grid.nodes() {
        let (da, db) = (a.diffusion_at(t), b.diffusion_at(t));
        if (da - db).abs() > T::lit(1e-12) * da.abs().max(T::one()) {
            return invalid(format!("diffusion coefficients differ at t={t}: {da} vs {db}"));
        }
    }
    Ok(())
}

/// Monte Carlo estimate of the pathwise KL: simulate under `H` and accumulate the log
/// ratio of the Euler transition densities (with `G`'s killing factor) on each step.
/// Returns `(estimate, standard error)`.
pub fn pathwise_kl_monte_carlo<T: Real>(
    spec_h: &ProcessSpec<T>,
    spec_g: &ProcessSpec<T>,
    init: &dyn StateSampler<T>,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    if spec_h.dim != spec_g.dim || init.dim() != spec_h.dim {
        return invalid("dimension mismatch between processes and initial law");
    }
    if spec_h.killing.is_some() {
        return invalid("the sampled process must not be killed");
    }
    check_same_diffusion(spec_h, spec_g, grid)?;
    let d = spec_h.dim;
    let vals: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut prev = vec![T::zero(); d];
            let mut acc = T::zero();
            run_path(spec_h, init, grid, seed, p, SimOptions::default(), |s, x, _| {
                if s > 0 {
                    let t = grid.t(s - 1);
                    let dt = grid.dt(s - 1);
                    let dd = spec_h.diffusion_at(t);
                    let fh = spec_h.drift_at(&prev, t);
                    let fg = spec_g.drift_at(&prev, t);
                    let mut q = T::zero();
                    for k in 0..d {
                        let dx = x[k] - prev[k];
                        let eh = dx - fh[k] * dt;
                        let eg = dx - fg[k] * dt;
                        q += eg * eg - eh * eh;
                    }
                    acc += q / (T::lit(2.0) * dd * dt) + spec_g.killing_at(&prev, t) * dt;
                }
                prev.copy_from_slice(x);
            })?;
            Ok(acc.as_f64())
        })
        .collect::<Result<_>>()?;
    Ok(crate::stats::mean_and_se(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic_kernels::GaussianDensity;
    use std::sync::Arc;

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b[0].len()).map(|k| row.iter().zip(b).map(|(x, br)| x * br[k]).sum()).collect())
            .collect()
    }

    #[test]
    fn kl_hand_value_and_support() {
        let h = vec![vec![0.9, 0.1], vec![0.3, 0.7]];
        let g = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        let v: f64 = discrete_kl(&[1.0, 0.0], &h, &g).unwrap();
        assert!((v - 0.368).abs() < 1e-3, "{v}");
        assert!((v - (0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln())).abs() < 1e-15);
        assert_eq!(discrete_kl(&[0.5, 0.5], &h, &g).unwrap(), f64::INFINITY);
        assert_eq!(discrete_kl(&[0.5, 0.5], &h, &h).unwrap(), 0.0);
        assert!(discrete_kl(&[1.0, 0.0], &[vec![0.9, 0.2], vec![0.5, 0.5]], &h).is_err());
    }

    #[test]
    fn composing_steps_never_increases_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random_row = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..3).map(|_| rand::Rng::random::<f64>(rng) + 0.05).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        for _ in 0..200 {
            let p = random_row(&mut rng);
            let mats: Vec<Vec<Vec<f64>>> = (0..4).map(|_| (0..3).map(|_| random_row(&mut rng)).collect()).collect();
            let (h1, h2, g1, g2) = (&mats[0], &mats[1], &mats[2], &mats[3]);
            let p1: Vec<f64> = (0..3).map(|k| (0..3).map(|l| p[l] * h1[l][k]).sum()).collect();
            let two_step = discrete_kl(&p, h1, g1).unwrap() + discrete_kl(&p1, h2, g2).unwrap();
            let one_step = discrete_kl(&p, &matmul(h1, h2), &matmul(g1, g2)).unwrap();
            assert!(one_step <= two_step + 1e-12);
            assert!(one_step >= 0.0);
        }
    }

    #[test]
    fn typical_target_costs_nothing() {
        let g = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]];
        let a = vec![300.0, 500.0, 200.0];
        let sys = CellSystem::new(a.clone(), vec![0.0; 3], g.clone()).err();
        assert!(sys.is_some());
        let b: Vec<f64> = (0..3).map(|k| (0..3).map(|l| a[l] * g[l][k]).sum()).collect();
        let sys = CellSystem::new(a, b, g.clone()).unwrap();
        let sol = optimal_transfer(&sys, 1e-13).unwrap();
        assert!(sol.report.kl_star.abs() < 1e-14);
        assert!(sol.report.rate.abs() < 1e-10);
        for (hr, gr) in sol.h_star.iter().zip(&g) {
            for (x, y) in hr.iter().zip(gr) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_particles_forced_across() {
        let n = 1000.0;
        let sys = CellSystem::new(vec![n, 0.0], vec![0.0, n], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let sol = optimal_transfer::<f64>(&sys, 1e-12).unwrap();
        assert!((sol.h_star[0][1] - 1.0).abs() < 1e-12);
        assert!((sol.report.kl_star - 2f64.ln()).abs() < 1e-12);
        assert!((sol.report.rate + n * 2f64.ln()).abs() < 1e-9);
        assert!(!sol.report.stirling_warning);
        let small = CellSystem::new(vec![10.0, 0.0], vec![0.0, 10.0], sys.g.clone()).unwrap();
        assert!(optimal_transfer(&small, 1e-12).unwrap().report.stirling_warning);
    }

    #[test]
    fn residuals_fall_and_labels_permute() {
        let g = vec![vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3], vec![0.25, 0.25, 0.5]];
        let sys = CellSystem::new(vec![400.0, 350.0, 250.0], vec![200.0, 300.0, 500.0], g.clone()).unwrap();
        let sol = optimal_transfer(&sys, 1e-12).unwrap();
        let hist = &sol.report.residual_history;
        assert!(hist.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
        let perm = [2usize, 0, 1];
        let pg: Vec<Vec<f64>> = perm.iter().map(|&l| perm.iter().map(|&k| g[l][k]).collect()).collect();
        let psys = CellSystem::new(
            perm.iter().map(|&l| sys.a[l]).collect(),
            perm.iter().map(|&k| sys.b[k]).collect(),
            pg,
        )
        .unwrap();
        let psol = optimal_transfer(&psys, 1e-12).unwrap();
        assert!((psol.report.kl_star - sol.report.kl_star).abs() < 1e-12);
        for (i, &l) in perm.iter().enumerate() {
            for (j, &k) in perm.iter().enumerate() {
                assert!((psol.h_star[i][j] - sol.h_star[l][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn json_round_trip_and_csv() {
        let sys = CellSystem::new(vec![2.0, 3.0], vec![4.0, 1.0], vec![vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let text = serde_json::to_string(&sys).unwrap();
        assert_eq!(CellSystem::from_json(&text).unwrap(), sys);
        assert!(CellSystem::<f64>::from_json(r#"{"a":[1],"b":[2],"g":[[1]],"n":1}"#).is_err());
        let sol = optimal_transfer(&sys, 1e-12).unwrap();
        let mut buf = Vec::new();
        sol.write_h_star_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: f64 = text.lines().next().unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, sol.h_star[0][0]);
    }

    #[test]
    fn multinomial_conserves_particles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut out = vec![0u64; 3];
        multinomial_into(1000, &[0.2, 0.3, 0.5], &mut rng, &mut out);
        assert_eq!(out.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn constant_drift_kl() {
        let grid = TimeGrid::uniform(0.0, 2.0, 20).unwrap();
        let space = SpatialGrid::new(-10.0, 10.0, 401).unwrap();
        let (u, d) = (0.7, 1.5);
        let h = ProcessSpec::new(1, Arc::new(move |_: &[f64], _, o: &mut [f64]| o[0] = u), Arc::new(move |_| d));
        let g = ProcessSpec::pure_diffusion(1, d);
        let field = Field::from_fn(space, grid.clone(), crate::pde_grid::FieldKind::Density, |x: f64, _| {
            (-x * x / 2.0).exp() / std::f64::consts::TAU.sqrt()
        });
        let v = pathwise_kl_closed(&h, &g, DensityPath::Field(&field), &grid).unwrap();
        assert!((v - u * u * 2.0 / (2.0 * d)).abs() < 1e-10);
        assert_eq!(pathwise_kl_closed(&g, &g, DensityPath::Field(&field), &grid).unwrap(), 0.0);
        let init = GaussianDensity::scalar(0.0, 1.0).unwrap();
        let (est, se) = pathwise_kl_monte_carlo(&h, &g, &init, &grid, 4000, 9).unwrap();
        assert!((est - u * u * 2.0 / (2.0 * d)).abs() < 3.0 * se + 1e-12, "{est} ± {se}");
        let (zero, _) = pathwise_kl_monte_carlo(&g, &g, &init, &grid, 100, 9).unwrap();
        assert!(zero.abs() < 1e-12);
        let other = ProcessSpec::pure_diffusion(1, 1.0);
        assert!(pathwise_kl_closed(&h, &other, DensityPath::Field(&field), &grid).is_err());
        assert!(pathwise_kl_monte_carlo(&h, &g, &init, &grid, 0, 9).is_err());
    }
}
