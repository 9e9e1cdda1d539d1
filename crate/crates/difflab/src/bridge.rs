//! Schrödinger-system solving on a one-dimensional grid and the denoising posterior
//! kernels.
//!
//! Transition kernels are stored source-major: `log_density[i][f]` is
//! `ln G(x_f, t_f | x_i, t_i)`. The scaling functions are kept in log space and combined
//! with log-sum-exp, since kernel entries span hundreds of orders of magnitude on a wide
//! grid. Quadrature is trapezoidal with the grid weights.

use crate::analytic_kernels::ou_affine;
use crate::error::{invalid, Error, Result};
use crate::exact_mixture::derivative_5pt;
use crate::pde_grid::{solve_backward_kolmogorov, solve_fokker_planck, Field, SolverOptions, SpatialGrid};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::sde_sim::ProcessSpec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Tolerated relative mass deficit of a resolved kernel row.
pub const MASS_TOLERANCE: f64 = 1e-4;

/// `ln Σ exp(v)`; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY || !top.is_finite() {
        return top;
    }
    top + v.map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Closed-form reference kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelModel {
    /// Brownian motion with constant diffusion coefficient.
    PureDiffusion { diffusion: f64 },
    /// Drift `rate·x`, constant diffusion and a constant killing rate.
    LinearDrift { rate: f64, diffusion: f64, killing: f64 },
}

impl KernelModel {
    /// `(mean, variance, ln mass)` of the kernel from `x0` after `elapsed`.
    fn law(&self, x0: f64, elapsed: f64) -> (f64, f64, f64) {
        match *self {
            KernelModel::PureDiffusion { diffusion } => (x0, diffusion * elapsed, 0.0),
            KernelModel::LinearDrift { rate, diffusion, killing } => {
                let var = if rate == 0.0 {
                    diffusion * elapsed
                } else {
                    diffusion / (2.0 * rate) * (2.0 * rate * elapsed).exp_m1()
                };
                (x0 * (rate * elapsed).exp(), var, -killing * elapsed)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (d, ok) = match *self {
            KernelModel::PureDiffusion { diffusion } => (diffusion, true),
            KernelModel::LinearDrift { rate, diffusion, killing } => (diffusion, rate.is_finite() && killing.is_finite()),
        };
        if !(d > 0.0 && d.is_finite()) || !ok {
            return invalid("kernel model needs a positive diffusion and finite coefficients");
        }
        Ok(())
    }
}

/// How to obtain the kernel matrix.
pub enum KernelSource<'a> {
    Analytic { model: KernelModel, t_i: f64, t_f: f64 },
    /// One grid solve per source node, started from a discrete delta.
    Pde { spec: &'a ProcessSpec<f64>, time_grid: &'a TimeGrid<f64>, opts: SolverOptions },
}

/// Discretized transition kernel `G(x_f, t_f | x_i, t_i)` on a common spatial grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub grid: SpatialGrid<f64>,
    pub t_i: f64,
    pub t_f: f64,
    /// `[source][destination]`, natural log of the density.
    pub log_density: Vec<Vec<f64>>,
}

impl KernelMatrix {
    pub fn m(&self) -> usize {
        self.grid.m
    }

    pub fn density(&self, i: usize, f: usize) -> f64 {
        self.log_density[i][f].exp()
    }

    /// `Σ_f w_f G(x_f | x_i)`.
    pub fn row_mass(&self, i: usize) -> f64 {
        let w = self.grid.weights();
        self.log_density[i].iter().zip(&w).map(|(&l, &wf)| wf * l.exp()).sum()
    }

    /// Push a density forward: `p_f(x_f) = Σ_i w_i G(x_f | x_i) p(x_i)`.
    pub fn push_forward(&self, p: &[f64]) -> Vec<f64> {
        let w = self.grid.weights();
        (0..self.m())
            .into_par_iter()
            .map(|f| (0..self.m()).map(|i| w[i] * p[i] * self.log_density[i][f].exp()).sum())
            .collect()
    }

    /// `ln Σ_f w_f G(x_f | x_i) e^{g(x_f)}` for every source.
    pub fn log_pull_back(&self, log_g: &[f64]) -> Vec<f64> {
        let lw: Vec<f64> = self.grid.weights().iter().map(|w| w.ln()).collect();
        self.log_density
            .par_iter()
            .map(|row| log_sum_exp((0..row.len()).map(|f| row[f] + lw[f] + log_g[f])))
            .collect()
    }
}

/// Discretize a (possibly killed) transition kernel on `grid`.
pub fn discretize_kernel(source: &KernelSource, grid: &SpatialGrid<f64>) -> Result<KernelMatrix> {
    match source {
        KernelSource::Analytic { model, t_i, t_f } => analytic_kernel(model, grid, *t_i, *t_f),
        KernelSource::Pde { spec, time_grid, opts } => pde_kernel(spec, grid, time_grid, *opts),
    }
}

fn analytic_kernel(model: &KernelModel, grid: &SpatialGrid<f64>, t_i: f64, t_f: f64) -> Result<KernelMatrix> {
    model.validate()?;
    if !(t_f > t_i) {
        return invalid(format!("need t_f > t_i (t_i={t_i}, t_f={t_f})"));
    }
    let elapsed = t_f - t_i;
    let xs = grid.nodes();
    let log_density: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|&x0| {
            let (mean, var, log_mass) = model.law(x0, elapsed);
            let c = log_mass - 0.5 * (std::f64::consts::TAU * var).ln();
            xs.iter().map(|&x| c - (x - mean) * (x - mean) / (2.0 * var)).collect()
        })
        .collect();
    let k = KernelMatrix { grid: *grid, t_i, t_f, log_density };
    // rows whose bulk lies inside the domain must carry their full mass
    let mut checked = 0;
    for (i, &x0) in xs.iter().enumerate() {
        let (mean, var, log_mass) = model.law(x0, elapsed);
        let sd = var.sqrt();
        if mean - 6.0 * sd < grid.lo || mean + 6.0 * sd > grid.hi {
            continue;
        }
        checked += 1;
        let deficit = (k.row_mass(i) / log_mass.exp() - 1.0).abs();
        if deficit > MASS_TOLERANCE {
            return invalid(format!(
                "unresolved kernel: mass deficit {deficit:e} from x={x0} (std {sd} vs h {})",
                grid.h()
            ));
        }
    }
    if checked == 0 {
        return invalid("kernel is wider than the domain from every source node");
    }
    Ok(k)
}

fn pde_kernel(
    spec: &ProcessSpec<f64>,
    grid: &SpatialGrid<f64>,
    time_grid: &TimeGrid<f64>,
    opts: SolverOptions,
) -> Result<KernelMatrix> {
    let w = grid.weights();
    let rows: Vec<Vec<f64>> = (0..grid.m)
        .into_par_iter()
        .map(|j| {
            let mut p0 = vec![0.0; grid.m];
            p0[j] = 1.0 / w[j];
            let sol = solve_fokker_planck(spec, &p0, grid, time_grid, opts)?;
            let last = sol.field.values.last().cloned().unwrap_or_default();
            if spec.killing.is_none() {
                let deficit = (grid.integrate(&last) - 1.0).abs();
                if deficit > MASS_TOLERANCE {
                    return invalid(format!("unresolved kernel: mass deficit {deficit:e} from node {j}"));
                }
            }
            Ok(last.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect())
        })
        .collect::<Result<_>>()?;
    Ok(KernelMatrix { grid: *grid, t_i: time_grid.t_start(), t_f: time_grid.t_end(), log_density: rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeOptions {
    /// Target L1 residual of the terminal marginal.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000 }
    }
}

/// Solution of the Schrödinger system between two grid densities.
#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub grid: SpatialGrid<f64>,
    /// `ln χ(·, t_i)`, gauge fixed so that `χ(·, t_f)` integrates to one.
    pub log_chi_i: Vec<f64>,
    pub log_chi_f: Vec<f64>,
    pub kernel_g: KernelMatrix,
    /// `[source][destination]` transition density of the optimal process.
    pub h_star: Vec<Vec<f64>>,
    pub bridge_path: Option<Field<f64>>,
    pub iterations: usize,
    /// Terminal-marginal L1 residual after each scaling of the initial factor.
    pub residual_history: Vec<f64>,
    /// `[initial, terminal]` marginal L1 residuals of the returned `h_star`.
    pub marginal_residuals: [f64; 2],
}

/// `H(x_f | x_i) = G(x_f | x_i) χ(x_f, t_f) / χ(x_i, t_i)`.
pub fn h_star_from_chi(kernel: &KernelMatrix, log_chi_i: &[f64], log_chi_f: &[f64]) -> Vec<Vec<f64>> {
    kernel
        .log_density
        .par_iter()
        .zip(log_chi_i.par_iter())
        .map(|(row, &ci)| row.iter().zip(log_chi_f).map(|(&g, &cf)| (g + cf - ci).exp()).collect())
        .collect()
}

fn check_marginal(p: &[f64], grid: &SpatialGrid<f64>, which: &str) -> Result<()> {
    if p.len() != grid.m {
        return invalid(format!("{which} marginal has the wrong length"));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return invalid(format!("{which} marginal must be finite and non-negative"));
    }
    let mass = grid.integrate(p);
    if (mass - 1.0).abs() > 1e-6 {
        return invalid(format!("{which} marginal is not normalized (mass {mass})"));
    }
    Ok(())
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Solve for `χ(·,t_i), χ(·,t_f)` such that the process with kernel `H*` carries `p_i`
/// to `p_f`, by alternating scaling of the two factors.
pub fn solve_schrodinger_system(
    p_i: &[f64],
    p_f: &[f64],
    kernel: &KernelMatrix,
    opts: BridgeOptions,
) -> Result<BridgeSolution> {
    let grid = kernel.grid;
    check_marginal(p_i, &grid, "initial")?;
    check_marginal(p_f, &grid, "terminal")?;
    let m = grid.m;
    let w = grid.weights();
    let lw: Vec<f64> = w.iter().map(|v| v.ln()).collect();
    let log_a: Vec<f64> = (0..m).map(|i| ln_or_neg_inf(p_i[i] * w[i])).collect();
    let log_pf: Vec<f64> = p_f.iter().map(|&v| ln_or_neg_inf(v)).collect();
    let mut log_psi: Vec<f64> = log_pf.iter().map(|&l| if l.is_finite() { 0.0 } else { l }).collect();
    let mut history = Vec::new();
    let mut log_chi_i;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        log_chi_i = kernel.log_pull_back(&log_psi);
        let log_phi: Vec<f64> = (0..m).map(|i| log_a[i] - log_chi_i[i]).collect();
        let col: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|f| log_sum_exp((0..m).map(|i| kernel.log_density[i][f] + log_phi[i])))
            .collect();
        let residual: f64 = (0..m).map(|f| (w[f] * (log_psi[f] + col[f]).exp() - w[f] * p_f[f]).abs()).sum();
        history.push(residual);
        if !residual.is_finite() {
            return Err(Error::Support("terminal marginal not covered by the kernel support".into()));
        }
        if residual < opts.tol {
            converged = true;
            break;
        }
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;
        for f in 0..m {
            if log_pf[f].is_finite() {
                if col[f] == f64::NEG_INFINITY {
                    return Err(Error::Support(format!("terminal mass at x={} is unreachable", grid.x(f))));
                }
                log_psi[f] = log_pf[f] - col[f];
            }
        }
    }
    if !converged {
        let residual = history.last().copied().unwrap_or(f64::NAN);
        return Err(Error::NotConverged { iterations, residual, history });
    }
    // gauge: ∫ χ(·, t_f) = 1
    let shift = log_sum_exp((0..m).map(|f| log_psi[f] + lw[f]));
    let log_chi_f: Vec<f64> = log_psi.iter().map(|&l| l - shift).collect();
    let log_chi_i: Vec<f64> = log_chi_i.iter().map(|&l| l - shift).collect();
    let h_star = h_star_from_chi(kernel, &log_chi_i, &log_chi_f);
    let mut sol = BridgeSolution {
        grid,
        log_chi_i,
        log_chi_f,
        kernel_g: kernel.clone(),
        h_star,
        bridge_path: None,
        iterations,
        residual_history: history,
        marginal_residuals: [0.0; 2],
    };
    let initial: f64 = (0..m).map(|i| w[i] * p_i[i] * (sol.row_mass(i) - 1.0).abs()).sum();
    let reproduced = sol.propagate(p_i);
    let terminal: f64 = (0..m).map(|f| w[f] * (reproduced[f] - p_f[f]).abs()).sum();
    sol.marginal_residuals = [initial, terminal];
    Ok(sol)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        if x.is_finite() && y.is_finite() {
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    ab / (aa.sqrt() * bb.sqrt())
}

impl BridgeSolution {
    pub fn chi_i(&self) -> Vec<f64> {
        self.log_chi_i.iter().map(|l| l.exp()).collect()
    }

    pub fn chi_f(&self) -> Vec<f64> {
        self.log_chi_f.iter().map(|l| l.exp()).collect()
    }

    /// `Σ_f w_f H*(x_f | x_i)`.
    pub fn row_mass(&self, i: usize) -> f64 {
        self.grid.integrate(&self.h_star[i])
    }

    pub fn hstar_row_norm_max_err(&self) -> f64 {
        (0..self.grid.m).map(|i| (self.row_mass(i) - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Density after one application of `H*`.
    pub fn propagate(&self, p: &[f64]) -> Vec<f64> {
        let w = self.grid.weights();
        let m = self.grid.m;
        (0..m)
            .into_par_iter()
            .map(|f| (0..m).map(|i| w[i] * p[i] * self.h_star[i][f]).sum())
            .collect()
    }

    /// Largest `|ln χ_i - ln(G χ_f)|`.
    pub fn chi_consistency_residual(&self) -> f64 {
        let pulled = self.kernel_g.log_pull_back(&self.log_chi_f);
        pulled
            .iter()
            .zip(&self.log_chi_i)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Cosine similarity of `(ln χ_i, ln χ_f)` against the given log densities, over the
    /// nodes where both are finite.
    pub fn chi_endpoint_cosine(&self, log_p_i: &[f64], log_p_f: &[f64]) -> [f64; 2] {
        [cosine(&self.log_chi_i, log_p_i), cosine(&self.log_chi_f, log_p_f)]
    }

    /// Evolve `p_i` under the reference drift plus the control `D ∂ₓ ln χ`, with `χ`
    /// propagated backward from `χ(·, t_f)` under the reference process `spec_g`.
    pub fn attach_bridge_path(
        &mut self,
        spec_g: &ProcessSpec<f64>,
        p_i: &[f64],
        time_grid: &TimeGrid<f64>,
        opts: SolverOptions,
    ) -> Result<&Field<f64>> {
        let grid = self.grid;
        let chi = solve_backward_kolmogorov(spec_g, &self.chi_f(), &grid, time_grid, opts)?;
        let h = grid.h();
        let floor = f64::MIN_POSITIVE;
        let control: Arc<Vec<Vec<f64>>> = Arc::new(
            (0..chi.values.len())
                .map(|s| {
                    let d = spec_g.diffusion_at(time_grid.t(s));
                    let log_chi: Vec<f64> = chi.values[s].iter().map(|&c| c.max(floor).ln()).collect();
                    derivative_5pt(&log_chi, h).into_iter().map(|g| d * g).collect()
                })
                .collect(),
        );
        let reference = spec_g.clone();
        let tg = time_grid.clone();
        let drift = Arc::new(move |x: &[f64], t: f64, o: &mut [f64]| {
            let s = tg.node_index(t).unwrap_or_else(|| nearest_node(&tg, t));
            o[0] = reference.drift_1d(x[0], t) + interpolate(&grid, &control[s], x[0]);
        });
        let controlled = ProcessSpec::new(1, drift, spec_g.diffusion.clone());
        let sol = solve_fokker_planck(&controlled, p_i, &grid, time_grid, opts)?;
        self.bridge_path = Some(sol.field);
        Ok(self.bridge_path.as_ref().expect("just set"))
    }
}

fn nearest_node(grid: &TimeGrid<f64>, t: f64) -> usize {
    let nodes = grid.nodes();
    let k = nodes.partition_point(|&v| v < t).min(nodes.len() - 1);
    if k > 0 && (t - nodes[k - 1]) < (nodes[k] - t) {
        k - 1
    } else {
        k
    }
}

/// Piecewise-linear interpolation of node values, constant beyond the ends.
fn interpolate(grid: &SpatialGrid<f64>, v: &[f64], x: f64) -> f64 {
    let u = ((x - grid.lo) / grid.h()).clamp(0.0, (grid.m - 1) as f64);
    let k = (u.floor() as usize).min(grid.m - 2);
    let r = u - k as f64;
    v[k] * (1.0 - r) + v[k + 1] * r
}

/// `ln P(x, t | y, s)` as a function of `(x, y)` for fixed times.
pub type LogDensity<'a> = Box<dyn Fn(f64, f64) -> f64 + Send + Sync + 'a>;

/// Transition densities of a forward process.
pub trait ForwardKernel: Sync {
    /// Log density between `s` and `t > s`.
    fn between(&self, t: f64, s: f64) -> Result<LogDensity<'_>>;
}

/// The OU process driven by a noise schedule.
#[derive(Debug, Clone, Copy)]
pub struct OuForward<'a>(pub &'a NoiseSchedule<f64>);

impl ForwardKernel for OuForward<'_> {
    fn between(&self, t: f64, s: f64) -> Result<LogDensity<'_>> {
        let (scale, var) = ou_affine(s, t, self.0)?;
        let c = -0.5 * (std::f64::consts::TAU * var).ln();
        Ok(Box::new(move |x, y| {
            let d = x - scale * y;
            c - d * d / (2.0 * var)
        }))
    }
}

/// Posterior density of the intermediate state given both ends.
#[derive(Debug, Clone)]
pub struct PosteriorQ {
    pub xi_grid: SpatialGrid<f64>,
    pub density: Vec<f64>,
    /// Quadrature mass of `density`; one when the grid resolves the posterior.
    pub mass: f64,
}

/// `Q(ξ, τ | x, t; x0, t0) = P(x,t|ξ,τ) P(ξ,τ|x0,t0) / P(x,t|x0,t0)` on `xi_grid`.
#[allow(clippy::too_many_arguments)]
pub fn dpm_posterior_q(
    kernel: &dyn ForwardKernel,
    x0: f64,
    t0: f64,
    tau: f64,
    x: f64,
    t: f64,
    xi_grid: &SpatialGrid<f64>,
) -> Result<PosteriorQ> {
    if !(t0 < tau && tau < t) {
        return invalid(format!("need t0 < tau < t (t0={t0}, tau={tau}, t={t})"));
    }
    let (k_t_tau, k_tau_0, k_t_0) = (kernel.between(t, tau)?, kernel.between(tau, t0)?, kernel.between(t, t0)?);
    let den = k_t_0(x, x0);
    if !den.is_finite() || den < f64::MIN_POSITIVE.ln() {
        return Err(Error::Support(format!("P(x={x},t|x0={x0}) underflows")));
    }
    let density: Vec<f64> = xi_grid
        .nodes()
        .iter()
        .map(|&xi| (k_t_tau(x, xi) + k_tau_0(xi, x0) - den).exp())
        .collect();
    if density.iter().any(|v| !v.is_finite()) {
        return Err(Error::Support("non-finite posterior value".into()));
    }
    let mass = xi_grid.integrate(&density);
    Ok(PosteriorQ { xi_grid: *xi_grid, density, mass })
}

/// Data density on its own grid.
#[derive(Debug, Clone, Copy)]
pub struct GridDensity<'a> {
    pub grid: &'a SpatialGrid<f64>,
    pub values: &'a [f64],
}

impl GridDensity<'_> {
    fn log_weighted(&self) -> Vec<(f64, f64)> {
        let w = self.grid.weights();
        (0..self.grid.m)
            .filter(|&k| self.values[k] > 0.0)
            .map(|k| (self.grid.x(k), (w[k] * self.values[k]).ln()))
            .collect()
    }
}

/// Reverse transition kernel `R(ξ, τ | x, t)`, stored `[x][ξ]`.
#[derive(Debug, Clone)]
pub struct ReverseKernel {
    pub x_grid: SpatialGrid<f64>,
    pub xi_grid: SpatialGrid<f64>,
    pub tau: f64,
    pub t: f64,
    pub values: Vec<Vec<f64>>,
}

impl ReverseKernel {
    /// `P(ξ, τ) = Σ_x w_x R(ξ | x) P(x, t)`.
    pub fn propagate(&self, p_t: &[f64]) -> Vec<f64> {
        let w = self.x_grid.weights();
        (0..self.xi_grid.m)
            .into_par_iter()
            .map(|k| (0..self.x_grid.m).map(|j| w[j] * p_t[j] * self.values[j][k]).sum())
            .collect()
    }
}

fn check_times(t0: f64, tau: f64, t: f64) -> Result<()> {
    if !(t0 < tau && tau < t) {
        return invalid(format!("need t0 < tau < t (t0={t0}, tau={tau}, t={t})"));
    }
    Ok(())
}

fn normalize_rows(values: &mut [Vec<f64>], xi_grid: &SpatialGrid<f64>) {
    for row in values.iter_mut() {
        let mass = xi_grid.integrate(row);
        if mass > 0.0 {
            row.iter_mut().for_each(|v| *v /= mass);
        }
    }
}

/// `R(ξ,τ|x,t) = ∫dx0 Q(ξ,τ|x,t;x0,t0) P(x,t|x0,t0) p_d(x0) / P(x,t)`, evaluated by
/// quadrature over the data grid for every pair `(x, ξ)`; rows normalized.
pub fn dpm_reverse_kernel_r(
    kernel: &dyn ForwardKernel,
    data: GridDensity,
    t0: f64,
    tau: f64,
    t: f64,
    xi_grid: &SpatialGrid<f64>,
    x_grid: &SpatialGrid<f64>,
) -> Result<ReverseKernel> {
    check_times(t0, tau, t)?;
    let (k_t_tau, k_tau_0, k_t_0) = (kernel.between(t, tau)?, kernel.between(tau, t0)?, kernel.between(t, t0)?);
    let src = data.log_weighted();
    let xis = xi_grid.nodes();
    let mut values: Vec<Vec<f64>> = x_grid
        .nodes()
        .par_iter()
        .map(|&x| {
            let log_joint: Vec<f64> = src.iter().map(|&(x0, lw)| lw + k_t_0(x, x0)).collect();
            let log_px = log_sum_exp(log_joint.iter().copied());
            if !log_px.is_finite() {
                return Err(Error::Support(format!("P(x={x}, t) underflows")));
            }
            Ok(xis
                .iter()
                .map(|&xi| {
                    let fwd = k_t_tau(x, xi);
                    log_sum_exp(src.iter().zip(&log_joint).map(|(&(x0, _), &lj)| {
                        let log_q = fwd + k_tau_0(xi, x0) - k_t_0(x, x0);
                        log_q + lj - log_px
                    }))
                    .exp()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    normalize_rows(&mut values, xi_grid);
    Ok(ReverseKernel { x_grid: *x_grid, xi_grid: *xi_grid, tau, t, values })
}

/// The same kernel with the data integral carried out once per marginal:
/// `R(ξ|x) = P(x,t|ξ,τ) P(ξ,τ) / P(x,t)`, both marginals by quadrature over the data grid.
pub fn dpm_reverse_kernel_marginalized(
    kernel: &dyn ForwardKernel,
    data: GridDensity,
    t0: f64,
    tau: f64,
    t: f64,
    xi_grid: &SpatialGrid<f64>,
    x_grid: &SpatialGrid<f64>,
) -> Result<ReverseKernel> {
    check_times(t0, tau, t)?;
    let log_p_tau = log_marginal(kernel, data, t0, tau, xi_grid)?;
    let log_p_t = log_marginal(kernel, data, t0, t, x_grid)?;
    let k_t_tau = kernel.between(t, tau)?;
    let xis = xi_grid.nodes();
    let mut values: Vec<Vec<f64>> = x_grid
        .nodes()
        .par_iter()
        .zip(log_p_t.par_iter())
        .map(|(&x, &lpx)| {
            if !lpx.is_finite() {
                return Err(Error::Support(format!("P(x={x}, t) underflows")));
            }
            Ok(xis.iter().zip(&log_p_tau).map(|(&xi, &lpt)| (k_t_tau(x, xi) + lpt - lpx).exp()).collect())
        })
        .collect::<Result<_>>()?;
    normalize_rows(&mut values, xi_grid);
    Ok(ReverseKernel { x_grid: *x_grid, xi_grid: *xi_grid, tau, t, values })
}

/// `ln P(y, s) = ln ∫dx0 P(y,s|x0,t0) p_d(x0)` on `grid`.
pub fn log_marginal(kernel: &dyn ForwardKernel, data: GridDensity, t0: f64, s: f64, grid: &SpatialGrid<f64>) -> Result<Vec<f64>> {
    let k = kernel.between(s, t0)?;
    let src = data.log_weighted();
    Ok(grid.nodes().par_iter().map(|&y| log_sum_exp(src.iter().map(|&(x0, lw)| lw + k(y, x0)))).collect())
}

/// Outcome of composing reverse kernels down a time grid.
#[derive(Debug, Clone, Serialize)]
pub struct DpmChainReport {
    pub steps: usize,
    /// Density after the last composed step, at `t_1`.
    pub density: Vec<f64>,
    /// L1 distance to the data density.
    pub l1_to_data: f64,
    /// L1 distance to the marginal at `t_1`.
    pub l1_to_marginal: f64,
}

/// Start from the marginal at the last node of `times` and apply `R` step by step down to
/// `t_1`. The step into `t_0` is left out: there the posterior collapses onto the data
/// point and the kernel is no longer representable on the grid.
pub fn dpm_chain(
    kernel: &dyn ForwardKernel,
    data: GridDensity,
    times: &TimeGrid<f64>,
) -> Result<DpmChainReport> {
    let grid = *data.grid;
    let n = times.n_steps();
    if n < 2 {
        return invalid("chain needs at least two steps");
    }
    let t0 = times.t_start();
    let mut p: Vec<f64> = log_marginal(kernel, data, t0, times.t(n), &grid)?.iter().map(|l| l.exp()).collect();
    for s in (2..=n).rev() {
        let r = dpm_reverse_kernel_marginalized(kernel, data, t0, times.t(s - 1), times.t(s), &grid, &grid)?;
        p = r.propagate(&p);
    }
    let w = grid.weights();
    let l1 = |q: &[f64]| -> f64 { (0..grid.m).map(|k| w[k] * (p[k] - q[k]).abs()).sum() };
    let marginal: Vec<f64> = log_marginal(kernel, data, t0, times.t(1), &grid)?.iter().map(|l| l.exp()).collect();
    Ok(DpmChainReport { steps: n - 1, l1_to_data: l1(data.values), l1_to_marginal: l1(&marginal), density: p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_grid::Scheme;

    fn gauss(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (std::f64::consts::TAU * v).sqrt()
    }

    fn grid(m: usize) -> SpatialGrid<f64> {
        SpatialGrid::new(-6.0, 6.0, m).unwrap()
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        let v = [f64::NEG_INFINITY, 0.0, 0.0];
        assert!((log_sum_exp(v.iter().copied()) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY].iter().copied()), f64::NEG_INFINITY);
        let big = [1000.0, 1000.0];
        assert!((log_sum_exp(big.iter().copied()) - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_kernel_rows_carry_unit_mass() {
        let g = grid(241);
        let k = discretize_kernel(
            &KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 0.5 },
            &g,
        )
        .unwrap();
        assert!((k.row_mass(120) - 1.0).abs() < 1e-10);
        assert!((k.density(120, 120) - gauss(0.0, 0.0, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn unresolved_kernel_is_rejected() {
        let g = grid(61);
        let src = KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 1e-3 };
        let err = discretize_kernel(&src, &g).unwrap_err();
        assert!(err.to_string().contains("unresolved"), "{err}");
    }

    #[test]
    fn killed_linear_kernel_mass() {
        let g = SpatialGrid::new(-10.0, 10.0, 801).unwrap();
        let model = KernelModel::LinearDrift { rate: 0.5, diffusion: 1.0, killing: -0.5 };
        let k = discretize_kernel(&KernelSource::Analytic { model, t_i: 0.0, t_f: 1.0 }, &g).unwrap();
        assert!((k.row_mass(400) - 0.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn pushforward_target_needs_no_control() {
        let g = grid(241);
        let k = discretize_kernel(
            &KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 0.3 },
            &g,
        )
        .unwrap();
        let p_i: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, 0.5, 0.4)).collect();
        let p_f = k.push_forward(&p_i);
        let sol = solve_schrodinger_system(&p_i, &p_f, &k, BridgeOptions::default()).unwrap();
        let chi_f = sol.chi_f();
        for f in 40..200 {
            assert!((chi_f[f] / chi_f[120] - 1.0).abs() < 1e-6, "f={f}");
        }
        for i in 60..180 {
            for f in (60..180).step_by(7) {
                assert!((sol.h_star[i][f] - k.density(i, f)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn h_star_is_gauge_invariant() {
        let g = grid(121);
        let k = discretize_kernel(
            &KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 1.0 },
            &g,
        )
        .unwrap();
        let p_i: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, -1.0, 0.3)).collect();
        let p_f: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, 1.0, 0.6)).collect();
        let sol = solve_schrodinger_system(&p_i, &p_f, &k, BridgeOptions::default()).unwrap();
        let c = 1e3f64.ln();
        let li: Vec<f64> = sol.log_chi_i.iter().map(|l| l + c).collect();
        let lf: Vec<f64> = sol.log_chi_f.iter().map(|l| l + c).collect();
        let h2 = h_star_from_chi(&k, &li, &lf);
        for i in 0..g.m {
            for f in 0..g.m {
                let a = sol.h_star[i][f];
                assert!((h2[i][f] - a).abs() <= 1e-12 * a.max(1e-300), "{i} {f}");
            }
        }
        assert!(sol.hstar_row_norm_max_err() < 1e-8);
        assert!(sol.marginal_residuals[1] < 1e-9);
        assert!(sol.chi_consistency_residual() < 1e-10);
        let hist = &sol.residual_history;
        assert!(hist.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "{hist:?}");
    }

    #[test]
    fn non_convergence_carries_history() {
        let g = grid(121);
        let k = discretize_kernel(
            &KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 1.0 },
            &g,
        )
        .unwrap();
        let p_i: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, -1.0, 0.3)).collect();
        let p_f: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, 1.0, 0.6)).collect();
        match solve_schrodinger_system(&p_i, &p_f, &k, BridgeOptions { tol: 1e-14, max_iter: 2 }) {
            Err(Error::NotConverged { history, .. }) => assert_eq!(history.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unnormalized_marginal_is_rejected() {
        let g = grid(61);
        let k = discretize_kernel(
            &KernelSource::Analytic { model: KernelModel::PureDiffusion { diffusion: 1.0 }, t_i: 0.0, t_f: 1.0 },
            &g,
        )
        .unwrap();
        let p: Vec<f64> = g.nodes().iter().map(|&x| 2.0 * gauss(x, 0.0, 1.0)).collect();
        assert!(solve_schrodinger_system(&p, &p, &k, BridgeOptions::default()).is_err());
    }

    #[test]
    fn pde_kernel_concentrates_for_short_times() {
        let g = grid(121);
        let spec = ProcessSpec::pure_diffusion(1, 1.0);
        let tg = TimeGrid::uniform(0.0, 1e-7, 4).unwrap();
        let opts = SolverOptions { scheme: Scheme::CrankNicolson, startup_steps: 4, ..Default::default() };
        let k = discretize_kernel(&KernelSource::Pde { spec: &spec, time_grid: &tg, opts }, &g).unwrap();
        for i in [0, 30, 60, 120] {
            assert!((k.density(i, i) * g.weights()[i] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn posterior_endpoints() {
        let sched = NoiseSchedule::constant(1.0, 1.0, TimeGrid::uniform(0.0, 1.0, 10).unwrap()).unwrap();
        let lk = OuForward(&sched);
        let g = SpatialGrid::new(-4.0, 4.0, 4001).unwrap();
        let q = dpm_posterior_q(&lk, 1.0, 0.0, 0.999, -0.5, 1.0, &g).unwrap();
        let mean = g.integrate(&g.nodes().iter().zip(&q.density).map(|(x, p)| x * p).collect::<Vec<_>>());
        assert!((q.mass - 1.0).abs() < 1e-8);
        assert!((mean + 0.5).abs() < 0.01, "{mean}");
        let q = dpm_posterior_q(&lk, 1.0, 0.0, 0.001, -0.5, 1.0, &g).unwrap();
        let mean = g.integrate(&g.nodes().iter().zip(&q.density).map(|(x, p)| x * p).collect::<Vec<_>>());
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(dpm_posterior_q(&lk, 1.0, 0.0, 1.0, -0.5, 1.0, &g).is_err());
        assert!(dpm_posterior_q(&lk, 0.0, 0.0, 1e-5, 1e5, 2e-5, &g).is_err());
    }

    #[test]
    fn point_mass_data_reduces_r_to_q() {
        let sched = NoiseSchedule::constant(1.0, 1.0, TimeGrid::uniform(0.0, 1.0, 10).unwrap()).unwrap();
        let lk = OuForward(&sched);
        let g = SpatialGrid::new(-4.0, 4.0, 161).unwrap();
        let mut data = vec![0.0; g.m];
        data[100] = 1.0 / g.h();
        let x0 = g.x(100);
        let r = dpm_reverse_kernel_r(&lk, GridDensity { grid: &g, values: &data }, 0.0, 0.4, 0.6, &g, &g).unwrap();
        for j in [40, 80, 120] {
            let q = dpm_posterior_q(&lk, x0, 0.0, 0.4, g.x(j), 0.6, &g).unwrap();
            for k in 0..g.m {
                assert!((r.values[j][k] - q.density[k] / q.mass).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn literal_and_marginalized_kernels_agree() {
        let sched = NoiseSchedule::constant(1.0, 1.0, TimeGrid::uniform(0.0, 1.0, 10).unwrap()).unwrap();
        let lk = OuForward(&sched);
        let g = SpatialGrid::new(-5.0, 5.0, 101).unwrap();
        let data: Vec<f64> = g.nodes().iter().map(|&x| 0.5 * gauss(x, -1.0, 0.2) + 0.5 * gauss(x, 1.2, 0.3)).collect();
        let d = GridDensity { grid: &g, values: &data };
        let a = dpm_reverse_kernel_r(&lk, d, 0.0, 0.3, 0.5, &g, &g).unwrap();
        let b = dpm_reverse_kernel_marginalized(&lk, d, 0.0, 0.3, 0.5, &g, &g).unwrap();
        for j in 0..g.m {
            for k in 0..g.m {
                assert!((a.values[j][k] - b.values[j][k]).abs() < 1e-10 * (1.0 + b.values[j][k]));
            }
        }
    }
}
