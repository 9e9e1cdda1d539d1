//! The control action on a space–time grid: its value in integrated and boundary form,
//! the discrete stationarity residuals (Fokker–Planck, dynamic programming, control),
//! and the excess action `ΔA` of a candidate score.
//!
//! With `P^s`, `λ^s` on time nodes `s = 0..=n`, running cost `c = u²/2D + V_G` and the
//! Crank–Nicolson step residual `R^s` of the controlled Fokker–Planck equation, the
//! discrete action is
//!
//! `A = Σ_s Δt_s ⟨P^s, c^s⟩ - Σ_s Δt_s ⟨λ^{s+1}, R^s⟩`,
//!
//! using the operators of [`crate::pde_grid`]. Summation by parts moves the differences
//! onto `λ` and leaves the boundary pairing `⟨P_i, λ_i⟩ - ⟨P_f, λ_f⟩`.

use crate::divergence::DensityPath;
use crate::error::{invalid, Result};
use crate::exact_mixture::{derivative_5pt, MixturePath};
use crate::pde_grid::{backward_generator, fp_step_residual, Field, FieldMeta, Flux, SpatialGrid};
use crate::schedule::TimeGrid;
use crate::sde_sim::{PathRng, ProcessSpec, StateSampler};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub type ScalarField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Split of a drift into an uncontrolled part `b` and a control `u`, with the diffusion
/// coefficient and the reference killing rate `V_G`.
#[derive(Clone)]
pub struct ControlAssignment {
    pub b: ScalarField,
    pub u: ScalarField,
    pub diffusion: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub killing: Option<ScalarField>,
}

impl ControlAssignment {
    pub fn new(b: ScalarField, u: ScalarField, diffusion: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        Self { b, u, diffusion, killing: None }
    }

    pub fn with_killing(mut self, v: ScalarField) -> Self {
        self.killing = Some(v);
        self
    }

    pub fn with_control(&self, u: ScalarField) -> Self {
        Self { u, ..self.clone() }
    }

    /// Drift `b + u`, no killing.
    pub fn controlled_spec(&self) -> ProcessSpec<f64> {
        let (b, u) = (self.b.clone(), self.u.clone());
        let d = self.diffusion.clone();
        ProcessSpec::new(1, Arc::new(move |x: &[f64], t, o: &mut [f64]| o[0] = b(x[0], t) + u(x[0], t)), Arc::new(move |t| d(t)))
    }

    /// Drift `b` with killing `V_G`.
    pub fn reference_spec(&self) -> ProcessSpec<f64> {
        let b = self.b.clone();
        let d = self.diffusion.clone();
        let spec = ProcessSpec::new(1, Arc::new(move |x: &[f64], t, o: &mut [f64]| o[0] = b(x[0], t)), Arc::new(move |t| d(t)));
        match &self.killing {
            Some(v) => {
                let v = v.clone();
                spec.with_killing(Arc::new(move |x: &[f64], t| v(x[0], t)))
            }
            None => spec,
        }
    }

    /// `u² / 2D + V_G`.
    pub fn running_cost(&self, x: f64, t: f64) -> f64 {
        let u = (self.u)(x, t);
        let v = self.killing.as_ref().map_or(0.0, |k| k(x, t));
        u * u / (2.0 * (self.diffusion)(t)) + v
    }
}

/// Which boundary pairing accompanies the adjoint form of the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySign {
    /// `-⟨P_i, λ_i⟩ + ⟨P_f, λ_f⟩`.
    Printed,
    /// `+⟨P_i, λ_i⟩ - ⟨P_f, λ_f⟩`, which makes the two forms agree.
    IntegratedByParts,
}

fn check_fields(lambda: &Field<f64>, density: &Field<f64>) -> Result<(SpatialGrid<f64>, TimeGrid<f64>)> {
    if lambda.grid != density.grid {
        return invalid("lambda and density live on different spatial grids");
    }
    let (tl, tp) = (lambda.label_grid(), density.label_grid());
    if tl.nodes().len() != tp.nodes().len() || tl.nodes().iter().zip(tp.nodes()).any(|(a, b)| (a - b).abs() > 1e-12) {
        return invalid("lambda and density live on different time grids");
    }
    Ok((lambda.grid, tp))
}

fn cost_row(control: &ControlAssignment, xs: &[f64], t: f64) -> Vec<f64> {
    xs.iter().map(|&x| control.running_cost(x, t)).collect()
}

/// Integrated form: running cost minus the multiplier times the Fokker–Planck residual.
pub fn action_value(lambda: &Field<f64>, density: &Field<f64>, control: &ControlAssignment, flux: Flux) -> Result<f64> {
    let (grid, tg) = check_fields(lambda, density)?;
    let spec = control.controlled_spec();
    let xs = grid.nodes();
    let terms: Vec<f64> = (0..tg.n_steps())
        .into_par_iter()
        .map(|s| {
            let dt = tg.dt(s);
            let c = cost_row(control, &xs, tg.t(s));
            let r = fp_step_residual(&spec, &grid, &tg, &density.values, s, flux);
            dt * (grid.pairing(&density.values[s], &c) - grid.pairing(&lambda.values[s + 1], &r))
        })
        .collect();
    Ok(terms.iter().sum())
}

/// Boundary form: the same sum with differences moved onto `λ`, plus the boundary pairing
/// selected by `sign`.
pub fn adjoint_action(
    lambda: &Field<f64>,
    density: &Field<f64>,
    control: &ControlAssignment,
    sign: BoundarySign,
    flux: Flux,
) -> Result<f64> {
    let (grid, tg) = check_fields(lambda, density)?;
    let spec = control.controlled_spec();
    let xs = grid.nodes();
    let n = tg.n_steps();
    let (p, l) = (&density.values, &lambda.values);
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|s| {
            let dt = tg.dt(s);
            let c = cost_row(control, &xs, tg.t(s));
            let dl: Vec<f64> = l[s + 1].iter().zip(&l[s]).map(|(a, b)| a - b).collect();
            let l_now = backward_generator(&spec, &grid, tg.t(s), flux).apply(&l[s + 1]);
            let l_next = backward_generator(&spec, &grid, tg.t(s + 1), flux).apply(&l[s + 1]);
            dt * grid.pairing(&p[s], &c)
                + grid.pairing(&p[s], &dl)
                + 0.5 * dt * (grid.pairing(&p[s], &l_now) + grid.pairing(&p[s + 1], &l_next))
        })
        .collect();
    let boundary = grid.pairing(&p[0], &l[0]) - grid.pairing(&p[n], &l[n]);
    let boundary = match sign {
        BoundarySign::IntegratedByParts => boundary,
        BoundarySign::Printed => -boundary,
    };
    Ok(boundary + terms.iter().sum::<f64>())
}

/// Gap between the printed-sign boundary form and the integrated form:
/// `2(⟨P_f, λ_f⟩ - ⟨P_i, λ_i⟩)`.
pub fn boundary_sign_discrepancy(lambda: &Field<f64>, density: &Field<f64>) -> Result<f64> {
    let (grid, tg) = check_fields(lambda, density)?;
    let n = tg.n_steps();
    Ok(2.0 * (grid.pairing(&density.values[n], &lambda.values[n]) - grid.pairing(&density.values[0], &lambda.values[0])))
}

/// Max-norm residuals of the three stationarity conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityResiduals {
    pub fp: f64,
    pub hjb: f64,
    pub control: f64,
    /// `max |λ + ln χ|` when a `χ` field was supplied.
    pub log_transform: Option<f64>,
    pub grid_meta: FieldMeta,
}

/// Residuals of the discrete stationarity conditions:
///
/// * Fokker–Planck: `R^s` for `s = 0..n-1`;
/// * dynamic programming, from `∂A/∂P^j = 0` at interior nodes (the end nodes carry
///   the reflecting boundary, which the continuum `λ` does not satisfy):
///   `(λ^{j+1} - λ^j)/Δt_j + [Δt_{j-1} L_j λ^j + Δt_j L_j λ^{j+1}] / 2Δt_j + c^j`;
/// * control: `u/D + ∂ₓλ` with centred differences (one-sided at the ends).
pub fn stationarity_residuals(
    lambda: &Field<f64>,
    density: &Field<f64>,
    control: &ControlAssignment,
    chi: Option<&Field<f64>>,
    flux: Flux,
) -> Result<StationarityResiduals> {
    let (grid, tg) = check_fields(lambda, density)?;
    let spec = control.controlled_spec();
    let xs = grid.nodes();
    let n = tg.n_steps();
    let h = grid.h();
    let l = &lambda.values;
    let per_node: Vec<(f64, f64, f64)> = (0..=n)
        .into_par_iter()
        .map(|s| {
            let t = tg.t(s);
            let fp = if s < n {
                max_abs(&fp_step_residual(&spec, &grid, &tg, &density.values, s, flux))
            } else {
                0.0
            };
            let hjb = if s > 0 && s < n {
                let (dp, dn) = (tg.dt(s - 1), tg.dt(s));
                let op = backward_generator(&spec, &grid, t, flux);
                let a = op.apply(&l[s]);
                let b = op.apply(&l[s + 1]);
                let c = cost_row(control, &xs, t);
                let r: Vec<f64> = (1..grid.m - 1)
                    .map(|i| (l[s + 1][i] - l[s][i]) / dn + (dp * a[i] + dn * b[i]) / (2.0 * dn) + c[i])
                    .collect();
                max_abs(&r)
            } else {
                0.0
            };
            let d = (control.diffusion)(t);
            let dl = centred_derivative(&l[s], h);
            let ctl = xs.iter().zip(&dl).map(|(&x, g)| ((control.u)(x, t) / d + g).abs()).fold(0.0, f64::max);
            (fp, hjb, ctl)
        })
        .collect();
    let log_transform = match chi {
        None => None,
        Some(c) => {
            let _ = check_fields(c, density)?;
            let mut worst = 0.0f64;
            for (lr, cr) in l.iter().zip(&c.values) {
                for (&lv, &cv) in lr.iter().zip(cr) {
                    worst = worst.max((lv + cv.ln()).abs());
                }
            }
            Some(worst)
        }
    };
    let fold = |f: fn(&(f64, f64, f64)) -> f64| per_node.iter().map(f).fold(0.0, f64::max);
    Ok(StationarityResiduals {
        fp: fold(|r| r.0),
        hjb: fold(|r| r.1),
        control: fold(|r| r.2),
        log_transform,
        grid_meta: density.meta(),
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn centred_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let m = f.len();
    let mut out = vec![0.0; m];
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
    out[m - 1] = (3.0 * f[m - 1] - 4.0 * f[m - 2] + f[m - 3]) / (2.0 * h);
    for i in 1..m - 1 {
        out[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
    }
    out
}

/// `½ Σ_s D(t_s) Δt_s ∫ P(x,t_s) |S(x,t_s) - ∂ₓ ln P(x,t_s)|² dx` by quadrature over the
/// left nodes of `grid`. For a grid density the score is taken from a fourth-order
/// derivative of `P`.
pub fn delta_action(
    score: &(dyn Fn(f64, f64) -> f64 + Sync),
    density: DensityPath<'_, f64>,
    diffusion: &(dyn Fn(f64) -> f64 + Sync),
    grid: &TimeGrid<f64>,
) -> Result<f64> {
    let space = match &density {
        DensityPath::Field(f) => f.grid,
        DensityPath::Mixture(_, g) => **g,
    };
    let xs = space.nodes();
    let mut rows = Vec::with_capacity(grid.n_steps());
    for s in 0..grid.n_steps() {
        let t = grid.t(s);
        let row: (Vec<f64>, Vec<f64>) = match &density {
            DensityPath::Field(f) => {
                let Some(k) = f.label_grid().node_index(t) else {
                    return invalid(format!("density has no node at t={t}"));
                };
                let p = f.values[k].clone();
                let dp = derivative_5pt(&p, space.h());
                let sc = p.iter().zip(&dp).map(|(&pi, &di)| if pi > 0.0 { di / pi } else { 0.0 }).collect();
                (p, sc)
            }
            DensityPath::Mixture(path, _) => {
                let Some(k) = path.grid.node_index(t) else {
                    return invalid(format!("mixture path has no node at t={t}"));
                };
                let snap = path.snapshot(k);
                (xs.iter().map(|&x| snap.pdf(&[x])).collect(), xs.iter().map(|&x| snap.score(&[x])[0]).collect())
            }
        };
        rows.push(row);
    }
    let total: f64 = rows
        .par_iter()
        .enumerate()
        .map(|(s, (p, sc))| {
            let t = grid.t(s);
            let integrand: Vec<f64> = xs
                .iter()
                .zip(p.iter().zip(sc))
                .map(|(&x, (&pi, &si))| {
                    let e = score(x, t) - si;
                    pi * e * e
                })
                .collect();
            0.5 * diffusion(t) * grid.dt(s) * space.integrate(&integrand)
        })
        .sum();
    Ok(total)
}

/// Monte Carlo `ΔA` for mixtures of any dimension: `n_samples` draws from `P(·, t_s)` on
/// each left node. Returns `(estimate, standard error)`.
pub fn delta_action_monte_carlo(
    score: &(dyn Fn(&[f64], f64) -> Vec<f64> + Sync),
    path: &MixturePath<f64>,
    diffusion: &(dyn Fn(f64) -> f64 + Sync),
    grid: &TimeGrid<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 2 {
        return invalid("need at least two samples per node");
    }
    let d = path.snapshot(0).dim();
    let parts: Vec<(f64, f64)> = (0..grid.n_steps())
        .into_par_iter()
        .map(|s| {
            let t = grid.t(s);
            let Some(k) = path.grid.node_index(t) else {
                return invalid(format!("mixture path has no node at t={t}"));
            };
            let snap = path.snapshot(k);
            let mut rng = PathRng::auxiliary(seed, s as u64);
            let mut x = vec![0.0; d];
            let vals: Vec<f64> = (0..n_samples)
                .map(|_| {
                    snap.draw(&mut rng, &mut x);
                    let exact = snap.score(&x);
                    score(&x, t).iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum()
                })
                .collect();
            let (m, se) = crate::stats::mean_and_se(&vals);
            let w = 0.5 * diffusion(t) * grid.dt(s);
            Ok((w * m, w * se))
        })
        .collect::<Result<_>>()?;
    let est = parts.iter().map(|p| p.0).sum();
    let se = parts.iter().map(|p| p.1 * p.1).sum::<f64>().sqrt();
    Ok((est, se))
}

/// Reverse-diffusion pair on the relabelled time axis of `path` (reversed, so that node 0
/// holds the most diffused density): the process driven by the exact score and the one
/// driven by `score`, both with drift `-F + D·(score)`. `score` takes reversed labels.
pub fn reverse_diffusion_pair(
    forward: &ProcessSpec<f64>,
    reversed_path: &MixturePath<f64>,
    score: ScalarField,
) -> Result<(ProcessSpec<f64>, ProcessSpec<f64>)> {
    if !reversed_path.is_reversed() || forward.dim != 1 {
        return invalid("expects a one-dimensional time-reversed mixture path");
    }
    let (a, b) = (reversed_path.grid.t_start(), reversed_path.grid.t_end());
    let make = |s: ScalarField| {
        let f = forward.clone();
        let f2 = forward.clone();
        ProcessSpec::new(
            1,
            Arc::new(move |x: &[f64], t, o: &mut [f64]| {
                let tf = a + b - t;
                o[0] = -f.drift_1d(x[0], tf) + f.diffusion_at(tf) * s(x[0], t);
            }),
            Arc::new(move |t| f2.diffusion_at(a + b - t)),
        )
    };
    let path = reversed_path.clone();
    let exact: ScalarField = Arc::new(move |x, t| {
        let k = path.grid.node_index(t);
        match k {
            Some(k) => path.snapshot(k).score(&[x])[0],
            None => path.at_time(t).map(|m| m.score(&[x])[0]).unwrap_or(f64::NAN),
        }
    });
    Ok((make(exact), make(score)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_grid::{solve_fokker_planck, FieldKind, SolverOptions};

    fn gauss(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (std::f64::consts::TAU * v).sqrt()
    }

    fn zero() -> ScalarField {
        Arc::new(|_, _| 0.0)
    }

    fn setup(u: ScalarField) -> (ControlAssignment, Field<f64>, Field<f64>) {
        let grid = SpatialGrid::new(-6.0, 6.0, 241).unwrap();
        let tg = TimeGrid::uniform(0.0, 0.5, 50).unwrap();
        let control = ControlAssignment::new(Arc::new(|x, _| -0.5 * x), u, Arc::new(|_| 1.0));
        let p0: Vec<f64> = grid.nodes().iter().map(|&x| gauss(x, 0.5, 0.4)).collect();
        let p = solve_fokker_planck(&control.controlled_spec(), &p0, &grid, &tg, SolverOptions::default()).unwrap().field;
        let lambda = Field::from_fn(grid, tg, FieldKind::Lambda, |x, t| 0.3 * x * x - x * t + (x + t).sin());
        (control, lambda, p)
    }

    #[test]
    fn vanishes_on_free_evolution() {
        let (control, lambda, p) = setup(zero());
        assert!(action_value(&lambda, &p, &control, Flux::Fitted).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_multiplier_drops_out() {
        let (control, _, p) = setup(Arc::new(|x, t| 0.2 * (x - t).cos()));
        let grid = p.grid;
        let tg = p.time_grid.clone();
        let mut p_other = p.clone();
        // break the dynamics but keep mass
        for row in p_other.values.iter_mut().skip(1) {
            row.reverse();
        }
        let a0 = action_value(&Field::from_fn(grid, tg.clone(), FieldKind::Lambda, |_, _| 0.0), &p_other, &control, Flux::Fitted).unwrap();
        let a1 = action_value(&Field::from_fn(grid, tg, FieldKind::Lambda, |_, _| 3.7), &p_other, &control, Flux::Fitted).unwrap();
        assert!((a0 - a1).abs() < 1e-10, "{a0} {a1}");
    }

    #[test]
    fn forms_agree_with_by_parts_sign() {
        let (control, lambda, mut p) = setup(Arc::new(|x, t| 0.3 * (x * t).sin()));
        for (s, row) in p.values.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v *= 1.0 + 0.01 * ((s + i) as f64).sin();
            }
        }
        let control = control.with_killing(Arc::new(|x, _| 0.1 * x * x));
        let a = action_value(&lambda, &p, &control, Flux::Fitted).unwrap();
        let b = adjoint_action(&lambda, &p, &control, BoundarySign::IntegratedByParts, Flux::Fitted).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
        let printed = adjoint_action(&lambda, &p, &control, BoundarySign::Printed, Flux::Fitted).unwrap();
        let gap = boundary_sign_discrepancy(&lambda, &p).unwrap();
        assert!((printed - a - gap).abs() < 1e-10);
        assert!(gap.abs() > 1e-3);
    }

    #[test]
    fn equilibrium_residuals_vanish() {
        let grid = SpatialGrid::new(-8.0, 8.0, 321).unwrap();
        let tg = TimeGrid::uniform(0.0, 1.0, 20).unwrap();
        let control = ControlAssignment::new(Arc::new(|x, _| -x), zero(), Arc::new(|_| 2.0));
        let spec = control.controlled_spec();
        // discrete stationary state: solve long enough from the continuum equilibrium
        let p0: Vec<f64> = grid.nodes().iter().map(|&x| gauss(x, 0.0, 1.0)).collect();
        let long = TimeGrid::uniform(0.0, 30.0, 300).unwrap();
        let eq = solve_fokker_planck(&spec, &p0, &grid, &long, SolverOptions::default()).unwrap().field.values[300].clone();
        let p = Field::from_fn(grid, tg.clone(), FieldKind::Density, |x, _| eq[grid.nodes().iter().position(|&y| y == x).unwrap()]);
        let lambda = Field::from_fn(grid, tg, FieldKind::Lambda, |_, _| 0.0);
        let r = stationarity_residuals(&lambda, &p, &control, None, Flux::Fitted).unwrap();
        assert!(r.fp < 1e-10 && r.hjb < 1e-10 && r.control < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_control_is_detected() {
        let (control, _, p) = setup(Arc::new(|x, _| 0.4 * x));
        let lambda = Field::from_fn(p.grid, p.time_grid.clone(), FieldKind::Lambda, |x, _| 0.2 * x * x);
        let r = stationarity_residuals(&lambda, &p, &control, None, Flux::Fitted).unwrap();
        assert!(r.control > 0.1);
        let chi = lambda.log_transform().unwrap();
        let r = stationarity_residuals(&lambda, &p, &control, Some(&chi), Flux::Fitted).unwrap();
        assert!(r.log_transform.unwrap() < 1e-14);
    }

    #[test]
    fn control_minimises_action() {
        let (control, lambda, p) = setup(zero());
        let grid = p.grid;
        let tg = p.time_grid.clone();
        let h = grid.h();
        let lam = lambda.clone();
        let optimal: ScalarField = Arc::new(move |x, t| {
            let s = tg.node_index(t).unwrap_or(0);
            let i = (((x - grid.lo) / h).round() as usize).clamp(1, grid.m - 2);
            -(lam.values[s][i + 1] - lam.values[s][i - 1]) / (2.0 * h)
        });
        let best = action_value(&lambda, &p, &control.with_control(optimal.clone()), Flux::Fitted).unwrap();
        for k in 0..4 {
            for eps in [0.2, -0.2, 0.1, -0.1] {
                let base = optimal.clone();
                let u: ScalarField = Arc::new(move |x, t| base(x, t) + eps * (x * (k as f64 + 1.0) + t).cos());
                let v = action_value(&lambda, &p, &control.with_control(u), Flux::Fitted).unwrap();
                assert!(v > best - 1e-10, "direction {k}, eps {eps}: {v} < {best}");
            }
        }
    }

    #[test]
    fn delta_action_constant_offset() {
        use crate::exact_mixture::{evolve_mixture, EvolveKind, GaussianMixture};
        use crate::schedule::NoiseSchedule;
        let tg = TimeGrid::uniform(0.0, 1.0, 40).unwrap();
        let sched = NoiseSchedule::constant(1.0, 1.0, tg.clone()).unwrap();
        let path = evolve_mixture(&GaussianMixture::two_bump(), &sched, EvolveKind::Ou).unwrap();
        let space = SpatialGrid::new(-8.0, 8.0, 1601).unwrap();
        let p2 = path.clone();
        let exact = move |x: f64, t: f64| p2.snapshot(p2.grid.node_index(t).unwrap()).score(&[x])[0];
        let zero = delta_action(&exact, DensityPath::Mixture(&path, &space), &|_| 1.0, &tg).unwrap();
        assert!(zero.abs() < 1e-10);
        let eps = 0.3;
        let shifted = |x: f64, t: f64| exact(x, t) + eps;
        let v = delta_action(&shifted, DensityPath::Mixture(&path, &space), &|_| 1.0, &tg).unwrap();
        assert!((v - 0.5 * eps * eps * 1.0).abs() < 1e-8, "{v}");
        let (mc, se) = delta_action_monte_carlo(&|x: &[f64], t| vec![exact(x[0], t) + eps], &path, &|_| 1.0, &tg, 100, 1).unwrap();
        assert!((mc - 0.045).abs() < 1e-12 && se < 1e-12);
    }

    #[test]
    fn reversed_path_labels() {
        use crate::exact_mixture::{evolve_mixture, EvolveKind, GaussianMixture};
        use crate::schedule::NoiseSchedule;
        let tg = TimeGrid::<f64>::uniform(0.0, 2.0, 8).unwrap();
        let sched = NoiseSchedule::constant(1.0, 1.0, tg).unwrap();
        let path = evolve_mixture(&GaussianMixture::two_bump(), &sched, EvolveKind::Ou).unwrap();
        let rev = path.time_reversed();
        assert_eq!(rev.snapshot(0), path.snapshot(8));
        let mid = rev.at_time(0.3).unwrap();
        let direct = path.at_time(1.7).unwrap();
        assert!((mid.components[0].var[0] - direct.components[0].var[0]).abs() < 1e-14);
        assert_eq!(rev.time_reversed().snapshot(3), path.snapshot(3));
        let (h, g) = reverse_diffusion_pair(&ProcessSpec::ou(1, 1.0, 1.0), &rev, Arc::new(|_, _| 0.0)).unwrap();
        let t = rev.grid.t(2);
        let expected = 0.5 * 0.4 + rev.snapshot(2).score(&[0.4])[0];
        assert!((h.drift_1d(0.4, t) - expected).abs() < 1e-12);
        assert!((g.drift_1d(0.4, t) - 0.2).abs() < 1e-12);
    }
}
