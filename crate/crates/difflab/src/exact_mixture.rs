//! Gaussian mixtures evolved in closed form through the forward process, with exact
//! scores and reverse drifts.

use crate::analytic_kernels::{ou_affine, GaussianDensity};
use crate::error::{invalid, Result};
use crate::real::{log_sum_exp, Real};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::sde_sim::{PathRng, ProcessSpec, StateSampler};
use serde::{Deserialize, Serialize};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T> {
    pub weights: Vec<T>,
    pub components: Vec<GaussianDensity<T>>,
}

/// JSON layout `{weights, means, variances}`; one inner array per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl<T: Real> GaussianMixture<T> {
    pub fn new(weights: Vec<T>, components: Vec<GaussianDensity<T>>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return invalid("mixture needs one weight per component and at least one component");
        }
        let d = components[0].dim();
        if d > MAX_DIM || components.iter().any(|c| c.dim() != d) {
            return invalid(format!("components must share a dimension <= {MAX_DIM}"));
        }
        if weights.iter().any(|&w| !(w >= T::zero())) {
            return invalid("mixture weights must be non-negative");
        }
        let total: T = weights.iter().copied().sum();
        let tol = T::lit(1e-12).max(T::lit(8.0) * T::epsilon() * T::from_usize_lossy(weights.len()));
        if (total - T::one()).abs() > tol {
            return invalid(format!("mixture weights sum to {total}, not 1"));
        }
        Ok(Self { weights, components })
    }

    /// 1D mixture from parallel slices.
    pub fn scalar(weights: &[T], means: &[T], vars: &[T]) -> Result<Self> {
        if means.len() != weights.len() || vars.len() != weights.len() {
            return invalid("weights/means/variances lengths differ");
        }
        let comps = means
            .iter()
            .zip(vars)
            .map(|(&m, &v)| GaussianDensity::scalar(m, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights.to_vec(), comps)
    }

    /// `½ N(-1, 0.04) + ½ N(1, 0.04)`.
    pub fn two_bump() -> Self {
        let h = T::lit(0.5);
        Self::scalar(&[h, h], &[-T::one(), T::one()], &[T::lit(0.04), T::lit(0.04)]).expect("valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_pdf(&self, x: &[T]) -> T {
        let terms: Vec<T> =
            self.weights.iter().zip(&self.components).map(|(&w, c)| w.ln() + c.log_pdf(x)).collect();
        log_sum_exp(&terms)
    }

    pub fn pdf(&self, x: &[T]) -> T {
        self.log_pdf(x).exp()
    }

    /// `∂ₓ ln P(x)` from log-space responsibilities.
    pub fn score_into(&self, x: &[T], out: &mut [T]) {
        let mut logs = [T::zero(); 64];
        let k = self.components.len();
        let mut heap;
        let logs: &mut [T] = if k <= 64 {
            &mut logs[..k]
        } else {
            heap = vec![T::zero(); k];
            &mut heap
        };
        for (j, (w, c)) in self.weights.iter().zip(&self.components).enumerate() {
            logs[j] = w.ln() + c.log_pdf(x);
        }
        let lse = log_sum_exp(logs);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (j, c) in self.components.iter().enumerate() {
            let r = (logs[j] - lse).exp();
            if r == T::zero() {
                continue;
            }
            for i in 0..out.len() {
                out[i] -= r * (x[i] - c.mean[i]) / c.var[i];
            }
        }
    }

    pub fn score(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.score_into(x, &mut out);
        out
    }

    /// Mean vector of the mixture.
    pub fn mean(&self) -> Vec<T> {
        (0..self.dim())
            .map(|i| self.weights.iter().zip(&self.components).map(|(&w, c)| w * c.mean[i]).sum())
            .collect()
    }

    /// Per-coordinate variance of the mixture.
    pub fn variance(&self) -> Vec<T> {
        let m = self.mean();
        (0..self.dim())
            .map(|i| {
                self.weights
                    .iter()
                    .zip(&self.components)
                    .map(|(&w, c)| w * (c.var[i] + (c.mean[i] - m[i]) * (c.mean[i] - m[i])))
                    .sum()
            })
            .collect()
    }

    /// Cumulative distribution of a 1D mixture.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(&w, c)| w.as_f64() * crate::stats::normal_cdf(x, c.mean[0].as_f64(), c.var[0].as_f64()))
            .sum()
    }

    pub fn record(&self) -> MixtureRecord {
        MixtureRecord {
            weights: self.weights.iter().map(|w| w.as_f64()).collect(),
            means: self.components.iter().map(|c| c.mean.iter().map(|v| v.as_f64()).collect()).collect(),
            variances: self.components.iter().map(|c| c.var.iter().map(|v| v.as_f64()).collect()).collect(),
        }
    }

    pub fn from_record(rec: &MixtureRecord) -> Result<Self> {
        if rec.means.len() != rec.weights.len() || rec.variances.len() != rec.weights.len() {
            return invalid("weights/means/variances lengths differ");
        }
        let comps = rec
            .means
            .iter()
            .zip(&rec.variances)
            .map(|(m, v)| {
                GaussianDensity::new(m.iter().map(|&x| T::lit(x)).collect(), v.iter().map(|&x| T::lit(x)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rec.weights.iter().map(|&w| T::lit(w)).collect(), comps)
    }
}

impl<T: Real> StateSampler<T> for GaussianMixture<T> {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }
    fn draw(&self, rng: &mut PathRng, out: &mut [T]) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w.as_f64();
            if u <= acc {
                pick = j;
                break;
            }
        }
        self.components[pick].draw(rng, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolveKind {
    PureDiffusion,
    Ou,
}

/// Closed-form push-forward of a mixture from `t0` to `t`.
pub fn propagate<T: Real>(
    mixture: &GaussianMixture<T>,
    schedule: &NoiseSchedule<T>,
    kind: EvolveKind,
    t0: T,
    t: T,
) -> Result<GaussianMixture<T>> {
    if t == t0 {
        return Ok(mixture.clone());
    }
    if t < t0 {
        return invalid("cannot propagate backwards in time");
    }
    let (scale, added) = match kind {
        EvolveKind::Ou => ou_affine(t0, t, schedule)?,
        EvolveKind::PureDiffusion => (T::one(), schedule.diffusion_integral(t0, t)),
    };
    let components = mixture
        .components
        .iter()
        .map(|c| GaussianDensity {
            mean: c.mean.iter().map(|&m| scale * m).collect(),
            var: c.var.iter().map(|&v| scale * scale * v + added).collect(),
        })
        .collect();
    Ok(GaussianMixture { weights: mixture.weights.clone(), components })
}

/// Exact marginal densities `P(x, t_s)` on every grid node.
#[derive(Debug, Clone)]
pub struct MixturePath<T> {
    pub grid: TimeGrid<T>,
    pub snapshots: Vec<GaussianMixture<T>>,
    pub kind: EvolveKind,
    schedule: NoiseSchedule<T>,
    reversed: bool,
}

pub fn evolve_mixture<T: Real>(
    mixture: &GaussianMixture<T>,
    schedule: &NoiseSchedule<T>,
    kind: EvolveKind,
) -> Result<MixturePath<T>> {
    let grid = schedule.grid().clone();
    let t0 = grid.t_start();
    let snapshots = grid
        .nodes()
        .iter()
        .map(|&t| propagate(mixture, schedule, kind, t0, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixturePath { grid, snapshots, kind, schedule: schedule.clone(), reversed: false })
}

impl<T: Real> MixturePath<T> {
    pub fn snapshot(&self, s: usize) -> &GaussianMixture<T> {
        &self.snapshots[s]
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    /// Mixture at an arbitrary time inside the grid span.
    pub fn at_time(&self, t: T) -> Result<GaussianMixture<T>> {
        if let Some(s) = self.grid.node_index(t) {
            return Ok(self.snapshots[s].clone());
        }
        let (first, t0, t) = if self.reversed {
            let last = self.snapshots.len() - 1;
            (&self.snapshots[last], self.grid.t_start(), self.grid.t_start() + self.grid.t_end() - t)
        } else {
            (&self.snapshots[0], self.grid.t_start(), t)
        };
        propagate(first, &self.schedule, self.kind, t0, t)
    }

    /// The same densities labelled by `t' = t_start + t_end - t`, so that node 0 holds the
    /// most diffused snapshot. Involutive.
    pub fn time_reversed(&self) -> Self {
        let mut snapshots = self.snapshots.clone();
        snapshots.reverse();
        Self { grid: self.grid.relabeled(), snapshots, reversed: !self.reversed, ..self.clone() }
    }

    pub fn is_reversed(&self) -> bool {
        self.reversed
    }

    pub fn exact_score(&self, x: &[T], s: usize) -> Vec<T> {
        self.snapshots[s].score(x)
    }

    pub fn log_density(&self, x: &[T], s: usize) -> T {
        self.snapshots[s].log_pdf(x)
    }
}

/// Drift of the reversed process at node `s`: `-F(x,t_s) + D(t_s)·score`.
pub fn reverse_drift<T: Real>(spec_forward: &ProcessSpec<T>, path: &MixturePath<T>, x: &[T], s: usize) -> Vec<T> {
    let t = path.grid.t(s);
    let f = spec_forward.drift_at(x, t);
    let d = spec_forward.diffusion_at(t);
    let sc = path.exact_score(x, s);
    f.iter().zip(sc).map(|(&fi, si)| -fi + d * si).collect()
}

/// Fourth-order first derivative on a uniform grid; exact for polynomials of degree <= 4.
pub fn derivative_5pt<T: Real>(f: &[T], h: T) -> Vec<T> {
    let m = f.len();
    assert!(m >= 5, "need at least five samples");
    let c = |v: f64| T::lit(v);
    let d12 = T::lit(12.0) * h;
    let mut out = vec![T::zero(); m];
    out[0] = (c(-25.0) * f[0] + c(48.0) * f[1] - c(36.0) * f[2] + c(16.0) * f[3] - c(3.0) * f[4]) / d12;
    out[1] = (c(-3.0) * f[0] - c(10.0) * f[1] + c(18.0) * f[2] - c(6.0) * f[3] + f[4]) / d12;
    for i in 2..m - 2 {
        out[i] = (f[i - 2] - c(8.0) * f[i - 1] + c(8.0) * f[i + 1] - f[i + 2]) / d12;
    }
    let k = m - 1;
    out[k] = (c(25.0) * f[k] - c(48.0) * f[k - 1] + c(36.0) * f[k - 2] - c(16.0) * f[k - 3] + c(3.0) * f[k - 4]) / d12;
    out[k - 1] = (c(3.0) * f[k] + c(10.0) * f[k - 1] - c(18.0) * f[k - 2] + c(6.0) * f[k - 3] - f[k - 4]) / d12;
    out
}

/// Build `P_eq ∝ exp(-2 V / D)` on a uniform grid and return `max |d ln P_eq/dx - 2F/D|`.
pub fn equilibrium_score_check<T: Real>(
    potential: &dyn Fn(T) -> T,
    drift: &dyn Fn(T) -> T,
    diffusion: T,
    x_grid: &[T],
) -> Result<T> {
    if x_grid.len() < 5 {
        return invalid("equilibrium check needs at least five grid points");
    }
    if !(diffusion > T::zero()) {
        return invalid("diffusion coefficient must be positive");
    }
    let h = x_grid[1] - x_grid[0];
    let two = T::lit(2.0);
    let log_p: Vec<T> = x_grid.iter().map(|&x| -two * potential(x) / diffusion).collect();
    let peak = log_p.iter().copied().fold(T::neg_infinity(), T::max);
    let edge = log_p[0].max(log_p[log_p.len() - 1]) - peak;
    if !peak.is_finite() || edge > T::lit(1e-8).ln() {
        return invalid("equilibrium density is not normalizable on this grid (edge mass too large)");
    }
    let dlog = derivative_5pt(&log_p, h);
    Ok(x_grid
        .iter()
        .zip(&dlog)
        .map(|(&x, &g)| (g - two * drift(x) / diffusion).abs())
        .fold(T::zero(), T::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_schedule(t_end: f64, n: usize) -> NoiseSchedule<f64> {
        NoiseSchedule::constant(1.0, 1.0, TimeGrid::uniform(0.0, t_end, n).unwrap()).unwrap()
    }

    #[test]
    fn weights_validated() {
        assert!(GaussianMixture::<f64>::scalar(&[0.5, 0.6], &[0.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(GaussianMixture::<f64>::scalar(&[], &[], &[]).is_err());
        assert!(GaussianMixture::<f64>::scalar(&[1.5, -0.5], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn pure_diffusion_single_gaussian() {
        let m = GaussianMixture::<f64>::scalar(&[1.0], &[0.0], &[1.0]).unwrap();
        let s = ou_schedule(1.0, 10);
        let p = evolve_mixture(&m, &s, EvolveKind::PureDiffusion).unwrap();
        assert!((p.snapshot(10).components[0].var[0] - 2.0).abs() < 1e-14);
        assert_eq!(p.snapshot(0), &m);
    }

    #[test]
    fn ou_mixes_to_standard_normal() {
        let m = GaussianMixture::<f64>::two_bump();
        let s = ou_schedule(40.0, 400);
        let p = evolve_mixture(&m, &s, EvolveKind::Ou).unwrap();
        for c in &p.snapshot(400).components {
            assert!(c.mean[0].abs() < 1e-8);
            assert!((c.var[0] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn composition_matches_direct() {
        let m = GaussianMixture::<f64>::two_bump();
        let s = ou_schedule(2.0, 20);
        let mid = propagate(&m, &s, EvolveKind::Ou, 0.0, 0.7).unwrap();
        let two = propagate(&mid, &s, EvolveKind::Ou, 0.7, 1.9).unwrap();
        let one = propagate(&m, &s, EvolveKind::Ou, 0.0, 1.9).unwrap();
        for (a, b) in two.components.iter().zip(&one.components) {
            assert!((a.mean[0] - b.mean[0]).abs() < 1e-12);
            assert!((a.var[0] - b.var[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores() {
        let g = GaussianMixture::<f64>::scalar(&[1.0], &[0.5], &[2.0]).unwrap();
        assert!((g.score(&[1.5])[0] + 0.5).abs() < 1e-15);
        let m = GaussianMixture::<f64>::two_bump();
        assert_eq!(m.score(&[0.0])[0], 0.0);
        // far tail: responsibilities stay finite
        let far = m.score(&[40.0])[0];
        assert!((far + (40.0 - 1.0) / 0.04).abs() < 1e-9);
    }

    #[test]
    fn score_matches_finite_difference() {
        let m = GaussianMixture::<f64>::scalar(&[0.3, 0.7], &[-1.0, 2.0], &[0.5, 1.5]).unwrap();
        for &x in &[-3.0, -0.4, 0.0, 1.1, 4.0] {
            let h = 1e-5;
            let fd = (m.log_pdf(&[x + h]) - m.log_pdf(&[x - h])) / (2.0 * h);
            let s = m.score(&[x])[0];
            assert!((fd - s).abs() <= 1e-6 * s.abs().max(1.0), "x={x}: {fd} vs {s}");
        }
    }

    #[test]
    fn equilibrium_reverse_drift_is_forward_drift() {
        // stationary OU N(0, D/beta) is its own reversal
        let (beta, d) = (2.0, 3.0);
        let m = GaussianMixture::<f64>::scalar(&[1.0], &[0.0], &[d / beta]).unwrap();
        let s = NoiseSchedule::constant(beta, d, TimeGrid::uniform(0.0, 1.0, 4).unwrap()).unwrap();
        let p = evolve_mixture(&m, &s, EvolveKind::Ou).unwrap();
        let spec = ProcessSpec::ou(1, beta, d);
        let r = reverse_drift(&spec, &p, &[0.8], 2);
        assert!((r[0] + beta * 0.8 / 2.0).abs() < 1e-12);
        let free = ProcessSpec::pure_diffusion(1, d);
        let r = reverse_drift(&free, &p, &[0.8], 2);
        assert!((r[0] - d * p.exact_score(&[0.8], 2)[0]).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_checks() {
        let grid: Vec<f64> = (0..801).map(|i| -8.0 + 0.02 * i as f64).collect();
        let r = equilibrium_score_check(&|x: f64| 0.5 * x * x, &|x: f64| -x, 2.0, &grid).unwrap();
        assert!(r < 1e-10, "{r}");
        let dw = |x: f64| (x * x - 1.0).powi(2);
        let dwf = |x: f64| -4.0 * x * (x * x - 1.0);
        let g3: Vec<f64> = (0..601).map(|i| -3.0 + 0.01 * i as f64).collect();
        let r = equilibrium_score_check(&dw, &dwf, 1.0, &g3).unwrap();
        assert!(r < 1e-8, "{r}");
        let bad = equilibrium_score_check(&dw, &|x| -x, 1.0, &g3).unwrap();
        assert!(bad > 0.1);
        // flat potential is not normalizable
        assert!(equilibrium_score_check(&|_| 0.0, &|_| 0.0, 1.0, &g3).is_err());
    }

    #[test]
    fn record_round_trip() {
        let m = GaussianMixture::<f64>::two_bump();
        let text = serde_json::to_string(&m.record()).unwrap();
        let rec: MixtureRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(GaussianMixture::<f64>::from_record(&rec).unwrap(), m);
    }

    #[test]
    fn mixture_moments() {
        let m = GaussianMixture::<f64>::two_bump();
        assert_eq!(m.mean()[0], 0.0);
        assert!((m.variance()[0] - 1.04).abs() < 1e-14);
        assert!((m.cdf_1d(0.0) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn at_time_between_nodes() {
        let m = GaussianMixture::<f64>::two_bump();
        let s = ou_schedule(1.0, 4);
        let p = evolve_mixture(&m, &s, EvolveKind::Ou).unwrap();
        let direct = propagate(&m, &s, EvolveKind::Ou, 0.0, 0.6).unwrap();
        assert_eq!(p.at_time(0.6).unwrap(), direct);
    }
}
