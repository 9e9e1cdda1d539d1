//! Closed-form Gaussian transition densities.

use crate::error::{invalid, Result};
use crate::real::{trapezoid, Real};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> GaussianDensity<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.is_empty() || mean.len() != var.len() {
            return invalid(format!("mean/variance length mismatch: {} vs {}", mean.len(), var.len()));
        }
        if var.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return invalid("variances must be finite and positive");
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return invalid("means must be finite");
        }
        Ok(Self { mean, var })
    }

    pub fn scalar(mean: T, var: T) -> Result<Self> {
        Self::new(vec![mean], vec![var])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[T]) -> T {
        let two_pi = T::lit(std::f64::consts::TAU);
        let half = T::lit(0.5);
        let mut acc = T::zero();
        for i in 0..self.dim() {
            let d = x[i] - self.mean[i];
            acc -= half * (d * d / self.var[i] + (two_pi * self.var[i]).ln());
        }
        acc
    }

    pub fn pdf(&self, x: &[T]) -> T {
        self.log_pdf(x).exp()
    }

    /// `∂ₓ ln N(x)`, written into `out`.
    pub fn score_into(&self, x: &[T], out: &mut [T]) {
        for i in 0..self.dim() {
            out[i] = -(x[i] - self.mean[i]) / self.var[i];
        }
    }

    pub fn score(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.score_into(x, &mut out);
        out
    }

    /// Law of `c·X`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            mean: self.mean.iter().map(|&m| c * m).collect(),
            var: self.var.iter().map(|&v| c * c * v).collect(),
        }
    }

    /// Map a standard normal draw `z` to a draw from this density.
    pub fn transform(&self, z: &[T]) -> Vec<T> {
        (0..self.dim()).map(|i| self.mean[i] + self.var[i].sqrt() * z[i]).collect()
    }
}

/// Density of the sum of two independent Gaussians.
pub fn convolve<T: Real>(a: &GaussianDensity<T>, b: &GaussianDensity<T>) -> Result<GaussianDensity<T>> {
    if a.dim() != b.dim() {
        return invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim()));
    }
    Ok(GaussianDensity {
        mean: a.mean.iter().zip(&b.mean).map(|(&x, &y)| x + y).collect(),
        var: a.var.iter().zip(&b.var).map(|(&x, &y)| x + y).collect(),
    })
}

/// Free diffusion: `N(x0, D (t - t0))`.
pub fn pure_diffusion_kernel<T: Real>(x0: &[T], t0: T, t: T, diffusion: T) -> Result<GaussianDensity<T>> {
    if !(t > t0) {
        return invalid(format!("need t > t0 (t0={t0}, t={t})"));
    }
    if !(diffusion > T::zero()) {
        return invalid("diffusion coefficient must be positive");
    }
    let v = diffusion * (t - t0);
    GaussianDensity::new(x0.to_vec(), vec![v; x0.len()])
}

/// Ornstein–Uhlenbeck kernel for drift `-beta(t) x / 2`.
///
/// mean = x0·exp(-½∫β), variance = (D(t)/β(t))·(1 - exp(-∫β)), with `∫β` taken by the
/// schedule's trapezoid rule over `[t0, t]`.
pub fn ou_kernel<T: Real>(x0: &[T], t0: T, t: T, schedule: &NoiseSchedule<T>) -> Result<GaussianDensity<T>> {
    let (scale, var) = ou_affine(t0, t, schedule)?;
    GaussianDensity::new(x0.iter().map(|&x| scale * x).collect(), vec![var; x0.len()])
}

/// `(mean scale, variance)` of the OU kernel between two times.
pub fn ou_affine<T: Real>(t0: T, t: T, schedule: &NoiseSchedule<T>) -> Result<(T, T)> {
    if !(t > t0) {
        return invalid(format!("need t > t0 (t0={t0}, t={t})"));
    }
    let integral = schedule.beta_integral(t0, t);
    let beta_t = schedule.beta(t);
    if !(integral > T::zero()) || !(beta_t > T::zero()) {
        return invalid("beta vanishes on the interval; use pure_diffusion_kernel");
    }
    let scale = (-T::lit(0.5) * integral).exp();
    let var = schedule.diffusion(t) / beta_t * -(-integral).exp_m1();
    Ok((scale, var))
}

/// Kernel of `dx = a x dt + sqrt(D) dW` with constant `a` (any sign) and `D`.
pub fn linear_drift_kernel<T: Real>(x0: &[T], elapsed: T, a: T, diffusion: T) -> Result<GaussianDensity<T>> {
    if !(elapsed > T::zero()) {
        return invalid("elapsed time must be positive");
    }
    let var = if a == T::zero() {
        diffusion * elapsed
    } else {
        diffusion / (T::lit(2.0) * a) * (T::lit(2.0) * a * elapsed).exp_m1()
    };
    let scale = (a * elapsed).exp();
    GaussianDensity::new(x0.iter().map(|&x| scale * x).collect(), vec![var; x0.len()])
}

/// DDPM finite-time kernel `N(sqrt(alpha_bar) x_d, 1 - alpha_bar)` at grid time `t`.
pub fn ddpm_finite_kernel<T: Real>(x_d: &[T], t: T, schedule: &NoiseSchedule<T>) -> Result<GaussianDensity<T>> {
    let Some(s) = schedule.grid().node_index(t) else {
        return invalid(format!("t={t} is not a schedule node"));
    };
    let ab = schedule.alpha_bar()[s];
    if ab >= T::one() {
        return invalid("alpha_bar = 1: zero-noise kernel is a point mass");
    }
    let sa = ab.sqrt();
    GaussianDensity::new(x_d.iter().map(|&x| sa * x).collect(), vec![T::one() - ab; x_d.len()])
}

/// One forward DDPM step `N(sqrt(1 - beta_s) x, beta_s)`.
pub fn ddpm_step_kernel<T: Real>(x: &[T], s: usize, schedule: &NoiseSchedule<T>) -> Result<GaussianDensity<T>> {
    let b = *schedule
        .beta_step()
        .get(s)
        .ok_or_else(|| crate::error::Error::InvalidArgument(format!("step {s} out of range")))?;
    let sa = (T::one() - b).sqrt();
    GaussianDensity::new(x.iter().map(|&v| sa * v).collect(), vec![b; x.len()])
}

/// Push a density through DDPM steps `0..steps` by repeated scaling and convolution.
pub fn compose_ddpm_steps<T: Real>(
    start: &GaussianDensity<T>,
    steps: usize,
    schedule: &NoiseSchedule<T>,
) -> Result<GaussianDensity<T>> {
    let mut cur = start.clone();
    for s in 0..steps {
        let b = schedule.beta_step()[s];
        let noise = GaussianDensity { mean: vec![T::zero(); cur.dim()], var: vec![b; cur.dim()] };
        cur = convolve(&cur.scaled((T::one() - b).sqrt()), &noise)?;
    }
    Ok(cur)
}

/// Kernel family used by [`chapman_kolmogorov_residual`].
#[derive(Clone, Copy)]
pub enum KernelChoice<'a, T> {
    PureDiffusion { diffusion: T },
    Ou(&'a NoiseSchedule<T>),
}

impl<T: Real> KernelChoice<'_, T> {
    /// `(mean scale, variance)`: the kernel from `x0` is `N(scale·x0, variance)`.
    pub fn affine(&self, t0: T, t: T) -> Result<(T, T)> {
        match *self {
            KernelChoice::PureDiffusion { diffusion } => {
                let k = pure_diffusion_kernel(&[T::zero()], t0, t, diffusion)?;
                Ok((T::one(), k.var[0]))
            }
            KernelChoice::Ou(s) => ou_affine(t0, t, s),
        }
    }
}

fn normal_pdf<T: Real>(x: T, mean: T, var: T) -> T {
    let d = x - mean;
    (-(d * d) / (T::lit(2.0) * var)).exp() / (T::lit(std::f64::consts::TAU) * var).sqrt()
}

/// Worst-case gap between `∫ K(x,t|ξ,τ) K(ξ,τ|x0,t0) dξ` and `K(x,t|x0,t0)` over a
/// uniform `x_grid`, which also serves as the quadrature grid for `ξ`.
pub fn chapman_kolmogorov_residual<T: Real>(
    kernel: KernelChoice<'_, T>,
    x0: T,
    t0: T,
    tau: T,
    t: T,
    x_grid: &[T],
) -> Result<T> {
    if !(t0 < tau && tau < t) {
        return invalid(format!("need t0 < tau < t (got {t0}, {tau}, {t})"));
    }
    if x_grid.len() < 3 {
        return invalid("quadrature grid needs at least three points");
    }
    let h = x_grid[1] - x_grid[0];
    let (s1, v1) = kernel.affine(t0, tau)?;
    let (s2, v2) = kernel.affine(tau, t)?;
    let (s3, v3) = kernel.affine(t0, t)?;
    let first: Vec<T> = x_grid.iter().map(|&xi| normal_pdf(xi, s1 * x0, v1)).collect();
    let captured = trapezoid(&first, h);
    let direct_mass = trapezoid(&x_grid.iter().map(|&x| normal_pdf(x, s3 * x0, v3)).collect::<Vec<_>>(), h);
    let floor = T::one() - T::lit(1e-6);
    if captured < floor || direct_mass < floor {
        return invalid(format!(
            "quadrature grid captures too little mass ({captured}, {direct_mass})"
        ));
    }
    let mut worst = T::zero();
    let mut integrand = vec![T::zero(); x_grid.len()];
    for &x in x_grid {
        for (j, &xi) in x_grid.iter().enumerate() {
            integrand[j] = normal_pdf(x, s2 * xi, v2) * first[j];
        }
        let composed = trapezoid(&integrand, h);
        let gap = (composed - normal_pdf(x, s3 * x0, v3)).abs();
        worst = worst.max(gap);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ddpm_schedule, TimeGrid};
    use std::sync::Arc;

    #[test]
    fn convolution_adds_moments() {
        let a = GaussianDensity::<f64>::scalar(1.0, 2.0).unwrap();
        let b = GaussianDensity::<f64>::scalar(-1.0, 3.0).unwrap();
        let c = convolve(&a, &b).unwrap();
        assert_eq!(c.mean, vec![0.0]);
        assert_eq!(c.var, vec![5.0]);
        let d = GaussianDensity::<f64>::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(convolve(&a, &d).is_err());
    }

    #[test]
    fn invalid_densities_rejected() {
        assert!(GaussianDensity::<f64>::scalar(0.0, 0.0).is_err());
        assert!(GaussianDensity::<f64>::scalar(0.0, -1.0).is_err());
        assert!(GaussianDensity::new(vec![0.0], vec![]).is_err());
    }

    #[test]
    fn pure_diffusion_unit() {
        let k = pure_diffusion_kernel::<f64>(&[0.0], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(k.var, vec![1.0]);
        assert!(pure_diffusion_kernel::<f64>(&[0.0], 1.0, 1.0, 1.0).is_err());
        let narrow = pure_diffusion_kernel::<f64>(&[5.0], 0.0, 1e-12, 1.0).unwrap();
        assert_eq!(narrow.mean, vec![5.0]);
        assert!(narrow.var[0] < 1e-11);
    }

    #[test]
    fn ou_kernel_log4() {
        let g = TimeGrid::uniform(0.0, 4f64.ln(), 10).unwrap();
        let s = NoiseSchedule::constant(1.0, 1.0, g).unwrap();
        let k = ou_kernel(&[2.0], 0.0, 4f64.ln(), &s).unwrap();
        assert!((k.mean[0] - 1.0).abs() < 1e-14);
        assert!((k.var[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn ou_kernel_rejects_zero_beta() {
        let g = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
        let s = NoiseSchedule::new(Arc::new(|_| 0.0), Arc::new(|_| 1.0), g).unwrap();
        assert!(ou_kernel(&[0.0], 0.0, 1.0, &s).is_err());
    }

    #[test]
    fn linear_drift_matches_ou() {
        let g = TimeGrid::uniform(0.0, 2.0, 10).unwrap();
        let s = NoiseSchedule::constant(0.7, 1.3, g).unwrap();
        let a = ou_kernel(&[1.5], 0.3, 1.7, &s).unwrap();
        let b = linear_drift_kernel::<f64>(&[1.5], 1.4, -0.35, 1.3).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 1e-13);
        assert!((a.var[0] - b.var[0]).abs() < 1e-13);
        // repulsive drift widens faster than free diffusion
        let c = linear_drift_kernel(&[1.0], 1.0, 0.5, 1.0).unwrap();
        assert!(c.var[0] > 1.0 && c.mean[0] > 1.0);
    }

    #[test]
    fn ddpm_kernels() {
        let g = TimeGrid::uniform(0.0, 1.0, 100).unwrap();
        let s = ddpm_schedule(Arc::new(|_| 1.0), g).unwrap();
        assert!(ddpm_finite_kernel(&[1.0], 0.0, &s).is_err());
        assert!(ddpm_finite_kernel(&[1.0], 0.505, &s).is_err());
        let k = ddpm_finite_kernel(&[1.0], 1.0, &s).unwrap();
        let composed = compose_ddpm_steps(&GaussianDensity::<f64>::scalar(1.0, 1e-300).unwrap(), 100, &s).unwrap();
        assert!((k.mean[0] - composed.mean[0]).abs() < 1e-12);
        assert!((k.var[0] - composed.var[0]).abs() < 1e-12);
        let one = ddpm_step_kernel(&[2.0], 0, &s).unwrap();
        assert!((one.var[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn score_of_gaussian() {
        let g = GaussianDensity::<f64>::scalar(1.0, 4.0).unwrap();
        assert_eq!(g.score(&[3.0]), vec![-0.5]);
    }

    #[test]
    fn ck_rejects_bad_inputs() {
        let grid: Vec<f64> = (0..101).map(|i| -1.0 + 0.02 * i as f64).collect();
        let k = KernelChoice::PureDiffusion { diffusion: 1.0 };
        assert!(chapman_kolmogorov_residual(k, 0.0, 0.0, 0.5, 1.0, &grid).is_err());
        assert!(chapman_kolmogorov_residual(k, 0.0, 0.5, 0.5, 1.0, &grid).is_err());
    }

    #[test]
    fn f32_kernels() {
        let a = GaussianDensity::<f32>::scalar(0.0, 1.0).unwrap();
        assert!((a.pdf(&[0.0]) - 0.398_942_3).abs() < 1e-6);
    }
}
