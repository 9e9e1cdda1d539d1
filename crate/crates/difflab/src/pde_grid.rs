//! 1D grid solvers for the Fokker–Planck equation `∂ₜP = -∂ₓ(F P) + ½ D ∂ₓ² P - V P` and
//! the backward Kolmogorov equation `∂ₜJ + F ∂ₓJ + ½ D ∂ₓ² J - V J = 0`.
//!
//! The forward operator is a finite-volume scheme with exponentially fitted
//! (Scharfetter–Gummel) interface fluxes: the drift is upwinded per interface according
//! to the sign of `F`, and the scheme reduces to centred differences when the cell Péclet
//! number is small. A hybrid flux (centred up to cell Péclet 2, upwind beyond) is
//! available for fields with steep tails. Boundaries are zero-flux. The backward operator is the exact adjoint
//! of the forward one under the trapezoid inner product, so forward/backward pairings
//! are conserved to rounding.

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::schedule::TimeGrid;
use crate::sde_sim::ProcessSpec;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Uniform grid on `[lo, hi]` with `m` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid<T> {
    pub lo: T,
    pub hi: T,
    pub m: usize,
}

impl<T: Real> SpatialGrid<T> {
    pub fn new(lo: T, hi: T, m: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("need finite lo < hi (got {lo}, {hi})"));
        }
        if m < 3 {
            return invalid("spatial grid needs at least three nodes");
        }
        Ok(Self { lo, hi, m })
    }

    /// `[-8, 8]` with 801 nodes.
    pub fn standard() -> Self {
        Self { lo: T::lit(-8.0), hi: T::lit(8.0), m: 801 }
    }

    pub fn h(&self) -> T {
        (self.hi - self.lo) / T::from_usize_lossy(self.m - 1)
    }

    pub fn x(&self, i: usize) -> T {
        if i == self.m - 1 {
            return self.hi;
        }
        self.lo + self.h() * T::from_usize_lossy(i)
    }

    pub fn nodes(&self) -> Vec<T> {
        (0..self.m).map(|i| self.x(i)).collect()
    }

    /// Trapezoid weights (`h`, with `h/2` at the two ends).
    pub fn weights(&self) -> Vec<T> {
        let h = self.h();
        let mut w = vec![h; self.m];
        w[0] = h * T::lit(0.5);
        w[self.m - 1] = h * T::lit(0.5);
        w
    }

    pub fn integrate(&self, v: &[T]) -> T {
        let h = self.h();
        let inner: T = v[1..self.m - 1].iter().copied().sum();
        h * (inner + T::lit(0.5) * (v[0] + v[self.m - 1]))
    }

    /// Trapezoid inner product `⟨a, b⟩`.
    pub fn pairing(&self, a: &[T], b: &[T]) -> T {
        let h = self.h();
        let inner: T = (1..self.m - 1).map(|i| a[i] * b[i]).sum();
        h * (inner + T::lit(0.5) * (a[0] * b[0] + a[self.m - 1] * b[self.m - 1]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Density,
    Chi,
    Lambda,
}

/// Grid function sampled at every node of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    pub grid: SpatialGrid<T>,
    pub time_grid: TimeGrid<T>,
    pub kind: FieldKind,
    /// `values[s][i]`, with `s` indexing [`Field::times`].
    pub values: Vec<Vec<T>>,
    /// Set when the time labels run through `t' = t_start + t_end - t`.
    pub reversed: bool,
}

/// Grid metadata written next to a CSV export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMeta {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
    pub t_nodes: Vec<f64>,
    pub kind: FieldKind,
    pub reversed: bool,
}

impl<T: Real> Field<T> {
    pub fn new(grid: SpatialGrid<T>, time_grid: TimeGrid<T>, kind: FieldKind, values: Vec<Vec<T>>) -> Result<Self> {
        if values.len() != time_grid.nodes().len() || values.iter().any(|v| v.len() != grid.m) {
            return invalid("field values do not match the grids");
        }
        Ok(Self { grid, time_grid, kind, values, reversed: false })
    }

    /// Sample `f(x, t)` on both grids.
    pub fn from_fn(grid: SpatialGrid<T>, time_grid: TimeGrid<T>, kind: FieldKind, f: impl Fn(T, T) -> T) -> Self {
        let xs = grid.nodes();
        let values = time_grid.nodes().iter().map(|&t| xs.iter().map(|&x| f(x, t)).collect()).collect();
        Self { grid, time_grid, kind, values, reversed: false }
    }

    /// Time labels of the rows of `values`.
    pub fn times(&self) -> Vec<T> {
        if self.reversed {
            self.time_grid.relabeled().nodes().to_vec()
        } else {
            self.time_grid.nodes().to_vec()
        }
    }

    /// Grid whose nodes are the row labels.
    pub fn label_grid(&self) -> TimeGrid<T> {
        if self.reversed {
            self.time_grid.relabeled()
        } else {
            self.time_grid.clone()
        }
    }

    pub fn mass(&self, s: usize) -> T {
        self.grid.integrate(&self.values[s])
    }

    /// `λ = -ln χ` and back.
    pub fn log_transform(&self) -> Result<Self> {
        let kind = match self.kind {
            FieldKind::Chi => FieldKind::Lambda,
            FieldKind::Lambda => FieldKind::Chi,
            FieldKind::Density => return invalid("log transform applies to chi or lambda fields"),
        };
        let values = self
            .values
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| if kind == FieldKind::Lambda { -v.ln() } else { (-v).exp() })
                    .collect()
            })
            .collect();
        Ok(Self { values, kind, ..self.clone() })
    }

    pub fn meta(&self) -> FieldMeta {
        FieldMeta {
            lo: self.grid.lo.as_f64(),
            hi: self.grid.hi.as_f64(),
            m: self.grid.m,
            t_nodes: self.times().iter().map(|t| t.as_f64()).collect(),
            kind: self.kind,
            reversed: self.reversed,
        }
    }

    /// Rows are time nodes, columns are grid nodes.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        for row in &self.values {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn export(&self, dir: &std::path::Path, stem: &str) -> Result<()> {
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }
}

/// Relabel time by `t' = t_start + t_end - t` without touching values. Involutive.
pub fn reverse_time_relabel<T: Real>(field: &Field<T>) -> Field<T> {
    let mut values = field.values.clone();
    values.reverse();
    Field { values, reversed: !field.reversed, ..field.clone() }
}

/// Tridiagonal matrix: `(A v)_i = lower_i v_{i-1} + diag_i v_i + upper_i v_{i+1}`.
#[derive(Debug, Clone)]
pub struct Tridiag<T> {
    pub lower: Vec<T>,
    pub diag: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> Tridiag<T> {
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        let m = v.len();
        (0..m)
            .map(|i| {
                let mut acc = self.diag[i] * v[i];
                if i > 0 {
                    acc += self.lower[i] * v[i - 1];
                }
                if i + 1 < m {
                    acc += self.upper[i] * v[i + 1];
                }
                acc
            })
            .collect()
    }

    /// `I + c·A`.
    pub fn shifted(&self, c: T) -> Self {
        Self {
            lower: self.lower.iter().map(|&a| c * a).collect(),
            diag: self.diag.iter().map(|&a| T::one() + c * a).collect(),
            upper: self.upper.iter().map(|&a| c * a).collect(),
        }
    }

    /// Solve `A x = rhs` by the Thomas algorithm.
    pub fn solve(&self, rhs: &[T]) -> Vec<T> {
        let m = rhs.len();
        let mut c = vec![T::zero(); m];
        let mut d = vec![T::zero(); m];
        c[0] = self.upper[0] / self.diag[0];
        d[0] = rhs[0] / self.diag[0];
        for i in 1..m {
            let den = self.diag[i] - self.lower[i] * c[i - 1];
            c[i] = if i + 1 < m { self.upper[i] / den } else { T::zero() };
            d[i] = (rhs[i] - self.lower[i] * d[i - 1]) / den;
        }
        let mut x = vec![T::zero(); m];
        x[m - 1] = d[m - 1];
        for i in (0..m - 1).rev() {
            x[i] = d[i] - c[i] * x[i + 1];
        }
        x
    }
}

/// Discretization of the drift flux across a cell interface.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flux {
    /// Exponentially fitted (Scharfetter–Gummel); exact for the equilibrium of linear drifts.
    #[default]
    Fitted,
    /// Centred while the cell Péclet number `|2Fh/D|` is at most 2, upwind beyond.
    Hybrid,
}

impl Flux {
    /// Weight multiplying `D/2h` for the upstream (`-z`) and downstream (`z`) rates.
    fn weight<T: Real>(self, z: T) -> T {
        match self {
            Flux::Fitted => bernoulli(z),
            Flux::Hybrid => (-z).max(T::one() - T::lit(0.5) * z).max(T::zero()),
        }
    }
}

/// `z / (e^z - 1)`.
fn bernoulli<T: Real>(z: T) -> T {
    if z.abs() < T::lit(1e-8) {
        T::one() - T::lit(0.5) * z
    } else {
        z / z.exp_m1()
    }
}

/// Jump rates across each interface: `(right, left)` with flux `J_k = right_k P_k - left_k P_{k+1}`.
fn interface_rates<T: Real>(spec: &ProcessSpec<T>, grid: &SpatialGrid<T>, t: T, flux: Flux) -> (Vec<T>, Vec<T>) {
    let h = grid.h();
    let d = spec.diffusion_at(t);
    let scale = d / (T::lit(2.0) * h);
    let mut right = Vec::with_capacity(grid.m - 1);
    let mut left = Vec::with_capacity(grid.m - 1);
    for k in 0..grid.m - 1 {
        let xm = grid.lo + h * (T::from_usize_lossy(k) + T::lit(0.5));
        let f = spec.drift_1d(xm, t);
        let z = T::lit(2.0) * f * h / d;
        right.push(scale * flux.weight(-z));
        left.push(scale * flux.weight(z));
    }
    (right, left)
}

fn killing_row<T: Real>(spec: &ProcessSpec<T>, grid: &SpatialGrid<T>, t: T) -> Vec<T> {
    match &spec.killing {
        None => vec![T::zero(); grid.m],
        Some(v) => (0..grid.m).map(|i| v(&[grid.x(i)], t)).collect(),
    }
}

/// Discrete forward generator `M(t)`: `dP/dt = M P` (drift, diffusion and killing).
pub fn fp_generator<T: Real>(spec: &ProcessSpec<T>, grid: &SpatialGrid<T>, t: T, flux: Flux) -> Tridiag<T> {
    let (a, c) = interface_rates(spec, grid, t, flux);
    let w = grid.weights();
    let v = killing_row(spec, grid, t);
    let m = grid.m;
    let mut lower = vec![T::zero(); m];
    let mut diag = vec![T::zero(); m];
    let mut upper = vec![T::zero(); m];
    for i in 0..m {
        let mut out = T::zero();
        if i > 0 {
            lower[i] = a[i - 1] / w[i];
            out += c[i - 1];
        }
        if i + 1 < m {
            upper[i] = c[i] / w[i];
            out += a[i];
        }
        diag[i] = -out / w[i] - v[i];
    }
    Tridiag { lower, diag, upper }
}

/// Discrete backward generator `L(t) = W⁻¹ M(t)ᵀ W`, the adjoint of [`fp_generator`].
pub fn backward_generator<T: Real>(spec: &ProcessSpec<T>, grid: &SpatialGrid<T>, t: T, flux: Flux) -> Tridiag<T> {
    let (a, c) = interface_rates(spec, grid, t, flux);
    let w = grid.weights();
    let v = killing_row(spec, grid, t);
    let m = grid.m;
    let mut lower = vec![T::zero(); m];
    let mut diag = vec![T::zero(); m];
    let mut upper = vec![T::zero(); m];
    for i in 0..m {
        let mut out = T::zero();
        if i > 0 {
            lower[i] = c[i - 1] / w[i];
            out += c[i - 1];
        }
        if i + 1 < m {
            upper[i] = a[i] / w[i];
            out += a[i];
        }
        diag[i] = -out / w[i] - v[i];
    }
    Tridiag { lower, diag, upper }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    CrankNicolson,
    Explicit,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub scheme: Scheme,
    /// Number of leading steps (in the direction of the solve) taken with backward
    /// Euler to damp the oscillations Crank–Nicolson leaves on rough data.
    pub startup_steps: usize,
    pub flux: Flux,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { scheme: Scheme::CrankNicolson, startup_steps: 0, flux: Flux::Fitted }
    }
}

#[derive(Debug, Clone)]
pub struct FpSolution<T> {
    pub field: Field<T>,
    /// Number of node values below `-1e-12` that were clipped to zero.
    pub clipped: usize,
}

fn check_spec<T: Real>(spec: &ProcessSpec<T>, time_grid: &TimeGrid<T>, grid: &SpatialGrid<T>, opts: &SolverOptions) -> Result<()> {
    if spec.dim != 1 {
        return invalid("grid solvers are one-dimensional");
    }
    let h2 = grid.h() * grid.h();
    for s in 0..time_grid.n_steps() {
        let d = spec.diffusion_at(time_grid.t(s));
        if !(d > T::zero()) {
            return invalid(format!("diffusion must be positive (got {d})"));
        }
        if opts.scheme == Scheme::Explicit && time_grid.dt(s) > h2 / d {
            return Err(Error::Stability(format!(
                "explicit step {s}: dt={} exceeds h^2/D={}",
                time_grid.dt(s),
                h2 / d
            )));
        }
    }
    Ok(())
}

/// Evolve `p0` forward over `time_grid`.
pub fn solve_fokker_planck<T: Real>(
    spec: &ProcessSpec<T>,
    p0: &[T],
    grid: &SpatialGrid<T>,
    time_grid: &TimeGrid<T>,
    opts: SolverOptions,
) -> Result<FpSolution<T>> {
    check_spec(spec, time_grid, grid, &opts)?;
    if p0.len() != grid.m {
        return invalid("initial density has the wrong length");
    }
    let floor = T::lit(-1e-12);
    if p0.iter().any(|&p| p < floor || !p.is_finite()) {
        return invalid("initial density must be finite and non-negative");
    }
    let half = T::lit(0.5);
    let mut values = Vec::with_capacity(time_grid.nodes().len());
    values.push(p0.to_vec());
    let mut clipped = 0;
    let mut m_prev = fp_generator(spec, grid, time_grid.t(0), opts.flux);
    for s in 0..time_grid.n_steps() {
        let dt = time_grid.dt(s);
        let m_next = fp_generator(spec, grid, time_grid.t(s + 1), opts.flux);
        let cur = &values[s];
        let mut next = match opts.scheme {
            Scheme::Explicit => m_prev.shifted(dt).apply(cur),
            Scheme::CrankNicolson if s < opts.startup_steps => m_next.shifted(-dt).solve(cur),
            Scheme::CrankNicolson => m_next.shifted(-half * dt).solve(&m_prev.shifted(half * dt).apply(cur)),
        };
        for p in next.iter_mut() {
            if *p < floor {
                *p = T::zero();
                clipped += 1;
            }
        }
        values.push(next);
        m_prev = m_next;
    }
    let field = Field::new(*grid, time_grid.clone(), FieldKind::Density, values)?;
    Ok(FpSolution { field, clipped })
}

/// Solve backward from `terminal` at `t_end`; row `s` holds `J(·, t_s)`.
pub fn solve_backward_kolmogorov<T: Real>(
    spec: &ProcessSpec<T>,
    terminal: &[T],
    grid: &SpatialGrid<T>,
    time_grid: &TimeGrid<T>,
    opts: SolverOptions,
) -> Result<Field<T>> {
    check_spec(spec, time_grid, grid, &opts)?;
    if terminal.len() != grid.m {
        return invalid("terminal values have the wrong length");
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return invalid("terminal values must be finite");
    }
    let n = time_grid.n_steps();
    let half = T::lit(0.5);
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); n + 1];
    rows[n] = terminal.to_vec();
    let mut l_next = backward_generator(spec, grid, time_grid.t(n), opts.flux);
    for (k, s) in (0..n).rev().enumerate() {
        let dt = time_grid.dt(s);
        let l_prev = backward_generator(spec, grid, time_grid.t(s), opts.flux);
        let cur = &rows[s + 1];
        rows[s] = match opts.scheme {
            Scheme::Explicit => l_prev.shifted(dt).apply(cur),
            Scheme::CrankNicolson if k < opts.startup_steps => l_next.shifted(-dt).solve(cur),
            Scheme::CrankNicolson => l_prev.shifted(half * dt).apply(&l_next.shifted(-half * dt).solve(cur)),
        };
        l_next = l_prev;
    }
    Field::new(*grid, time_grid.clone(), FieldKind::Chi, rows)
}

/// Crank–Nicolson residual of the forward equation for the step `s -> s+1` of a field
/// whose rows follow `labels`: `(P^{s+1} - P^s)/Δt - ½(M_{s+1} P^{s+1} + M_s P^s)`.
pub fn fp_step_residual<T: Real>(
    spec: &ProcessSpec<T>,
    grid: &SpatialGrid<T>,
    labels: &TimeGrid<T>,
    values: &[Vec<T>],
    s: usize,
    flux: Flux,
) -> Vec<T> {
    let dt = labels.dt(s);
    let a = fp_generator(spec, grid, labels.t(s), flux).apply(&values[s]);
    let b = fp_generator(spec, grid, labels.t(s + 1), flux).apply(&values[s + 1]);
    let half = T::lit(0.5);
    (0..grid.m)
        .map(|i| (values[s + 1][i] - values[s][i]) / dt - half * (a[i] + b[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn gauss(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (std::f64::consts::TAU * v).sqrt()
    }

    #[test]
    fn grid_validation() {
        assert!(SpatialGrid::<f64>::new(1.0, 0.0, 10).is_err());
        assert!(SpatialGrid::<f64>::new(0.0, 1.0, 2).is_err());
        let g = SpatialGrid::<f64>::standard();
        assert!((g.h() - 0.02).abs() < 1e-15);
        assert_eq!(g.x(800), 8.0);
    }

    #[test]
    fn tridiagonal_solve_inverts_apply() {
        let t = Tridiag::<f64> { lower: vec![0.0, 1.0, 0.5, 0.2], diag: vec![4.0, 5.0, 6.0, 3.0], upper: vec![1.0, 2.0, 0.3, 0.0] };
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let y = t.apply(&x);
        let back = t.solve(&y);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn generators_are_adjoint() {
        let spec = ProcessSpec::new(1, Arc::new(|x: &[f64], _, o: &mut [f64]| o[0] = -x[0].powi(3) + 0.3), Arc::new(|_| 0.7))
            .with_killing(Arc::new(|x: &[f64], _| 0.1 * x[0] * x[0]));
        let g = SpatialGrid::<f64>::new(-3.0, 3.0, 41).unwrap();
        let m = fp_generator(&spec, &g, 0.0, Flux::Fitted);
        let l = backward_generator(&spec, &g, 0.0, Flux::Fitted);
        let a: Vec<f64> = g.nodes().iter().map(|x| x.sin()).collect();
        let b: Vec<f64> = g.nodes().iter().map(|x| (-x * x).exp()).collect();
        let lhs = g.pairing(&a, &m.apply(&b));
        let rhs = g.pairing(&l.apply(&a), &b);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn explicit_mode_checks_stability() {
        let spec = ProcessSpec::pure_diffusion(1, 1.0);
        let g = SpatialGrid::<f64>::new(-4.0, 4.0, 81).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.0, 0.1, 5).unwrap();
        let p0: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, 0.0, 1.0)).collect();
        let opts = SolverOptions { scheme: Scheme::Explicit, ..Default::default() };
        assert!(matches!(solve_fokker_planck(&spec, &p0, &g, &tg, opts), Err(Error::Stability(_))));
        let tg = TimeGrid::<f64>::uniform(0.0, 0.1, 20).unwrap();
        assert!(solve_fokker_planck(&spec, &p0, &g, &tg, opts).is_ok());
    }

    #[test]
    fn explicit_and_cn_agree() {
        let spec = ProcessSpec::ou(1, 1.0, 1.0);
        let g = SpatialGrid::<f64>::new(-6.0, 6.0, 121).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.0, 0.5, 2000).unwrap();
        let p0: Vec<f64> = g.nodes().iter().map(|&x| gauss(x, 1.0, 0.3)).collect();
        let a = solve_fokker_planck(&spec, &p0, &g, &tg, SolverOptions::default()).unwrap();
        let b = solve_fokker_planck(&spec, &p0, &g, &tg, SolverOptions { scheme: Scheme::Explicit, ..Default::default() }).unwrap();
        let gap = a.field.values[2000].iter().zip(&b.field.values[2000]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-4, "{gap}");
    }

    #[test]
    fn unit_terminal_and_constant_killing() {
        let g = SpatialGrid::<f64>::new(-5.0, 5.0, 101).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.0, 1.0, 50).unwrap();
        let ones = vec![1.0; g.m];
        let spec = ProcessSpec::ou(1, 1.0, 1.0);
        let j = solve_backward_kolmogorov(&spec, &ones, &g, &tg, SolverOptions::default()).unwrap();
        assert!(j.values[0].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let killed = spec.with_killing(Arc::new(|_, _| 0.4));
        let j = solve_backward_kolmogorov(&killed, &ones, &g, &tg, SolverOptions::default()).unwrap();
        // CN on a constant decay: rational approximation of exp(-0.4)
        let r: f64 = ((1.0 - 0.004) / (1.0 + 0.004f64)).powi(50);
        assert!(j.values[0].iter().all(|&v| (v - r).abs() < 1e-12));
        assert!((r - (-0.4f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn relabel_is_involution() {
        let g = SpatialGrid::<f64>::new(-1.0, 1.0, 5).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.1, 0.7, 3).unwrap();
        let f = Field::from_fn(g, tg, FieldKind::Chi, |x, t| x + 10.0 * t);
        let r = reverse_time_relabel(&f);
        assert_eq!(r.values[0], f.values[3]);
        assert!((r.times()[0] - 0.1).abs() < 1e-15);
        assert_eq!(reverse_time_relabel(&r), f);
    }

    #[test]
    fn log_transform_round_trip() {
        let g = SpatialGrid::<f64>::new(-1.0, 1.0, 5).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.0, 1.0, 2).unwrap();
        let chi = Field::from_fn(g, tg, FieldKind::Chi, |x, t| 1.0 + x * x + t);
        let lam = chi.log_transform().unwrap();
        assert_eq!(lam.kind, FieldKind::Lambda);
        let back = lam.log_transform().unwrap();
        for (a, b) in chi.values.iter().flatten().zip(back.values.iter().flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn csv_export_shape() {
        let g = SpatialGrid::<f64>::new(-1.0, 1.0, 4).unwrap();
        let tg = TimeGrid::<f64>::uniform(0.0, 1.0, 2).unwrap();
        let f = Field::from_fn(g, tg, FieldKind::Density, |x, t| x * t + 0.1);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 4);
        let meta = serde_json::to_value(f.meta()).unwrap();
        assert_eq!(meta["m"], 4);
    }

    #[test]
    fn f32_solver_runs() {
        let spec = ProcessSpec::<f32>::pure_diffusion(1, 1.0);
        let g = SpatialGrid::new(-6.0f32, 6.0, 121).unwrap();
        let tg = TimeGrid::uniform(0.0f32, 0.5, 50).unwrap();
        let p0: Vec<f32> = g.nodes().iter().map(|&x| gauss(x as f64, 0.0, 0.5) as f32).collect();
        let sol = solve_fokker_planck(&spec, &p0, &g, &tg, SolverOptions::default()).unwrap();
        assert!((sol.field.mass(50) - sol.field.mass(0)).abs() < 1e-5);
    }
}
