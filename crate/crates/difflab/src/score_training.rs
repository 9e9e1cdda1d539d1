//! Parametric score models, the denoising score-matching and DDPM noise-prediction
//! objectives, and a minibatch optimizer.
//!
//! Two model kinds are provided. The radial-basis model is linear in its parameters, so
//! its optimum is available from the normal equations. The MLP has two tanh hidden
//! layers and hand-written reverse-mode gradients.

use crate::action::delta_action;
use crate::divergence::DensityPath;
use crate::analytic_kernels::ou_affine;
use crate::error::{invalid, Error, Result};
use crate::exact_mixture::MixturePath;
use crate::pde_grid::SpatialGrid;
use crate::schedule::NoiseSchedule;
use crate::sde_sim::PathRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Batch elements handled by one task in gradient accumulation; partial sums are added in
/// chunk order so results do not depend on the thread count.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `S_j = Σ_{k,l} θ φ_k(x) ψ_l(t) + Σ_l (a_l x_j + c_l) ψ_l(t)` with Gaussian bumps
    /// `φ_k` in space and `ψ_l` in `ln t`.
    RbfBasis { centers: Vec<Vec<f64>>, bandwidth: f64, time_centers: Vec<f64>, time_bandwidth: f64 },
    /// Input `(x, (ln t - c)/r, t/t_max)`, tanh hidden layers, output divided by `sqrt(t)`.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub dim: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub arch: Architecture,
    pub theta: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

impl ScoreModel {
    /// One-dimensional radial-basis model with `n_space` centres on `[lo, hi]` and
    /// `n_time` centres in `ln t` over the time range; all coefficients zero.
    pub fn rbf_1d(lo: f64, hi: f64, n_space: usize, n_time: usize, t_min: f64, t_max: f64) -> Result<Self> {
        if n_space == 0 || n_time == 0 || !(hi > lo) {
            return invalid("rbf model needs at least one centre and hi > lo");
        }
        check_range(t_min, t_max)?;
        let centers: Vec<Vec<f64>> = linspace(lo, hi, n_space).into_iter().map(|c| vec![c]).collect();
        let bandwidth = if n_space > 1 { (hi - lo) / (n_space - 1) as f64 } else { hi - lo };
        let time_centers = linspace(t_min.ln(), t_max.ln(), n_time);
        let time_bandwidth = if n_time > 1 { (t_max / t_min).ln() / (n_time - 1) as f64 } else { 1.0 };
        let arch = Architecture::RbfBasis { centers, bandwidth, time_centers, time_bandwidth };
        Self::with_arch(1, t_min, t_max, arch, None)
    }

    /// MLP with the given hidden widths and Glorot-scaled uniform initial weights.
    pub fn mlp(dim: usize, hidden: &[usize], t_min: f64, t_max: f64, seed: u64) -> Result<Self> {
        if dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return invalid("mlp needs a positive dimension and non-empty hidden layers");
        }
        check_range(t_min, t_max)?;
        Self::with_arch(dim, t_min, t_max, Architecture::Mlp { hidden: hidden.to_vec() }, Some(seed))
    }

    fn with_arch(dim: usize, t_min: f64, t_max: f64, arch: Architecture, seed: Option<u64>) -> Result<Self> {
        let mut model = Self { dim, t_min, t_max, arch, theta: Vec::new() };
        model.theta = vec![0.0; model.n_params()];
        if let Some(seed) = seed {
            let mut rng = PathRng::auxiliary(seed, 0);
            let sizes = model.layer_sizes();
            let mut off = 0;
            for w in sizes.windows(2) {
                let (n_in, n_out) = (w[0], w[1]);
                let a = (6.0 / (n_in + n_out) as f64).sqrt();
                for v in &mut model.theta[off..off + n_in * n_out] {
                    *v = a * (2.0 * rng.uniform() - 1.0);
                }
                off += n_in * n_out + n_out;
            }
        }
        Ok(model)
    }

    pub fn n_params(&self) -> usize {
        match &self.arch {
            Architecture::RbfBasis { centers, time_centers, .. } => {
                self.dim * (centers.len() * time_centers.len() + 2 * time_centers.len())
            }
            Architecture::Mlp { .. } => self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
        }
    }

    fn layer_sizes(&self) -> Vec<usize> {
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut s = vec![self.dim + 2];
                s.extend_from_slice(hidden);
                s.push(self.dim);
                s
            }
            Architecture::RbfBasis { .. } => Vec::new(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.arch, Architecture::RbfBasis { .. })
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return invalid(format!("state has dimension {}, model expects {}", x.len(), self.dim));
        }
        let slack = 1e-12;
        if !(t >= self.t_min * (1.0 - slack) && t <= self.t_max * (1.0 + slack)) {
            return invalid(format!("t={t} outside the model range [{}, {}]", self.t_min, self.t_max));
        }
        Ok(())
    }

    /// Score vector `S_θ(x, t)`.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        Ok(match &self.arch {
            Architecture::RbfBasis { .. } => {
                let (phi, psi) = self.rbf_parts(x, t);
                (0..self.dim).map(|j| dot(&self.rbf_row(&phi, &psi, x[j]), self.rbf_block(j))).collect()
            }
            Architecture::Mlp { .. } => self.mlp_forward(x, t).output,
        })
    }

    /// Add `Σ_j cot_j ∂S_j/∂θ` to `grad`.
    pub fn accumulate_vjp(&self, x: &[f64], t: f64, cot: &[f64], grad: &mut [f64]) {
        match &self.arch {
            Architecture::RbfBasis { .. } => {
                let (phi, psi) = self.rbf_parts(x, t);
                let width = self.n_params() / self.dim;
                for j in 0..self.dim {
                    let row = self.rbf_row(&phi, &psi, x[j]);
                    for (g, r) in grad[j * width..(j + 1) * width].iter_mut().zip(&row) {
                        *g += cot[j] * r;
                    }
                }
            }
            Architecture::Mlp { .. } => {
                let fw = self.mlp_forward(x, t);
                self.mlp_backward(&fw, cot, grad);
            }
        }
    }

    /// Evaluate and add the vector-Jacobian product in one pass; returns the score.
    fn eval_and_vjp(&self, x: &[f64], t: f64, cot_of: impl FnOnce(&[f64]) -> Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        match &self.arch {
            Architecture::RbfBasis { .. } => {
                let (phi, psi) = self.rbf_parts(x, t);
                let width = self.n_params() / self.dim;
                let rows: Vec<Vec<f64>> = (0..self.dim).map(|j| self.rbf_row(&phi, &psi, x[j])).collect();
                let out: Vec<f64> = rows.iter().enumerate().map(|(j, r)| dot(r, self.rbf_block(j))).collect();
                let cot = cot_of(&out);
                for (j, row) in rows.iter().enumerate() {
                    for (g, r) in grad[j * width..(j + 1) * width].iter_mut().zip(row) {
                        *g += cot[j] * r;
                    }
                }
                out
            }
            Architecture::Mlp { .. } => {
                let fw = self.mlp_forward(x, t);
                let cot = cot_of(&fw.output);
                self.mlp_backward(&fw, &cot, grad);
                fw.output
            }
        }
    }

    fn rbf_parts(&self, x: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let Architecture::RbfBasis { centers, bandwidth, time_centers, time_bandwidth } = &self.arch else {
            unreachable!("rbf helper on a non-rbf model")
        };
        let phi = centers
            .iter()
            .map(|c| {
                let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                (-r2 / (2.0 * bandwidth * bandwidth)).exp()
            })
            .collect();
        let lt = t.ln();
        let psi = time_centers
            .iter()
            .map(|c| (-(lt - c) * (lt - c) / (2.0 * time_bandwidth * time_bandwidth)).exp())
            .collect();
        (phi, psi)
    }

    fn rbf_row(&self, phi: &[f64], psi: &[f64], xj: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(phi.len() * psi.len() + 2 * psi.len());
        for p in phi {
            row.extend(psi.iter().map(|q| p * q));
        }
        row.extend(psi.iter().map(|q| xj * q));
        row.extend_from_slice(psi);
        row
    }

    fn rbf_block(&self, j: usize) -> &[f64] {
        let width = self.n_params() / self.dim;
        &self.theta[j * width..(j + 1) * width]
    }

    /// Design-matrix row of output `j` (the gradient of `S_j`).
    pub fn rbf_features(&self, x: &[f64], t: f64, j: usize) -> Result<Vec<f64>> {
        if !self.is_linear() {
            return invalid("features exist only for the rbf model");
        }
        self.check_input(x, t)?;
        let (phi, psi) = self.rbf_parts(x, t);
        Ok(self.rbf_row(&phi, &psi, x[j]))
    }

    fn mlp_input(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mid = 0.5 * (self.t_min.ln() + self.t_max.ln());
        let half = (0.5 * (self.t_max.ln() - self.t_min.ln())).max(1e-12);
        let mut v = x.to_vec();
        v.push((t.ln() - mid) / half);
        v.push(t / self.t_max);
        v
    }

    fn mlp_forward(&self, x: &[f64], t: f64) -> MlpTrace {
        let sizes = self.layer_sizes();
        let mut acts = vec![self.mlp_input(x, t)];
        let mut off = 0;
        let n_layers = sizes.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &self.theta[off..off + n_in * n_out];
            let b = &self.theta[off + n_in * n_out..off + n_in * n_out + n_out];
            let a = acts.last().expect("input layer");
            let z: Vec<f64> = (0..n_out).map(|r| b[r] + dot(&w[r * n_in..(r + 1) * n_in], a)).collect();
            acts.push(if l + 1 < n_layers { z.iter().map(|v| v.tanh()).collect() } else { z });
            off += n_in * n_out + n_out;
        }
        let scale = 1.0 / t.sqrt();
        let output = acts.last().expect("output layer").iter().map(|v| v * scale).collect();
        MlpTrace { acts, scale, output }
    }

    fn mlp_backward(&self, fw: &MlpTrace, cot: &[f64], grad: &mut [f64]) {
        let sizes = self.layer_sizes();
        let n_layers = sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += sizes[l] * sizes[l + 1] + sizes[l + 1];
        }
        let mut delta: Vec<f64> = cot.iter().map(|c| c * fw.scale).collect();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let o = offsets[l];
            let a = &fw.acts[l];
            for r in 0..n_out {
                let row = &mut grad[o + r * n_in..o + (r + 1) * n_in];
                for (g, ai) in row.iter_mut().zip(a) {
                    *g += delta[r] * ai;
                }
                grad[o + n_in * n_out + r] += delta[r];
            }
            if l > 0 {
                let w = &self.theta[o..o + n_in * n_out];
                delta = (0..n_in)
                    .map(|c| {
                        let back: f64 = (0..n_out).map(|r| w[r * n_in + c] * delta[r]).sum();
                        back * (1.0 - a[c] * a[c])
                    })
                    .collect();
            }
        }
    }

    /// Save as a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return invalid(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", ck.version));
        }
        if ck.model.theta.len() != ck.model.n_params() {
            return invalid("checkpoint parameter count does not match its architecture");
        }
        Ok(ck.model)
    }
}

struct MlpTrace {
    acts: Vec<Vec<f64>>,
    scale: f64,
    output: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ScoreModel,
}

fn check_range(t_min: f64, t_max: f64) -> Result<()> {
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return invalid(format!("need 0 < t_min < t_max (got {t_min}, {t_max})"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Training data: `len` points of dimension `dim`, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl DataSet {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return invalid("data set must be non-empty with a whole number of points");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("data points must be finite");
        }
        Ok(Self { dim, values })
    }

    pub fn from_sampler(sampler: &dyn crate::sde_sim::StateSampler<f64>, n: usize, seed: u64) -> Result<Self> {
        let dim = sampler.dim();
        let mut rng = PathRng::auxiliary(seed, u64::MAX);
        let mut values = vec![0.0; n * dim];
        for chunk in values.chunks_mut(dim) {
            sampler.draw(&mut rng, chunk);
        }
        Self::new(dim, values)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Which Gaussian kernel produces the noised states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisingKernel {
    /// Closed-form OU kernel of the continuous process.
    #[default]
    Continuum,
    /// Product of the discrete DDPM steps: `sqrt(ᾱ_s) x + sqrt(1-ᾱ_s) ε`.
    Finite,
}

/// Kernel `(scale, variance)` from node 0 to every node of a schedule.
#[derive(Debug, Clone)]
pub struct NoisingTable {
    pub kind: NoisingKernel,
    pub scale: Vec<f64>,
    pub var: Vec<f64>,
}

impl NoisingTable {
    pub fn new(schedule: &NoiseSchedule<f64>, kind: NoisingKernel) -> Result<Self> {
        let g = schedule.grid();
        let n = g.n_steps();
        let mut scale = vec![1.0];
        let mut var = vec![0.0];
        for s in 1..=n {
            let (a, v) = match kind {
                NoisingKernel::Continuum => ou_affine(g.t_start(), g.t(s), schedule)?,
                NoisingKernel::Finite => {
                    let ab = schedule.alpha_bar()[s];
                    (ab.sqrt(), 1.0 - ab)
                }
            };
            if !(v > 0.0) {
                return invalid(format!("kernel variance vanishes at node {s}"));
            }
            scale.push(a);
            var.push(v);
        }
        Ok(Self { kind, scale, var })
    }
}

/// Noised training pairs. Element `b` has `state = scale·data + sqrt(var)·eps`.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub dim: usize,
    pub data: Vec<f64>,
    pub steps: Vec<usize>,
    pub eps: Vec<f64>,
    pub states: Vec<f64>,
    pub scale: Vec<f64>,
    pub var: Vec<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Fresh batch: data index, node `s ∈ {1..n-1}` and `ε` drawn independently. With
    /// `antithetic`, consecutive elements share `(x_d, s)` and use `±ε`.
    pub fn sample(data: &DataSet, table: &NoisingTable, size: usize, antithetic: bool, rng: &mut PathRng) -> Result<Self> {
        let n = table.var.len() - 1;
        if n < 2 {
            return invalid("schedule needs at least two steps for training");
        }
        if data.is_empty() || size == 0 {
            return invalid("need data and a positive batch size");
        }
        let d = data.dim;
        let mut b = Self {
            dim: d,
            data: Vec::with_capacity(size * d),
            steps: Vec::with_capacity(size),
            eps: Vec::with_capacity(size * d),
            states: Vec::with_capacity(size * d),
            scale: Vec::with_capacity(size),
            var: Vec::with_capacity(size),
        };
        let (mut i, mut s) = (0, 1);
        for k in 0..size {
            let mirror = antithetic && k % 2 == 1;
            if !mirror {
                i = ((rng.uniform() * data.len() as f64) as usize).min(data.len() - 1);
                s = 1 + ((rng.uniform() * (n - 1) as f64) as usize).min(n - 2);
            }
            let (a, v) = (table.scale[s], table.var[s]);
            let sd = v.sqrt();
            for (c, &x) in data.point(i).iter().enumerate() {
                let e = if mirror { -b.eps[(k - 1) * d + c] } else { rng.normal() };
                b.data.push(x);
                b.eps.push(e);
                b.states.push(a * x + sd * e);
            }
            b.steps.push(s);
            b.scale.push(a);
            b.var.push(v);
        }
        Ok(b)
    }

    pub fn state(&self, b: usize) -> &[f64] {
        &self.states[b * self.dim..(b + 1) * self.dim]
    }

    pub fn noise(&self, b: usize) -> &[f64] {
        &self.eps[b * self.dim..(b + 1) * self.dim]
    }

    /// Largest deviation of a stored state from `scale·data + sqrt(var)·eps`.
    pub fn reproduction_error(&self) -> f64 {
        (0..self.len())
            .flat_map(|b| {
                (0..self.dim).map(move |k| {
                    let i = b * self.dim + k;
                    (self.states[i] - (self.scale[b] * self.data[i] + self.var[b].sqrt() * self.eps[i])).abs()
                })
            })
            .fold(0.0, f64::max)
    }
}

impl TrainingBatch {
    /// The batch as a weighted regression onto the conditional score `-ε/sqrt(var)`,
    /// the explicit form of [`dsm_loss`].
    pub fn regression_samples(&self, schedule: &NoiseSchedule<f64>, weighting: Weighting) -> Vec<RegressionSample> {
        let g = schedule.grid();
        (0..self.len())
            .map(|b| {
                let sd = self.var[b].sqrt();
                RegressionSample {
                    x: self.state(b).to_vec(),
                    t: g.t(self.steps[b]),
                    target: self.noise(b).iter().map(|e| -e / sd).collect(),
                    weight: node_weight(schedule, self.steps[b], self.var[b], weighting),
                }
            })
            .collect()
    }
}

/// Per-node weight of the score-matching objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `D(t_s) Δt_s`.
    #[default]
    DiffusionStep,
    /// `D(t_s) Δt_s` times the kernel variance, the noise-conditional weighting.
    NoiseVariance,
}

fn node_weight(schedule: &NoiseSchedule<f64>, s: usize, var: f64, weighting: Weighting) -> f64 {
    let g = schedule.grid();
    let w = schedule.diffusion(g.t(s)) * g.dt(s);
    match weighting {
        Weighting::DiffusionStep => w,
        Weighting::NoiseVariance => w * var,
    }
}

fn check_batch(model: &ScoreModel, batch: &TrainingBatch, schedule: &NoiseSchedule<f64>) -> Result<()> {
    let n = schedule.grid().n_steps();
    if batch.dim != model.dim {
        return invalid("batch and model dimensions differ");
    }
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if let Some(&s) = batch.steps.iter().find(|&&s| s == 0 || s >= n) {
        return invalid(format!("step {s} outside 1..{}; the conditional score is undefined at zero noise", n - 1));
    }
    Ok(())
}

/// Sum over chunks of `f(b, grad)`, with gradient and value reduced in chunk order.
fn reduce_batch(
    n_params: usize,
    len: usize,
    f: impl Fn(usize, &mut [f64]) -> f64 + Sync,
) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; n_params];
            let mut v = 0.0;
            for b in c * CHUNK..((c + 1) * CHUNK).min(len) {
                v += f(b, &mut g);
            }
            (v, g)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for (v, g) in parts {
        total += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (total, grad)
}

/// Denoising score-matching loss and its parameter gradient. With `s` uniform on
/// `{1..n-1}`, `(n-1)/B Σ_b ½ w_s ‖S(x_b, t_s) + ε_b/sqrt(var_b)‖²` is an unbiased
/// estimate of `Σ_s ½ w_s E‖S - ∂ ln P(x_s|x_d)‖²`.
pub fn dsm_loss(
    model: &ScoreModel,
    batch: &TrainingBatch,
    schedule: &NoiseSchedule<f64>,
    weighting: Weighting,
) -> Result<(f64, Vec<f64>)> {
    check_batch(model, batch, schedule)?;
    let g = schedule.grid();
    let factor = (g.n_steps() - 1) as f64 / batch.len() as f64;
    let (total, grad) = reduce_batch(model.n_params(), batch.len(), |b, grad| {
        let s = batch.steps[b];
        let w = factor * node_weight(schedule, s, batch.var[b], weighting);
        let sd = batch.var[b].sqrt();
        let eps = batch.noise(b);
        let mut value = 0.0;
        model.eval_and_vjp(
            batch.state(b),
            g.t(s),
            |out| {
                let r: Vec<f64> = out.iter().zip(eps).map(|(o, e)| o + e / sd).collect();
                value = 0.5 * w * dot(&r, &r);
                r.iter().map(|v| w * v).collect()
            },
            grad,
        );
        value
    });
    if !total.is_finite() {
        return Err(Error::NonFiniteDrift { x: Vec::new(), t: f64::NAN });
    }
    Ok((total, grad))
}

/// DDPM noise-prediction loss with `ε_θ = -sqrt(1-ᾱ) S_θ`:
/// `Σ_s β_s/(2(1-ᾱ_s)) E‖ε - ε_θ‖²`, estimated as in [`dsm_loss`].
pub fn ddpm_loss(model: &ScoreModel, batch: &TrainingBatch, schedule: &NoiseSchedule<f64>) -> Result<(f64, Vec<f64>)> {
    check_batch(model, batch, schedule)?;
    let g = schedule.grid();
    let factor = (g.n_steps() - 1) as f64 / batch.len() as f64;
    let (total, grad) = reduce_batch(model.n_params(), batch.len(), |b, grad| {
        let s = batch.steps[b];
        let v = batch.var[b];
        let sd = v.sqrt();
        let w = factor * schedule.beta_step()[s] / (2.0 * v);
        let eps = batch.noise(b);
        let mut value = 0.0;
        model.eval_and_vjp(
            batch.state(b),
            g.t(s),
            |out| {
                // ε - ε_θ = ε + sqrt(1-ᾱ) S
                let r: Vec<f64> = out.iter().zip(eps).map(|(o, e)| e + sd * o).collect();
                value = w * dot(&r, &r);
                r.iter().map(|x| 2.0 * w * sd * x).collect()
            },
            grad,
        );
        value
    });
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Momentum { mu: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Dsm,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of the first (cosine decay).
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub objective: Objective,
    pub weighting: Weighting,
    pub noising: NoisingKernel,
    /// Pair each draw with its mirrored noise `-ε`.
    pub antithetic: bool,
    /// Abort once a batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: 1e-2,
            final_lr_fraction: 1e-2,
            batch_size: 512,
            steps: 2000,
            seed: 0,
            eval_every: 100,
            objective: Objective::Dsm,
            weighting: Weighting::DiffusionStep,
            noising: NoisingKernel::Continuum,
            antithetic: true,
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, m: &str| Err(Error::Config { field: format!("train.{f}"), message: m.into() });
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return field("learning_rate", "must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return field("final_lr_fraction", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return field("batch_size", "must be positive");
        }
        if self.eval_every == 0 {
            return field("eval_every", "must be positive");
        }
        if !(self.divergence_factor > 1.0) {
            return field("divergence_factor", "must exceed 1");
        }
        Ok(())
    }

    fn lr(&self, step: usize) -> f64 {
        let frac = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// Exact reference used to monitor training in one dimension.
pub struct ScoreOracle<'a> {
    /// Exact marginals on the nodes of the training schedule.
    pub path: &'a MixturePath<f64>,
    pub space: SpatialGrid<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub delta_action: Option<f64>,
}

pub fn write_metrics_jsonl<W: Write>(log: &[MetricRecord], mut out: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Score error and `ΔA` of a one-dimensional model against the oracle, over the training
/// nodes `1..n-1`. The error is `sqrt(Σ_s w_s E_P|S - ∂ ln P|² / Σ_s w_s)` with
/// `w_s = D(t_s) Δt_s`.
pub fn oracle_metrics(model: &ScoreModel, schedule: &NoiseSchedule<f64>, oracle: &ScoreOracle) -> Result<(f64, f64)> {
    if model.dim != 1 {
        return invalid("oracle metrics are one-dimensional");
    }
    let g = schedule.grid();
    let n = g.n_steps();
    let sub = g.sub_grid(1, n)?;
    let diff = |t: f64| schedule.diffusion(t);
    let score = |x: f64, t: f64| model.eval(&[x], t).map(|v| v[0]).unwrap_or(f64::NAN);
    let da = delta_action(&score, DensityPath::Mixture(oracle.path, &oracle.space), &diff, &sub)?;
    let weights: f64 = (1..n).map(|s| diff(g.t(s)) * g.dt(s)).sum();
    Ok(((2.0 * da / weights).sqrt(), da))
}

struct OptimizerState {
    kind: Optimizer,
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl OptimizerState {
    fn new(kind: Optimizer, p: usize) -> Self {
        Self { kind, m1: vec![0.0; p], m2: vec![0.0; p] }
    }

    fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, step: usize) {
        match self.kind {
            Optimizer::Adam { beta1, beta2, eps } => {
                let k = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
                for i in 0..theta.len() {
                    self.m1[i] = beta1 * self.m1[i] + (1.0 - beta1) * grad[i];
                    self.m2[i] = beta2 * self.m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= lr * (self.m1[i] / c1) / ((self.m2[i] / c2).sqrt() + eps);
                }
            }
            Optimizer::Momentum { mu } => {
                for i in 0..theta.len() {
                    self.m1[i] = mu * self.m1[i] + grad[i];
                    theta[i] -= lr * self.m1[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoreModel,
    pub log: Vec<MetricRecord>,
}

/// Minibatch training with fresh `(x_d, s, ε)` draws at every step.
pub fn train(
    model: &ScoreModel,
    data: &DataSet,
    schedule: &NoiseSchedule<f64>,
    cfg: &TrainConfig,
    oracle: Option<&ScoreOracle>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return invalid("empty data set");
    }
    if data.dim != model.dim {
        return invalid("data and model dimensions differ");
    }
    let table = NoisingTable::new(schedule, cfg.noising)?;
    let mut model = model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, model.n_params());
    let mut log = Vec::new();
    let mut initial = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = PathRng::auxiliary(cfg.seed, step as u64);
        let batch = TrainingBatch::sample(data, &table, cfg.batch_size, cfg.antithetic, &mut rng)?;
        let (loss, grad) = match cfg.objective {
            Objective::Dsm => dsm_loss(&model, &batch, schedule, cfg.weighting)?,
            Objective::Ddpm => ddpm_loss(&model, &batch, schedule)?,
        };
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > cfg.divergence_factor * initial {
            return Err(Error::Diverged { step, loss, initial });
        }
        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let (score_err, delta_action) = match oracle {
                Some(o) => {
                    let (e, d) = oracle_metrics(&model, schedule, o)?;
                    (Some(e), Some(d))
                }
                None => (None, None),
            };
            log.push(MetricRecord { step, loss, score_err, delta_action });
        }
        opt.update(&mut model.theta, &grad, cfg.lr(step), step);
    }
    Ok(TrainOutcome { model, log })
}

/// A weighted regression sample for the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub x: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
    pub weight: f64,
}

/// Weighted least-squares coefficients of the rbf model via the normal equations.
pub fn least_squares_fit(model: &ScoreModel, samples: &[RegressionSample]) -> Result<Vec<f64>> {
    if !model.is_linear() {
        return invalid("least squares needs the rbf model");
    }
    let width = model.n_params() / model.dim;
    let mut theta = Vec::with_capacity(model.n_params());
    for j in 0..model.dim {
        let parts: Vec<(nalgebra::DMatrix<f64>, nalgebra::DVector<f64>)> = samples
            .par_chunks(256)
            .map(|chunk| {
                let mut a = nalgebra::DMatrix::<f64>::zeros(width, width);
                let mut b = nalgebra::DVector::<f64>::zeros(width);
                for smp in chunk {
                    let row = nalgebra::DVector::from_vec(model.rbf_features(&smp.x, smp.t, j)?);
                    a.syger(smp.weight, &row, &row, 1.0);
                    b.axpy(smp.weight * smp.target[j], &row, 1.0);
                }
                Ok((a, b))
            })
            .collect::<Result<_>>()?;
        let mut a = nalgebra::DMatrix::<f64>::zeros(width, width);
        let mut b = nalgebra::DVector::<f64>::zeros(width);
        for (pa, pb) in parts {
            a += pa;
            b += pb;
        }
        // lower triangle only from syger; mirror it
        a.fill_upper_triangle_with_lower_triangle();
        let ridge = 1e-12 * a.diagonal().max();
        for k in 0..width {
            a[(k, k)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(a).ok_or_else(|| Error::InvalidArgument("normal equations are singular".into()))?;
        theta.extend(chol.solve(&b).iter());
    }
    Ok(theta)
}

/// `Σ w‖S_θ - target‖² / Σ w`.
pub fn regression_residual(model: &ScoreModel, samples: &[RegressionSample]) -> Result<f64> {
    let parts: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let out = model.eval(&s.x, s.t)?;
            let e: f64 = out.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((s.weight * e, s.weight))
        })
        .collect::<Result<_>>()?;
    let (num, den) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    Ok(num / den)
}

/// `½ Σ w‖S_θ - target‖² / Σ w` over `samples` and its parameter gradient.
pub fn regression_loss(model: &ScoreModel, samples: &[RegressionSample]) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return invalid("no regression samples");
    }
    if samples.iter().any(|s| s.x.len() != model.dim || s.target.len() != model.dim) {
        return invalid("sample and model dimensions differ");
    }
    let norm: f64 = samples.iter().map(|s| s.weight).sum();
    let (total, grad) = reduce_batch(model.n_params(), samples.len(), |b, grad| {
        let smp = &samples[b];
        let w = smp.weight / norm;
        let mut value = 0.0;
        model.eval_and_vjp(
            &smp.x,
            smp.t,
            |out| {
                let r: Vec<f64> = out.iter().zip(&smp.target).map(|(o, y)| o - y).collect();
                value = 0.5 * w * dot(&r, &r);
                r.iter().map(|v| w * v).collect()
            },
            grad,
        );
        value
    });
    if !total.is_finite() {
        return Err(Error::NonFiniteDrift { x: Vec::new(), t: f64::NAN });
    }
    Ok((total, grad))
}

/// Minibatch descent on [`regression_loss`] over a fixed sample set, drawing
/// `cfg.batch_size` samples with replacement per step.
pub fn fit_regression(model: &ScoreModel, samples: &[RegressionSample], cfg: &TrainConfig) -> Result<ScoreModel> {
    cfg.validate()?;
    if samples.is_empty() {
        return invalid("no regression samples");
    }
    let mut model = model.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, model.n_params());
    let mut initial = f64::NAN;
    for step in 0..cfg.steps {
        let mut rng = PathRng::auxiliary(cfg.seed, step as u64);
        let batch: Vec<RegressionSample> = (0..cfg.batch_size)
            .map(|_| samples[((rng.uniform() * samples.len() as f64) as usize).min(samples.len() - 1)].clone())
            .collect();
        let (loss, grad) = regression_loss(&model, &batch)?;
        if step == 0 {
            initial = loss;
        }
        if loss > cfg.divergence_factor * initial {
            return Err(Error::Diverged { step, loss, initial });
        }
        opt.update(&mut model.theta, &grad, cfg.lr(step), step);
    }
    Ok(model)
}

/// Draw `(x, t_s)` from the exact marginals with node weights `D(t_s) Δt_s`, `s ∈ 1..n-1`,
/// targets the exact score.
pub fn exact_score_samples(
    path: &MixturePath<f64>,
    schedule: &NoiseSchedule<f64>,
    n: usize,
    seed: u64,
) -> Result<Vec<RegressionSample>> {
    let g = schedule.grid();
    let steps = g.n_steps();
    if steps < 2 {
        return invalid("schedule needs at least two steps");
    }
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = PathRng::auxiliary(seed, k as u64);
            let s = 1 + ((rng.uniform() * (steps - 1) as f64) as usize).min(steps - 2);
            let t = g.t(s);
            let Some(node) = path.grid.node_index(t) else {
                return invalid(format!("path has no node at t={t}"));
            };
            let snap = path.snapshot(node);
            let mut x = vec![0.0; snap.dim()];
            crate::sde_sim::StateSampler::draw(snap, &mut rng, &mut x);
            let target = snap.score(&x);
            Ok(RegressionSample { x, t, target, weight: schedule.diffusion(t) * g.dt(s) })
        })
        .collect()
}
