//! Generation by Euler–Maruyama integration of the reverse SDE
//! `dx = (-F(x,t) + D(t) S(x,t)) dt' + sqrt(D(t)) dW`, run from `T` down to a small
//! cut-off time `ε_min` with an exact or learned score.
//!
//! Times keep their forward labels. Reverse step `k` moves the state from node `k+1` to
//! node `k` and evaluates the drift at node `k+1`.

use crate::analytic_kernels::GaussianDensity;
use crate::error::{invalid, Error, Result};
use crate::exact_mixture::{GaussianMixture, MixturePath};
use crate::schedule::TimeGrid;
use crate::score_training::ScoreModel;
use crate::sde_sim::{PathRng, ProcessSpec, StateSampler, DEFAULT_EXPLOSION_BOUND};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

pub type ScoreFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// Where the score comes from.
#[derive(Clone)]
pub enum ScoreSource<'a> {
    /// Closed-form marginals of an evolved mixture.
    Exact(&'a MixturePath<f64>),
    Model(&'a ScoreModel),
    Custom(ScoreFn),
}

/// Law of the states at `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    /// `N(0, I)`, the stationary law of the OU process with `D = β`.
    StandardNormal,
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// The exact marginal at `T`; needs an exact score source.
    Evolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    /// Stop after this many reverse steps; `Some(0)` returns the initial draws.
    pub max_steps: Option<usize>,
    pub explosion_bound: f64,
    /// Grid nodes at which to keep a copy of every state.
    pub snapshot_nodes: Vec<usize>,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { max_steps: None, explosion_bound: DEFAULT_EXPLOSION_BOUND, snapshot_nodes: Vec::new() }
    }
}

/// Uniform reverse grid on `[ε_min, T]` with `ε_min = 1e-3 T` unless given.
pub fn reverse_grid(t_end: f64, n_steps: usize, eps_min: Option<f64>) -> Result<TimeGrid<f64>> {
    let eps = eps_min.unwrap_or(1e-3 * t_end);
    if !(eps > 0.0 && eps < t_end) {
        return invalid(format!("cut-off time {eps} must lie in (0, {t_end})"));
    }
    TimeGrid::uniform(eps, t_end, n_steps)
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub node: usize,
    pub t: f64,
    pub states: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GenerationRun {
    pub grid: TimeGrid<f64>,
    pub seed: u64,
    pub dim: usize,
    pub n_samples: usize,
    /// Reverse steps actually taken.
    pub steps_taken: usize,
    /// Forward time label of the returned states.
    pub t_final: f64,
    /// `samples[p * dim + k]`.
    pub samples: Vec<f64>,
    /// Ordered from the earliest reverse time (largest `t`) on.
    pub snapshots: Vec<Snapshot>,
}

impl GenerationRun {
    /// Coordinate `k` of every sample.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.samples.iter().skip(k).step_by(self.dim).copied().collect()
    }

    pub fn snapshot(&self, node: usize) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.node == node)
    }

    /// One row per sample: `sample_id, x_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_states(out, self.dim, &self.samples)
    }

    /// One row per sample per snapshot: `sample_id, t, x_0..`.
    pub fn write_snapshots_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sample_id".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|k| format!("x_{k}")));
        w.write_record(&header)?;
        for snap in &self.snapshots {
            for (p, x) in snap.states.chunks(self.dim).enumerate() {
                let mut row = vec![p.to_string(), snap.t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn write_states<W: Write>(out: W, dim: usize, states: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..dim).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for (p, x) in states.chunks(dim).enumerate() {
        let mut row = vec![p.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Score evaluator resolved against the sampler grid.
enum Resolved<'a> {
    /// Mixture at every grid node.
    Exact(Vec<GaussianMixture<f64>>),
    Model(&'a ScoreModel),
    Custom(ScoreFn),
}

impl Resolved<'_> {
    fn score(&self, x: &[f64], node: usize, t: f64) -> Result<Vec<f64>> {
        match self {
            Resolved::Exact(snaps) => Ok(snaps[node].score(x)),
            Resolved::Model(m) => m.eval(x, t),
            Resolved::Custom(f) => Ok(f(x, t)),
        }
    }
}

/// Reverse-time Euler–Maruyama from `grid.t_end()` towards `grid.t_start()`.
pub fn sample_reverse(
    score: &ScoreSource,
    spec_forward: &ProcessSpec<f64>,
    init: &InitialLaw,
    grid: &TimeGrid<f64>,
    n_samples: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<GenerationRun> {
    if n_samples == 0 {
        return invalid("need at least one sample");
    }
    let d = spec_forward.dim;
    let n = grid.n_steps();
    if opts.snapshot_nodes.iter().any(|&s| s > n) {
        return invalid(format!("snapshot node beyond {n}"));
    }
    let resolved = match score {
        ScoreSource::Exact(path) => {
            if path.is_reversed() {
                return invalid("exact score source needs forward-labelled marginals");
            }
            if path.snapshot(0).dim() != d {
                return invalid("mixture and process dimensions differ");
            }
            Resolved::Exact(grid.nodes().iter().map(|&t| path.at_time(t)).collect::<Result<_>>()?)
        }
        ScoreSource::Model(m) => {
            if m.dim != d {
                return invalid("model and process dimensions differ");
            }
            Resolved::Model(m)
        }
        ScoreSource::Custom(f) => Resolved::Custom(f.clone()),
    };
    let initial: Box<dyn StateSampler<f64>> = match init {
        InitialLaw::StandardNormal => Box::new(GaussianDensity { mean: vec![0.0; d], var: vec![1.0; d] }),
        InitialLaw::Gaussian { mean, var } => {
            if mean.len() != d || var.len() != d || var.iter().any(|v| !(*v > 0.0)) {
                return invalid("initial Gaussian needs dimension-matched mean and positive variances");
            }
            Box::new(GaussianDensity { mean: mean.clone(), var: var.clone() })
        }
        InitialLaw::Evolved => match &resolved {
            Resolved::Exact(snaps) => Box::new(snaps[n].clone()),
            _ => return invalid("the evolved initial law needs an exact score source"),
        },
    };
    let steps = opts.max_steps.map_or(n, |m| m.min(n));
    let mut snap_nodes: Vec<usize> = opts.snapshot_nodes.iter().copied().filter(|&s| s >= n - steps).collect();
    snap_nodes.sort_unstable_by(|a, b| b.cmp(a));
    snap_nodes.dedup();
    let bound = opts.explosion_bound;
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_samples)
        .into_par_iter()
        .map(|p| {
            let mut x = vec![0.0; d];
            initial.draw(&mut PathRng::auxiliary(seed, p as u64), &mut x);
            let mut rng = PathRng::increments(seed, p as u64);
            let mut kept = Vec::with_capacity(snap_nodes.len() * d);
            let mut next_snap = 0;
            let mut keep = |node: usize, x: &[f64], kept: &mut Vec<f64>| {
                if next_snap < snap_nodes.len() && snap_nodes[next_snap] == node {
                    kept.extend_from_slice(x);
                    next_snap += 1;
                }
            };
            keep(n, &x, &mut kept);
            for k in (n - steps..n).rev() {
                let t = grid.t(k + 1);
                let dt = grid.dt(k);
                let f = spec_forward.drift_at(&x, t);
                let s = resolved.score(&x, k + 1, t)?;
                let diff = spec_forward.diffusion_at(t);
                let drift: Vec<f64> = f.iter().zip(&s).map(|(fi, si)| -fi + diff * si).collect();
                if drift.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteDrift { x: x.clone(), t });
                }
                let sd = (diff * dt).sqrt();
                for i in 0..d {
                    x[i] += drift[i] * dt + sd * rng.normal();
                }
                if x.iter().any(|v| !(v.abs() <= bound)) {
                    return Err(Error::Explosion { path: p, t: grid.t(k), bound, x });
                }
                keep(k, &x, &mut kept);
            }
            Ok((x, kept))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(n_samples * d);
    let mut snapshots: Vec<Snapshot> = snap_nodes
        .iter()
        .map(|&node| Snapshot { node, t: grid.t(node), states: Vec::with_capacity(n_samples * d) })
        .collect();
    for (x, kept) in per_path {
        samples.extend_from_slice(&x);
        for (r, snap) in snapshots.iter_mut().enumerate() {
            snap.states.extend_from_slice(&kept[r * d..(r + 1) * d]);
        }
    }
    Ok(GenerationRun {
        grid: grid.clone(),
        seed,
        dim: d,
        n_samples,
        steps_taken: steps,
        t_final: grid.t(n - steps),
        samples,
        snapshots,
    })
}
