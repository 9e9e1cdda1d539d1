use difflab::action::delta_action;
use difflab::divergence::DensityPath;
use difflab::exact_mixture::{evolve_mixture, EvolveKind};
use difflab::sampler::{reverse_grid, sample_reverse, InitialLaw, SamplerOptions, ScoreFn, ScoreSource};
use difflab::schedule::ddpm_schedule;
use difflab::sde_sim::{PathRng, StateSampler};
use difflab::stats::{histogram_l1, ks_two_sample, mean_var};
use difflab::{GaussianMixture, MixturePath, NoiseSchedule, ProcessSpec, SpatialGrid, TimeGrid};
use std::sync::Arc;

fn vp() -> NoiseSchedule {
    ddpm_schedule(Arc::new(|t: f64| 0.1 + 19.9 * t), TimeGrid::uniform(0.0, 1.0, 1000).unwrap()).unwrap()
}

fn direct_draws(mix: &GaussianMixture, n: usize, seed: u64) -> Vec<f64> {
    let mut x = [0.0];
    (0..n)
        .map(|i| {
            mix.draw(&mut PathRng::auxiliary(seed, i as u64), &mut x);
            x[0]
        })
        .collect()
}

fn two_bump_path() -> (NoiseSchedule, MixturePath, ProcessSpec) {
    let sched = vp();
    let path = evolve_mixture(&GaussianMixture::two_bump(), &sched, EvolveKind::Ou).unwrap();
    let spec = ProcessSpec::from_schedule(1, &sched);
    (sched, path, spec)
}

#[test]
fn exact_score_regenerates_the_two_bump_mixture() {
    let (_, path, spec) = two_bump_path();
    let grid = reverse_grid(1.0, 500, None).unwrap();
    let run = sample_reverse(&ScoreSource::Exact(&path), &spec, &InitialLaw::StandardNormal, &grid, 100_000, 5, &SamplerOptions::default())
        .unwrap();
    let mix = GaussianMixture::two_bump();
    let (m, v) = mean_var(&run.samples);
    let tv = mix.variance()[0];
    let (_, p) = ks_two_sample(&run.samples, &direct_draws(&mix, 100_000, 77));
    println!("mean {m:.4} var {v:.4} (target {tv:.4}) ks p {p:.3}");
    assert!(m.abs() < 0.02);
    assert!((v - tv).abs() < 0.03 * tv);
    assert!(p > 0.01);
}

#[test]
fn intermediate_samples_follow_the_exact_marginals() {
    let (_, path, spec) = two_bump_path();
    let grid = reverse_grid(1.0, 500, None).unwrap();
    let nodes = vec![400, 250, 100, 25];
    let opts = SamplerOptions { snapshot_nodes: nodes.clone(), ..Default::default() };
    let run = sample_reverse(&ScoreSource::Exact(&path), &spec, &InitialLaw::StandardNormal, &grid, 100_000, 6, &opts).unwrap();
    for &s in &nodes {
        let snap = run.snapshot(s).unwrap();
        let exact = path.at_time(snap.t).unwrap();
        let l1 = histogram_l1(&snap.states, |x| exact.pdf(&[x]), -4.0, 4.0, 100);
        println!("t {:.3} L1 {l1:.4}", snap.t);
        assert!(l1 < 0.03, "t={} L1={l1}", snap.t);
    }
}

#[test]
fn terminal_moment_error_is_first_order_in_the_step() {
    let sched = NoiseSchedule::constant(1.0, 1.0, TimeGrid::uniform(0.0, 2.0, 200).unwrap()).unwrap();
    let mix = GaussianMixture::scalar(&[1.0], &[1.0], &[0.05]).unwrap();
    let path = evolve_mixture(&mix, &sched, EvolveKind::Ou).unwrap();
    let spec = ProcessSpec::from_schedule(1, &sched);
    let mut errs = Vec::new();
    for n in [8, 16, 32] {
        let grid = reverse_grid(2.0, n, Some(0.05)).unwrap();
        let target = path.at_time(0.05).unwrap();
        let second = target.variance()[0] + target.mean()[0].powi(2);
        let run = sample_reverse(&ScoreSource::Exact(&path), &spec, &InitialLaw::Evolved, &grid, 1_000_000, 2, &SamplerOptions::default())
            .unwrap();
        let m2 = run.samples.iter().map(|x| x * x).sum::<f64>() / run.samples.len() as f64;
        errs.push((m2 - second).abs());
    }
    println!("second-moment errors {errs:?}");
    for w in errs.windows(2) {
        let r = w[0] / w[1];
        assert!((1.6..2.6).contains(&r), "ratio {r}");
    }
}

#[test]
fn generation_quality_degrades_with_score_error() {
    let (sched, path, spec) = two_bump_path();
    let grid = reverse_grid(1.0, 300, None).unwrap();
    let direct = direct_draws(&GaussianMixture::two_bump(), 50_000, 78);
    let space = SpatialGrid::new(-8.0, 8.0, 801).unwrap();
    let sub = sched.grid().sub_grid(1, sched.grid().n_steps()).unwrap();
    let diff = |t: f64| sched.diffusion(t);
    let bump = |x: f64, t: f64| (-(x - 0.5) * (x - 0.5)).exp() / (0.1 + t);
    let snaps: Arc<Vec<(f64, GaussianMixture)>> =
        Arc::new(grid.nodes().iter().map(|&t| (t, path.at_time(t).unwrap())).collect());
    let mut last = (-1.0, -1.0);
    for c in [0.0, 0.02, 0.05, 0.1, 0.2] {
        let score = |x: f64, t: f64| path.at_time(t).unwrap().score(&[x])[0] + c * bump(x, t);
        let da = delta_action(&score, DensityPath::Mixture(&path, &space), &diff, &sub).unwrap();
        let snaps = snaps.clone();
        let f: ScoreFn = Arc::new(move |x: &[f64], t: f64| {
            let k = snaps.partition_point(|(tk, _)| *tk < t);
            vec![snaps[k].1.score(x)[0] + c * bump(x[0], t)]
        });
        let run = sample_reverse(&ScoreSource::Custom(f), &spec, &InitialLaw::StandardNormal, &grid, 50_000, 8, &SamplerOptions::default())
            .unwrap();
        let (d, _) = ks_two_sample(&run.samples, &direct);
        println!("c {c} delta_action {da:.4e} ks {d:.4}");
        assert!(da > last.0);
        assert!(d > last.1 - 0.005, "ks {d} after {}", last.1);
        last = (da, d);
    }
}

#[test]
fn trained_model_is_accepted_as_a_score_source() {
    let (sched, _, spec) = two_bump_path();
    let model = difflab::score_training::ScoreModel::rbf_1d(-4.0, 4.0, 9, 4, sched.grid().t(1), 1.0).unwrap();
    let grid = reverse_grid(1.0, 100, Some(sched.grid().t(1))).unwrap();
    let run = sample_reverse(&ScoreSource::Model(&model), &spec, &InitialLaw::StandardNormal, &grid, 1000, 1, &SamplerOptions::default())
        .unwrap();
    assert!(run.samples.iter().all(|x| x.is_finite()));
    let mut out = Vec::new();
    run.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1001);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), run.samples[0]);
}
