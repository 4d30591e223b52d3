mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synerf::checkpoint;
use synerf::data::{
    bernoulli_mask, orbit_cameras, plaid, strided_ids, synthesize, uniform_times, AnalyticScene, SceneDataset,
    Split, DYNAMIC_STRIDE, STATIC_SPARSE_IDS,
};
use synerf::diff::{check_gradients, GradCheckOptions, Supervision};
use synerf::grid::FeatureGrid;
use synerf::loss::{l1_norm, laplacian};
use synerf::metrics::masked_psnr;
use synerf::net::EncoderVariant;
use synerf::optim::{evaluate, train, LogRecord, TrainConfig, TrainHooks, TrainState};
use synerf::render::{composite_full, Aabb};
use synerf::schedule::{curriculum_weights, default_upsample_steps, CurriculumConfig};
use synerf::task2d::{avg_magnitude_spectrum, fit2d, heldout_psnr, render_partial, Engagement, Regression2DConfig};
use synerf::{FeatureInputs, PlaneSet, SceneMode};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mode = if seed % 2 == 0 { SceneMode::Static3D } else { SceneMode::Dynamic4D };
        let f = common::fixture(mode, 100 + seed, 3, 5);
        let gamma = (seed % 4 == 1).then(|| curriculum_weights(&CurriculumConfig::new(0.0, 10.0, 2).unwrap(), 6.5));
        let sup = Supervision {
            samples: &f.samples,
            targets: &f.targets,
            background: [1.0; 3],
            gamma: gamma.as_deref(),
            weights: f.weights,
        };
        let report = check_gradients(&f.model, &sup, &GradCheckOptions::default()).map_err(|e| e.to_string())?;
        if !report.passed {
            return Err(format!("model {seed} ({mode:?}) failing groups {:?}", report.failing()));
        }
        worst = worst.max(report.max_rel_err());
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("20 models, max relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn naive_composite(sigmas: &[f64], colors: &[f64], deltas: &[f64], bg: [f64; 3]) -> ([f64; 3], Vec<f64>, Vec<f64>) {
    let mut trans = Vec::new();
    let mut weights = Vec::new();
    let mut rgb = [0.0; 3];
    for k in 0..sigmas.len() {
        let mut depth = 0.0;
        for l in 0..k {
            depth += sigmas[l] * deltas[l];
        }
        let t = (-depth).exp();
        let w = t * (1.0 - (-sigmas[k] * deltas[k]).exp());
        for ch in 0..3 {
            rgb[ch] += w * colors[3 * k + ch];
        }
        trans.push(t);
        weights.push(w);
    }
    let acc: f64 = weights.iter().sum();
    for ch in 0..3 {
        rgb[ch] += (1.0 - acc) * bg[ch];
    }
    (rgb, weights, trans)
}

fn compositing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for ray in 0..10_000 {
        let n = rng.random_range(1..=64);
        let scale = [0.1, 1.0, 10.0, 1000.0][ray % 4];
        let sigmas: Vec<f64> = (0..n).map(|_| scale * rng.random::<f64>()).collect();
        let colors: Vec<f64> = (0..3 * n).map(|_| rng.random()).collect();
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
        let bg = [rng.random(), rng.random(), rng.random()];
        let c = composite_full(&sigmas, &colors, &deltas, bg).map_err(|e| e.to_string())?;
        let (rgb, weights, trans) = naive_composite(&sigmas, &colors, &deltas, bg);
        if trans[0] != 1.0 {
            return Err(format!("ray {ray}: T1 = {}", trans[0]));
        }
        let sum: f64 = c.weights.iter().sum();
        if !(0.0..=1.0).contains(&sum) || !(0.0..=1.0).contains(&c.acc) {
            return Err(format!("ray {ray}: weight sum {sum}"));
        }
        for ch in 0..3 {
            worst = worst.max((c.rgb[ch] - rgb[ch]).abs());
        }
        for (a, b) in c.weights.iter().zip(&weights) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("10000 rays, max deviation {worst:.2e}, T1 = 1, weight sums in [0, 1]"))
}

fn curriculum() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        PtConfig {
            cases: 1000,
            failure_persistence: None,
            ..PtConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strategy = (0.0f64..5000.0, 1.0f64..5000.0, 1usize..=64);
    runner
        .run(&strategy, |(t_start, span, channels)| {
            let cfg = CurriculumConfig::new(t_start, t_start + span, channels).unwrap();
            let t_end = t_start + span;
            let bound = std::f64::consts::PI * channels as f64 / (2.0 * span) + 1e-9;
            prop_assert!(curriculum_weights(&cfg, t_start).iter().all(|&g| g == 0.0));
            prop_assert!(curriculum_weights(&cfg, t_start - 7.0).iter().all(|&g| g == 0.0));
            prop_assert!(curriculum_weights(&cfg, t_end).iter().all(|&g| g == 1.0));
            prop_assert!(curriculum_weights(&cfg, t_end + 7.0).iter().all(|&g| g == 1.0));
            let steps = 200usize;
            let mut prev = curriculum_weights(&cfg, t_start - 1.0);
            for i in 0..=steps {
                let t = t_start - 1.0 + (span + 2.0) * i as f64 / steps as f64;
                let g = curriculum_weights(&cfg, t);
                prop_assert!(g.windows(2).all(|w| w[0] >= w[1]), "not non-increasing in j at t={}", t);
                prop_assert!(g.iter().zip(&prev).all(|(a, b)| a >= b), "not monotone in t at t={}", t);
                let next = curriculum_weights(&cfg, t + 1.0);
                let step = g.iter().zip(&next).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max);
                prop_assert!(step <= bound, "step {} > {} at t={}", step, bound, t);
                prev = g;
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 random configs: monotone, ordered, bounded steps, saturated outside window".into())
}

fn regularizers() -> Outcome {
    let grid = FeatureGrid::<f64>::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    let lap = laplacian(&grid);
    let constant = laplacian(&FeatureGrid::<f64>::filled(3, 5, 4, 2.5));
    let signed = FeatureGrid::from_vec(1, 2, 2, vec![-1.0, 2.0, 0.0, -3.0]).map_err(|e| e.to_string())?;
    let zero_plane = FeatureGrid::<f64>::zeros(1, 2, 2);
    let zero_vec = FeatureGrid::<f64>::zeros(1, 1, 2);
    let ps = PlaneSet::from_grids(
        SceneMode::Static3D,
        [signed, zero_plane.clone(), zero_plane],
        [zero_vec.clone(), zero_vec.clone(), zero_vec],
    )
    .map_err(|e| e.to_string())?;
    let (m, v) = l1_norm(&ps);
    check(
        lap == 10.0 && m == 6.0 && v == 0.0 && constant == 0.0,
        format!("laplacian {lap}, L1 {m}, constant-grid laplacian {constant}"),
    )
}

fn regression_2d() -> Outcome {
    let start = Instant::now();
    let cfg = Regression2DConfig::default();
    let n = cfg.plane_res;
    let target = plaid(n);
    let mask = bernoulli_mask(n * n, cfg.keep_fraction, 7);
    let (model, _) = fit2d::<f32>(&cfg, &target, &mask).map_err(|e| e.to_string())?;
    let full = render_partial(&model, n, n, Engagement::Full).map_err(|e| e.to_string())?;
    let coord = render_partial(&model, n, n, Engagement::CoordOnly).map_err(|e| e.to_string())?;
    let held = heldout_psnr(&full, &target, &mask).map_err(|e| e.to_string())?;
    let visible = masked_psnr(&full, &target, &mask).map_err(|e| e.to_string())?;
    let (sc, sf) = (
        avg_magnitude_spectrum(&coord).map_err(|e| e.to_string())?,
        avg_magnitude_spectrum(&full).map_err(|e| e.to_string())?,
    );
    let elapsed = start.elapsed();
    let msg = format!(
        "{n}x{n} plaid, {} iters: masked PSNR {held:.2} dB (visible {visible:.2}), spectrum coord-only {sc:.5} < full {sf:.5}, {:.1}s",
        cfg.iterations,
        elapsed.as_secs_f64()
    );
    check(cfg.iterations <= 2000 && held > 25.0 && sc < sf && elapsed < Duration::from_secs(300), msg)
}

fn desk_config(mode: SceneMode, iters: usize, variant: EncoderVariant, inputs: FeatureInputs) -> TrainConfig {
    let mut cfg = TrainConfig {
        batch_size: 256,
        samples_per_ray: 48,
        eval_samples: 96,
        bbox: Aabb::cube(1.0),
        log_interval: iters / 5,
        seed: 0,
        ..Default::default()
    };
    cfg.model.mode = mode;
    cfg.model.channels = 8;
    cfg.model.hidden = 32;
    cfg.model.color_hidden = 32;
    cfg.model.grid_init_scale = 0.5;
    cfg.model.initial_res = 16;
    cfg.model.variant = variant;
    cfg.model.inputs = inputs;
    cfg.curriculum = CurriculumConfig::disabled(8);
    cfg.schedule.total_iters = iters;
    cfg.schedule.lr_mlp = 0.01;
    cfg.schedule.upsample_steps = default_upsample_steps(iters, 16, 64);
    if mode == SceneMode::Dynamic4D {
        cfg.model.time_res = 8;
        cfg.lambda2 = 2.5;
        cfg.schedule.lambda3_start = 1e-5;
        cfg.schedule.lambda3_end = 1e-5;
    }
    cfg
}

fn fit_and_score(cfg: &TrainConfig, data: &SceneDataset, heldout: &SceneDataset) -> Result<(f64, Vec<LogRecord>), String> {
    let mut st = TrainState::<f32>::new(cfg).map_err(|e| e.to_string())?;
    train(&mut st, data, None, cfg, &mut TrainHooks::default()).map_err(|e| e.to_string())?;
    let report = evaluate(&st.model, heldout, cfg, cfg.schedule.total_iters).map_err(|e| e.to_string())?;
    Ok((report.mean_psnr, st.log))
}

fn held_out_cameras() -> Vec<synerf::render::Camera> {
    orbit_cameras(4, 4.0, 64, 0.69, 1.1)
}

fn synergy_vs_planes() -> Outcome {
    let start = Instant::now();
    let scene = AnalyticScene::three_spheres();
    let data = synthesize(&scene, orbit_cameras(8, 4.0, 64, 0.69, 0.0), None, 256, Split::Train)
        .map_err(|e| e.to_string())?;
    let held = synthesize(&scene, held_out_cameras(), None, 256, Split::Test).map_err(|e| e.to_string())?;
    let iters = 5000;
    let ours = desk_config(SceneMode::Static3D, iters, EncoderVariant::Synergy, FeatureInputs::Both);
    let planes = desk_config(SceneMode::Static3D, iters, EncoderVariant::Type2, FeatureInputs::PlanesOnly);
    let (p_ours, _) = fit_and_score(&ours, &data, &held)?;
    let (p_planes, _) = fit_and_score(&planes, &data, &held)?;
    let elapsed = start.elapsed();
    check(
        data.len() == 8 && p_ours >= p_planes + 0.5 && elapsed < Duration::from_secs(1200),
        format!(
            "8 views, {iters} iters: synergy {p_ours:.2} dB vs plane-only {p_planes:.2} dB (margin {:+.2}), {:.0}s",
            p_ours - p_planes,
            elapsed.as_secs_f64()
        ),
    )
}

fn dynamic_smoke() -> Outcome {
    let scene = AnalyticScene::moving_sphere();
    let data = synthesize(
        &scene,
        orbit_cameras(15, 4.0, 64, 0.69, 0.0),
        Some(uniform_times(15)),
        256,
        Split::Train,
    )
    .map_err(|e| e.to_string())?;
    let held = synthesize(&scene, held_out_cameras(), Some(vec![0.1, 0.4, 0.6, 0.9]), 256, Split::Test)
        .map_err(|e| e.to_string())?;
    let iters = 3000;
    let ours = desk_config(SceneMode::Dynamic4D, iters, EncoderVariant::Synergy, FeatureInputs::Both);
    let coords = desk_config(SceneMode::Dynamic4D, iters, EncoderVariant::Synergy, FeatureInputs::CoordsOnly);
    let (p_ours, log) = fit_and_score(&ours, &data, &held)?;
    let (p_coords, _) = fit_and_score(&coords, &data, &held)?;
    let finite = log.iter().all(|r| r.loss.total.is_finite());
    check(
        finite && !log.is_empty() && p_ours > p_coords,
        format!("15 views, {iters} iters: finite loss {finite}, held-out {p_ours:.2} dB vs coordinate-only {p_coords:.2} dB"),
    )
}

fn reproducibility() -> Outcome {
    let scene = AnalyticScene::moving_sphere();
    let data = synthesize(&scene, orbit_cameras(5, 4.0, 16, 0.69, 0.0), Some(uniform_times(5)), 64, Split::Train)
        .map_err(|e| e.to_string())?;
    let held = synthesize(&scene, orbit_cameras(1, 4.0, 16, 0.69, 1.1), Some(vec![0.5]), 64, Split::Test)
        .map_err(|e| e.to_string())?;
    let mut cfg = desk_config(SceneMode::Dynamic4D, 60, EncoderVariant::Synergy, FeatureInputs::Both);
    cfg.model.initial_res = 8;
    cfg.schedule.upsample_steps = vec![(20, 12), (40, 16)];
    cfg.curriculum = CurriculumConfig::new(5.0, 40.0, 8).map_err(|e| e.to_string())?;
    cfg.batch_size = 64;
    cfg.samples_per_ray = 16;
    cfg.eval_samples = 16;
    cfg.log_interval = 10;
    let run = |stop: Option<usize>| -> Result<TrainState<f32>, String> {
        let mut st = TrainState::new(&cfg).map_err(|e| e.to_string())?;
        let mut hooks = TrainHooks {
            stop_at: stop,
            ..Default::default()
        };
        train(&mut st, &data, Some(&held), &cfg, &mut hooks).map_err(|e| e.to_string())?;
        Ok(st)
    };
    let a = run(None)?;
    let b = run(None)?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.synf");
    checkpoint::save(&path, &run(Some(31))?, &cfg).map_err(|e| e.to_string())?;
    let (mut resumed, cfg2) = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
    train(&mut resumed, &data, Some(&held), &cfg2, &mut TrainHooks::default()).map_err(|e| e.to_string())?;
    let same_logs = a.log == b.log && a.model == b.model;
    let same_resume = resumed.log == a.log && resumed.model == a.model && resumed.adam == a.adam;
    check(
        same_logs && same_resume && a.log.len() == 6,
        format!("identical logs {same_logs}, resume from iteration 31 matches uninterrupted run {same_resume}"),
    )
}

fn protocol() -> Outcome {
    let ids_ok = STATIC_SPARSE_IDS == [26, 86, 2, 55, 75, 93, 16, 73, 8];
    let dyn_ids = strided_ids(150, DYNAMIC_STRIDE);
    let dyn_ok = dyn_ids.len() == 25 && dyn_ids.iter().enumerate().all(|(i, &v)| v == 6 * i);
    let scene = AnalyticScene::three_spheres();
    let all = synthesize(&scene, orbit_cameras(100, 4.0, 2, 0.69, 0.0), None, 4, Split::Train)
        .map_err(|e| e.to_string())?;
    let sparse = all.sparse_protocol().map_err(|e| e.to_string())?;
    let picked = sparse
        .cameras
        .iter()
        .zip(STATIC_SPARSE_IDS)
        .all(|(c, id)| c.c2w == all.cameras[id].c2w);
    let moving = AnalyticScene::moving_sphere();
    let dyn_all = synthesize(&moving, orbit_cameras(150, 4.0, 2, 0.69, 0.0), Some(uniform_times(150)), 4, Split::Train)
        .map_err(|e| e.to_string())?;
    let dyn_sparse = dyn_all.sparse_protocol().map_err(|e| e.to_string())?;
    let times_ok = (0..25).all(|i| dyn_sparse.time(i) == dyn_all.time(6 * i));
    check(
        ids_ok && dyn_ok && picked && sparse.len() == 9 && dyn_sparse.len() == 25 && times_ok,
        format!("static ids {:?}, dynamic {} views stride {DYNAMIC_STRIDE} from 0", STATIC_SPARSE_IDS, dyn_sparse.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("volume rendering oracle", compositing),
        ("curriculum invariants", curriculum),
        ("regularizer hand cases", regularizers),
        ("2D regression", regression_2d),
        ("synergy beats plane-only", synergy_vs_planes),
        ("dynamic smoke", dynamic_smoke),
        ("reproducibility", reproducibility),
        ("view protocol", protocol),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {id} ({name}): {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {msg} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
