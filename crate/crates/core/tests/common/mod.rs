#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synerf::loss::LossWeights;
use synerf::render::{Aabb, Ray, RaySampleBatch};
use synerf::{FieldModel, ModelConfig, SceneMode};

pub fn tiny_config(mode: SceneMode) -> ModelConfig {
    ModelConfig {
        mode,
        channels: 2,
        initial_res: 4,
        time_res: 3,
        hidden: 8,
        color_hidden: 8,
        grid_init_scale: 0.5,
        ..Default::default()
    }
}

pub struct Fixture {
    pub model: FieldModel<f64>,
    pub samples: RaySampleBatch,
    pub targets: Vec<f64>,
    pub weights: LossWeights,
}

/// Random rays aimed through the unit box from a sphere of radius 2.
pub fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<Ray> {
    (0..n)
        .map(|_| {
            let mut o = [0.0f64; 3];
            for v in &mut o {
                *v = rng.random_range(-1.0..1.0);
            }
            let norm = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt().max(1e-3);
            let origin = o.map(|v| 2.0 * v / norm);
            let target: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.4..0.4));
            let d: [f64; 3] = std::array::from_fn(|k| target[k] - origin[k]);
            let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            Ray {
                origin,
                direction: d.map(|v| v / dn),
            }
        })
        .collect()
}

pub fn fixture(mode: SceneMode, seed: u64, n_rays: usize, n_samples: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FieldModel::<f64>::new(tiny_config(mode), seed).unwrap();
    let rays = random_rays(&mut rng, n_rays);
    let times = (mode == SceneMode::Dynamic4D).then(|| (0..n_rays).map(|_| rng.random_range(0.0..1.0)).collect());
    let samples = RaySampleBatch::build(rays, times, n_samples, 1.0, 3.0, &Aabb::cube(1.0), true, &mut rng);
    let targets = (0..3 * n_rays).map(|_| rng.random_range(0.0..1.0)).collect();
    Fixture {
        model,
        samples,
        targets,
        weights: LossWeights {
            lambda1: 0.05,
            lambda2: 1.5,
            lambda3: 0.01,
        },
    }
}
