mod common;

use common::fixture;
use synerf::diff::{backward, check_gradients, check_gradients_with, GradCheckOptions, Supervision};
use synerf::net::EncoderVariant;
use synerf::schedule::{curriculum_weights, CurriculumConfig};
use synerf::{FeatureInputs, FieldModel, SceneMode};

fn sup<'a>(f: &'a common::Fixture, gamma: Option<&'a [f64]>) -> Supervision<'a> {
    Supervision {
        samples: &f.samples,
        targets: &f.targets,
        background: [1.0, 1.0, 1.0],
        gamma,
        weights: f.weights,
    }
}

#[test]
fn static_model_passes_gradcheck() {
    let f = fixture(SceneMode::Static3D, 1, 2, 4);
    let report = check_gradients(&f.model, &sup(&f, None), &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn dynamic_model_with_curriculum_passes_gradcheck() {
    let f = fixture(SceneMode::Dynamic4D, 2, 3, 5);
    let gamma = curriculum_weights(&CurriculumConfig::new(0.0, 10.0, 2).unwrap(), 7.3);
    let report = check_gradients(&f.model, &sup(&f, Some(&gamma)), &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:#?}");
}

#[test]
fn every_encoder_variant_and_input_mode_passes() {
    for (k, variant) in [EncoderVariant::Type1, EncoderVariant::Type2, EncoderVariant::Type3]
        .into_iter()
        .enumerate()
    {
        let mut f = fixture(SceneMode::Static3D, 10 + k as u64, 2, 4);
        let cfg = synerf::ModelConfig {
            variant,
            view_dependent: k == 1,
            extra_layers: k,
            inputs: [FeatureInputs::Both, FeatureInputs::PlanesOnly, FeatureInputs::CoordsOnly][k],
            ..f.model.config.clone()
        };
        f.model = FieldModel::new(cfg, 3).unwrap();
        let report = check_gradients(&f.model, &sup(&f, None), &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{variant:?}: {report:#?}");
    }
}

#[test]
fn corrupted_gradient_is_reported_by_group() {
    let f = fixture(SceneMode::Static3D, 4, 2, 4);
    let s = sup(&f, None);
    let report = check_gradients_with(&f.model, &s, &GradCheckOptions::default(), |m| {
        let (_, mut g) = backward(m, &s)?;
        g.mlp.color[1].bias[0] *= 1.5;
        Ok(g)
    })
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.failing(), vec!["color.1.bias"]);
}

#[test]
fn empty_group_selection_passes_vacuously() {
    let f = fixture(SceneMode::Static3D, 5, 1, 2);
    let opts = GradCheckOptions {
        groups: Some(Vec::new()),
        ..Default::default()
    };
    let report = check_gradients(&f.model, &sup(&f, None), &opts).unwrap();
    assert!(report.passed);
    assert!(report.groups.is_empty());
}

#[test]
fn gradient_is_linear_in_laplacian_weight() {
    let mut f = fixture(SceneMode::Dynamic4D, 6, 3, 4);
    let grad_with = |f: &common::Fixture, l1: f64| {
        let mut w = f.weights;
        w.lambda1 = l1;
        let s = Supervision { weights: w, ..sup(f, None) };
        backward(&f.model, &s).unwrap().1
    };
    let a = grad_with(&f, 0.1);
    let b = grad_with(&f, 0.2);
    f.weights.lambda3 = 0.0;
    let zero = grad_with(&f, 0.0);
    let lap = grad_with(&f, 0.1);
    for ((ga, gb), (g0, gl)) in a.groups().iter().zip(b.groups()).zip(zero.groups().iter().zip(lap.groups())) {
        for i in 0..ga.2.len() {
            let diff = gb.2[i] - ga.2[i];
            let pure = gl.2[i] - g0.2[i];
            assert!((diff - pure).abs() < 1e-12, "{} [{i}]", ga.0);
        }
    }
}

#[test]
fn perfect_fit_without_regularizers_has_zero_gradient() {
    let mut f = fixture(SceneMode::Static3D, 7, 4, 6);
    let rendered = synerf::diff::render_batch(&f.model, &f.samples, None, [1.0; 3]).unwrap();
    f.targets = rendered.rgb;
    f.weights = synerf::loss::LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };
    let (terms, g) = backward(&f.model, &sup(&f, None)).unwrap();
    assert_eq!(terms.total, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn gradients_are_deterministic() {
    let f = fixture(SceneMode::Static3D, 8, 200, 8);
    let (la, ga) = backward(&f.model, &sup(&f, None)).unwrap();
    let (lb, gb) = backward(&f.model, &sup(&f, None)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}
