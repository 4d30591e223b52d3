use synerf::data::{bernoulli_mask, plaid};
use synerf::metrics::{masked_psnr, psnr};
use synerf::task2d::{fit2d, heldout_psnr, render_partial, Engagement, Regression2DConfig};

fn config(size: usize, iterations: usize) -> Regression2DConfig {
    Regression2DConfig {
        plane_res: size,
        iterations,
        batch_size: 1024,
        ..Default::default()
    }
}

#[test]
fn fully_observed_target_is_fit_closely() {
    let target = plaid(64);
    let mask = vec![true; 64 * 64];
    let (m, _) = fit2d::<f32>(&config(64, 2000), &target, &mask).unwrap();
    let out = render_partial(&m, 64, 64, Engagement::Full).unwrap();
    let p = psnr(&out, &target).unwrap();
    assert!(p > 30.0, "train PSNR {p}");
}

#[test]
fn loss_trends_down_over_windows() {
    let target = plaid(64);
    let mask = bernoulli_mask(64 * 64, 0.5, 1);
    let (_, log) = fit2d::<f32>(&config(64, 1000), &target, &mask).unwrap();
    assert_eq!(log.losses.len(), 10);
    for w in log.losses.windows(2) {
        assert!(w[1] <= w[0] * 1.25, "{:?}", log.losses);
    }
    assert!(log.losses[9] < 0.1 * log.losses[0], "{:?}", log.losses);
}

#[test]
fn heldout_pixels_generalize_and_coordinates_carry_low_frequencies() {
    let cfg = Regression2DConfig::default();
    let n = cfg.plane_res;
    let target = plaid(n);
    let mask = bernoulli_mask(n * n, cfg.keep_fraction, 2);
    let (m, _) = fit2d::<f32>(&cfg, &target, &mask).unwrap();
    let full = render_partial(&m, n, n, Engagement::Full).unwrap();
    let visible = masked_psnr(&full, &target, &mask).unwrap();
    let held = heldout_psnr(&full, &target, &mask).unwrap();
    assert!(held > visible - 3.0, "visible {visible} held {held}");
    let coord = render_partial(&m, n, n, Engagement::CoordOnly).unwrap();
    let (a, b) = (
        synerf::task2d::avg_magnitude_spectrum(&coord).unwrap(),
        synerf::task2d::avg_magnitude_spectrum(&full).unwrap(),
    );
    assert!(a < b, "coord-only {a} full {b}");
}

#[test]
fn mismatched_mask_is_rejected() {
    let target = plaid(8);
    assert!(fit2d::<f32>(&config(8, 1), &target, &[true; 10]).is_err());
}
