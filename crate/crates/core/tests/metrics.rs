mod common;

use std::fs;
use std::path::Path;

use nuigo::metrics::{evaluate_pairs, mse, psnr, ssim, PSNR_CAP_DB};
use nuigo::raster::{save_png16, Image};
use nuigo::synthesis::{ManifestEntry, SampleManifest};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(img: &Image, sigma: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| (v + sigma * rng.gen_range(-1.0f32..1.0)).clamp(0.0, 1.0))
        .collect();
    Image::new(img.height(), img.width(), data).unwrap()
}

#[test]
fn fixtures_agree_with_reference_implementation() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics");
    let expected: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    assert_eq!(expected.len(), 20);
    for e in &expected {
        let id = e["id"].as_str().unwrap();
        let a = nuigo::load_image(&dir.join(format!("{id}_a.png"))).unwrap();
        let b = nuigo::load_image(&dir.join(format!("{id}_b.png"))).unwrap();
        assert!(
            (psnr(&a, &b).unwrap() - e["psnr_db"].as_f64().unwrap()).abs() < 1e-4,
            "{id}"
        );
        assert!(
            (ssim(&a, &b).unwrap() - e["ssim"].as_f64().unwrap()).abs() < 1e-3,
            "{id}"
        );
    }
}

#[test]
fn psnr_of_constant_images_has_closed_form() {
    let a = Image::filled(16, 16, [0.5; 3]).unwrap();
    let b = Image::filled(16, 16, [0.25; 3]).unwrap();
    assert!((mse(&a, &b).unwrap() - 0.0625).abs() < 1e-12);
    assert!((psnr(&a, &b).unwrap() - 12.041199826559248).abs() < 1e-9);
}

#[test]
fn identical_images_hit_the_caps() {
    let a = common::random_image(20, 24, 3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let a = common::random_image(16, 16, 1);
    let b = common::random_image(16, 24, 2);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
}

#[test]
fn evaluation_matches_by_name_and_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, refs) = (dir.path().join("pred"), dir.path().join("ref"));
    let clean = common::random_image(16, 16, 4);
    save_png16(&refs.join("eye.png"), &clean).unwrap();
    save_png16(&pred.join("eye.png"), &noisy(&clean, 0.1, 5)).unwrap();
    save_png16(&pred.join("orphan.png"), &clean).unwrap();

    let report = evaluate_pairs(&pred, &refs, None).unwrap();
    assert_eq!(report.count(), 1);
    assert_eq!(report.scores[0].id, "eye");
    assert_eq!(report.mean_psnr, report.scores[0].psnr_db);
    assert_eq!(report.mean_ssim, report.scores[0].ssim);

    fs::remove_file(pred.join("eye.png")).unwrap();
    save_png16(&pred.join("eye_t0.3.png"), &noisy(&clean, 0.1, 5)).unwrap();
    let manifest = SampleManifest {
        root: dir.path().to_path_buf(),
        entries: vec![ManifestEntry {
            clean_id: "clean/eye.png".into(),
            degraded_id: "degraded/eye_t0.3.png".into(),
            threshold: 0.3,
            gamma: 0.2,
            seed: 0,
        }],
    };
    let via = evaluate_pairs(&pred, &refs, Some(&manifest)).unwrap();
    assert_eq!(via.count(), 1);
    assert_eq!(via.scores[0].psnr_db, report.scores[0].psnr_db);

    let csv_path = dir.path().join("r/report.csv");
    via.write_csv(&csv_path).unwrap();
    let text = fs::read_to_string(csv_path).unwrap();
    assert!(text.starts_with("id,psnr_db,ssim\neye_t0.3,"));
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn evaluation_without_any_match_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    save_png16(&dir.path().join("p/a.png"), &common::random_image(8, 8, 1)).unwrap();
    save_png16(&dir.path().join("r/b.png"), &common::random_image(8, 8, 2)).unwrap();
    assert!(evaluate_pairs(&dir.path().join("p"), &dir.path().join("r"), None).is_err());
}

fn image_strategy() -> impl Strategy<Value = Image> {
    (11usize..24, 11usize..24, any::<u64>()).prop_map(|(h, w, s)| common::random_image(h, w, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_are_symmetric_and_bounded(a in image_strategy(), seed in any::<u64>(), sigma in 0.01f32..0.5) {
        let b = noisy(&a, sigma, seed);
        let (p, s) = (psnr(&a, &b).unwrap(), ssim(&a, &b).unwrap());
        prop_assert_eq!(p, psnr(&b, &a).unwrap());
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(p > 0.0 && p <= PSNR_CAP_DB);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn more_noise_scores_lower(a in image_strategy(), seed in any::<u64>(), sigma in 0.02f32..0.2) {
        // Same noise pattern at two amplitudes, kept away from clipping.
        let base = Image::new(a.height(), a.width(), a.data().iter().map(|v| 0.25 + 0.5 * v).collect()).unwrap();
        let lo = noisy(&base, sigma, seed);
        let hi = noisy(&base, 2.0 * sigma, seed);
        prop_assert!(psnr(&base, &hi).unwrap() < psnr(&base, &lo).unwrap());
        prop_assert!(ssim(&base, &hi).unwrap() < ssim(&base, &lo).unwrap());
    }
}
