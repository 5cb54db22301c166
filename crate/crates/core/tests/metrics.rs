use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use vspsr::imaging::synth::{natural_image, smooth_image};
use vspsr::imaging::{bicubic_upsample, degrade, Dihedral, Image, NamedImage};
use vspsr::metrics::{diversity_from_maps, evaluate, lr_psnr, proxy_perceptual, psnr, DistanceMap, EvalOptions};
use vspsr::rng::SeedStream;
use vspsr::vspm::{cem_project, VSpMConfig, VSpMModel};

fn noisy(img: &Image, amplitude: f32, seed: u64) -> Image {
    let mut rng = SeedStream::new(seed).stream("test.noise", 0);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v += amplitude * rng.sample::<f32, _>(StandardNormal);
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn rfd_grows_with_noise_amplitude() {
    let levels = [0.01f32, 0.05, 0.1];
    let medians: Vec<f64> = levels
        .iter()
        .map(|&a| {
            median(
                (0..20)
                    .map(|i| {
                        let img = natural_image(32, 32, 200 + i);
                        proxy_perceptual(&img, &noisy(&img, a, i)).unwrap().mean()
                    })
                    .collect(),
            )
        })
        .collect();
    assert!(medians[0] < medians[1] && medians[1] < medians[2], "{medians:?}");
}

#[test]
fn rfd_is_nearly_rotation_invariant() {
    let r = Dihedral::rot90();
    let rel: Vec<f64> = (0..20)
        .map(|i| {
            let a = natural_image(40, 40, 300 + i);
            let b = noisy(&a, 0.05, i);
            let plain = proxy_perceptual(&a, &b).unwrap().mean();
            let rotated = proxy_perceptual(&a.transformed(r), &b.transformed(r)).unwrap().mean();
            (rotated - plain).abs() / plain
        })
        .collect();
    // single pairs can exceed 5% because the random filters are anisotropic
    assert!(rel.iter().all(|&x| x <= 0.10), "{rel:?}");
    assert!(median(rel.clone()) <= 0.05, "{rel:?}");
}

#[test]
fn psnr_is_symmetric() {
    let a = natural_image(16, 16, 1);
    let b = natural_image(16, 16, 2);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
}

#[test]
fn projected_smooth_image_is_consistent() {
    let x = smooth_image(64, 64, 4);
    let y = degrade(&x, 4).unwrap();
    let sr = cem_project(&bicubic_upsample(&y, 4), &y, 4, 10).unwrap();
    assert!(lr_psnr(&sr, &y, 4).unwrap() >= 55.0);
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, Vec<Vec<f64>>)> {
    (2usize..5, 2usize..5, 2usize..6).prop_flat_map(|(h, w, n)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(prop::collection::vec(0.0f64..2.0, h * w), n),
        )
    })
}

fn maps(h: usize, w: usize, values: &[Vec<f64>]) -> Vec<DistanceMap> {
    values.iter().map(|v| DistanceMap::new(h, w, v.clone()).unwrap()).collect()
}

proptest! {
    #[test]
    fn diversity_is_non_negative_and_order_free((h, w, values) in map_strategy()) {
        let forward = diversity_from_maps(&maps(h, w, &values)).unwrap();
        let mut reversed = values.clone();
        reversed.reverse();
        let backward = diversity_from_maps(&maps(h, w, &reversed)).unwrap();
        prop_assert!(forward >= 0.0);
        prop_assert!((forward - backward).abs() <= 1e-12);
    }

    #[test]
    fn duplicating_a_sample_keeps_the_score((h, w, values) in map_strategy(), pick in 0usize..6) {
        let base = diversity_from_maps(&maps(h, w, &values)).unwrap();
        let mut more = values.clone();
        more.push(values[pick % values.len()].clone());
        let dup = diversity_from_maps(&maps(h, w, &more)).unwrap();
        prop_assert!((base - dup).abs() <= 1e-12);
    }
}

fn tiny_model(stochastic_omega: bool) -> VSpMModel<f32> {
    let cfg = VSpMConfig {
        num_basis: 16,
        blocks: 1,
        width: 4,
        coeff_depth: 1,
        stochastic_omega,
        ..VSpMConfig::default()
    };
    VSpMModel::init(cfg, 0.4, 11).unwrap()
}

fn test_set() -> Vec<NamedImage> {
    (0..3)
        .map(|i| NamedImage {
            id: format!("t{i}"),
            image: natural_image(32, 32, 600 + i),
        })
        .collect()
}

#[test]
fn aggregate_is_the_mean_of_rows() {
    let report = evaluate(&tiny_model(true), &test_set(), 4, 2, &EvalOptions::default()).unwrap();
    let n = report.images.len() as f64;
    let mean = |f: fn(&vspsr::metrics::ImageRow) -> f64| report.images.iter().map(f).sum::<f64>() / n;
    assert!((report.aggregate.rfd - mean(|r| r.rfd)).abs() <= 1e-9);
    assert!((report.aggregate.lr_psnr - mean(|r| r.lr_psnr)).abs() <= 1e-9);
    assert!((report.aggregate.div - mean(|r| r.div)).abs() <= 1e-9);
    assert!(report.aggregate.div > 0.0);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["rfd", "lr_psnr", "div"] {
        assert!(json["aggregate"][key].is_number(), "{key}");
    }
}

#[test]
fn deterministic_model_has_zero_diversity() {
    let report = evaluate(&tiny_model(false), &test_set(), 4, 2, &EvalOptions::default()).unwrap();
    assert_eq!(report.aggregate.div, 0.0);
    assert!(report.aggregate.lr_psnr.is_finite());
}

#[test]
fn single_sample_reports_zero_diversity() {
    let report = evaluate(&tiny_model(true), &test_set(), 1, 2, &EvalOptions::default()).unwrap();
    assert_eq!(report.aggregate.div, 0.0);
}

#[test]
fn threads_do_not_change_the_report() {
    let one = evaluate(&tiny_model(true), &test_set(), 3, 5, &EvalOptions::default()).unwrap();
    let opts = EvalOptions {
        threads: 3,
        ..EvalOptions::default()
    };
    let three = evaluate(&tiny_model(true), &test_set(), 3, 5, &opts).unwrap();
    assert_eq!(one.to_json(), three.to_json());
}

#[test]
fn f64_inference_agrees_with_f32() {
    let model = tiny_model(true);
    let a = evaluate(&model, &test_set(), 2, 1, &EvalOptions::default()).unwrap();
    let b = evaluate(&model.cast::<f64>(), &test_set(), 2, 1, &EvalOptions::default()).unwrap();
    assert!((a.aggregate.lr_psnr - b.aggregate.lr_psnr).abs() < 0.5);
    assert!((a.aggregate.rfd - b.aggregate.rfd).abs() < 1e-3);
}
