mod common;

use common::*;
use dtm_core::model::{Label, TransformationModel};
use dtm_core::xai;

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..3 {
        for (name, report) in layer_suite(seed) {
            assert!(
                report.passed(),
                "seed {seed} {name}: checked {} skipped {} failures {:?}",
                report.checked,
                report.skipped,
                report.failures
            );
        }
    }
}

#[test]
fn reference_network_agrees_on_default_architecture() {
    let spec = dtm_core::NetworkSpec::default_for([16, 12, 6]);
    let params = random_params(&spec, 21);
    let input = uniform_tensor(&[1, 16, 12, 6], -2.0, 2.0, &mut rng(22));
    let report = check_network(&spec, &params, &input, 23, 20);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn gradcam_factorization_matches_numeric_probability_derivative() {
    for seed in 0..3 {
        let net = small_image_network([12, 12, 4], seed);
        let member = TransformationModel::ci(net).unwrap();
        let volume = uniform_tensor(&[12, 12, 4], -2.0, 2.0, &mut rng(100 + seed));
        for k in [Label::Favorable, Label::Unfavorable] {
            let report = gradcam_identity(&member, &volume, None, k, 25, seed);
            assert!(report.checked >= 20, "seed {seed}: only {} voxels", report.checked);
            assert!(report.passed(), "seed {seed} {k}: {:?}", report.failures);
        }
    }
}

#[test]
fn gradcam_identity_holds_with_tabular_shift() {
    let net = small_image_network([12, 12, 4], 7);
    let member = TransformationModel::ci_ls(net, vec![0.8, -1.1]).unwrap();
    let volume = uniform_tensor(&[12, 12, 4], -2.0, 2.0, &mut rng(8));
    let x = [1.3, 0.4];
    let report = gradcam_identity(&member, &volume, Some(&x), Label::Unfavorable, 25, 9);
    assert!(report.checked >= 20 && report.passed(), "{report:?}");
}

#[test]
fn tabular_shift_only_rescales_gradcam() {
    for seed in 0..5 {
        let net = small_image_network([12, 12, 4], 30 + seed);
        let ci = TransformationModel::ci(net.clone()).unwrap();
        let ci_ls = TransformationModel::ci_ls(net, vec![1.5, -0.7, 0.3]).unwrap();
        let volume = uniform_tensor(&[12, 12, 4], -2.0, 2.0, &mut rng(40 + seed));
        let x = [0.9, 1.2, -2.0];
        for k in [Label::Favorable, Label::Unfavorable] {
            let a = xai::gradcam(&ci, &volume, None, k).unwrap().values;
            let b = xai::gradcam(&ci_ls, &volume, Some(&x), k).unwrap().values;
            let (ma, mb) = (a.max() as f64, b.max() as f64);
            assert_eq!(ma > 0.0, mb > 0.0);
            if ma == 0.0 {
                continue;
            }
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((*u as f64 / ma - *v as f64 / mb).abs() <= 1e-6);
            }
        }
    }
}
