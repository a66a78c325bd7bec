use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use stabfi::fi::{
    fi_for_prediction, fi_value, fi_value_csvd, fi_value_inverse, metric_tensor, FiPath,
};
use stabfi::linalg::Matrix;
use stabfi::zoo::{
    init_mlp, scores_and_probs, Arch, ClassDistribution, PerturbationTarget, Sample, ScoreMatrix,
    TargetKind, ZooModel,
};
use stabfi::Error;

fn scores_from(p: usize, k: usize, raw: &[f64]) -> ScoreMatrix {
    ScoreMatrix::new(Matrix::from_fn(p, k, |i, j| raw[i * k + j])).unwrap()
}

/// gᵀG⁺g with G⁺ from nalgebra's SVD.
fn pinv_oracle(grad: &[f64], scores: &ScoreMatrix, probs: &ClassDistribution) -> f64 {
    let p = scores.dim();
    let mut g = DMatrix::zeros(p, p);
    for (y, &py) in probs.probs().iter().enumerate() {
        let s = DVector::from_vec(scores.column(y));
        g += py * &s * s.transpose();
    }
    let svd = g.svd(true, true);
    let cut = 1e-10 * svd.singular_values.max();
    let pinv = svd.pseudo_inverse(cut).unwrap();
    let v = DVector::from_row_slice(grad);
    v.dot(&(pinv * &v))
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=6, 2usize..=8).prop_flat_map(|(p, k)| {
        (
            Just(p),
            Just(k),
            prop::collection::vec(-3.0f64..3.0, p * k),
            prop::collection::vec(-2.0f64..2.0, k),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dispatch_matches_pseudo_inverse((p, k, raw, logits) in instance()) {
        let scores = scores_from(p, k, &raw);
        let probs = ClassDistribution::from_logits(&logits);
        let y = probs.argmax();
        let fi = fi_for_prediction(&scores, &probs, y).unwrap();
        let grad: Vec<f64> = scores.column(y).iter().map(|v| -v).collect();
        let oracle = pinv_oracle(&grad, &scores, &probs);
        prop_assert!((fi.value - oracle).abs() <= 1e-7 * oracle.max(1e-12));
        let csvd = fi_value_csvd(&grad, &scores, &probs).unwrap();
        prop_assert!((fi.value - csvd).abs() <= 1e-9 * csvd.max(1e-12));
    }

    #[test]
    fn prediction_fi_is_below_inverse_probability((p, k, raw, logits) in instance()) {
        let scores = scores_from(p, k, &raw);
        let probs = ClassDistribution::from_logits(&logits);
        for y in 0..k {
            let fi = fi_for_prediction(&scores, &probs, y).unwrap().value;
            prop_assert!(fi <= (1.0 + 1e-9) / probs.probs()[y]);
        }
    }

    #[test]
    fn gradient_scaling_is_quadratic((p, k, raw, logits) in instance(), c in 0.1f64..10.0) {
        let scores = scores_from(p, k, &raw);
        let probs = ClassDistribution::from_logits(&logits);
        let grad = scores.column(0);
        let scaled: Vec<f64> = grad.iter().map(|v| v * c).collect();
        let a = fi_value(&grad, &scores, &probs).unwrap().value;
        let b = fi_value(&scaled, &scores, &probs).unwrap().value;
        prop_assert!((b - c * c * a).abs() <= 1e-9 * (c * c * a).max(1e-12));
    }

    #[test]
    fn metric_is_symmetric_psd((p, k, raw, logits) in instance(), h in prop::collection::vec(-1.0f64..1.0, 6)) {
        let scores = scores_from(p, k, &raw);
        let probs = ClassDistribution::from_logits(&logits);
        let g = metric_tensor(&scores, &probs).unwrap().g;
        prop_assert!(g.max_abs_asymmetry() < 1e-12);
        let h = &h[..p];
        let q: f64 = h.iter().zip(g.matvec(h)).map(|(a, b)| a * b).sum();
        prop_assert!(q >= -1e-12);
    }
}

#[test]
fn inverse_path_for_wide_full_rank() {
    let raw: Vec<f64> = (0..40)
        .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
        .collect();
    let scores = scores_from(5, 8, &raw);
    let probs = ClassDistribution::from_logits(&[0.1, 0.4, -0.2, 0.0, 0.3, -0.5, 0.2, 0.1]);
    let grad = scores.column(2);
    let r = fi_value(&grad, &scores, &probs).unwrap();
    assert_eq!((r.rank, r.path), (5, FiPath::Inverse));
    let inv = fi_value_inverse(&grad, &scores, &probs).unwrap();
    let csvd = fi_value_csvd(&grad, &scores, &probs).unwrap();
    assert!((r.value - inv).abs() < 1e-10 * inv);
    assert!((r.value - csvd).abs() < 1e-8 * csvd);
}

#[test]
fn gradient_outside_score_span_is_rejected() {
    // both score columns lie on the first axis
    let scores = ScoreMatrix::from_columns(&[vec![1.0, 0.0], vec![-2.0, 0.0]]).unwrap();
    let probs = ClassDistribution::from_probs(vec![0.5, 0.5]);
    let err = fi_value(&[0.0, 1.0], &scores, &probs).unwrap_err();
    assert!(matches!(err, Error::OutOfRange { .. }));
    let inside = fi_value(&[1.0, 0.0], &scores, &probs).unwrap();
    assert_eq!(inside.rank, 1);
    assert!((inside.value - 1.0 / 2.5).abs() < 1e-12);
}

#[test]
fn zero_gradient_gives_zero() {
    let scores = ScoreMatrix::from_columns(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
    let probs = ClassDistribution::from_probs(vec![0.3, 0.7]);
    assert_eq!(fi_value(&[0.0, 0.0], &scores, &probs).unwrap().value, 0.0);
}

#[test]
fn model_scores_respect_the_saturation_bound() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let model = ZooModel::new(Arch::MlpClassifier, 4, init_mlp(&[5, 7, 4], &mut rng)).unwrap();
    for i in 0..10 {
        let x = Sample::Features((0..5).map(|j| ((i * 5 + j) as f64 * 0.37).sin()).collect());
        for kind in [TargetKind::InputDim, TargetKind::Parameter] {
            let target = PerturbationTarget::new(kind, vec![0, 1, 2]);
            let (scores, probs) = scores_and_probs(&model, &x, &target).unwrap();
            let y = probs.argmax();
            let py = probs.probs()[y];
            let fi = fi_for_prediction(&scores, &probs, y).unwrap().value;
            assert!(
                fi <= (1.0 - py) / py * (1.0 + 1e-9),
                "{fi} vs {}",
                (1.0 - py) / py
            );
        }
    }
}
