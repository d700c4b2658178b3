use fdl_core::decoupler::RoutePlan;
use fdl_core::detector::{Branch, Detector, LossWeights, ModelConfig, ModelKind};
use fdl_core::synthgen::*;
use fdl_core::train::{average_precision, evaluate, train, DecodeConfig, Detection, OptimizerConfig};
use proptest::prelude::*;

fn profile() -> impl Strategy<Value = ModalityProfile> {
    (0.0f64..1.0, 0.0f64..0.4, 0.2f64..=1.0, 0.0f64..=1.0).prop_map(|(q, n, c, d)| {
        ModalityProfile {
            quality: q,
            noise_sigma: n,
            contrast: c,
            dropout_prob: d,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn every_object_is_visible_somewhere_and_inside(
        seed in any::<u64>(),
        index in 0u64..1000,
        p1 in profile(),
        p2 in profile(),
    ) {
        let spec = SceneSpec { image_size: 32, seed, ..SceneSpec::default() };
        let s = generate_sample(&spec, &p1, &p2, index);
        prop_assert!(!s.boxes.is_empty());
        prop_assert_eq!(s.boxes.len(), s.visibility.len());
        for (b, &(v1, v2)) in s.boxes.iter().zip(&s.visibility) {
            prop_assert!(v1 || v2);
            prop_assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] > 0.0 && b[3] > 0.0);
            prop_assert!(b[0] + b[2] <= 32.0 && b[1] + b[3] <= 32.0);
        }
        prop_assert!(s.image_m1.is_finite() && s.image_m2.is_finite());
        let again = generate_sample(&spec, &p1, &p2, index);
        prop_assert!(s.image_m1.bit_eq(&again.image_m1) && s.image_m2.bit_eq(&again.image_m2));
    }
}

/// Detections that reproduce the given annotations exactly.
fn perfect_detections(truth: &[fdl_core::detector::Annotation]) -> Vec<Detection> {
    truth
        .iter()
        .enumerate()
        .flat_map(|(image, a)| {
            a.boxes.iter().zip(&a.classes).map(move |(&bbox, &class)| Detection {
                image,
                class,
                score: 1.0,
                bbox,
            })
        })
        .collect()
}

#[test]
fn disjoint_dropout_makes_modalities_complementary() {
    let spec = SceneSpec {
        image_size: 32,
        seed: 9,
        ..SceneSpec::default()
    };
    let lossy = ModalityProfile {
        dropout_prob: 0.3,
        ..ModalityProfile::from_quality(0.7)
    };
    let data = generate_split(&spec, &[lossy, lossy], 0, 100);
    let truth: Vec<_> = data.iter().map(|s| s.annotation()).collect();
    let ap = |dets: &[Detection]| average_precision(dets, &truth, spec.class_count).mean_ap50_95;
    let fused = ap(&perfect_detections(&truth));
    assert_eq!(fused, 1.0);
    for m in 0..2 {
        let seen: Vec<_> = data.iter().map(|s| s.visible_annotation(m)).collect();
        let uni = ap(&perfect_detections(&seen));
        assert!(uni < fused, "modality {m}: {uni}");
    }
}

fn train_unimodal(quality: f64) -> f64 {
    let spec = SceneSpec {
        image_size: 64,
        seed: 4,
        ..SceneSpec::default()
    };
    let profiles = [ModalityProfile::from_quality(quality), ModalityProfile::perfect()];
    let train_set = generate_split(&spec, &profiles, 0, 200);
    let test_set = generate_split(&spec, &profiles, 200, 80);
    let config = ModelConfig {
        init_gain: 6f64.sqrt(),
        ..ModelConfig::default()
    };
    let mut m = Detector::<f64>::new(config, ModelKind::Unimodal(Branch::M1), 4).unwrap();
    let weights = LossWeights {
        lambda_cls: 10.0,
        ..LossWeights::default()
    };
    let opt = OptimizerConfig {
        initial_lr: 0.05,
        epochs: 12,
        seed: 4,
        ..OptimizerConfig::default()
    };
    train(&mut m, &train_set, &RoutePlan::modality_decoupled(), &weights, &opt).unwrap();
    evaluate(&m, &test_set, &DecodeConfig::default()).unwrap().mean_ap50_95
}

#[test]
fn clean_modality_is_easier_to_learn() {
    let clean = train_unimodal(1.0);
    let weak = train_unimodal(0.4);
    assert!(clean > weak, "quality 1.0: {clean}, quality 0.4: {weak}");
}
