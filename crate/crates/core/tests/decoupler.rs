mod common;

use fdl_core::autodiff::Tape;
use fdl_core::decoupler::{PlanPreset, RoutePlan};
use fdl_core::detector::{Branch, Detector, LossWeights, ModelConfig, ModelKind};

use common::{all_zero, batch, grads, max_diff};

fn model(seed: u64) -> Detector<f64> {
    Detector::new(ModelConfig::default(), ModelKind::Multimodal, seed).unwrap()
}

#[test]
fn decoupling_is_forward_transparent() {
    let m = model(3);
    let w = LossWeights::default();
    for k in 0..50 {
        let b = batch(100 + k, 0, 2);
        let mut t_on = Tape::new();
        let on = m.forward(&mut t_on, &b, &PlanPreset::RscMd.plan(), &w).unwrap();
        let mut t_off = Tape::new();
        let off = m.forward(&mut t_off, &b, &PlanPreset::Rsc.plan(), &w).unwrap();
        assert_eq!(t_on.len(), t_off.len());
        for (a, c) in t_on.vars().zip(t_off.vars()) {
            assert!(t_on.value(a).bit_eq(t_off.value(c)), "batch {k}: node {a:?} differs");
        }
        let (lo, lf) = (t_on.value(on.total).item(), t_off.value(off.total).item());
        assert_eq!(lo.to_bits(), lf.to_bits());
    }
}

#[test]
fn fusion_gradient_never_reaches_backbones() {
    let m = model(4);
    let mut params = m.params.clone();
    for k in 0..5 {
        let b = batch(200 + k, 0, 3);
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &b, &PlanPreset::RscMd.plan(), &LossWeights::default())
            .unwrap();
        params.zero_grad();
        tape.backward(out.losses[2].unwrap().total, &mut params).unwrap();
        for br in Branch::BOTH {
            let ids = m.backbone_ids(br).unwrap();
            assert_eq!(params.grad_norm(&ids), 0.0);
        }
        // fusion layer and fusion head still learn
        let fusion_ids = m.fusion.as_ref().unwrap().all_ids();
        assert!(params.grad_norm(&fusion_ids) > 0.0);
        let head_ids = m.heads[2].as_ref().unwrap().all_ids();
        assert!(params.grad_norm(&head_ids) > 0.0);
    }
}

#[test]
fn blocked_plan_freezes_backbones() {
    let m = model(5);
    let mut params = m.params.clone();
    let b = batch(7, 0, 2);
    let mut tape = Tape::new();
    let out = m
        .forward(&mut tape, &b, &RoutePlan::blocked(), &LossWeights::default())
        .unwrap();
    params.zero_grad();
    tape.backward(out.total, &mut params).unwrap();
    for br in Branch::BOTH {
        assert!(all_zero(&grads(&params, &m.backbone_ids(br).unwrap())));
    }
}

#[test]
fn decoupled_backbones_match_unimodal_models() {
    let m = model(6);
    let mut params = m.params.clone();
    for k in 0..5 {
        let b = batch(300 + k, 0, 2);
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &b, &PlanPreset::RscMd.plan(), &LossWeights::default())
            .unwrap();
        params.zero_grad();
        tape.backward(out.total, &mut params).unwrap();
        for br in Branch::BOTH {
            let uni =
                Detector::<f64>::new(ModelConfig::default(), ModelKind::Unimodal(br), 6).unwrap();
            let mut up = uni.params.clone();
            let mut ut = Tape::new();
            let uo = uni
                .forward(&mut ut, &b, &PlanPreset::RscMd.plan(), &LossWeights::default())
                .unwrap();
            up.zero_grad();
            ut.backward(uo.total, &mut up).unwrap();
            let ids = m.backbone_ids(br).unwrap();
            let uni_ids: Vec<_> = ids
                .iter()
                .map(|&id| up.id(params.name(id)).unwrap())
                .collect();
            let d = max_diff(&grads(&params, &ids), &grads(&up, &uni_ids));
            assert!(d <= 1e-12, "branch {br:?}: {d}");
        }
    }
}

#[test]
fn aux_only_gradient_equals_standalone_branch() {
    let m = model(8);
    let mut params = m.params.clone();
    let b = batch(9, 0, 2);
    let mut tape = Tape::new();
    let out = m
        .forward(&mut tape, &b, &PlanPreset::RscMd.plan(), &LossWeights::default())
        .unwrap();
    params.zero_grad();
    tape.backward(out.losses[0].unwrap().total, &mut params).unwrap();
    assert!(all_zero(&grads(&params, &m.backbone_ids(Branch::M2).unwrap())));
    let uni = Detector::<f64>::new(ModelConfig::default(), ModelKind::Unimodal(Branch::M1), 8).unwrap();
    let mut up = uni.params.clone();
    let mut ut = Tape::new();
    let uo = uni
        .forward(&mut ut, &b, &RoutePlan::baseline(), &LossWeights::default())
        .unwrap();
    up.zero_grad();
    ut.backward(uo.total, &mut up).unwrap();
    let ids = m.backbone_ids(Branch::M1).unwrap();
    let uni_ids: Vec<_> = ids.iter().map(|&id| up.id(params.name(id)).unwrap()).collect();
    assert!(max_diff(&grads(&params, &ids), &grads(&up, &uni_ids)) <= 1e-12);
}
