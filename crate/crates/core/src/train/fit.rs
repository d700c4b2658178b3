use crate::autodiff::{ParamId, Tape};
use crate::decoupler::RoutePlan;
use crate::detector::{Branch, Detector, LossWeights, ModelKind};
use crate::scalar::Scalar;
use crate::synthgen::ModalitySample;
use crate::train::{
    check_classes, epoch_order, image_size, make_batch, sgd_step, GradientTrace, OptimizerConfig,
    TraceRecord, TrainError,
};

const TERMS: [&str; 3] = ["aux1", "aux2", "fusion"];

/// Trains every parameter of `model` in place and returns the per-step
/// gradient trace.
///
/// Multimodal models run the reverse pass in two stages: first the
/// weighted fusion loss, whose backbone gradient is recorded on its own,
/// then the weighted auxiliary losses on top of it. The accumulated sum
/// is the gradient of the full objective.
pub fn train<S: Scalar>(
    model: &mut Detector<S>,
    data: &[ModalitySample],
    plan: &RoutePlan,
    weights: &LossWeights,
    opt: &OptimizerConfig,
) -> Result<GradientTrace, TrainError> {
    opt.validate()?;
    weights.validate()?;
    let (h, w) = image_size(data)?;
    model.config.backbone.check_input(h, w)?;
    check_classes(data, model.config.num_classes)?;

    let all_ids: Vec<ParamId> = model.params.ids().collect();
    let branches: Vec<Branch> = match model.kind {
        ModelKind::Multimodal => Branch::BOTH.to_vec(),
        ModelKind::Unimodal(b) => vec![b],
    };
    let probe_ids: Vec<Vec<ParamId>> = branches
        .iter()
        .map(|&b| model.probe_ids(b))
        .collect::<Result<_, _>>()?;
    let backbone_ids: Vec<Vec<ParamId>> = branches
        .iter()
        .map(|&b| model.backbone_ids(b))
        .collect::<Result<_, _>>()?;

    let per_epoch = opt.steps_per_epoch(data.len());
    let total_steps = per_epoch * opt.epochs;
    let mut trace = GradientTrace::default();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        let order = epoch_order(data.len(), opt.seed, epoch);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opt.batch_size) {
            let samples: Vec<&ModalitySample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch::<S>(&samples, &model.config)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, plan, weights)?;
            let loss_total = tape.value(out.total).item().as_f64();
            for (k, parts) in out.losses.iter().enumerate() {
                if let Some(p) = parts {
                    if !tape.value(p.total).item().as_f64().is_finite() {
                        let term = match model.kind {
                            ModelKind::Unimodal(_) => "head",
                            ModelKind::Multimodal => TERMS[k],
                        };
                        return Err(TrainError::NonFinite { step, term });
                    }
                }
            }
            if !loss_total.is_finite() {
                return Err(TrainError::NonFinite { step, term: "total" });
            }

            model.params.zero_grad();
            let mut fusion_norms = vec![0.0; branches.len()];
            match model.kind {
                ModelKind::Unimodal(_) => tape.backward(out.total, &mut model.params)?,
                ModelKind::Multimodal => {
                    let fusion = out.losses[2].expect("fusion loss").total;
                    tape.backward_scaled(fusion, S::of(weights.alpha), &mut model.params)?;
                    for (k, ids) in backbone_ids.iter().enumerate() {
                        fusion_norms[k] = model.params.grad_norm(ids).as_f64();
                    }
                    for (k, wk) in [weights.beta, weights.gamma].into_iter().enumerate() {
                        if wk > 0.0 {
                            let aux = out.losses[k].expect("weighted aux loss").total;
                            tape.backward_scaled(aux, S::of(wk), &mut model.params)?;
                        }
                    }
                }
            }
            let value = |k: usize| out.losses[k].map(|p| tape.value(p.total).item().as_f64());
            for (k, &branch) in branches.iter().enumerate() {
                let probe = model.params.grad_norm(&probe_ids[k]).as_f64();
                trace.records.push(TraceRecord {
                    step,
                    branch,
                    probe_grad_norm: probe,
                    fusion_grad_norm: fusion_norms[k],
                    loss_total,
                    loss_fusion: value(2),
                    loss_aux1: value(0),
                    loss_aux2: value(1),
                });
            }

            let lr = opt.lr_at(step, total_steps);
            sgd_step(&mut model.params, &all_ids, lr, opt.momentum, opt.weight_decay);
            epoch_loss += loss_total;
            step += 1;
        }
        log::debug!(
            "epoch {}/{}: mean loss {:.5}",
            epoch + 1,
            opt.epochs,
            epoch_loss / per_epoch as f64
        );
    }
    Ok(trace)
}
