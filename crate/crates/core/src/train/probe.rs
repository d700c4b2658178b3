use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::detector::{
    assign_targets, detection_loss, head_forward, Annotation, Branch, Detector, FeaturePyramid,
    HeadParams, Init, LossWeights,
};
use crate::scalar::Scalar;
use crate::synthgen::ModalitySample;
use crate::train::{
    average_precision, check_classes, decode_levels, epoch_order, image_size, sgd_step, stack,
    DecodeConfig, OptimizerConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub branch: Branch,
    /// Digest of the frozen backbone's parameters.
    pub backbone_digest: String,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

/// SHA-256 over the names and little-endian `f64` values of `ids`.
pub fn parameter_digest<S: Scalar>(store: &ParamStore<S>, ids: &[ParamId]) -> String {
    let mut h = Sha256::new();
    for &id in ids {
        h.update(store.name(id).as_bytes());
        for &x in store.get(id).value.data() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Per-sample pyramid features `[1, C, h, w]` of one frozen backbone.
fn cached_features<S: Scalar>(
    model: &Detector<S>,
    branch: Branch,
    data: &[ModalitySample],
) -> Result<Vec<Vec<Tensor<S>>>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let imgs: Vec<&Tensor<f64>> = chunk.iter().map(|s| s.image(branch.index())).collect();
        let levels = model.extract_features(branch, &stack::<S>(&imgs))?;
        for i in 0..chunk.len() {
            out.push(
                levels
                    .iter()
                    .map(|t| {
                        let per = t.numel() / t.shape()[0];
                        let mut shape = t.shape().to_vec();
                        shape[0] = 1;
                        Tensor::new(shape, t.data()[i * per..(i + 1) * per].to_vec())
                            .expect("feature slice")
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn concat_batch<S: Scalar>(features: &[&Vec<Tensor<S>>]) -> Vec<Tensor<S>> {
    (0..features[0].len())
        .map(|l| {
            let mut shape = features[0][l].shape().to_vec();
            shape[0] = features.len();
            let data = features
                .iter()
                .flat_map(|f| f[l].data().iter().copied())
                .collect();
            Tensor::new(shape, data).expect("feature batch")
        })
        .collect()
}

/// Freezes the `branch` backbone of `model`, trains a freshly initialized
/// head on its features and evaluates that head on `test`.
///
/// Features are computed once; the backbone is only read.
pub fn linear_probe<S: Scalar>(
    model: &Detector<S>,
    branch: Branch,
    train: &[ModalitySample],
    test: &[ModalitySample],
    opt: &OptimizerConfig,
    weights: &LossWeights,
    decode: &DecodeConfig,
) -> Result<ProbeResult, TrainError> {
    opt.validate()?;
    let (h, w) = image_size(train)?;
    let config = &model.config;
    check_classes(train, config.num_classes)?;
    check_classes(test, config.num_classes)?;
    let digest = parameter_digest(&model.params, &model.backbone_ids(branch)?);

    let mut store = ParamStore::<S>::new();
    let head = HeadParams::register(
        &mut store,
        Init {
            seed: opt.seed,
            gain: config.init_gain,
        },
        "probe.head",
        config.backbone.pyramid_widths(),
        config.num_classes,
    )?;
    let ids = head.all_ids();

    let features = cached_features(model, branch, train)?;
    let per_epoch = opt.steps_per_epoch(train.len());
    let total_steps = per_epoch * opt.epochs;
    let mut step = 0;
    for epoch in 0..opt.epochs {
        let order = epoch_order(train.len(), opt.seed, epoch);
        for chunk in order.chunks(opt.batch_size) {
            let feats: Vec<&Vec<Tensor<S>>> = chunk.iter().map(|&i| &features[i]).collect();
            let anns: Vec<Annotation> = chunk.iter().map(|&i| train[i].annotation()).collect();
            let targets = assign_targets(&anns, h, w, &config.backbone, config.num_classes)?;
            let mut tape = Tape::new();
            let levels = concat_batch(&feats)
                .into_iter()
                .map(|t| tape.constant(t))
                .collect();
            let out = head_forward(&mut tape, &store, &head, &FeaturePyramid { levels })?;
            let loss = detection_loss(&mut tape, &out, &targets, weights)?;
            if !tape.value(loss.total).item().as_f64().is_finite() {
                return Err(TrainError::NonFinite { step, term: "probe" });
            }
            store.zero_grad();
            tape.backward(loss.total, &mut store)?;
            sgd_step(
                &mut store,
                &ids,
                opt.lr_at(step, total_steps),
                opt.momentum,
                opt.weight_decay,
            );
            step += 1;
        }
    }

    let strides = config.backbone.pyramid_strides();
    let test_features = cached_features(model, branch, test)?;
    let mut detections = Vec::new();
    for (k, chunk) in test_features.chunks(32).enumerate() {
        let refs: Vec<&Vec<Tensor<S>>> = chunk.iter().collect();
        let mut tape = Tape::new();
        let levels = concat_batch(&refs)
            .into_iter()
            .map(|t| tape.constant(t))
            .collect();
        let out = head_forward(&mut tape, &store, &head, &FeaturePyramid { levels })?;
        let values: Vec<(Tensor<S>, Tensor<S>)> = out
            .levels
            .iter()
            .map(|l| (tape.value(l.logits).clone(), tape.value(l.boxes).clone()))
            .collect();
        for dets in decode_levels(&values, strides, k * 32, decode) {
            detections.extend(dets);
        }
    }
    let truth: Vec<Annotation> = test.iter().map(|s| s.annotation()).collect();
    let eval = average_precision(&detections, &truth, config.num_classes);
    let after = parameter_digest(&model.params, &model.backbone_ids(branch)?);
    debug_assert_eq!(digest, after);
    Ok(ProbeResult {
        branch,
        backbone_digest: digest,
        ap50: eval.mean_ap50,
        ap75: eval.mean_ap75,
        ap50_95: eval.mean_ap50_95,
    })
}
