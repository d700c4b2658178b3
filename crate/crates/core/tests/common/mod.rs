#![allow(dead_code)]

pub mod ap;
pub mod fd;

use fdl_core::autodiff::{ParamId, ParamStore, Tensor};
use fdl_core::detector::{Batch, ModelConfig};
use fdl_core::synthgen::{generate_split, ModalityProfile, SceneSpec};
use fdl_core::train::make_batch;

pub fn small_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        image_size: 32,
        object_count: [1, 3],
        class_count: 3,
        seed,
    }
}

pub fn profiles() -> [ModalityProfile; 2] {
    [ModalityProfile::from_quality(0.4), ModalityProfile::from_quality(0.9)]
}

/// A batch of `n` 32x32 scenes starting at `index`.
pub fn batch(seed: u64, index: u64, n: usize) -> Batch<f64> {
    let samples = generate_split(&small_scene(seed), &profiles(), index, n);
    let refs: Vec<_> = samples.iter().collect();
    make_batch(&refs, &ModelConfig::default()).unwrap()
}

pub fn grads(store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<Tensor<f64>> {
    ids.iter().map(|&id| store.get(id).grad.clone()).collect()
}

pub fn max_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

pub fn all_zero(ts: &[Tensor<f64>]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|&x| x == 0.0))
}

/// Copies every parameter of `from` whose name, after `rename`, exists in
/// `to`.
pub fn copy_params(
    from: &ParamStore<f64>,
    to: &mut ParamStore<f64>,
    rename: impl Fn(&str) -> String,
) -> usize {
    let mut copied = 0;
    for (_, name, p) in from.iter() {
        if let Some(id) = to.id(&rename(name)) {
            to.get_mut(id).value = p.value.clone();
            copied += 1;
        }
    }
    copied
}
