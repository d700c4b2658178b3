//! Central finite differences against the reverse pass. Each op is a
//! function from a seed to the worst relative error over one random graph.

use fdl_core::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-6;

/// Builds the graph under test from the leaves and returns its output.
type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

struct Case {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    /// Random weights contracting the op's output to a scalar.
    probe: Option<Tensor<f64>>,
    squash: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(-1.5..1.5);
            if away_from_zero && x.abs() < 0.05 {
                x.signum() * 0.05 + x
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn case(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>], away_from_zero: bool) -> Case {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            store
                .insert(&format!("p{i}"), random_tensor(rng, s, away_from_zero))
                .unwrap()
        })
        .collect();
    Case {
        store,
        ids,
        probe: None,
        squash: rng.random_bool(0.5),
    }
}

fn loss(case: &Case, build: &Build, tape: &mut Tape<f64>) -> Var {
    let leaves: Vec<Var> = case.ids.iter().map(|&id| tape.param(&case.store, id)).collect();
    let mut out = build(tape, &leaves);
    if case.squash {
        out = tape.sigmoid(out);
    }
    if let Some(p) = &case.probe {
        let c = tape.constant(p.clone());
        out = tape.mul(out, c).unwrap();
    }
    tape.sum(out)
}

fn value(case: &Case, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let l = loss(case, build, &mut tape);
    tape.value(l).item()
}

/// Largest `|a - n| / max(1, |a|, |n|)` over every parameter entry.
fn max_rel_error(mut case: Case, rng: &mut ChaCha8Rng, build: &Build) -> f64 {
    let shape = {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = case.ids.iter().map(|&id| tape.param(&case.store, id)).collect();
        let out = build(&mut tape, &leaves);
        tape.value(out).shape().to_vec()
    };
    case.probe = Some(random_tensor(rng, &shape, false));
    let mut tape = Tape::new();
    let l = loss(&case, build, &mut tape);
    let mut store = case.store.clone();
    store.zero_grad();
    tape.backward(l, &mut store).unwrap();
    let mut worst = 0.0f64;
    for &id in &case.ids.clone() {
        let analytic = store.get(id).grad.clone();
        for k in 0..analytic.numel() {
            let x = case.store.get(id).value.data()[k];
            case.store.get_mut(id).value.data_mut()[k] = x + H;
            let up = value(&case, build);
            case.store.get_mut(id).value.data_mut()[k] = x - H;
            let down = value(&case, build);
            case.store.get_mut(id).value.data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn check(seed: u64, arity: usize, away_from_zero: bool, build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = rng.random_range(1..=3);
    let shape = dims(&mut rng, rank);
    let shapes = vec![shape; arity];
    let c = case(&mut rng, &shapes, away_from_zero);
    max_rel_error(c, &mut rng, build)
}

pub fn add(seed: u64) -> f64 {
    check(seed, 2, false, &|t, v| t.add(v[0], v[1]).unwrap())
}

pub fn sub(seed: u64) -> f64 {
    check(seed, 2, false, &|t, v| t.sub(v[0], v[1]).unwrap())
}

pub fn mul(seed: u64) -> f64 {
    check(seed, 2, false, &|t, v| t.mul(v[0], v[1]).unwrap())
}

pub fn mul_scalar_broadcast(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = dims(&mut rng, 2);
    let c = case(&mut rng, &[vec![1], shape], false);
    let left = rng.random_bool(0.5);
    max_rel_error(c, &mut rng, &move |t, v| {
        if left { t.mul(v[0], v[1]).unwrap() } else { t.mul(v[1], v[0]).unwrap() }
    })
}

pub fn scale(seed: u64) -> f64 {
    let c = ChaCha8Rng::seed_from_u64(!seed).random_range(-3.0..3.0);
    check(seed, 1, false, &move |t, v| t.scale(v[0], c))
}

pub fn matmul(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let c = case(&mut rng, &[vec![m, k], vec![k, n]], false);
    max_rel_error(c, &mut rng, &|t, v| t.matmul(v[0], v[1]).unwrap())
}

pub fn conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let stride = rng.random_range(1..=2);
    let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
    let side = rng.random_range(k.max(2)..=5);
    let bias = rng.random_bool(0.5);
    let mut shapes = vec![vec![n, ci, side, side], vec![co, ci, k, k]];
    if bias {
        shapes.push(vec![co]);
    }
    let c = case(&mut rng, &shapes, false);
    max_rel_error(c, &mut rng, &move |t, v| {
        t.conv2d(v[0], v[1], v.get(2).copied(), stride, padding).unwrap()
    })
}

pub fn silu(seed: u64) -> f64 {
    check(seed, 1, false, &|t, v| t.silu(v[0]))
}

pub fn sigmoid(seed: u64) -> f64 {
    check(seed, 1, false, &|t, v| t.sigmoid(v[0]))
}

pub fn abs(seed: u64) -> f64 {
    // inputs kept at least 0.05 from the kink, far beyond the step
    check(seed, 1, true, &|t, v| t.abs(v[0]))
}

pub fn reshape(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let c = case(&mut rng, &[vec![a, b]], false);
    max_rel_error(c, &mut rng, &move |t, v| t.reshape(v[0], &[b, a]).unwrap())
}

pub fn concat(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = rng.random_range(0..2);
    let mut s1 = dims(&mut rng, 2);
    let mut s2 = s1.clone();
    s2[axis] = rng.random_range(1..=3);
    s1[axis] = rng.random_range(1..=3);
    let c = case(&mut rng, &[s1, s2], false);
    max_rel_error(c, &mut rng, &move |t, v| t.concat(&[v[0], v[1]], axis).unwrap())
}

pub fn slice(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![rng.random_range(2..=5), rng.random_range(1..=3)];
    let axis = rng.random_range(0..2);
    let start = rng.random_range(0..shape[axis]);
    let len = rng.random_range(1..=shape[axis] - start);
    let c = case(&mut rng, &[shape], false);
    max_rel_error(c, &mut rng, &move |t, v| t.slice(v[0], axis, start, len).unwrap())
}

pub fn sum(seed: u64) -> f64 {
    check(seed, 1, false, &|t, v| t.sum(v[0]))
}

pub fn mean(seed: u64) -> f64 {
    check(seed, 1, false, &|t, v| t.mean(v[0]))
}

pub fn bce_with_logits(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = dims(&mut rng, 2);
    let n: usize = shape.iter().product();
    let y = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let c = case(&mut rng, &[shape], false);
    max_rel_error(c, &mut rng, &move |t, v| {
        let target = t.constant(y.clone());
        t.bce_with_logits(v[0], target).unwrap()
    })
}

pub fn route_pass(seed: u64) -> f64 {
    check(seed, 1, false, &|t, v| {
        let r = t.route(v[0], 1.0);
        t.silu(r)
    })
}

pub fn composite(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = case(&mut rng, &[vec![1, 2, 4, 4], vec![3, 2, 3, 3], vec![3], vec![3, 3, 1, 1]], false);
    max_rel_error(c, &mut rng, &|t, v| {
        let h = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        let h = t.silu(h);
        let z = t.conv2d(h, v[3], None, 1, 0).unwrap();
        let s = t.sigmoid(z);
        t.mul(s, h).unwrap()
    })
}

pub const OPS: &[(&str, fn(u64) -> f64)] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("mul_scalar_broadcast", mul_scalar_broadcast),
    ("scale", scale),
    ("matmul", matmul),
    ("conv2d", conv2d),
    ("silu", silu),
    ("sigmoid", sigmoid),
    ("abs", abs),
    ("reshape", reshape),
    ("concat", concat),
    ("slice", slice),
    ("sum", sum),
    ("mean", mean),
    ("bce_with_logits", bce_with_logits),
    ("route_pass", route_pass),
    ("composite", composite),
];
