//! Finite-difference gradient checks shared by the test targets.
#![allow(dead_code)]

use lens_core::autodiff::{Segment, Tape, Var};
use lens_core::rng::{normal, rng_for, LensRng};
use lens_core::tensor::{Real, Tensor};

pub const CASES: u64 = 24;

pub fn rand_tensor<T: Real>(rng: &mut LensRng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(normal(rng, std))).collect()).unwrap()
}

/// Scalar objective: a fixed random projection of whatever `build` returns,
/// so every output entry reaches the loss with a distinct weight.
pub fn objective<T: Real>(tape: &mut Tape<T>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = rng_for(seed, "grad-weights", 0);
    let w = tape.constant(rand_tensor(&mut rng, &shape, 1.0));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

pub fn eval<T: Real>(inputs: &[Tensor<T>], build: &dyn Fn(&mut Tape<T>, &[Var]) -> Var, seed: u64) -> T {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = objective(&mut tape, out, seed);
    tape.value(loss).item()
}

/// Largest relative error between analytic and central-difference gradients
/// over all inputs, measured per input as `|a - n| / max(|a|, |n|, 1)` on
/// the gradient vectors' max-norm.
pub fn max_rel_error<T: Real>(
    inputs: Vec<Tensor<T>>,
    build: &dyn Fn(&mut Tape<T>, &[Var]) -> Var,
    seed: u64,
    step: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let loss = objective(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut diff = 0.0f64;
        let mut scale = 1.0f64;
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] = plus[i].data()[j] + T::of(step);
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] = minus[i].data()[j] - T::of(step);
            let fp = eval(&plus, build, seed).to_f64().unwrap();
            let fm = eval(&minus, build, seed).to_f64().unwrap();
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j].to_f64().unwrap();
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale);
    }
    worst
}

pub struct Precision {
    pub step: f64,
    pub tol: f64,
}

pub const F64: Precision = Precision { step: 1e-6, tol: 1e-4 };
pub const F32: Precision = Precision { step: 3e-3, tol: 1e-2 };

pub type Case<T> = (Vec<Tensor<T>>, Box<dyn Fn(&mut Tape<T>, &[Var]) -> Var>);

/// Worst relative error of `make` over `cases` random cases.
pub fn worst_error<T: Real>(name: &str, p: &Precision, cases: u64, make: impl Fn(&mut LensRng) -> Case<T>) -> f64 {
    (0..cases)
        .map(|case| {
            let mut rng = rng_for(case, name, 0);
            let (inputs, build) = make(&mut rng);
            max_rel_error(inputs, build.as_ref(), case, p.step)
        })
        .fold(0.0, f64::max)
}

pub fn run<T: Real>(name: &str, p: &Precision, make: impl Fn(&mut LensRng) -> Case<T>) {
    let err = worst_error(name, p, CASES, make);
    assert!(err < p.tol, "{name}: relative error {err:e} >= {:e}", p.tol);
}

pub fn dims(rng: &mut LensRng) -> (usize, usize, usize) {
    use rand::Rng;
    (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5))
}

pub fn matmul<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, k, n) = dims(rng);
    (
        vec![rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k, n], 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
    )
}

pub fn add<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    (
        vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n], 1.0)],
        Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
    )
}

pub fn mul<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    (
        vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n], 1.0)],
        Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
    )
}

pub fn add_row<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    (
        vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[n], 1.0)],
        Box::new(|t, v| t.add_row(v[0], v[1]).unwrap()),
    )
}

pub fn scale<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    let c = T::of(normal(rng, 2.0));
    (vec![rand_tensor(rng, &[m, n], 1.0)], Box::new(move |t, v| t.scale(v[0], c)))
}

pub fn gelu<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    (vec![rand_tensor(rng, &[m, n], 2.0)], Box::new(|t, v| t.gelu(v[0])))
}

pub fn layer_norm<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, _, _) = dims(rng);
    let n = 2 + m;
    (
        vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[n], 1.0), rand_tensor(rng, &[n], 1.0)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap()),
    )
}

pub fn softmax<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    let n = n + 1;
    // Column 0 is always kept so no row is fully masked.
    let mask: Vec<bool> = (0..m * n).map(|i| i % n == 0 || normal(rng, 1.0) > -0.5).collect();
    (
        vec![rand_tensor(rng, &[m, n], 2.0)],
        Box::new(move |t, v| t.softmax(v[0], Some(&mask)).unwrap()),
    )
}

pub fn gather<T: Real>(rng: &mut LensRng) -> Case<T> {
    use rand::Rng;
    let (rows, n, _) = dims(rng);
    let ids: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..rows)).collect();
    (vec![rand_tensor(rng, &[rows, n], 1.0)], Box::new(move |t, v| t.gather(v[0], &ids).unwrap()))
}

pub fn concat<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, a, b) = dims(rng);
    (
        vec![rand_tensor(rng, &[m, a], 1.0), rand_tensor(rng, &[m, b], 1.0), rand_tensor(rng, &[m, 1], 1.0)],
        Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[2]]).unwrap()),
    )
}

pub fn attention<T: Real>(rng: &mut LensRng) -> Case<T> {
    use rand::Rng;
    let heads = rng.random_range(1..4);
    let d = heads * rng.random_range(1..4);
    let (q1, k1, q2, k2) =
        (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..5));
    let segments = vec![
        Segment { q_start: 0, q_len: q1, k_start: 0, k_len: k1 },
        Segment { q_start: q1, q_len: q2, k_start: k1, k_len: k2 },
    ];
    let pruned: Vec<bool> = (0..heads).map(|h| h == 1).collect();
    let scale = T::of(1.0 / (d as f64).sqrt());
    (
        vec![
            rand_tensor(rng, &[q1 + q2, d], 1.0),
            rand_tensor(rng, &[k1 + k2, d], 1.0),
            rand_tensor(rng, &[k1 + k2, d], 1.0),
        ],
        Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads, scale, &segments, &pruned).unwrap()),
    )
}

pub fn cross_entropy<T: Real>(rng: &mut LensRng) -> Case<T> {
    use rand::Rng;
    let (b, c, _) = dims(rng);
    let c = c + 1;
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    (
        vec![rand_tensor(rng, &[b, c], 2.0)],
        Box::new(move |t, v| {
            let l = t.cross_entropy(v[0], &targets).unwrap();
            // The objective multiplies by a weight; keep the scalar shape.
            t.scale(l, T::one())
        }),
    )
}

pub fn sum<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (m, n, _) = dims(rng);
    (vec![rand_tensor(rng, &[m, n], 1.0)], Box::new(|t, v| t.sum(v[0])))
}

/// Fan-out and composition: a two-layer network with a residual.
pub fn two_layer<T: Real>(rng: &mut LensRng) -> Case<T> {
    let (b, d, h) = dims(rng);
    let d = d + 1;
    (
        vec![
            rand_tensor(rng, &[b, d], 1.0),
            rand_tensor(rng, &[d, h], 0.5),
            rand_tensor(rng, &[h], 0.5),
            rand_tensor(rng, &[h, d], 0.5),
            rand_tensor(rng, &[d], 1.0),
            rand_tensor(rng, &[d], 1.0),
        ],
        Box::new(|t, v| {
            let z = t.matmul(v[0], v[1]).unwrap();
            let z = t.add_row(z, v[2]).unwrap();
            let z = t.gelu(z);
            let z = t.matmul(z, v[3]).unwrap();
            let z = t.add(z, v[0]).unwrap();
            t.layer_norm(z, v[4], v[5]).unwrap()
        }),
    )
}

/// Every primitive case builder, by name.
pub fn all<T: Real>() -> Vec<(&'static str, fn(&mut LensRng) -> Case<T>)> {
    vec![
        ("matmul", matmul::<T>),
        ("add", add::<T>),
        ("mul", mul::<T>),
        ("add_row", add_row::<T>),
        ("scale", scale::<T>),
        ("gelu", gelu::<T>),
        ("layer_norm", layer_norm::<T>),
        ("softmax", softmax::<T>),
        ("gather", gather::<T>),
        ("concat", concat::<T>),
        ("attention", attention::<T>),
        ("cross_entropy", cross_entropy::<T>),
        ("sum", sum::<T>),
        ("two_layer", two_layer::<T>),
    ]
}
