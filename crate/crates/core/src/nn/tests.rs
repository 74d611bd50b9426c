use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compare reverse-mode gradients of `sum(f(inputs) * r)` against central
/// finite differences for every element of every input.
fn check_grads(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let build = |inputs: &[Tensor], r: Option<&Tensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let r = r.cloned().unwrap_or_else(|| Tensor::full(g.shape(out).to_vec(), 1.0));
        let rv = g.constant(r);
        let prod = g.mul(out, rv);
        let loss = g.sum_all(prod);
        (g, vars, loss)
    };
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        random(g.shape(out), &mut rng)
    };
    let (g, vars, loss) = build(&inputs, Some(&probe));
    let grads = g.backward(loss);
    let eps = 1e-2f32;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[which]).expect("gradient present").to_vec();
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= eps;
            let (gp, _, lp) = build(&plus, Some(&probe));
            let (gm, _, lm) = build(&minus, Some(&probe));
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
            let a = analytic[i];
            let tol = 2e-2 * (1.0 + numeric.abs().max(a.abs()));
            assert!(
                (a - numeric).abs() <= tol,
                "input {which} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)];
    check_grads(inputs, |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn conv_gradients_same_and_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[2, 3, 4, 2], &mut rng), random(&[18, 3], &mut rng), random(&[3], &mut rng)];
    check_grads(inputs.clone(), |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(3)));
    check_grads(inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::strided(3, 2)));
}

#[test]
fn broadcast_binary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&[2, 3, 4, 2], &mut rng), random(&[2, 1, 4, 2], &mut rng)];
    check_grads(inputs.clone(), |g, v| g.add(v[0], v[1]));
    check_grads(inputs.clone(), |g, v| g.sub(v[0], v[1]));
    check_grads(inputs, |g, v| g.mul(v[0], v[1]));
    let inputs = vec![random(&[1, 3, 1], &mut rng), random(&[2, 1, 4], &mut rng)];
    check_grads(inputs, |g, v| g.mul(v[0], v[1]));
}

#[test]
fn pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[3, 5], &mut rng)];
    check_grads(inputs.clone(), |g, v| g.silu(v[0]));
    check_grads(inputs.clone(), |g, v| g.square(v[0]));
    check_grads(inputs.clone(), |g, v| g.scale(v[0], -2.5));
    check_grads(inputs, |g, v| {
        let m = g.mean_all(v[0]);
        g.square(m)
    });
}

#[test]
fn group_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![random(&[2, 2, 3, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)];
    check_grads(inputs, |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));
}

#[test]
fn pool_upsample_concat_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[2, 2, 4, 3], &mut rng);
    check_grads(vec![x.clone()], |g, v| g.avg_pool2d(v[0], 1, 2));
    check_grads(vec![x.clone()], |g, v| g.upsample2d(v[0], 2, 2));
    check_grads(vec![x.clone(), random(&[2, 2, 4, 1], &mut rng)], |g, v| g.concat_last(v[0], v[1]));
    check_grads(vec![x], |g, v| g.reshape(v[0], &[4, 12]));
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        random(&[2, 5, 3], &mut rng),
        random(&[2, 5, 3], &mut rng),
        random(&[2, 5, 3], &mut rng),
    ];
    check_grads(inputs, |g, v| g.attention(v[0], v[1], v[2]));
}

#[test]
fn attention_rows_are_convex_combinations() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(vec![1, 4, 2]));
    let k = g.constant(Tensor::zeros(vec![1, 4, 2]));
    let v = g.constant(Tensor::new(vec![1, 4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]));
    let out = g.attention(q, k, v);
    // uniform weights average the values
    for row in g.value(out).data().chunks(2) {
        assert!((row[0] - 4.0).abs() < 1e-6 && (row[1] - 5.0).abs() < 1e-6);
    }
}

#[test]
fn group_norm_of_constant_input_is_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 3, 3, 4]));
    let gamma = g.constant(Tensor::full(vec![4], 1.0));
    let beta = g.constant(Tensor::zeros(vec![4]));
    let y = g.group_norm(x, gamma, beta, 2, 1e-5);
    assert!(g.value(y).all_finite());
}

#[test]
fn adam_moves_parameters_against_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]));
    let mut adam = Adam::new(0.1);
    for _ in 0..50 {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.square(w);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        adam.step(&mut store, &grads);
    }
    assert!(store.get(id).data().iter().all(|v| v.abs() < 0.2));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![3], vec![0.5, -0.25, 2.0]));
    let before = store.clone();
    let mut adam = Adam::new(0.0);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let loss = g.sum_all(w);
    let grads = g.backward(loss);
    adam.step(&mut store, &grads);
    assert_eq!(store, before);
}
